use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{
    mean_pool, mean_pool_backward, positional_encoding, BatchNorm2d, Conv2d, Dense, GruLayer,
    LayerNorm, MaxPool2d, MultiHeadAttention, Relu,
};
use super::{DecoderKind, NetworkConfig, Param};
use crate::error::{Error, Result};

/// Three conv → batch-norm → ReLU → max-pool blocks followed by two dense
/// layers, mapping one `C × side × side` frame to an embedding.
#[derive(Clone, Debug)]
pub struct CnnEncoder {
    pub conv: Vec<Conv2d>,
    pub bn: Vec<BatchNorm2d>,
    relu: Vec<Relu>,
    pool: Vec<MaxPool2d>,
    pub dense1: Dense,
    relu_d: Relu,
    pub dense2: Dense,
    /// Spatial side after each conv and pool.
    trace: Vec<usize>,
    channels: usize,
}

impl CnnEncoder {
    pub fn new(channels: usize, side: usize, widths: [usize; 3], embed: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut trace = vec![side];
        let mut s = side;
        for _ in 0..3 {
            if s < 3 {
                return Err(Error::Dimension(format!("frame side {side} too small for the encoder")));
            }
            s = Conv2d::out_size(s);
            trace.push(s);
            s = MaxPool2d::out_size(s);
            trace.push(s);
        }
        if s == 0 {
            return Err(Error::Dimension(format!("frame side {side} pools to nothing")));
        }
        let mut cin = channels;
        let mut conv = Vec::new();
        let mut bn = Vec::new();
        for (i, &w) in widths.iter().enumerate() {
            conv.push(Conv2d::new(&format!("encoder.conv{}", i + 1), cin, w, rng));
            bn.push(BatchNorm2d::new(&format!("encoder.bn{}", i + 1), w));
            cin = w;
        }
        let flat = cin * s * s;
        Ok(Self {
            conv,
            bn,
            relu: vec![Relu::default(); 3],
            pool: vec![MaxPool2d::default(); 3],
            dense1: Dense::new("encoder.dense1", flat, embed, rng),
            relu_d: Relu::default(),
            dense2: Dense::new("encoder.dense2", embed, embed, rng),
            trace,
            channels,
        })
    }

    /// Spatial sizes through the network, e.g. 25→23→11→9→4→2→1.
    pub fn spatial_trace(&self) -> &[usize] {
        &self.trace
    }

    pub fn embed_dim(&self) -> usize {
        self.dense2.out
    }

    pub fn infer(&self, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        let mut c = self.channels;
        for k in 0..3 {
            let s = self.trace[2 * k];
            h = self.conv[k].infer(&h, s, s);
            c = self.conv[k].cout;
            let so = self.trace[2 * k + 1];
            h = self.bn[k].infer(&h, so * so);
            h = Relu::infer(&h);
            let planes = h.len() / (so * so);
            h = MaxPool2d::infer(&h, planes, so, so);
        }
        let _ = c;
        let h = self.dense1.infer(&h);
        self.dense2.infer(&Relu::infer(&h))
    }

    pub fn forward(&mut self, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        for k in 0..3 {
            let s = self.trace[2 * k];
            h = self.conv[k].forward(&h, s, s);
            let so = self.trace[2 * k + 1];
            h = self.bn[k].forward(&h, so * so);
            h = self.relu[k].forward(&h);
            let planes = h.len() / (so * so);
            h = self.pool[k].forward(&h, planes, so, so);
        }
        let h = self.dense1.forward(&h);
        let h = self.relu_d.forward(&h);
        self.dense2.forward(&h)
    }

    pub fn backward(&mut self, dy: &[f64]) -> Vec<f64> {
        let d = self.dense2.backward(dy);
        let d = self.relu_d.backward(&d);
        let mut d = self.dense1.backward(&d);
        for k in (0..3).rev() {
            d = self.pool[k].backward(&d);
            d = self.relu[k].backward(&d);
            d = self.bn[k].backward(&d);
            d = self.conv[k].backward(&d);
        }
        d
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = Vec::new();
        for (c, b) in self.conv.iter_mut().zip(self.bn.iter_mut()) {
            v.extend(c.params_mut());
            v.extend(b.params_mut());
        }
        v.extend(self.dense1.params_mut());
        v.extend(self.dense2.params_mut());
        v
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut v = Vec::new();
        for (c, b) in self.conv.iter().zip(self.bn.iter()) {
            v.extend(c.params());
            v.extend(b.params());
        }
        v.extend(self.dense1.params());
        v.extend(self.dense2.params());
        v
    }
}

/// Stacked GRU over the step sequence; the concatenated top-layer hidden
/// states pass through a three-layer head. The post-ReLU output of the
/// second head layer is the embedding.
#[derive(Clone, Debug)]
pub struct GruDecoder {
    pub layers: Vec<GruLayer>,
    pub head1: Dense,
    relu1: Relu,
    pub head2: Dense,
    relu2: Relu,
    pub out: Dense,
    seq: usize,
}

impl GruDecoder {
    pub fn new(input: usize, cfg: &NetworkConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut layers = Vec::new();
        let mut i = input;
        for l in 0..cfg.gru_layers {
            layers.push(GruLayer::new(&format!("gru.layer{l}"), i, cfg.gru_hidden, rng));
            i = cfg.gru_hidden;
        }
        let concat = cfg.seq_len * cfg.gru_hidden;
        Self {
            layers,
            head1: Dense::new("gru.head1", concat, cfg.head_dims[0], rng),
            relu1: Relu::default(),
            head2: Dense::new("gru.head2", cfg.head_dims[0], cfg.head_dims[1], rng),
            relu2: Relu::default(),
            out: Dense::new("gru.out", cfg.head_dims[1], cfg.target.outputs(), rng),
            seq: cfg.seq_len,
        }
    }

    /// Length of the concatenated hidden states fed to the head.
    pub fn concat_len(&self) -> usize {
        self.head1.inp
    }

    /// `(prediction, embedding)`.
    pub fn infer(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut h = x.to_vec();
        for l in &self.layers {
            h = l.infer(&h, self.seq);
        }
        let h = Relu::infer(&self.head1.infer(&h));
        let emb = Relu::infer(&self.head2.infer(&h));
        (self.out.infer(&emb), emb)
    }

    /// Top-layer hidden states `(B, L, H)`.
    pub fn hidden_states(&self, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        for l in &self.layers {
            h = l.infer(&h, self.seq);
        }
        h
    }

    pub fn forward(&mut self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut h = x.to_vec();
        for l in &mut self.layers {
            h = l.forward(&h, self.seq);
        }
        let h = self.head1.forward(&h);
        let h = self.relu1.forward(&h);
        let h = self.head2.forward(&h);
        let emb = self.relu2.forward(&h);
        (self.out.forward(&emb), emb)
    }

    pub fn backward(&mut self, dpred: &[f64]) -> Vec<f64> {
        let d = self.out.backward(dpred);
        let d = self.relu2.backward(&d);
        let d = self.head2.backward(&d);
        let d = self.relu1.backward(&d);
        let mut d = self.head1.backward(&d);
        for l in self.layers.iter_mut().rev() {
            d = l.backward(&d);
        }
        d
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = Vec::new();
        for l in &mut self.layers {
            v.extend(l.params_mut());
        }
        v.extend(self.head1.params_mut());
        v.extend(self.head2.params_mut());
        v.extend(self.out.params_mut());
        v
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut v = Vec::new();
        for l in &self.layers {
            v.extend(l.params());
        }
        v.extend(self.head1.params());
        v.extend(self.head2.params());
        v.extend(self.out.params());
        v
    }
}

/// Post-norm encoder layer: `x = LN(x + MHA(x))`, `x = LN(x + FFN(x))`.
#[derive(Clone, Debug)]
pub struct TransformerLayer {
    pub attn: MultiHeadAttention,
    pub ln1: LayerNorm,
    pub ff1: Dense,
    relu: Relu,
    pub ff2: Dense,
    pub ln2: LayerNorm,
}

impl TransformerLayer {
    pub fn new(name: &str, d: usize, heads: usize, ff: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            attn: MultiHeadAttention::new(&format!("{name}.attn"), d, heads, rng),
            ln1: LayerNorm::new(&format!("{name}.ln1"), d),
            ff1: Dense::new(&format!("{name}.ff1"), d, ff, rng),
            relu: Relu::default(),
            ff2: Dense::new(&format!("{name}.ff2"), ff, d, rng),
            ln2: LayerNorm::new(&format!("{name}.ln2"), d),
        }
    }

    pub fn infer(&self, x: &[f64], seq: usize) -> Vec<f64> {
        let a = self.attn.infer(x, seq);
        let s: Vec<f64> = x.iter().zip(&a).map(|(p, q)| p + q).collect();
        let x1 = self.ln1.infer(&s);
        let f = self.ff2.infer(&Relu::infer(&self.ff1.infer(&x1)));
        let s2: Vec<f64> = x1.iter().zip(&f).map(|(p, q)| p + q).collect();
        self.ln2.infer(&s2)
    }

    pub fn forward(&mut self, x: &[f64], seq: usize) -> Vec<f64> {
        let a = self.attn.forward(x, seq);
        let s: Vec<f64> = x.iter().zip(&a).map(|(p, q)| p + q).collect();
        let x1 = self.ln1.forward(&s);
        let f = self.ff1.forward(&x1);
        let f = self.relu.forward(&f);
        let f = self.ff2.forward(&f);
        let s2: Vec<f64> = x1.iter().zip(&f).map(|(p, q)| p + q).collect();
        self.ln2.forward(&s2)
    }

    pub fn backward(&mut self, dy: &[f64]) -> Vec<f64> {
        let ds2 = self.ln2.backward(dy);
        let df = self.ff2.backward(&ds2);
        let df = self.relu.backward(&df);
        let dx1_ff = self.ff1.backward(&df);
        let dx1: Vec<f64> = ds2.iter().zip(&dx1_ff).map(|(a, b)| a + b).collect();
        let ds = self.ln1.backward(&dx1);
        let dx_attn = self.attn.backward(&ds);
        ds.iter().zip(&dx_attn).map(|(a, b)| a + b).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.attn.params_mut();
        v.extend(self.ln1.params_mut());
        v.extend(self.ff1.params_mut());
        v.extend(self.ff2.params_mut());
        v.extend(self.ln2.params_mut());
        v
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut v = self.attn.params();
        v.extend(self.ln1.params());
        v.extend(self.ff1.params());
        v.extend(self.ff2.params());
        v.extend(self.ln2.params());
        v
    }
}

/// Learned projection to the model dimension, positional codes, encoder
/// layers, mean pooling over steps and a dense head. The pooled vector is
/// the embedding.
#[derive(Clone, Debug)]
pub struct TransformerDecoder {
    pub proj: Dense,
    pub layers: Vec<TransformerLayer>,
    pub head: Dense,
    /// `(L, d)` codes added after the projection; zeros when disabled.
    pe: Vec<f64>,
    seq: usize,
    dim: usize,
}

impl TransformerDecoder {
    pub fn new(input: usize, cfg: &NetworkConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.d_model;
        let pe = if cfg.positional_encoding {
            (0..cfg.seq_len).flat_map(|i| positional_encoding(i, d)).collect()
        } else {
            vec![0.0; cfg.seq_len * d]
        };
        Self {
            proj: Dense::new("transformer.proj", input, d, rng),
            layers: (0..cfg.tf_layers)
                .map(|l| TransformerLayer::new(&format!("transformer.layer{l}"), d, cfg.heads, cfg.ff_dim, rng))
                .collect(),
            head: Dense::new("transformer.head", d, cfg.target.outputs(), rng),
            pe,
            seq: cfg.seq_len,
            dim: d,
        }
    }

    fn add_pe(&self, h: &mut [f64]) {
        for row in h.chunks_exact_mut(self.seq * self.dim) {
            for (v, p) in row.iter_mut().zip(&self.pe) {
                *v += p;
            }
        }
    }

    pub fn infer(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut h = self.proj.infer(x);
        self.add_pe(&mut h);
        for l in &self.layers {
            h = l.infer(&h, self.seq);
        }
        let pooled = mean_pool(&h, self.seq, self.dim);
        (self.head.infer(&pooled), pooled)
    }

    /// Softmax weights of the first layer, `(B, heads, L, L)`.
    pub fn first_attention(&self, x: &[f64]) -> Vec<f64> {
        let mut h = self.proj.infer(x);
        self.add_pe(&mut h);
        self.layers[0].attn.weights(&h, self.seq)
    }

    pub fn forward(&mut self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut h = self.proj.forward(x);
        self.add_pe(&mut h);
        for l in &mut self.layers {
            h = l.forward(&h, self.seq);
        }
        let pooled = mean_pool(&h, self.seq, self.dim);
        (self.head.forward(&pooled), pooled)
    }

    pub fn backward(&mut self, dpred: &[f64]) -> Vec<f64> {
        let dp = self.head.backward(dpred);
        let mut d = mean_pool_backward(&dp, self.seq, self.dim);
        for l in self.layers.iter_mut().rev() {
            d = l.backward(&d);
        }
        self.proj.backward(&d)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.proj.params_mut();
        for l in &mut self.layers {
            v.extend(l.params_mut());
        }
        v.extend(self.head.params_mut());
        v
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut v = self.proj.params();
        for l in &self.layers {
            v.extend(l.params());
        }
        v.extend(self.head.params());
        v
    }
}

#[derive(Clone, Debug)]
pub enum Decoder {
    Gru(GruDecoder),
    Transformer(TransformerDecoder),
}

impl Decoder {
    fn infer(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        match self {
            Decoder::Gru(d) => d.infer(x),
            Decoder::Transformer(d) => d.infer(x),
        }
    }

    fn forward(&mut self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        match self {
            Decoder::Gru(d) => d.forward(x),
            Decoder::Transformer(d) => d.forward(x),
        }
    }

    fn backward(&mut self, d: &[f64]) -> Vec<f64> {
        match self {
            Decoder::Gru(g) => g.backward(d),
            Decoder::Transformer(t) => t.backward(d),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        match self {
            Decoder::Gru(d) => d.params_mut(),
            Decoder::Transformer(d) => d.params_mut(),
        }
    }

    fn params(&self) -> Vec<&Param> {
        match self {
            Decoder::Gru(d) => d.params(),
            Decoder::Transformer(d) => d.params(),
        }
    }
}

/// Encoder-decoder network. Each of the `L` frames of a case is encoded
/// separately; step `t` of the decoder input is the frame embedding
/// followed by the statistical features of that step.
#[derive(Clone, Debug)]
pub struct Network {
    pub config: NetworkConfig,
    pub encoder: CnnEncoder,
    pub decoder: Decoder,
    /// Target standardization fitted on training cases.
    pub target_mean: Vec<f64>,
    pub target_std: Vec<f64>,
    frozen: bool,
}

impl Network {
    pub fn new(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let encoder = CnnEncoder::new(config.channels, config.side, config.widths, config.embed_dim, &mut rng)?;
        let input = config.embed_dim + config.stat_dim;
        let decoder = match config.decoder {
            DecoderKind::Gru => Decoder::Gru(GruDecoder::new(input, &config, &mut rng)),
            DecoderKind::Transformer => {
                Decoder::Transformer(TransformerDecoder::new(input, &config, &mut rng))
            }
        };
        let c = config.target.outputs();
        Ok(Self {
            config,
            encoder,
            decoder,
            target_mean: vec![0.0; c],
            target_std: vec![1.0; c],
            frozen: false,
        })
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Round every value to f32 precision and mark the network read-only
    /// for extraction.
    pub fn freeze(&mut self) {
        for p in self.params_mut() {
            for v in &mut p.value {
                *v = *v as f32 as f64;
            }
        }
        for v in self.target_mean.iter_mut().chain(self.target_std.iter_mut()) {
            *v = *v as f32 as f64;
        }
        self.frozen = true;
    }

    pub(crate) fn mark_frozen(&mut self) {
        self.frozen = true;
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.encoder.params_mut();
        v.extend(self.decoder.params_mut());
        v
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut v = self.encoder.params();
        v.extend(self.decoder.params());
        v
    }

    fn check_batch(&self, frames: &[f64], stat: &[f64]) -> Result<usize> {
        let c = &self.config;
        let per_case = c.seq_len * c.frame_len();
        if per_case == 0 || frames.len() % per_case != 0 || frames.is_empty() {
            return Err(Error::Dimension(format!(
                "frames hold {} values, expected a multiple of {} ({} steps of {}x{}x{})",
                frames.len(),
                per_case,
                c.seq_len,
                c.channels,
                c.side,
                c.side
            )));
        }
        let batch = frames.len() / per_case;
        if stat.len() != batch * c.seq_len * c.stat_dim {
            return Err(Error::Dimension(format!(
                "statistical block has {} values, expected {} for {batch} cases",
                stat.len(),
                batch * c.seq_len * c.stat_dim
            )));
        }
        Ok(batch)
    }

    fn sequence(&self, emb: &[f64], stat: &[f64], batch: usize) -> Vec<f64> {
        let (e, s, l) = (self.config.embed_dim, self.config.stat_dim, self.config.seq_len);
        let mut seq = Vec::with_capacity(batch * l * (e + s));
        for k in 0..batch * l {
            seq.extend_from_slice(&emb[k * e..(k + 1) * e]);
            seq.extend_from_slice(&stat[k * s..(k + 1) * s]);
        }
        seq
    }

    /// Standardized predictions and embeddings, `(B, c)` and `(B, emb)`.
    pub fn infer(&self, frames: &[f64], stat: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let batch = self.check_batch(frames, stat)?;
        let emb = self.encoder.infer(frames);
        let seq = self.sequence(&emb, stat, batch);
        Ok(self.decoder.infer(&seq))
    }

    /// Decoder input sequence `(B, L, E + S)`.
    pub fn decoder_input(&self, frames: &[f64], stat: &[f64]) -> Result<Vec<f64>> {
        let batch = self.check_batch(frames, stat)?;
        Ok(self.sequence(&self.encoder.infer(frames), stat, batch))
    }

    pub fn forward(&mut self, frames: &[f64], stat: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let batch = self.check_batch(frames, stat)?;
        let emb = self.encoder.forward(frames);
        let seq = self.sequence(&emb, stat, batch);
        Ok(self.decoder.forward(&seq))
    }

    /// Back-propagate a gradient on the standardized predictions; returns
    /// the gradient on the statistical inputs.
    pub fn backward(&mut self, dpred: &[f64]) -> Vec<f64> {
        let (e, s) = (self.config.embed_dim, self.config.stat_dim);
        let dseq = self.decoder.backward(dpred);
        let rows = dseq.len() / (e + s);
        let mut demb = Vec::with_capacity(rows * e);
        let mut dstat = Vec::with_capacity(rows * s);
        for r in dseq.chunks_exact(e + s) {
            demb.extend_from_slice(&r[..e]);
            dstat.extend_from_slice(&r[e..]);
        }
        self.encoder.backward(&demb);
        dstat
    }

    /// Predictions in target units.
    pub fn predict(&self, frames: &[f64], stat: &[f64]) -> Result<Vec<f64>> {
        let (p, _) = self.infer(frames, stat)?;
        let c = self.target_mean.len();
        Ok(p.iter()
            .enumerate()
            .map(|(i, v)| v * self.target_std[i % c] + self.target_mean[i % c])
            .collect())
    }

    /// Embeddings of a batch of cases from a frozen network.
    pub fn embed(&self, frames: &[f64], stat: &[f64]) -> Result<Vec<f64>> {
        if !self.frozen {
            return Err(Error::State("embeddings require a frozen network".into()));
        }
        Ok(self.infer(frames, stat)?.1)
    }

    pub fn embedding_dim(&self) -> usize {
        self.config.embedding_dim()
    }
}
