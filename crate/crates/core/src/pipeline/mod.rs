//! Feature extraction, concatenation and per-target boosted trees, for the
//! six framework variants.
//!
//! A base variant (1 to 4) turns each case into the flattened, scaled
//! `8 × S` statistical block followed by an optional reanalysis embedding,
//! then fits one tree ensemble per target: intensity, Δlat and Δlon.
//! Variant 5 stacks the base variants with ElasticNet; variant 6 averages
//! variant 4 with operational members.

mod bundle;
mod cache;
mod ensemble;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::haversine;
use crate::forecast::ForecastRecord;
use crate::gbt::{self, GbtConfig, GbtModel};
use crate::matrix::Matrix;
use crate::neural::{
    self, train_encoder_decoder, Dataset, DecoderKind, EpochStats, Network, NetworkConfig,
    TargetKind, TrainConfig,
};
use crate::storm_data::{
    normalize_lon, Basin, FeatureLayout, ForecastCase, Scaler, Split, HISTORY_STEPS,
};
use crate::tensor_ops::window_from;
use crate::tensor_ops::{extract_vision_features, CubeScaler, FrameSource, VISION_RANKS};

pub use bundle::{load_bundle, read_bundle, save_bundle, write_bundle, BUNDLE_MAGIC, BUNDLE_VERSION};
pub use cache::EmbeddingCache;
pub use ensemble::{fit_huml_ensemble, huml_op_average, train_huml_ensemble, HumlEnsemble};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum HumlVariant {
    Stat,
    Tucker,
    CnnGru,
    CnnTransformer,
    Ensemble,
    OpAverage,
}

impl HumlVariant {
    pub const ALL: [HumlVariant; 6] = [
        HumlVariant::Stat,
        HumlVariant::Tucker,
        HumlVariant::CnnGru,
        HumlVariant::CnnTransformer,
        HumlVariant::Ensemble,
        HumlVariant::OpAverage,
    ];
    /// Variants trained directly on cases.
    pub const BASE: [HumlVariant; 4] = [
        HumlVariant::Stat,
        HumlVariant::Tucker,
        HumlVariant::CnnGru,
        HumlVariant::CnnTransformer,
    ];

    pub fn id(self) -> u8 {
        self as u8 + 1
    }

    pub fn from_id(id: u8) -> Result<Self> {
        Self::ALL
            .get((id as usize).wrapping_sub(1))
            .copied()
            .ok_or_else(|| Error::Config(format!("variant {id} is not one of 1-6")))
    }

    /// Model name used in forecast files and tables.
    pub fn label(self) -> &'static str {
        match self {
            HumlVariant::Stat => "HUML-(stat, xgb)",
            HumlVariant::Tucker => "HUML-(stat/viz, xgb/td)",
            HumlVariant::CnnGru => "HUML-(stat/viz, xgb/cnn/gru)",
            HumlVariant::CnnTransformer => "HUML-(stat/viz, xgb/cnn/transfo)",
            HumlVariant::Ensemble => "HUML-ensemble",
            HumlVariant::OpAverage => "HUML/OP-average consensus",
        }
    }

    pub fn is_base(self) -> bool {
        self.id() <= 4
    }

    pub fn uses_vision(self) -> bool {
        !matches!(self, HumlVariant::Stat)
    }

    pub fn extractor(self) -> ExtractorKind {
        match self {
            HumlVariant::Stat => ExtractorKind::None,
            HumlVariant::Tucker => ExtractorKind::Tucker,
            HumlVariant::CnnGru => ExtractorKind::CnnGru,
            HumlVariant::CnnTransformer => ExtractorKind::CnnTransformer,
            HumlVariant::Ensemble => ExtractorKind::Ensemble,
            HumlVariant::OpAverage => ExtractorKind::OpAverage,
        }
    }
}

impl fmt::Display for HumlVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.id())
    }
}

impl FromStr for HumlVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let id: u8 = s
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("variant {s:?} is not one of 1-6")))?;
        Self::from_id(id)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ExtractorKind {
    None,
    Tucker,
    CnnGru,
    CnnTransformer,
    Ensemble,
    OpAverage,
}

impl ExtractorKind {
    pub fn label(self) -> &'static str {
        match self {
            ExtractorKind::None => "none",
            ExtractorKind::Tucker => "tucker",
            ExtractorKind::CnnGru => "cnn-gru",
            ExtractorKind::CnnTransformer => "cnn-transformer",
            ExtractorKind::Ensemble => "ensemble",
            ExtractorKind::OpAverage => "huml/op-average",
        }
    }
}

/// Settings shared by every base variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub gbt: GbtConfig,
    /// Architecture template; decoder, target and input sizes are filled in
    /// per variant and data set.
    pub network: NetworkConfig,
    pub train: TrainConfig,
    /// Target the neural extractors are trained on.
    pub extractor_target: TargetKind,
    /// One tree triple per basin instead of a single global triple.
    pub per_basin: bool,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let target = TargetKind::Intensity;
        Self {
            gbt: GbtConfig::default(),
            network: NetworkConfig::new(DecoderKind::Gru, target, 27),
            train: TrainConfig::new(target),
            extractor_target: target,
            per_basin: false,
            seed: 0,
        }
    }
}

/// Frozen map from a case's cube window to a fixed-length embedding.
#[derive(Clone, Debug)]
pub enum Extractor {
    None,
    Tucker { cube_scaler: CubeScaler },
    Neural {
        network: Box<Network>,
        cube_scaler: CubeScaler,
    },
}

const EMBED_BATCH: usize = 32;

impl Extractor {
    pub fn kind(&self) -> ExtractorKind {
        match self {
            Extractor::None => ExtractorKind::None,
            Extractor::Tucker { .. } => ExtractorKind::Tucker,
            Extractor::Neural { network, .. } => match network.config.decoder {
                DecoderKind::Gru => ExtractorKind::CnnGru,
                DecoderKind::Transformer => ExtractorKind::CnnTransformer,
            },
        }
    }

    pub fn embedding_dim(&self) -> usize {
        match self {
            Extractor::None => 0,
            Extractor::Tucker { .. } => VISION_RANKS.iter().product(),
            Extractor::Neural { network, .. } => network.embedding_dim(),
        }
    }

    pub fn needs_frames(&self) -> bool {
        !matches!(self, Extractor::None)
    }

    /// Identity of the frozen extractor, used to key cached embeddings.
    pub fn hash(&self) -> Result<String> {
        let mut h = Sha256::new();
        h.update(self.kind().label().as_bytes());
        match self {
            Extractor::None => {}
            Extractor::Tucker { cube_scaler } => {
                for v in cube_scaler.mean.iter().chain(&cube_scaler.std) {
                    h.update(v.to_le_bytes());
                }
            }
            Extractor::Neural {
                network,
                cube_scaler,
            } => {
                h.update(neural::write_checkpoint(network)?);
                for v in cube_scaler.mean.iter().chain(&cube_scaler.std) {
                    h.update(v.to_le_bytes());
                }
            }
        }
        Ok(hex(&h.finalize()[..16]))
    }

    fn scaled_window(
        cube_scaler: &CubeScaler,
        case: &ForecastCase,
        frames: &dyn FrameSource,
    ) -> Result<Vec<f64>> {
        let t = window_from(frames, &case.storm_id, &case.history_times)?;
        Ok(cube_scaler.apply(&t)?.into_data())
    }

    /// Embeddings of several cases; `stat` holds each case's scaled
    /// statistical block.
    pub fn embed_cases(
        &self,
        cases: &[&ForecastCase],
        stat: &[Vec<f64>],
        frames: Option<&dyn FrameSource>,
    ) -> Result<Vec<Vec<f64>>> {
        if matches!(self, Extractor::None) {
            return Ok(vec![Vec::new(); cases.len()]);
        }
        let frames = frames.ok_or_else(|| {
            Error::Config(format!("{} extractor needs reanalysis frames", self.kind().label()))
        })?;
        match self {
            Extractor::None => unreachable!(),
            Extractor::Tucker { cube_scaler } => cases
                .iter()
                .map(|c| {
                    let t = window_from(frames, &c.storm_id, &c.history_times)?;
                    extract_vision_features(&cube_scaler.apply(&t)?)
                })
                .collect(),
            Extractor::Neural {
                network,
                cube_scaler,
            } => {
                let dim = network.embedding_dim();
                let mut out = Vec::with_capacity(cases.len());
                for (chunk, st) in cases.chunks(EMBED_BATCH).zip(stat.chunks(EMBED_BATCH)) {
                    let mut f = Vec::new();
                    for c in chunk {
                        f.extend(Self::scaled_window(cube_scaler, c, frames)?);
                    }
                    let s: Vec<f64> = st.concat();
                    let e = network.embed(&f, &s)?;
                    out.extend(e.chunks(dim).map(<[f64]>::to_vec));
                }
                Ok(out)
            }
        }
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Digest of the feature-vector layout: statistical column names, window
/// length and embedding kind and size.
pub fn layout_hash(layout: FeatureLayout, extractor: ExtractorKind, embedding_dim: usize) -> String {
    let desc = format!(
        "steps={HISTORY_STEPS};stat={};embedding={}:{embedding_dim}",
        layout.names().join(","),
        extractor.label()
    );
    hex(&Sha256::digest(desc.as_bytes())[..16])
}

/// Tree models for the three targets.
#[derive(Clone, Debug, PartialEq)]
pub struct GbtHeads {
    /// `None` for a global model.
    pub basin: Option<Basin>,
    pub intensity: GbtModel,
    pub dlat: GbtModel,
    pub dlon: GbtModel,
}

#[derive(Clone, Debug)]
pub struct ModelBundle {
    pub variant: HumlVariant,
    pub layout: FeatureLayout,
    pub scaler: Scaler,
    pub extractor: Extractor,
    pub heads: Vec<GbtHeads>,
    pub seed: u64,
}

impl ModelBundle {
    pub fn stat_dim(&self) -> usize {
        self.layout.dim()
    }

    pub fn embedding_dim(&self) -> usize {
        self.extractor.embedding_dim()
    }

    pub fn input_len(&self) -> usize {
        HISTORY_STEPS * self.stat_dim() + self.embedding_dim()
    }

    pub fn layout_hash(&self) -> String {
        layout_hash(self.layout, self.extractor.kind(), self.embedding_dim())
    }

    /// Structural consistency between variant, extractor, scaler and trees.
    pub fn validate(&self) -> Result<()> {
        if !self.variant.is_base() {
            return Err(Error::Config(format!(
                "variant {} is a combination, not a trainable bundle",
                self.variant
            )));
        }
        if self.variant.extractor() != self.extractor.kind() {
            return Err(Error::Config(format!(
                "variant {} expects a {} extractor, bundle holds {}",
                self.variant,
                self.variant.extractor().label(),
                self.extractor.kind().label()
            )));
        }
        if self.scaler.width() != self.stat_dim() {
            return Err(Error::Config(format!(
                "scaler width {} does not match S={}",
                self.scaler.width(),
                self.stat_dim()
            )));
        }
        if self.heads.is_empty() {
            return Err(Error::Config("bundle has no tree models".into()));
        }
        let n = self.input_len();
        for h in &self.heads {
            for m in [&h.intensity, &h.dlat, &h.dlon] {
                if m.n_features != n {
                    return Err(Error::Config(format!(
                        "tree model expects {} inputs, layout gives {n}",
                        m.n_features
                    )));
                }
            }
        }
        Ok(())
    }

    fn heads_for(&self, basin: Basin) -> Result<&GbtHeads> {
        self.heads
            .iter()
            .find(|h| h.basin.is_none_or(|b| b == basin))
            .ok_or_else(|| Error::Config(format!("bundle has no model for basin {basin}")))
    }

    pub fn scaled_stat(&self, case: &ForecastCase) -> Result<Vec<f64>> {
        scaled_stat(&self.scaler, case)
    }
}

fn scaled_stat(scaler: &Scaler, case: &ForecastCase) -> Result<Vec<f64>> {
    if case.stat_dim != scaler.width() || case.history_stat.len() != HISTORY_STEPS * case.stat_dim {
        return Err(Error::Dimension(format!(
            "case {} has S={} with {} history values; model expects S={}",
            case.id(),
            case.stat_dim,
            case.history_stat.len(),
            scaler.width()
        )));
    }
    let mut v = case.history_stat.clone();
    for row in v.chunks_exact_mut(case.stat_dim) {
        scaler.transform_row(row)?;
    }
    Ok(v)
}

/// Flattened scaled `8 × S` block followed by the case's embedding.
pub fn assemble_input(
    case: &ForecastCase,
    scaler: &Scaler,
    extractor: &Extractor,
    frames: Option<&dyn FrameSource>,
) -> Result<Vec<f64>> {
    let stat = scaled_stat(scaler, case)?;
    let emb = extractor.embed_cases(&[case], std::slice::from_ref(&stat), frames)?;
    Ok(concat_input(stat, &emb[0]))
}

fn concat_input(mut stat: Vec<f64>, emb: &[f64]) -> Vec<f64> {
    stat.extend_from_slice(emb);
    stat
}

/// Inputs for many cases, reusing cached embeddings where available.
pub fn assemble_inputs(
    cases: &[&ForecastCase],
    scaler: &Scaler,
    extractor: &Extractor,
    frames: Option<&dyn FrameSource>,
    mut cache: Option<&mut EmbeddingCache>,
) -> Result<Matrix> {
    let stats = cases
        .iter()
        .map(|c| scaled_stat(scaler, c))
        .collect::<Result<Vec<_>>>()?;
    let mut embeddings: Vec<Option<Vec<f64>>> = vec![None; cases.len()];
    if let Some(cache) = cache.as_deref() {
        cache.check_extractor(extractor)?;
        for (e, c) in embeddings.iter_mut().zip(cases) {
            *e = cache.get(&c.id()).map(<[f64]>::to_vec);
        }
    }
    let todo: Vec<usize> = (0..cases.len()).filter(|&i| embeddings[i].is_none()).collect();
    if !todo.is_empty() {
        let sub: Vec<&ForecastCase> = todo.iter().map(|&i| cases[i]).collect();
        let sub_stat: Vec<Vec<f64>> = todo.iter().map(|&i| stats[i].clone()).collect();
        let fresh = extractor.embed_cases(&sub, &sub_stat, frames)?;
        for (&i, e) in todo.iter().zip(fresh) {
            if let Some(cache) = cache.as_deref_mut() {
                cache.insert(cases[i].id(), e.clone());
            }
            embeddings[i] = Some(e);
        }
    }
    let width = HISTORY_STEPS * scaler.width() + extractor.embedding_dim();
    let mut data = Vec::with_capacity(cases.len() * width);
    for (s, e) in stats.into_iter().zip(embeddings) {
        let e = e.expect("every embedding filled");
        if e.len() != extractor.embedding_dim() {
            return Err(Error::Dimension(format!(
                "embedding of length {}, extractor gives {}",
                e.len(),
                extractor.embedding_dim()
            )));
        }
        data.extend(s);
        data.extend(e);
    }
    Matrix::from_vec(cases.len(), width, data)
}

/// Reject cases whose provenance tag differs from the expected split.
pub fn check_split(cases: &[ForecastCase], expected: Split) -> Result<()> {
    if let Some(c) = cases.iter().find(|c| c.split != expected) {
        return Err(Error::Leakage {
            case_id: c.id(),
            found: c.split.label().to_string(),
            expected: expected.label().to_string(),
        });
    }
    Ok(())
}

/// Neural training view over cases: scaled cube windows and statistics.
struct CaseDataset<'a> {
    cases: &'a [ForecastCase],
    stat: Vec<Vec<f64>>,
    frames: &'a dyn FrameSource,
    cube_scaler: &'a CubeScaler,
    target: TargetKind,
}

impl<'a> CaseDataset<'a> {
    fn new(
        cases: &'a [ForecastCase],
        scaler: &Scaler,
        frames: &'a dyn FrameSource,
        cube_scaler: &'a CubeScaler,
        target: TargetKind,
    ) -> Result<Self> {
        let stat = cases.iter().map(|c| scaled_stat(scaler, c)).collect::<Result<_>>()?;
        Ok(Self {
            cases,
            stat,
            frames,
            cube_scaler,
            target,
        })
    }
}

impl Dataset for CaseDataset<'_> {
    fn len(&self) -> usize {
        self.cases.len()
    }

    fn input(&self, i: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        let f = Extractor::scaled_window(self.cube_scaler, &self.cases[i], self.frames)?;
        Ok((f, self.stat[i].clone()))
    }

    fn target(&self, i: usize) -> Vec<f64> {
        let c = &self.cases[i];
        match self.target {
            TargetKind::Intensity => vec![c.target_intensity],
            TargetKind::Track => vec![c.target_dlat, c.target_dlon],
        }
    }
}

/// Validation mean absolute errors of a trained bundle.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationScores {
    pub cases: usize,
    pub intensity_mae: f64,
    pub dlat_mae: f64,
    pub dlon_mae: f64,
    /// Mean great-circle error of the reconstructed position, km.
    pub track_km: f64,
}

#[derive(Clone, Debug)]
pub struct VariantTraining {
    pub bundle: ModelBundle,
    pub validation: ValidationScores,
    /// Extractor learning curve for neural variants.
    pub curve: Option<Vec<EpochStats>>,
}

fn fit_cube_scaler(cases: &[ForecastCase], frames: &dyn FrameSource) -> Result<CubeScaler> {
    let mut seen = std::collections::HashSet::new();
    let mut list = Vec::new();
    for c in cases {
        for t in &c.history_times {
            if seen.insert((c.storm_id.as_str(), t.timestamp())) {
                let f = frames.frame(&c.storm_id, t).ok_or_else(|| Error::MissingCube {
                    storm_id: c.storm_id.clone(),
                    time: t.to_rfc3339(),
                })?;
                list.push(f);
            }
        }
    }
    CubeScaler::fit(frames.frame_dims().0, list)
}

fn fit_heads(x: &Matrix, cases: &[&ForecastCase], basin: Option<Basin>, cfg: &GbtConfig) -> Result<GbtHeads> {
    let col = |f: fn(&ForecastCase) -> f64| cases.iter().map(|c| f(c)).collect::<Vec<f64>>();
    Ok(GbtHeads {
        basin,
        intensity: gbt::fit(x, &col(|c| c.target_intensity), cfg)?,
        dlat: gbt::fit(x, &col(|c| c.target_dlat), cfg)?,
        dlon: gbt::fit(x, &col(|c| c.target_dlon), cfg)?,
    })
}

/// Train a base variant on training-period cases; validation-period cases
/// drive extractor early stopping and the reported scores.
pub fn train_variant(
    train: &[ForecastCase],
    val: &[ForecastCase],
    variant: HumlVariant,
    cfg: &PipelineConfig,
    frames: Option<&dyn FrameSource>,
) -> Result<VariantTraining> {
    if !variant.is_base() {
        return Err(Error::Config(format!(
            "variant {variant} combines trained variants; see the ensemble functions"
        )));
    }
    if train.is_empty() || val.is_empty() {
        return Err(Error::Empty("training and validation splits must be non-empty".into()));
    }
    check_split(train, Split::Train)?;
    check_split(val, Split::Validation)?;
    let stat_dim = train[0].stat_dim;
    let layout = FeatureLayout::for_dim(stat_dim)?;
    let mut rows = Vec::with_capacity(train.len() * HISTORY_STEPS * stat_dim);
    for c in train {
        if c.stat_dim != stat_dim {
            return Err(Error::Dimension(format!("case {} has S={}, expected {stat_dim}", c.id(), c.stat_dim)));
        }
        rows.extend_from_slice(&c.history_stat);
    }
    let scaler = Scaler::fitted(
        layout.passthrough_mask(),
        &Matrix::from_vec(train.len() * HISTORY_STEPS, stat_dim, rows)?,
    )?;

    let mut curve = None;
    let extractor = match variant.extractor() {
        ExtractorKind::None => Extractor::None,
        kind => {
            let frames = frames.ok_or_else(|| {
                Error::Config(format!("variant {variant} needs reanalysis frames"))
            })?;
            let cube_scaler = fit_cube_scaler(train, frames)?;
            match kind {
                ExtractorKind::Tucker => Extractor::Tucker { cube_scaler },
                _ => {
                    let (c, h, w) = frames.frame_dims();
                    if h != w {
                        return Err(Error::Dimension(format!("frames must be square, got {h}x{w}")));
                    }
                    let mut net_cfg = cfg.network.clone();
                    net_cfg.decoder = if kind == ExtractorKind::CnnGru {
                        DecoderKind::Gru
                    } else {
                        DecoderKind::Transformer
                    };
                    net_cfg.target = cfg.extractor_target;
                    net_cfg.stat_dim = stat_dim;
                    net_cfg.seq_len = HISTORY_STEPS;
                    net_cfg.channels = c;
                    net_cfg.side = h;
                    let tds = CaseDataset::new(train, &scaler, frames, &cube_scaler, cfg.extractor_target)?;
                    let vds = CaseDataset::new(val, &scaler, frames, &cube_scaler, cfg.extractor_target)?;
                    let out = train_encoder_decoder(net_cfg, &tds, &vds, &cfg.train)?;
                    if out.diverged {
                        log::warn!("variant {variant}: extractor training diverged; kept epoch {}", out.best_epoch);
                    }
                    curve = Some(out.curve);
                    Extractor::Neural {
                        network: Box::new(out.network),
                        cube_scaler,
                    }
                }
            }
        }
    };

    let train_refs: Vec<&ForecastCase> = train.iter().collect();
    let x = assemble_inputs(&train_refs, &scaler, &extractor, frames, None)?;
    let mut gbt_cfg = cfg.gbt.clone();
    gbt_cfg.seed = cfg.gbt.seed ^ cfg.seed;
    let mut heads = Vec::new();
    if cfg.per_basin {
        for &basin in Basin::ALL.iter() {
            let idx: Vec<usize> = (0..train.len()).filter(|&i| train[i].basin == basin).collect();
            if idx.is_empty() {
                continue;
            }
            let sub: Vec<&ForecastCase> = idx.iter().map(|&i| &train[i]).collect();
            heads.push(fit_heads(&x.select_rows(&idx), &sub, Some(basin), &gbt_cfg)?);
        }
    } else {
        heads.push(fit_heads(&x, &train_refs, None, &gbt_cfg)?);
    }
    let bundle = ModelBundle {
        variant,
        layout,
        scaler,
        extractor,
        heads,
        seed: cfg.seed,
    };
    bundle.validate()?;
    let preds = predict_cases(&bundle, val, frames, None)?;
    let validation = validation_scores(&preds, val);
    Ok(VariantTraining {
        bundle,
        validation,
        curve,
    })
}

fn validation_scores(preds: &[ForecastRecord], cases: &[ForecastCase]) -> ValidationScores {
    let n = cases.len() as f64;
    let mut s = ValidationScores {
        cases: cases.len(),
        intensity_mae: 0.0,
        dlat_mae: 0.0,
        dlon_mae: 0.0,
        track_km: 0.0,
    };
    for (p, c) in preds.iter().zip(cases) {
        let (dlat, dlon) = p.displacement.expect("bundle forecasts carry displacements");
        s.intensity_mae += (p.wind.expect("bundle forecasts carry winds") - c.target_intensity).abs() / n;
        s.dlat_mae += (dlat - c.target_dlat).abs() / n;
        s.dlon_mae += (dlon - c.target_dlon).abs() / n;
        s.track_km += haversine(p.position.expect("position"), (c.target_lat(), c.target_lon())) / n;
    }
    s
}

fn record_from(bundle: &ModelBundle, case: &ForecastCase, x: &[f64]) -> Result<ForecastRecord> {
    let h = bundle.heads_for(case.basin)?;
    let wind = h.intensity.predict_row(x)?;
    let dlat = h.dlat.predict_row(x)?;
    let dlon = h.dlon.predict_row(x)?;
    Ok(ForecastRecord {
        model: bundle.variant.label().to_string(),
        storm_id: case.storm_id.clone(),
        t0: case.t0,
        wind: Some(wind),
        displacement: Some((dlat, dlon)),
        position: Some((case.lat0 + dlat, normalize_lon(case.lon0 + dlon))),
    })
}

/// 24-hour forecast for one case.
pub fn predict_case(
    bundle: &ModelBundle,
    case: &ForecastCase,
    frames: Option<&dyn FrameSource>,
) -> Result<ForecastRecord> {
    let x = assemble_input(case, &bundle.scaler, &bundle.extractor, frames)?;
    record_from(bundle, case, &x)
}

/// Forecast from a precomputed embedding instead of the cube window.
pub fn predict_with_embedding(
    bundle: &ModelBundle,
    case: &ForecastCase,
    embedding: &[f64],
) -> Result<ForecastRecord> {
    if embedding.len() != bundle.embedding_dim() {
        return Err(Error::Dimension(format!(
            "embedding of length {}, bundle expects {}",
            embedding.len(),
            bundle.embedding_dim()
        )));
    }
    let x = concat_input(bundle.scaled_stat(case)?, embedding);
    record_from(bundle, case, &x)
}

/// Forecasts for many cases, batching extractor work.
pub fn predict_cases(
    bundle: &ModelBundle,
    cases: &[ForecastCase],
    frames: Option<&dyn FrameSource>,
    cache: Option<&mut EmbeddingCache>,
) -> Result<Vec<ForecastRecord>> {
    let refs: Vec<&ForecastCase> = cases.iter().collect();
    let x = assemble_inputs(&refs, &bundle.scaler, &bundle.extractor, frames, cache)?;
    cases
        .iter()
        .enumerate()
        .map(|(i, c)| record_from(bundle, c, x.row(i)))
        .collect()
}
