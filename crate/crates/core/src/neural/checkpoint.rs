use std::collections::BTreeMap;

use super::{DecoderKind, Network, NetworkConfig, TargetKind};
use crate::codec::{put_u16, put_u32, Reader};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"HNCK";
pub const CHECKPOINT_VERSION: u16 = 1;

const ARCH: &str = "meta.arch";
const TARGET_MEAN: &str = "meta.target_mean";
const TARGET_STD: &str = "meta.target_std";

fn arch_block(c: &NetworkConfig) -> Vec<f64> {
    let decoder = match c.decoder {
        DecoderKind::Gru => 0,
        DecoderKind::Transformer => 1,
    };
    let target = match c.target {
        TargetKind::Intensity => 0,
        TargetKind::Track => 1,
    };
    let mut v: Vec<u64> = vec![
        decoder,
        target,
        c.stat_dim as u64,
        c.seq_len as u64,
        c.channels as u64,
        c.side as u64,
        c.widths[0] as u64,
        c.widths[1] as u64,
        c.widths[2] as u64,
        c.embed_dim as u64,
        c.gru_hidden as u64,
        c.gru_layers as u64,
        c.head_dims[0] as u64,
        c.head_dims[1] as u64,
        c.d_model as u64,
        c.heads as u64,
        c.ff_dim as u64,
        c.tf_layers as u64,
        c.positional_encoding as u64,
    ];
    // 16-bit chunks stay exact in f32.
    v.extend((0..4).map(|k| (c.seed >> (16 * k)) & 0xffff));
    v.into_iter().map(|x| x as f64).collect()
}

fn parse_arch(v: &[f64]) -> Result<NetworkConfig> {
    if v.len() != 23 || v.iter().any(|x| x.fract() != 0.0 || *x < 0.0) {
        return Err(Error::Corrupt("malformed architecture block".into()));
    }
    let u = |i: usize| v[i] as usize;
    let decoder = match u(0) {
        0 => DecoderKind::Gru,
        1 => DecoderKind::Transformer,
        k => return Err(Error::Corrupt(format!("unknown decoder code {k}"))),
    };
    let target = match u(1) {
        0 => TargetKind::Intensity,
        1 => TargetKind::Track,
        k => return Err(Error::Corrupt(format!("unknown target code {k}"))),
    };
    let seed = (0..4).fold(0u64, |s, k| s | ((v[19 + k] as u64) << (16 * k)));
    Ok(NetworkConfig {
        decoder,
        target,
        stat_dim: u(2),
        seq_len: u(3),
        channels: u(4),
        side: u(5),
        widths: [u(6), u(7), u(8)],
        embed_dim: u(9),
        gru_hidden: u(10),
        gru_layers: u(11),
        head_dims: [u(12), u(13)],
        d_model: u(14),
        heads: u(15),
        ff_dim: u(16),
        tf_layers: u(17),
        positional_encoding: u(18) == 1,
        seed,
    })
}

fn put_block(buf: &mut Vec<u8>, name: &str, values: &[f64]) {
    put_u16(buf, name.len() as u16);
    buf.extend_from_slice(name.as_bytes());
    put_u32(buf, values.len() as u32);
    for v in values {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
}

/// Serialize a frozen network. Every value is already f32-representable,
/// so the round trip is exact.
pub fn write_checkpoint(net: &Network) -> Result<Vec<u8>> {
    if !net.is_frozen() {
        return Err(Error::State("only frozen networks can be checkpointed".into()));
    }
    let params = net.params();
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    put_u16(&mut buf, CHECKPOINT_VERSION);
    put_u32(&mut buf, params.len() as u32 + 3);
    put_block(&mut buf, ARCH, &arch_block(&net.config));
    put_block(&mut buf, TARGET_MEAN, &net.target_mean);
    put_block(&mut buf, TARGET_STD, &net.target_std);
    for p in params {
        put_block(&mut buf, &p.name, &p.value);
    }
    Ok(buf)
}

/// Decode a checkpoint into a frozen network.
pub fn read_checkpoint(bytes: &[u8]) -> Result<Network> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Corrupt("not a network checkpoint".into()));
    }
    let version = r.u16()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version as u32,
            expected: CHECKPOINT_VERSION as u32,
        });
    }
    let n = r.u32()? as usize;
    let mut blocks = BTreeMap::new();
    for _ in 0..n {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Corrupt("block name is not UTF-8".into()))?
            .to_string();
        let count = r.u32()? as usize;
        let mut values = Vec::with_capacity(count.min(r.remaining() / 4));
        for _ in 0..count {
            values.push(r.f32()? as f64);
        }
        if blocks.insert(name.clone(), values).is_some() {
            return Err(Error::Corrupt(format!("duplicate block {name}")));
        }
    }
    r.finish()?;

    let mut take = |name: &str| {
        blocks
            .remove(name)
            .ok_or_else(|| Error::Corrupt(format!("missing block {name}")))
    };
    let config = parse_arch(&take(ARCH)?)?;
    let mean = take(TARGET_MEAN)?;
    let std = take(TARGET_STD)?;
    let mut net = Network::new(config)?;
    if mean.len() != net.target_mean.len() || std.len() != net.target_std.len() {
        return Err(Error::Corrupt("target statistics have the wrong length".into()));
    }
    net.target_mean = mean;
    net.target_std = std;
    for p in net.params_mut() {
        let v = take(&p.name)?;
        if v.len() != p.value.len() {
            return Err(Error::Corrupt(format!(
                "block {} has {} values, expected {}",
                p.name,
                v.len(),
                p.value.len()
            )));
        }
        p.value = v;
    }
    if let Some(extra) = blocks.keys().next() {
        return Err(Error::Corrupt(format!("unexpected block {extra}")));
    }
    net.mark_frozen();
    Ok(net)
}
