use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{layout_hash, Extractor, GbtHeads, HumlVariant, ModelBundle};
use crate::codec::{put_bytes, put_f64s, put_u16, put_u32, Reader};
use crate::error::{Error, Result};
use crate::gbt::{read_model, write_model};
use crate::neural::{read_checkpoint, write_checkpoint};
use crate::storm_data::{Basin, FeatureLayout, Scaler};
use crate::tensor_ops::CubeScaler;

pub const BUNDLE_MAGIC: &[u8; 4] = b"HBND";
pub const BUNDLE_VERSION: u16 = 1;

const DIGEST_LEN: usize = 32;
const GLOBAL: u8 = u8::MAX;

fn metadata(b: &ModelBundle) -> String {
    format!(
        "variant={}\nS={}\nE={}\nextractor={}\nlayout_hash={}\nseed={}\nheads={}\n",
        b.variant.id(),
        b.stat_dim(),
        b.embedding_dim(),
        b.extractor.kind().label(),
        b.layout_hash(),
        b.seed,
        b.heads.len()
    )
}

/// Serialize a bundle; the trailing SHA-256 covers every preceding byte.
pub fn write_bundle(b: &ModelBundle) -> Result<Vec<u8>> {
    b.validate()?;
    let mut buf = Vec::new();
    buf.extend_from_slice(BUNDLE_MAGIC);
    put_u16(&mut buf, BUNDLE_VERSION);
    put_bytes(&mut buf, metadata(b).as_bytes());

    put_u32(&mut buf, b.scaler.width() as u32);
    buf.extend(b.scaler.passthrough().iter().map(|&p| p as u8));
    put_f64s(&mut buf, b.scaler.mean());
    put_f64s(&mut buf, b.scaler.std());

    let cube = |buf: &mut Vec<u8>, s: &CubeScaler| {
        put_f64s(buf, &s.mean);
        put_f64s(buf, &s.std);
    };
    match &b.extractor {
        Extractor::None => buf.push(0),
        Extractor::Tucker { cube_scaler } => {
            buf.push(1);
            cube(&mut buf, cube_scaler);
        }
        Extractor::Neural {
            network,
            cube_scaler,
        } => {
            buf.push(2);
            cube(&mut buf, cube_scaler);
            put_bytes(&mut buf, &write_checkpoint(network)?);
        }
    }

    put_u32(&mut buf, b.heads.len() as u32);
    for h in &b.heads {
        buf.push(h.basin.map_or(GLOBAL, |x| x.index() as u8));
        for m in [&h.intensity, &h.dlat, &h.dlon] {
            write_model(&mut buf, m);
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    Ok(buf)
}

fn parse_metadata(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for line in text.lines().filter(|l| !l.is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Corrupt(format!("metadata line {line:?} lacks '='")))?;
        out.insert(k.to_string(), v.to_string());
    }
    Ok(out)
}

fn read_cube_scaler(r: &mut Reader<'_>) -> Result<CubeScaler> {
    let mean = r.f64s()?;
    let std = r.f64s()?;
    if mean.len() != std.len() || std.iter().any(|s| !(*s > 0.0)) {
        return Err(Error::Corrupt("invalid cube scaler".into()));
    }
    Ok(CubeScaler { mean, std })
}

pub fn read_bundle(bytes: &[u8]) -> Result<ModelBundle> {
    if bytes.len() < 6 || &bytes[..4] != BUNDLE_MAGIC {
        return Err(Error::Corrupt("not a model bundle".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != BUNDLE_VERSION {
        return Err(Error::Version {
            found: version as u32,
            expected: BUNDLE_VERSION as u32,
        });
    }
    if bytes.len() < 6 + DIGEST_LEN {
        return Err(Error::Corrupt("bundle truncated".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Corrupt("bundle checksum mismatch (truncated or damaged)".into()));
    }

    let mut r = Reader::new(&body[6..]);
    let meta = std::str::from_utf8(r.bytes()?)
        .map_err(|_| Error::Corrupt("metadata is not UTF-8".into()))?;
    let meta = parse_metadata(meta)?;
    let field = |k: &str| {
        meta.get(k)
            .ok_or_else(|| Error::Corrupt(format!("metadata lacks {k}")))
    };
    let num = |k: &str| -> Result<u64> {
        field(k)?
            .parse()
            .map_err(|_| Error::Corrupt(format!("metadata {k} is not a number")))
    };
    let variant = HumlVariant::from_id(num("variant")? as u8)?;
    let layout = FeatureLayout::for_dim(num("S")? as usize)?;
    let seed = num("seed")?;

    let width = r.u32()? as usize;
    let passthrough: Vec<bool> = r.take(width)?.iter().map(|b| *b != 0).collect();
    let scaler = Scaler::from_parts(passthrough, r.f64s()?, r.f64s()?)?;

    let extractor = match r.u8()? {
        0 => Extractor::None,
        1 => Extractor::Tucker {
            cube_scaler: read_cube_scaler(&mut r)?,
        },
        2 => {
            let cube_scaler = read_cube_scaler(&mut r)?;
            let network = read_checkpoint(r.bytes()?)?;
            Extractor::Neural {
                network: Box::new(network),
                cube_scaler,
            }
        }
        t => return Err(Error::Corrupt(format!("unknown extractor tag {t}"))),
    };

    let n_heads = r.u32()? as usize;
    let mut heads = Vec::with_capacity(n_heads.min(Basin::ALL.len()));
    for _ in 0..n_heads {
        let basin = match r.u8()? {
            GLOBAL => None,
            i => Some(
                *Basin::ALL
                    .get(i as usize)
                    .ok_or_else(|| Error::Corrupt(format!("unknown basin code {i}")))?,
            ),
        };
        heads.push(GbtHeads {
            basin,
            intensity: read_model(&mut r)?,
            dlat: read_model(&mut r)?,
            dlon: read_model(&mut r)?,
        });
    }
    r.finish()?;

    let bundle = ModelBundle {
        variant,
        layout,
        scaler,
        extractor,
        heads,
        seed,
    };
    let expected = layout_hash(layout, bundle.extractor.kind(), bundle.embedding_dim());
    if field("layout_hash")? != &expected {
        return Err(Error::Corrupt(format!(
            "layout hash {} does not match the stored model ({expected})",
            field("layout_hash")?
        )));
    }
    if num("E")? as usize != bundle.embedding_dim() {
        return Err(Error::Corrupt("embedding size disagrees with the extractor".into()));
    }
    bundle.validate()?;
    Ok(bundle)
}

pub fn save_bundle(b: &ModelBundle, path: &Path) -> Result<()> {
    let bytes = write_bundle(b)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_bundle(path: &Path) -> Result<ModelBundle> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_bundle(&bytes)
}
