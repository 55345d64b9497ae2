use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use super::Extractor;
use crate::codec::{put_bytes, put_f64, put_u16, put_u32, Reader};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"HEMB";
const VERSION: u16 = 1;

/// Embeddings keyed by case id for one frozen extractor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EmbeddingCache {
    extractor_hash: String,
    dim: usize,
    entries: BTreeMap<String, Vec<f64>>,
}

impl EmbeddingCache {
    pub fn new(extractor: &Extractor) -> Result<Self> {
        Ok(Self {
            extractor_hash: extractor.hash()?,
            dim: extractor.embedding_dim(),
            entries: BTreeMap::new(),
        })
    }

    pub fn extractor_hash(&self) -> &str {
        &self.extractor_hash
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, case_id: &str) -> Option<&[f64]> {
        self.entries.get(case_id).map(Vec::as_slice)
    }

    pub fn insert(&mut self, case_id: String, embedding: Vec<f64>) {
        self.entries.insert(case_id, embedding);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn check_extractor(&self, extractor: &Extractor) -> Result<()> {
        let h = extractor.hash()?;
        if h != self.extractor_hash {
            return Err(Error::State(format!(
                "embedding cache belongs to extractor {}, not {h}",
                self.extractor_hash
            )));
        }
        Ok(())
    }

    /// Conventional file for an extractor inside a cache directory.
    pub fn path_in(dir: &Path, extractor: &Extractor) -> Result<PathBuf> {
        Ok(dir.join(format!("{}.emb", extractor.hash()?)))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        put_u16(&mut buf, VERSION);
        put_bytes(&mut buf, self.extractor_hash.as_bytes());
        put_u32(&mut buf, self.dim as u32);
        put_u32(&mut buf, self.entries.len() as u32);
        for (k, v) in &self.entries {
            put_bytes(&mut buf, k.as_bytes());
            for x in v {
                put_f64(&mut buf, *x);
            }
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != MAGIC {
            return Err(Error::Corrupt("not an embedding cache".into()));
        }
        let v = r.u16()?;
        if v != VERSION {
            return Err(Error::Version {
                found: v as u32,
                expected: VERSION as u32,
            });
        }
        let utf8 = |b: &[u8]| {
            String::from_utf8(b.to_vec()).map_err(|_| Error::Corrupt("cache key is not UTF-8".into()))
        };
        let extractor_hash = utf8(r.bytes()?)?;
        let dim = r.u32()? as usize;
        let n = r.u32()? as usize;
        let mut entries = BTreeMap::new();
        for _ in 0..n {
            let k = utf8(r.bytes()?)?;
            let v = (0..dim).map(|_| r.f64()).collect::<Result<Vec<f64>>>()?;
            entries.insert(k, v);
        }
        r.finish()?;
        Ok(Self {
            extractor_hash,
            dim,
            entries,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Reuse the cache at `path` when it matches the extractor, else start
    /// an empty one.
    pub fn load_or_new(path: &Path, extractor: &Extractor) -> Result<Self> {
        if path.exists() {
            let c = Self::load(path)?;
            if c.check_extractor(extractor).is_ok() {
                return Ok(c);
            }
        }
        Self::new(extractor)
    }
}
