use std::fs::{self, File, OpenOptions};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use hurricast::config::RunConfig;
use hurricast::pipeline::HumlVariant;
use hurricast::storm_data::{ForecastCase, Split, SplitCases};
use hurricast::tensor_ops::CubeStore;

use crate::Common;

pub const SEED_VAR: &str = "HURICAST_SEED";
const LOCK_NAME: &str = ".hurricast.lock";
const CASES_NAME: &str = "cases.json";
const CONFIG_NAME: &str = "effective.cfg";

/// Effective configuration: defaults, then the config file, then
/// `HURICAST_SEED`, then command-line flags.
pub fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading config {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Ok(v) = std::env::var(SEED_VAR) {
        cfg.seed = v
            .trim()
            .parse()
            .with_context(|| format!("{SEED_VAR}={v:?} is not an unsigned integer"))?;
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.paths.out = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Exclusive hold on an output directory for the life of one command.
pub struct Workspace {
    pub cfg: RunConfig,
    lock: PathBuf,
}

impl Workspace {
    pub fn open(cfg: RunConfig) -> Result<Self> {
        let dir = &cfg.paths.out;
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let lock = dir.join(LOCK_NAME);
        match OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => bail!(
                "{} is locked by another command (remove {} if it is stale)",
                dir.display(),
                lock.display()
            ),
            Err(e) => return Err(e).with_context(|| format!("creating {}", lock.display())),
        }
        Ok(Self { cfg, lock })
    }

    pub fn dir(&self) -> &Path {
        &self.cfg.paths.out
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir().join(rel)
    }

    pub fn subdir(&self, name: &str) -> Result<PathBuf> {
        let d = self.path(name);
        fs::create_dir_all(&d).with_context(|| format!("creating {}", d.display()))?;
        Ok(d)
    }

    pub fn save_config(&self) -> Result<()> {
        let p = self.path(CONFIG_NAME);
        fs::write(&p, self.cfg.to_text()).with_context(|| format!("writing {}", p.display()))
    }

    pub fn bundle_path(&self, v: HumlVariant) -> PathBuf {
        self.path("bundles").join(format!("variant{}.hbnd", v.id()))
    }

    pub fn forecast_path(&self, v: HumlVariant, split: Split) -> PathBuf {
        let dir = self.path("forecasts");
        match split {
            Split::Test => dir.join(format!("variant{}.csv", v.id())),
            s => dir.join(s.label()).join(format!("variant{}.csv", v.id())),
        }
    }

    pub fn save_cases(&self, cases: &SplitCases) -> Result<PathBuf> {
        let p = self.path(CASES_NAME);
        let all: Vec<&ForecastCase> = cases
            .train
            .iter()
            .chain(&cases.validation)
            .chain(&cases.test)
            .chain(&cases.excluded)
            .collect();
        let f = File::create(&p).with_context(|| format!("writing {}", p.display()))?;
        let mut w = BufWriter::new(f);
        serde_json::to_writer(&mut w, &all)?;
        w.flush()?;
        Ok(p)
    }

    pub fn load_cases(&self) -> Result<SplitCases> {
        let p = self.path(CASES_NAME);
        let f = File::open(&p)
            .with_context(|| format!("no case store at {}; run `hurricast ingest` first", p.display()))?;
        let all: Vec<ForecastCase> = serde_json::from_reader(BufReader::new(f))
            .with_context(|| format!("reading {}", p.display()))?;
        let mut out = SplitCases::default();
        for c in all {
            match c.split {
                Split::Train => out.train.push(c),
                Split::Validation => out.validation.push(c),
                Split::Test => out.test.push(c),
                _ => out.excluded.push(c),
            }
        }
        Ok(out)
    }

    /// Cube store at the configured path, if the directory exists.
    pub fn cubes(&self) -> Result<Option<CubeStore>> {
        let p = self.cfg.paths.cubes();
        if !p.is_dir() {
            return Ok(None);
        }
        Ok(Some(
            CubeStore::load_dir(&p).with_context(|| format!("loading cubes from {}", p.display()))?,
        ))
    }
}

impl Drop for Workspace {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.lock);
    }
}

pub fn split_cases<'a>(cases: &'a SplitCases, split: Split) -> &'a [ForecastCase] {
    match split {
        Split::Train => &cases.train,
        Split::Validation => &cases.validation,
        Split::Test => &cases.test,
        _ => &cases.excluded,
    }
}
