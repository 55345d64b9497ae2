//! Run configuration as flat `section.key=value` lines.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown and
//! repeated keys are rejected. [`RunConfig::to_text`] writes every key, so
//! the effective configuration can be saved and fed back unchanged.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::gbt::GbtConfig;
use crate::neural::{DecoderKind, NetworkConfig, TargetKind, TrainConfig};
use crate::pipeline::{hex, HumlVariant, PipelineConfig};
use crate::storm_data::{FeatureLayout, SplitYears};
use crate::synth::{SignalPlacement, SyntheticSpec};

/// Input paths that are relative resolve against `out`, so a synthetic
/// data set and the artifacts built from it can share one directory.
#[derive(Clone, Debug, PartialEq)]
pub struct Paths {
    pub tracks: PathBuf,
    pub cubes: PathBuf,
    pub operational: PathBuf,
    pub out: PathBuf,
}

impl Paths {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.out.join(p)
        }
    }

    pub fn tracks(&self) -> PathBuf {
        self.resolve(&self.tracks)
    }

    pub fn cubes(&self) -> PathBuf {
        self.resolve(&self.cubes)
    }

    pub fn operational(&self) -> PathBuf {
        self.resolve(&self.operational)
    }
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            tracks: "tracks.csv".into(),
            cubes: "cubes".into(),
            operational: "operational.csv".into(),
            out: ".".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub paths: Paths,
    pub variant: HumlVariant,
    pub seed: u64,
    pub stat_dim: usize,
    pub split: SplitYears,
    pub gbt: GbtConfig,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    /// Explicit learning rate; `None` uses the default for the extractor target.
    pub lr: Option<f64>,
    pub extractor_target: TargetKind,
    pub per_basin: bool,
    pub synth: SyntheticSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        let target = TargetKind::Intensity;
        Self {
            paths: Paths::default(),
            variant: HumlVariant::Stat,
            seed: 0,
            stat_dim: 27,
            split: SplitYears::default(),
            gbt: GbtConfig::default(),
            network: NetworkConfig::new(DecoderKind::Gru, target, 27),
            train: TrainConfig::new(target),
            lr: None,
            extractor_target: target,
            per_basin: false,
            synth: SyntheticSpec::default(),
        }
    }
}

fn bad(key: &str, value: &str, what: &str) -> Error {
    Error::Config(format!("{key}={value:?}: expected {what}"))
}

fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| bad(key, value, "a number"))
}

fn flag(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(bad(key, value, "true or false")),
    }
}

fn list<const N: usize>(key: &str, value: &str) -> Result<[usize; N]> {
    let v = value
        .split(',')
        .map(|p| num::<usize>(key, p.trim()))
        .collect::<Result<Vec<_>>>()?;
    v.try_into()
        .map_err(|_| bad(key, value, &format!("{N} comma-separated integers")))
}

fn years(key: &str, value: &str) -> Result<(i32, i32)> {
    let (a, b) = value
        .split_once('-')
        .ok_or_else(|| bad(key, value, "a year range such as 1980-2011"))?;
    let r = (num(key, a.trim())?, num(key, b.trim())?);
    if r.0 > r.1 {
        return Err(bad(key, value, "an increasing year range"));
    }
    Ok(r)
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn target(key: &str, value: &str) -> Result<TargetKind> {
    match value {
        "intensity" => Ok(TargetKind::Intensity),
        "track" => Ok(TargetKind::Track),
        _ => Err(bad(key, value, "intensity or track")),
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::BTreeSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: {line:?} is not key=value", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !seen.insert(k.to_string()) {
                return Err(Error::Config(format!("line {}: key {k} repeated", n + 1)));
            }
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Apply one `key=value` setting.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "paths.tracks" => self.paths.tracks = v.into(),
            "paths.cubes" => self.paths.cubes = v.into(),
            "paths.operational" => self.paths.operational = v.into(),
            "paths.out" => self.paths.out = v.into(),
            "variant" => self.variant = v.parse()?,
            "seed" => self.seed = num(key, v)?,
            "stat_dim" => self.stat_dim = num(key, v)?,
            "split.train" => self.split.train = years(key, v)?,
            "split.validation" => self.split.validation = years(key, v)?,
            "split.test" => self.split.test = years(key, v)?,
            "gbt.max_depth" => self.gbt.max_depth = num(key, v)?,
            "gbt.n_estimators" => self.gbt.n_estimators = num(key, v)?,
            "gbt.learning_rate" => self.gbt.learning_rate = num(key, v)?,
            "gbt.subsample" => self.gbt.subsample = num(key, v)?,
            "gbt.colsample_bytree" => self.gbt.colsample_bytree = num(key, v)?,
            "gbt.min_child_weight" => self.gbt.min_child_weight = num(key, v)?,
            "gbt.lambda" => self.gbt.lambda = num(key, v)?,
            "gbt.seed" => self.gbt.seed = num(key, v)?,
            "neural.target" => self.extractor_target = target(key, v)?,
            "neural.widths" => self.network.widths = list(key, v)?,
            "neural.embed_dim" => self.network.embed_dim = num(key, v)?,
            "neural.gru_hidden" => self.network.gru_hidden = num(key, v)?,
            "neural.gru_layers" => self.network.gru_layers = num(key, v)?,
            "neural.head_dims" => self.network.head_dims = list(key, v)?,
            "neural.d_model" => self.network.d_model = num(key, v)?,
            "neural.heads" => self.network.heads = num(key, v)?,
            "neural.ff_dim" => self.network.ff_dim = num(key, v)?,
            "neural.tf_layers" => self.network.tf_layers = num(key, v)?,
            "neural.positional_encoding" => self.network.positional_encoding = flag(key, v)?,
            "neural.lr" => self.lr = if v == "auto" { None } else { Some(num(key, v)?) },
            "neural.batch_size" => self.train.batch_size = num(key, v)?,
            "neural.lambda" => self.train.lambda = num(key, v)?,
            "neural.max_epochs" => self.train.max_epochs = num(key, v)?,
            "neural.patience" => self.train.patience = num(key, v)?,
            "neural.beta1" => self.train.beta1 = num(key, v)?,
            "neural.beta2" => self.train.beta2 = num(key, v)?,
            "pipeline.per_basin" => self.per_basin = flag(key, v)?,
            "synth.storms" => self.synth.storms = num(key, v)?,
            "synth.steps" => self.synth.steps = num(key, v)?,
            "synth.signal" => self.synth.signal = v.parse::<SignalPlacement>()?,
            "synth.noise_sd" => self.synth.noise_sd = num(key, v)?,
            "synth.members" => self.synth.members = num(key, v)?,
            "synth.member_wind_sd" => self.synth.member_wind_sd = num(key, v)?,
            "synth.member_position_sd" => self.synth.member_position_sd = num(key, v)?,
            _ => return Err(Error::Config(format!("unknown configuration key {key:?}"))),
        }
        Ok(())
    }

    /// Every key with its effective value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let p = |x: &Path| x.display().to_string();
        let y = |(a, b): (i32, i32)| format!("{a}-{b}");
        let n = &self.network;
        let t = &self.train;
        let g = &self.gbt;
        let s = &self.synth;
        vec![
            ("paths.tracks", p(&self.paths.tracks)),
            ("paths.cubes", p(&self.paths.cubes)),
            ("paths.operational", p(&self.paths.operational)),
            ("paths.out", p(&self.paths.out)),
            ("variant", self.variant.id().to_string()),
            ("seed", self.seed.to_string()),
            ("stat_dim", self.stat_dim.to_string()),
            ("split.train", y(self.split.train)),
            ("split.validation", y(self.split.validation)),
            ("split.test", y(self.split.test)),
            ("gbt.max_depth", g.max_depth.to_string()),
            ("gbt.n_estimators", g.n_estimators.to_string()),
            ("gbt.learning_rate", g.learning_rate.to_string()),
            ("gbt.subsample", g.subsample.to_string()),
            ("gbt.colsample_bytree", g.colsample_bytree.to_string()),
            ("gbt.min_child_weight", g.min_child_weight.to_string()),
            ("gbt.lambda", g.lambda.to_string()),
            ("gbt.seed", g.seed.to_string()),
            ("neural.target", self.extractor_target.label().to_string()),
            ("neural.widths", join(&n.widths)),
            ("neural.embed_dim", n.embed_dim.to_string()),
            ("neural.gru_hidden", n.gru_hidden.to_string()),
            ("neural.gru_layers", n.gru_layers.to_string()),
            ("neural.head_dims", join(&n.head_dims)),
            ("neural.d_model", n.d_model.to_string()),
            ("neural.heads", n.heads.to_string()),
            ("neural.ff_dim", n.ff_dim.to_string()),
            ("neural.tf_layers", n.tf_layers.to_string()),
            ("neural.positional_encoding", n.positional_encoding.to_string()),
            ("neural.lr", self.lr.map_or("auto".to_string(), |v| v.to_string())),
            ("neural.batch_size", t.batch_size.to_string()),
            ("neural.lambda", t.lambda.to_string()),
            ("neural.max_epochs", t.max_epochs.to_string()),
            ("neural.patience", t.patience.to_string()),
            ("neural.beta1", t.beta1.to_string()),
            ("neural.beta2", t.beta2.to_string()),
            ("pipeline.per_basin", self.per_basin.to_string()),
            ("synth.storms", s.storms.to_string()),
            ("synth.steps", s.steps.to_string()),
            ("synth.signal", s.signal.label().to_string()),
            ("synth.noise_sd", s.noise_sd.to_string()),
            ("synth.members", s.members.to_string()),
            ("synth.member_wind_sd", s.member_wind_sd.to_string()),
            ("synth.member_position_sd", s.member_position_sd.to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    /// Short digest of the effective configuration. The output directory
    /// is left out so that relocated runs share a digest.
    pub fn hash(&self) -> String {
        let text: String = self
            .entries()
            .into_iter()
            .filter(|(k, _)| *k != "paths.out")
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect();
        hex(&Sha256::digest(text.as_bytes())[..8])
    }

    pub fn validate(&self) -> Result<()> {
        FeatureLayout::for_dim(self.stat_dim)?;
        self.gbt.validate()?;
        let mut n = self.network.clone();
        n.stat_dim = self.stat_dim;
        n.validate()?;
        self.train_config().validate()?;
        self.synth_spec().validate()
    }

    pub fn layout(&self) -> Result<FeatureLayout> {
        FeatureLayout::for_dim(self.stat_dim)
    }

    pub fn train_config(&self) -> TrainConfig {
        let mut t = self.train.clone();
        t.lr = self.lr.unwrap_or_else(|| self.extractor_target.default_lr());
        t.seed = self.seed;
        t
    }

    pub fn pipeline_config(&self) -> PipelineConfig {
        let mut network = self.network.clone();
        network.stat_dim = self.stat_dim;
        network.target = self.extractor_target;
        network.seed = self.seed;
        PipelineConfig {
            gbt: self.gbt.clone(),
            network,
            train: self.train_config(),
            extractor_target: self.extractor_target,
            per_basin: self.per_basin,
            seed: self.seed,
        }
    }

    pub fn synth_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            seed: self.seed,
            ..self.synth.clone()
        }
    }
}
