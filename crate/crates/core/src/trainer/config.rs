//! Run configuration: TOML sections `data`, `synthetic`, `model`,
//! `contrastive`, `ais`, `iadm`, `optim`, `run`, with `section.key=value`
//! overrides.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use candle_core::DType;
use serde::{Deserialize, Serialize};

use crate::ais::AisConfig;
use crate::backbone::{EncoderSpec, Profile};
use crate::contrastive::ContrastiveConfig;
use crate::data::{AugPolicy, SyntheticSpec};
use crate::error::{Error, Result};
use crate::iadm::IadmConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Manifest path; relative paths resolve against the working directory.
    pub manifest: String,
    /// Threads used for augmentation. Results do not depend on it.
    pub workers: usize,
    #[serde(flatten)]
    pub augment: AugPolicy,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            manifest: String::new(),
            workers: 1,
            augment: AugPolicy::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub profile: Profile,
    /// Base width of the tinycnn profile; ignored by resnet50.
    pub width: usize,
    pub conv_bias: bool,
    pub proj_hidden: usize,
    pub proj_dim: usize,
    /// Optional safetensors file with encoder weights.
    pub pretrained: String,
    pub precision: Precision,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            profile: Profile::Resnet50,
            width: 32,
            conv_bias: true,
            proj_hidden: 2048,
            proj_dim: 128,
            pretrained: String::new(),
            precision: Precision::F32,
        }
    }
}

impl ModelConfig {
    pub fn encoder_spec(&self) -> EncoderSpec {
        EncoderSpec {
            profile: self.profile,
            width: self.width,
            bias: self.conv_bias,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    Cosine,
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub schedule: Schedule,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 128,
            lr: 0.03,
            momentum: 0.9,
            weight_decay: 1e-4,
            schedule: Schedule::Cosine,
        }
    }
}

impl OptimConfig {
    /// Learning rate used throughout `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.schedule {
            Schedule::Constant => self.lr,
            Schedule::Cosine => {
                let t = epoch as f64 / self.epochs.max(1) as f64;
                self.lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    /// Output root; `PPSSL_RUN_DIR` takes precedence.
    pub out_dir: String,
    /// Write a checkpoint every this many epochs (the last epoch always).
    pub checkpoint_every: usize,
    /// Label fraction used by `eval-probe`.
    pub probe_fraction: f64,
    pub probe_epochs: usize,
    pub probe_lr: f64,
    /// Images rendered by `visualize`.
    pub viz_samples: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: "runs".into(),
            checkpoint_every: 1,
            probe_fraction: 1.0,
            probe_epochs: 100,
            probe_lr: 0.5,
            viz_samples: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub data: DataConfig,
    pub synthetic: SyntheticSpec,
    pub model: ModelConfig,
    pub contrastive: ContrastiveConfig,
    pub ais: AisConfig,
    pub iadm: IadmConfig,
    pub optim: OptimConfig,
    pub run: RunConfig,
}

impl TrainConfig {
    /// Parses TOML, rejecting keys that no section defines.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let value: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::config(format!("config: {e}")))?;
        Self::from_table(value)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msgs) => Error::Config(msgs.into_iter().map(|m| format!("{}: {m}", path.display())).collect()),
            other => other,
        })
    }

    /// Loads `path` (or the defaults) and applies `section.key=value`
    /// overrides in order. Values are parsed as TOML, falling back to a bare
    /// string.
    pub fn resolve(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                text.parse::<toml::Table>()
                    .map_err(|e| Error::config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        let mut errs = Vec::new();
        for o in overrides {
            if let Err(e) = apply_override(&mut table, o) {
                errs.push(e);
            }
        }
        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }
        Self::from_table(table)
    }

    fn from_table(table: toml::Table) -> Result<Self> {
        let defaults = toml::Table::try_from(TrainConfig::default()).expect("defaults serialize");
        let mut errs = Vec::new();
        unknown_keys(&table, &defaults, "", &mut errs);
        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }
        let cfg: TrainConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every violated constraint, reported together.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        self.data.augment.validate(&mut errs);
        self.synthetic.validate(&mut errs);
        self.contrastive.validate(&mut errs);
        self.ais.validate(&mut errs);
        self.iadm.validate(self.model.encoder_spec().num_stages(), &mut errs);
        let m = &self.model;
        if m.profile == Profile::Tinycnn && m.width == 0 {
            errs.push("model.width must be >= 1".into());
        }
        if m.proj_hidden == 0 || m.proj_dim == 0 {
            errs.push("model.proj_hidden and model.proj_dim must be >= 1".into());
        }
        let o = &self.optim;
        if o.epochs == 0 {
            errs.push("optim.epochs must be >= 1".into());
        }
        if o.batch_size < 2 {
            errs.push(format!("optim.batch_size must be >= 2, got {}", o.batch_size));
        }
        if o.batch_size > self.contrastive.queue_capacity {
            errs.push(format!(
                "optim.batch_size ({}) must not exceed contrastive.queue_capacity ({})",
                o.batch_size, self.contrastive.queue_capacity
            ));
        }
        if !(o.lr > 0.0) {
            errs.push(format!("optim.lr must be > 0, got {}", o.lr));
        }
        if !(0.0..1.0).contains(&o.momentum) {
            errs.push(format!("optim.momentum must lie in [0, 1), got {}", o.momentum));
        }
        if !(o.weight_decay >= 0.0) {
            errs.push(format!("optim.weight_decay must be >= 0, got {}", o.weight_decay));
        }
        let r = &self.run;
        if r.checkpoint_every == 0 {
            errs.push("run.checkpoint_every must be >= 1".into());
        }
        if !(r.probe_fraction > 0.0 && r.probe_fraction <= 1.0) {
            errs.push(format!("run.probe_fraction must lie in (0, 1], got {}", r.probe_fraction));
        }
        if !(r.probe_lr > 0.0) {
            errs.push(format!("run.probe_lr must be > 0, got {}", r.probe_lr));
        }
        if self.data.workers == 0 {
            errs.push("data.workers must be >= 1".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn write_snapshot(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }

    pub fn alpha(&self) -> f64 {
        if self.ais.enabled { self.ais.alpha } else { 0.0 }
    }

    pub fn beta(&self) -> f64 {
        if self.iadm.enabled { self.iadm.beta } else { 0.0 }
    }
}

fn unknown_keys(given: &toml::Table, known: &toml::Table, prefix: &str, errs: &mut Vec<String>) {
    for (k, v) in given {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match known.get(k) {
            None => errs.push(format!("unknown key `{path}`")),
            Some(toml::Value::Table(kt)) => match v {
                toml::Value::Table(gt) => unknown_keys(gt, kt, &path, errs),
                _ => errs.push(format!("`{path}` must be a table")),
            },
            Some(_) => {}
        }
    }
}

fn apply_override(table: &mut toml::Table, spec: &str) -> std::result::Result<(), String> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| format!("override `{spec}` is not of the form section.key=value"))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.len() < 2 || parts.iter().any(|p| p.is_empty()) {
        return Err(format!("override key `{key}` must be section.key"));
    }
    let value = parse_value(raw.trim());
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| format!("override `{key}`: `{p}` is not a table"))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    toml::Value::from_str(raw).unwrap_or_else(|_| toml::Value::String(raw.to_string()))
}
