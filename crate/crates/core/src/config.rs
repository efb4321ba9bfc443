//! Run configuration: a TOML document with sections `[data]`, `[network]`,
//! `[loss]`, `[attack]`, `[train]`, `[eval]` and `[output]` plus a top-level
//! `seed`. Unknown keys are rejected. After parsing, every default is filled
//! in, so [`RunConfig::to_toml`] emits a complete document that parses back
//! to an equal config.
//!
//! Overrides use `section.key=value` (or `key=value` for top-level keys) and
//! are applied to the document before it is deserialised. Values are read as
//! TOML and fall back to plain strings.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attacks::{AttackConfig, AttackKind};
use crate::data::{load_idx, split, synth_blobs, Dataset};
use crate::error::{ConfigError, Error, Result};
use crate::losses::{LossFamily, LossSpec};
use crate::network::{InitScheme, Layer, Network, Preset};
use crate::rng;
use crate::train::{EvalConfig, OptimizerKind, ScheduleKind, TrainPlan};

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "CERTTRAIN_OUT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub data: DataSection,
    #[serde(default)]
    pub network: NetworkSection,
    pub loss: LossSection,
    #[serde(default)]
    pub attack: AttackSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataKind {
    Idx,
    Blobs,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct DataSection {
    pub kind: DataKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub images: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<PathBuf>,
    /// Keep only the first `limit` samples before splitting.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub limit: Option<usize>,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    #[serde(default = "default_classes")]
    pub classes: usize,
    #[serde(default = "default_per_class")]
    pub per_class: usize,
    #[serde(default = "default_dims")]
    pub dims: usize,
    #[serde(default = "default_spread")]
    pub spread: f64,
}

fn default_val_fraction() -> f64 {
    0.2
}
fn default_classes() -> usize {
    3
}
fn default_per_class() -> usize {
    200
}
fn default_dims() -> usize {
    2
}
fn default_spread() -> f64 {
    0.08
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case", default)]
pub struct NetworkSection {
    /// `mlp` (layer widths from `hidden`) or a named preset.
    pub preset: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden: Option<Vec<usize>>,
    pub init: InitScheme,
}

impl Default for NetworkSection {
    fn default() -> Self {
        NetworkSection {
            preset: "mlp".into(),
            hidden: None,
            init: InitScheme::Default,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct LossSection {
    pub family: LossFamily,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub lambda: f64,
    #[serde(default)]
    pub l1: f64,
}

fn default_alpha() -> f64 {
    0.5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case", default)]
pub struct AttackSection {
    pub kind: AttackKind,
    pub eps: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub step_size: Option<f64>,
    pub steps: usize,
    pub restarts: usize,
    pub noise_multiplier: f64,
    /// Defaults to on for image data and off for blobs.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clip_input: Option<bool>,
    pub random_start: bool,
}

impl Default for AttackSection {
    fn default() -> Self {
        AttackSection {
            kind: AttackKind::Fgsm,
            eps: 0.1,
            step_size: None,
            steps: 1,
            restarts: 1,
            noise_multiplier: 2.0,
            clip_input: None,
            random_start: true,
        }
    }
}

/// Unset fields take the defaults of the chosen schedule.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case", default)]
pub struct TrainSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub schedule: Option<ScheduleKind>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<OptimizerKind>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr_peak: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub peak_fraction: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub momentum: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weight_decay: Option<f64>,
    /// 0 disables clipping.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grad_clip: Option<f64>,
    /// Defaults to `attack.eps`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eps_target: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eps_ramp_epochs: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coef_ramp_epochs: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr_decay_epochs: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr_decay_factor: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ramp_attack_eps: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case", default)]
pub struct EvalSection {
    /// Defaults to `train.eps-target`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eps: Option<f64>,
    pub steps: usize,
    pub restarts: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub step_size: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_samples: Option<usize>,
    pub batch_size: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            eps: None,
            steps: 50,
            restarts: 3,
            step_size: None,
            max_samples: None,
            batch_size: 500,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case", default)]
pub struct OutputSection {
    /// Defaults to `$CERTTRAIN_OUT`, else `runs`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    /// Record wall-clock times in the metrics CSV (breaks byte-for-byte
    /// reproducibility).
    pub wall_clock: bool,
}

fn invalid(field: &str, message: impl Into<String>) -> Error {
    Error::Config(ConfigError::Invalid {
        field: field.to_string(),
        message: message.into(),
    })
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

fn parse_error(text: &str, e: toml::de::Error) -> Error {
    let line = e.span().map_or(0, |s| line_of(text, s.start));
    Error::Config(ConfigError::Parse {
        line,
        message: e.message().to_string(),
    })
}

fn de_error(e: toml::de::Error) -> Error {
    let msg = e.message().to_string();
    if let Some(rest) = msg.strip_prefix("unknown field `") {
        let key = rest.split('`').next().unwrap_or(rest);
        return Error::Config(ConfigError::UnknownKey(key.to_string()));
    }
    Error::Config(ConfigError::Parse { line: 0, message: msg })
}

/// Applies one `section.key=value` override to a parsed document.
pub fn apply_override(doc: &mut toml::Table, spec: &str) -> Result<()> {
    let bad = || Error::Config(ConfigError::BadOverride(spec.to_string()));
    let (path, raw) = spec.split_once('=').ok_or_else(bad)?;
    let path: Vec<&str> = path.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) || path.len() > 2 {
        return Err(bad());
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let table = if path.len() == 2 {
        doc.entry(path[0])
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(bad)?
    } else {
        doc
    };
    table.insert(path[path.len() - 1].to_string(), value);
    Ok(())
}

/// Parses, applies overrides, fills defaults and validates.
pub fn parse_config_with(text: &str, overrides: &[String]) -> Result<RunConfig> {
    let mut doc: toml::Table = toml::from_str(text).map_err(|e| parse_error(text, e))?;
    for o in overrides {
        apply_override(&mut doc, o)?;
    }
    let mut cfg: RunConfig = toml::Value::Table(doc).try_into().map_err(de_error)?;
    cfg.resolve();
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(text: &str) -> Result<RunConfig> {
    parse_config_with(text, &[])
}

pub fn load_config(path: impl AsRef<Path>, overrides: &[String]) -> Result<RunConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config_with(&text, overrides)
}

impl RunConfig {
    /// Fills every derived default.
    fn resolve(&mut self) {
        if self.network.preset == "mlp" && self.network.hidden.is_none() {
            self.network.hidden = Some(vec![256, 256]);
        }
        if self.attack.clip_input.is_none() {
            self.attack.clip_input = Some(self.data.kind == DataKind::Idx);
        }
        let t = &mut self.train;
        let schedule = *t.schedule.get_or_insert(ScheduleKind::Cyclic);
        let epochs = *t.epochs.get_or_insert(match schedule {
            ScheduleKind::Cyclic => 10,
            ScheduleKind::Long => 40,
        });
        let eps = *t.eps_target.get_or_insert(self.attack.eps);
        let base = match schedule {
            ScheduleKind::Cyclic => TrainPlan::cyclic(epochs, 0.2, eps),
            ScheduleKind::Long => TrainPlan::long(epochs, eps),
        };
        t.batch_size.get_or_insert(base.batch_size);
        t.optimizer.get_or_insert(base.optimizer);
        t.lr_peak.get_or_insert(base.lr_peak);
        t.peak_fraction.get_or_insert(base.peak_fraction);
        t.momentum.get_or_insert(base.momentum);
        t.weight_decay.get_or_insert(base.weight_decay);
        t.grad_clip.get_or_insert(base.grad_clip.unwrap_or(0.0));
        t.eps_ramp_epochs.get_or_insert(base.eps_ramp_epochs);
        t.coef_ramp_epochs.get_or_insert(base.coef_ramp_epochs);
        t.lr_decay_epochs.get_or_insert(base.lr_decay_epochs);
        t.lr_decay_factor.get_or_insert(base.lr_decay_factor);
        t.ramp_attack_eps.get_or_insert(base.ramp_attack_eps);
        self.eval.eps.get_or_insert(eps);
        if self.output.dir.is_none() {
            let dir = std::env::var_os(OUT_DIR_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
            self.output.dir = Some(dir);
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.kind == DataKind::Idx {
            if d.images.is_none() {
                return Err(invalid("data.images", "required when data.kind = \"idx\""));
            }
            if d.labels.is_none() {
                return Err(invalid("data.labels", "required when data.kind = \"idx\""));
            }
        } else {
            if d.classes < 2 {
                return Err(invalid("data.classes", "must be >= 2"));
            }
            if d.dims < 2 {
                return Err(invalid("data.dims", "must be >= 2"));
            }
            if !(d.spread >= 0.0) {
                return Err(invalid("data.spread", "must be >= 0"));
            }
        }
        if !(0.0..1.0).contains(&d.val_fraction) {
            return Err(invalid("data.val-fraction", format!("must be in [0,1), got {}", d.val_fraction)));
        }
        if self.network.preset != "mlp" {
            self.network.preset.parse::<Preset>().map_err(|e| invalid("network.preset", e.to_string()))?;
        } else if self.network.hidden.as_ref().is_some_and(|h| h.contains(&0)) {
            return Err(invalid("network.hidden", "widths must be >= 1"));
        }
        if self.seed > i64::MAX as u64 {
            return Err(invalid("seed", "must be below 2^63"));
        }
        if self.eval.steps == 0 || self.eval.restarts == 0 || self.eval.batch_size == 0 {
            return Err(invalid("eval", "steps, restarts and batch-size must be >= 1"));
        }
        self.loss_spec().validate()?;
        self.train_plan().validate()?;
        self.eval_config().attack.validate()
    }

    /// Training attack; its seed is re-derived per step by the trainer.
    pub fn attack_config(&self) -> AttackConfig {
        let a = &self.attack;
        AttackConfig {
            kind: a.kind,
            eps: a.eps,
            step_size: a.step_size,
            steps: a.steps,
            restarts: a.restarts,
            noise_multiplier: a.noise_multiplier,
            clip_input: a.clip_input.unwrap_or(false),
            random_start: a.random_start,
            seed: rng::derive_seed(self.seed, "attack", 0),
        }
    }

    pub fn loss_spec(&self) -> LossSpec {
        LossSpec {
            family: self.loss.family,
            alpha: self.loss.alpha,
            lambda: self.loss.lambda,
            l1: self.loss.l1,
            attack: self.attack_config(),
            bounding_eps: self.train.eps_target.unwrap_or(self.attack.eps),
        }
    }

    pub fn train_plan(&self) -> TrainPlan {
        let t = &self.train;
        let eps = t.eps_target.unwrap_or(self.attack.eps);
        let base = match t.schedule.unwrap_or(ScheduleKind::Cyclic) {
            ScheduleKind::Cyclic => TrainPlan::cyclic(t.epochs.unwrap_or(10), 0.2, eps),
            ScheduleKind::Long => TrainPlan::long(t.epochs.unwrap_or(40), eps),
        };
        TrainPlan {
            batch_size: t.batch_size.unwrap_or(base.batch_size),
            optimizer: t.optimizer.unwrap_or(base.optimizer),
            lr_peak: t.lr_peak.unwrap_or(base.lr_peak),
            peak_fraction: t.peak_fraction.unwrap_or(base.peak_fraction),
            momentum: t.momentum.unwrap_or(base.momentum),
            weight_decay: t.weight_decay.unwrap_or(base.weight_decay),
            grad_clip: match t.grad_clip {
                Some(c) if c > 0.0 => Some(c),
                Some(_) => None,
                None => base.grad_clip,
            },
            eps_ramp_epochs: t.eps_ramp_epochs.unwrap_or(base.eps_ramp_epochs),
            coef_ramp_epochs: t.coef_ramp_epochs.unwrap_or(base.coef_ramp_epochs),
            lr_decay_epochs: t.lr_decay_epochs.clone().unwrap_or_else(|| base.lr_decay_epochs.clone()),
            lr_decay_factor: t.lr_decay_factor.unwrap_or(base.lr_decay_factor),
            ramp_attack_eps: t.ramp_attack_eps.unwrap_or(base.ramp_attack_eps),
            seed: rng::derive_seed(self.seed, "train", 0),
            ..base
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        let e = &self.eval;
        let eps = e.eps.unwrap_or(self.attack.eps);
        let mut attack = AttackConfig::pgd(eps, e.steps);
        attack.restarts = e.restarts;
        attack.step_size = e.step_size;
        attack.clip_input = self.attack.clip_input.unwrap_or(false);
        attack.seed = rng::derive_seed(self.seed, "eval", 0);
        EvalConfig {
            eps,
            attack,
            max_samples: e.max_samples,
            batch_size: e.batch_size,
        }
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output.dir.clone().unwrap_or_else(|| PathBuf::from("runs"))
    }

    /// Loads (and for blobs, generates) the dataset, truncates it to
    /// `data.limit` and splits it.
    pub fn load_dataset(&self) -> Result<Dataset> {
        let d = &self.data;
        let full = match d.kind {
            DataKind::Idx => {
                let ds = load_idx(d.images.as_ref().expect("validated"), d.labels.as_ref().expect("validated"))?;
                Dataset::new(ds.inputs().clone(), ds.labels().to_vec(), ds.num_classes().max(10))?
            }
            DataKind::Blobs => synth_blobs(d.classes, d.per_class, d.dims, d.spread, rng::derive_seed(self.seed, "data", 0))?,
        };
        let full = match d.limit {
            Some(n) => full.take(n),
            None => full,
        };
        split(&full, d.val_fraction, rng::derive_seed(self.seed, "split", 0))
    }

    /// Builds and initialises the network for samples of `input_shape`.
    pub fn build_network(&self, input_shape: &[usize], num_classes: usize) -> Result<Network> {
        let mut net = if self.network.preset == "mlp" {
            let hidden = self.network.hidden.clone().unwrap_or_else(|| vec![256, 256]);
            let d: usize = input_shape.iter().product();
            let mut layers = Vec::new();
            if input_shape.len() > 1 {
                layers.push(Layer::Flatten);
            }
            let mut prev = d;
            for &h in &hidden {
                layers.push(Layer::affine(h, prev));
                layers.push(Layer::Relu);
                prev = h;
            }
            layers.push(Layer::affine(num_classes, prev));
            Network::new(input_shape.to_vec(), layers)?
        } else {
            self.network.preset.parse::<Preset>()?.build(input_shape, num_classes)?
        };
        if !matches!(self.network.preset.parse::<Preset>(), Ok(Preset::Toy { .. })) {
            net.init(self.network.init, rng::derive_seed(self.seed, "init", 0));
        }
        Ok(net)
    }

    /// The resolved document.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }
}
