//! Experiment configuration: defaults, a flat `key = value` file format
//! with namespaced keys, command-line overrides and validation.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::detector::{ChannelPlan, Preset};
use crate::error::{Error, Result};
use crate::losses::DistillConfig;
use crate::optim::LrSchedule;
use crate::scene::SceneConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Detection losses only.
    None,
    /// Whole neck-map imitation, no regions or mask.
    Hint,
    /// Every region pair distilled.
    Equal,
    /// Region pairs selected by the disparity mask.
    Rdd,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::None, Strategy::Hint, Strategy::Equal, Strategy::Rdd];

    pub fn needs_teacher(self) -> bool {
        self != Strategy::None
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::None => "none",
            Strategy::Hint => "hint",
            Strategy::Equal => "equal",
            Strategy::Rdd => "rdd",
        })
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|k| k.to_string() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown strategy {s:?} (expected none, hint, equal, rdd)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSection {
    #[serde(flatten)]
    pub gen: SceneConfig,
    pub train_count: usize,
    pub eval_count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorSection {
    /// Uniform width multiplier of the teacher.
    pub teacher_width: f64,
    pub student: Preset,
    pub encoder_channels: usize,
    pub neck_channels: usize,
    pub head_channels: usize,
}

impl DetectorSection {
    pub fn plan(&self) -> ChannelPlan {
        ChannelPlan { encoder: self.encoder_channels, neck: self.neck_channels, head: self.head_channels }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillSection {
    pub strategy: Strategy,
    #[serde(flatten)]
    pub params: DistillConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSection {
    pub seed: u64,
    pub epochs: usize,
    pub teacher_epochs: usize,
    /// Teacher training fails when its final mAP-lite is below this.
    pub teacher_min_map: f64,
    pub batch_size: usize,
    #[serde(flatten)]
    pub lr: LrSchedule,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables it.
    pub clip_norm: f64,
    /// Evaluate every this many epochs (the last epoch is always evaluated).
    pub eval_every: usize,
    pub eval_iou: f64,
    pub eval_top_k: usize,
    pub eval_min_score: f64,
    pub hist_bins: usize,
    pub out: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub scene: SceneSection,
    pub detector: DetectorSection,
    pub distill: DistillSection,
    pub train: TrainSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let plan = ChannelPlan::default();
        Self {
            scene: SceneSection { gen: SceneConfig::default(), train_count: 256, eval_count: 64 },
            detector: DetectorSection {
                teacher_width: 1.0,
                student: Preset::S,
                encoder_channels: plan.encoder,
                neck_channels: plan.neck,
                head_channels: plan.head,
            },
            distill: DistillSection { strategy: Strategy::Rdd, params: DistillConfig::default() },
            train: TrainSection {
                seed: 0,
                epochs: 20,
                teacher_epochs: 20,
                teacher_min_map: 0.05,
                batch_size: 4,
                lr: LrSchedule::default(),
                momentum: 0.9,
                weight_decay: 1e-4,
                clip_norm: 10.0,
                eval_every: 1,
                eval_iou: 0.5,
                eval_top_k: 32,
                eval_min_score: 0.05,
                hist_bins: 20,
                out: "out".into(),
            },
        }
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, Value)>) {
    match v {
        Value::Object(m) => {
            for (k, child) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, child, out);
            }
        }
        other => out.push((prefix.to_string(), other.clone())),
    }
}

/// Parses `raw` into a JSON value of the same kind as `current`.
fn coerce(key: &str, raw: &str, current: &Value) -> Result<Value> {
    let bad = |what: &str| Error::Config(format!("{key}: expected {what}, got {raw:?}"));
    Ok(match current {
        Value::Bool(_) => Value::Bool(raw.parse().map_err(|_| bad("true or false"))?),
        Value::Number(n) if n.is_u64() => Value::from(raw.parse::<u64>().map_err(|_| bad("a non-negative integer"))?),
        Value::Number(_) => {
            let f: f64 = raw.parse().map_err(|_| bad("a number"))?;
            serde_json::Number::from_f64(f).map(Value::Number).ok_or_else(|| bad("a finite number"))?
        }
        _ => Value::String(raw.to_string()),
    })
}

impl ExperimentConfig {
    /// Every settable key with its current value, in `key = value` form.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let mut flat = Vec::new();
        flatten("", &serde_json::to_value(self).expect("config serializes"), &mut flat);
        flat.into_iter()
            .map(|(k, v)| {
                let s = match v {
                    Value::String(s) => s,
                    other => other.to_string(),
                };
                (k, s)
            })
            .collect()
    }

    pub fn to_text(&self) -> String {
        self.to_pairs().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Applies `key = value` overrides. Unknown keys and unparsable values
    /// are collected and reported together.
    pub fn apply<'a>(&mut self, pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<()> {
        let mut root = serde_json::to_value(&*self).expect("config serializes");
        let mut errs = Vec::new();
        for (key, raw) in pairs {
            let mut parts = key.split('.');
            let (Some(section), Some(field), None) = (parts.next(), parts.next(), parts.next()) else {
                errs.push(format!("{key}: keys look like section.field"));
                continue;
            };
            let slot = root.get_mut(section).and_then(Value::as_object_mut).and_then(|m: &mut Map<String, Value>| m.get_mut(field));
            match slot {
                Some(slot) => match coerce(key, raw.trim(), slot) {
                    Ok(v) => *slot = v,
                    Err(e) => errs.push(e.to_string()),
                },
                None => errs.push(format!("{key}: unknown key")),
            }
        }
        if !errs.is_empty() {
            return Err(Error::Validation(errs));
        }
        *self = serde_json::from_value(root).map_err(|e| Error::Validation(vec![e.to_string()]))?;
        Ok(())
    }

    /// Parses a config file body on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut pairs = Vec::new();
        let mut errs = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            match line.split_once('=') {
                Some((k, v)) => pairs.push((k.trim(), v.trim())),
                None => errs.push(format!("line {}: expected key = value", n + 1)),
            }
        }
        if let Err(Error::Validation(more)) = cfg.apply(pairs) {
            errs.extend(more);
        }
        if errs.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Validation(errs))
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Vec<String> {
        let mut errs: Vec<String> = self.scene.gen.validate().into_iter().collect();
        errs.extend(self.distill.params.validate());
        let grid = self.scene.gen.grid_size();
        if grid % 4 != 0 {
            errs.push(format!("scene grid size {grid} must be divisible by 4"));
        }
        if !(self.detector.teacher_width > 0.0) {
            errs.push("detector.teacher_width must be positive".into());
        }
        if self.detector.encoder_channels == 0 || self.detector.neck_channels == 0 || self.detector.head_channels == 0 {
            errs.push("detector channel counts must be positive".into());
        }
        let t = &self.train;
        if t.batch_size == 0 {
            errs.push("train.batch_size must be at least 1".into());
        }
        if t.eval_every == 0 {
            errs.push("train.eval_every must be at least 1".into());
        }
        if !(t.eval_iou > 0.0 && t.eval_iou < 1.0) {
            errs.push(format!("train.eval_iou must be in (0, 1), got {}", t.eval_iou));
        }
        if t.eval_top_k == 0 {
            errs.push("train.eval_top_k must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&t.teacher_min_map) {
            errs.push("train.teacher_min_map must lie in [0, 1]".into());
        }
        if t.hist_bins == 0 {
            errs.push("train.hist_bins must be at least 1".into());
        }
        if !(t.lr.start >= 0.0 && t.lr.peak > 0.0 && t.lr.end >= 0.0) {
            errs.push("learning rates must be non-negative with a positive peak".into());
        }
        if !(0.0..=1.0).contains(&t.lr.warmup_frac) {
            errs.push("train.warmup_frac must be in [0, 1]".into());
        }
        if !(0.0..1.0).contains(&t.momentum) {
            errs.push("train.momentum must be in [0, 1)".into());
        }
        if !(t.weight_decay >= 0.0) || !(t.clip_norm >= 0.0) {
            errs.push("train.weight_decay and train.clip_norm must be non-negative".into());
        }
        errs
    }

    pub fn check(&self) -> Result<()> {
        let errs = self.validate();
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(errs))
        }
    }

    /// SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        crate::detector::hex_string(&Sha256::digest(json.as_bytes()))
    }
}
