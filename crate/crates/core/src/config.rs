//! TOML experiment configuration. Parse and validation errors carry the
//! 1-based line of the offending key.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::data::{check_levels, Resolution, SceneConfig};
use crate::error::{Error, Result};
use crate::federated::{Optimizer, Schedule};
use crate::model::ModelConfig;
use crate::tensor::Interp;
use crate::theory::TheoryConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExperimentKind {
    Drift,
    Compare,
    Interp,
    Scaling,
    Theory,
    Embed,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Drift => "drift",
            ExperimentKind::Compare => "compare",
            ExperimentKind::Interp => "interp",
            ExperimentKind::Scaling => "scaling",
            ExperimentKind::Theory => "theory",
            ExperimentKind::Embed => "embed",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub clients: ClientsConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub drift: DriftConfig,
    #[serde(default)]
    pub interp: InterpConfig,
    #[serde(default)]
    pub scaling: ScalingConfig,
    #[serde(default)]
    pub theory: TheoryConfig,
    #[serde(default)]
    pub embed: EmbedConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub samples_per_client: usize,
    pub eval_samples: usize,
    pub scene: SceneConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            samples_per_client: 256,
            eval_samples: 128,
            scene: SceneConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClientsConfig {
    /// Native resolution of each client; client ids follow this order.
    pub resolutions: Vec<Resolution>,
    /// Levels available for distillation, highest first. A client trains on
    /// its native resolution plus every family member strictly below it.
    pub family: Vec<Resolution>,
}

impl Default for ClientsConfig {
    fn default() -> Self {
        let family = vec![Resolution::new(64, 48), Resolution::new(48, 36), Resolution::new(32, 24)];
        Self {
            resolutions: family.clone(),
            family,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub rounds: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: Optimizer,
    pub schedule: Schedule,
    /// Independent seeds averaged in every table.
    pub repeats: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            rounds: 50,
            epochs: 2,
            batch_size: 16,
            lr: 0.01,
            optimizer: Optimizer::Adamw,
            schedule: Schedule::Fixed,
            repeats: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub alpha: f64,
    pub gamma: f64,
    /// Proximal weight of the FedProx variants.
    pub mu: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            gamma: 0.01,
            mu: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub resolutions: Vec<Resolution>,
    pub tau: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            resolutions: [(32, 24), (48, 36), (64, 48), (80, 60), (96, 72), (128, 96)]
                .iter()
                .map(|&(h, w)| Resolution::new(h, w))
                .collect(),
            tau: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DriftConfig {
    /// Client native resolutions per row; the lowest family member is the
    /// evaluation resolution.
    pub triplets: Vec<Vec<Resolution>>,
}

impl Default for DriftConfig {
    fn default() -> Self {
        let lo = Resolution::new(32, 24);
        let mid = Resolution::new(48, 36);
        let hi = Resolution::new(64, 48);
        Self {
            triplets: vec![
                vec![lo, lo, lo],
                vec![lo, lo, mid],
                vec![lo, mid, mid],
                vec![lo, lo, hi],
                vec![lo, hi, hi],
            ],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InterpConfig {
    /// Resolution the low-resolution images are captured at.
    pub source: Resolution,
    pub targets: Vec<Resolution>,
    pub methods: Vec<Interp>,
}

impl Default for InterpConfig {
    fn default() -> Self {
        Self {
            source: Resolution::new(32, 24),
            targets: vec![Resolution::new(48, 36), Resolution::new(64, 48), Resolution::new(80, 60)],
            methods: vec![Interp::Bilinear, Interp::Area, Interp::Bicubic],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScalingConfig {
    pub high: Resolution,
    pub low: Resolution,
    pub max_low_clients: usize,
}

impl Default for ScalingConfig {
    fn default() -> Self {
        Self {
            high: Resolution::new(64, 48),
            low: Resolution::new(32, 24),
            max_low_clients: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbedConfig {
    pub resolutions: Vec<Resolution>,
    pub samples: usize,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        Self {
            resolutions: vec![Resolution::new(32, 24), Resolution::new(64, 48), Resolution::new(128, 96)],
            samples: 32,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: Option<PathBuf>,
}

/// 1-based line of byte offset `pos` in `src`.
fn line_of(src: &str, pos: usize) -> usize {
    src[..pos.min(src.len())].bytes().filter(|&b| b == b'\n').count() + 1
}

/// Line where `section.key` is assigned; `section` is dotted (`""` for the
/// top level).
pub fn key_line(src: &str, section: &str, key: &str) -> Option<usize> {
    let mut current = String::new();
    for (i, raw) in src.lines().enumerate() {
        let line = raw.trim();
        if line.starts_with('[') {
            current = line.trim_matches(|c| c == '[' || c == ']').trim().to_string();
            continue;
        }
        if let Some((k, _)) = line.split_once('=') {
            if current == section && k.trim() == key {
                return Some(i + 1);
            }
        }
    }
    None
}

/// A validation failure located at `section.key`.
fn at(src: &str, section: &str, key: &str, msg: impl std::fmt::Display) -> Error {
    let path = if section.is_empty() {
        key.to_string()
    } else {
        format!("{section}.{key}")
    };
    match key_line(src, section, key) {
        Some(line) => Error::Config(format!("line {line}: {path}: {msg}")),
        None => Error::Config(format!("{path}: {msg}")),
    }
}

impl ExperimentConfig {
    pub fn parse(src: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(src).map_err(|e| {
            let msg = e.message().trim().to_string();
            match e.span() {
                Some(span) => Error::Config(format!("line {}: {msg}", line_of(src, span.start))),
                None => Error::Config(msg),
            }
        })?;
        cfg.validate(src)?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    fn validate(&self, src: &str) -> Result<()> {
        self.model
            .validate()
            .map_err(|e| at(src, "model", "patch", strip(e)))?;
        let p = self.model.patch;
        if self.data.scene.patch != p {
            return Err(at(src, "data.scene", "patch", format!("must equal model.patch ({p})")));
        }
        if self.data.samples_per_client == 0 {
            return Err(at(src, "data", "samples_per_client", "must be at least 1"));
        }
        if self.data.eval_samples == 0 {
            return Err(at(src, "data", "eval_samples", "must be at least 1"));
        }
        let res_ok = |list: &[Resolution], section: &str, key: &str| -> Result<()> {
            if let Some(r) = list.iter().find(|r| !r.divisible_by(p)) {
                return Err(at(src, section, key, format!("{r} is not divisible by patch size {p}")));
            }
            Ok(())
        };
        if self.clients.resolutions.is_empty() {
            return Err(at(src, "clients", "resolutions", "at least one client is required"));
        }
        res_ok(&self.clients.resolutions, "clients", "resolutions")?;
        res_ok(&self.clients.family, "clients", "family")?;
        check_levels(&self.clients.family).map_err(|e| at(src, "clients", "family", strip(e)))?;
        let t = &self.train;
        for (key, v) in [("rounds", t.rounds), ("epochs", t.epochs), ("batch_size", t.batch_size), ("repeats", t.repeats)] {
            if v == 0 {
                return Err(at(src, "train", key, "must be at least 1"));
            }
        }
        if !(t.lr > 0.0 && t.lr.is_finite()) {
            return Err(at(src, "train", "lr", "must be positive"));
        }
        for (key, v) in [("alpha", self.loss.alpha), ("gamma", self.loss.gamma), ("mu", self.loss.mu)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(at(src, "loss", key, "must be finite and non-negative"));
            }
        }
        if self.eval.resolutions.is_empty() {
            return Err(at(src, "eval", "resolutions", "at least one resolution is required"));
        }
        res_ok(&self.eval.resolutions, "eval", "resolutions")?;
        if !(self.eval.tau > 0.0) {
            return Err(at(src, "eval", "tau", "must be positive"));
        }
        if self.experiment == ExperimentKind::Drift {
            if self.drift.triplets.is_empty() {
                return Err(at(src, "drift", "triplets", "at least one row is required"));
            }
            for row in &self.drift.triplets {
                if row.is_empty() {
                    return Err(at(src, "drift", "triplets", "rows must name at least one client"));
                }
                res_ok(row, "drift", "triplets")?;
            }
        }
        res_ok(&[self.interp.source], "interp", "source")?;
        res_ok(&self.interp.targets, "interp", "targets")?;
        if self.interp.methods.is_empty() {
            return Err(at(src, "interp", "methods", "at least one method is required"));
        }
        res_ok(&[self.scaling.high], "scaling", "high")?;
        res_ok(&[self.scaling.low], "scaling", "low")?;
        res_ok(&self.embed.resolutions, "embed", "resolutions")?;
        if self.embed.samples == 0 {
            return Err(at(src, "embed", "samples", "must be at least 1"));
        }
        self.theory
            .validate()
            .map_err(|e| at(src, "theory", "clients", strip(e)))?;
        Ok(())
    }
}

fn strip(e: Error) -> String {
    match e {
        Error::InvalidArgument(m) | Error::Config(m) => m,
        other => other.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_uses_defaults() {
        let c = ExperimentConfig::parse("experiment = \"compare\"\n").unwrap();
        assert_eq!(c.experiment, ExperimentKind::Compare);
        assert_eq!(c.train, TrainConfig::default());
        assert_eq!(c.clients.resolutions.len(), 3);
    }

    #[test]
    fn round_trips_through_toml() {
        let src = "experiment = \"drift\"\nseed = 9\n[train]\nrounds = 3\nlr = 0.1\n[drift]\ntriplets = [[\"32x24\", \"64x48\", \"64x48\"]]\n";
        let c = ExperimentConfig::parse(src).unwrap();
        assert_eq!(ExperimentConfig::parse(&c.to_toml()).unwrap(), c);
        assert_eq!(c.drift.triplets[0][1], Resolution::new(64, 48));
    }

    #[test]
    fn unknown_key_reports_line() {
        let src = "experiment = \"compare\"\n[train]\nrounds = 3\nlearning_rate = 0.1\n";
        let err = ExperimentConfig::parse(src).unwrap_err().to_string();
        assert!(err.contains("line 4"), "{err}");
        assert!(err.contains("learning_rate"), "{err}");
    }

    #[test]
    fn semantic_error_reports_line() {
        let src = "experiment = \"compare\"\n\n[train]\nrounds = 0\n";
        let err = ExperimentConfig::parse(src).unwrap_err().to_string();
        assert!(err.contains("line 4: train.rounds"), "{err}");
        let src = "experiment = \"compare\"\n[eval]\nresolutions = [\"30x22\"]\n";
        let err = ExperimentConfig::parse(src).unwrap_err().to_string();
        assert!(err.contains("line 3: eval.resolutions"), "{err}");
    }

    #[test]
    fn bad_values_rejected() {
        for src in [
            "experiment = \"nope\"\n",
            "seed = 1\n",
            "experiment = \"compare\"\n[clients]\nfamily = [\"32x24\", \"64x48\"]\n",
            "experiment = \"compare\"\n[train]\noptimizer = \"lbfgs\"\n",
            "experiment = \"compare\"\n[loss]\nalpha = -1.0\n",
            "experiment = \"compare\"\n[clients]\nresolutions = [\"64by48\"]\n",
        ] {
            assert!(matches!(ExperimentConfig::parse(src), Err(Error::Config(_))), "{src}");
        }
    }

    #[test]
    fn key_line_tracks_sections() {
        let src = "a = 1\n[x]\na = 2\n[x.y]\na = 3\n";
        assert_eq!(key_line(src, "", "a"), Some(1));
        assert_eq!(key_line(src, "x", "a"), Some(3));
        assert_eq!(key_line(src, "x.y", "a"), Some(5));
        assert_eq!(key_line(src, "z", "a"), None);
    }
}
