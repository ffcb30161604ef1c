//! Run configuration: one JSON document drives corpus generation, training,
//! sampling and evaluation.
//!
//! The file requires a `version` field and rejects unknown keys, so stale or
//! misspelled settings fail loudly instead of being ignored.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::AnomalyType;
use crate::error::{Error, Result};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ImageConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingConfig {
    /// Tokens per modality block.
    pub k: usize,
    /// Embedding width.
    pub d: usize,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    /// Number of diffusion timesteps T.
    pub t_max: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    /// Number of samples to generate.
    pub size: usize,
    /// Relative weight per anomaly type (includes `none` for normal samples).
    /// Weights are normalized; counts are assigned by largest remainder so a
    /// rerun with the same size reproduces identical per-type counts.
    pub anomaly_mix: BTreeMap<AnomalyType, f64>,
    pub categories: Vec<String>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum TexturalMode {
    /// Texture statistics of the masked input are encoded per sample, at both
    /// training and sampling time.
    PerSample,
    /// Texture statistics only initialize a learnable token block which is
    /// then trained and reused at sampling time.
    InitOnly,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SeedConfig {
    pub corpus: u64,
    pub train: u64,
    pub sample: u64,
    pub eval: u64,
}

/// Optional default artifact locations; CLI flags override these.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct PathConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corpus_dir: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples_dir: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// `trained` fits the small segmentation/classification nets on the
    /// generated corpus; `oracle` injects perfect per-pixel scores (plumbing
    /// checks only).
    pub segmenter: SegmenterKind,
    pub seg_steps: usize,
    pub clf_steps: usize,
    pub seg_batch: usize,
    pub seg_learning_rate: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum SegmenterKind {
    Trained,
    Oracle,
    /// Freshly initialized net, no training (sanity floor).
    Untrained,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub image: ImageConfig,
    pub embedding: EmbeddingConfig,
    pub schedule: ScheduleConfig,
    pub optimizer: OptimizerConfig,
    pub corpus: CorpusConfig,
    pub textural_mode: TexturalMode,
    pub seeds: SeedConfig,
    #[serde(default)]
    pub paths: PathConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut anomaly_mix = BTreeMap::new();
        anomaly_mix.insert(AnomalyType::None, 0.10);
        for t in AnomalyType::DEFECTS {
            anomaly_mix.insert(*t, 0.18);
        }
        RunConfig {
            version: CONFIG_VERSION,
            image: ImageConfig {
                height: 32,
                width: 32,
                channels: 1,
            },
            embedding: EmbeddingConfig { k: 4, d: 32 },
            schedule: ScheduleConfig {
                kind: ScheduleKind::Linear,
                t_max: 200,
                beta_min: 1e-4,
                beta_max: 0.02,
            },
            optimizer: OptimizerConfig {
                learning_rate: 2e-4,
                batch_size: 16,
                steps: 2000,
            },
            corpus: CorpusConfig {
                size: 256,
                anomaly_mix,
                categories: vec!["plate".into(), "strip".into()],
            },
            textural_mode: TexturalMode::PerSample,
            seeds: SeedConfig {
                corpus: 1,
                train: 2,
                sample: 3,
                eval: 4,
            },
            paths: PathConfig::default(),
            eval: EvalConfig {
                segmenter: SegmenterKind::Trained,
                seg_steps: 600,
                clf_steps: 400,
                seg_batch: 8,
                seg_learning_rate: 3e-3,
            },
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Json {
            context: "config".into(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_json(&text)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Override every seed with one value (the CLI `--seed` flag).
    pub fn override_seed(&mut self, seed: u64) {
        self.seeds = SeedConfig {
            corpus: seed,
            train: seed,
            sample: seed,
            eval: seed,
        };
    }

    pub fn validate(&self) -> Result<()> {
        let err = |field: &str, message: &str| Error::config(field, message);
        if self.version != CONFIG_VERSION {
            return Err(Error::config(
                "version",
                format!("expected {CONFIG_VERSION}, got {}", self.version),
            ));
        }
        if self.image.channels != 1 {
            return Err(err("image.channels", "only single-channel images are supported"));
        }
        for (name, v) in [("image.height", self.image.height), ("image.width", self.image.width)] {
            if v < 8 {
                return Err(err(name, "must be at least 8"));
            }
            if v % 4 != 0 {
                return Err(err(name, "must be divisible by 4"));
            }
        }
        if self.embedding.k == 0 {
            return Err(err("embedding.k", "must be at least 1"));
        }
        if self.embedding.d < 2 || self.embedding.d % 2 != 0 {
            return Err(err("embedding.d", "must be a positive even number"));
        }
        if self.schedule.t_max == 0 {
            return Err(err("schedule.t_max", "must be at least 1"));
        }
        if !(self.schedule.beta_min > 0.0) {
            return Err(err("schedule.beta_min", "must be > 0"));
        }
        if self.schedule.beta_min > self.schedule.beta_max {
            return Err(err("schedule.beta_min", "must be <= beta_max"));
        }
        if !(self.schedule.beta_max < 1.0) {
            return Err(err("schedule.beta_max", "must be < 1"));
        }
        if !(self.optimizer.learning_rate > 0.0 && self.optimizer.learning_rate.is_finite()) {
            return Err(err("optimizer.learning_rate", "must be positive and finite"));
        }
        if self.optimizer.batch_size == 0 {
            return Err(err("optimizer.batch_size", "must be at least 1"));
        }
        if self.corpus.categories.is_empty() {
            return Err(err("corpus.categories", "must name at least one category"));
        }
        for c in &self.corpus.categories {
            if !crate::corpus::is_known_category(c) {
                return Err(Error::config(
                    "corpus.categories",
                    format!("unknown category `{c}` (known: {:?})", crate::corpus::KNOWN_CATEGORIES),
                ));
            }
        }
        if self.corpus.anomaly_mix.is_empty() {
            return Err(err("corpus.anomaly_mix", "must not be empty"));
        }
        let mut total = 0.0;
        for (t, w) in &self.corpus.anomaly_mix {
            if !(w.is_finite() && *w >= 0.0) {
                return Err(Error::config(
                    "corpus.anomaly_mix",
                    format!("weight for `{t}` must be finite and >= 0"),
                ));
            }
            total += w;
        }
        if !(total > 0.0) {
            return Err(err("corpus.anomaly_mix", "weights must sum to > 0"));
        }
        if self.eval.seg_batch == 0 {
            return Err(err("eval.seg_batch", "must be at least 1"));
        }
        if !(self.eval.seg_learning_rate > 0.0) {
            return Err(err("eval.seg_learning_rate", "must be positive"));
        }
        Ok(())
    }

    /// Hash of the fields a checkpoint must agree on before sampling can
    /// reuse it (shapes of every parameter block plus the schedule).
    pub fn compat_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let key = serde_json::json!({
            "image": [self.image.height, self.image.width, self.image.channels],
            "embedding": [self.embedding.k, self.embedding.d],
            "schedule": [
                format!("{:?}", self.schedule.kind),
                self.schedule.t_max,
                self.schedule.beta_min,
                self.schedule.beta_max,
            ],
            "textural_mode": format!("{:?}", self.textural_mode),
            "categories": self.corpus.categories,
        });
        let mut hasher = Sha256::new();
        hasher.update(key.to_string().as_bytes());
        hex_string(&hasher.finalize())
    }
}

pub(crate) fn hex_string(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        use std::fmt::Write;
        let _ = write!(s, "{b:02x}");
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_validates() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut json: serde_json::Value =
            serde_json::to_value(RunConfig::default()).unwrap();
        json["no_such_key"] = serde_json::json!(1);
        let err = RunConfig::from_json(&json.to_string()).unwrap_err();
        assert!(err.to_string().contains("no_such_key"), "{err}");
    }

    #[test]
    fn out_of_range_fields_name_themselves() {
        let mut cfg = RunConfig::default();
        cfg.schedule.beta_max = 1.5;
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("beta_max"), "{err}");

        let mut cfg = RunConfig::default();
        cfg.optimizer.batch_size = 0;
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("batch_size"), "{err}");
    }

    #[test]
    fn version_is_required() {
        let mut json: serde_json::Value = serde_json::to_value(RunConfig::default()).unwrap();
        json.as_object_mut().unwrap().remove("version");
        assert!(RunConfig::from_json(&json.to_string()).is_err());
    }

    #[test]
    fn compat_hash_tracks_shape_fields_only() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.optimizer.steps = 17;
        assert_eq!(a.compat_hash(), b.compat_hash());
        b.embedding.d = 16;
        assert_ne!(a.compat_hash(), b.compat_hash());
    }
}
