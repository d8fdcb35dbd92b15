//! Experiment configuration, read from TOML.
//!
//! Unknown keys are rejected. A minimal file:
//!
//! ```toml
//! clients = 5
//! rounds = 10
//! repetitions = 10
//! base_seed = 1
//! ce_methods = ["sv", "gtg", "loo", "adp"]
//!
//! [data]
//! validation_size = 200
//! source = { kind = "synthetic", n = 1200, dim = 4, classes = 3, separation = 2.0 }
//! partition = { kind = "dirichlet", alpha = 0.5 }
//!
//! [hp]
//! eta = 0.1
//! tau = 10
//! batch_size = 32
//!
//! [aggregator]
//! rule = "fedavg"
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::aggregation::{AggregationRule, AggregatorConfig};
use crate::attacks::AttackConfig;
use crate::contribution::{CeMethod, GtgConfig, RoundAggregation, UtilityKind, MAX_EXACT_PLAYERS};
use crate::data::Normalization;
use crate::error::{Error, Result};
use crate::numerics::TrainingHyperParams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic {
        n: usize,
        dim: usize,
        classes: usize,
        separation: f64,
    },
    Csv {
        path: PathBuf,
        label_column: String,
        #[serde(default)]
        normalization: Normalization,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Partition {
    #[default]
    Iid,
    Dirichlet {
        alpha: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    #[default]
    None,
    /// Client k (1-based) relabels with probability (k - 1) / (K - 1).
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    #[serde(default)]
    pub partition: Partition,
    #[serde(default)]
    pub noise: NoiseKind,
    /// Rows held out (before partitioning) as the server validation set.
    pub validation_size: usize,
    /// Inclusive range for per-client local step counts. When absent every
    /// client uses `hp.tau`.
    #[serde(default)]
    pub tau_range: Option<[usize; 2]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Hidden width of the tanh MLP; 0 gives logistic regression.
    #[serde(default)]
    pub hidden: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_id")]
    pub experiment_id: String,
    /// K
    pub clients: usize,
    /// T
    pub rounds: usize,
    #[serde(default = "default_repetitions")]
    pub repetitions: usize,
    #[serde(default)]
    pub base_seed: u64,
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    pub hp: TrainingHyperParams,
    pub aggregator: AggregatorConfig,
    #[serde(default = "default_methods")]
    pub ce_methods: Vec<CeMethod>,
    #[serde(default)]
    pub gtg: GtgConfig,
    #[serde(default)]
    pub attack: AttackConfig,
    #[serde(default)]
    pub utility: UtilityKind,
    #[serde(default)]
    pub score_rounds_aggregation: RoundAggregation,
    /// ADP cosine between update deltas instead of raw weights.
    #[serde(default)]
    pub adp_on_deltas: bool,
}

fn default_id() -> String {
    "experiment".into()
}
fn default_repetitions() -> usize {
    1
}
fn default_methods() -> Vec<CeMethod> {
    vec![CeMethod::Sv, CeMethod::Gtg, CeMethod::Loo, CeMethod::Adp]
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(s).map_err(|e| Error::config("config", e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::config("config", format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_str(&text)?;
        // csv paths are relative to the config file
        if let DataSource::Csv { path: p, .. } = &mut cfg.data.source {
            if p.is_relative() {
                if let Some(dir) = path.parent() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        if self.clients < 2 {
            return Err(Error::config("clients", "must be >= 2"));
        }
        if self.clients > 63 {
            return Err(Error::config("clients", "must be <= 63"));
        }
        if self.rounds < 1 {
            return Err(Error::config("rounds", "must be >= 1"));
        }
        if self.repetitions < 1 {
            return Err(Error::config("repetitions", "must be >= 1"));
        }
        match &self.data.source {
            DataSource::Synthetic { n, dim, classes, separation } => {
                if *classes < 2 {
                    return Err(Error::config("data.source.classes", "must be >= 2"));
                }
                if *dim < 1 {
                    return Err(Error::config("data.source.dim", "must be >= 1"));
                }
                if !separation.is_finite() {
                    return Err(Error::config("data.source.separation", "must be finite"));
                }
                if *n < self.data.validation_size + self.clients.max(*classes) {
                    return Err(Error::config(
                        "data.source.n",
                        "must leave at least max(clients, classes) rows after the validation split",
                    ));
                }
            }
            DataSource::Csv { label_column, .. } => {
                if label_column.is_empty() {
                    return Err(Error::config("data.source.label_column", "must not be empty"));
                }
            }
        }
        if self.data.validation_size == 0 {
            return Err(Error::config("data.validation_size", "must be >= 1"));
        }
        if let Partition::Dirichlet { alpha } = self.data.partition {
            if !(alpha > 0.0) || !alpha.is_finite() {
                return Err(Error::config("data.partition.alpha", "must be finite and > 0"));
            }
        }
        if let Some([lo, hi]) = self.data.tau_range {
            if lo < 1 || hi < lo {
                return Err(Error::config("data.tau_range", "needs 1 <= min <= max"));
            }
        }
        self.hp.validate()?;
        if self.aggregator.rule == AggregationRule::Fedprox && !(self.hp.mu > 0.0) {
            return Err(Error::config("hp.mu", "fedprox needs a proximal coefficient > 0"));
        }
        self.aggregator.validate(self.clients)?;
        if self.ce_methods.is_empty() {
            return Err(Error::config("ce_methods", "must name at least one method"));
        }
        let mut seen = self.ce_methods.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.ce_methods.len() {
            return Err(Error::config("ce_methods", "duplicate method"));
        }
        if self.ce_methods.contains(&CeMethod::Sv) && self.clients > MAX_EXACT_PLAYERS {
            return Err(Error::config("ce_methods", format!("sv needs clients <= {MAX_EXACT_PLAYERS}")));
        }
        self.gtg.validate()?;
        self.attack.validate(self.clients)?;
        Ok(())
    }

    /// Methods in output order (sv, gtg, loo, adp).
    pub fn methods_sorted(&self) -> Vec<CeMethod> {
        let mut m = self.ce_methods.clone();
        m.sort();
        m
    }

    /// Seed of 0-based repetition `r`.
    pub fn seed_of(&self, r: usize) -> u64 {
        self.base_seed.wrapping_add(r as u64)
    }

    /// Copy with a different aggregation rule.
    pub fn with_rule(&self, rule: AggregationRule) -> Self {
        let mut c = self.clone();
        c.aggregator.rule = rule;
        c
    }

    /// sha256 over compact JSON with sorted keys.
    pub fn hash(&self) -> String {
        let value = serde_json::to_value(self).expect("config serialises");
        let canonical = serde_json::to_string(&value).expect("json");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }
}
