//! Run configuration: one flat JSON document, every field validated before
//! any compute, unknown keys rejected.

use serde::{Deserialize, Serialize};

use crate::cluster::ClusterMode;
use crate::error::{CecError, Result};

/// Attention stage applied to each (query, prototype) pair before the
/// distance metric.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionKind {
    /// Pass features through unchanged.
    None,
    /// Mean-cosine cross-attention rescaling, the comparison baseline.
    Cross,
    /// Bidirectional clustered-patch connection in the given mode.
    Cecm(ClusterMode),
}

impl AttentionKind {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "none" => AttentionKind::None,
            "cross" => AttentionKind::Cross,
            other => match other.strip_prefix("cecm-") {
                Some(mode) => AttentionKind::Cecm(ClusterMode::parse(mode)?),
                None => {
                    return Err(CecError::Configuration(format!(
                        "unknown attention '{other}' (expected none, cross, or cecm-<mode>)"
                    )))
                }
            },
        })
    }

    pub fn as_str(&self) -> String {
        match self {
            AttentionKind::None => "none".into(),
            AttentionKind::Cross => "cross".into(),
            AttentionKind::Cecm(m) => format!("cecm-{}", m.as_str()),
        }
    }
}

/// Distance metric scoring each (query, prototype) pair per patch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricKind {
    /// Cosine between each query patch and the mean support patch.
    Cosine,
    /// Connection-based distance in the given mode.
    Cecd(ClusterMode),
}

impl MetricKind {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "cosine" => MetricKind::Cosine,
            other => match other.strip_prefix("cecd-") {
                Some(mode) => MetricKind::Cecd(ClusterMode::parse(mode)?),
                None => {
                    return Err(CecError::Configuration(format!(
                        "unknown metric '{other}' (expected cosine or cecd-<mode>)"
                    )))
                }
            },
        })
    }

    pub fn as_str(&self) -> String {
        match self {
            MetricKind::Cosine => "cosine".into(),
            MetricKind::Cecd(m) => format!("cecd-{}", m.as_str()),
        }
    }
}

/// How the three task losses combine during base training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossBalance {
    /// Learnable per-task uncertainty weights on top of a fixed lambda.
    Uncertainty { lambda: f64 },
    /// Fixed weights; a weight of zero disables the task entirely.
    Fixed { global: f64, rotation: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seed of the synthetic dataset (image content).
    pub dataset_seed: u64,
    /// Catalog revision string; "v1" is the only one defined.
    pub catalog_version: String,
    pub n_way: usize,
    pub k_shot: usize,
    pub queries_per_class: usize,
    pub train_episodes: usize,
    pub eval_episodes: usize,
    /// "none", "cross", or "cecm-{matmul,cosine,metagcn,transformer}".
    pub attention: String,
    /// "cosine" or "cecd-{matmul,cosine,metagcn,transformer}".
    pub metric: String,
    pub lambda: f64,
    pub temperature: f64,
    pub learning_rate: f64,
    pub finetune_learning_rate: f64,
    pub finetune_steps: usize,
    pub encoder_channels: usize,
    pub items_per_class: usize,
    /// "f64" (default) or "f32".
    pub precision: String,
    pub out_dir: String,
    /// Seed of everything stochastic at run time (init, episode sampling).
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset_seed: 7,
            catalog_version: "v1".into(),
            n_way: 5,
            k_shot: 1,
            queries_per_class: 15,
            train_episodes: 3000,
            eval_episodes: 500,
            attention: "cecm-transformer".into(),
            metric: "cecd-cosine".into(),
            lambda: 1.0,
            temperature: 1.0,
            learning_rate: 1e-3,
            finetune_learning_rate: 1e-2,
            finetune_steps: 50,
            encoder_channels: 32,
            items_per_class: 50,
            precision: "f64".into(),
            out_dir: "out".into(),
            seed: 1,
        }
    }
}

impl RunConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(s)
            .map_err(|e| CecError::Configuration(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn attention_kind(&self) -> Result<AttentionKind> {
        AttentionKind::parse(&self.attention)
    }

    pub fn metric_kind(&self) -> Result<MetricKind> {
        MetricKind::parse(&self.metric)
    }

    pub fn validate(&self) -> Result<()> {
        self.attention_kind()?;
        self.metric_kind()?;
        crate::synth::Catalog::parse(&self.catalog_version)?;
        if self.n_way < 2 {
            return Err(CecError::Configuration("n_way must be at least 2".into()));
        }
        if self.k_shot < 1 {
            return Err(CecError::Configuration("k_shot must be at least 1".into()));
        }
        if self.queries_per_class < 1 {
            return Err(CecError::Configuration("queries_per_class must be at least 1".into()));
        }
        if self.items_per_class < self.k_shot + self.queries_per_class {
            return Err(CecError::Configuration(format!(
                "items_per_class {} too small for k_shot {} + queries_per_class {}",
                self.items_per_class, self.k_shot, self.queries_per_class
            )));
        }
        if self.lambda < 0.0 {
            return Err(CecError::Configuration("lambda must be non-negative".into()));
        }
        if self.temperature <= 0.0 {
            return Err(CecError::Configuration("temperature must be positive".into()));
        }
        if self.learning_rate <= 0.0 || self.finetune_learning_rate <= 0.0 {
            return Err(CecError::Configuration("learning rates must be positive".into()));
        }
        if self.encoder_channels < 1 {
            return Err(CecError::Configuration("encoder_channels must be at least 1".into()));
        }
        match self.precision.as_str() {
            "f32" | "f64" => {}
            other => {
                return Err(CecError::Configuration(format!(
                    "precision must be f32 or f64, got '{other}'"
                )))
            }
        }
        Ok(())
    }
}
