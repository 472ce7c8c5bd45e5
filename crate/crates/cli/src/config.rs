//! Run configuration files: TOML with `[model]`, `[sharing]`, `[train]` and `[data]` tables.

use std::path::{Path, PathBuf};

use anyhow::Context;
use cla_core::config::{DEFAULT_INIT_STD, DEFAULT_KV_DTYPE_BYTES, DEFAULT_ROPE_BASE};
use cla_core::trainer::TrainConfig;
use cla_core::{AdamWConfig, ModelConfig, NormKind, SharingPattern};
use serde::{Deserialize, Serialize};

use crate::Invalid;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    Layer,
    Rms,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub d_model: usize,
    pub d_head: usize,
    /// Defaults to `d_model / d_head`.
    pub n_query: Option<usize>,
    pub n_kv: usize,
    pub n_layers: usize,
    /// Defaults to `ceil(8 · d_model / 3)`.
    pub ffn_size: Option<usize>,
    pub vocab_size: usize,
    pub seq_len: usize,
    pub kv_dtype_bytes: usize,
    pub init_std: f64,
    pub norm: Norm,
    pub split_attn_norm: bool,
    pub rope_base: f64,
    pub precision: Precision,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            d_model: 64,
            d_head: 16,
            n_query: None,
            n_kv: 1,
            n_layers: 4,
            ffn_size: None,
            vocab_size: 256,
            seq_len: 64,
            kv_dtype_bytes: DEFAULT_KV_DTYPE_BYTES,
            init_std: DEFAULT_INIT_STD,
            norm: Norm::Layer,
            split_attn_norm: true,
            rope_base: DEFAULT_ROPE_BASE,
            precision: Precision::F64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SharingSection {
    /// `none`, `cla2`, `cla3`, ..., `keep_ends`, `dense_front`, `dense_back`.
    pub pattern: String,
}

impl Default for SharingSection {
    fn default() -> Self {
        Self {
            pattern: "none".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub steps: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_fraction: f64,
    pub min_lr_ratio: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    /// Seeds the weights.
    pub seed: u64,
    /// Seeds the batch order; defaults to `seed`.
    pub data_seed: Option<u64>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let opt = AdamWConfig::default();
        Self {
            steps: 500,
            batch_size: 8,
            peak_lr: 3e-4,
            warmup_fraction: 0.05,
            min_lr_ratio: 0.1,
            beta1: opt.beta1,
            beta2: opt.beta2,
            eps: opt.eps,
            weight_decay: opt.weight_decay,
            clip_norm: 1.0,
            seed: 0,
            data_seed: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub path: Option<PathBuf>,
    /// Trailing share of the corpus held out for validation.
    pub val_fraction: f64,
    pub eval_batch: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            path: None,
            val_fraction: 0.05,
            eval_batch: 16,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    pub sharing: SharingSection,
    pub train: TrainSection,
    pub data: DataSection,
}

impl RunConfig {
    pub fn parse(text: &str) -> anyhow::Result<Self> {
        toml::from_str(text).map_err(|e| Invalid(format!("config: {}", e.message())).into())
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    /// The model config, checked; every violation is listed in the error.
    pub fn model_config(&self) -> anyhow::Result<ModelConfig> {
        let m = &self.model;
        let sharing: SharingPattern = self
            .sharing
            .pattern
            .parse()
            .map_err(|e: cla_core::Error| Invalid(e.to_string()))?;
        let n_query = m.n_query.unwrap_or(m.d_model.checked_div(m.d_head).unwrap_or(0));
        let cfg = ModelConfig {
            d_model: m.d_model,
            d_head: m.d_head,
            n_query,
            n_kv: m.n_kv,
            n_layers: m.n_layers,
            sharing,
            ffn_size: m.ffn_size.unwrap_or((8 * m.d_model).div_ceil(3)),
            vocab_size: m.vocab_size,
            seq_len: m.seq_len,
            kv_dtype_bytes: m.kv_dtype_bytes,
            init_std: m.init_std,
            norm: match m.norm {
                Norm::Layer => NormKind::Layer,
                Norm::Rms => NormKind::Rms,
            },
            split_attn_norm: m.split_attn_norm,
            rope_base: m.rope_base,
        };
        cfg.validate().map_err(|e| Invalid(e.to_string()))?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> anyhow::Result<TrainConfig> {
        let t = &self.train;
        let mut problems = Vec::new();
        if t.batch_size == 0 {
            problems.push("train.batch_size must be positive".to_string());
        }
        if !(t.peak_lr.is_finite() && t.peak_lr >= 0.0) {
            problems.push(format!("train.peak_lr must be non-negative, got {}", t.peak_lr));
        }
        for (name, v) in [("warmup_fraction", t.warmup_fraction), ("min_lr_ratio", t.min_lr_ratio)] {
            if !(0.0..=1.0).contains(&v) {
                problems.push(format!("train.{name} must lie in [0, 1], got {v}"));
            }
        }
        for (name, v) in [("beta1", t.beta1), ("beta2", t.beta2)] {
            if !(0.0..1.0).contains(&v) {
                problems.push(format!("train.{name} must lie in [0, 1), got {v}"));
            }
        }
        let positive = |x: f64| x > 0.0;
        if !positive(t.eps) || !positive(t.clip_norm) || t.weight_decay.is_nan() || t.weight_decay < 0.0 {
            problems.push("train.eps and train.clip_norm must be positive, weight_decay non-negative".into());
        }
        if !(0.0..1.0).contains(&self.data.val_fraction) {
            problems.push(format!("data.val_fraction must lie in [0, 1), got {}", self.data.val_fraction));
        }
        if self.data.eval_batch == 0 {
            problems.push("data.eval_batch must be positive".into());
        }
        if !problems.is_empty() {
            return Err(Invalid(problems.join("; ")).into());
        }
        Ok(TrainConfig {
            steps: t.steps,
            batch_size: t.batch_size,
            peak_lr: t.peak_lr,
            warmup_fraction: t.warmup_fraction,
            min_lr_ratio: t.min_lr_ratio,
            clip_norm: t.clip_norm,
            optimizer: AdamWConfig {
                beta1: t.beta1,
                beta2: t.beta2,
                eps: t.eps,
                weight_decay: t.weight_decay,
            },
            data_seed: t.data_seed.unwrap_or(t.seed),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_uses_defaults() {
        let c = RunConfig::parse("").unwrap();
        assert_eq!(c, RunConfig::default());
        let m = c.model_config().unwrap();
        assert_eq!((m.n_query, m.ffn_size, m.sharing), (4, 171, SharingPattern::Uniform(1)));
        assert_eq!(c.train_config().unwrap().data_seed, 0);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::parse("[model]\nd_modle = 3\n").is_err());
        assert!(RunConfig::parse("[optimizer]\nbeta1 = 0.9\n").is_err());
        assert!(RunConfig::parse("[model]\nnorm = \"batch\"\n").is_err());
    }

    #[test]
    fn violations_are_listed_together() {
        let c = RunConfig::parse("[model]\nd_model = 0\nd_head = 3\n[sharing]\npattern = \"cla9\"\n").unwrap();
        let err = c.model_config().unwrap_err().to_string();
        assert!(err.contains("d_model") && err.contains("d_head"), "{err}");
        let c = RunConfig::parse("[train]\nbatch_size = 0\nbeta2 = 1.5\n").unwrap();
        let err = c.train_config().unwrap_err().to_string();
        assert!(err.contains("batch_size") && err.contains("beta2"), "{err}");
    }

    #[test]
    fn round_trips_through_toml() {
        let mut c = RunConfig::default();
        c.sharing.pattern = "cla2".into();
        c.model.n_query = Some(4);
        c.train.data_seed = Some(9);
        c.data.path = Some("corpus.txt".into());
        assert_eq!(RunConfig::parse(&c.to_toml()).unwrap(), c);
    }
}
