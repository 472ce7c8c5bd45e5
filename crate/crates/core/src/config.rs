use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::NormKind;

/// How layers are grouped onto shared key/value caches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SharingPattern {
    /// Consecutive groups of `k` layers; an undersized remainder group comes first.
    Uniform(usize),
    /// Layer 0 and the last layer keep their own caches, the rest are paired.
    KeepEnds,
    /// Front half owns caches; one long shared run; last layer owns one.
    DenseFront,
    /// Two owners, one long shared run, then owners to the end.
    DenseBack,
}

impl SharingPattern {
    pub fn no_sharing() -> Self {
        SharingPattern::Uniform(1)
    }
}

impl fmt::Display for SharingPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SharingPattern::Uniform(1) => f.write_str("none"),
            SharingPattern::Uniform(k) => write!(f, "CLA{k}"),
            SharingPattern::KeepEnds => f.write_str("CLA2-KeepEnds"),
            SharingPattern::DenseFront => f.write_str("CLA2-DenseFront"),
            SharingPattern::DenseBack => f.write_str("CLA2-DenseBack"),
        }
    }
}

impl FromStr for SharingPattern {
    type Err = Error;

    /// Accepts `none`, `claK` / `uniform:K`, `keep_ends`, `dense_front`, `dense_back`.
    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase().replace('-', "_");
        let parsed = match lower.as_str() {
            "none" | "mha" | "baseline" => Some(SharingPattern::Uniform(1)),
            "keep_ends" | "cla2_keep_ends" | "cla2_keepends" | "keepends" => {
                Some(SharingPattern::KeepEnds)
            }
            "dense_front" | "cla2_dense_front" | "cla2_densefront" | "densefront" => {
                Some(SharingPattern::DenseFront)
            }
            "dense_back" | "cla2_dense_back" | "cla2_denseback" | "denseback" => {
                Some(SharingPattern::DenseBack)
            }
            other => other
                .strip_prefix("cla")
                .or_else(|| other.strip_prefix("uniform:"))
                .and_then(|k| k.parse().ok())
                .map(SharingPattern::Uniform),
        };
        parsed.ok_or_else(|| Error::config(format!("unknown sharing pattern {s:?}")))
    }
}

/// Architecture and accounting hyperparameters of one model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub d_head: usize,
    pub n_query: usize,
    /// Key/value heads per layer; `n_query` must be a multiple.
    pub n_kv: usize,
    pub n_layers: usize,
    pub sharing: SharingPattern,
    pub ffn_size: usize,
    pub vocab_size: usize,
    pub seq_len: usize,
    /// Bytes per cached K/V element used for memory accounting.
    pub kv_dtype_bytes: usize,
    pub init_std: f64,
    pub norm: NormKind,
    /// In layers that take part in sharing, normalise the Q path and the K/V
    /// path with separate affine parameters. Plain layers always use one norm.
    pub split_attn_norm: bool,
    pub rope_base: f64,
}

pub const DEFAULT_INIT_STD: f64 = 0.01275;
pub const DEFAULT_KV_DTYPE_BYTES: usize = 2;
pub const DEFAULT_ROPE_BASE: f64 = 10_000.0;
pub const NORM_EPS: f64 = 1e-5;

impl ModelConfig {
    /// Builds a config with `n_query = d_model / d_head`.
    pub fn with_heads(
        d_model: usize,
        d_head: usize,
        n_kv: usize,
        n_layers: usize,
        sharing: SharingPattern,
    ) -> Result<Self> {
        if d_head == 0 || !d_model.is_multiple_of(d_head) {
            return Err(Error::config(format!(
                "d_head {d_head} does not divide d_model {d_model}"
            )));
        }
        Ok(Self {
            d_model,
            d_head,
            n_query: d_model / d_head,
            n_kv,
            n_layers,
            sharing,
            ffn_size: (8 * d_model).div_ceil(3),
            vocab_size: 256,
            seq_len: 128,
            kv_dtype_bytes: DEFAULT_KV_DTYPE_BYTES,
            init_std: DEFAULT_INIT_STD,
            norm: NormKind::Layer,
            split_attn_norm: true,
            rope_base: DEFAULT_ROPE_BASE,
        })
    }

    /// Same dimensions, different sharing pattern.
    pub fn with_sharing(&self, sharing: SharingPattern) -> Self {
        Self {
            sharing,
            ..self.clone()
        }
    }

    /// Checks every invariant, returning warnings on success or the full list of violations.
    pub fn validate(&self) -> Result<Vec<String>> {
        let mut errs = Vec::new();
        let mut warnings = Vec::new();
        for (name, v) in [
            ("d_model", self.d_model),
            ("d_head", self.d_head),
            ("n_query", self.n_query),
            ("ffn_size", self.ffn_size),
            ("vocab_size", self.vocab_size),
            ("seq_len", self.seq_len),
            ("kv_dtype_bytes", self.kv_dtype_bytes),
        ] {
            if v == 0 {
                errs.push(format!("{name} must be at least 1"));
            }
        }
        if !self.d_head.is_multiple_of(2) {
            errs.push(format!(
                "d_head must be even for rotary embeddings, got {}",
                self.d_head
            ));
        }
        if self.n_kv == 0 || self.n_kv > self.n_query {
            errs.push(format!(
                "n_kv must be in 1..={}, got {}",
                self.n_query, self.n_kv
            ));
        } else if !self.n_query.is_multiple_of(self.n_kv) {
            errs.push(format!(
                "n_kv must divide n_query ({} % {} != 0)",
                self.n_query, self.n_kv
            ));
        }
        if !(self.init_std.is_finite() && self.init_std > 0.0) {
            errs.push(format!("init_std must be positive, got {}", self.init_std));
        }
        if !(self.rope_base.is_finite() && self.rope_base > 1.0) {
            errs.push(format!("rope_base must exceed 1, got {}", self.rope_base));
        }
        if self.n_layers == 0 {
            warnings.push("n_layers = 0: model is embedding + unembedding only".to_string());
        } else if let Err(Error::Config(mut v)) =
            crate::topology::build_sharing_map(self.n_layers, self.sharing)
        {
            errs.append(&mut v);
        }
        if self.n_query * self.d_head != self.d_model {
            warnings.push(format!(
                "n_query * d_head != d_model ({} != {}); output projection maps {} -> {}",
                self.n_query * self.d_head,
                self.d_model,
                self.n_query * self.d_head,
                self.d_model
            ));
        }
        if errs.is_empty() {
            Ok(warnings)
        } else {
            Err(Error::Config(errs))
        }
    }

    pub fn q_width(&self) -> usize {
        self.n_query * self.d_head
    }

    pub fn kv_width(&self) -> usize {
        self.n_kv * self.d_head
    }

    /// Scalars in one norm's affine parameters.
    pub fn norm_params(&self) -> usize {
        match self.norm {
            NormKind::Layer => 2 * self.d_model,
            NormKind::Rms => self.d_model,
        }
    }
}
