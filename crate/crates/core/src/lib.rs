//! Cross-layer attention for decoder-only transformers.
//!
//! Layers are grouped so that only the first layer of each group projects
//! keys and values; the rest of the group attends over the same cached
//! activations. The crate covers the whole path from topology accounting to
//! training and cached decoding:
//!
//! * [`tensor`]: dense tensors with tape-based reverse-mode differentiation.
//! * [`topology`]: sharing maps and KV-cache / parameter / FLOP accounting.
//! * [`kv_cache`]: one physical cache per layer group.
//! * [`attention`]: GQA head grouping, rotary embeddings, producer/consumer wiring.
//! * [`model`]: the pre-norm SwiGLU decoder, full-context and incremental.
//! * [`trainer`]: AdamW, clipping, warmup + cosine schedule, perplexity.
//! * [`data`]: byte tokenizer and deterministic batching.

pub mod attention;
pub mod baseline;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod kv_cache;
pub mod model;
pub mod params;
pub mod presets;
pub mod tensor;
pub mod topology;
pub mod trainer;

pub use config::{ModelConfig, SharingPattern};
pub use error::{Error, Result};
pub use baseline::PlainTransformer;
pub use kv_cache::KvCacheSet;
pub use model::{ForwardOptions, Init, LanguageModel, SamplingMode, TransformerModel};
pub use params::{ParamId, ParamRole, ParamStore};
pub use tensor::{DType, Element, NormKind, Tape, Tensor, Var};
pub use topology::{
    build_sharing_map, count_parameters, estimate_flops_per_token, kv_bytes_per_token, SharingMap,
};
pub use trainer::{AdamW, AdamWConfig, Schedule, StepRecord, TrainConfig, Trainer};
