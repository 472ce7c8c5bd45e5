//! Decoder-only transformer with pre-norm attention and SwiGLU blocks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::attention::{
    attention_block_forward, AttentionLayerSpec, AttentionOutput, KvProjection, KvSource,
    NormParams,
};
use crate::config::{ModelConfig, NORM_EPS};
use crate::error::{Error, Result};
use crate::kv_cache::KvCacheSet;
use crate::params::{Bound, ParamId, ParamRole, ParamStore};
use crate::tensor::{Element, NormKind, Tape, Tensor, Var};
use crate::topology::{uses_split_norms, SharingMap};

/// Anything the trainer can fit: a parameter store plus a differentiable
/// token → logits map recorded on a tape.
pub trait LanguageModel<T: Element> {
    fn config(&self) -> &ModelConfig;

    fn params(&self) -> &ParamStore<T>;

    fn params_mut(&mut self) -> &mut ParamStore<T>;

    /// Logits `[batch, t, vocab]` for `tokens` laid out as `batch` rows of equal length.
    fn logits_on(&self, tape: &mut Tape<T>, bound: &Bound, tokens: &[usize], batch: usize)
        -> Result<Var>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MlpSpec {
    pub norm: NormParams,
    pub w_gate: ParamId,
    pub w_up: ParamId,
    pub w_down: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub attn: AttentionLayerSpec,
    pub mlp: MlpSpec,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ForwardOptions {
    /// Consumer layers see gradient-blocked copies of their group's keys and values.
    pub detach_consumer_kv: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SamplingMode {
    Greedy,
    Temperature { tau: f64, seed: u64 },
}

/// How fresh parameters are filled.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Matrices from normal(0, init_std), norm gains 1, biases 0. Each tensor
    /// draws from its own stream keyed by the seed and its name, so the values
    /// do not depend on construction order.
    Seeded(u64),
    /// All zeros; for loading weights afterwards.
    Zeros,
}

fn name_stream(seed: u64, name: &str) -> ChaCha8Rng {
    // FNV-1a over the name, folded with the seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    ChaCha8Rng::seed_from_u64(h ^ seed.rotate_left(29))
}

/// Builds parameter tensors in a fixed order with stable names.
pub(crate) struct ParamBuilder<'a, T> {
    store: ParamStore<T>,
    cfg: &'a ModelConfig,
    init: Init,
}

impl<'a, T: Element> ParamBuilder<'a, T> {
    pub(crate) fn new(cfg: &'a ModelConfig, init: Init) -> Self {
        Self {
            store: ParamStore::new(),
            cfg,
            init,
        }
    }

    pub(crate) fn matrix(&mut self, name: String, shape: &[usize], role: ParamRole) -> ParamId {
        let n = shape.iter().product();
        let data = match self.init {
            Init::Seeded(seed) => {
                let normal = Normal::new(0.0, self.cfg.init_std).expect("validated init_std");
                let mut rng = name_stream(seed, &name);
                (0..n).map(|_| T::of_f64(normal.sample(&mut rng))).collect()
            }
            Init::Zeros => vec![T::zero(); n],
        };
        let t = Tensor::new(shape, data).expect("layout shapes are consistent");
        self.store.add(name, role, t)
    }

    pub(crate) fn norm(&mut self, prefix: &str) -> NormParams {
        let d = self.cfg.d_model;
        let gain_init = match self.init {
            Init::Seeded(_) => T::one(),
            Init::Zeros => T::zero(),
        };
        let gain = self.store.add(
            format!("{prefix}.gain"),
            ParamRole::NormAffine,
            Tensor::filled(&[d], gain_init),
        );
        let bias = match self.cfg.norm {
            NormKind::Layer => Some(self.store.add(
                format!("{prefix}.bias"),
                ParamRole::NormAffine,
                Tensor::zeros(&[d]),
            )),
            NormKind::Rms => None,
        };
        NormParams { gain, bias }
    }

    pub(crate) fn finish(self) -> ParamStore<T> {
        self.store
    }
}

/// The standard parameter layout shared by every model in the crate.
pub(crate) struct Layout {
    pub embedding: ParamId,
    pub blocks: Vec<Block>,
    pub final_norm: NormParams,
    pub unembedding: ParamId,
}

pub(crate) fn build_layout<T: Element>(
    cfg: &ModelConfig,
    map: &SharingMap,
    init: Init,
) -> (Layout, ParamStore<T>) {
    let d = cfg.d_model;
    let split = uses_split_norms(cfg, map);
    let mut b = ParamBuilder::<T>::new(cfg, init);
    let embedding = b.matrix("tok_embedding".into(), &[cfg.vocab_size, d], ParamRole::Embedding);
    let mut blocks = Vec::with_capacity(map.n_layers());
    for l in 0..map.n_layers() {
        let p = format!("layers.{l}");
        let producer = map.is_producer(l);
        let (q_norm, kv_norm) = if split {
            let q = b.norm(&format!("{p}.attn.q_norm"));
            let kv = producer.then(|| b.norm(&format!("{p}.attn.kv_norm")));
            (q, kv)
        } else {
            (b.norm(&format!("{p}.attn.norm")), None)
        };
        let wq = b.matrix(format!("{p}.attn.wq"), &[d, cfg.q_width()], ParamRole::Matrix);
        let kv = producer.then(|| KvProjection {
            wk: b.matrix(format!("{p}.attn.wk"), &[d, cfg.kv_width()], ParamRole::Matrix),
            wv: b.matrix(format!("{p}.attn.wv"), &[d, cfg.kv_width()], ParamRole::Matrix),
            norm: kv_norm,
        });
        let wo = b.matrix(format!("{p}.attn.wo"), &[cfg.q_width(), d], ParamRole::Matrix);
        let mlp_norm = b.norm(&format!("{p}.mlp.norm"));
        let w_gate = b.matrix(format!("{p}.mlp.w_gate"), &[d, cfg.ffn_size], ParamRole::Matrix);
        let w_up = b.matrix(format!("{p}.mlp.w_up"), &[d, cfg.ffn_size], ParamRole::Matrix);
        let w_down = b.matrix(format!("{p}.mlp.w_down"), &[cfg.ffn_size, d], ParamRole::Matrix);
        blocks.push(Block {
            attn: AttentionLayerSpec {
                layer_index: l,
                group: map.group_of(l),
                n_query: cfg.n_query,
                n_kv: cfg.n_kv,
                d_head: cfg.d_head,
                norm_kind: cfg.norm,
                rope_base: cfg.rope_base,
                q_norm,
                wq,
                wo,
                kv,
            },
            mlp: MlpSpec {
                norm: mlp_norm,
                w_gate,
                w_up,
                w_down,
            },
        });
    }
    let final_norm = b.norm("final_norm");
    let unembedding = b.matrix("unembedding".into(), &[d, cfg.vocab_size], ParamRole::Matrix);
    (
        Layout {
            embedding,
            blocks,
            final_norm,
            unembedding,
        },
        b.finish(),
    )
}

/// `W_down · (silu(W_gate · x) ⊙ (W_up · x))` over the last axis of `x`.
pub fn swiglu_mlp<T: Element>(
    tape: &mut Tape<T>,
    x: Var,
    w_gate: Var,
    w_up: Var,
    w_down: Var,
) -> Result<Var> {
    let gate = tape.matmul(x, w_gate)?;
    let gate = tape.silu(gate)?;
    let up = tape.matmul(x, w_up)?;
    let h = tape.mul(gate, up)?;
    tape.matmul(h, w_down)
}

/// Layer normalisation over the last axis with ε = 1e-5 and population variance.
pub fn layer_norm<T: Element>(tape: &mut Tape<T>, x: Var, gain: Var, bias: Var) -> Result<Var> {
    tape.norm(x, gain, Some(bias), NormKind::Layer, NORM_EPS)
}

pub(crate) fn check_tokens(cfg: &ModelConfig, tokens: &[usize], batch: usize) -> Result<usize> {
    if batch == 0 || tokens.is_empty() || !tokens.len().is_multiple_of(batch) {
        return Err(Error::shape(format!(
            "{} tokens do not form {batch} equal rows",
            tokens.len()
        )));
    }
    let t = tokens.len() / batch;
    if t > cfg.seq_len {
        return Err(Error::contract(format!(
            "sequence of {t} tokens exceeds seq_len {}",
            cfg.seq_len
        )));
    }
    if let Some(&bad) = tokens.iter().find(|&&id| id >= cfg.vocab_size) {
        return Err(Error::contract(format!(
            "token {bad} outside vocabulary of {}",
            cfg.vocab_size
        )));
    }
    Ok(t)
}

/// Decoder with cross-layer key/value sharing.
#[derive(Clone, Debug)]
pub struct TransformerModel<T> {
    config: ModelConfig,
    sharing: SharingMap,
    params: ParamStore<T>,
    embedding: ParamId,
    blocks: Vec<Block>,
    final_norm: NormParams,
    unembedding: ParamId,
}

impl<T: Element> TransformerModel<T> {
    pub fn new(config: ModelConfig, init: Init) -> Result<Self> {
        config.validate()?;
        let sharing = SharingMap::for_config(&config)?;
        let (layout, params) = build_layout(&config, &sharing, init);
        Ok(Self {
            config,
            sharing,
            params,
            embedding: layout.embedding,
            blocks: layout.blocks,
            final_norm: layout.final_norm,
            unembedding: layout.unembedding,
        })
    }

    pub fn seeded(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::new(config, Init::Seeded(seed))
    }

    pub fn sharing(&self) -> &SharingMap {
        &self.sharing
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn parameter_count(&self) -> usize {
        self.params.total_scalars()
    }

    /// Replaces parameter values by name. The set of names must match exactly.
    pub fn load_tensors(&mut self, tensors: Vec<(String, Tensor<T>)>) -> Result<()> {
        if tensors.len() != self.params.len() {
            return Err(Error::contract(format!(
                "{} tensors supplied for {} parameters",
                tensors.len(),
                self.params.len()
            )));
        }
        let mut seen = vec![false; self.params.len()];
        for (name, t) in tensors {
            let id = self
                .params
                .find(&name)
                .ok_or_else(|| Error::contract(format!("unexpected tensor {name:?}")))?;
            if std::mem::replace(&mut seen[id.index()], true) {
                return Err(Error::contract(format!("tensor {name:?} given twice")));
            }
            let p = self.params.get_mut(id);
            if p.tensor.shape() != t.shape() {
                return Err(Error::shape(format!(
                    "{name}: stored {:?}, expected {:?}",
                    t.shape(),
                    p.tensor.shape()
                )));
            }
            p.tensor.data_mut().copy_from_slice(t.data());
        }
        Ok(())
    }

    fn embed(&self, tape: &mut Tape<T>, bound: &Bound, tokens: &[usize], batch: usize) -> Result<Var> {
        let t = tokens.len() / batch;
        let x = tape.embedding(bound.var(self.embedding), tokens)?;
        tape.reshape(x, &[batch, t, self.config.d_model])
    }

    fn mlp(&self, tape: &mut Tape<T>, bound: &Bound, block: &Block, h: Var) -> Result<Var> {
        let m = &block.mlp;
        let x = m.norm.apply(tape, bound, h, self.config.norm)?;
        swiglu_mlp(
            tape,
            x,
            bound.var(m.w_gate),
            bound.var(m.w_up),
            bound.var(m.w_down),
        )
    }

    fn head(&self, tape: &mut Tape<T>, bound: &Bound, h: Var) -> Result<Var> {
        let x = self.final_norm.apply(tape, bound, h, self.config.norm)?;
        tape.matmul(x, bound.var(self.unembedding))
    }

    /// Runs every block over `h`, calling `inspect` with each layer's attention I/O.
    fn run_blocks(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        mut h: Var,
        kv: &mut KvSource<'_, T>,
        mut inspect: impl FnMut(&Tape<T>, usize, &AttentionOutput),
    ) -> Result<Var> {
        for block in &self.blocks {
            let att = attention_block_forward(&block.attn, tape, bound, h, kv)?;
            inspect(tape, block.attn.layer_index, &att);
            h = tape.add(h, att.output)?;
            let m = self.mlp(tape, bound, block, h)?;
            h = tape.add(h, m)?;
        }
        Ok(h)
    }

    /// Full-context logits on a tape, with extra controls for diagnostics.
    pub fn logits_with(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        tokens: &[usize],
        batch: usize,
        opts: ForwardOptions,
    ) -> Result<Var> {
        let t = check_tokens(&self.config, tokens, batch)?;
        let h = self.embed(tape, bound, tokens, batch)?;
        let mut kv = KvSource::Sequence {
            groups: vec![None; self.sharing.n_groups()],
            positions: (0..t).collect(),
            detach_consumers: opts.detach_consumer_kv,
        };
        let h = self.run_blocks(tape, bound, h, &mut kv, |_, _, _| {})?;
        self.head(tape, bound, h)
    }

    /// Full-context logits `[batch, t, vocab]`; no cache is touched.
    pub fn forward(&self, tokens: &[usize], batch: usize) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let logits = self.logits_on(&mut tape, &bound, tokens, batch)?;
        Ok(tape.value(logits).clone())
    }

    /// One incremental step: `tokens` holds the next token of each sequence.
    ///
    /// Appends exactly one K/V entry per cache group and returns `[batch, vocab]` logits.
    pub fn decode_step(
        &self,
        tokens: &[usize],
        cache: &mut KvCacheSet<T>,
        position: usize,
    ) -> Result<Tensor<T>> {
        self.decode_step_inspect(tokens, cache, position, |_, _, _| {})
    }

    /// Like [`decode_step`](Self::decode_step), also reporting the keys and
    /// values every layer attended over.
    pub fn decode_step_inspect(
        &self,
        tokens: &[usize],
        cache: &mut KvCacheSet<T>,
        position: usize,
        inspect: impl FnMut(usize, &Tensor<T>, &Tensor<T>),
    ) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let v = self.decode_on(&mut tape, &bound, tokens, cache, position, inspect)?;
        Ok(tape.value(v).clone())
    }

    fn decode_on(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        tokens: &[usize],
        cache: &mut KvCacheSet<T>,
        position: usize,
        mut inspect: impl FnMut(usize, &Tensor<T>, &Tensor<T>),
    ) -> Result<Var> {
        let batch = tokens.len();
        if batch != cache.batch() {
            return Err(Error::shape(format!(
                "{batch} tokens for a cache of batch {}",
                cache.batch()
            )));
        }
        if cache.fill() != position {
            return Err(Error::contract(format!(
                "decode at position {position} with {} cached tokens",
                cache.fill()
            )));
        }
        if position >= cache.capacity() {
            return Err(Error::contract(format!(
                "position {position} beyond cache capacity {}",
                cache.capacity()
            )));
        }
        check_tokens(&self.config, tokens, batch)?;
        let h = self.embed(tape, bound, tokens, batch)?;
        let mut kv = KvSource::Cache { cache, position };
        let h = self.run_blocks(tape, bound, h, &mut kv, |tape, layer, att| {
            inspect(layer, tape.value(att.keys), tape.value(att.values))
        })?;
        let logits = self.head(tape, bound, h)?;
        tape.reshape(logits, &[batch, self.config.vocab_size])
    }

    /// Extends `prompt` by `n_new` tokens, returning prompt followed by the generated ids.
    pub fn generate(&self, prompt: &[usize], n_new: usize, mode: SamplingMode) -> Result<Vec<usize>> {
        let (out, _) = self.generate_with_cache(prompt, n_new, mode)?;
        Ok(out)
    }

    /// [`generate`](Self::generate), also returning the final cache state.
    pub fn generate_with_cache(
        &self,
        prompt: &[usize],
        n_new: usize,
        mode: SamplingMode,
    ) -> Result<(Vec<usize>, KvCacheSet<T>)> {
        if prompt.len() + n_new > self.config.seq_len {
            return Err(Error::contract(format!(
                "prompt {} + {n_new} new tokens exceeds seq_len {}",
                prompt.len(),
                self.config.seq_len
            )));
        }
        let mut cache = KvCacheSet::new(&self.config, 1)?;
        let mut out = prompt.to_vec();
        if n_new == 0 {
            return Ok((out, cache));
        }
        if prompt.is_empty() {
            return Err(Error::contract("generation needs a non-empty prompt"));
        }
        let mut sampler = match mode {
            SamplingMode::Greedy => None,
            SamplingMode::Temperature { tau, seed } => {
                if !(tau.is_finite() && tau > 0.0) {
                    return Err(Error::contract(format!("temperature must be positive, got {tau}")));
                }
                Some((tau, ChaCha8Rng::seed_from_u64(seed)))
            }
        };
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let mark = tape.len();
        let mut logits = Vec::new();
        for pos in 0..out.len() + n_new - 1 {
            let v = self.decode_on(&mut tape, &bound, &[out[pos]], &mut cache, pos, |_, _, _| {})?;
            logits = tape.value(v).to_f64();
            tape.truncate(mark);
            if pos + 1 >= out.len() {
                let next = match sampler.as_mut() {
                    None => argmax(&logits),
                    Some((tau, rng)) => sample(&logits, *tau, rng),
                };
                out.push(next);
            }
        }
        debug_assert_eq!(logits.len(), self.config.vocab_size);
        Ok((out, cache))
    }
}

impl<T: Element> LanguageModel<T> for TransformerModel<T> {
    fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    fn logits_on(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        tokens: &[usize],
        batch: usize,
    ) -> Result<Var> {
        self.logits_with(tape, bound, tokens, batch, ForwardOptions::default())
    }
}

/// Index of the largest logit; ties go to the lowest index.
pub fn argmax(logits: &[f64]) -> usize {
    logits
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

fn sample(logits: &[f64], tau: f64, rng: &mut ChaCha8Rng) -> usize {
    use rand::Rng;
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits.iter().map(|l| ((l - max) / tau).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}
