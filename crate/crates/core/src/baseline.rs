//! Reference decoder in which every layer owns its key/value projections.
//!
//! Written without any notion of layer groups; used to check that a
//! no-sharing map reduces the shared-KV model to an ordinary transformer.

use crate::attention::{scaled_dot_attention, NormParams};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::{check_tokens, swiglu_mlp, Init, LanguageModel, ParamBuilder};
use crate::params::{Bound, ParamId, ParamRole, ParamStore};
use crate::tensor::{Element, Tape, Tensor, Var};

#[derive(Clone, Debug)]
struct PlainLayer {
    attn_norm: NormParams,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    mlp_norm: NormParams,
    w_gate: ParamId,
    w_up: ParamId,
    w_down: ParamId,
}

#[derive(Clone, Debug)]
pub struct PlainTransformer<T> {
    config: ModelConfig,
    params: ParamStore<T>,
    embedding: ParamId,
    layers: Vec<PlainLayer>,
    final_norm: NormParams,
    unembedding: ParamId,
}

impl<T: Element> PlainTransformer<T> {
    /// The sharing pattern in `config` is ignored.
    pub fn new(config: ModelConfig, init: Init) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let mut b = ParamBuilder::<T>::new(&config, init);
        let embedding = b.matrix("tok_embedding".into(), &[config.vocab_size, d], ParamRole::Embedding);
        let layers = (0..config.n_layers)
            .map(|l| {
                let p = format!("layers.{l}");
                let attn_norm = b.norm(&format!("{p}.attn.norm"));
                let wq = b.matrix(format!("{p}.attn.wq"), &[d, config.q_width()], ParamRole::Matrix);
                let wk = b.matrix(format!("{p}.attn.wk"), &[d, config.kv_width()], ParamRole::Matrix);
                let wv = b.matrix(format!("{p}.attn.wv"), &[d, config.kv_width()], ParamRole::Matrix);
                let wo = b.matrix(format!("{p}.attn.wo"), &[config.q_width(), d], ParamRole::Matrix);
                let mlp_norm = b.norm(&format!("{p}.mlp.norm"));
                let ffn = config.ffn_size;
                PlainLayer {
                    attn_norm,
                    wq,
                    wk,
                    wv,
                    wo,
                    mlp_norm,
                    w_gate: b.matrix(format!("{p}.mlp.w_gate"), &[d, ffn], ParamRole::Matrix),
                    w_up: b.matrix(format!("{p}.mlp.w_up"), &[d, ffn], ParamRole::Matrix),
                    w_down: b.matrix(format!("{p}.mlp.w_down"), &[ffn, d], ParamRole::Matrix),
                }
            })
            .collect();
        let final_norm = b.norm("final_norm");
        let unembedding = b.matrix("unembedding".into(), &[d, config.vocab_size], ParamRole::Matrix);
        Ok(Self {
            params: b.finish(),
            config,
            embedding,
            layers,
            final_norm,
            unembedding,
        })
    }

    pub fn seeded(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::new(config, Init::Seeded(seed))
    }

    pub fn forward(&self, tokens: &[usize], batch: usize) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let v = self.logits_on(&mut tape, &bound, tokens, batch)?;
        Ok(tape.value(v).clone())
    }

    fn heads(&self, tape: &mut Tape<T>, x: Var, heads: usize, t: usize, batch: usize) -> Result<Var> {
        let x = tape.reshape(x, &[batch, t, heads, self.config.d_head])?;
        tape.permute(x, &[0, 2, 1, 3])
    }

    fn attention(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        layer: &PlainLayer,
        h: Var,
        positions: &[usize],
    ) -> Result<Var> {
        let c = &self.config;
        let [batch, t, _] = tape.shape(h)[..] else {
            return Err(Error::shape("hidden state must be rank 3"));
        };
        let x = layer.attn_norm.apply(tape, bound, h, c.norm)?;
        let k = tape.matmul(x, bound.var(layer.wk))?;
        let k = self.heads(tape, k, c.n_kv, t, batch)?;
        let k = tape.rope(k, positions, c.rope_base)?;
        let v = tape.matmul(x, bound.var(layer.wv))?;
        let v = self.heads(tape, v, c.n_kv, t, batch)?;
        let q = tape.matmul(x, bound.var(layer.wq))?;
        let q = self.heads(tape, q, c.n_query, t, batch)?;
        let q = tape.rope(q, positions, c.rope_base)?;
        let a = scaled_dot_attention(tape, q, k, v, 0)?;
        let a = tape.permute(a, &[0, 2, 1, 3])?;
        let a = tape.reshape(a, &[batch, t, c.q_width()])?;
        tape.matmul(a, bound.var(layer.wo))
    }
}

impl<T: Element> LanguageModel<T> for PlainTransformer<T> {
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
        let c = &self.config;
        let t = check_tokens(c, tokens, batch)?;
        let positions: Vec<usize> = (0..t).collect();
        let x = tape.embedding(bound.var(self.embedding), tokens)?;
        let mut h = tape.reshape(x, &[batch, t, c.d_model])?;
        for layer in &self.layers {
            let a = self.attention(tape, bound, layer, h, &positions)?;
            h = tape.add(h, a)?;
            let x = layer.mlp_norm.apply(tape, bound, h, c.norm)?;
            let m = swiglu_mlp(
                tape,
                x,
                bound.var(layer.w_gate),
                bound.var(layer.w_up),
                bound.var(layer.w_down),
            )?;
            h = tape.add(h, m)?;
        }
        let x = self.final_norm.apply(tape, bound, h, c.norm)?;
        tape.matmul(x, bound.var(self.unembedding))
    }
}
