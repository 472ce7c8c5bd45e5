//! Grouped-query attention with cross-layer key/value sharing.
//!
//! A producer layer projects its (normalised) input to keys and values,
//! rotates the keys and publishes both for its group. A consumer layer only
//! projects queries and attends over what its producer published.

use crate::config::NORM_EPS;
use crate::error::{Error, Result};
use crate::kv_cache::KvCacheSet;
use crate::params::{Bound, ParamId};
use crate::tensor::{Element, NormKind, Tape, Tensor, Var};

/// Which key/value head serves `query_head`: contiguous blocks of
/// `n_query / n_kv` query heads share one.
pub fn group_index(query_head: usize, n_query: usize, n_kv: usize) -> usize {
    query_head / (n_query / n_kv)
}

/// Affine norm parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NormParams {
    pub gain: ParamId,
    pub bias: Option<ParamId>,
}

impl NormParams {
    pub fn apply<T: Element>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        x: Var,
        kind: NormKind,
    ) -> Result<Var> {
        let bias = self.bias.map(|b| bound.var(b));
        tape.norm(x, bound.var(self.gain), bias, kind, NORM_EPS)
    }
}

/// Key/value projection weights, present only in producer layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct KvProjection {
    pub wk: ParamId,
    pub wv: ParamId,
    /// Separate K/V-path norm; `None` means the Q-path norm output is reused.
    pub norm: Option<NormParams>,
}

/// One attention block's wiring and weights.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionLayerSpec {
    pub layer_index: usize,
    pub group: usize,
    pub n_query: usize,
    pub n_kv: usize,
    pub d_head: usize,
    pub norm_kind: NormKind,
    pub rope_base: f64,
    pub q_norm: NormParams,
    pub wq: ParamId,
    pub wo: ParamId,
    pub kv: Option<KvProjection>,
}

impl AttentionLayerSpec {
    pub fn is_producer(&self) -> bool {
        self.kv.is_some()
    }
}

/// Where a block gets keys and values from, and where a producer puts them.
pub enum KvSource<'c, T> {
    /// Whole sequence on the tape; `groups[g]` holds group `g`'s rotated keys
    /// and values once its producer has run.
    Sequence {
        groups: Vec<Option<(Var, Var)>>,
        positions: Vec<usize>,
        /// Cut gradient flow from consumer layers back into producer projections.
        detach_consumers: bool,
    },
    /// One new token per sequence against a persistent cache.
    Cache {
        cache: &'c mut KvCacheSet<T>,
        position: usize,
    },
}

impl<T> KvSource<'_, T> {
    pub fn sequence(n_groups: usize, len: usize) -> Self {
        KvSource::Sequence {
            groups: vec![None; n_groups],
            positions: (0..len).collect(),
            detach_consumers: false,
        }
    }
}

/// Output of one attention block plus the keys/values it attended over.
#[derive(Clone, Copy, Debug)]
pub struct AttentionOutput {
    pub output: Var,
    pub keys: Var,
    pub values: Var,
}

/// Rotary embedding of `[.., t, d_head]` features at the given positions.
pub fn apply_rope<T: Element>(
    tape: &mut Tape<T>,
    x: Var,
    positions: &[usize],
    base: f64,
) -> Result<Var> {
    tape.rope(x, positions, base)
}

/// Causal softmax attention.
///
/// `q` is `[n_query, tq, d]` and `k`, `v` are `[n_kv, tk, d]`, optionally with
/// a leading batch axis. Query head `h` reads key/value head
/// [`group_index`]`(h)`. Query row `i` may see key `j` iff `j <= i + causal_offset`.
pub fn scaled_dot_attention<T: Element>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    v: Var,
    causal_offset: usize,
) -> Result<Var> {
    let unbatched = tape.shape(q).len() == 3;
    let as4 = |tape: &mut Tape<T>, x: Var| -> Result<Var> {
        let s = tape.shape(x).to_vec();
        match s.len() {
            3 if unbatched => tape.reshape(x, &[1, s[0], s[1], s[2]]),
            4 if !unbatched => Ok(x),
            _ => Err(Error::shape(format!("attention operand of shape {s:?}"))),
        }
    };
    let (q, k, v) = (as4(tape, q)?, as4(tape, k)?, as4(tape, v)?);
    let (qs, ks) = (tape.shape(q).to_vec(), tape.shape(k).to_vec());
    let [b, n_query, tq, d] = qs[..] else { unreachable!() };
    let [kb, n_kv, tk, kd] = ks[..] else { unreachable!() };
    if tape.shape(v) != ks.as_slice() || kb != b || kd != d {
        return Err(Error::shape(format!(
            "attention q {qs:?}, k {ks:?}, v {:?}",
            tape.shape(v)
        )));
    }
    if n_kv == 0 || n_query % n_kv != 0 {
        return Err(Error::shape(format!(
            "{n_kv} kv heads cannot serve {n_query} query heads"
        )));
    }
    if tk == 0 {
        return Err(Error::contract("attention over an empty key set"));
    }
    let (k, v) = if n_kv == n_query {
        (k, v)
    } else {
        let heads: Vec<usize> = (0..n_query).map(|h| group_index(h, n_query, n_kv)).collect();
        (tape.index_select(k, 1, &heads)?, tape.index_select(v, 1, &heads)?)
    };
    let q3 = tape.reshape(q, &[b * n_query, tq, d])?;
    let k3 = tape.reshape(k, &[b * n_query, tk, d])?;
    let v3 = tape.reshape(v, &[b * n_query, tk, d])?;
    let scores = tape.matmul_t(q3, k3)?;
    let scores = tape.scale(scores, T::of_f64(1.0 / (d as f64).sqrt()))?;
    let scores = tape.causal_mask(scores, causal_offset)?;
    let weights = tape.softmax(scores, 2)?;
    let out = tape.matmul(weights, v3)?;
    if unbatched {
        tape.reshape(out, &[n_query, tq, d])
    } else {
        tape.reshape(out, &[b, n_query, tq, d])
    }
}

/// `[b, t, heads * d]` → `[b, heads, t, d]`.
fn split_heads<T: Element>(tape: &mut Tape<T>, x: Var, heads: usize, d: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let x = tape.reshape(x, &[s[0], s[1], heads, d])?;
    tape.permute(x, &[0, 2, 1, 3])
}

/// Runs one attention block on `hidden` (`[batch, t, d_model]`).
///
/// The residual connection is left to the caller.
pub fn attention_block_forward<T: Element>(
    layer: &AttentionLayerSpec,
    tape: &mut Tape<T>,
    bound: &Bound,
    hidden: Var,
    kv: &mut KvSource<'_, T>,
) -> Result<AttentionOutput> {
    let shape = tape.shape(hidden).to_vec();
    let [batch, t, _] = shape[..] else {
        return Err(Error::shape(format!("hidden state of shape {shape:?}")));
    };
    let (n_query, n_kv, d) = (layer.n_query, layer.n_kv, layer.d_head);
    let q_in = layer.q_norm.apply(tape, bound, hidden, layer.norm_kind)?;
    let positions: Vec<usize> = match kv {
        KvSource::Sequence { positions, .. } => {
            if positions.len() != t {
                return Err(Error::shape(format!("{} positions for {t} tokens", positions.len())));
            }
            positions.clone()
        }
        KvSource::Cache { position, .. } => {
            if t != 1 {
                return Err(Error::contract("cached attention takes one token at a time"));
            }
            vec![*position]
        }
    };

    if let Some(proj) = &layer.kv {
        let kv_in = match &proj.norm {
            Some(n) => n.apply(tape, bound, hidden, layer.norm_kind)?,
            None => q_in,
        };
        let k = tape.matmul(kv_in, bound.var(proj.wk))?;
        let k = split_heads(tape, k, n_kv, d)?;
        let k = apply_rope(tape, k, &positions, layer.rope_base)?;
        let v = tape.matmul(kv_in, bound.var(proj.wv))?;
        let v = split_heads(tape, v, n_kv, d)?;
        match kv {
            KvSource::Sequence { groups, .. } => groups[layer.group] = Some((k, v)),
            KvSource::Cache { cache, .. } => {
                let kt = tape.value(k).clone().reshape(&[batch, n_kv, d])?;
                let vt = tape.value(v).clone().reshape(&[batch, n_kv, d])?;
                cache.append(layer.layer_index, &kt, &vt)?;
            }
        }
    }

    let (keys, values, offset) = match kv {
        KvSource::Sequence {
            groups,
            detach_consumers,
            ..
        } => {
            let (k, v) = groups[layer.group].ok_or_else(|| {
                Error::contract(format!(
                    "layer {} reads group {} before its producer ran",
                    layer.layer_index, layer.group
                ))
            })?;
            if *detach_consumers && !layer.is_producer() {
                (tape.detach(k), tape.detach(v), 0)
            } else {
                (k, v, 0)
            }
        }
        KvSource::Cache { cache, position } => {
            let fill = cache.group_fill(layer.group)?;
            if fill != *position + 1 {
                return Err(Error::contract(format!(
                    "layer {} at position {position} sees {fill} cached tokens in group {}",
                    layer.layer_index, layer.group
                )));
            }
            let (kt, vt): (Tensor<T>, Tensor<T>) = cache.view(layer.group)?;
            (tape.constant(kt), tape.constant(vt), *position)
        }
    };

    let q = tape.matmul(q_in, bound.var(layer.wq))?;
    let q = split_heads(tape, q, n_query, d)?;
    let q = apply_rope(tape, q, &positions, layer.rope_base)?;
    let att = scaled_dot_attention(tape, q, keys, values, offset)?;
    let att = tape.permute(att, &[0, 2, 1, 3])?;
    let att = tape.reshape(att, &[batch, t, n_query * d])?;
    let output = tape.matmul(att, bound.var(layer.wo))?;
    Ok(AttentionOutput {
        output,
        keys,
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    #[test]
    fn head_grouping() {
        let g: Vec<_> = (0..16).map(|h| group_index(h, 16, 4)).collect();
        assert_eq!(g, [0, 0, 0, 0, 1, 1, 1, 1, 2, 2, 2, 2, 3, 3, 3, 3]);
        assert!((0..16).all(|h| group_index(h, 16, 1) == 0));
        assert!((0..16).all(|h| group_index(h, 16, 16) == h));
    }

    #[test]
    fn single_key_returns_its_value() {
        let mut tape = Tape::<f64>::new();
        let q = tape.constant(t(&[2, 1, 2], &[0.3, -2.0, 5.0, 1.0]));
        let k = tape.constant(t(&[1, 1, 2], &[1.0, 4.0]));
        let v = tape.constant(t(&[1, 1, 2], &[7.5, -3.25]));
        let o = scaled_dot_attention(&mut tape, q, k, v, 0).unwrap();
        assert_eq!(tape.value(o).data(), [7.5, -3.25, 7.5, -3.25]);
    }

    #[test]
    fn equal_scores_average_values() {
        let mut tape = Tape::<f64>::new();
        let q = tape.constant(Tensor::zeros(&[1, 1, 2]));
        let k = tape.constant(t(&[1, 3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let v = tape.constant(t(&[1, 3, 2], &[1.0, 0.0, 2.0, 0.0, 6.0, 3.0]));
        let o = scaled_dot_attention(&mut tape, q, k, v, 2).unwrap();
        assert!((tape.value(o).data()[0] - 3.0).abs() < 1e-15);
        assert!((tape.value(o).data()[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn two_key_hand_case() {
        let mut tape = Tape::<f64>::new();
        let q = tape.constant(t(&[1, 1, 1], &[1.0]));
        let k = tape.constant(t(&[1, 2, 1], &[1.0, -1.0]));
        let v = tape.constant(t(&[1, 2, 1], &[2.0, 4.0]));
        let o = scaled_dot_attention(&mut tape, q, k, v, 1).unwrap();
        let w0 = 1.0 / (1.0 + (-2.0f64).exp());
        let expected = 2.0 * w0 + 4.0 * (1.0 - w0);
        assert!((tape.value(o).data()[0] - expected).abs() < 1e-14);
        assert!((tape.value(o).data()[0] - 2.2384).abs() < 1e-4);
    }

    #[test]
    fn empty_keys_rejected() {
        let mut tape = Tape::<f64>::new();
        let q = tape.constant(Tensor::zeros(&[1, 1, 1, 2]));
        let k = tape.constant(Tensor::zeros(&[1, 1, 0, 2]));
        let r = scaled_dot_attention(&mut tape, q, k, k, 0);
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    /// Independent per-head reference: loops over heads and positions directly.
    fn brute_force(q: &[f64], k: &[f64], v: &[f64], heads: usize, kv_heads: usize, t: usize, d: usize) -> Vec<f64> {
        let mut out = vec![0.0; heads * t * d];
        for h in 0..heads {
            let kh = h / (heads / kv_heads);
            for i in 0..t {
                let scores: Vec<f64> = (0..=i)
                    .map(|j| {
                        (0..d).map(|e| q[(h * t + i) * d + e] * k[(kh * t + j) * d + e]).sum::<f64>()
                            / (d as f64).sqrt()
                    })
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
                for (j, s) in scores.iter().enumerate() {
                    let w = (s - m).exp() / z;
                    for e in 0..d {
                        out[(h * t + i) * d + e] += w * v[(kh * t + j) * d + e];
                    }
                }
            }
        }
        out
    }

    #[test]
    fn matches_brute_force_mha_and_gqa() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for (heads, kv_heads) in [(2, 2), (4, 2), (4, 1)] {
            let (tl, d) = (3, 4);
            let mut r = |n: usize| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
            let (qd, kd, vd) = (r(heads * tl * d), r(kv_heads * tl * d), r(kv_heads * tl * d));
            let mut tape = Tape::<f64>::new();
            let q = tape.constant(t(&[heads, tl, d], &qd));
            let k = tape.constant(t(&[kv_heads, tl, d], &kd));
            let v = tape.constant(t(&[kv_heads, tl, d], &vd));
            let o = scaled_dot_attention(&mut tape, q, k, v, 0).unwrap();
            let expected = brute_force(&qd, &kd, &vd, heads, kv_heads, tl, d);
            for (a, b) in tape.value(o).data().iter().zip(&expected) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn rope_inner_products_depend_on_offset_only() {
        let d = 8;
        let q: Vec<f64> = (0..d).map(|i| (i as f64 * 0.37).sin()).collect();
        let k: Vec<f64> = (0..d).map(|i| (i as f64 * 0.91).cos()).collect();
        let dot_at = |m: usize, n: usize| {
            let mut tape = Tape::<f64>::new();
            let qv = tape.constant(t(&[1, d], &q));
            let kv = tape.constant(t(&[1, d], &k));
            let qr = apply_rope(&mut tape, qv, &[m], 10_000.0).unwrap();
            let kr = apply_rope(&mut tape, kv, &[n], 10_000.0).unwrap();
            let (a, b) = (tape.value(qr).data(), tape.value(kr).data());
            a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>()
        };
        assert!((dot_at(3, 1) - dot_at(7, 5)).abs() < 1e-10);
        assert!((dot_at(3, 1) - dot_at(2, 0)).abs() < 1e-10);
    }
}
