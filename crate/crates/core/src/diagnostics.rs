//! Numerical self-checks shared by the test-suite and the command line.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kv_cache::KvCacheSet;
use crate::model::{LanguageModel, TransformerModel};
use crate::tensor::Tensor;
use crate::trainer::{loss_and_grad, loss_only};

#[derive(Clone, Debug, PartialEq)]
pub struct GradSample {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradSample {
    /// `|a − n| / max(|a|, |n|, floor)`.
    pub fn rel_error(&self, floor: f64) -> f64 {
        let scale = self.analytic.abs().max(self.numeric.abs()).max(floor);
        (self.analytic - self.numeric).abs() / scale
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub samples: Vec<GradSample>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self, floor: f64) -> f64 {
        self.samples.iter().map(|s| s.rel_error(floor)).fold(0.0, f64::max)
    }

    pub fn worst(&self, floor: f64) -> Option<&GradSample> {
        self.samples
            .iter()
            .max_by(|a, b| a.rel_error(floor).total_cmp(&b.rel_error(floor)))
    }
}

/// Compares backpropagated gradients of the mean next-token loss on `rows`
/// against central differences with step `h`.
///
/// Roughly `n_samples` scalars are drawn, spread over every parameter tensor
/// in proportion to size, with at least `min_per_tensor` from each.
pub fn gradient_check<M: LanguageModel<f64>>(
    model: &mut M,
    rows: &[usize],
    batch: usize,
    n_samples: usize,
    min_per_tensor: usize,
    h: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    model.params_mut().zero_grads();
    loss_and_grad(model, rows, batch)?;
    let total = model.params().total_scalars();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks = Vec::new();
    for (pi, p) in model.params().iter().enumerate() {
        let n = p.tensor.len();
        let want = (n_samples * n).div_ceil(total.max(1)).max(min_per_tensor).min(n);
        for idx in sample(&mut rng, n, want) {
            picks.push((pi, idx));
        }
    }
    let mut samples = Vec::with_capacity(picks.len());
    for (pi, idx) in picks {
        let (name, analytic, orig) = {
            let p = model.params().iter().nth(pi).expect("index from enumeration");
            let g = p.tensor.grad.as_ref().ok_or_else(|| Error::contract("missing gradient"))?;
            (p.name.clone(), g[idx], p.tensor.data()[idx])
        };
        let set = |m: &mut M, v: f64| {
            m.params_mut().iter_mut().nth(pi).expect("index from enumeration").tensor.data_mut()[idx] = v;
        };
        set(model, orig + h);
        let plus = loss_only(model, rows, batch)?;
        set(model, orig - h);
        let minus = loss_only(model, rows, batch)?;
        set(model, orig);
        samples.push(GradSample {
            param: name,
            index: idx,
            analytic,
            numeric: (plus - minus) / (2.0 * h),
        });
    }
    Ok(GradCheckReport { samples })
}

/// Largest `|cached − full|` logit difference when `tokens` are decoded one at a time.
pub fn decode_equivalence(model: &TransformerModel<f64>, tokens: &[usize]) -> Result<f64> {
    let vocab = model.config().vocab_size;
    let full = model.forward(tokens, 1)?;
    let mut cache = KvCacheSet::new(model.config(), 1)?;
    let mut worst = 0.0f64;
    for (pos, &tok) in tokens.iter().enumerate() {
        let step = model.decode_step(&[tok], &mut cache, pos)?;
        let row = &full.data()[pos * vocab..(pos + 1) * vocab];
        for (a, b) in step.data().iter().zip(row) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok(worst)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CacheSharingReport {
    /// Steps decoded.
    pub steps: usize,
    /// Distinct cache groups.
    pub groups: usize,
    /// Cache appends observed at each step.
    pub appends_per_step: Vec<usize>,
    /// Every layer read bit-identical K/V to the rest of its group at every step.
    pub groups_bit_identical: bool,
    /// Layers of different groups never read the same K/V.
    pub groups_distinct: bool,
}

/// Decodes `tokens` and records what each layer attended over.
pub fn cache_sharing<T: crate::Element>(
    model: &TransformerModel<T>,
    tokens: &[usize],
) -> Result<CacheSharingReport> {
    let map = model.sharing().clone();
    let mut cache = KvCacheSet::new(model.config(), 1)?;
    let mut appends = Vec::with_capacity(tokens.len());
    let mut identical = true;
    let mut distinct = true;
    for (pos, &tok) in tokens.iter().enumerate() {
        let before = cache.append_count();
        let mut seen: Vec<Option<(Tensor<T>, Tensor<T>)>> = vec![None; map.n_layers()];
        model.decode_step_inspect(&[tok], &mut cache, pos, |l, k, v| {
            seen[l] = Some((k.clone(), v.clone()));
        })?;
        appends.push(cache.append_count() - before);
        for l in 0..map.n_layers() {
            let (k, v) = seen[l].as_ref().ok_or_else(|| Error::contract("layer not reported"))?;
            let (pk, pv) = seen[map.producer_of(map.group_of(l))].as_ref().expect("producer reported");
            identical &= bits(k) == bits(pk) && bits(v) == bits(pv);
            for (other, o) in seen.iter().enumerate() {
                if map.group_of(other) != map.group_of(l) {
                    let (ok, _) = o.as_ref().expect("reported");
                    distinct &= bits(ok) != bits(k);
                }
            }
        }
    }
    Ok(CacheSharingReport {
        steps: tokens.len(),
        groups: map.n_groups(),
        appends_per_step: appends,
        groups_bit_identical: identical,
        groups_distinct: distinct,
    })
}

fn bits<T: crate::Element>(t: &Tensor<T>) -> Vec<u64> {
    t.data().iter().map(|x| x.as_f64().to_bits()).collect()
}
