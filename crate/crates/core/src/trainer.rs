//! Next-token training: AdamW, global-norm clipping and a warmup + cosine schedule.

use crate::data::{inputs_and_targets, windows, Batcher};
use crate::error::{Error, Result};
use crate::model::LanguageModel;
use crate::params::ParamStore;
use crate::tensor::{Element, Tape};

/// Linear warmup to `peak` then cosine decay to `min_ratio · peak`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub peak: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub min_ratio: f64,
}

impl Schedule {
    /// 5% warmup (rounded up) and a floor of 10% of peak.
    pub fn new(peak: f64, total_steps: usize) -> Self {
        Self::with_fractions(peak, total_steps, 0.05, 0.1)
    }

    pub fn with_fractions(peak: f64, total_steps: usize, warmup_fraction: f64, min_ratio: f64) -> Self {
        let w = warmup_fraction * total_steps as f64;
        // Products like 0.05 · 500 land a hair above the integer.
        let warmup_steps = if (w - w.round()).abs() < 1e-9 { w.round() } else { w.ceil() };
        Self {
            peak,
            warmup_steps: (warmup_steps as usize).min(total_steps),
            total_steps,
            min_ratio,
        }
    }

    /// Learning rate for update `step` in `0..=total_steps`.
    pub fn lr_at(&self, step: usize) -> Result<f64> {
        let (w, t) = (self.warmup_steps, self.total_steps);
        if step > t {
            return Err(Error::contract(format!("step {step} past the last step {t}")));
        }
        let min = self.min_ratio * self.peak;
        Ok(if step < w {
            self.peak * step as f64 / w as f64
        } else if step == w {
            self.peak
        } else if step == t {
            min
        } else {
            let progress = (step - w) as f64 / (t - w) as f64;
            min + 0.5 * (self.peak - min) * (1.0 + (std::f64::consts::PI * progress).cos())
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
        }
    }
}

/// Decoupled-weight-decay Adam. Norm gains and biases are not decayed.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: i32,
}

impl<T: Element> AdamW<T> {
    pub fn new(config: AdamWConfig, params: &ParamStore<T>) -> Self {
        let zeros = || params.iter().map(|p| vec![T::zero(); p.tensor.len()]).collect();
        Self {
            config,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.t
    }

    /// Applies one update at learning rate `lr` using each parameter's `grad`.
    pub fn step(&mut self, params: &mut ParamStore<T>, lr: f64) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::contract("optimizer state does not match the parameters"));
        }
        self.t += 1;
        let c = self.config;
        let b1 = T::of_f64(c.beta1);
        let b2 = T::of_f64(c.beta2);
        let one = T::one();
        let bc1 = T::of_f64(1.0 - c.beta1.powi(self.t));
        let bc2 = T::of_f64(1.0 - c.beta2.powi(self.t));
        let eps = T::of_f64(c.eps);
        let lr = T::of_f64(lr);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let wd = T::of_f64(if p.decays() { c.weight_decay } else { 0.0 });
            let Some(grad) = p.tensor.grad.take() else {
                return Err(Error::contract(format!("parameter {} has no gradient", p.name)));
            };
            if grad.len() != m.len() || p.tensor.len() != m.len() {
                return Err(Error::contract(format!(
                    "{}: {} gradients for {} values and {} moments",
                    p.name,
                    grad.len(),
                    p.tensor.len(),
                    m.len()
                )));
            }
            for (((w, &g), m), v) in p.tensor.data_mut().iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w = *w - lr * (m_hat / (v_hat.sqrt() + eps) + wd * *w);
            }
            p.tensor.grad = Some(grad);
        }
        Ok(())
    }
}

/// L2 norm over every parameter gradient.
pub fn grad_norm<T: Element>(params: &ParamStore<T>) -> f64 {
    params
        .iter()
        .filter_map(|p| p.tensor.grad.as_ref())
        .flat_map(|g| g.iter())
        .map(|g| g.as_f64() * g.as_f64())
        .sum::<f64>()
        .sqrt()
}

/// Rescales all gradients so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_gradients<T: Element>(params: &mut ParamStore<T>, max_norm: f64) -> Result<f64> {
    let norm = grad_norm(params);
    if !norm.is_finite() {
        return Err(Error::NonFinite { op: "gradient norm" });
    }
    if norm > max_norm {
        let s = T::of_f64(max_norm / norm);
        for p in params.iter_mut() {
            if let Some(g) = p.tensor.grad.as_mut() {
                g.iter_mut().for_each(|x| *x = *x * s);
            }
        }
    }
    Ok(norm)
}

/// Mean next-token cross-entropy on `rows` (`batch` windows of `t + 1` tokens),
/// accumulating parameter gradients.
pub fn loss_and_grad<T: Element, M: LanguageModel<T>>(
    model: &mut M,
    rows: &[usize],
    batch: usize,
) -> Result<f64> {
    let (inputs, targets) = inputs_and_targets(rows, batch);
    let mut tape = Tape::new();
    let bound = model.params().bind(&mut tape, true);
    let logits = model.logits_on(&mut tape, &bound, &inputs, batch)?;
    let loss = tape.cross_entropy(logits, &targets)?;
    let value = tape.value(loss).item()?.as_f64();
    tape.backward(loss)?;
    model.params_mut().accumulate_grads(&tape, &bound)?;
    Ok(value)
}

/// Mean next-token cross-entropy without gradients.
pub fn loss_only<T: Element, M: LanguageModel<T>>(model: &M, rows: &[usize], batch: usize) -> Result<f64> {
    let (inputs, targets) = inputs_and_targets(rows, batch);
    let mut tape = Tape::new();
    let bound = model.params().bind(&mut tape, false);
    let logits = model.logits_on(&mut tape, &bound, &inputs, batch)?;
    let loss = tape.cross_entropy(logits, &targets)?;
    Ok(tape.value(loss).item()?.as_f64())
}

/// `exp` of the mean next-token loss over every full `seq_len + 1` window of `bytes`.
pub fn perplexity<T: Element, M: LanguageModel<T>>(model: &M, bytes: &[u8], batch: usize) -> Result<f64> {
    let seq = model.config().seq_len;
    let ws = windows(bytes, seq + 1);
    if ws.is_empty() {
        return Err(Error::contract(format!(
            "{} bytes are shorter than one evaluation window of {}",
            bytes.len(),
            seq + 1
        )));
    }
    let mut total = 0.0;
    for chunk in ws.chunks(batch.max(1)) {
        let rows: Vec<usize> = chunk.concat();
        total += loss_only(model, &rows, chunk.len())? * chunk.len() as f64;
    }
    Ok((total / ws.len() as f64).exp())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_fraction: f64,
    pub min_lr_ratio: f64,
    pub clip_norm: f64,
    pub optimizer: AdamWConfig,
    pub data_seed: u64,
}

impl TrainConfig {
    pub fn new(steps: usize, batch_size: usize, peak_lr: f64) -> Self {
        Self {
            steps,
            batch_size,
            peak_lr,
            warmup_fraction: 0.05,
            min_lr_ratio: 0.1,
            clip_norm: 1.0,
            optimizer: AdamWConfig::default(),
            data_seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub grad_norm: f64,
}

/// Owns the optimizer state and the data stream for one training run.
pub struct Trainer<T> {
    pub config: TrainConfig,
    pub schedule: Schedule,
    optimizer: AdamW<T>,
    batches: Batcher,
    step: usize,
}

impl<T: Element> Trainer<T> {
    pub fn new<M: LanguageModel<T>>(config: TrainConfig, model: &M, train_bytes: &[u8]) -> Result<Self> {
        if config.batch_size == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        if !(config.peak_lr.is_finite() && config.peak_lr >= 0.0) {
            return Err(Error::config(format!("peak lr must be non-negative, got {}", config.peak_lr)));
        }
        if !(0.0..=1.0).contains(&config.warmup_fraction) || !(0.0..=1.0).contains(&config.min_lr_ratio) {
            return Err(Error::config("warmup fraction and minimum lr ratio must lie in [0, 1]"));
        }
        let batches = Batcher::new(train_bytes, model.config().seq_len, config.data_seed)?;
        Ok(Self {
            schedule: Schedule::with_fractions(
                config.peak_lr,
                config.steps,
                config.warmup_fraction,
                config.min_lr_ratio,
            ),
            optimizer: AdamW::new(config.optimizer, model.params()),
            batches,
            step: 0,
            config,
        })
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    /// One optimizer update; update `t` (counting from 1) uses `lr_at(t)`.
    pub fn train_step<M: LanguageModel<T>>(&mut self, model: &mut M) -> Result<StepRecord> {
        let rows = self.batches.next_batch(self.config.batch_size);
        model.params_mut().zero_grads();
        let loss = loss_and_grad(model, &rows, self.config.batch_size)?;
        let step = self.step + 1;
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        let norm = clip_gradients(model.params_mut(), self.config.clip_norm)?;
        let lr = self.schedule.lr_at(step)?;
        self.optimizer.step(model.params_mut(), lr)?;
        self.step = step;
        Ok(StepRecord {
            step,
            lr,
            loss,
            grad_norm: norm,
        })
    }

    /// Runs the remaining steps, calling `on_step` after each.
    pub fn run<M: LanguageModel<T>>(
        &mut self,
        model: &mut M,
        mut on_step: impl FnMut(&StepRecord),
    ) -> Result<Vec<StepRecord>> {
        let mut out = Vec::with_capacity(self.config.steps - self.step.min(self.config.steps));
        while self.step < self.config.steps {
            let r = self.train_step(model)?;
            on_step(&r);
            out.push(r);
        }
        Ok(out)
    }
}

/// Tab-separated `step`, `lr`, `loss` lines with a header.
pub fn loss_curve_tsv(records: &[StepRecord]) -> String {
    let mut s = String::from("step\tlr\tloss\n");
    for r in records {
        s.push_str(&format!("{}\t{:e}\t{}\n", r.step, r.lr, r.loss));
    }
    s
}
