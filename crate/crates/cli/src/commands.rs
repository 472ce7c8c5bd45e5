//! `train`, `generate`, `eval-ppl`, `check`, `init` and `corpus`.

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::Context;
use cla_core::data::{decode_lossy, encode, synthetic_corpus, unigram_perplexity, ByteCorpus};
use cla_core::diagnostics::{cache_sharing, decode_equivalence, gradient_check};
use cla_core::trainer::{loss_curve_tsv, perplexity};
use cla_core::{
    Element, LanguageModel, ModelConfig, SamplingMode, SharingPattern, Trainer, TransformerModel,
};

use crate::checkpoint::{self, AnyModel};
use crate::config::RunConfig;
use crate::{with_model, Invalid, Split};

pub struct TrainArgs {
    pub config: PathBuf,
    pub data: Option<PathBuf>,
    pub seed: Option<u64>,
    pub peak_lr: Vec<f64>,
    pub steps: Option<usize>,
    pub out: PathBuf,
    pub log_every: usize,
}

fn read_corpus(path: &Path, val_fraction: f64) -> anyhow::Result<ByteCorpus> {
    let bytes = std::fs::read(path).with_context(|| format!("reading corpus {}", path.display()))?;
    Ok(ByteCorpus::split(bytes, val_fraction)?)
}

/// Outcome of one training run.
pub struct RunSummary {
    pub peak_lr: f64,
    pub step0_val_ppl: f64,
    pub val_ppl: f64,
}

fn train_one<T: Element>(
    mut model: TransformerModel<T>,
    run: &RunConfig,
    corpus: &ByteCorpus,
    dir: &Path,
    log_every: usize,
    out: &mut dyn Write,
) -> anyhow::Result<(RunSummary, TransformerModel<T>)> {
    let tc = run.train_config()?;
    let eval_batch = run.data.eval_batch;
    let step0 = perplexity(&model, corpus.val(), eval_batch)?;
    let mut trainer = Trainer::new(tc.clone(), &model, corpus.train())?;
    let mut log_err = Ok(());
    let records = trainer.run(&mut model, |r| {
        if log_every > 0 && r.step % log_every == 0 && log_err.is_ok() {
            log_err = writeln!(out, "step {} lr {:e} loss {:.6}", r.step, r.lr, r.loss);
        }
    })?;
    log_err?;
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    std::fs::write(dir.join("loss.tsv"), loss_curve_tsv(&records))?;
    let val = perplexity(&model, corpus.val(), eval_batch)?;
    Ok((
        RunSummary {
            peak_lr: tc.peak_lr,
            step0_val_ppl: step0,
            val_ppl: val,
        },
        model,
    ))
}

pub fn train(args: &TrainArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let mut run = RunConfig::load(&args.config)?;
    if let Some(d) = &args.data {
        run.data.path = Some(d.clone());
    }
    if let Some(s) = args.seed {
        run.train.seed = s;
    }
    if let Some(n) = args.steps {
        run.train.steps = n;
    }
    let data_path = run
        .data
        .path
        .clone()
        .ok_or_else(|| Invalid("no training data: pass --data or set data.path".into()))?;
    run.model_config()?;
    run.train_config()?;
    let corpus = read_corpus(&data_path, run.data.val_fraction)?;
    let unigram = unigram_perplexity(corpus.train(), corpus.val());
    let lrs = if args.peak_lr.is_empty() { vec![run.train.peak_lr] } else { args.peak_lr.clone() };
    let sweep = lrs.len() > 1;
    let mut summaries = Vec::new();
    for lr in lrs {
        let mut this = run.clone();
        this.train.peak_lr = lr;
        let dir = if sweep { args.out.join(format!("lr_{lr:e}")) } else { args.out.clone() };
        writeln!(out, "run peak_lr = {lr:e} -> {}", dir.display())?;
        let seed = this.train.seed;
        let (summary, model) = match AnyModel::seeded(&this, seed)? {
            AnyModel::F32(m) => {
                let (s, m) = train_one(m, &this, &corpus, &dir, args.log_every, out)?;
                (s, AnyModel::F32(m))
            }
            AnyModel::F64(m) => {
                let (s, m) = train_one(m, &this, &corpus, &dir, args.log_every, out)?;
                (s, AnyModel::F64(m))
            }
        };
        checkpoint::save(&dir.join("checkpoint.clac"), &this, &model)?;
        writeln!(out, "peak_lr = {:e}", summary.peak_lr)?;
        writeln!(out, "step0_val_ppl = {:.6}", summary.step0_val_ppl)?;
        writeln!(out, "val_ppl = {:.6}", summary.val_ppl)?;
        writeln!(out, "unigram_ppl = {unigram:.6}")?;
        summaries.push(summary);
    }
    if sweep {
        let best = summaries
            .iter()
            .min_by(|a, b| a.val_ppl.total_cmp(&b.val_ppl))
            .expect("at least two runs");
        writeln!(out, "best_peak_lr = {:e}", best.peak_lr)?;
        writeln!(out, "best_val_ppl = {:.6}", best.val_ppl)?;
    }
    Ok(())
}

pub fn generate(
    path: &Path,
    prompt: &str,
    n: usize,
    mode: SamplingMode,
    report_memory: bool,
    out: &mut dyn Write,
) -> anyhow::Result<()> {
    let ck = checkpoint::load(path)?;
    let ids = encode(prompt);
    if ids.is_empty() && n > 0 {
        return Err(Invalid("generation needs a non-empty --prompt".into()).into());
    }
    with_model!(&ck.model, m => {
        let (tokens, cache) = m.generate_with_cache(&ids, n, mode)?;
        writeln!(out, "{}", decode_lossy(&tokens)?)?;
        if report_memory {
            let per_token = cla_core::kv_bytes_per_token(m.config())?;
            let held = cache.total_bytes();
            writeln!(out, "kv_cache_tokens = {}", cache.fill())?;
            writeln!(out, "kv_cache_groups = {}", cache.n_groups())?;
            writeln!(out, "kv_bytes_per_token = {per_token}")?;
            writeln!(out, "kv_cache_bytes = {held}")?;
            if held != per_token * cache.fill() {
                return Err(Invalid(format!(
                    "cache holds {held} bytes, planner predicts {}",
                    per_token * cache.fill()
                ))
                .into());
            }
        }
    });
    Ok(())
}

pub fn eval_ppl(path: &Path, data: &Path, split: Split, out: &mut dyn Write) -> anyhow::Result<()> {
    let ck = checkpoint::load(path)?;
    let corpus = read_corpus(data, ck.config.data.val_fraction)?;
    let all = std::fs::read(data)?;
    let bytes: &[u8] = match split {
        Split::All => &all,
        Split::Train => corpus.train(),
        Split::Val => corpus.val(),
    };
    let ppl = with_model!(&ck.model, m => perplexity(m, bytes, ck.config.data.eval_batch)?);
    writeln!(out, "perplexity = {ppl:.6}")?;
    Ok(())
}

pub struct Checks {
    pub grads: bool,
    pub equivalence: bool,
    pub cache: bool,
    pub checkpoint: Option<PathBuf>,
}

/// Toy model used by the self-checks.
pub fn check_config(d_head: usize, n_kv: usize, sharing: SharingPattern) -> ModelConfig {
    let mut c = ModelConfig::with_heads(32, d_head, n_kv, 4, sharing).expect("toy dims are valid");
    c.vocab_size = 40;
    c.ffn_size = 48;
    c.seq_len = 32;
    c.init_std = 0.1;
    c
}

fn toy_tokens(n: usize, salt: usize) -> Vec<usize> {
    (0..n).map(|i| (i * 7 + salt * 13 + i * i) % 40).collect()
}

pub const GRAD_TOLERANCE: f64 = 1e-4;
/// Central differences at h = 1e-6 resolve gradients only to about 1e-9 (rounding of
/// the loss divided by 2h), so relative error is measured against at least
/// 1e-9 / GRAD_TOLERANCE.
pub const GRAD_FLOOR: f64 = 1e-5;
pub const DECODE_TOLERANCE: f64 = 1e-10;

pub fn check(checks: Checks, out: &mut dyn Write) -> anyhow::Result<()> {
    let mut failures = Vec::new();
    let mut verdict = |out: &mut dyn Write, name: &str, ok: bool, detail: String| -> anyhow::Result<()> {
        writeln!(out, "{} {name}: {detail}", if ok { "PASS" } else { "FAIL" })?;
        if !ok {
            failures.push(name.to_string());
        }
        Ok(())
    };
    if checks.grads {
        let mut cfg = check_config(8, 2, SharingPattern::Uniform(2));
        cfg.seq_len = 8;
        let mut model = TransformerModel::<f64>::seeded(cfg, 21)?;
        let rows = toy_tokens(18, 0).iter().map(|t| (t * 11 + 3) % 40).collect::<Vec<_>>();
        let r = gradient_check(&mut model, &rows, 2, 1000, 8, 1e-6, 5)?;
        let worst = r.max_rel_error(GRAD_FLOOR);
        verdict(
            out,
            "grads",
            worst <= GRAD_TOLERANCE,
            format!("{} sampled parameters, max relative error {worst:.3e}", r.samples.len()),
        )?;
    }
    if checks.equivalence {
        let mut worst = 0.0f64;
        let mut cases = 0;
        for d_head in [8, 16] {
            let n_query = 32 / d_head;
            let mut kvs = vec![n_query, 2, 1];
            kvs.dedup();
            for n_kv in kvs {
                for p in [
                    SharingPattern::Uniform(1),
                    SharingPattern::Uniform(2),
                    SharingPattern::Uniform(3),
                    SharingPattern::KeepEnds,
                ] {
                    let model = TransformerModel::<f64>::seeded(check_config(d_head, n_kv, p), 11)?;
                    worst = worst.max(decode_equivalence(&model, &toy_tokens(32, d_head + n_kv))?);
                    cases += 1;
                }
            }
        }
        verdict(
            out,
            "equivalence",
            worst <= DECODE_TOLERANCE,
            format!("{cases} models x 32 steps, max |logit diff| {worst:.3e}"),
        )?;
    }
    if checks.cache {
        let model = TransformerModel::<f64>::seeded(check_config(8, 1, SharingPattern::Uniform(2)), 9)?;
        let r = cache_sharing(&model, &toy_tokens(16, 0))?;
        let appends_ok = r.appends_per_step.iter().all(|&a| a == r.groups);
        verdict(
            out,
            "cache",
            r.groups_bit_identical && r.groups_distinct && appends_ok,
            format!(
                "{} groups over {} layers, appends per step {:?}, shared K/V bit-identical: {}",
                r.groups,
                model.config().n_layers,
                r.appends_per_step.iter().max(),
                r.groups_bit_identical
            ),
        )?;
    }
    if let Some(path) = &checks.checkpoint {
        match checkpoint::load(path) {
            Ok(ck) => {
                let n = with_model!(&ck.model, m => m.params().len());
                verdict(out, "checkpoint", true, format!("{} tensors, CRC ok", n))?
            }
            Err(e) => verdict(out, "checkpoint", false, format!("{e:#}"))?,
        }
    }
    if failures.is_empty() {
        Ok(())
    } else {
        Err(Invalid(format!("failed: {}", failures.join(", "))).into())
    }
}

pub fn init(config: &Path, seed: Option<u64>, path: &Path, out: &mut dyn Write) -> anyhow::Result<()> {
    let mut run = RunConfig::load(config)?;
    if let Some(s) = seed {
        run.train.seed = s;
    }
    let model = AnyModel::seeded(&run, run.train.seed)?;
    checkpoint::save(path, &run, &model)?;
    let n = with_model!(&model, m => m.parameter_count());
    writeln!(out, "wrote {} ({n} parameters)", path.display())?;
    Ok(())
}

pub fn corpus(path: &Path, bytes: usize, seed: u64, out: &mut dyn Write) -> anyhow::Result<()> {
    std::fs::write(path, synthetic_corpus(bytes, seed))
        .with_context(|| format!("writing {}", path.display()))?;
    writeln!(out, "wrote {bytes} bytes to {}", path.display())?;
    Ok(())
}
