use cla_core::data::{synthetic_corpus, unigram_perplexity, Batcher, ByteCorpus};
use cla_core::model::Init;
use cla_core::trainer::{clip_gradients, grad_norm, perplexity, loss_curve_tsv};
use cla_core::{
    AdamW, AdamWConfig, LanguageModel, ModelConfig, ParamRole, ParamStore, SharingPattern,
    Tensor, TrainConfig, Trainer, TransformerModel,
};
use proptest::prelude::*;

/// Plain scalar AdamW, written out step by step.
fn scalar_adamw(theta0: f64, grads: &[f64], lrs: &[f64], wd: f64) -> f64 {
    let (b1, b2, eps) = (0.9f64, 0.95f64, 1e-8);
    let (mut theta, mut m, mut v) = (theta0, 0.0, 0.0);
    for (i, (&g, &lr)) in grads.iter().zip(lrs).enumerate() {
        let t = (i + 1) as i32;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let m_hat = m / (1.0 - b1.powi(t));
        let v_hat = v / (1.0 - b2.powi(t));
        theta -= lr * (m_hat / (v_hat.sqrt() + eps) + wd * theta);
    }
    theta
}

fn pseudo(i: usize) -> f64 {
    ((i as f64 * 12.9898).sin() * 43758.5453).fract()
}

#[test]
fn adamw_matches_scalar_recurrence() {
    let init: Vec<f64> = (0..6).map(|i| pseudo(i) - 0.5).collect();
    let mut store = ParamStore::new();
    store.add("w", ParamRole::Matrix, Tensor::from_f64(&[2, 3], &init).unwrap());
    store.add("n.gain", ParamRole::NormAffine, Tensor::from_f64(&[6], &init).unwrap());
    let grads: Vec<Vec<f64>> = (0..10).map(|s| (0..6).map(|i| pseudo(100 + s * 6 + i) * 2.0 - 1.0).collect()).collect();
    let lrs: Vec<f64> = (0..10).map(|s| 1e-2 * (1.0 + s as f64) / 10.0).collect();
    let mut opt = AdamW::new(AdamWConfig::default(), &store);
    for s in 0..10 {
        for p in store.iter_mut() {
            p.tensor.grad = Some(grads[s].clone());
        }
        opt.step(&mut store, lrs[s]).unwrap();
    }
    let got: Vec<Vec<f64>> = store.iter().map(|p| p.tensor.data().to_vec()).collect();
    for i in 0..6 {
        let gs: Vec<f64> = grads.iter().map(|g| g[i]).collect();
        assert!((got[0][i] - scalar_adamw(init[i], &gs, &lrs, 0.1)).abs() <= 1e-12);
        assert!((got[1][i] - scalar_adamw(init[i], &gs, &lrs, 0.0)).abs() <= 1e-12);
    }
}

#[test]
fn adamw_spec_examples() {
    // Zero gradient: only decoupled decay moves decayed tensors.
    let mut store = ParamStore::new();
    store.add("w", ParamRole::Matrix, Tensor::from_f64(&[2], &[2.0, -4.0]).unwrap());
    store.add("b", ParamRole::NormAffine, Tensor::from_f64(&[1], &[3.0]).unwrap());
    let mut opt = AdamW::new(AdamWConfig::default(), &store);
    for p in store.iter_mut() {
        p.tensor.grad = Some(vec![0.0; p.tensor.len()]);
    }
    opt.step(&mut store, 0.5).unwrap();
    let vals: Vec<Vec<f64>> = store.iter().map(|p| p.tensor.data().to_vec()).collect();
    assert_eq!(vals[0], [2.0 * (1.0 - 0.05), -4.0 * (1.0 - 0.05)]);
    assert_eq!(vals[1], [3.0]);

    // First step from zero with unit gradient.
    let mut store = ParamStore::new();
    store.add("w", ParamRole::Matrix, Tensor::from_f64(&[1], &[0.0]).unwrap());
    let mut opt = AdamW::new(AdamWConfig::default(), &store);
    store.iter_mut().next().unwrap().tensor.grad = Some(vec![1.0]);
    opt.step(&mut store, 0.1).unwrap();
    let w = store.iter().next().unwrap().tensor.data()[0];
    assert!((w + 0.1f64 / (1.0 + 1e-8)).abs() < 1e-16);

    // Mismatched gradient length.
    store.iter_mut().next().unwrap().tensor.grad = Some(vec![1.0, 2.0]);
    assert!(opt.step(&mut store, 0.1).is_err());
}

#[test]
fn clip_examples() {
    let mut store = ParamStore::new();
    store.add("a", ParamRole::Matrix, Tensor::<f64>::zeros(&[2]));
    store.add("b", ParamRole::Matrix, Tensor::<f64>::zeros(&[2]));
    let set = |s: &mut ParamStore<f64>, a: [f64; 2], b: [f64; 2]| {
        let mut it = s.iter_mut();
        it.next().unwrap().tensor.grad = Some(a.to_vec());
        it.next().unwrap().tensor.grad = Some(b.to_vec());
    };
    set(&mut store, [0.3, 0.0], [0.0, 0.4]);
    assert_eq!(clip_gradients(&mut store, 1.0).unwrap(), 0.5);
    assert!((grad_norm(&store) - 0.5).abs() < 1e-15);
    set(&mut store, [0.0, 0.0], [0.0, 0.0]);
    clip_gradients(&mut store, 1.0).unwrap();
    assert_eq!(grad_norm(&store), 0.0);
    // Global norm 4 across both tensors.
    set(&mut store, [2.0, 2.0], [2.0, 2.0]);
    clip_gradients(&mut store, 1.0).unwrap();
    assert!(store.iter().all(|p| p.tensor.grad.as_ref().unwrap() == &[0.5, 0.5]));
}

proptest! {
    #[test]
    fn clipped_norm_is_bounded(g in prop::collection::vec(-1e3f64..1e3, 1..40), max in 0.01f64..10.0) {
        let mut store = ParamStore::new();
        store.add("a", ParamRole::Matrix, Tensor::<f64>::zeros(&[g.len()]));
        store.iter_mut().next().unwrap().tensor.grad = Some(g);
        clip_gradients(&mut store, max).unwrap();
        prop_assert!(grad_norm(&store) <= max + 1e-12);
    }
}

fn small(pattern: SharingPattern) -> ModelConfig {
    let mut c = ModelConfig::with_heads(32, 8, 1, 4, pattern).unwrap();
    c.ffn_size = 64;
    c.seq_len = 32;
    c
}

#[test]
fn uniform_logits_give_vocab_perplexity() {
    let model = TransformerModel::<f64>::new(small(SharingPattern::Uniform(2)), Init::Zeros).unwrap();
    let bytes = synthetic_corpus(1000, 2);
    let ppl = perplexity(&model, &bytes, 4).unwrap();
    assert!((ppl - 256.0).abs() < 1e-9);
    assert!(perplexity(&model, &bytes[..10], 4).is_err());
}

#[test]
fn untrained_model_is_near_uniform() {
    let model = TransformerModel::<f64>::seeded(small(SharingPattern::Uniform(2)), 1).unwrap();
    let ppl = perplexity(&model, &synthetic_corpus(4000, 2), 8).unwrap();
    assert!(ppl >= 1.0 && (ppl / 256.0 - 1.0).abs() < 0.2, "{ppl}");
}

#[test]
fn zero_lr_freezes_weights() {
    let mut model = TransformerModel::<f64>::seeded(small(SharingPattern::Uniform(2)), 1).unwrap();
    let before: Vec<Vec<f64>> = model.params().iter().map(|p| p.tensor.data().to_vec()).collect();
    let mut tr = Trainer::new(TrainConfig::new(1, 2, 0.0), &model, &synthetic_corpus(2000, 1)).unwrap();
    tr.run(&mut model, |_| {}).unwrap();
    let after: Vec<Vec<f64>> = model.params().iter().map(|p| p.tensor.data().to_vec()).collect();
    assert_eq!(before, after);
}

fn run(pattern: SharingPattern, steps: usize, seed: u64) -> (Vec<f64>, TransformerModel<f64>) {
    let corpus = synthetic_corpus(200_000, 4);
    let mut model = TransformerModel::<f64>::seeded(small(pattern), seed).unwrap();
    let mut cfg = TrainConfig::new(steps, 4, 3e-3);
    cfg.data_seed = seed;
    let mut tr = Trainer::new(cfg, &model, &corpus).unwrap();
    let recs = tr.run(&mut model, |_| {}).unwrap();
    assert_eq!(loss_curve_tsv(&recs).lines().count(), steps + 1);
    (recs.iter().map(|r| r.loss).collect(), model)
}

#[test]
fn training_is_deterministic() {
    let (a, ma) = run(SharingPattern::Uniform(2), 20, 3);
    let (b, mb) = run(SharingPattern::Uniform(2), 20, 3);
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    for (p, q) in ma.params().iter().zip(mb.params().iter()) {
        assert_eq!(p.tensor.data(), q.tensor.data());
    }
    let (c, _) = run(SharingPattern::Uniform(2), 20, 4);
    assert_ne!(a, c);
}

#[test]
fn shared_and_unshared_models_both_learn() {
    let ln_vocab = 256f64.ln();
    for p in [SharingPattern::Uniform(1), SharingPattern::Uniform(2)] {
        let (losses, _) = run(p, 150, 0);
        let tail: f64 = losses[140..].iter().sum::<f64>() / 10.0;
        assert!(tail < ln_vocab - 1.0 && tail < losses[0], "{p}: {tail}");
    }
}

#[test]
fn validation_bytes_never_reach_training() {
    // Mark the validation suffix with a byte that never occurs in training.
    let mut bytes = vec![b'a'; 5000];
    bytes[4500..].fill(b'z');
    let corpus = ByteCorpus::split(bytes, 0.1).unwrap();
    let mut b = Batcher::new(corpus.train(), 15, 0).unwrap();
    for _ in 0..100 {
        assert!(b.next_batch(8).iter().all(|&t| t == usize::from(b'a')));
    }
    assert!(unigram_perplexity(corpus.train(), corpus.val()) > 200.0);
}
