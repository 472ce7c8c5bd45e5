use cla_core::diagnostics::gradient_check;
use cla_core::{ModelConfig, SharingPattern, TransformerModel};

fn toy_cla2() -> ModelConfig {
    let mut c = ModelConfig::with_heads(32, 8, 2, 4, SharingPattern::Uniform(2)).unwrap();
    c.vocab_size = 40;
    c.ffn_size = 48;
    c.seq_len = 8;
    c.init_std = 0.1;
    c
}

#[test]
fn full_model_gradients_match_central_differences() {
    let mut model = TransformerModel::<f64>::seeded(toy_cla2(), 21).unwrap();
    let rows: Vec<usize> = (0..18).map(|i| (i * 11 + 3) % 40).collect();
    let report = gradient_check(&mut model, &rows, 2, 1000, 8, 1e-6, 5).unwrap();
    assert!(report.samples.len() >= 1000);
    for name in ["layers.0.attn.wk", "layers.0.attn.wv", "layers.2.attn.wk", "layers.2.attn.wv"] {
        assert!(report.samples.iter().filter(|s| s.param == name).count() >= 8);
    }
    // Below |g| = 1e-5 the finite differences themselves are only good to ~1e-9.
    assert!(report.max_rel_error(1e-5) <= 1e-4, "{:?}", report.worst(1e-5));
    let resolved: Vec<_> = report.samples.iter().filter(|s| s.analytic.abs() >= 1e-5).collect();
    assert!(resolved.len() * 10 >= report.samples.len() * 9);
    assert!(report.samples.iter().all(|s| (s.analytic - s.numeric).abs() < 5e-9));
}
