use std::path::Path;
use std::process::{Command, Output};

use cla_cli::checkpoint::{self, AnyModel};
use cla_cli::config::RunConfig;
use cla_cli::plan::{expected_rows, TABLE1_CONFIGS};
use cla_core::{presets, LanguageModel};

fn cla(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cla")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_config(dir: &Path, body: &str) -> String {
    let p = dir.join("run.toml");
    std::fs::write(&p, body).unwrap();
    p.to_str().unwrap().to_string()
}

const TINY: &str = r#"
[model]
d_model = 32
d_head = 8
n_kv = 1
n_layers = 4
ffn_size = 48
seq_len = 16

[sharing]
pattern = "cla2"

[train]
steps = 12
batch_size = 2
peak_lr = 1e-3
"#;

#[test]
fn shipped_table_matches_core_presets() {
    let expected = expected_rows().unwrap();
    let core = presets::table1();
    assert_eq!(TABLE1_CONFIGS.len(), core.len());
    for (((name, text), exp), p) in TABLE1_CONFIGS.iter().zip(&expected).zip(&core) {
        assert_eq!(*name, p.name);
        assert_eq!(exp.name, p.name);
        assert_eq!(RunConfig::parse(text).unwrap().model_config().unwrap(), p.config, "{name}");
        assert_eq!((exp.kv_layers, exp.kv_bytes_per_token), (p.kv_layers, p.kv_bytes_per_token));
    }
    // The files on disk are the ones compiled in.
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/table1");
    for (name, text) in TABLE1_CONFIGS {
        assert_eq!(std::fs::read_to_string(dir.join(format!("{name}.toml"))).unwrap(), *text);
    }
}

#[test]
fn plan_reports() {
    let o = cla(&["plan", "--table1"]);
    assert!(o.status.success());
    let s = stdout(&o);
    assert_eq!(s.lines().filter(|l| l.ends_with(" ok")).count(), 20);
    assert!(s.contains("table1: 20/20 rows match"));

    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/table1/H128-MQA-CLA2.toml");
    let o = cla(&["plan", path.to_str().unwrap()]);
    let s = stdout(&o);
    assert!(s.contains("kv_bytes_per_token = 5120"), "{s}");
    assert!(s.contains("kv_layers = 10"));
    assert!(s.contains("parameter_delta_vs_no_sharing = -5201920"));
    assert!(s.contains("kv_projection_savings = 5242880"));

    let h46 = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/table1/H46-MQA.toml");
    let o = cla(&["plan", h46.to_str().unwrap()]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("2070 != 2048"));
}

#[test]
fn invalid_configs_exit_one_with_every_violation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[model]\nd_model = 30\nd_head = 7\nn_kv = 3\n");
    let o = cla(&["plan", &cfg]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("d_head") && err.contains("n_kv"), "{err}");

    let cfg = write_config(dir.path(), "[model]\nwidth = 3\n");
    assert_eq!(cla(&["plan", &cfg]).status.code(), Some(1));
    assert_eq!(cla(&["plan", "/no/such/file.toml"]).status.code(), Some(2));
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let mut run = RunConfig::parse(TINY).unwrap();
    for precision in ["f64", "f32"] {
        run.model.precision = toml::from_str::<toml::Table>(&format!("p = \"{precision}\""))
            .unwrap()["p"]
            .clone()
            .try_into()
            .unwrap();
        let model = AnyModel::seeded(&run, 3).unwrap();
        let bytes = checkpoint::encode(&run, &model).unwrap();
        let back = checkpoint::decode(&bytes).unwrap();
        assert_eq!(back.config, run);
        assert_eq!(checkpoint::encode(&back.config, &back.model).unwrap(), bytes);
        let toks = [1, 2, 3, 4, 5];
        match (&model, &back.model) {
            (AnyModel::F64(a), AnyModel::F64(b)) => {
                assert_eq!(a.forward(&toks, 1).unwrap().data(), b.forward(&toks, 1).unwrap().data())
            }
            (AnyModel::F32(a), AnyModel::F32(b)) => {
                for (p, q) in a.params().iter().zip(b.params().iter()) {
                    assert_eq!(p.tensor.data(), q.tensor.data());
                }
                assert_eq!(a.forward(&toks, 1).unwrap().data(), b.forward(&toks, 1).unwrap().data())
            }
            _ => panic!("precision changed in round trip"),
        }
    }
}

#[test]
fn corrupted_checkpoints_are_rejected() {
    let run = RunConfig::parse(TINY).unwrap();
    let bytes = checkpoint::encode(&run, &AnyModel::seeded(&run, 0).unwrap()).unwrap();
    for pos in [0, 5, 40, bytes.len() / 2, bytes.len() - 1] {
        let mut bad = bytes.clone();
        bad[pos] ^= 0x10;
        assert!(checkpoint::decode(&bad).is_err(), "flip at {pos}");
    }
    assert!(checkpoint::decode(&bytes[..bytes.len() - 9]).is_err());
    assert!(checkpoint::decode(b"CLAC").is_err());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.clac");
    let mut bad = bytes.clone();
    bad[bytes.len() / 2] ^= 1;
    std::fs::write(&path, bad).unwrap();
    let o = cla(&["check", "--checkpoint", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("FAIL checkpoint"));
    assert!(stdout(&o).contains("CRC"));
}

#[test]
fn train_generate_eval() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = write_config(d, TINY);
    let corpus = d.join("corpus.txt");
    assert!(cla(&["corpus", "--out", corpus.to_str().unwrap(), "--bytes", "20000"]).status.success());
    let train = |out: &str, extra: &[&str]| {
        let mut args = vec!["train", "--config", &cfg, "--data", corpus.to_str().unwrap(), "--out", out];
        args.extend_from_slice(extra);
        let o = cla(&args);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        stdout(&o)
    };
    let a = d.join("a");
    let b = d.join("b");
    train(a.to_str().unwrap(), &["--seed", "4"]);
    train(b.to_str().unwrap(), &["--seed", "4"]);
    let curve = std::fs::read_to_string(a.join("loss.tsv")).unwrap();
    assert_eq!(curve.lines().count(), 13);
    assert!(curve.starts_with("step\tlr\tloss\n1\t"));
    assert_eq!(curve, std::fs::read_to_string(b.join("loss.tsv")).unwrap());
    let ck = a.join("checkpoint.clac");
    assert_eq!(std::fs::read(&ck).unwrap(), std::fs::read(b.join("checkpoint.clac")).unwrap());

    let sweep = d.join("sweep");
    let s = train(sweep.to_str().unwrap(), &["--peak-lr", "1e-3", "3e-3", "--steps", "5"]);
    assert!(s.contains("best_peak_lr"));
    for lr in ["lr_1e-3", "lr_3e-3"] {
        let c = std::fs::read_to_string(sweep.join(lr).join("loss.tsv")).unwrap();
        assert_eq!(c.lines().count(), 6);
    }

    let ck = ck.to_str().unwrap();
    let o = cla(&["generate", "--checkpoint", ck, "--prompt", "The", "--n", "0"]);
    assert_eq!(stdout(&o), "The\n");
    let g = |extra: &[&str]| {
        let mut args = vec!["generate", "--checkpoint", ck, "--prompt", "The ri", "--n", "9"];
        args.extend_from_slice(extra);
        let o = cla(&args);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        stdout(&o)
    };
    assert_eq!(g(&[]), g(&[]));
    let t = ["--mode", "temperature", "--temperature", "0.7", "--seed", "5"];
    assert_eq!(g(&t), g(&t));
    let mem = g(&["--report-memory"]);
    // 6 prompt tokens + 9 new, the last of which is never fed back: 14 cached.
    // Two groups of one 8-wide KV head at 2 bytes: 64 bytes per token.
    assert!(mem.contains("kv_cache_tokens = 14"), "{mem}");
    assert!(mem.contains("kv_bytes_per_token = 64"));
    assert!(mem.contains("kv_cache_bytes = 896"));

    let o = cla(&["eval-ppl", "--checkpoint", ck, "--data", corpus.to_str().unwrap()]);
    let line = stdout(&o);
    let ppl: f64 = line.trim().strip_prefix("perplexity = ").unwrap().parse().unwrap();
    assert!((1.0..256.0).contains(&ppl));
    assert_eq!(stdout(&cla(&["eval-ppl", "--checkpoint", ck, "--data", corpus.to_str().unwrap()])), line);
}

#[test]
fn untrained_perplexity_is_near_vocab_size() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = write_config(d, TINY);
    let corpus = d.join("corpus.txt");
    cla(&["corpus", "--out", corpus.to_str().unwrap(), "--bytes", "8000"]);
    let ck = d.join("init.clac");
    assert!(cla(&["init", "--config", &cfg, "--out", ck.to_str().unwrap()]).status.success());
    let o = cla(&["eval-ppl", "--checkpoint", ck.to_str().unwrap(), "--data", corpus.to_str().unwrap()]);
    let ppl: f64 = stdout(&o).trim().strip_prefix("perplexity = ").unwrap().parse().unwrap();
    assert!((ppl / 256.0 - 1.0).abs() < 0.2, "{ppl}");
}

#[test]
fn self_checks_pass() {
    let o = cla(&["check"]);
    let s = stdout(&o);
    assert!(o.status.success(), "{s}");
    for name in ["grads", "equivalence", "cache"] {
        assert!(s.contains(&format!("PASS {name}")), "{s}");
    }
}

#[test]
fn missing_data_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let o = cla(&["train", "--config", &cfg, "--out", dir.path().join("x").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}
