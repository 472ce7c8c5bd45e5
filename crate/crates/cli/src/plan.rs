//! `plan`: cache, parameter and FLOP accounting without building a model.

use std::io::Write;
use std::path::Path;

use cla_core::topology::{n_kv_groups, uses_split_norms};
use cla_core::{count_parameters, estimate_flops_per_token, kv_bytes_per_token, ModelConfig, SharingMap};

use crate::config::RunConfig;
use crate::Invalid;

macro_rules! table1_files {
    ($($name:literal),* $(,)?) => {
        /// The built-in 1B-scale configs, in table order.
        pub const TABLE1_CONFIGS: &[(&str, &str)] = &[
            $(($name, include_str!(concat!("../../../configs/table1/", $name, ".toml")))),*
        ];
    };
}

table1_files!(
    "H128-MHA",
    "H128-GQA4",
    "H128-GQA2",
    "H128-MQA",
    "H64-MQA",
    "H46-MQA",
    "H32-MQA",
    "H512-MQA-CLA2",
    "H256-MQA-CLA2",
    "H128-MQA-CLA2",
    "H90-MQA-CLA2",
    "H64-MQA-CLA2",
    "H256-GQA4-CLA2",
    "H128-GQA4-CLA2",
    "H128-GQA2-CLA2",
    "H128-MQA-CLA3",
    "H128-MQA-CLA4",
    "H128-MQA-CLA2-KeepEnds",
    "H128-MQA-CLA2-DenseFront",
    "H128-MQA-CLA2-DenseBack",
);

/// Recorded `name, kv_layers, kv_bytes_per_token` for each built-in config.
pub const TABLE1_EXPECTED: &str = include_str!("../../../configs/table1/expected.tsv");

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Expected {
    pub name: String,
    pub kv_layers: usize,
    pub kv_bytes_per_token: usize,
}

pub fn expected_rows() -> anyhow::Result<Vec<Expected>> {
    TABLE1_EXPECTED
        .lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split('\t').collect();
            anyhow::ensure!(f.len() == 3, "malformed expected row {l:?}");
            Ok(Expected {
                name: f[0].to_string(),
                kv_layers: f[1].parse()?,
                kv_bytes_per_token: f[2].parse()?,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Report {
    pub n_layers: usize,
    pub kv_layers: usize,
    pub kv_bytes_per_token: usize,
    pub parameters: usize,
    pub flops_per_token: u64,
    /// Parameters relative to the same config without sharing.
    pub parameter_delta: i64,
    /// Key/value projection weights removed by sharing.
    pub kv_projection_savings: usize,
    /// Extra key/value-path norm parameters of the producer layers.
    pub kv_norm_params: usize,
}

pub fn report(cfg: &ModelConfig) -> anyhow::Result<Report> {
    let map = SharingMap::for_config(cfg)?;
    let groups = n_kv_groups(cfg)?;
    let params = count_parameters(cfg)?;
    let base = count_parameters(&cfg.with_sharing(cla_core::SharingPattern::no_sharing()))?;
    Ok(Report {
        n_layers: cfg.n_layers,
        kv_layers: groups,
        kv_bytes_per_token: kv_bytes_per_token(cfg)?,
        parameters: params,
        flops_per_token: estimate_flops_per_token(cfg)?,
        parameter_delta: params as i64 - base as i64,
        kv_projection_savings: (cfg.n_layers - groups) * 2 * cfg.d_model * cfg.kv_width(),
        kv_norm_params: if uses_split_norms(cfg, &map) { groups * cfg.norm_params() } else { 0 },
    })
}

fn print_report(out: &mut dyn Write, label: &str, cfg: &ModelConfig, r: &Report) -> anyhow::Result<()> {
    writeln!(out, "config = {label}")?;
    writeln!(out, "sharing = {}", cfg.sharing)?;
    writeln!(out, "n_layers = {}", r.n_layers)?;
    writeln!(out, "kv_layers = {}", r.kv_layers)?;
    writeln!(out, "kv_bytes_per_token = {}", r.kv_bytes_per_token)?;
    writeln!(out, "parameters = {}", r.parameters)?;
    writeln!(out, "flops_per_token = {}", r.flops_per_token)?;
    writeln!(out, "parameter_delta_vs_no_sharing = {}", r.parameter_delta)?;
    writeln!(out, "kv_projection_savings = {}", r.kv_projection_savings)?;
    writeln!(out, "kv_norm_params = {}", r.kv_norm_params)?;
    Ok(())
}

fn warn(warnings: &[String]) {
    for w in warnings {
        eprintln!("warning: {w}");
    }
}

pub fn plan_file(path: &Path, out: &mut dyn Write) -> anyhow::Result<()> {
    let run = RunConfig::load(path)?;
    let cfg = run.model_config()?;
    warn(&cfg.validate()?);
    print_report(out, &path.display().to_string(), &cfg, &report(&cfg)?)
}

/// Plans every built-in config and compares it with the recorded values.
pub fn table1(out: &mut dyn Write) -> anyhow::Result<()> {
    let expected = expected_rows()?;
    anyhow::ensure!(
        expected.len() == TABLE1_CONFIGS.len(),
        "{} expected rows for {} configs",
        expected.len(),
        TABLE1_CONFIGS.len()
    );
    writeln!(
        out,
        "{:<26} {:>9} {:>9} {:>18} {:>18}  status",
        "name", "kv_layers", "expected", "kv_bytes_per_token", "expected"
    )?;
    let mut matched = 0;
    for ((name, text), exp) in TABLE1_CONFIGS.iter().zip(&expected) {
        anyhow::ensure!(*name == exp.name, "config {name} listed against row {}", exp.name);
        let cfg = RunConfig::parse(text)?.model_config()?;
        let r = report(&cfg)?;
        let ok = r.kv_layers == exp.kv_layers && r.kv_bytes_per_token == exp.kv_bytes_per_token;
        matched += ok as usize;
        writeln!(
            out,
            "{:<26} {:>9} {:>9} {:>18} {:>18}  {}",
            name,
            r.kv_layers,
            exp.kv_layers,
            r.kv_bytes_per_token,
            exp.kv_bytes_per_token,
            if ok { "ok" } else { "MISMATCH" }
        )?;
    }
    writeln!(out, "table1: {matched}/{} rows match", expected.len())?;
    if matched != expected.len() {
        return Err(Invalid(format!("{} rows differ", expected.len() - matched)).into());
    }
    Ok(())
}
