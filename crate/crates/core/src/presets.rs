//! The 1B-scale attention configurations of the design-space study, with the
//! cache sizes they are documented to produce.

use crate::config::{ModelConfig, SharingPattern};

pub const HIDDEN_1B: usize = 2048;
pub const FFN_1B: usize = 5472;
pub const LAYERS_1B: usize = 20;
pub const SEQ_LEN_1B: usize = 2048;
/// GPT-NeoX vocabulary padded to a multiple of 128.
pub const VOCAB_1B: usize = 50_432;

#[derive(Clone, Debug)]
pub struct Preset {
    pub name: &'static str,
    pub config: ModelConfig,
    pub kv_layers: usize,
    pub kv_bytes_per_token: usize,
}

const ROWS: [(&str, usize, usize, usize, SharingPattern, usize, usize); 20] = {
    use SharingPattern::*;
    [
        ("H128-MHA", 128, 16, 16, Uniform(1), 20, 163_840),
        ("H128-GQA4", 128, 16, 4, Uniform(1), 20, 40_960),
        ("H128-GQA2", 128, 16, 2, Uniform(1), 20, 20_480),
        ("H128-MQA", 128, 16, 1, Uniform(1), 20, 10_240),
        ("H64-MQA", 64, 32, 1, Uniform(1), 20, 5120),
        ("H46-MQA", 46, 45, 1, Uniform(1), 20, 3680),
        ("H32-MQA", 32, 64, 1, Uniform(1), 20, 2560),
        ("H512-MQA-CLA2", 512, 4, 1, Uniform(2), 10, 20_480),
        ("H256-MQA-CLA2", 256, 8, 1, Uniform(2), 10, 10_240),
        ("H128-MQA-CLA2", 128, 16, 1, Uniform(2), 10, 5120),
        ("H90-MQA-CLA2", 90, 22, 1, Uniform(2), 10, 3600),
        ("H64-MQA-CLA2", 64, 32, 1, Uniform(2), 10, 2560),
        ("H256-GQA4-CLA2", 256, 8, 4, Uniform(2), 10, 40_960),
        ("H128-GQA4-CLA2", 128, 16, 4, Uniform(2), 10, 20_480),
        ("H128-GQA2-CLA2", 128, 16, 2, Uniform(2), 10, 10_240),
        ("H128-MQA-CLA3", 128, 16, 1, Uniform(3), 7, 3584),
        ("H128-MQA-CLA4", 128, 16, 1, Uniform(4), 5, 2560),
        ("H128-MQA-CLA2-KeepEnds", 128, 16, 1, KeepEnds, 11, 5632),
        ("H128-MQA-CLA2-DenseFront", 128, 16, 1, DenseFront, 11, 5632),
        ("H128-MQA-CLA2-DenseBack", 128, 16, 1, DenseBack, 11, 5632),
    ]
};

/// A 1B-scale config with the given head layout.
pub fn config_1b(d_head: usize, n_query: usize, n_kv: usize, sharing: SharingPattern) -> ModelConfig {
    ModelConfig {
        d_model: HIDDEN_1B,
        d_head,
        n_query,
        n_kv,
        n_layers: LAYERS_1B,
        sharing,
        ffn_size: FFN_1B,
        vocab_size: VOCAB_1B,
        seq_len: SEQ_LEN_1B,
        kv_dtype_bytes: crate::config::DEFAULT_KV_DTYPE_BYTES,
        init_std: crate::config::DEFAULT_INIT_STD,
        norm: crate::tensor::NormKind::Layer,
        split_attn_norm: true,
        rope_base: crate::config::DEFAULT_ROPE_BASE,
    }
}

/// All rows of the 1B design-space table, in table order.
pub fn table1() -> Vec<Preset> {
    ROWS.iter()
        .map(|&(name, d_head, n_query, n_kv, sharing, kv_layers, bytes)| Preset {
            name,
            config: config_1b(d_head, n_query, n_kv, sharing),
            kv_layers,
            kv_bytes_per_token: bytes,
        })
        .collect()
}

pub fn by_name(name: &str) -> Option<Preset> {
    table1().into_iter().find(|p| p.name.eq_ignore_ascii_case(name))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::{kv_bytes_per_token, n_kv_groups};

    #[test]
    fn every_row_reproduces_its_cache_size() {
        let rows = table1();
        assert_eq!(rows.len(), 20);
        for p in rows {
            p.config.validate().unwrap();
            assert_eq!(n_kv_groups(&p.config).unwrap(), p.kv_layers, "{}", p.name);
            assert_eq!(kv_bytes_per_token(&p.config).unwrap(), p.kv_bytes_per_token, "{}", p.name);
        }
    }

    #[test]
    fn mismatched_head_products_only_warn() {
        let h46 = by_name("H46-MQA").unwrap();
        let warnings = h46.config.validate().unwrap();
        assert_eq!(warnings.len(), 1);
        assert!(warnings[0].contains("2070 != 2048"));
    }
}
