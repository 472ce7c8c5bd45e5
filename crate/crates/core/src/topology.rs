//! Layer-to-cache grouping and the memory, parameter and FLOP accounting
//! that follows from it.

use crate::config::{ModelConfig, SharingPattern};
use crate::error::{Error, Result};

/// Assignment of layers to key/value cache groups.
///
/// Every group is a contiguous run of layers. The first layer of a run is the
/// group's producer: it owns the K/V projections and writes the cache; the
/// other layers only read it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SharingMap {
    group_of: Vec<usize>,
    producer_of: Vec<usize>,
}

impl SharingMap {
    /// Builds the map from consecutive group sizes.
    fn from_sizes(sizes: &[usize]) -> Self {
        let mut group_of = Vec::with_capacity(sizes.iter().sum());
        let mut producer_of = Vec::with_capacity(sizes.len());
        for (g, &size) in sizes.iter().enumerate() {
            producer_of.push(group_of.len());
            group_of.extend(std::iter::repeat_n(g, size));
        }
        Self {
            group_of,
            producer_of,
        }
    }

    /// The map of a model with no layers.
    pub fn empty() -> Self {
        Self {
            group_of: Vec::new(),
            producer_of: Vec::new(),
        }
    }

    /// Map for `cfg`, or an empty map when the config has no layers.
    pub fn for_config(cfg: &ModelConfig) -> Result<Self> {
        if cfg.n_layers == 0 {
            Ok(Self::empty())
        } else {
            build_sharing_map(cfg.n_layers, cfg.sharing)
        }
    }

    pub fn n_layers(&self) -> usize {
        self.group_of.len()
    }

    pub fn n_groups(&self) -> usize {
        self.producer_of.len()
    }

    pub fn group_of(&self, layer: usize) -> usize {
        self.group_of[layer]
    }

    pub fn producer_of(&self, group: usize) -> usize {
        self.producer_of[group]
    }

    pub fn groups(&self) -> &[usize] {
        &self.group_of
    }

    pub fn producers(&self) -> &[usize] {
        &self.producer_of
    }

    pub fn is_producer(&self, layer: usize) -> bool {
        self.producer_of[self.group_of[layer]] == layer
    }

    /// True when at least one layer reads a cache it did not write.
    pub fn has_sharing(&self) -> bool {
        self.n_groups() < self.n_layers()
    }

    pub fn group_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.n_groups()];
        for &g in &self.group_of {
            sizes[g] += 1;
        }
        sizes
    }

    /// Layers of `group`, producer first.
    pub fn members(&self, group: usize) -> impl Iterator<Item = usize> + '_ {
        self.group_of
            .iter()
            .enumerate()
            .filter(move |&(_, &g)| g == group)
            .map(|(l, _)| l)
    }
}

/// Groups `n_layers` layers according to `pattern`.
///
/// `Uniform(k)` with `r = n_layers mod k > 0` puts the size-`r` group at the
/// front. The three non-uniform patterns need an even layer count of at least
/// four and generalise the 20-layer layouts as follows, for `L` layers and
/// `h = L / 2`:
///
/// * `KeepEnds`: `{0}`, pairs `{1,2} .. {L-3,L-2}`, `{L-1}`.
/// * `DenseFront`: singletons `0 .. h-2`, one run `{h-1 .. L-2}`, `{L-1}`.
/// * `DenseBack`: `{0}`, one run `{1 .. h}`, singletons `h+1 .. L-1`.
///
/// Each yields `h + 1` groups.
pub fn build_sharing_map(n_layers: usize, pattern: SharingPattern) -> Result<SharingMap> {
    if n_layers == 0 {
        return Err(Error::config("a sharing map needs at least one layer"));
    }
    let sizes = match pattern {
        SharingPattern::Uniform(0) => {
            return Err(Error::config("sharing factor must be at least 1"));
        }
        SharingPattern::Uniform(k) => {
            let r = n_layers % k;
            let mut sizes = Vec::with_capacity(n_layers / k + 1);
            if r > 0 {
                sizes.push(r);
            }
            sizes.extend(std::iter::repeat_n(k, n_layers / k));
            sizes
        }
        _ if n_layers < 4 || !n_layers.is_multiple_of(2) => {
            return Err(Error::config(format!(
                "{pattern} is defined for an even layer count >= 4, got {n_layers}"
            )));
        }
        SharingPattern::KeepEnds => {
            let mut sizes = vec![1];
            sizes.extend(std::iter::repeat_n(2, (n_layers - 2) / 2));
            sizes.push(1);
            sizes
        }
        SharingPattern::DenseFront => {
            let h = n_layers / 2;
            let mut sizes = vec![1; h - 1];
            sizes.push(h);
            sizes.push(1);
            sizes
        }
        SharingPattern::DenseBack => {
            let h = n_layers / 2;
            let mut sizes = vec![1, h];
            sizes.extend(std::iter::repeat_n(1, h - 1));
            sizes
        }
    };
    Ok(SharingMap::from_sizes(&sizes))
}

/// Number of distinct K/V caches the config produces.
pub fn n_kv_groups(cfg: &ModelConfig) -> Result<usize> {
    Ok(SharingMap::for_config(cfg)?.n_groups())
}

/// K and V bytes stored per token across the whole model.
pub fn kv_bytes_per_token(cfg: &ModelConfig) -> Result<usize> {
    Ok(2 * cfg.n_kv * cfg.d_head * n_kv_groups(cfg)? * cfg.kv_dtype_bytes)
}

/// Whether attention norms are split into Q-path and K/V-path norms.
pub fn uses_split_norms(cfg: &ModelConfig, map: &SharingMap) -> bool {
    cfg.split_attn_norm && map.has_sharing()
}

/// Exact count of learnable scalars, mirroring the tensors a model instantiates.
pub fn count_parameters(cfg: &ModelConfig) -> Result<usize> {
    let map = SharingMap::for_config(cfg)?;
    let d = cfg.d_model;
    let norm = cfg.norm_params();
    let split = uses_split_norms(cfg, &map);
    let mut total = cfg.vocab_size * d + norm + d * cfg.vocab_size;
    for layer in 0..map.n_layers() {
        let producer = map.is_producer(layer);
        total += norm;
        if split && producer {
            total += norm;
        }
        total += 2 * d * cfg.q_width();
        if producer {
            total += 2 * d * cfg.kv_width();
        }
        total += norm + 3 * d * cfg.ffn_size;
    }
    Ok(total)
}

/// Forward FLOPs per token: two per multiply-accumulate of every weight
/// matrix except the embedding lookup, plus `2 · 2 · n_query · d_head · seq_len`
/// per layer for attention scores and the weighted sum of values.
pub fn estimate_flops_per_token(cfg: &ModelConfig) -> Result<u64> {
    let map = SharingMap::for_config(cfg)?;
    let d = cfg.d_model as u64;
    let mut matmul_params = d * cfg.vocab_size as u64;
    for layer in 0..map.n_layers() {
        matmul_params += 2 * d * cfg.q_width() as u64 + 3 * d * cfg.ffn_size as u64;
        if map.is_producer(layer) {
            matmul_params += 2 * d * cfg.kv_width() as u64;
        }
    }
    let attention = map.n_layers() as u64 * 4 * cfg.q_width() as u64 * cfg.seq_len as u64;
    Ok(2 * matmul_params + attention)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn groups(n: usize, p: SharingPattern) -> Vec<usize> {
        build_sharing_map(n, p).unwrap().groups().to_vec()
    }

    #[test]
    fn ten_layer_goldens() {
        assert_eq!(
            groups(10, SharingPattern::Uniform(2)),
            [0, 0, 1, 1, 2, 2, 3, 3, 4, 4]
        );
        assert_eq!(
            groups(10, SharingPattern::Uniform(3)),
            [0, 1, 1, 1, 2, 2, 2, 3, 3, 3]
        );
    }

    #[test]
    fn twenty_layer_goldens() {
        let none = build_sharing_map(20, SharingPattern::Uniform(1)).unwrap();
        assert_eq!(none.groups(), (0..20).collect::<Vec<_>>());
        assert!(!none.has_sharing());

        let cla3 = build_sharing_map(20, SharingPattern::Uniform(3)).unwrap();
        assert_eq!(cla3.n_groups(), 7);
        assert_eq!(cla3.group_sizes(), [2, 3, 3, 3, 3, 3, 3]);

        let keep = groups(20, SharingPattern::KeepEnds);
        let mut expected = vec![0];
        expected.extend((1..=9).flat_map(|g| [g, g]));
        expected.push(10);
        assert_eq!(keep, expected);

        let front = build_sharing_map(20, SharingPattern::DenseFront).unwrap();
        assert_eq!(front.n_groups(), 11);
        assert!((0..=9).all(|l| front.is_producer(l)));
        assert!((10..=18).all(|l| front.group_of(l) == front.group_of(9) && !front.is_producer(l)));
        assert!(front.is_producer(19));

        let back = build_sharing_map(20, SharingPattern::DenseBack).unwrap();
        assert_eq!(back.n_groups(), 11);
        assert!(back.is_producer(0) && back.is_producer(1));
        assert!((2..=10).all(|l| back.group_of(l) == back.group_of(1) && !back.is_producer(l)));
        assert!((11..20).all(|l| back.is_producer(l)));
    }

    #[test]
    fn non_uniform_patterns_need_even_depth() {
        for p in [
            SharingPattern::KeepEnds,
            SharingPattern::DenseFront,
            SharingPattern::DenseBack,
        ] {
            assert!(build_sharing_map(2, p).is_err());
            assert!(build_sharing_map(7, p).is_err());
            assert_eq!(build_sharing_map(4, p).unwrap().n_groups(), 3);
        }
        assert!(build_sharing_map(0, SharingPattern::Uniform(1)).is_err());
        assert!(build_sharing_map(4, SharingPattern::Uniform(0)).is_err());
    }

    fn table1_cfg(d_head: usize, n_query: usize, n_kv: usize, p: SharingPattern) -> ModelConfig {
        let mut c = ModelConfig::with_heads(2048, 128, 1, 20, p).unwrap();
        c.d_head = d_head;
        c.n_query = n_query;
        c.n_kv = n_kv;
        c.ffn_size = 5472;
        c
    }

    #[test]
    fn kv_bytes_examples() {
        let u = SharingPattern::Uniform;
        assert_eq!(kv_bytes_per_token(&table1_cfg(128, 16, 16, u(1))).unwrap(), 163_840);
        assert_eq!(kv_bytes_per_token(&table1_cfg(128, 16, 1, u(2))).unwrap(), 5120);
        assert_eq!(kv_bytes_per_token(&table1_cfg(90, 22, 1, u(2))).unwrap(), 3600);
        assert_eq!(kv_bytes_per_token(&table1_cfg(128, 16, 1, u(3))).unwrap(), 3584);
    }

    #[test]
    fn cla2_parameter_saving() {
        let mut base = table1_cfg(128, 16, 1, SharingPattern::Uniform(1));
        base.split_attn_norm = false;
        let cla2 = base.with_sharing(SharingPattern::Uniform(2));
        let delta = count_parameters(&base).unwrap() - count_parameters(&cla2).unwrap();
        assert_eq!(delta, 5_242_880);

        // Split norms add one K/V-path norm per producer.
        let split = ModelConfig {
            split_attn_norm: true,
            ..cla2.clone()
        };
        assert_eq!(
            count_parameters(&split).unwrap() - count_parameters(&cla2).unwrap(),
            10 * 2 * 2048
        );
    }

    #[test]
    fn zero_layer_degenerate() {
        let mut c = ModelConfig::with_heads(16, 4, 1, 0, SharingPattern::Uniform(1)).unwrap();
        c.vocab_size = 10;
        assert_eq!(count_parameters(&c).unwrap(), 10 * 16 + 32 + 16 * 10);
        assert_eq!(estimate_flops_per_token(&c).unwrap(), 2 * 16 * 10);
    }

    #[test]
    fn flops_drop_by_removed_projections() {
        let base = table1_cfg(128, 16, 1, SharingPattern::Uniform(1));
        let cla2 = base.with_sharing(SharingPattern::Uniform(2));
        let fb = estimate_flops_per_token(&base).unwrap();
        let fc = estimate_flops_per_token(&cla2).unwrap();
        assert!(fc < fb);
        assert_eq!(fb - fc, 2 * 10 * 2 * 2048 * 128);
    }

    fn any_pattern() -> impl Strategy<Value = SharingPattern> {
        prop_oneof![
            (1usize..8).prop_map(SharingPattern::Uniform),
            Just(SharingPattern::KeepEnds),
            Just(SharingPattern::DenseFront),
            Just(SharingPattern::DenseBack),
        ]
    }

    proptest! {
        #[test]
        fn maps_are_well_formed(n in 1usize..48, p in any_pattern()) {
            let Ok(map) = build_sharing_map(n, p) else {
                prop_assert!(!matches!(p, SharingPattern::Uniform(_)));
                return Ok(());
            };
            prop_assert_eq!(map.n_layers(), n);
            for l in 0..n {
                prop_assert!(map.producer_of(map.group_of(l)) <= l);
            }
            for g in 0..map.n_groups() {
                let members: Vec<_> = map.members(g).collect();
                prop_assert!(!members.is_empty());
                prop_assert_eq!(members[0], map.producer_of(g));
                prop_assert!(members.windows(2).all(|w| w[1] == w[0] + 1));
            }
            if let SharingPattern::Uniform(k) = p {
                let sizes = map.group_sizes();
                let r = n % k;
                let tail = if r > 0 { prop_assert_eq!(sizes[0], r); &sizes[1..] } else { &sizes[..] };
                prop_assert!(tail.iter().all(|&s| s == k));
            }
        }

        #[test]
        fn sharing_never_increases_cost(n in 1usize..24, k in 1usize..6) {
            let mut c = ModelConfig::with_heads(64, 16, 2, n, SharingPattern::Uniform(1)).unwrap();
            c.split_attn_norm = false;
            let shared = c.with_sharing(SharingPattern::Uniform(k));
            prop_assert!(kv_bytes_per_token(&shared).unwrap() <= kv_bytes_per_token(&c).unwrap());
            prop_assert!(count_parameters(&shared).unwrap() <= count_parameters(&c).unwrap());
            prop_assert!(estimate_flops_per_token(&shared).unwrap() <= estimate_flops_per_token(&c).unwrap());
        }
    }
}
