//! Decoding-time key/value storage with one physical store per cache group.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};
use crate::topology::SharingMap;

#[derive(Clone, Debug)]
struct GroupStore<T> {
    // [batch, n_kv, capacity, d_head]
    keys: Vec<T>,
    values: Vec<T>,
    fill: usize,
}

/// The distinct K/V stores of a model, each read by every layer of its group.
///
/// Keys are stored after the rotary embedding has been applied; values raw.
/// Storage is allocated up front for `capacity` tokens.
#[derive(Clone, Debug)]
pub struct KvCacheSet<T> {
    map: SharingMap,
    batch: usize,
    n_kv: usize,
    d_head: usize,
    capacity: usize,
    kv_dtype_bytes: usize,
    groups: Vec<GroupStore<T>>,
    appends: usize,
}

impl<T: Element> KvCacheSet<T> {
    /// A cache for `batch` sequences of up to `cfg.seq_len` tokens.
    pub fn new(cfg: &ModelConfig, batch: usize) -> Result<Self> {
        Self::with_capacity(cfg, batch, cfg.seq_len)
    }

    pub fn with_capacity(cfg: &ModelConfig, batch: usize, capacity: usize) -> Result<Self> {
        if batch == 0 {
            return Err(Error::contract("cache batch must be at least 1"));
        }
        let map = SharingMap::for_config(cfg)?;
        let per_group = batch * cfg.n_kv * capacity * cfg.d_head;
        let groups = (0..map.n_groups())
            .map(|_| GroupStore {
                keys: vec![T::zero(); per_group],
                values: vec![T::zero(); per_group],
                fill: 0,
            })
            .collect();
        Ok(Self {
            map,
            batch,
            n_kv: cfg.n_kv,
            d_head: cfg.d_head,
            capacity,
            kv_dtype_bytes: cfg.kv_dtype_bytes,
            groups,
            appends: 0,
        })
    }

    pub fn map(&self) -> &SharingMap {
        &self.map
    }

    pub fn n_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Tokens cached so far (every group holds the same count between model steps).
    pub fn fill(&self) -> usize {
        self.groups.first().map_or(0, |g| g.fill)
    }

    pub fn group_fill(&self, group: usize) -> Result<usize> {
        Ok(self.group(group)?.fill)
    }

    /// Total `append` calls since construction (or the last [`reset`](Self::reset)).
    pub fn append_count(&self) -> usize {
        self.appends
    }

    fn group(&self, group: usize) -> Result<&GroupStore<T>> {
        self.groups
            .get(group)
            .ok_or_else(|| Error::contract(format!("unknown cache group {group}")))
    }

    fn check_entry(&self, t: &Tensor<T>, what: &str) -> Result<()> {
        let ok = match t.shape() {
            [b, h, d] => *b == self.batch && *h == self.n_kv && *d == self.d_head,
            [h, d] => self.batch == 1 && *h == self.n_kv && *d == self.d_head,
            _ => false,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::shape(format!(
                "{what} of shape {:?}, expected [{}, {}, {}]",
                t.shape(),
                self.batch,
                self.n_kv,
                self.d_head
            )))
        }
    }

    /// Stores one token's keys and values for the group `layer` produces.
    ///
    /// `k` and `v` are `[batch, n_kv, d_head]` (or `[n_kv, d_head]` when the
    /// batch is 1). Only a group's producer layer may write to it.
    pub fn append(&mut self, layer: usize, k: &Tensor<T>, v: &Tensor<T>) -> Result<()> {
        if layer >= self.map.n_layers() {
            return Err(Error::contract(format!("layer {layer} out of range")));
        }
        if !self.map.is_producer(layer) {
            return Err(Error::contract(format!(
                "layer {layer} does not produce keys/values (group {} is written by layer {})",
                self.map.group_of(layer),
                self.map.producer_of(self.map.group_of(layer))
            )));
        }
        self.check_entry(k, "keys")?;
        self.check_entry(v, "values")?;
        let group = self.map.group_of(layer);
        let (cap, d) = (self.capacity, self.d_head);
        let store = &mut self.groups[group];
        if store.fill >= cap {
            return Err(Error::CacheFull {
                group,
                capacity: cap,
            });
        }
        let pos = store.fill;
        let heads = self.batch * self.n_kv;
        for h in 0..heads {
            let dst = (h * cap + pos) * d;
            store.keys[dst..dst + d].copy_from_slice(&k.data()[h * d..(h + 1) * d]);
            store.values[dst..dst + d].copy_from_slice(&v.data()[h * d..(h + 1) * d]);
        }
        store.fill += 1;
        self.appends += 1;
        Ok(())
    }

    /// Copies of the cached keys and values of `group`, each `[batch, n_kv, fill, d_head]`.
    pub fn view(&self, group: usize) -> Result<(Tensor<T>, Tensor<T>)> {
        let store = self.group(group)?;
        let (cap, d, fill) = (self.capacity, self.d_head, store.fill);
        let heads = self.batch * self.n_kv;
        let mut keys = Vec::with_capacity(heads * fill * d);
        let mut values = Vec::with_capacity(heads * fill * d);
        for h in 0..heads {
            let s = h * cap * d;
            keys.extend_from_slice(&store.keys[s..s + fill * d]);
            values.extend_from_slice(&store.values[s..s + fill * d]);
        }
        let shape = [self.batch, self.n_kv, fill, d];
        Ok((Tensor::new(&shape, keys)?, Tensor::new(&shape, values)?))
    }

    /// Accounted K/V bytes currently held, at `kv_dtype_bytes` per element.
    pub fn total_bytes(&self) -> usize {
        self.groups
            .iter()
            .map(|g| 2 * self.batch * self.n_kv * self.d_head * g.fill * self.kv_dtype_bytes)
            .sum()
    }

    /// Bytes of backing storage actually allocated, at the compute precision.
    pub fn allocated_bytes(&self) -> usize {
        self.groups
            .iter()
            .map(|g| (g.keys.len() + g.values.len()) * T::DTYPE.size_bytes())
            .sum()
    }

    /// Forgets every cached token; capacity is kept.
    pub fn reset(&mut self) {
        for g in &mut self.groups {
            g.fill = 0;
        }
        self.appends = 0;
    }
}
