//! Byte-level tokenization, corpus splitting and deterministic batching.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const BYTE_VOCAB: usize = 256;

pub fn encode(text: &str) -> Vec<usize> {
    text.bytes().map(usize::from).collect()
}

/// Inverse of [`encode`].
pub fn decode(ids: &[usize]) -> Result<Vec<u8>> {
    ids.iter()
        .map(|&i| u8::try_from(i).map_err(|_| Error::contract(format!("token {i} is not a byte"))))
        .collect()
}

/// [`decode`] rendered as text, with invalid UTF-8 replaced.
pub fn decode_lossy(ids: &[usize]) -> Result<String> {
    Ok(String::from_utf8_lossy(&decode(ids)?).into_owned())
}

/// A byte corpus cut into a training prefix and a validation suffix.
#[derive(Clone, Debug)]
pub struct ByteCorpus {
    train: Vec<u8>,
    val: Vec<u8>,
}

impl ByteCorpus {
    /// Holds out the last `val_fraction` of `bytes` for validation.
    pub fn split(bytes: Vec<u8>, val_fraction: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&val_fraction) {
            return Err(Error::config(format!(
                "validation fraction must be in [0, 1), got {val_fraction}"
            )));
        }
        let n_val = (bytes.len() as f64 * val_fraction).round() as usize;
        let mut train = bytes;
        let val = train.split_off(train.len() - n_val);
        Ok(Self { train, val })
    }

    pub fn train(&self) -> &[u8] {
        &self.train
    }

    pub fn val(&self) -> &[u8] {
        &self.val
    }
}

/// Non-overlapping windows of `window` tokens; a trailing partial window is dropped.
pub fn windows(bytes: &[u8], window: usize) -> Vec<Vec<usize>> {
    if window == 0 {
        return Vec::new();
    }
    bytes
        .chunks_exact(window)
        .map(|c| c.iter().map(|&b| usize::from(b)).collect())
        .collect()
}

/// Endless stream of training batches drawn from shuffled windows.
///
/// Each epoch visits every window once in an order fixed by the seed and the
/// epoch number, so a run is reproducible from `(seed, step)`.
#[derive(Clone, Debug)]
pub struct Batcher {
    windows: Vec<Vec<usize>>,
    order: Vec<usize>,
    cursor: usize,
    epoch: u64,
    seed: u64,
}

impl Batcher {
    /// Windows of `seq_len + 1` tokens: inputs plus next-token targets.
    pub fn new(bytes: &[u8], seq_len: usize, seed: u64) -> Result<Self> {
        let windows = windows(bytes, seq_len + 1);
        if windows.is_empty() {
            return Err(Error::contract(format!(
                "{} bytes do not fill a single window of {} tokens",
                bytes.len(),
                seq_len + 1
            )));
        }
        let mut b = Self {
            order: Vec::new(),
            windows,
            cursor: 0,
            epoch: 0,
            seed,
        };
        b.shuffle();
        Ok(b)
    }

    fn shuffle(&mut self) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ self.epoch.wrapping_mul(0x9e37_79b9_7f4a_7c15));
        self.order = (0..self.windows.len()).collect();
        self.order.shuffle(&mut rng);
        self.cursor = 0;
    }

    pub fn n_windows(&self) -> usize {
        self.windows.len()
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    /// `batch` windows laid out row-major.
    pub fn next_batch(&mut self, batch: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(batch * self.windows[0].len());
        for _ in 0..batch {
            if self.cursor == self.order.len() {
                self.epoch += 1;
                self.shuffle();
            }
            out.extend_from_slice(&self.windows[self.order[self.cursor]]);
            self.cursor += 1;
        }
        out
    }
}

/// Splits `batch` rows of `seq_len + 1` tokens into inputs and shifted targets.
pub fn inputs_and_targets(rows: &[usize], batch: usize) -> (Vec<usize>, Vec<usize>) {
    let w = rows.len() / batch;
    let mut inputs = Vec::with_capacity(batch * (w - 1));
    let mut targets = Vec::with_capacity(batch * (w - 1));
    for r in rows.chunks(w) {
        inputs.extend_from_slice(&r[..w - 1]);
        targets.extend_from_slice(&r[1..]);
    }
    (inputs, targets)
}

/// Perplexity on `val` of the add-one smoothed byte frequencies of `train`.
pub fn unigram_perplexity(train: &[u8], val: &[u8]) -> f64 {
    let mut counts = [1.0f64; BYTE_VOCAB];
    for &b in train {
        counts[usize::from(b)] += 1.0;
    }
    let total: f64 = counts.iter().sum();
    let nll: f64 = val.iter().map(|&b| -(counts[usize::from(b)] / total).ln()).sum();
    (nll / val.len().max(1) as f64).exp()
}

const WORDS: &[&str] = &[
    "the", "a", "of", "and", "to", "in", "is", "was", "that", "for", "it", "with", "as", "on",
    "by", "at", "from", "this", "which", "an", "river", "city", "people", "water", "time",
    "year", "north", "south", "small", "large", "old", "new", "house", "market", "bridge",
    "road", "stone", "garden", "village", "school", "church", "field", "forest", "hill",
    "valley", "winter", "summer", "morning", "evening", "built", "crossed", "found", "known",
    "called", "opened", "walked", "carried", "grew", "stood", "near", "under", "between",
    "after", "before", "during", "many", "few", "every", "some", "long", "short", "quiet",
    "busy", "narrow", "wide", "farmers", "merchants", "children", "travellers", "boats",
];

/// Deterministic English-like text: sentences of common words with simple
/// punctuation, so byte statistics are far from uniform and local structure
/// is learnable.
pub fn synthetic_corpus(n_bytes: usize, seed: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n_bytes + 64);
    let mut prev = 0usize;
    while out.len() < n_bytes {
        let len = rng.random_range(5..14);
        for i in 0..len {
            // Words are drawn near the previous one, giving bigram structure.
            let w = if rng.random_bool(0.3) {
                rng.random_range(0..20)
            } else {
                (prev + rng.random_range(1..6)) % WORDS.len()
            };
            prev = w;
            let word = WORDS[w].as_bytes();
            if i == 0 {
                out.push(word[0].to_ascii_uppercase());
                out.extend_from_slice(&word[1..]);
            } else {
                out.push(b' ');
                out.extend_from_slice(word);
            }
            if i + 1 < len && rng.random_bool(0.08) {
                out.push(b',');
            }
        }
        out.push(b'.');
        out.push(if rng.random_bool(0.15) { b'\n' } else { b' ' });
    }
    out.truncate(n_bytes);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_round_trip() {
        let s = "Cross-layer ≠ plain, naïve text";
        assert_eq!(decode_lossy(&encode(s)).unwrap(), s);
        assert_eq!(encode("AB"), [65, 66]);
        assert!(encode("").is_empty());
        assert!(decode(&[]).unwrap().is_empty());
        assert!(decode(&[256]).is_err());
        let all: Vec<usize> = (0..256).collect();
        assert_eq!(decode(&all).unwrap(), (0..=255).collect::<Vec<u8>>());
        assert!(encode(s).iter().all(|&i| i < BYTE_VOCAB));
    }

    #[test]
    fn windows_are_disjoint_and_counted() {
        let bytes: Vec<u8> = (0..=255).cycle().take(1000).collect();
        assert_eq!(windows(&bytes[..33], 33).len(), 1);
        let w = windows(&bytes, 33);
        assert_eq!(w.len(), 1000 / 33);
        assert_eq!(w[1][0], 33);
        assert!(w.iter().all(|c| c.len() == 33));
    }

    #[test]
    fn split_is_disjoint() {
        let bytes: Vec<u8> = (0..100).collect();
        let c = ByteCorpus::split(bytes, 0.1).unwrap();
        assert_eq!(c.train().len(), 90);
        assert_eq!(c.val(), (90..100).collect::<Vec<u8>>().as_slice());
        assert!(ByteCorpus::split(vec![1], 1.0).is_err());
    }

    #[test]
    fn batches_are_seeded() {
        let bytes = synthetic_corpus(5000, 1);
        let mut a = Batcher::new(&bytes, 16, 7).unwrap();
        let mut b = Batcher::new(&bytes, 16, 7).unwrap();
        let mut c = Batcher::new(&bytes, 16, 8).unwrap();
        let xa = a.next_batch(4);
        assert_eq!(xa, b.next_batch(4));
        assert_ne!(xa, c.next_batch(4));
        assert_eq!(xa.len(), 4 * 17);
        // Exactly one visit per window per epoch.
        let n = a.n_windows();
        let mut b2 = Batcher::new(&bytes, 16, 7).unwrap();
        let epoch: Vec<usize> = b2.next_batch(n);
        let mut seen: Vec<&[usize]> = epoch.chunks(17).collect();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), n);
        assert_eq!(b2.epoch(), 0);
        b2.next_batch(1);
        assert_eq!(b2.epoch(), 1);
    }

    #[test]
    fn targets_shift_by_one() {
        let (i, t) = inputs_and_targets(&[1, 2, 3, 4, 5, 6], 2);
        assert_eq!(i, [1, 2, 4, 5]);
        assert_eq!(t, [2, 3, 5, 6]);
    }

    #[test]
    fn unigram_oracle() {
        // Two symbols seen equally often plus 254 unseen, add-one smoothed.
        let p: f64 = 2.0 / (256.0 + 2.0);
        let expected = (-(p.ln())).exp();
        assert!((unigram_perplexity(b"ab", b"ba") - expected).abs() < 1e-9);
        let corpus = synthetic_corpus(20_000, 3);
        assert_eq!(corpus.len(), 20_000);
        assert!(corpus.is_ascii());
        assert!(unigram_perplexity(&corpus, &corpus) < 30.0);
    }
}
