use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Seedable generator. Identical seed and call sequence give identical streams
/// on every platform.
#[derive(Clone, Debug)]
pub struct Rng(ChaCha8Rng);

/// Serializable snapshot of an [`Rng`] position.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub key: String,
    pub stream: u64,
    pub word_pos: String,
}

/// Derives a 256-bit seed from the run seed, a purpose tag and the CV cell.
///
/// The derivation is `SHA-256("mivae-seed-v1|{seed}|{tag}|{repeat}|{fold}")`.
pub fn derive_seed(seed: u64, tag: &str, repeat: u64, fold: u64) -> [u8; 32] {
    let digest = Sha256::digest(format!("mivae-seed-v1|{seed}|{tag}|{repeat}|{fold}").as_bytes());
    let mut out = [0u8; 32];
    out.copy_from_slice(&digest);
    out
}

impl Rng {
    pub fn from_seed(seed: u64) -> Self {
        Self::derived(seed, "root", 0, 0)
    }

    pub fn derived(seed: u64, tag: &str, repeat: u64, fold: u64) -> Self {
        Self(ChaCha8Rng::from_seed(derive_seed(seed, tag, repeat, fold)))
    }

    pub fn normal(&mut self) -> f64 {
        self.0.sample(StandardNormal)
    }

    pub fn normals(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.0.random::<f64>()
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.0.random::<f64>() < p
    }

    /// Uniform integer in `lo..=hi`.
    pub fn int_inclusive(&mut self, lo: usize, hi: usize) -> usize {
        self.0.random_range(lo..=hi)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.0);
    }

    pub fn state(&self) -> RngState {
        RngState {
            key: self.0.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: self.0.get_stream(),
            word_pos: self.0.get_word_pos().to_string(),
        }
    }

    pub fn from_state(state: &RngState) -> Option<Self> {
        if state.key.len() != 64 || !state.key.is_ascii() {
            return None;
        }
        let mut key = [0u8; 32];
        for (i, chunk) in state.key.as_bytes().chunks(2).enumerate() {
            key[i] = u8::from_str_radix(std::str::from_utf8(chunk).ok()?, 16).ok()?;
        }
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(state.stream);
        rng.set_word_pos(state.word_pos.parse().ok()?);
        Some(Self(rng))
    }
}
