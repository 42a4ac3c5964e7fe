//! Text embedders.

use num_traits::Float;
use serde::{Deserialize, Serialize};

pub const HASHED_DIMENSION: usize = 1024;

/// A direction in embedding space. Values are kept as produced (term counts
/// for the hashed embedder) so that comparisons between integral vectors are
/// exact; normalization happens inside [`Embedding::cosine`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding<T> {
    values: Vec<T>,
}

impl<T: Float> Embedding<T> {
    pub fn new(values: Vec<T>) -> Self {
        Embedding { values }
    }

    /// Wraps stored values.
    pub fn from_raw(values: Vec<T>) -> Self {
        Embedding { values }
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn dimension(&self) -> usize {
        self.values.len()
    }

    pub fn norm_sq(&self) -> T {
        self.values.iter().fold(T::zero(), |acc, v| acc + *v * *v)
    }

    pub fn norm(&self) -> T {
        self.norm_sq().sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|v| *v == T::zero())
    }

    pub fn dot(&self, other: &Embedding<T>) -> T {
        self.values
            .iter()
            .zip(&other.values)
            .fold(T::zero(), |acc, (a, b)| acc + *a * *b)
    }

    /// Cosine similarity, zero when either side has no direction.
    pub fn cosine(&self, other: &Embedding<T>) -> T {
        let denom = (self.norm_sq() * other.norm_sq()).sqrt();
        if denom > T::zero() {
            self.dot(other) / denom
        } else {
            T::zero()
        }
    }

    /// Orders `a` against `b` by cosine to `self` without dividing or taking
    /// roots: `dot_a * |dot_a| * |b|^2` against `dot_b * |dot_b| * |a|^2`.
    /// Exact for integral vectors of modest size.
    pub fn compare_similarity(&self, a: &Embedding<T>, b: &Embedding<T>) -> std::cmp::Ordering {
        let f = |x: T| x.to_f64().unwrap_or(0.0);
        let (da, db) = (f(self.dot(a)), f(self.dot(b)));
        let lhs = da * da.abs() * f(b.norm_sq());
        let rhs = db * db.abs() * f(a.norm_sq());
        lhs.partial_cmp(&rhs).unwrap_or(std::cmp::Ordering::Equal)
    }
}

pub trait Embedder<T: Float>: Send + Sync {
    fn dimension(&self) -> usize;
    fn embed(&self, text: &str) -> Embedding<T>;
}

/// Lowercased runs of ASCII letters, digits and underscores.
pub fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !(c.is_ascii_alphanumeric() || c == '_'))
        .filter(|t| !t.is_empty())
        .map(|t| t.to_ascii_lowercase())
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Hashed bag of words: token counts in FNV-1a buckets, L2-normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashedBagOfWords {
    pub dimension: usize,
}

impl Default for HashedBagOfWords {
    fn default() -> Self {
        HashedBagOfWords {
            dimension: HASHED_DIMENSION,
        }
    }
}

impl HashedBagOfWords {
    pub fn counts(&self, text: &str) -> Vec<u32> {
        let mut counts = vec![0u32; self.dimension];
        for tok in tokenize(text) {
            counts[(fnv1a64(tok.as_bytes()) % self.dimension as u64) as usize] += 1;
        }
        counts
    }
}

impl<T: Float + Send + Sync> Embedder<T> for HashedBagOfWords {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, text: &str) -> Embedding<T> {
        let values = self
            .counts(text)
            .into_iter()
            .map(|c| T::from(c).expect("count fits the scalar type"))
            .collect();
        Embedding::new(values)
    }
}
