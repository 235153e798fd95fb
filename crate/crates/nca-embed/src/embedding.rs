//! Unit-sphere vector math: normalization, its Jacobian, and cosine similarity.
//!
//! Embeddings are stored as f32 where they live in bulk (memory bank,
//! galleries, checkpoints); everything here computes and accumulates in f64.

use thiserror::Error;

/// Norm below this is treated as a dead encoder output rather than clamped.
pub const DEGENERATE_NORM: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum EmbeddingError {
    /// The input's L2 norm is too small to normalize meaningfully. Surfacing
    /// this instead of clamping makes encoder collapse diagnosable.
    #[error("degenerate norm {norm:e} (<= {DEGENERATE_NORM:e})")]
    DegenerateNorm { norm: f64 },
}

/// Pre-normalization encoder output, arbitrary scale.
#[derive(Debug, Clone, PartialEq)]
pub struct RawFeature(pub Vec<f64>);

impl RawFeature {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// A unit-L2-norm embedding. Only obtainable through [`l2_normalize`] (or
/// [`EmbeddingVector::from_unit_unchecked`] when the caller already holds a
/// unit vector, e.g. rows read back from a bank).
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    /// Wrap a vector that is already unit norm. Checked in debug builds.
    pub fn from_unit_unchecked(values: Vec<f64>) -> Self {
        debug_assert!(
            (norm(&values) - 1.0).abs() < 1e-3,
            "from_unit_unchecked called with norm {}",
            norm(&values)
        );
        EmbeddingVector(values)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// f32 copy for bulk storage.
    pub fn to_f32(&self) -> Vec<f32> {
        self.0.iter().map(|&x| x as f32).collect()
    }
}

fn norm(values: &[f64]) -> f64 {
    values.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Read access to an indexed set of embeddings, independent of storage
/// precision. Implemented by plain `[EmbeddingVector]` slices (f64), bank
/// snapshots and galleries (f32 rows with f64 accumulation).
pub trait EmbeddingStore {
    fn count(&self) -> usize;
    fn dim(&self) -> usize;
    /// Dot product of row `row` with `query`, accumulated in f64.
    fn dot_with(&self, row: usize, query: &[f64]) -> f64;
    /// `out += scale * row`.
    fn add_scaled_to(&self, row: usize, scale: f64, out: &mut [f64]);
    /// Row contents widened to f64.
    fn row_f64(&self, row: usize) -> Vec<f64>;
}

impl EmbeddingStore for [EmbeddingVector] {
    fn count(&self) -> usize {
        self.len()
    }

    fn dim(&self) -> usize {
        self.first().map_or(0, EmbeddingVector::dim)
    }

    fn dot_with(&self, row: usize, query: &[f64]) -> f64 {
        crate::kernels::dot_f64(self[row].as_slice(), query)
    }

    fn add_scaled_to(&self, row: usize, scale: f64, out: &mut [f64]) {
        for (o, v) in out.iter_mut().zip(self[row].as_slice()) {
            *o += scale * v;
        }
    }

    fn row_f64(&self, row: usize) -> Vec<f64> {
        self[row].as_slice().to_vec()
    }
}

/// Project onto the unit sphere: `x / ||x||`.
pub fn l2_normalize(x: &RawFeature) -> Result<EmbeddingVector, EmbeddingError> {
    let n = norm(&x.0);
    if !(n > DEGENERATE_NORM) {
        return Err(EmbeddingError::DegenerateNorm { norm: n });
    }
    Ok(EmbeddingVector(x.0.iter().map(|v| v / n).collect()))
}

/// Pull a gradient back through [`l2_normalize`].
///
/// Returns `J^T g` where `J = (I - v v^T) / ||x||` with `v = x / ||x||`:
/// the radial component of `g` is projected out, the rest scaled by `1/||x||`.
pub fn l2_normalize_backward(
    x: &RawFeature,
    upstream_grad: &[f64],
) -> Result<Vec<f64>, EmbeddingError> {
    assert_eq!(x.dim(), upstream_grad.len(), "gradient dimension mismatch");
    let n = norm(&x.0);
    if !(n > DEGENERATE_NORM) {
        return Err(EmbeddingError::DegenerateNorm { norm: n });
    }
    let v: Vec<f64> = x.0.iter().map(|a| a / n).collect();
    let radial: f64 = v.iter().zip(upstream_grad).map(|(a, g)| a * g).sum();
    Ok(v.iter()
        .zip(upstream_grad)
        .map(|(a, g)| (g - radial * a) / n)
        .collect())
}

/// Cosine similarity of two unit vectors, i.e. their dot product.
pub fn cosine_similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> f64 {
    assert_eq!(a.dim(), b.dim(), "similarity dimension mismatch");
    crate::kernels::dot_f64(a.as_slice(), b.as_slice())
}
