//! Non-parametric memory of one offline embedding per training sample, with
//! the momentum update rule and per-epoch update-discipline counters.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::embedding::{EmbeddingStore, EmbeddingVector};
use crate::kernels;

#[derive(Debug, Error, PartialEq)]
pub enum BankError {
    #[error("bank needs n >= 2 and d >= 2, got n={n}, d={d}")]
    InvalidShape { n: usize, d: usize },
    #[error("row {index} out of range for bank of {n} rows")]
    IndexOutOfRange { index: usize, n: usize },
    #[error("momentum must be in [0, 1), got {0}")]
    InvalidMomentum(f64),
    #[error("momentum update of row {index} produced a degenerate vector")]
    DegenerateUpdate { index: usize },
    #[error("row {index} updated {count} times this epoch (expected exactly once)")]
    TouchViolation { index: usize, count: u32 },
}

/// `n x d` store of offline embeddings, f32 rows, updated by momentum blending.
#[derive(Debug, Clone)]
pub struct MemoryBank {
    rows: Vec<f32>,
    n: usize,
    d: usize,
    momentum: f64,
    generation: u64,
    touch: Vec<u32>,
}

impl MemoryBank {
    /// Rows drawn uniformly from the unit sphere, deterministic per seed.
    pub fn init(n: usize, d: usize, seed: u64) -> Result<Self, BankError> {
        if n < 2 || d < 2 {
            return Err(BankError::InvalidShape { n, d });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = vec![0.0f32; n * d];
        let mut buf = vec![0.0f64; d];
        for r in 0..n {
            for v in buf.iter_mut() {
                *v = StandardNormal.sample(&mut rng);
            }
            store_normalized(&buf, &mut rows[r * d..(r + 1) * d]);
        }
        Ok(MemoryBank { rows, n, d, momentum: 0.5, generation: 0, touch: vec![0; n] })
    }

    /// Build from precomputed embeddings (warm-start initialization).
    pub fn from_embeddings(embeddings: &[EmbeddingVector]) -> Result<Self, BankError> {
        let n = embeddings.len();
        let d = embeddings.first().map_or(0, EmbeddingVector::dim);
        if n < 2 || d < 2 {
            return Err(BankError::InvalidShape { n, d });
        }
        let mut rows = vec![0.0f32; n * d];
        for (r, e) in embeddings.iter().enumerate() {
            store_normalized(e.as_slice(), &mut rows[r * d..(r + 1) * d]);
        }
        Ok(MemoryBank { rows, n, d, momentum: 0.5, generation: 0, touch: vec![0; n] })
    }

    /// Build from flat f32 rows (e.g. a warm-up forward pass); rows are
    /// renormalized on ingest.
    pub fn from_f32_rows(rows: Vec<f32>, n: usize, d: usize) -> Result<Self, BankError> {
        if n < 2 || d < 2 {
            return Err(BankError::InvalidShape { n, d });
        }
        assert_eq!(rows.len(), n * d, "row buffer shape mismatch");
        let mut bank = MemoryBank { rows, n, d, momentum: 0.5, generation: 0, touch: vec![0; n] };
        for r in 0..n {
            let widened: Vec<f64> =
                bank.rows[r * d..(r + 1) * d].iter().map(|&x| x as f64).collect();
            store_normalized(&widened, &mut bank.rows[r * d..(r + 1) * d]);
        }
        Ok(bank)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    /// Flat row-major f32 rows, for the blocked kernels.
    pub fn rows_flat(&self) -> &[f32] {
        &self.rows
    }

    pub fn row(&self, index: usize) -> &[f32] {
        &self.rows[index * self.d..(index + 1) * self.d]
    }

    /// Storage footprint of the rows in bytes: `n * d * 4`.
    pub fn storage_bytes(n: usize, d: usize) -> u64 {
        n as u64 * d as u64 * 4
    }

    pub fn set_momentum(&mut self, m: f64) -> Result<(), BankError> {
        if !(0.0..1.0).contains(&m) {
            return Err(BankError::InvalidMomentum(m));
        }
        self.momentum = m;
        Ok(())
    }

    /// Blend row `i` toward a fresh embedding: `m * old + (1 - m) * fresh`,
    /// renormalized before storing so Eq. 1 stays a cosine for stale rows.
    pub fn momentum_update(&mut self, i: usize, fresh: &EmbeddingVector) -> Result<(), BankError> {
        if i >= self.n {
            return Err(BankError::IndexOutOfRange { index: i, n: self.n });
        }
        assert_eq!(fresh.dim(), self.d, "fresh embedding dimension mismatch");
        let m = self.momentum;
        let row = &self.rows[i * self.d..(i + 1) * self.d];
        let blended: Vec<f64> = row
            .iter()
            .zip(fresh.as_slice())
            .map(|(&old, &new)| m * old as f64 + (1.0 - m) * new)
            .collect();
        let norm = blended.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(norm > crate::embedding::DEGENERATE_NORM) {
            return Err(BankError::DegenerateUpdate { index: i });
        }
        store_normalized(&blended, &mut self.rows[i * self.d..(i + 1) * self.d]);
        self.touch[i] += 1;
        Ok(())
    }

    /// Reset the per-epoch touch counters.
    pub fn begin_epoch(&mut self) {
        self.touch.fill(0);
    }

    /// Verify each row was updated exactly once this epoch, then advance the
    /// generation counter.
    pub fn finish_epoch(&mut self) -> Result<(), BankError> {
        for (index, &count) in self.touch.iter().enumerate() {
            if count != 1 {
                return Err(BankError::TouchViolation { index, count });
            }
        }
        self.generation += 1;
        Ok(())
    }

    pub fn touch_counts(&self) -> &[u32] {
        &self.touch
    }

    /// Immutable copy of the rows, consistent with a single generation.
    pub fn snapshot(&self) -> BankSnapshot {
        BankSnapshot {
            rows: self.rows.clone(),
            n: self.n,
            d: self.d,
            generation: self.generation,
        }
    }

    pub(crate) fn from_parts(rows: Vec<f32>, n: usize, d: usize, momentum: f64) -> Self {
        MemoryBank { rows, n, d, momentum, generation: 0, touch: vec![0; n] }
    }
}

/// Frozen copy of a bank's rows.
#[derive(Debug, Clone)]
pub struct BankSnapshot {
    rows: Vec<f32>,
    n: usize,
    d: usize,
    generation: u64,
}

impl BankSnapshot {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn rows_flat(&self) -> &[f32] {
        &self.rows
    }

    pub fn row(&self, index: usize) -> &[f32] {
        &self.rows[index * self.d..(index + 1) * self.d]
    }
}

/// Normalize in f64 and store as f32. A second normalization against the
/// rounded values keeps the stored norm at the f32 rounding floor even for
/// large `d`.
fn store_normalized(values: &[f64], out: &mut [f32]) {
    let norm = values.iter().map(|x| x * x).sum::<f64>().sqrt();
    let tmp: Vec<f32> = values.iter().map(|x| (x / norm) as f32).collect();
    let norm2 = tmp.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
    for (o, &t) in out.iter_mut().zip(&tmp) {
        *o = (t as f64 / norm2) as f32;
    }
}

impl EmbeddingStore for MemoryBank {
    fn count(&self) -> usize {
        self.n
    }

    fn dim(&self) -> usize {
        self.d
    }

    fn dot_with(&self, row: usize, query: &[f64]) -> f64 {
        kernels::row_dot(self.row(row), query)
    }

    fn add_scaled_to(&self, row: usize, scale: f64, out: &mut [f64]) {
        kernels::row_axpy(self.row(row), scale, out);
    }

    fn row_f64(&self, row: usize) -> Vec<f64> {
        self.row(row).iter().map(|&x| x as f64).collect()
    }
}

impl EmbeddingStore for BankSnapshot {
    fn count(&self) -> usize {
        self.n
    }

    fn dim(&self) -> usize {
        self.d
    }

    fn dot_with(&self, row: usize, query: &[f64]) -> f64 {
        kernels::row_dot(self.row(row), query)
    }

    fn add_scaled_to(&self, row: usize, scale: f64, out: &mut [f64]) {
        kernels::row_axpy(self.row(row), scale, out);
    }

    fn row_f64(&self, row: usize) -> Vec<f64> {
        self.row(row).iter().map(|&x| x as f64).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{l2_normalize, RawFeature};

    fn unit(values: &[f64]) -> EmbeddingVector {
        l2_normalize(&RawFeature(values.to_vec())).unwrap()
    }

    fn row_norm(row: &[f32]) -> f64 {
        row.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt()
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = MemoryBank::init(4, 8, 7).unwrap();
        let b = MemoryBank::init(4, 8, 7).unwrap();
        assert_eq!(a.rows_flat(), b.rows_flat());
        let c = MemoryBank::init(4, 8, 8).unwrap();
        assert_ne!(a.rows_flat(), c.rows_flat());
    }

    #[test]
    fn init_rows_are_unit_norm() {
        let bank = MemoryBank::init(32, 128, 3).unwrap();
        for r in 0..bank.len() {
            assert!((row_norm(bank.row(r)) - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn init_rejects_tiny_shapes() {
        assert_eq!(
            MemoryBank::init(1, 8, 0).unwrap_err(),
            BankError::InvalidShape { n: 1, d: 8 }
        );
        assert_eq!(
            MemoryBank::init(8, 1, 0).unwrap_err(),
            BankError::InvalidShape { n: 8, d: 1 }
        );
    }

    #[test]
    fn storage_accounting() {
        assert_eq!(MemoryBank::storage_bytes(1000, 128), 512_000);
        assert_eq!(MemoryBank::storage_bytes(1_000_000, 128), 512_000_000);
    }

    #[test]
    fn momentum_zero_substitutes_fresh_row() {
        let mut bank = MemoryBank::init(3, 4, 1).unwrap();
        bank.set_momentum(0.0).unwrap();
        let fresh = unit(&[0.5, -0.5, 0.5, -0.5]);
        bank.momentum_update(1, &fresh).unwrap();
        for (got, want) in bank.row(1).iter().zip(fresh.as_slice()) {
            assert!((*got as f64 - want).abs() < 1e-7);
        }
    }

    #[test]
    fn momentum_half_blends_and_renormalizes() {
        let mut bank =
            MemoryBank::from_embeddings(&[unit(&[1.0, 0.0]), unit(&[0.0, 1.0])]).unwrap();
        bank.set_momentum(0.5).unwrap();
        bank.momentum_update(0, &unit(&[0.0, 1.0])).unwrap();
        let s = (2.0f64).sqrt() / 2.0;
        for got in bank.row(0) {
            assert!((*got as f64 - s).abs() < 1e-7);
        }
    }

    #[test]
    fn update_rejects_out_of_range() {
        let mut bank = MemoryBank::init(2, 2, 0).unwrap();
        let err = bank.momentum_update(2, &unit(&[1.0, 0.0])).unwrap_err();
        assert_eq!(err, BankError::IndexOutOfRange { index: 2, n: 2 });
    }

    #[test]
    fn set_momentum_bounds() {
        let mut bank = MemoryBank::init(2, 2, 0).unwrap();
        bank.set_momentum(0.5).unwrap();
        bank.set_momentum(0.9).unwrap();
        assert_eq!(bank.set_momentum(1.0).unwrap_err(), BankError::InvalidMomentum(1.0));
        assert_eq!(bank.set_momentum(-0.1).unwrap_err(), BankError::InvalidMomentum(-0.1));
    }

    #[test]
    fn repeated_updates_contract_geometrically() {
        // The raw blend `m*old + (1-m)*fresh` contracts the distance to the
        // fixed fresh vector by exactly m per step. The stored row is
        // renormalized afterwards, which adds a curvature correction that
        // vanishes as the row approaches the target, so the stored sequence
        // still converges monotonically and contracts at rate ~m once close.
        let m = 0.9f64;
        let mut bank = MemoryBank::init(2, 6, 11).unwrap();
        bank.set_momentum(m).unwrap();
        let target = unit(&[0.3, -0.2, 0.8, 0.1, -0.4, 0.25]);
        let dist = |row: &[f32]| -> f64 {
            row.iter()
                .zip(target.as_slice())
                .map(|(&a, &b)| (a as f64 - b) * (a as f64 - b))
                .sum::<f64>()
                .sqrt()
        };

        // Exact factor-m contraction of the unnormalized recursion.
        let mut blend: Vec<f64> = bank.row(0).iter().map(|&x| x as f64).collect();
        let mut last = {
            let d2: f64 =
                blend.iter().zip(target.as_slice()).map(|(a, b)| (a - b) * (a - b)).sum();
            d2.sqrt()
        };
        for _ in 0..50 {
            for (b, &t) in blend.iter_mut().zip(target.as_slice()) {
                *b = m * *b + (1.0 - m) * t;
            }
            let now = blend
                .iter()
                .zip(target.as_slice())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            assert!(now <= m * last + 1e-12, "{now} vs {last}");
            last = now;
        }

        // Stored (renormalized) rows: monotone convergence, rate ~m when close.
        let mut last = dist(bank.row(0));
        for step in 0..50 {
            bank.momentum_update(0, &target).unwrap();
            let now = dist(bank.row(0));
            assert!(now <= last + 1e-6, "step {step}: {now} vs {last}");
            if last < 0.3 {
                assert!(now <= m * last * 1.05 + 1e-6, "step {step}: {now} vs {last}");
            }
            last = now;
        }
        assert!(last < 1e-2, "distance after 50 updates: {last}");
    }

    #[test]
    fn snapshot_is_isolated_from_updates() {
        let mut bank = MemoryBank::init(5, 4, 2).unwrap();
        let snap = bank.snapshot();
        assert_eq!(snap.rows_flat(), bank.rows_flat());
        let before: Vec<f32> = snap.row(3).to_vec();
        bank.momentum_update(3, &unit(&[1.0, 1.0, -1.0, 1.0])).unwrap();
        assert_eq!(snap.row(3), before.as_slice());
        assert_ne!(snap.row(3), bank.row(3));
        // Repeated snapshots without updates are identical.
        let again = bank.snapshot();
        assert_eq!(again.rows_flat(), bank.snapshot().rows_flat());
    }

    #[test]
    fn touch_discipline() {
        let mut bank = MemoryBank::init(3, 3, 5).unwrap();
        bank.begin_epoch();
        let v = unit(&[1.0, 0.5, -0.5]);
        bank.momentum_update(0, &v).unwrap();
        bank.momentum_update(1, &v).unwrap();
        let err = bank.finish_epoch().unwrap_err();
        assert_eq!(err, BankError::TouchViolation { index: 2, count: 0 });

        bank.begin_epoch();
        for i in 0..3 {
            bank.momentum_update(i, &v).unwrap();
        }
        bank.finish_epoch().unwrap();
        assert_eq!(bank.generation(), 1);
    }

    #[test]
    fn update_preserves_unit_norm() {
        let mut bank = MemoryBank::init(2, 16, 9).unwrap();
        bank.set_momentum(0.7).unwrap();
        let fresh = unit(&(0..16).map(|i| (i as f64 * 0.37).sin() + 0.1).collect::<Vec<_>>());
        for _ in 0..10 {
            bank.momentum_update(0, &fresh).unwrap();
            assert!((row_norm(bank.row(0)) - 1.0).abs() < 1e-6);
        }
    }
}
