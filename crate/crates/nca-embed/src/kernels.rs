//! Blocked inner loops over row-major f32 embedding matrices.
//!
//! All accumulation happens in f64. The blocked variants stream the matrix
//! once for a group of queries, which is what keeps whole-dataset similarity
//! passes affordable on a single core. Element order inside every dot product
//! and row accumulation is identical between the scalar and blocked variants,
//! so results agree bitwise.

/// Number of queries processed per pass over the matrix.
pub const BLOCK: usize = 16;

/// Dot product of an f32 row with an f64 query, accumulated in f64.
#[inline]
pub fn row_dot(row: &[f32], query: &[f64]) -> f64 {
    debug_assert_eq!(row.len(), query.len());
    let mut acc = 0.0f64;
    for (x, q) in row.iter().zip(query) {
        acc += *x as f64 * *q;
    }
    acc
}

/// `out += scale * row`, accumulated in f64.
#[inline]
pub fn row_axpy(row: &[f32], scale: f64, out: &mut [f64]) {
    debug_assert_eq!(row.len(), out.len());
    for (o, x) in out.iter_mut().zip(row) {
        *o += scale * *x as f64;
    }
}

/// Similarities of up to `BLOCK` queries against every row of `matrix`.
///
/// `queries` holds `q` vectors of length `d` back to back; `out[b * n + r]`
/// receives `dot(matrix_row_r, query_b)`. Queries are repacked internally so
/// the matrix is streamed exactly once.
pub fn sim_block(matrix: &[f32], n: usize, d: usize, queries: &[f64], q: usize, out: &mut [f64]) {
    assert!(q <= BLOCK && q > 0);
    assert_eq!(matrix.len(), n * d);
    assert_eq!(queries.len(), q * d);
    assert!(out.len() >= q * n);

    // Transposed query block: qt[j * BLOCK + b] = queries[b * d + j].
    let mut qt = vec![0.0f64; d * BLOCK];
    for b in 0..q {
        for j in 0..d {
            qt[j * BLOCK + b] = queries[b * d + j];
        }
    }

    for r in 0..n {
        let row = &matrix[r * d..(r + 1) * d];
        let mut acc = [0.0f64; BLOCK];
        for (j, x) in row.iter().enumerate() {
            let x = *x as f64;
            let qrow = &qt[j * BLOCK..(j + 1) * BLOCK];
            for b in 0..BLOCK {
                acc[b] += x * qrow[b];
            }
        }
        for b in 0..q {
            out[b * n + r] = acc[b];
        }
    }
}

/// Weighted row sums for up to `BLOCK` weight vectors in one matrix pass.
///
/// For each block lane `b`, computes `out_b = sum_r weights[b * n + r] * row_r`
/// into `out[b * d..(b + 1) * d]`.
pub fn weighted_sum_block(
    matrix: &[f32],
    n: usize,
    d: usize,
    weights: &[f64],
    q: usize,
    out: &mut [f64],
) {
    assert!(q <= BLOCK && q > 0);
    assert_eq!(matrix.len(), n * d);
    assert!(weights.len() >= q * n);
    assert!(out.len() >= q * d);

    out[..q * d].fill(0.0);
    for r in 0..n {
        let row = &matrix[r * d..(r + 1) * d];
        for b in 0..q {
            let w = weights[b * n + r];
            if w != 0.0 {
                let acc = &mut out[b * d..(b + 1) * d];
                for (a, x) in acc.iter_mut().zip(row) {
                    *a += w * *x as f64;
                }
            }
        }
    }
}

/// Dot product between two f64 slices.
#[inline]
pub fn dot_f64(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_matrix(n: usize, d: usize) -> Vec<f32> {
        (0..n * d)
            .map(|i| ((i * 2654435761 % 997) as f32 / 997.0) - 0.5)
            .collect()
    }

    #[test]
    fn sim_block_matches_scalar_bitwise() {
        let (n, d) = (53, 7);
        let m = toy_matrix(n, d);
        for q in [1, 3, BLOCK] {
            let queries: Vec<f64> = (0..q * d).map(|i| (i as f64 * 0.37).sin()).collect();
            let mut out = vec![0.0; q * n];
            sim_block(&m, n, d, &queries, q, &mut out);
            for b in 0..q {
                for r in 0..n {
                    let expect = row_dot(&m[r * d..(r + 1) * d], &queries[b * d..(b + 1) * d]);
                    assert_eq!(out[b * n + r], expect, "q={q} b={b} r={r}");
                }
            }
        }
    }

    #[test]
    fn weighted_sum_block_matches_scalar_bitwise() {
        let (n, d) = (41, 5);
        let m = toy_matrix(n, d);
        let q = 4;
        let weights: Vec<f64> = (0..q * n).map(|i| ((i as f64 * 0.13).cos()) * 0.01).collect();
        let mut out = vec![0.0; q * d];
        weighted_sum_block(&m, n, d, &weights, q, &mut out);
        for b in 0..q {
            let mut expect = vec![0.0f64; d];
            for r in 0..n {
                row_axpy(&m[r * d..(r + 1) * d], weights[b * n + r], &mut expect);
            }
            assert_eq!(&out[b * d..(b + 1) * d], expect.as_slice(), "b={b}");
        }
    }
}
