//! Brute-force references for checking the production kernels.
//!
//! Nothing here calls into [`crate::tensor`] arithmetic: inputs are copied to
//! `f64` buffers and every product is an explicit triple loop.

use std::fmt;

use crate::adapters::{BlockDiagonalAdapter, BlockLayout};
use crate::tensor::{Element, Tensor};

/// Denominator floor for element-wise relative error.
pub const REL_FLOOR: f64 = 1e-8;
pub const DEFAULT_FD_STEP: f64 = 1e-5;

fn to_f64<T: Element>(t: &Tensor<T>) -> Vec<f64> {
    t.data().iter().map(|v| v.as_f64()).collect()
}

fn dims2<T: Element>(t: &Tensor<T>) -> (usize, usize) {
    assert_eq!(
        t.rank(),
        2,
        "oracle expects a matrix, got shape {:?}",
        t.shape()
    );
    (t.shape()[0], t.shape()[1])
}

/// Triple-loop `a·b` in f64, `a: p×q`, `b: q×s`.
pub fn naive_matmul<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<f64> {
    let (p, q) = dims2(a);
    let (q2, s) = dims2(b);
    assert_eq!(q, q2, "naive_matmul inner dimensions");
    let (av, bv) = (to_f64(a), to_f64(b));
    let mut out = vec![0.0; p * s];
    for i in 0..p {
        for j in 0..s {
            let mut acc = 0.0;
            for k in 0..q {
                acc += av[i * q + k] * bv[k * s + j];
            }
            out[i * s + j] = acc;
        }
    }
    Tensor::new(vec![p, s], out).expect("shape is consistent")
}

/// Explicit `m₁×m₂` matrix with the adapter blocks on the diagonal.
pub fn dense_blockdiag<T: Element>(adapter: &BlockDiagonalAdapter<T>) -> Tensor<f64> {
    let (m1, m2) = (adapter.in_features(), adapter.out_features());
    let blocks = adapter.blocks();
    let (n, d1, d2) = (blocks.shape()[0], blocks.shape()[1], blocks.shape()[2]);
    let mut full = vec![0.0; n * d1 * n * d2];
    let w = n * d2;
    for blk in 0..n {
        for k in 0..d1 {
            for j in 0..d2 {
                full[(blk * d1 + k) * w + blk * d2 + j] = blocks.get(&[blk, k, j]).as_f64();
            }
        }
    }
    let mut out = vec![0.0; m1 * m2];
    for r in 0..m1 {
        out[r * m2..(r + 1) * m2].copy_from_slice(&full[r * w..r * w + m2]);
    }
    Tensor::new(vec![m1, m2], out).expect("shape is consistent")
}

/// Dense `Xᵀ·g_Y` in f64.
pub fn full_gradient<T: Element>(x: &Tensor<T>, g_y: &Tensor<T>) -> Tensor<f64> {
    let (b, m1) = dims2(x);
    let (b2, m2) = dims2(g_y);
    assert_eq!(b, b2, "full_gradient batch sizes");
    let (xv, gv) = (to_f64(x), to_f64(g_y));
    let mut out = vec![0.0; m1 * m2];
    for i in 0..m1 {
        for j in 0..m2 {
            let mut acc = 0.0;
            for r in 0..b {
                acc += xv[r * m1 + i] * gv[r * m2 + j];
            }
            out[i * m2 + j] = acc;
        }
    }
    Tensor::new(vec![m1, m2], out).expect("shape is consistent")
}

/// Sub-matrix `[r0..r0+rows, c0..c0+cols]` of a matrix, in f64.
pub fn slice_block(m: &Tensor<f64>, r0: usize, c0: usize, rows: usize, cols: usize) -> Tensor<f64> {
    let (_, w) = dims2(m);
    let d = m.data();
    Tensor::from_fn(&[rows, cols], |e| d[(r0 + e / cols) * w + c0 + e % cols])
}

/// Central differences `(L(θ + h eᵢ) - L(θ - h eᵢ)) / 2h` for every coordinate.
pub fn finite_diff_grad(mut loss: impl FnMut(&[f64]) -> f64, params: &[f64], h: f64) -> Vec<f64> {
    let mut theta = params.to_vec();
    (0..theta.len())
        .map(|i| {
            let orig = theta[i];
            theta[i] = orig + h;
            let up = loss(&theta);
            theta[i] = orig - h;
            let down = loss(&theta);
            theta[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `|a - n| / max(|a|, |n|, 1e-8)`
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// `‖a - reference‖_F / ‖reference‖_F` (absolute norm when the reference is zero).
pub fn frobenius_rel<T: Element>(a: &Tensor<T>, reference: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), reference.shape(), "frobenius_rel shapes");
    let diff: f64 = a
        .data()
        .iter()
        .zip(reference.data())
        .map(|(x, y)| (x.as_f64() - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let norm = reference.frobenius();
    if norm > 0.0 {
        diff / norm
    } else {
        diff
    }
}

/// Outcome of comparing analytic gradients against central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Flat index and name of the worst parameter when the check fails.
    pub failing: Option<(usize, String)>,
    pub tolerance: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }

    /// Folds another report into this one, keeping the worst error.
    pub fn merge(&mut self, other: GradCheckReport) {
        if other.max_rel_error > self.max_rel_error {
            self.max_rel_error = other.max_rel_error;
            self.failing = other.failing;
        }
        self.checked += other.checked;
    }

    pub fn empty(tolerance: f64) -> Self {
        Self {
            max_rel_error: 0.0,
            failing: None,
            tolerance,
            checked: 0,
        }
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} checked={} max_rel_error={:.3e} tolerance={:.1e}",
            if self.passed() { "PASS" } else { "FAIL" },
            self.checked,
            self.max_rel_error,
            self.tolerance
        )?;
        if let Some((i, name)) = &self.failing {
            write!(f, " failing={name}[{i}]")?;
        }
        Ok(())
    }
}

/// Compares two flat gradients; `names[i]` labels coordinate `i`.
pub fn compare_grads(
    analytic: &[f64],
    numeric: &[f64],
    names: &[String],
    tolerance: f64,
) -> GradCheckReport {
    assert_eq!(analytic.len(), numeric.len());
    let mut report = GradCheckReport::empty(tolerance);
    report.checked = analytic.len();
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let e = rel_error(a, n);
        if e > report.max_rel_error || e.is_nan() {
            report.max_rel_error = if e.is_nan() { f64::INFINITY } else { e };
            report.failing = Some((i, names.get(i).cloned().unwrap_or_default()));
        }
    }
    if report.passed() {
        report.failing = None;
    }
    report
}

/// Singular values of an `m×n` row-major matrix, descending, by one-sided Jacobi.
pub fn singular_values(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    assert_eq!(a.len(), m * n);
    // Work on columns of a tall matrix.
    let (rows, cols, mut work) = if m >= n {
        (m, n, a.to_vec())
    } else {
        let mut t = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                t[j * m + i] = a[i * n + j];
            }
        }
        (n, m, t)
    };
    let col = |w: &[f64], j: usize| -> Vec<f64> { (0..rows).map(|i| w[i * cols + j]).collect() };
    for _sweep in 0..100 {
        let mut rotated = false;
        for p in 0..cols {
            for q in p + 1..cols {
                let (cp, cq) = (col(&work, p), col(&work, q));
                let alpha: f64 = cp.iter().map(|v| v * v).sum();
                let beta: f64 = cq.iter().map(|v| v * v).sum();
                let gamma: f64 = cp.iter().zip(&cq).map(|(x, y)| x * y).sum();
                if gamma.abs() <= 1e-15 * (alpha * beta).sqrt() || gamma == 0.0 {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..rows {
                    let (x, y) = (work[i * cols + p], work[i * cols + q]);
                    work[i * cols + p] = c * x - s * y;
                    work[i * cols + q] = s * x + c * y;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut sv: Vec<f64> = (0..cols)
        .map(|j| col(&work, j).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}

pub fn tensor_singular_values<T: Element>(t: &Tensor<T>) -> Vec<f64> {
    let (m, n) = dims2(t);
    singular_values(&to_f64(t), m, n)
}

/// Numerical rank: singular values above `tol · σ_max`.
pub fn numerical_rank<T: Element>(t: &Tensor<T>, tol: f64) -> usize {
    let sv = tensor_singular_values(t);
    let top = sv.first().copied().unwrap_or(0.0);
    sv.iter().filter(|&&s| s > tol * top).count()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Subspace {
    /// Matrices of rank at most `r`.
    Rank(usize),
    /// Block-diagonal matrices with `N` blocks (ceil-padded like the adapter).
    BlockDiag(usize),
}

/// Orthogonal projection of `delta` onto the block-diagonal pattern.
pub fn blockdiag_projection<T: Element>(delta: &Tensor<T>, num_blocks: usize) -> Tensor<f64> {
    let (m1, m2) = dims2(delta);
    let layout = BlockLayout::new(m1, m2, num_blocks).expect("valid block layout");
    let d = to_f64(delta);
    Tensor::from_fn(&[m1, m2], |e| {
        let (r, c) = (e / m2, e % m2);
        if r / layout.block_rows == c / layout.block_cols {
            d[e]
        } else {
            0.0
        }
    })
}

/// Frobenius distance from `delta` to the nearest member of `subspace`.
///
/// Rank: `sqrt(σ²_{r+1} + … )` (Eckart–Young). Block-diagonal: norm of the
/// off-block entries.
pub fn best_subspace_error<T: Element>(delta: &Tensor<T>, subspace: Subspace) -> f64 {
    match subspace {
        Subspace::Rank(r) => tensor_singular_values(delta)
            .iter()
            .skip(r)
            .map(|s| s * s)
            .sum::<f64>()
            .sqrt(),
        Subspace::BlockDiag(n) => {
            let inside = blockdiag_projection(delta, n);
            to_f64(delta)
                .iter()
                .zip(inside.data())
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::init_diablo;
    use crate::rng::Rng;

    #[test]
    fn dense_blockdiag_small_cases() {
        let mut a = init_diablo::<f64>(2, 2, 2).unwrap();
        a.blocks_mut().data_mut().copy_from_slice(&[1.0, 2.0]);
        assert_eq!(dense_blockdiag(&a).data(), &[1.0, 0.0, 0.0, 2.0]);

        let mut one = init_diablo::<f64>(2, 3, 1).unwrap();
        one.blocks_mut()
            .data_mut()
            .copy_from_slice(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(dense_blockdiag(&one).data(), one.blocks().data());
    }

    #[test]
    fn dense_blockdiag_off_block_entries_are_zero() {
        let mut a = init_diablo::<f32>(10, 6, 4).unwrap();
        *a.blocks_mut() = Rng::new(1).normal_tensor(&[4, 3, 2], 1.0);
        let d = dense_blockdiag(&a);
        for r in 0..10 {
            for c in 0..6 {
                if r / 3 != c / 2 {
                    assert_eq!(d.get(&[r, c]), 0.0);
                }
            }
        }
    }

    #[test]
    fn full_gradient_rank_one_and_zero() {
        let x = Tensor::from_rows(&[vec![1.0, 2.0]]);
        let g = Tensor::from_rows(&[vec![3.0, 4.0, 5.0]]);
        assert_eq!(
            full_gradient(&x, &g).data(),
            &[3.0, 4.0, 5.0, 6.0, 8.0, 10.0]
        );
        let z = Tensor::<f64>::zeros(&[1, 3]);
        assert_eq!(full_gradient(&x, &z).max_abs(), 0.0);
    }

    #[test]
    fn finite_diff_analytic_losses() {
        let theta = [0.3, -1.2, 2.0];
        let quad = finite_diff_grad(|t| 0.5 * t.iter().map(|v| v * v).sum::<f64>(), &theta, 1e-5);
        for (g, t) in quad.iter().zip(&theta) {
            assert!((g - t).abs() < 1e-9);
        }
        let c = [1.5, -0.5, 4.0];
        let lin = finite_diff_grad(|t| t.iter().zip(&c).map(|(a, b)| a * b).sum(), &theta, 1e-5);
        for (g, ci) in lin.iter().zip(&c) {
            assert!((g - ci).abs() < 1e-9);
        }
    }

    #[test]
    fn jacobi_svd_known_values() {
        // diag(3, 2, 1) rotated by a permutation.
        let a = [0.0, 2.0, 0.0, 3.0, 0.0, 0.0, 0.0, 0.0, 1.0];
        let sv = singular_values(&a, 3, 3);
        for (s, e) in sv.iter().zip([3.0, 2.0, 1.0]) {
            assert!((s - e).abs() < 1e-12);
        }
        // [[1,1],[0,1]]: singular values are golden-ratio related.
        let sv = singular_values(&[1.0, 1.0, 0.0, 1.0], 2, 2);
        let phi = (1.0 + 5f64.sqrt()) / 2.0;
        assert!((sv[0] - phi).abs() < 1e-12 && (sv[1] - 1.0 / phi).abs() < 1e-12);
    }

    #[test]
    fn svd_energy_matches_trace_and_wide_inputs() {
        let t: Tensor<f64> = Rng::new(4).normal_tensor(&[5, 9], 1.0);
        let sv = tensor_singular_values(&t);
        assert_eq!(sv.len(), 5);
        let energy: f64 = sv.iter().map(|s| s * s).sum();
        assert!((energy - t.sum_sq()).abs() < 1e-10 * t.sum_sq());
    }

    #[test]
    fn subspace_errors_vanish_inside_subspace() {
        let mut a = init_diablo::<f64>(8, 8, 4).unwrap();
        *a.blocks_mut() = Rng::new(5).normal_tensor(&[4, 2, 2], 1.0);
        let d = dense_blockdiag(&a);
        assert_eq!(best_subspace_error(&d, Subspace::BlockDiag(4)), 0.0);

        let mut rng = Rng::new(6);
        let p: Tensor<f64> = rng.normal_tensor(&[8, 2], 1.0);
        let q: Tensor<f64> = rng.normal_tensor(&[2, 8], 1.0);
        let low = naive_matmul(&p, &q);
        assert!(best_subspace_error(&low, Subspace::Rank(2)) < 1e-10 * low.frobenius());
        assert!(best_subspace_error(&low, Subspace::Rank(1)) > 0.0);
        assert_eq!(numerical_rank(&low, 1e-10), 2);
    }

    #[test]
    fn report_names_failing_parameter() {
        let names = vec!["a".to_string(), "b".to_string()];
        let r = compare_grads(&[1.0, 2.0], &[1.0, 2.5], &names, 1e-4);
        assert!(!r.passed());
        assert_eq!(r.failing, Some((1, "b".to_string())));
        assert!(r.to_string().contains("FAIL"));
        let ok = compare_grads(&[1.0, 1e-12], &[1.0, 0.0], &names, 1e-3);
        assert!(ok.passed() && ok.failing.is_none());
    }
}
