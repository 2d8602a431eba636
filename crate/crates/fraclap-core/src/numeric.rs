//! Deterministic summation, small dense solvers, and quadrature nodes.
//!
//! Every reduction in this crate that can run in parallel goes through
//! [`pairwise_sum`] or [`parallel_sum`] so that results are bit-identical
//! across thread counts: the summation tree is fixed by the data layout, not
//! by scheduling.

use rayon::prelude::*;

/// Fixed-shape pairwise (cascade) summation.
///
/// The recursion splits at the midpoint regardless of values, so the
/// floating-point result depends only on the slice contents. Leaves of at
/// most 32 elements are summed left to right.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 32 {
        let mut acc = 0.0;
        for &x in xs {
            acc += x;
        }
        return acc;
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

/// Chunk size for [`parallel_sum`]. Fixed so the partial-sum layout, and
/// therefore the rounding, is independent of the worker count.
const PAR_CHUNK: usize = 8192;

/// Parallel deterministic sum: fixed 8192-element chunks are reduced by
/// [`pairwise_sum`] in parallel, then the ordered partials are combined by
/// another pairwise pass.
pub fn parallel_sum(xs: &[f64]) -> f64 {
    if xs.len() <= PAR_CHUNK {
        return pairwise_sum(xs);
    }
    let partials: Vec<f64> = xs.par_chunks(PAR_CHUNK).map(pairwise_sum).collect();
    pairwise_sum(&partials)
}

/// Map an index range through `f` and sum deterministically. The values are
/// materialized in index order first; the reduction shape is fixed.
pub fn parallel_sum_indexed<F>(len: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync + Send,
{
    if len <= PAR_CHUNK {
        let vals: Vec<f64> = (0..len).map(f).collect();
        return pairwise_sum(&vals);
    }
    let vals: Vec<f64> = (0..len).into_par_iter().map(f).collect();
    parallel_sum(&vals)
}

/// 12-point Gauss-Legendre nodes on (-1, 1), positive half; the rule is
/// symmetric. Abscissae and weights from the standard tables, good to 1e-15.
const GL12_X: [f64; 6] = [
    0.125_233_408_511_468_9,
    0.367_831_498_998_180_2,
    0.587_317_954_286_617_4,
    0.769_902_674_194_304_9,
    0.904_117_256_370_474_9,
    0.981_560_634_246_719_3,
];
const GL12_W: [f64; 6] = [
    0.249_147_045_813_402_8,
    0.233_492_536_538_354_8,
    0.203_167_426_723_065_9,
    0.160_078_328_543_346_2,
    0.106_939_325_995_318_2,
    0.047_175_336_386_511_8,
];

/// Nodes and weights of the 12-point Gauss-Legendre rule mapped to [a, b].
pub fn gauss_legendre_12(a: f64, b: f64) -> ([f64; 12], [f64; 12]) {
    let mid = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let mut x = [0.0; 12];
    let mut w = [0.0; 12];
    for i in 0..6 {
        x[i] = mid - half * GL12_X[5 - i];
        x[11 - i] = mid + half * GL12_X[5 - i];
        w[i] = half * GL12_W[5 - i];
        w[11 - i] = half * GL12_W[5 - i];
    }
    (x, w)
}

/// Tensor-product 12-point Gauss-Legendre integral of f over the box
/// [lo_1, hi_1] x ... x [lo_n, hi_n]. Exact for per-axis polynomial degree
/// up to 23; the caller is responsible for splitting at kinks.
pub fn tensor_gl12<F: Fn(&[f64]) -> f64>(lo: &[f64], hi: &[f64], f: F) -> f64 {
    let n = lo.len();
    let rules: Vec<([f64; 12], [f64; 12])> = (0..n)
        .map(|a| gauss_legendre_12(lo[a], hi[a]))
        .collect();
    let mut idx = vec![0usize; n];
    let mut point = vec![0.0; n];
    let mut total = 0.0;
    loop {
        let mut w = 1.0;
        for a in 0..n {
            point[a] = rules[a].0[idx[a]];
            w *= rules[a].1[idx[a]];
        }
        total += w * f(&point);
        let mut a = n;
        loop {
            if a == 0 {
                return total;
            }
            a -= 1;
            idx[a] += 1;
            if idx[a] < 12 {
                break;
            }
            idx[a] = 0;
        }
    }
}

/// Integral over a box with exactly one corner at the origin of a function
/// that is integrable but singular there. Peels dyadic shells toward the
/// corner: each shell avoids the singularity, so tensor Gauss-Legendre
/// converges, and the shell series converges geometrically for integrable
/// singularities. Each axis must have 0 as one endpoint.
pub fn corner_dyadic_gl12<F: Fn(&[f64]) -> f64>(lo: &[f64], hi: &[f64], f: &F) -> f64 {
    let n = lo.len();
    // Signed extent of the box away from the origin corner.
    let ext: Vec<f64> = (0..n)
        .map(|a| if lo[a] == 0.0 { hi[a] } else { lo[a] })
        .collect();
    debug_assert!((0..n).all(|a| lo[a] == 0.0 || hi[a] == 0.0));
    let mut total = 0.0;
    let mut scale = 1.0;
    let mut quiet = 0;
    for _ in 0..2400 {
        // Shell between scale and scale/2: all sub-boxes of the half split
        // except the one hugging the corner.
        let mut shell = 0.0;
        for mask in 1usize..(1 << n) {
            let mut blo = vec![0.0; n];
            let mut bhi = vec![0.0; n];
            for a in 0..n {
                let (near, far) = (0.5 * ext[a] * scale, ext[a] * scale);
                let (s, e) = if mask & (1 << a) != 0 {
                    (near, far)
                } else {
                    (0.0, near)
                };
                if s <= e {
                    blo[a] = s;
                    bhi[a] = e;
                } else {
                    blo[a] = e;
                    bhi[a] = s;
                }
            }
            shell += tensor_gl12(&blo, &bhi, f);
        }
        total += shell;
        if shell.abs() <= 1e-15 * total.abs() {
            quiet += 1;
            if quiet >= 3 {
                break;
            }
        } else {
            quiet = 0;
        }
        scale *= 0.5;
    }
    total
}

/// Dense LU factorization with partial pivoting, for the shifted eigenvalue
/// solves and other small systems. Factors in place; returns the pivot row
/// permutation, or None if a pivot collapses (matrix numerically singular).
pub struct DenseLu {
    n: usize,
    lu: Vec<f64>,
    piv: Vec<usize>,
}

impl DenseLu {
    pub fn factor(a: &[f64], n: usize) -> Option<DenseLu> {
        assert_eq!(a.len(), n * n);
        let mut lu = a.to_vec();
        let mut piv: Vec<usize> = (0..n).collect();
        for col in 0..n {
            // Partial pivot: largest magnitude in the column at or below the
            // diagonal.
            let mut pr = col;
            let mut pv = lu[col * n + col].abs();
            for r in col + 1..n {
                let v = lu[r * n + col].abs();
                if v > pv {
                    pv = v;
                    pr = r;
                }
            }
            if pv == 0.0 || !pv.is_finite() {
                return None;
            }
            if pr != col {
                for c in 0..n {
                    lu.swap(col * n + c, pr * n + c);
                }
                piv.swap(col, pr);
            }
            let d = lu[col * n + col];
            for r in col + 1..n {
                let f = lu[r * n + col] / d;
                lu[r * n + col] = f;
                for c in col + 1..n {
                    lu[r * n + c] -= f * lu[col * n + c];
                }
            }
        }
        Some(DenseLu { n, lu, piv })
    }

    /// Solve A x = b for the factored A.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        assert_eq!(b.len(), n);
        let mut x: Vec<f64> = self.piv.iter().map(|&p| b[p]).collect();
        for r in 1..n {
            let mut acc = x[r];
            for c in 0..r {
                acc -= self.lu[r * n + c] * x[c];
            }
            x[r] = acc;
        }
        for r in (0..n).rev() {
            let mut acc = x[r];
            for c in r + 1..n {
                acc -= self.lu[r * n + c] * x[c];
            }
            x[r] = acc / self.lu[r * n + r];
        }
        x
    }
}

/// Thomas algorithm for a tridiagonal system given by the three diagonals.
/// `lower` and `upper` have length n-1. Panics on zero pivots; callers use it
/// only on diagonally dominant SPD lines.
pub fn solve_tridiagonal(lower: &[f64], diag: &[f64], upper: &[f64], rhs: &[f64]) -> Vec<f64> {
    let n = diag.len();
    assert!(lower.len() == n - 1 && upper.len() == n - 1 && rhs.len() == n);
    let mut c = vec![0.0; n - 1];
    let mut d = vec![0.0; n];
    c[0] = upper[0] / diag[0];
    d[0] = rhs[0] / diag[0];
    for i in 1..n {
        let denom = diag[i] - lower[i - 1] * c[i - 1];
        if i < n - 1 {
            c[i] = upper[i] / denom;
        }
        d[i] = (rhs[i] - lower[i - 1] * d[i - 1]) / denom;
    }
    let mut x = d;
    for i in (0..n - 1).rev() {
        let next = x[i + 1];
        x[i] -= c[i] * next;
    }
    x
}

/// Cholesky factorization attempt for a symmetric matrix in row-major order.
/// Returns false when a pivot is not strictly positive, i.e. the matrix is
/// not numerically positive definite. The factor itself is discarded; this
/// is a definiteness test, not a solver.
pub fn is_positive_definite(a: &[f64], n: usize) -> bool {
    assert_eq!(a.len(), n * n);
    // Pivots are compared against the matrix scale, not zero: a pivot many
    // orders of magnitude below the diagonal means the matrix is singular
    // at working precision even if rounding left it barely positive.
    let scale = (0..n).map(|r| a[r * n + r].abs()).fold(0.0f64, f64::max);
    if !(scale > 0.0) || !scale.is_finite() {
        return false;
    }
    let floor = 1e-12 * scale;
    let mut l = vec![0.0; n * n];
    for r in 0..n {
        for c in 0..=r {
            let mut acc = a[r * n + c];
            for k in 0..c {
                acc -= l[r * n + k] * l[c * n + k];
            }
            if r == c {
                if !(acc > floor) {
                    return false;
                }
                l[r * n + r] = acc.sqrt();
            } else {
                l[r * n + c] = acc / l[c * n + c];
            }
        }
    }
    true
}

/// Least-squares polynomial fit by normal equations on the (small) Vandermonde
/// system; returns coefficients c_0..c_deg of sum c_k x^k.
pub fn polyfit(xs: &[f64], ys: &[f64], deg: usize) -> Option<Vec<f64>> {
    assert_eq!(xs.len(), ys.len());
    let n = deg + 1;
    let mut ata = vec![0.0; n * n];
    let mut atb = vec![0.0; n];
    for (&x, &y) in xs.iter().zip(ys) {
        let mut pow = vec![1.0; n];
        for k in 1..n {
            pow[k] = pow[k - 1] * x;
        }
        for r in 0..n {
            atb[r] += pow[r] * y;
            for c in 0..n {
                ata[r * n + c] += pow[r] * pow[c];
            }
        }
    }
    let lu = DenseLu::factor(&ata, n)?;
    Some(lu.solve(&atb))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn definiteness_test_separates_spd_from_indefinite() {
        // A = M^T M + I is SPD; flipping the sign of one diagonal entry of
        // the Gram part makes it indefinite.
        let n = 6;
        let mut m = vec![0.0; n * n];
        let mut state = 0x9e3779b97f4a7c15u64;
        for e in m.iter_mut() {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            *e = (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5;
        }
        let mut spd = vec![0.0; n * n];
        for r in 0..n {
            for c in 0..n {
                let mut acc = if r == c { 1.0 } else { 0.0 };
                for k in 0..n {
                    acc += m[k * n + r] * m[k * n + c];
                }
                spd[r * n + c] = acc;
            }
        }
        assert!(is_positive_definite(&spd, n));
        let mut bad = spd.clone();
        bad[0] = -bad[0];
        assert!(!is_positive_definite(&bad, n));
    }

    #[test]
    fn pairwise_matches_naive_on_small_input() {
        let xs: Vec<f64> = (0..100).map(|i| (i as f64).sin()).collect();
        let naive: f64 = xs.iter().sum();
        assert_relative_eq!(pairwise_sum(&xs), naive, max_relative = 1e-12);
    }

    #[test]
    fn parallel_sum_is_exactly_pairwise() {
        // Bit-identical, not just close: the parallel path must reproduce the
        // serial reduction tree.
        let xs: Vec<f64> = (0..100_000).map(|i| ((i * 37) as f64).cos() / 3.0).collect();
        let serial = {
            let partials: Vec<f64> = xs.chunks(8192).map(pairwise_sum).collect();
            pairwise_sum(&partials)
        };
        assert_eq!(parallel_sum(&xs), serial);
    }

    #[test]
    fn gl12_integrates_high_degree_polynomials_exactly() {
        // Degree 23 is the exactness limit for 12 points.
        let (x, w) = gauss_legendre_12(0.0, 1.0);
        let val: f64 = x.iter().zip(&w).map(|(&t, &wt)| wt * t.powi(23)).sum();
        assert_relative_eq!(val, 1.0 / 24.0, max_relative = 1e-13);
    }

    #[test]
    fn lu_solves_a_random_system() {
        let n = 12;
        let mut a = vec![0.0; n * n];
        for r in 0..n {
            for c in 0..n {
                a[r * n + c] = ((r * 31 + c * 17) as f64).sin();
            }
            a[r * n + r] += 4.0; // keep it comfortably nonsingular
        }
        let xtrue: Vec<f64> = (0..n).map(|i| (i as f64) - 5.0).collect();
        let mut b = vec![0.0; n];
        for r in 0..n {
            for c in 0..n {
                b[r] += a[r * n + c] * xtrue[c];
            }
        }
        let lu = DenseLu::factor(&a, n).unwrap();
        let x = lu.solve(&b);
        for (xi, ti) in x.iter().zip(&xtrue) {
            assert_relative_eq!(xi, ti, max_relative = 1e-10);
        }
    }

    #[test]
    fn thomas_matches_dense_solve() {
        let n = 50;
        let lower = vec![-1.0; n - 1];
        let upper = vec![-1.0; n - 1];
        let diag = vec![2.5; n];
        let rhs: Vec<f64> = (0..n).map(|i| (i as f64 * 0.3).sin()).collect();
        let x = solve_tridiagonal(&lower, &diag, &upper, &rhs);
        // residual check
        for i in 0..n {
            let mut r = diag[i] * x[i] - rhs[i];
            if i > 0 {
                r += lower[i - 1] * x[i - 1];
            }
            if i < n - 1 {
                r += upper[i] * x[i + 1];
            }
            assert!(r.abs() < 1e-12, "row {i} residual {r}");
        }
    }

    #[test]
    fn polyfit_recovers_planted_cubic() {
        let xs: Vec<f64> = (0..10).map(|i| i as f64 * 0.1).collect();
        let ys: Vec<f64> = xs.iter().map(|&x| 1.0 - 2.0 * x + 0.5 * x * x * x).collect();
        let c = polyfit(&xs, &ys, 3).unwrap();
        assert_relative_eq!(c[0], 1.0, epsilon = 1e-10);
        assert_relative_eq!(c[1], -2.0, epsilon = 1e-9);
        assert_relative_eq!(c[2], 0.0, epsilon = 1e-8);
        assert_relative_eq!(c[3], 0.5, epsilon = 1e-8);
    }

    #[test]
    fn tensor_gl_matches_separable_product() {
        // integral of x^2 y^3 over [0,1]x[1,2] = (1/3)(15/4)
        let v = tensor_gl12(&[0.0, 1.0], &[1.0, 2.0], |p| p[0] * p[0] * p[1].powi(3));
        assert_relative_eq!(v, 15.0 / 12.0, epsilon = 1e-13);
    }

    #[test]
    fn corner_dyadic_handles_integrable_singularity() {
        // integral of |t|^{-1/2} over [0,1]^2; reference value from adaptive
        // quadrature of the polar form (4/3) * cos(theta)^{-3/2}.
        let f = |p: &[f64]| (p[0] * p[0] + p[1] * p[1]).powf(-0.25);
        let v = corner_dyadic_gl12(&[0.0, 0.0], &[1.0, 1.0], &f);
        assert_relative_eq!(v, 1.249_986_334_329_248, max_relative = 1e-10);
    }
}
