//! Box-adapted spectral form on the exact sine eigenbasis.
//!
//! The Dirichlet Laplacian on an axis-aligned box diagonalizes in tensor
//! products of sines, with closed-form eigenvalues. Working in that basis
//! removes eigensolver error from everything downstream: the form of order
//! m is a plain weighted coefficient sum, the first eigen-quotient has an
//! analytic value, and the Hardy-weighted quotient reduces to a small
//! generalized eigenproblem whose only approximation is the weight Gram
//! quadrature.
//!
//! Sampling note: on the half-open node set x_i = -h + i (2h/N), the sines
//! satisfy exact discrete orthogonality for indices up to N/2, so the
//! quadrature expansion below is an exact discrete projection: Bessel and
//! Parseval identities hold to roundoff, not just to quadrature order.

use std::collections::HashMap;
use std::io::Write as IoWrite;
use std::sync::{Arc, Mutex, OnceLock};

use rayon::prelude::*;

use crate::domain::{hardy_cell_weights, BoxDomain, GridFunction, UniformGrid};
use crate::error::{Error, Result};
use crate::numeric::{is_positive_definite, pairwise_sum, DenseLu};

/// Tensor sine eigenbasis of the Dirichlet Laplacian on a box, truncated at
/// `max_index` modes per axis. Eigenvalues are stored flattened over
/// multi-indices (1-based per axis, last axis fastest).
#[derive(Debug)]
pub struct SineBasis {
    domain: BoxDomain,
    max_index: usize,
    eigenvalues: Vec<f64>,
}

impl SineBasis {
    pub fn new(domain: BoxDomain, max_index: usize) -> Result<Self> {
        if max_index == 0 {
            return Err(Error::Precondition(
                "sine basis needs at least one mode per axis".into(),
            ));
        }
        let n = domain.n();
        let len = max_index.pow(n as u32);
        let mut eigenvalues = vec![0.0; len];
        let mut idx = vec![1usize; n];
        for ev in eigenvalues.iter_mut() {
            let mut lam = 0.0;
            for a in 0..n {
                let k = idx[a] as f64 * std::f64::consts::PI / (2.0 * domain.half_width(a));
                lam += k * k;
            }
            *ev = lam;
            for a in (0..n).rev() {
                idx[a] += 1;
                if idx[a] <= max_index {
                    break;
                }
                idx[a] = 1;
            }
        }
        Ok(SineBasis { domain, max_index, eigenvalues })
    }

    pub fn domain(&self) -> &BoxDomain {
        &self.domain
    }

    pub fn max_index(&self) -> usize {
        self.max_index
    }

    /// Number of retained modes, max_index^n.
    pub fn len(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// Smallest eigenvalue, attained at the all-ones multi-index.
    pub fn lambda1(&self) -> f64 {
        self.eigenvalues[0]
    }

    /// 1-based multi-index of the flat mode position.
    pub fn multi_index(&self, mut flat: usize, out: &mut [usize]) {
        let n = self.domain.n();
        for a in (0..n).rev() {
            out[a] = flat % self.max_index + 1;
            flat /= self.max_index;
        }
    }

    pub(crate) fn grid_compatible(&self, grid: &UniformGrid) -> Result<()> {
        if grid.n() != self.domain.n() {
            return Err(Error::Precondition(
                "grid dimension does not match the basis domain".into(),
            ));
        }
        for a in 0..self.domain.n() {
            let gh = grid.domain().half_width(a);
            let bh = self.domain.half_width(a);
            if (gh - bh).abs() > 1e-12 * bh {
                return Err(Error::Precondition(format!(
                    "grid box half-width {gh} differs from basis half-width {bh} on axis {a}"
                )));
            }
        }
        Ok(())
    }
}

/// Coefficients of a function in a [`SineBasis`], c_j = (u, phi_j).
#[derive(Debug, Clone)]
pub struct SpectralCoeffs {
    basis: Arc<SineBasis>,
    coeffs: Vec<f64>,
}

impl SpectralCoeffs {
    pub fn new(basis: Arc<SineBasis>, coeffs: Vec<f64>) -> Result<Self> {
        if coeffs.len() != basis.len() {
            return Err(Error::Precondition(format!(
                "coefficient count {} does not match basis size {}",
                coeffs.len(),
                basis.len()
            )));
        }
        if coeffs.iter().any(|c| !c.is_finite()) {
            return Err(Error::Precondition("non-finite coefficient".into()));
        }
        Ok(SpectralCoeffs { basis, coeffs })
    }

    pub fn basis(&self) -> &Arc<SineBasis> {
        &self.basis
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    /// Take the coefficient vector, dropping the basis handle.
    pub fn into_coeffs(self) -> Vec<f64> {
        self.coeffs
    }

    /// CSV serialization: one row per mode, columns j_1..j_n then the
    /// coefficient, full round-trip float formatting.
    pub fn write_csv<W: IoWrite>(&self, mut out: W) -> std::io::Result<()> {
        let n = self.basis.domain().n();
        for a in 0..n {
            write!(out, "j{},", a + 1)?;
        }
        writeln!(out, "coeff")?;
        let mut idx = vec![0usize; n];
        for (flat, c) in self.coeffs.iter().enumerate() {
            self.basis.multi_index(flat, &mut idx);
            for j in &idx {
                write!(out, "{j},")?;
            }
            writeln!(out, "{c}")?;
        }
        Ok(())
    }
}

/// sin(pi j i / N) with the argument reduced in exact integer arithmetic,
/// so large mode-node products lose no precision. Multiples of pi return
/// exactly zero; without this, modes at the sampling rate leave a residue
/// of sin(pi) ~ 1e-16 that masks genuinely singular Gram matrices.
fn sine_entry(j: usize, i: usize, n_pts: usize) -> f64 {
    let k = (j * i) % (2 * n_pts);
    if k % n_pts == 0 {
        return 0.0;
    }
    (std::f64::consts::PI * k as f64 / n_pts as f64).sin()
}

/// Contract one axis of a row-major tensor with a len_out x len_in matrix.
/// Parallel over leading slabs; each output entry is a sequential dot
/// product, so the result does not depend on the thread count.
fn contract_axis(
    data: &[f64],
    pre: usize,
    len_in: usize,
    post: usize,
    mat: &[f64],
    len_out: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; pre * len_out * post];
    out.par_chunks_mut(len_out * post)
        .zip(data.par_chunks(len_in * post))
        .for_each(|(oc, ic)| {
            for jo in 0..len_out {
                let row = &mat[jo * len_in..(jo + 1) * len_in];
                let orow = &mut oc[jo * post..(jo + 1) * post];
                for (i, &m) in row.iter().enumerate() {
                    let irow = &ic[i * post..(i + 1) * post];
                    for p in 0..post {
                        orow[p] += m * irow[p];
                    }
                }
            }
        });
    out
}

/// Cache of per-axis sine matrices. Building one costs a trig call per
/// entry, which dwarfs the contraction itself when transforms repeat on a
/// fixed grid-basis pair (every descent iteration does several); entries
/// are pure functions of the key, so eviction is only a space concern.
static AXIS_MATRICES: OnceLock<Mutex<HashMap<(usize, usize, bool, u64), Arc<Vec<f64>>>>> =
    OnceLock::new();

fn axis_matrix(rows: usize, cols: usize, grid_to_mode: bool, n_pts: usize, scale: f64) -> Arc<Vec<f64>> {
    let key = (rows, cols, grid_to_mode, scale.to_bits());
    let cache = AXIS_MATRICES.get_or_init(|| Mutex::new(HashMap::new()));
    if let Some(mat) = cache.lock().expect("matrix cache poisoned").get(&key) {
        return mat.clone();
    }
    let mut mat = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            let (j, i) = if grid_to_mode { (r + 1, c) } else { (c + 1, r) };
            mat[r * cols + c] = scale * sine_entry(j, i, n_pts);
        }
    }
    let mat = Arc::new(mat);
    let mut guard = cache.lock().expect("matrix cache poisoned");
    if guard.len() >= 64 {
        guard.clear();
    }
    guard.entry(key).or_insert_with(|| mat.clone());
    mat
}

/// Apply the per-axis sine matrices to grid values. `weights[a]` scales the
/// axis-a matrix rows (quadrature factor for analysis, none for synthesis).
fn sine_transform(
    values: &[f64],
    dims: &[usize],
    out_dims: &[usize],
    grid_to_mode: bool,
    axis_scale: &[f64],
) -> Vec<f64> {
    let n = dims.len();
    let mut data = values.to_vec();
    let mut cur: Vec<usize> = dims.to_vec();
    for a in 0..n {
        let (len_in, len_out) = (cur[a], out_dims[a]);
        let n_pts = if grid_to_mode { dims[a] } else { out_dims[a] };
        let mat = axis_matrix(len_out, len_in, grid_to_mode, n_pts, axis_scale[a]);
        let pre: usize = cur[..a].iter().product();
        let post: usize = cur[a + 1..].iter().product();
        data = contract_axis(&data, pre, len_in, post, &mat, len_out);
        cur[a] = len_out;
    }
    data
}

/// Expand a grid function in the sine basis by quadrature. The node set
/// makes this an exact discrete projection, so the Bessel bound holds to
/// roundoff; it is still verified and a violation reports a quadrature
/// failure rather than silently propagating.
pub fn expand(u: &GridFunction, basis: &Arc<SineBasis>) -> Result<SpectralCoeffs> {
    let grid = u.grid();
    basis.grid_compatible(grid)?;
    let n = grid.n();
    let j = basis.max_index();
    let mut dims = Vec::with_capacity(n);
    let mut scale = Vec::with_capacity(n);
    for a in 0..n {
        if 2 * j > grid.points(a) {
            return Err(Error::Aliasing(format!(
                "{j} modes per axis need at least {} grid points on axis {a}, got {}",
                2 * j,
                grid.points(a)
            )));
        }
        dims.push(grid.points(a));
        scale.push(grid.spacing(a) / grid.domain().half_width(a).sqrt());
    }
    let out_dims = vec![j; n];
    let coeffs = sine_transform(u.values(), &dims, &out_dims, true, &scale);

    let norm_sq = grid.cell_volume() * u.values().iter().map(|v| v * v).sum::<f64>();
    let coeff_sq: f64 = coeffs.iter().map(|c| c * c).sum();
    if coeff_sq > norm_sq * (1.0 + 1e-6) + 1e-300 {
        return Err(Error::QuadratureFailure(format!(
            "projection energy {coeff_sq} exceeds the function norm {norm_sq}"
        )));
    }
    SpectralCoeffs::new(basis.clone(), coeffs)
}

/// Evaluate the mode sum back on a grid.
pub fn reconstruct(c: &SpectralCoeffs, grid: &Arc<UniformGrid>) -> Result<GridFunction> {
    let basis = c.basis();
    basis.grid_compatible(grid)?;
    let n = grid.n();
    let j = basis.max_index();
    let dims = vec![j; n];
    let mut out_dims = Vec::with_capacity(n);
    let mut scale = Vec::with_capacity(n);
    for a in 0..n {
        if 2 * j > grid.points(a) {
            return Err(Error::Aliasing(format!(
                "{j} modes per axis alias on {} grid points (axis {a})",
                grid.points(a)
            )));
        }
        out_dims.push(grid.points(a));
        scale.push(1.0 / grid.domain().half_width(a).sqrt());
    }
    let values = sine_transform(c.coeffs(), &dims, &out_dims, false, &scale);
    GridFunction::new(grid.clone(), values)
}

/// Value of the order-m form together with the truncation indicator.
#[derive(Debug, Clone, Copy)]
pub struct NavierValue {
    pub value: f64,
    /// True when the top frequency octave (any axis index above
    /// max_index/2) carries more than 0.1% of the total.
    pub tail_flagged: bool,
}

/// The spectral form of order m: sum of lambda_j^m c_j^2 over retained
/// modes, with a last-octave tail check.
pub fn q_navier(c: &SpectralCoeffs, m: f64) -> NavierValue {
    let basis = c.basis();
    let n = basis.domain().n();
    let half = basis.max_index() / 2;
    let terms: Vec<f64> = basis
        .eigenvalues()
        .iter()
        .zip(c.coeffs())
        .map(|(&lam, &cj)| lam.powf(m) * cj * cj)
        .collect();
    let value = pairwise_sum(&terms);
    let mut idx = vec![0usize; n];
    let tail_terms: Vec<f64> = terms
        .iter()
        .enumerate()
        .map(|(flat, &t)| {
            basis.multi_index(flat, &mut idx);
            if idx.iter().any(|&j| j > half) {
                t
            } else {
                0.0
            }
        })
        .collect();
    let tail = pairwise_sum(&tail_terms);
    let tail_flagged = value > 0.0 && tail > 1e-3 * value;
    NavierValue { value, tail_flagged }
}

/// Strict variant: a flagged tail is an error instead of an indicator.
pub fn q_navier_strict(c: &SpectralCoeffs, m: f64) -> Result<f64> {
    let nv = q_navier(c, m);
    if nv.tail_flagged {
        return Err(Error::Truncation(format!(
            "top-octave modes carry more than 0.1% of the order-{m} form; \
             increase the mode count"
        )));
    }
    Ok(nv.value)
}

/// First eigen-quotient of the order-m form against the order-s form:
/// lambda_1^{m-s}, exact because t -> t^{m-s} is increasing on the spectrum.
pub fn lambda1(m: f64, s: f64, basis: &SineBasis) -> Result<f64> {
    if !(m > s) {
        return Err(Error::InvalidOrder(format!(
            "quotient exponent needs m > s, got m = {m}, s = {s}"
        )));
    }
    Ok(basis.lambda1().powf(m - s))
}

/// Hardy Gram action in mode space: W c with W_{jk} = sum_i w_i phi_j(x_i)
/// phi_k(x_i), applied matrix-free as analysis(w .* synthesis(c)).
pub(crate) fn hardy_gram_apply(
    c: &[f64],
    basis: &SineBasis,
    grid: &UniformGrid,
    weights: &[f64],
) -> Vec<f64> {
    let n = grid.n();
    let j = basis.max_index();
    let mode_dims = vec![j; n];
    let grid_dims: Vec<usize> = (0..n).map(|a| grid.points(a)).collect();
    let synth_scale: Vec<f64> = (0..n)
        .map(|a| 1.0 / grid.domain().half_width(a).sqrt())
        .collect();
    let mut values = sine_transform(c, &mode_dims, &grid_dims, false, &synth_scale);
    for (v, &w) in values.iter_mut().zip(weights) {
        *v *= w;
    }
    // Analysis without the uniform cell factor: the cell mass is already in
    // the weights.
    sine_transform(&values, &grid_dims, &mode_dims, true, &synth_scale)
}

/// Smallest generalized eigenvalue of D_m c = mu W c, where D_m is the
/// diagonal of lambda_j^m and W is the Gram matrix of the Hardy weight
/// |x|^{-2s} in the sine basis, assembled with origin-exact cell weights.
///
/// In one dimension W is formed densely and the eigenvalue found by power
/// sweeps followed by Rayleigh-shifted inverse iteration; in higher
/// dimensions W is applied matrix-free and plain power iteration on
/// D_m^{-1} W is used.
pub fn lambda1_hardy(m: f64, s: f64, basis: &SineBasis, grid: &UniformGrid) -> Result<f64> {
    if !(m > s) || s < 0.0 {
        return Err(Error::InvalidOrder(format!(
            "hardy quotient needs m > s >= 0, got m = {m}, s = {s}"
        )));
    }
    basis.grid_compatible(grid)?;
    let weights = hardy_cell_weights(grid, s)?;
    let d: Vec<f64> = basis.eigenvalues().iter().map(|l| l.powf(m)).collect();

    if grid.n() == 1 {
        lambda1_hardy_dense(&d, basis, grid, &weights)
    } else {
        lambda1_hardy_iterative(&d, basis, grid, &weights)
    }
}

fn lambda1_hardy_dense(
    d: &[f64],
    basis: &SineBasis,
    grid: &UniformGrid,
    weights: &[f64],
) -> Result<f64> {
    let j = basis.max_index();
    let n_pts = grid.points(0);
    let root_h = grid.domain().half_width(0).sqrt();
    // W_{jk} = sum_i w_i phi_j(x_i) phi_k(x_i), symmetric.
    let mut w = vec![0.0; j * j];
    let rows: Vec<Vec<f64>> = (0..j)
        .into_par_iter()
        .map(|r| {
            let mut row = vec![0.0; j];
            for c in r..j {
                let mut acc = 0.0;
                for i in 0..n_pts {
                    acc += weights[i]
                        * sine_entry(r + 1, i, n_pts)
                        * sine_entry(c + 1, i, n_pts);
                }
                row[c] = acc / (root_h * root_h);
            }
            row
        })
        .collect();
    for r in 0..j {
        for c in r..j {
            w[r * j + c] = rows[r][c];
            w[c * j + r] = rows[r][c];
        }
    }
    if !is_positive_definite(&w, j) {
        return Err(Error::QuadratureFailure(
            "hardy weight Gram matrix is not numerically positive definite; \
             the grid cannot resolve the requested modes"
                .into(),
        ));
    }

    let wv = |v: &[f64]| -> Vec<f64> {
        (0..j)
            .map(|r| {
                let mut acc = 0.0;
                for c in 0..j {
                    acc += w[r * j + c] * v[c];
                }
                acc
            })
            .collect()
    };
    let rayleigh = |v: &[f64]| -> f64 {
        let num: f64 = v.iter().zip(d).map(|(x, dd)| dd * x * x).sum();
        let den: f64 = v.iter().zip(wv(v)).map(|(x, y)| x * y).sum();
        num / den
    };

    // Power sweeps on D^{-1} W grow the eigenvector of the smallest
    // quotient; five are enough to land in its basin.
    let mut v = vec![0.0; j];
    v[0] = 1.0;
    for _ in 0..5 {
        let mut z = wv(&v);
        for (zi, di) in z.iter_mut().zip(d) {
            *zi /= di;
        }
        let norm = z.iter().map(|x| x * x).sum::<f64>().sqrt();
        for (vi, zi) in v.iter_mut().zip(&z) {
            *vi = zi / norm;
        }
    }
    let mut mu = rayleigh(&v);

    // Rayleigh-shifted inverse iteration on the pencil (D - mu W).
    for _ in 0..100 {
        let mut shifted = vec![0.0; j * j];
        for r in 0..j {
            for c in 0..j {
                shifted[r * j + c] = -mu * w[r * j + c];
            }
            shifted[r * j + r] += d[r];
        }
        let rhs = wv(&v);
        let lu = match DenseLu::factor(&shifted, j) {
            Some(lu) => lu,
            // The shift landed numerically on the eigenvalue; the current mu
            // is converged for any practical purpose.
            None => return Ok(mu),
        };
        let z = lu.solve(&rhs);
        let norm = z.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !norm.is_finite() || norm == 0.0 {
            return Ok(mu);
        }
        for (vi, zi) in v.iter_mut().zip(&z) {
            *vi = zi / norm;
        }
        let next = rayleigh(&v);
        let done = (next - mu).abs() <= 1e-8 * mu.abs();
        mu = next;
        if done {
            return Ok(mu);
        }
    }
    Err(Error::ConvergenceFailure(
        "shifted inverse iteration did not settle within 100 sweeps".into(),
    ))
}

fn lambda1_hardy_iterative(
    d: &[f64],
    basis: &SineBasis,
    grid: &UniformGrid,
    weights: &[f64],
) -> Result<f64> {
    let len = basis.len();
    let mut v = vec![0.0; len];
    v[0] = 1.0;
    let mut mu_prev = f64::INFINITY;
    let mut settled = 0;
    for _ in 0..50_000 {
        let wvv = hardy_gram_apply(&v, basis, grid, weights);
        let den: f64 = v.iter().zip(&wvv).map(|(x, y)| x * y).sum();
        if !(den > 0.0) {
            return Err(Error::QuadratureFailure(
                "hardy weight Gram is not positive on the iteration subspace".into(),
            ));
        }
        let num: f64 = v.iter().zip(d).map(|(x, dd)| dd * x * x).sum();
        let mu = num / den;
        if (mu - mu_prev).abs() <= 1e-9 * mu.abs() {
            settled += 1;
            if settled >= 2 {
                return Ok(mu);
            }
        } else {
            settled = 0;
        }
        mu_prev = mu;
        let mut z = wvv;
        for (zi, di) in z.iter_mut().zip(d) {
            *zi /= di;
        }
        let norm = z.iter().map(|x| x * x).sum::<f64>().sqrt();
        for (vi, zi) in v.iter_mut().zip(&z) {
            *vi = zi / norm;
        }
    }
    Err(Error::ConvergenceFailure(
        "hardy power iteration did not settle within 50000 sweeps".into(),
    ))
}

/// Euler-Lagrange residual of the constrained critical-point equation: the
/// l2 norm over modes of
///
///   lambda_j^m c_j - lambda (s-term)_j - mu (|u|^{p-2} u, phi_j),
///
/// with p the critical exponent 2n/(n-2m), the s-term either the diagonal
/// lambda_j^s c_j or the Hardy Gram action, and mu the natural multiplier
/// Q_m - lambda (s-form). The coefficients are assumed normalized so the
/// L^p norm of the reconstruction is one.
pub fn el_residual(
    c: &SpectralCoeffs,
    m: f64,
    s: f64,
    lambda: f64,
    hardy: bool,
    grid: &Arc<UniformGrid>,
) -> Result<f64> {
    let basis = c.basis();
    let n = basis.domain().n() as f64;
    if !(m > 0.0 && 2.0 * m < n) {
        return Err(Error::InvalidOrder(format!(
            "critical exponent needs 0 < m < n/2, got m = {m} in dimension {n}"
        )));
    }
    let p = 2.0 * n / (n - 2.0 * m);

    let sterm: Vec<f64> = if hardy {
        let weights = hardy_cell_weights(grid, s)?;
        hardy_gram_apply(c.coeffs(), basis, grid, &weights)
    } else {
        basis
            .eigenvalues()
            .iter()
            .zip(c.coeffs())
            .map(|(&lam, &cj)| lam.powf(s) * cj)
            .collect()
    };
    let sform: f64 = pairwise_sum(
        &c.coeffs()
            .iter()
            .zip(&sterm)
            .map(|(&cj, &tj)| cj * tj)
            .collect::<Vec<f64>>(),
    );
    let qm = q_navier(c, m).value;
    let mu = qm - lambda * sform;

    let u = reconstruct(c, grid)?;
    let forcing: Vec<f64> = u
        .values()
        .iter()
        .map(|&v| v.abs().powf(p - 2.0) * v)
        .collect();
    let f = expand(&GridFunction::new(grid.clone(), forcing)?, basis)?;

    let res: Vec<f64> = basis
        .eigenvalues()
        .iter()
        .zip(c.coeffs())
        .zip(sterm.iter().zip(f.coeffs()))
        .map(|((&lam, &cj), (&tj, &fj))| {
            let r = lam.powf(m) * cj - lambda * tj - mu * fj;
            r * r
        })
        .collect();
    Ok(pairwise_sum(&res).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{lp_norm, make_bubble, BubbleParams};
    use crate::fourier::{q_dirichlet, FormOrder, DEFAULT_PAD};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn grid1(h: f64, n: usize) -> Arc<UniformGrid> {
        Arc::new(UniformGrid::isotropic(BoxDomain::cube(1, h).unwrap(), n).unwrap())
    }

    fn basis1(h: f64, j: usize) -> Arc<SineBasis> {
        Arc::new(SineBasis::new(BoxDomain::cube(1, h).unwrap(), j).unwrap())
    }

    #[test]
    fn rejects_empty_basis() {
        assert!(SineBasis::new(BoxDomain::cube(1, 1.0).unwrap(), 0).is_err());
    }

    #[test]
    fn orthonormality_spot_check_by_quadrature() {
        // Ten random pairs on a non-unit box, in one and two dimensions.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let g = grid1(1.3, 512);
        let dx = g.spacing(0);
        let h = 1.3f64;
        for _ in 0..10 {
            let j = rng.gen_range(1..=256usize);
            let k = rng.gen_range(1..=256usize);
            let mut acc = 0.0;
            for i in 0..512 {
                acc += sine_entry(j, i, 512) * sine_entry(k, i, 512);
            }
            let gram = acc * dx / h;
            let expect = if j == k { 1.0 } else { 0.0 };
            assert!((gram - expect).abs() < 1e-10, "({j},{k}) -> {gram}");
        }

        let d2 = BoxDomain::new(&[0.8, 1.7]).unwrap();
        let g2 = Arc::new(UniformGrid::isotropic(d2.clone(), 64).unwrap());
        let b2 = Arc::new(SineBasis::new(d2, 16).unwrap());
        let cell = g2.cell_volume();
        for _ in 0..10 {
            let pair: Vec<usize> = (0..2).map(|_| rng.gen_range(0..b2.len())).collect();
            let mut ca = vec![0.0; b2.len()];
            ca[pair[0]] = 1.0;
            let mut cb = vec![0.0; b2.len()];
            cb[pair[1]] = 1.0;
            let fa = reconstruct(&SpectralCoeffs::new(b2.clone(), ca).unwrap(), &g2).unwrap();
            let fb = reconstruct(&SpectralCoeffs::new(b2.clone(), cb).unwrap(), &g2).unwrap();
            let gram: f64 = cell
                * fa.values()
                    .iter()
                    .zip(fb.values())
                    .map(|(x, y)| x * y)
                    .sum::<f64>();
            let expect = if pair[0] == pair[1] { 1.0 } else { 0.0 };
            assert!((gram - expect).abs() < 1e-10, "{pair:?} -> {gram}");
        }
    }

    #[test]
    fn expand_zero_and_first_eigenfunction() {
        let g = grid1(1.0, 256);
        let b = basis1(1.0, 64);
        let zero = GridFunction::zeros(g.clone());
        assert!(expand(&zero, &b).unwrap().coeffs().iter().all(|&c| c == 0.0));

        let phi1 = GridFunction::sample(g.clone(), |x| (PI * (x[0] + 1.0) / 2.0).sin()).unwrap();
        let c = expand(&phi1, &b).unwrap();
        assert!((c.coeffs()[0] - 1.0).abs() < 1e-10, "c1 = {}", c.coeffs()[0]);
        for (i, &cj) in c.coeffs().iter().enumerate().skip(1) {
            assert!(cj.abs() < 1e-10, "mode {} leaked {cj}", i + 1);
        }
    }

    #[test]
    fn expand_rejects_aliasing_and_wrong_domain() {
        let g = grid1(1.0, 64);
        let u = GridFunction::zeros(g.clone());
        let too_many = basis1(1.0, 64);
        assert!(matches!(expand(&u, &too_many), Err(Error::Aliasing(_))));
        let wrong_box = basis1(2.0, 16);
        assert!(expand(&u, &wrong_box).is_err());
    }

    #[test]
    fn bubble_reconstruction_residual_is_tiny() {
        // The 256-mode truncation tail of this profile sits at 1.46e-6
        // relative, stable over grids from 1024 to 8192 points, so the tail
        // is the genuine spectral content beyond mode 256, not quadrature.
        let g = grid1(1.0, 2048);
        let u = make_bubble(&BubbleParams { n: 1, m: 0.4, eps: 0.5, delta: 0.25 }, &g).unwrap();
        let b = basis1(1.0, 256);
        let c = expand(&u, &b).unwrap();
        let back = reconstruct(&c, &g).unwrap();
        let num: f64 = u
            .values()
            .iter()
            .zip(back.values())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let den: f64 = u.values().iter().map(|x| x * x).sum();
        assert!((num / den).sqrt() < 2e-6, "residual {}", (num / den).sqrt());
        // Doubling the mode count cuts the residual by an order of
        // magnitude, confirming the tail interpretation.
        let c2 = expand(&u, &basis1(1.0, 512)).unwrap();
        let back2 = reconstruct(&c2, &g).unwrap();
        let num2: f64 = u
            .values()
            .iter()
            .zip(back2.values())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        assert!((num2 / den).sqrt() < 2e-7, "residual {}", (num2 / den).sqrt());
    }

    #[test]
    fn single_mode_form_has_closed_value() {
        let g = grid1(1.0, 64);
        let b = basis1(1.0, 8);
        let phi1 = GridFunction::sample(g.clone(), |x| (PI * (x[0] + 1.0) / 2.0).sin()).unwrap();
        let c = expand(&phi1, &b).unwrap();
        let nv = q_navier(&c, 1.0);
        assert_relative_eq!(nv.value, (PI / 2.0) * (PI / 2.0), max_relative = 1e-12);
        assert!(!nv.tail_flagged);
        let mass = q_navier(&c, 0.0);
        assert_relative_eq!(mass.value, 1.0, max_relative = 1e-12);
    }

    #[test]
    fn parseval_at_order_zero() {
        let g = grid1(1.0, 2048);
        let u = make_bubble(&BubbleParams { n: 1, m: 0.4, eps: 0.5, delta: 0.25 }, &g).unwrap();
        let c = expand(&u, &basis1(1.0, 256)).unwrap();
        let norm_sq = g.cell_volume() * u.values().iter().map(|v| v * v).sum::<f64>();
        assert_relative_eq!(q_navier(&c, 0.0).value, norm_sq, max_relative = 1e-8);
    }

    #[test]
    fn integer_order_matches_the_fourier_route() {
        let g = grid1(1.0, 4096);
        let u = make_bubble(&BubbleParams { n: 1, m: 0.4, eps: 0.5, delta: 0.25 }, &g).unwrap();
        let c = expand(&u, &basis1(1.0, 1024)).unwrap();
        let qn = q_navier(&c, 1.0).value;
        let qd = q_dirichlet(&u, &FormOrder::new(1.0).unwrap(), DEFAULT_PAD).unwrap();
        assert_relative_eq!(qn, qd, max_relative = 1e-5);
    }

    #[test]
    fn truncation_is_monotone_in_mode_count() {
        let g = grid1(1.0, 1024);
        let u = make_bubble(&BubbleParams { n: 1, m: 0.3, eps: 0.4, delta: 0.3 }, &g).unwrap();
        let mut prev = 0.0;
        for j in [16usize, 32, 64, 128] {
            let v = q_navier(&expand(&u, &basis1(1.0, j)).unwrap(), 0.7).value;
            assert!(v >= prev, "J={j}: {v} < {prev}");
            prev = v;
        }
    }

    #[test]
    fn tail_flag_trips_on_top_octave_content_and_strict_errors() {
        let g = grid1(1.0, 256);
        let b = basis1(1.0, 64);
        // Pure top mode: the whole form sits in the last octave.
        let top = GridFunction::sample(g.clone(), |x| (64.0 * PI * (x[0] + 1.0) / 2.0).sin())
            .unwrap();
        let c = expand(&top, &b).unwrap();
        assert!(q_navier(&c, 1.0).tail_flagged);
        assert!(matches!(q_navier_strict(&c, 1.0), Err(Error::Truncation(_))));

        // A smooth profile with enough modes keeps the top octave below the
        // threshold (measured fraction 3e-5 at 128 modes).
        let gs = grid1(1.0, 512);
        let bs = basis1(1.0, 128);
        let smooth =
            make_bubble(&BubbleParams { n: 1, m: 0.4, eps: 0.5, delta: 0.25 }, &gs).unwrap();
        let cs = expand(&smooth, &bs).unwrap();
        assert!(!q_navier(&cs, 1.0).tail_flagged);
        assert!(q_navier_strict(&cs, 1.0).is_ok());
    }

    #[test]
    fn first_quotient_closed_form_and_rejection() {
        let b = basis1(1.0, 32);
        let v = lambda1(0.4, 0.0, &b).unwrap();
        assert_relative_eq!(v, (PI / 2.0_f64).powf(0.8), max_relative = 1e-14);
        assert!(matches!(lambda1(0.3, 0.3, &b), Err(Error::InvalidOrder(_))));
        assert!(matches!(lambda1(0.2, 0.3, &b), Err(Error::InvalidOrder(_))));
    }

    #[test]
    fn random_quotients_dominate_the_first_one() {
        let b = basis1(1.0, 64);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (m, s) = (0.9, 0.35);
        let bound = lambda1(m, s, &b).unwrap();
        for _ in 0..20 {
            let c: Vec<f64> = (0..b.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let num: f64 = b
                .eigenvalues()
                .iter()
                .zip(&c)
                .map(|(l, x)| l.powf(m) * x * x)
                .sum();
            let den: f64 = b
                .eigenvalues()
                .iter()
                .zip(&c)
                .map(|(l, x)| l.powf(s) * x * x)
                .sum();
            assert!(num / den >= bound - 1e-12, "{} < {bound}", num / den);
        }
    }

    #[test]
    fn hardy_quotient_reduces_to_plain_quotient_at_s_zero() {
        let g = grid1(1.0, 512);
        let b = basis1(1.0, 64);
        let via_hardy = lambda1_hardy(0.4, 0.0, &b, &g).unwrap();
        let direct = lambda1(0.4, 0.0, &b).unwrap();
        assert_relative_eq!(via_hardy, direct, max_relative = 1e-6);
    }

    #[test]
    fn hardy_quotient_is_bounded_by_the_first_mode_rayleigh_quotient() {
        let g = grid1(1.0, 512);
        let b = basis1(1.0, 64);
        let (m, s) = (0.4, 0.3);
        let mu = lambda1_hardy(m, s, &b, &g).unwrap();
        // Rayleigh quotient of the first eigenfunction: lambda_1^m over its
        // Hardy-weighted mass, computed by the same quadrature.
        let weights = hardy_cell_weights(&g, s).unwrap();
        let mut c = vec![0.0; b.len()];
        c[0] = 1.0;
        let w11 = hardy_gram_apply(&c, &b, &g, &weights)[0];
        let rayleigh = b.lambda1().powf(m) / w11;
        assert!(mu <= rayleigh * (1.0 + 1e-12), "{mu} > {rayleigh}");
        assert!(mu > 0.0);
    }

    #[test]
    fn hardy_quotient_matches_dense_eigensolver_oracle() {
        let j = 128usize;
        let g = grid1(1.0, 512);
        let b = basis1(1.0, j);
        let (m, s) = (0.4, 0.3);
        let mu = lambda1_hardy(m, s, &b, &g).unwrap();

        // Oracle: assemble the same matrices and solve the generalized
        // symmetric problem by Cholesky reduction and a full eigensolve.
        let weights = hardy_cell_weights(&g, s).unwrap();
        let n_pts = g.points(0);
        let h = 1.0f64;
        let mut w = nalgebra::DMatrix::<f64>::zeros(j, j);
        for r in 0..j {
            for c in r..j {
                let mut acc = 0.0;
                for i in 0..n_pts {
                    acc += weights[i]
                        * sine_entry(r + 1, i, n_pts)
                        * sine_entry(c + 1, i, n_pts);
                }
                w[(r, c)] = acc / h;
                w[(c, r)] = acc / h;
            }
        }
        let chol = nalgebra::Cholesky::new(w).expect("gram must be positive definite");
        let l_inv = chol.l().try_inverse().unwrap();
        let mut dm = nalgebra::DMatrix::<f64>::zeros(j, j);
        for (r, lam) in b.eigenvalues().iter().enumerate() {
            dm[(r, r)] = lam.powf(m);
        }
        let reduced = &l_inv * dm * l_inv.transpose();
        let sym = nalgebra::SymmetricEigen::new(reduced);
        let oracle = sym.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
        assert_relative_eq!(mu, oracle, max_relative = 1e-8);
    }

    #[test]
    fn hardy_gram_failure_is_reported_on_unresolvable_modes() {
        // With as many modes as grid points the top sine samples to zero
        // everywhere, so the Gram matrix is singular.
        let g = grid1(1.0, 16);
        let b = basis1(1.0, 16);
        assert!(matches!(
            lambda1_hardy(0.4, 0.3, &b, &g),
            Err(Error::QuadratureFailure(_))
        ));
    }

    #[test]
    fn two_dimensional_hardy_quotient_matches_dense_assembly() {
        let d = BoxDomain::cube(2, 1.0).unwrap();
        let g = Arc::new(UniformGrid::isotropic(d.clone(), 32).unwrap());
        let b = SineBasis::new(d, 8).unwrap();
        let (m, s) = (0.6, 0.2);
        let mu = lambda1_hardy(m, s, &b, &g).unwrap();

        let weights = hardy_cell_weights(&g, s).unwrap();
        let len = b.len();
        let mut phi = vec![0.0; len * g.len()];
        for flat_mode in 0..len {
            let mut c = vec![0.0; len];
            c[flat_mode] = 1.0;
            let f = reconstruct(
                &SpectralCoeffs::new(Arc::new(SineBasis::new(b.domain().clone(), 8).unwrap()), c)
                    .unwrap(),
                &g,
            )
            .unwrap();
            phi[flat_mode * g.len()..(flat_mode + 1) * g.len()].copy_from_slice(f.values());
        }
        let mut w = nalgebra::DMatrix::<f64>::zeros(len, len);
        for r in 0..len {
            for c in r..len {
                let mut acc = 0.0;
                for i in 0..g.len() {
                    acc += weights[i] * phi[r * g.len() + i] * phi[c * g.len() + i];
                }
                w[(r, c)] = acc;
                w[(c, r)] = acc;
            }
        }
        let chol = nalgebra::Cholesky::new(w).expect("gram must be positive definite");
        let l_inv = chol.l().try_inverse().unwrap();
        let mut dm = nalgebra::DMatrix::<f64>::zeros(len, len);
        for (r, lam) in b.eigenvalues().iter().enumerate() {
            dm[(r, r)] = lam.powf(m);
        }
        let reduced = &l_inv * dm * l_inv.transpose();
        let sym = nalgebra::SymmetricEigen::new(reduced);
        let oracle = sym.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
        assert_relative_eq!(mu, oracle, max_relative = 1e-7);
    }

    #[test]
    fn el_residual_vanishes_in_the_exact_linear_case() {
        // Single mode with lambda at its eigen-quotient: both linear terms
        // cancel and the multiplier is zero, so the residual is roundoff.
        let g = grid1(1.0, 256);
        let b = basis1(1.0, 16);
        let (m, s) = (0.4, 0.3);
        let mode = 2usize;
        let lam = b.eigenvalues()[mode];
        let mut c = vec![0.0; b.len()];
        c[mode] = 1.0;
        let unscaled = SpectralCoeffs::new(b.clone(), c.clone()).unwrap();
        // Normalize the critical L^p norm of the reconstruction (p = 10 for
        // m = 0.4 in one dimension).
        let p = 2.0 / (1.0 - 2.0 * m);
        let norm = lp_norm(&reconstruct(&unscaled, &g).unwrap(), p).unwrap();
        for ci in c.iter_mut() {
            *ci /= norm;
        }
        let sc = SpectralCoeffs::new(b.clone(), c).unwrap();
        let lambda = lam.powf(m - s);
        let r = el_residual(&sc, m, s, lambda, false, &g).unwrap();
        assert!(r < 1e-10, "residual {r}");
    }

    #[test]
    fn el_residual_positive_for_generic_coefficients() {
        let g = grid1(1.0, 256);
        let b = basis1(1.0, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c: Vec<f64> = (0..b.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let sc = SpectralCoeffs::new(b.clone(), c).unwrap();
        let r = el_residual(&sc, 0.4, 0.3, 0.05, false, &g).unwrap();
        assert!(r > 0.0);
        let rh = el_residual(&sc, 0.4, 0.3, 0.05, true, &g).unwrap();
        assert!(rh > 0.0);
    }

    #[test]
    fn coefficients_serialize_to_indexed_csv() {
        let d = BoxDomain::cube(2, 1.0).unwrap();
        let b = Arc::new(SineBasis::new(d, 2).unwrap());
        let sc = SpectralCoeffs::new(b, vec![1.5, 0.0, -0.25, 0.125]).unwrap();
        let mut buf = Vec::new();
        sc.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "j1,j2,coeff");
        assert_eq!(lines[1], "1,1,1.5");
        assert_eq!(lines[3], "2,1,-0.25");
        assert_eq!(lines.len(), 5);
    }
}
