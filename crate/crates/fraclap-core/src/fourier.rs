//! Frequency-side evaluation of the unconstrained fractional form.
//!
//! For u supported strictly inside its box, the order-m form is the integral
//! of |xi|^{2m} |(Fu)(xi)|^2 over all frequencies, with F the unitary Fourier
//! transform. The evaluator works in three pieces:
//!
//! 1. Zero-pad u into a box `pad_factor` times wider and take an FFT. The
//!    resulting lattice has frequency step pi/H (H the padded half-width),
//!    fine enough to resolve the oscillation of Fu, whose natural scale is
//!    set by the source box. Padding controls the periodization error, which
//!    decays like a power of the image distance and is far below 1e-6 of the
//!    total at the default factor 8.
//! 2. |xi|^{2m} has a kink (or cusp) at the origin that a plain lattice sum
//!    handles poorly, so the cells with all |k| <= K0 are excised from the
//!    sum and integrated by per-cell tensor Gauss-Legendre instead, with the
//!    origin cell split at 0 along each axis. Fu at off-lattice points comes
//!    from a direct discrete transform over the (compact) support of u.
//! 3. Swapping lattice cells for exact integrals leaves a midpoint-rule
//!    mismatch on the block boundary of size (step^2/24) * jump of the
//!    derivative flux. That correction is computed from the closed-form
//!    gradient of the integrand (the spectrum's derivative is another
//!    discrete transform, with an extra -i*x weight) and subtracted. It is
//!    what pushes the scheme from ~1e-4 to ~1e-7 relative accuracy.

use std::f64::consts::PI;
use std::sync::Arc;

use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::domain::{GridFunction, UniformGrid};
use crate::error::{Error, Result};
use crate::numeric::{gauss_legendre_12, pairwise_sum, parallel_sum_indexed};

/// Default zero-padding factor; at this value the periodization and boundary
/// errors of q_dirichlet sit below 1e-6 relative for well-resolved inputs.
pub const DEFAULT_PAD: usize = 8;

/// Half-width, in lattice cells, of the origin block that is integrated by
/// quadrature instead of summed. Larger blocks cost (2*K0+1)^n cell
/// integrals; in three dimensions a smaller block keeps that affordable.
pub fn block_radius(n: usize) -> usize {
    match n {
        1 | 2 => 8,
        _ => 4,
    }
}

/// Parity class of the order m: whether the integer part of m is even or
/// odd decides which of the two forms dominates the other, and m = 1, 2 are
/// the classical cases where they coincide.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Parity {
    FloorEven,
    FloorOdd,
    Integer,
}

/// A validated form order m in (0,3): either an integer (1 or 2) or a
/// fractional order carrying its decomposition m = 2k + sigma (floor even)
/// or m = 2k - sigma (floor odd) with k in {0,1} and sigma in (0,1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FormOrder {
    m: f64,
    k: u32,
    sigma: f64,
    parity: Parity,
}

impl FormOrder {
    pub fn new(m: f64) -> Result<Self> {
        if !m.is_finite() {
            return Err(Error::InvalidOrder(format!("order {m} is not finite")));
        }
        if m == 1.0 || m == 2.0 {
            return Ok(FormOrder {
                m,
                k: 0,
                sigma: 0.0,
                parity: Parity::Integer,
            });
        }
        if !(m > 0.0 && m < 3.0) || m == m.floor() {
            return Err(Error::InvalidOrder(format!(
                "order {m} not in (0,3) excluding integers, nor 1 or 2"
            )));
        }
        let fl = m.floor() as u32; // 0, 1, or 2
        if fl % 2 == 0 {
            Ok(FormOrder {
                m,
                k: fl / 2,
                sigma: m - fl as f64,
                parity: Parity::FloorEven,
            })
        } else {
            Ok(FormOrder {
                m,
                k: (fl + 1) / 2,
                sigma: (fl + 1) as f64 - m,
                parity: Parity::FloorOdd,
            })
        }
    }

    pub fn m(&self) -> f64 {
        self.m
    }

    pub fn parity(&self) -> Parity {
        self.parity
    }

    /// The split (k, sigma) with m = 2k + sigma or 2k - sigma according to
    /// parity; None for the integer orders, which have no split.
    pub fn decomposition(&self) -> Option<(u32, f64)> {
        match self.parity {
            Parity::Integer => None,
            _ => Some((self.k, self.sigma)),
        }
    }
}

/// The zero-padded discrete Fourier transform of a grid function, scaled so
/// the amplitudes approximate the continuous unitary transform on the padded
/// frequency lattice.
#[derive(Debug, Clone)]
pub struct PaddedSpectrum {
    source: GridFunction,
    pad_factor: usize,
    padded_points: Vec<usize>,
    freq_step: Vec<f64>,
    amps: Vec<Complex64>,
}

impl PaddedSpectrum {
    pub fn source(&self) -> &GridFunction {
        &self.source
    }

    pub fn pad_factor(&self) -> usize {
        self.pad_factor
    }

    /// Modal amplitudes in FFT index order (lexicographic over axes, last
    /// axis fastest; index i on an axis of P points means signed frequency
    /// index i for i < P/2 and i - P otherwise).
    pub fn amplitudes(&self) -> &[Complex64] {
        &self.amps
    }

    pub fn padded_points(&self, axis: usize) -> usize {
        self.padded_points[axis]
    }

    pub fn frequency_step(&self, axis: usize) -> f64 {
        self.freq_step[axis]
    }

    pub fn signed_index(&self, axis: usize, i: usize) -> i64 {
        let p = self.padded_points[axis];
        if i < p / 2 {
            i as i64
        } else {
            i as i64 - p as i64
        }
    }

    /// The squared L2 norm recovered from the spectrum (amplitude energy
    /// times the frequency cell volume); equals the grid L2 norm of the
    /// source up to roundoff.
    pub fn spectral_l2_sq(&self) -> f64 {
        let cell: f64 = self.freq_step.iter().product();
        let amps = &self.amps;
        cell * parallel_sum_indexed(amps.len(), |i| amps[i].norm_sqr())
    }
}

/// In-place forward FFT along every axis of a lexicographic array.
fn fft_nd(data: &mut [Complex64], dims: &[usize]) {
    fft_nd_dir(data, dims, false);
}

/// In-place FFT along every axis, forward or inverse (inverse is unscaled,
/// as rustfft leaves the 1/len factor to the caller).
fn fft_nd_dir(data: &mut [Complex64], dims: &[usize], inverse: bool) {
    let mut planner = FftPlanner::new();
    let n = dims.len();
    for axis in 0..n {
        let len = dims[axis];
        let fft = if inverse {
            planner.plan_fft_inverse(len)
        } else {
            planner.plan_fft_forward(len)
        };
        let post: usize = dims[axis + 1..].iter().product();
        let pre: usize = dims[..axis].iter().product();
        let mut lane = vec![Complex64::new(0.0, 0.0); len];
        for p in 0..pre {
            for q in 0..post {
                let base = p * len * post + q;
                for i in 0..len {
                    lane[i] = data[base + i * post];
                }
                fft.process(&mut lane);
                for i in 0..len {
                    data[base + i * post] = lane[i];
                }
            }
        }
    }
}

/// Compute the padded spectrum of u. Requires pad_factor >= 4 and compact
/// support strictly inside the grid (outermost node shell effectively zero),
/// otherwise periodization would alias the function onto itself.
pub fn transform(u: &GridFunction, pad_factor: usize) -> Result<PaddedSpectrum> {
    if pad_factor < 4 {
        return Err(Error::Precondition(format!(
            "pad_factor {pad_factor} < 4"
        )));
    }
    if !u.is_interior_supported() {
        return Err(Error::Aliasing(
            "support touches the grid boundary; enlarge the box".into(),
        ));
    }
    let g = u.grid();
    let n = g.n();
    let padded: Vec<usize> = (0..n).map(|a| pad_factor * g.points(a)).collect();
    let offsets: Vec<usize> = (0..n).map(|a| (pad_factor - 1) * g.points(a) / 2).collect();
    let total: usize = padded.iter().product();
    let mut data = vec![Complex64::new(0.0, 0.0); total];
    let mut idx = vec![0usize; n];
    for flat in 0..g.len() {
        g.unflatten(flat, &mut idx);
        let mut pflat = 0usize;
        for a in 0..n {
            pflat = pflat * padded[a] + (idx[a] + offsets[a]);
        }
        data[pflat] = Complex64::new(u.values()[flat], 0.0);
    }
    fft_nd(&mut data, &padded);

    // Continuous-transform scaling: (2 pi)^{-n/2} * cell volume, and the
    // phase that re-centers node 0 at -H; on this lattice that phase is
    // (-1)^{sum of unsigned indices}.
    let scale = (2.0 * PI).powf(-(n as f64) / 2.0) * g.cell_volume();
    let mut pidx = vec![0usize; n];
    for (flat, a) in data.iter_mut().enumerate() {
        let mut rem = flat;
        let mut parity = 0usize;
        for ax in (0..n).rev() {
            pidx[ax] = rem % padded[ax];
            rem /= padded[ax];
        }
        for &i in pidx.iter() {
            parity += i;
        }
        let sign = if parity % 2 == 0 { scale } else { -scale };
        *a *= sign;
    }

    let freq_step: Vec<f64> = (0..n)
        .map(|a| PI / (pad_factor as f64 * g.domain().half_width(a)))
        .collect();
    let spectrum = PaddedSpectrum {
        source: u.clone(),
        pad_factor,
        padded_points: padded,
        freq_step,
        amps: data,
    };

    // Discrete Plancherel holds exactly in this scaling; a violation means
    // the transform plumbing is broken, not that the input is bad.
    let l2_grid = {
        let vals = u.values();
        g.cell_volume() * parallel_sum_indexed(vals.len(), |i| vals[i] * vals[i])
    };
    let l2_spec = spectrum.spectral_l2_sq();
    if (l2_spec - l2_grid).abs() > 1e-10 * l2_grid.max(1e-30) {
        return Err(Error::QuadratureFailure(format!(
            "spectral energy {l2_spec} disagrees with grid energy {l2_grid}"
        )));
    }
    Ok(spectrum)
}

/// Zero-padding factor for spectral differentiation. Differentiation keeps
/// every mode up to the grid Nyquist frequency, so accuracy is set by the
/// sample count, not the padding; the padding only has to suppress
/// periodization, and 4 already does.
const LAPLACIAN_PAD: usize = 4;

/// Integer power of the negative Laplacian, k in {0, 1}, on the same grid.
///
/// Data that vanishes near the box boundary is differentiated spectrally on
/// a zero-padded Fourier lattice, which keeps all modes up to the sampling
/// Nyquist. Data that meets the boundary cannot be zero-padded (the
/// extension would kink); it is differentiated in the Dirichlet sine
/// eigenbasis instead, which is exact on the box eigenfunctions.
pub fn laplacian_power_k(u: &GridFunction, k: u32) -> Result<GridFunction> {
    match k {
        0 => Ok(u.clone()),
        1 => {
            if u.is_interior_supported() {
                neg_laplacian_fourier(u)
            } else {
                neg_laplacian_sine(u)
            }
        }
        _ => Err(Error::InvalidOrder(format!(
            "only Laplacian powers 0 and 1 are supported, got {k}"
        ))),
    }
}

fn neg_laplacian_fourier(u: &GridFunction) -> Result<GridFunction> {
    let g = u.grid();
    let n = g.n();
    let pad = LAPLACIAN_PAD;
    let padded: Vec<usize> = (0..n).map(|a| pad * g.points(a)).collect();
    let offsets: Vec<usize> = (0..n).map(|a| (pad - 1) * g.points(a) / 2).collect();
    let total: usize = padded.iter().product();
    let mut data = vec![Complex64::new(0.0, 0.0); total];
    let mut idx = vec![0usize; n];
    for flat in 0..g.len() {
        g.unflatten(flat, &mut idx);
        let mut pflat = 0usize;
        for a in 0..n {
            pflat = pflat * padded[a] + (idx[a] + offsets[a]);
        }
        data[pflat] = Complex64::new(u.values()[flat], 0.0);
    }
    fft_nd(&mut data, &padded);

    let freq_step: Vec<f64> = (0..n)
        .map(|a| PI / (pad as f64 * g.domain().half_width(a)))
        .collect();
    let mut pidx = vec![0usize; n];
    for (flat, a) in data.iter_mut().enumerate() {
        let mut rem = flat;
        for ax in (0..n).rev() {
            pidx[ax] = rem % padded[ax];
            rem /= padded[ax];
        }
        let mut xi2 = 0.0;
        for ax in 0..n {
            let len = padded[ax];
            let signed = if pidx[ax] <= len / 2 {
                pidx[ax] as f64
            } else {
                pidx[ax] as f64 - len as f64
            };
            let xi = signed * freq_step[ax];
            xi2 += xi * xi;
        }
        *a *= xi2;
    }
    fft_nd_dir(&mut data, &padded, true);

    let norm = 1.0 / total as f64;
    let mut out = Vec::with_capacity(g.len());
    for flat in 0..g.len() {
        g.unflatten(flat, &mut idx);
        let mut pflat = 0usize;
        for a in 0..n {
            pflat = pflat * padded[a] + (idx[a] + offsets[a]);
        }
        out.push(data[pflat].re * norm);
    }
    let mut result = GridFunction::new(g.clone(), out)?;
    if let Some(r) = u.support_radius() {
        // -Delta u vanishes wherever u vanishes on a neighborhood, so the
        // support bound carries over; zeroing the exterior also removes the
        // faint periodization ringing the padded transform leaves there.
        for flat in 0..g.len() {
            if g.node_radius(flat) >= r {
                result.values_mut()[flat] = 0.0;
            }
        }
        result.set_support_radius(r)?;
    }
    Ok(result)
}

fn neg_laplacian_sine(u: &GridFunction) -> Result<GridFunction> {
    let grid = u.grid().clone();
    let j = (0..grid.n())
        .map(|a| grid.points(a) / 2)
        .min()
        .expect("grid has at least one axis");
    let basis = Arc::new(crate::navier::SineBasis::new(grid.domain().clone(), j)?);
    let c = crate::navier::expand(u, &basis)?;
    let scaled: Vec<f64> = basis
        .eigenvalues()
        .iter()
        .zip(c.coeffs())
        .map(|(&lam, &cj)| lam * cj)
        .collect();
    crate::navier::reconstruct(
        &crate::navier::SpectralCoeffs::new(basis, scaled)?,
        &grid,
    )
}

/// Nonzero-support bounding box of a grid function, with coordinates, used
/// to evaluate the transform at arbitrary frequencies at a cost set by the
/// support size rather than the padded lattice.
struct Support {
    dims: Vec<usize>,
    coords: Vec<Vec<f64>>,
    vals: Vec<f64>,
}

impl Support {
    fn of(u: &GridFunction) -> Support {
        let g = u.grid();
        let n = g.n();
        let mut lo = vec![usize::MAX; n];
        let mut hi = vec![0usize; n];
        let mut idx = vec![0usize; n];
        for flat in 0..g.len() {
            if u.values()[flat] != 0.0 {
                g.unflatten(flat, &mut idx);
                for a in 0..n {
                    lo[a] = lo[a].min(idx[a]);
                    hi[a] = hi[a].max(idx[a]);
                }
            }
        }
        if lo[0] == usize::MAX {
            // Identically zero: keep a single node so downstream loops work.
            lo = vec![0; n];
            hi = vec![0; n];
        }
        let dims: Vec<usize> = (0..n).map(|a| hi[a] - lo[a] + 1).collect();
        let coords: Vec<Vec<f64>> = (0..n)
            .map(|a| (lo[a]..=hi[a]).map(|i| g.coord(a, i)).collect())
            .collect();
        let total: usize = dims.iter().product();
        let mut vals = vec![0.0; total];
        for (bflat, v) in vals.iter_mut().enumerate() {
            let mut rem = bflat;
            for a in (0..n).rev() {
                idx[a] = rem % dims[a] + lo[a];
                rem /= dims[a];
            }
            let mut sflat = 0usize;
            for a in 0..n {
                sflat = sflat * g.points(a) + idx[a];
            }
            *v = u.values()[sflat];
        }
        Support { dims, coords, vals }
    }
}

/// Contract one axis of a lexicographic complex tensor with a (nodes x len)
/// matrix, replacing that axis by the node dimension.
fn contract_axis(
    data: &[Complex64],
    dims: &[usize],
    axis: usize,
    e: &[Complex64],
    nodes: usize,
) -> Vec<Complex64> {
    let len = dims[axis];
    let post: usize = dims[axis + 1..].iter().product();
    let pre: usize = dims[..axis].iter().product();
    let mut out = vec![Complex64::new(0.0, 0.0); pre * nodes * post];
    for p in 0..pre {
        for g in 0..nodes {
            let erow = &e[g * len..(g + 1) * len];
            let obase = (p * nodes + g) * post;
            let ibase = p * len * post;
            for q in 0..post {
                let mut acc = Complex64::new(0.0, 0.0);
                for (i, &w) in erow.iter().enumerate() {
                    acc += data[ibase + i * post + q] * w;
                }
                out[obase + q] = acc;
            }
        }
    }
    out
}

/// Evaluate the continuous-transform approximation S(xi) (or its derivative
/// along `deriv_axis`) on a tensor grid of frequency nodes, by successive
/// contraction of exp(-i xi x) factors over the support of u.
fn nudft_tensor(
    sup: &Support,
    nodes: &[Vec<f64>],
    scale: f64,
    deriv_axis: Option<usize>,
) -> Vec<Complex64> {
    let n = sup.dims.len();
    let mut dims = sup.dims.clone();
    let mut data: Vec<Complex64> = sup
        .vals
        .iter()
        .map(|&v| Complex64::new(v, 0.0))
        .collect();
    for axis in 0..n {
        let xs = &sup.coords[axis];
        let g = nodes[axis].len();
        let mut e = Vec::with_capacity(g * xs.len());
        for &xi in &nodes[axis] {
            for &x in xs {
                let ph = -xi * x;
                let mut w = Complex64::new(ph.cos(), ph.sin());
                if deriv_axis == Some(axis) {
                    // d/dxi of exp(-i xi x) brings down -i x.
                    w *= Complex64::new(0.0, -x);
                }
                e.push(w);
            }
        }
        data = contract_axis(&data, &dims, axis, &e, g);
        dims[axis] = g;
    }
    for a in data.iter_mut() {
        *a *= scale;
    }
    data
}

/// Per-axis quadrature panels: each panel is a (nodes, weights) pair. Cells
/// touching the frequency origin are split there so the |xi|^{2m} cusp sits
/// at a panel endpoint, where Gauss-Legendre still converges fast.
fn cell_panels(k: i64, step: f64) -> Vec<([f64; 12], [f64; 12])> {
    let a = (k as f64 - 0.5) * step;
    let b = (k as f64 + 0.5) * step;
    if a < 0.0 && b > 0.0 {
        vec![gauss_legendre_12(a, 0.0), gauss_legendre_12(0.0, b)]
    } else {
        vec![gauss_legendre_12(a, b)]
    }
}

fn multi_indices(k0: i64, axes: usize) -> Vec<Vec<i64>> {
    let mut out = vec![vec![]];
    for _ in 0..axes {
        let mut next = Vec::with_capacity(out.len() * (2 * k0 as usize + 1));
        for base in &out {
            for k in -k0..=k0 {
                let mut v = base.clone();
                v.push(k);
                next.push(v);
            }
        }
        out = next;
    }
    out
}

/// Integral of |xi|^{2m} |S(xi)|^2 over the origin block, cell by cell.
fn block_integral(sup: &Support, m: f64, k0: i64, dxi: &[f64], scale: f64) -> f64 {
    let n = dxi.len();
    let cells = multi_indices(k0, n);
    let per_cell: Vec<f64> = cells
        .par_iter()
        .map(|cell| {
            let panel_lists: Vec<Vec<([f64; 12], [f64; 12])>> = (0..n)
                .map(|a| cell_panels(cell[a], dxi[a]))
                .collect();
            // Cartesian product over per-axis panel choices (2 only for
            // origin-straddling axes).
            let mut choice = vec![0usize; n];
            let mut acc = 0.0;
            loop {
                let nodes: Vec<Vec<f64>> = (0..n)
                    .map(|a| panel_lists[a][choice[a]].0.to_vec())
                    .collect();
                let weights: Vec<[f64; 12]> =
                    (0..n).map(|a| panel_lists[a][choice[a]].1).collect();
                let s = nudft_tensor(sup, &nodes, scale, None);
                // Tensor fold over the 12^n node tuples.
                let mut tuple = vec![0usize; n];
                loop {
                    let mut r2 = 0.0;
                    let mut w = 1.0;
                    let mut flat = 0usize;
                    for a in 0..n {
                        let xi = nodes[a][tuple[a]];
                        r2 += xi * xi;
                        w *= weights[a][tuple[a]];
                        flat = flat * 12 + tuple[a];
                    }
                    acc += w * r2.powf(m) * s[flat].norm_sqr();
                    let mut a = n;
                    let mut done = true;
                    while a > 0 {
                        a -= 1;
                        tuple[a] += 1;
                        if tuple[a] < 12 {
                            done = false;
                            break;
                        }
                        tuple[a] = 0;
                    }
                    if done {
                        break;
                    }
                }
                let mut a = n;
                let mut done = true;
                while a > 0 {
                    a -= 1;
                    choice[a] += 1;
                    if choice[a] < panel_lists[a].len() {
                        done = false;
                        break;
                    }
                    choice[a] = 0;
                }
                if done {
                    break;
                }
            }
            acc
        })
        .collect();
    pairwise_sum(&per_cell)
}

/// Midpoint-rule boundary correction on the block faces: for each axis the
/// lattice-sum error over the exterior region telescopes to the flux of
/// d/dxi_a of the integrand through the face pair at +/- (K0 + 1/2) * step;
/// by symmetry of real inputs the two faces contribute equally.
fn em_correction(sup: &Support, m: f64, k0: i64, dxi: &[f64], scale: f64) -> f64 {
    let n = dxi.len();
    let mut total = 0.0;
    for axis in 0..n {
        let b = (k0 as f64 + 0.5) * dxi[axis];
        let transverse: Vec<usize> = (0..n).filter(|&a| a != axis).collect();
        let cells = multi_indices(k0, transverse.len());
        let per_cell: Vec<f64> = cells
            .par_iter()
            .map(|cell| {
                let panel_lists: Vec<Vec<([f64; 12], [f64; 12])>> = transverse
                    .iter()
                    .enumerate()
                    .map(|(ti, &a)| cell_panels(cell[ti], dxi[a]))
                    .collect();
                let mut choice = vec![0usize; transverse.len()];
                let mut acc = 0.0;
                loop {
                    // Node lists per full axis: the face axis is pinned at b.
                    let mut nodes: Vec<Vec<f64>> = vec![Vec::new(); n];
                    let mut weights: Vec<Vec<f64>> = vec![Vec::new(); n];
                    nodes[axis] = vec![b];
                    weights[axis] = vec![1.0];
                    for (ti, &a) in transverse.iter().enumerate() {
                        let (xs, ws) = panel_lists[ti][choice[ti]];
                        nodes[a] = xs.to_vec();
                        weights[a] = ws.to_vec();
                    }
                    let s = nudft_tensor(sup, &nodes, scale, None);
                    let sa = nudft_tensor(sup, &nodes, scale, Some(axis));
                    let counts: Vec<usize> = (0..n).map(|a| nodes[a].len()).collect();
                    let mut tuple = vec![0usize; n];
                    loop {
                        let mut r2 = 0.0;
                        let mut w = 1.0;
                        let mut flat = 0usize;
                        for a in 0..n {
                            let xi = nodes[a][tuple[a]];
                            r2 += xi * xi;
                            w *= weights[a][tuple[a]];
                            flat = flat * counts[a] + tuple[a];
                        }
                        let ss = s[flat];
                        let dd = sa[flat];
                        let xi_a = nodes[axis][tuple[axis]];
                        let grad = 2.0 * m * xi_a * r2.powf(m - 1.0) * ss.norm_sqr()
                            + r2.powf(m) * 2.0 * (ss.conj() * dd).re;
                        acc += w * grad;
                        let mut a = n;
                        let mut done = true;
                        while a > 0 {
                            a -= 1;
                            tuple[a] += 1;
                            if tuple[a] < counts[a] {
                                done = false;
                                break;
                            }
                            tuple[a] = 0;
                        }
                        if done {
                            break;
                        }
                    }
                    if transverse.is_empty() {
                        break;
                    }
                    let mut t = transverse.len();
                    let mut done = true;
                    while t > 0 {
                        t -= 1;
                        choice[t] += 1;
                        if choice[t] < panel_lists[t].len() {
                            done = false;
                            break;
                        }
                        choice[t] = 0;
                    }
                    if done {
                        break;
                    }
                }
                acc
            })
            .collect();
        let face = pairwise_sum(&per_cell);
        total += dxi[axis] * dxi[axis] / 24.0 * 2.0 * face;
    }
    total
}

/// Order-m form with the exponent given directly. The FormOrder-typed entry
/// point below enforces the supported range; this one also accepts m = 0
/// and other nonnegative exponents, where the same quadrature applies and
/// the m = 0 value is the squared L2 norm.
pub fn q_dirichlet_raw(u: &GridFunction, m: f64, pad_factor: usize) -> Result<f64> {
    if !(m >= 0.0) || !m.is_finite() {
        return Err(Error::InvalidOrder(format!("exponent {m} must be >= 0")));
    }
    let spectrum = transform(u, pad_factor)?;
    let g = u.grid();
    let n = g.n();
    let dxi: Vec<f64> = (0..n).map(|a| spectrum.frequency_step(a)).collect();
    let freq_cell: f64 = dxi.iter().product();
    let padded: Vec<usize> = (0..n).map(|a| spectrum.padded_points(a)).collect();
    let amps = spectrum.amplitudes();

    // Integer exponents make |xi|^{2m} a polynomial, so the integrand is
    // smooth and rapidly decaying and the plain lattice sum is already
    // exact up to the Nyquist tail (the periodization error vanishes once
    // the padded period exceeds the support of the autocorrelation). The
    // block quadrature below exists only to handle the origin cusp of
    // fractional exponents, where it buys three to four digits.
    let integer_exponent = m == m.round();
    let k0 = if integer_exponent {
        -1
    } else {
        block_radius(n) as i64
    };

    let lattice = freq_cell
        * parallel_sum_indexed(amps.len(), |flat| {
            let mut rem = flat;
            let mut r2 = 0.0;
            let mut inside = true;
            for a in (0..n).rev() {
                let i = rem % padded[a];
                rem /= padded[a];
                let p = padded[a];
                let signed = if i < p / 2 { i as i64 } else { i as i64 - p as i64 };
                if signed.abs() > k0 {
                    inside = false;
                }
                let xi = signed as f64 * dxi[a];
                r2 += xi * xi;
            }
            if inside {
                0.0
            } else if r2 == 0.0 {
                // The zero mode carries weight only at m = 0.
                if m == 0.0 { amps[flat].norm_sqr() } else { 0.0 }
            } else {
                r2.powf(m) * amps[flat].norm_sqr()
            }
        });
    if integer_exponent {
        return Ok(lattice);
    }

    let sup = Support::of(u);
    let scale = (2.0 * PI).powf(-(n as f64) / 2.0) * g.cell_volume();
    let block = block_integral(&sup, m, k0, &dxi, scale);
    let em = em_correction(&sup, m, k0, &dxi, scale);
    Ok(lattice + block - em)
}

/// The unconstrained form of order m for a supported FormOrder.
pub fn q_dirichlet(u: &GridFunction, ord: &FormOrder, pad_factor: usize) -> Result<f64> {
    q_dirichlet_raw(u, ord.m(), pad_factor)
}

/// Like q_dirichlet, but verifies padding convergence by doubling the pad
/// factor: a relative change above 0.1% means the box images still interact
/// and the value cannot be trusted. Returns the doubled-pad value.
pub fn q_dirichlet_checked(u: &GridFunction, ord: &FormOrder, pad_factor: usize) -> Result<f64> {
    let v1 = q_dirichlet_raw(u, ord.m(), pad_factor)?;
    let v2 = q_dirichlet_raw(u, ord.m(), 2 * pad_factor)?;
    let rel = (v2 - v1).abs() / v2.abs().max(1e-300);
    if rel > 1e-3 {
        return Err(Error::ConvergenceNotReached(format!(
            "value moved by {rel:.2e} relative when the padding doubled"
        )));
    }
    Ok(v2)
}

/// Evaluate both sides of the scaling law Q[u(./t)] = t^{n-2m} Q[u].
/// Returns (lhs, rhs); lhs reruns the full quadrature on the dilated
/// function, rhs rescales the original value analytically.
pub fn dilation_check(
    u: &GridFunction,
    ord: &FormOrder,
    t: f64,
    pad_factor: usize,
) -> Result<(f64, f64)> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(Error::Precondition("dilation factor must be positive".into()));
    }
    let scaled = u.dilate_metadata(t)?;
    let lhs = q_dirichlet(&scaled, ord, pad_factor)?;
    let base = q_dirichlet(u, ord, pad_factor)?;
    let n = u.grid().n() as f64;
    let rhs = t.powf(n - 2.0 * ord.m()) * base;
    Ok((lhs, rhs))
}

/// Restrict a function to every other node per axis: same box, half the
/// resolution. Useful for convergence checks that need a genuinely
/// different discretization of the same function.
pub fn coarsen_by_two(u: &GridFunction) -> Result<GridFunction> {
    let g = u.grid();
    let n = g.n();
    for a in 0..n {
        if g.points(a) % 2 != 0 || g.points(a) / 2 < 8 {
            return Err(Error::Precondition(format!(
                "axis {a} cannot be halved below the minimum node count"
            )));
        }
    }
    let coarse = Arc::new(UniformGrid::new(
        g.domain().clone(),
        &(0..n).map(|a| g.points(a) / 2).collect::<Vec<_>>(),
    )?);
    let mut idx = vec![0usize; n];
    let mut vals = Vec::with_capacity(coarse.len());
    for flat in 0..coarse.len() {
        coarse.unflatten(flat, &mut idx);
        let mut sflat = 0usize;
        for a in 0..n {
            sflat = sflat * g.points(a) + 2 * idx[a];
        }
        vals.push(u.values()[sflat]);
    }
    let mut out = GridFunction::new(coarse, vals)?;
    if let Some(r) = u.support_radius() {
        out.set_support_radius(r)?;
    }
    Ok(out)
}
