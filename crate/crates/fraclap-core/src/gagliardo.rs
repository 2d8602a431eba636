//! Direct double-integral evaluation of the order-sigma seminorm.
//!
//! This is the independent second route to the fractional form: the double
//! integral of |u(x) - u(y)|^2 / |x-y|^{n+2s} over all pairs, computed in
//! physical space with no Fourier step. Its ratio to the frequency-side
//! value is a constant depending only on (n, s), which the test suite pins;
//! the two implementations share no quadrature machinery.
//!
//! Within each grid cell u is modeled as linear, value plus centered
//! gradient. A piecewise-constant model is not enough: its second-moment
//! defect against the singular kernel accumulates to the same order as the
//! whole near-diagonal band, stalling convergence at Delta^{2-2s}. With the
//! linear model the pair integral over two cells at lag l expands into
//! kernel moments (mass, first moment, second moments) times value and
//! gradient sums, and the error drops to second order plus a
//! Delta^{3-2s} remainder from the touching band.
//!
//! Band layout, by Chebyshev distance of the cell lag:
//!
//! * far lags: moments from the midpoint kernel value with fourth-moment
//!   (variance) corrections;
//! * mid lags (2 <= |l|_inf <= 4): exact tent-weighted kernel moments,
//!   Gauss-Legendre in the pair displacement, panels split at the tent
//!   kinks (in one dimension the mass uses a closed-form second difference
//!   of the kernel's double antiderivative instead);
//! * touching and overlapping cells (lag entries all in {-1,0,1}): a value
//!   jump between adjacent cells carries infinite energy once 2s >= 1, so
//!   these pairs use the gradient model |u(x)-u(y)| ~ |g . (x-y)| with
//!   second-moment tensors of the tent weight, which stay finite and are
//!   asymptotically exact;
//! * exterior tails: u vanishes outside the cell union, so each cell sees
//!   the ray integral of the kernel past the union boundary, reduced to an
//!   angular integral of (exit distance)^{-2s} / (2s).

use rayon::prelude::*;

use crate::domain::GridFunction;
use crate::error::{Error, Result};
use crate::numeric::{corner_dyadic_gl12, gauss_legendre_12, pairwise_sum, tensor_gl12};

/// Lag radius (in cells, per axis) beyond which the asymptotic moment
/// formulas replace exact tent-weighted quadrature.
const EXACT_LAG_RADIUS: i64 = 4;

/// Same cutoff for the one-dimensional path, where exact quadrature is
/// cheap enough to push a little further.
const EXACT_LAG_RADIUS_1D: i64 = 8;

/// Stable evaluation of (t^alpha - 1)/alpha as a function of L = ln t,
/// including the alpha -> 0 limit where it degenerates to L. Second
/// differences of this are second differences of t^alpha / alpha up to a
/// constant that cancels.
fn pow_ratio(alpha: f64, ln_t: f64) -> f64 {
    if alpha == 0.0 {
        ln_t
    } else {
        (alpha * ln_t).exp_m1() / alpha
    }
}

pub fn gagliardo_form(u: &GridFunction, sigma: f64) -> Result<f64> {
    if !(sigma > 0.0 && sigma < 1.0) {
        return Err(Error::Precondition(format!(
            "sigma {sigma} outside (0,1)"
        )));
    }
    if sigma <= 1e-3 || sigma >= 1.0 - 1e-3 {
        return Err(Error::IllConditioned(format!(
            "sigma {sigma} too close to the endpoints; the seminorm degenerates"
        )));
    }
    match u.grid().n() {
        1 => Ok(gagliardo_1d(u, sigma)),
        _ => Ok(gagliardo_nd(u, sigma)),
    }
}

/// Kernel moments for one ordered cell pair at lag l, in the pair
/// displacement variables: first moment of the source-cell offset, its
/// diagonal second moment, and the coupling defect p with mixed moment =
/// second moment - p. The mass itself comes from the caller's closed form.
struct LagMoments {
    first: f64,
    second: f64,
    coupling_defect: f64,
}

/// Exact moments at lag l >= 2 in one dimension. The kernel is smooth on
/// the tent support, so two Gauss-Legendre panels split at the kink give
/// near machine precision. The mass is handled by the caller in closed
/// form and is not computed here.
fn lag_moments_exact_1d(l: i64, dx: f64, s: f64) -> LagMoments {
    let mut first = 0.0;
    let mut second = 0.0;
    let mut p = 0.0;
    for half in 0..2 {
        let (a, b) = if half == 0 { (-dx, 0.0) } else { (0.0, dx) };
        let (xs, ws) = gauss_legendre_12(a, b);
        for q in 0..12 {
            let tau = xs[q];
            let w = ws[q];
            let tent = dx - tau.abs();
            let kern = (l as f64 * dx + tau).powf(-1.0 - 2.0 * s);
            first += w * (-0.5 * tau) * tent * kern;
            second += w * tent * (0.25 * tau * tau + tent * tent / 12.0) * kern;
            p += w * 0.5 * tau * tau * tent * kern;
        }
    }
    LagMoments { first, second, coupling_defect: p }
}

/// Asymptotic moments for a far lag in one dimension; relative defect
/// O(1/l^2) on corrections that are already second order.
fn lag_moments_far_1d(l: i64, dx: f64, s: f64) -> LagMoments {
    let t = l as f64 * dx;
    let kern = t.powf(-1.0 - 2.0 * s);
    let dkern = -(1.0 + 2.0 * s) * t.powf(-2.0 - 2.0 * s);
    let m = dx.powi(4) / 12.0;
    LagMoments {
        first: -dkern * m,
        second: kern * m,
        coupling_defect: kern * m,
    }
}

fn gagliardo_1d(u: &GridFunction, s: f64) -> f64 {
    let g = u.grid();
    let nn = g.points(0);
    let dx = g.spacing(0);
    let h = g.domain().half_width(0);
    let v = u.values();
    let alpha = 1.0 - 2.0 * s;

    // Centered gradient, zero beyond the grid (u vanishes there).
    let mut grad = vec![0.0; nn];
    for i in 0..nn {
        let left = if i > 0 { v[i - 1] } else { 0.0 };
        let right = if i + 1 < nn { v[i + 1] } else { 0.0 };
        grad[i] = (right - left) / (2.0 * dx);
    }

    // Double antiderivative of t^{-1-2s}, up to an affine part that cancels
    // in second differences; stable through s = 1/2.
    let anti = |t: f64| pow_ratio(alpha, t.ln()) / (-2.0 * s);

    // Lags of two cells or more: exact kernel mass per lag (second
    // difference of the double antiderivative), plus the linear-model
    // moment corrections; all doubled for ordered pairs.
    let lag_terms: Vec<f64> = (2..nn as i64)
        .into_par_iter()
        .map(|l| {
            let lf = l as f64;
            let mass = anti((lf + 1.0) * dx) - 2.0 * anti(lf * dx) + anti((lf - 1.0) * dx);
            let mom = if l <= EXACT_LAG_RADIUS_1D {
                lag_moments_exact_1d(l, dx, s)
            } else {
                lag_moments_far_1d(l, dx, s)
            };
            let lu = l as usize;
            let mut a = 0.0;
            let mut b = 0.0;
            let mut c = 0.0;
            let mut d = 0.0;
            for i in 0..nn - lu {
                let diff = v[i] - v[i + lu];
                let gi = grad[i];
                let gj = grad[i + lu];
                a += diff * diff;
                b += diff * (gi + gj);
                c += gi * gi + gj * gj;
                d += gi * gj;
            }
            let mixed = mom.second - mom.coupling_defect;
            mass * a + 2.0 * mom.first * b + mom.second * c - 2.0 * mixed * d
        })
        .collect();
    let pairs = 2.0 * pairwise_sum(&lag_terms);

    // Adjacent cells: the continuous piecewise-linear interpolant has slope
    // d_i across the pair, and the tent-weighted second moment of the
    // kernel at lag one is finite for every s in (0,1).
    let e2 = 2.0 - 2.0 * s;
    let e3 = 3.0 - 2.0 * s;
    let j1 = dx.powf(e3)
        * (1.0 / e3 + 2.0 * (2f64.powf(e2) - 1.0) / e2 - (2f64.powf(e3) - 1.0) / e3);
    let mut adj = 0.0;
    for i in 0..nn - 1 {
        let d = (v[i + 1] - v[i]) / dx;
        adj += d * d;
    }
    let adjacent = 2.0 * j1 * adj;

    // Same-cell pairs: |u(x)-u(y)| ~ |u'(x_i)| |x-y| integrated exactly.
    let d0 = 2.0 * dx.powf(e3) / (e2 * e3);
    let mut diag = 0.0;
    for gi in &grad {
        diag += gi * gi;
    }
    let diagonal = d0 * diag;

    // Pairs with one point outside the cell union [-h - dx/2, h - dx/2]:
    // there u = 0 and the inner ray integral has a closed form.
    let lo = -h - 0.5 * dx;
    let hi = h - 0.5 * dx;
    let mut tail = 0.0;
    for i in 0..nn {
        let x = g.coord(0, i);
        tail += v[i] * v[i] * ((hi - x).powf(-2.0 * s) + (x - lo).powf(-2.0 * s));
    }
    let tails = 2.0 * dx / (2.0 * s) * tail;

    pairs + adjacent + diagonal + tails
}

/// Tent weight of one axis at lag l: the overlap length of a cell with its
/// lag-shifted copy as a function of the pair displacement t.
fn tent(t: f64, l: i64, dx: f64) -> f64 {
    (dx - (t - l as f64 * dx).abs()).max(0.0)
}

/// Exact kernel moment over a near lag (all entries in {-1,0,1}):
/// integral of prod_a tent(t_a) * t_mom * |t|^{-n-2s}, where t_mom is 1 or
/// t_a t_c. Splits the tent support at kinks and the origin, peeling
/// singular corner boxes dyadically.
fn near_moment(l: &[i64], dxs: &[f64], beta: f64, mom: Option<(usize, usize)>) -> f64 {
    let n = l.len();
    let intervals: Vec<Vec<(f64, f64)>> = (0..n)
        .map(|a| {
            let d = dxs[a];
            match l[a] {
                0 => vec![(-d, 0.0), (0.0, d)],
                1 => vec![(0.0, d), (d, 2.0 * d)],
                -1 => vec![(-2.0 * d, -d), (-d, 0.0)],
                _ => unreachable!("near moments only exist for unit lags"),
            }
        })
        .collect();
    let f = |p: &[f64]| {
        let mut w = 1.0;
        let mut r2 = 0.0;
        for a in 0..n {
            w *= tent(p[a], l[a], dxs[a]);
            r2 += p[a] * p[a];
        }
        let m = match mom {
            Some((a, c)) => p[a] * p[c],
            None => 1.0,
        };
        w * m * r2.powf(-beta / 2.0)
    };
    let mut choice = vec![0usize; n];
    let mut total = 0.0;
    loop {
        let mut lo = vec![0.0; n];
        let mut hi = vec![0.0; n];
        let mut singular = true;
        for a in 0..n {
            let (s, e) = intervals[a][choice[a]];
            lo[a] = s;
            hi[a] = e;
            if s != 0.0 && e != 0.0 {
                singular = false;
            }
        }
        total += if singular {
            corner_dyadic_gl12(&lo, &hi, &f)
        } else {
            tensor_gl12(&lo, &hi, f)
        };
        let mut a = n;
        let mut done = true;
        while a > 0 {
            a -= 1;
            choice[a] += 1;
            if choice[a] < intervals[a].len() {
                done = false;
                break;
            }
            choice[a] = 0;
        }
        if done {
            return total;
        }
    }
}

/// Exact tent-weighted moments for a mid-range lag in n dimensions: mass,
/// per-axis first moments, per-axis diagonal second moments, and per-axis
/// coupling defects. One tensor Gauss-Legendre sweep over the tent box,
/// two panels per axis split at the kink; the kernel is smooth here.
/// Cross-axis second moments are dropped: their leading term rides on the
/// kernel's mixed second derivatives and is fourth order in the spacing.
fn mid_moments(l: &[i64], dxs: &[f64], beta: f64) -> (f64, Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = l.len();
    let mut mass = 0.0;
    let mut first = vec![0.0; n];
    let mut second = vec![0.0; n];
    let mut defect = vec![0.0; n];
    // Per-axis rules for the two panels split at the kink.
    let neg: Vec<([f64; 12], [f64; 12])> =
        (0..n).map(|a| gauss_legendre_12(-dxs[a], 0.0)).collect();
    let pos: Vec<([f64; 12], [f64; 12])> =
        (0..n).map(|a| gauss_legendre_12(0.0, dxs[a])).collect();
    // Odometer over 2^n panels and 12^n points per panel.
    let panels = 1usize << n;
    let npts = 12usize;
    let mut total_pts = 1usize;
    for _ in 0..n {
        total_pts *= npts;
    }
    let mut tau = vec![0.0; n];
    let mut w0 = vec![0.0; n];
    for panel in 0..panels {
        for flat in 0..total_pts {
            let mut rem = flat;
            let mut weight = 1.0;
            let mut r2 = 0.0;
            for a in (0..n).rev() {
                let q = rem % npts;
                rem /= npts;
                let rule = if panel >> a & 1 == 0 { &neg[a] } else { &pos[a] };
                tau[a] = rule.0[q];
                weight *= rule.1[q];
                w0[a] = dxs[a] - tau[a].abs();
                let t = l[a] as f64 * dxs[a] + tau[a];
                r2 += t * t;
            }
            let kern = r2.powf(-beta / 2.0);
            let tent_all: f64 = w0.iter().product();
            let wk = weight * kern;
            mass += wk * tent_all;
            for a in 0..n {
                // Swap one tent factor for the moment weight on axis a.
                let rest = tent_all / w0[a];
                let ta = tau[a];
                first[a] += wk * rest * (-0.5 * ta) * w0[a];
                second[a] += wk * rest * w0[a] * (0.25 * ta * ta + w0[a] * w0[a] / 12.0);
                defect[a] += wk * rest * 0.5 * ta * ta * w0[a];
            }
        }
    }
    (mass, first, second, defect)
}

/// Midpoint moments for a far lag, with the tent variance correction on
/// the mass; the coupling defect cancels the diagonal second moment at
/// this order, so the mixed moment is zero.
fn far_moments(l: &[i64], dxs: &[f64], beta: f64) -> (f64, Vec<f64>, Vec<f64>) {
    let n = l.len();
    let cell: f64 = dxs.iter().product();
    let cc = cell * cell;
    let mut r2 = 0.0;
    let mut y = vec![0.0; n];
    for a in 0..n {
        y[a] = l[a] as f64 * dxs[a];
        r2 += y[a] * y[a];
    }
    let kern = r2.powf(-beta / 2.0);
    let mut mass = kern;
    let mut first = vec![0.0; n];
    let mut second = vec![0.0; n];
    for a in 0..n {
        let d2 = beta * (beta + 2.0) * y[a] * y[a] * r2.powf(-beta / 2.0 - 2.0)
            - beta * r2.powf(-beta / 2.0 - 1.0);
        mass += dxs[a] * dxs[a] / 12.0 * d2;
        let d1 = -beta * y[a] * r2.powf(-beta / 2.0 - 1.0);
        first[a] = -d1 * dxs[a] * dxs[a] / 12.0 * cc;
        second[a] = kern * dxs[a] * dxs[a] / 12.0 * cc;
    }
    (mass * cc, first, second)
}

/// Exit distance from x along dir to the boundary of the box [lo, hi].
fn exit_distance(x: &[f64], dir: &[f64], lo: &[f64], hi: &[f64]) -> f64 {
    let mut t = f64::INFINITY;
    for a in 0..x.len() {
        if dir[a] > 1e-300 {
            t = t.min((hi[a] - x[a]) / dir[a]);
        } else if dir[a] < -1e-300 {
            t = t.min((lo[a] - x[a]) / dir[a]);
        }
    }
    t
}

/// Angular integral of (exit distance)^{-2s} over the unit sphere, from a
/// point inside the box.
fn angular_tail(x: &[f64], lo: &[f64], hi: &[f64], s: f64) -> f64 {
    match x.len() {
        2 => {
            // Arc decomposition at the corner directions keeps the
            // integrand smooth on every panel.
            let corners = [
                (lo[0], lo[1]),
                (hi[0], lo[1]),
                (hi[0], hi[1]),
                (lo[0], hi[1]),
            ];
            let mut angles: Vec<f64> = corners
                .iter()
                .map(|&(cx, cy)| (cy - x[1]).atan2(cx - x[0]))
                .collect();
            angles.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let mut total = 0.0;
            for i in 0..4 {
                let a = angles[i];
                let b = if i == 3 {
                    angles[0] + 2.0 * std::f64::consts::PI
                } else {
                    angles[i + 1]
                };
                total += tensor_gl12(&[a], &[b], |p| {
                    let dir = [p[0].cos(), p[0].sin()];
                    exit_distance(x, &dir, lo, hi).powf(-2.0 * s)
                });
            }
            total
        }
        3 => {
            // Product rule: Gauss-Legendre panels in the polar cosine,
            // midpoint in azimuth (periodic, so midpoint converges fast).
            const MU_PANELS: usize = 16;
            const AZIMUTH: usize = 192;
            let dpsi = 2.0 * std::f64::consts::PI / AZIMUTH as f64;
            let mut total = 0.0;
            for p in 0..MU_PANELS {
                let a = -1.0 + 2.0 * p as f64 / MU_PANELS as f64;
                let b = -1.0 + 2.0 * (p + 1) as f64 / MU_PANELS as f64;
                total += tensor_gl12(&[a], &[b], |mu| {
                    let rho = (1.0 - mu[0] * mu[0]).max(0.0).sqrt();
                    let mut acc = 0.0;
                    for k in 0..AZIMUTH {
                        let psi = (k as f64 + 0.5) * dpsi;
                        let dir = [rho * psi.cos(), rho * psi.sin(), mu[0]];
                        acc += exit_distance(x, &dir, lo, hi).powf(-2.0 * s);
                    }
                    acc * dpsi
                });
            }
            total
        }
        _ => unreachable!("angular tails are only needed for two or three dimensions"),
    }
}

fn gagliardo_nd(u: &GridFunction, s: f64) -> f64 {
    let g = u.grid();
    let n = g.n();
    let dims: Vec<usize> = (0..n).map(|a| g.points(a)).collect();
    let dxs: Vec<f64> = (0..n).map(|a| g.spacing(a)).collect();
    let beta = n as f64 + 2.0 * s;
    let v = u.values();
    let total_nodes = g.len();

    // Centered gradient per axis, with zero beyond the grid.
    let mut grads: Vec<Vec<f64>> = vec![vec![0.0; total_nodes]; n];
    {
        let mut idx = vec![0usize; n];
        for flat in 0..total_nodes {
            g.unflatten(flat, &mut idx);
            for a in 0..n {
                let post: usize = dims[a + 1..].iter().product();
                let left = if idx[a] > 0 { v[flat - post] } else { 0.0 };
                let right = if idx[a] + 1 < dims[a] { v[flat + post] } else { 0.0 };
                grads[a][flat] = (right - left) / (2.0 * dxs[a]);
            }
        }
    }

    // Enumerate all lags; lexicographically positive ones stand for both
    // orders of each pair.
    let mut lags: Vec<Vec<i64>> = vec![vec![]];
    for a in 0..n {
        let r = dims[a] as i64 - 1;
        let mut next = Vec::new();
        for base in &lags {
            for l in -r..=r {
                let mut w = base.clone();
                w.push(l);
                next.push(w);
            }
        }
        lags = next;
    }
    let lex_positive = |l: &[i64]| -> bool {
        for &c in l {
            if c > 0 {
                return true;
            }
            if c < 0 {
                return false;
            }
        }
        false
    };

    // Per-lag sums over the overlap range: value difference squared, the
    // difference against the gradient sum per axis, gradient squares, and
    // gradient products. f receives the flat indices of both cells.
    struct LagSums {
        val2: f64,
        val_grad: Vec<f64>,
        grad2: Vec<f64>,
        grad_prod: Vec<f64>,
    }
    let lag_sums = |l: &[i64]| -> Option<LagSums> {
        let mut lo = vec![0usize; n];
        let mut hi = vec![0usize; n]; // exclusive
        for a in 0..n {
            lo[a] = (-l[a]).max(0) as usize;
            let top = dims[a] as i64 - l[a].max(0);
            if top <= lo[a] as i64 {
                return None;
            }
            hi[a] = top as usize;
        }
        let mut sums = LagSums {
            val2: 0.0,
            val_grad: vec![0.0; n],
            grad2: vec![0.0; n],
            grad_prod: vec![0.0; n],
        };
        let mut idx = lo.clone();
        loop {
            let mut i = 0usize;
            let mut j = 0usize;
            for a in 0..n {
                i = i * dims[a] + idx[a];
                j = j * dims[a] + (idx[a] as i64 + l[a]) as usize;
            }
            let diff = v[i] - v[j];
            sums.val2 += diff * diff;
            for a in 0..n {
                let gi = grads[a][i];
                let gj = grads[a][j];
                sums.val_grad[a] += diff * (gi + gj);
                sums.grad2[a] += gi * gi + gj * gj;
                sums.grad_prod[a] += gi * gj;
            }
            let mut a = n;
            let mut done = true;
            while a > 0 {
                a -= 1;
                idx[a] += 1;
                if idx[a] < hi[a] {
                    done = false;
                    break;
                }
                idx[a] = lo[a];
            }
            if done {
                return Some(sums);
            }
        }
    };

    let lag_terms: Vec<f64> = lags
        .par_iter()
        .map(|l| {
            let linf = l.iter().map(|c| c.abs()).max().unwrap_or(0);
            if linf == 0 {
                // Same-cell pairs: gradient model, cross moments vanish by
                // symmetry of the centered tent.
                let mut acc = 0.0;
                for a in 0..n {
                    let t = near_moment(l, &dxs, beta, Some((a, a)));
                    let ga = &grads[a];
                    let mut q = 0.0;
                    for gi in ga {
                        q += gi * gi;
                    }
                    acc += t * q;
                }
                acc
            } else if !lex_positive(l) {
                0.0
            } else if linf <= 1 {
                // Touching cells: full quadratic gradient form.
                let mut acc = 0.0;
                for a in 0..n {
                    for c in a..n {
                        let t = near_moment(l, &dxs, beta, Some((a, c)));
                        let factor = if a == c { 1.0 } else { 2.0 };
                        let q = lag_pair_quarter(&grads, l, a, c, &dims, n);
                        acc += factor * t * q;
                    }
                }
                2.0 * acc
            } else {
                let sums = match lag_sums(l) {
                    Some(s) => s,
                    None => return 0.0,
                };
                let term = if linf <= EXACT_LAG_RADIUS {
                    let (mass, first, second, defect) = mid_moments(l, &dxs, beta);
                    let mut t = mass * sums.val2;
                    for a in 0..n {
                        let mixed = second[a] - defect[a];
                        t += 2.0 * first[a] * sums.val_grad[a] + second[a] * sums.grad2[a]
                            - 2.0 * mixed * sums.grad_prod[a];
                    }
                    t
                } else {
                    let (mass, first, second) = far_moments(l, &dxs, beta);
                    let mut t = mass * sums.val2;
                    for a in 0..n {
                        t += 2.0 * first[a] * sums.val_grad[a] + second[a] * sums.grad2[a];
                    }
                    t
                };
                2.0 * term
            }
        })
        .collect();
    let interior = pairwise_sum(&lag_terms);

    // Exterior tails: cell union per axis is [-h - dx/2, h - dx/2].
    let lo: Vec<f64> = (0..n)
        .map(|a| -g.domain().half_width(a) - 0.5 * dxs[a])
        .collect();
    let hi: Vec<f64> = (0..n)
        .map(|a| g.domain().half_width(a) - 0.5 * dxs[a])
        .collect();
    let cell: f64 = dxs.iter().product();
    let tail_terms: Vec<f64> = (0..total_nodes)
        .into_par_iter()
        .map(|flat| {
            if v[flat] == 0.0 {
                return 0.0;
            }
            let x = g.node_coords(flat);
            v[flat] * v[flat] * angular_tail(&x, &lo, &hi, s)
        })
        .collect();
    let tails = 2.0 * cell / (2.0 * s) * pairwise_sum(&tail_terms);

    interior + tails
}

/// Sum of the averaged-gradient products over the overlap range of lag l:
/// sum over pairs of (g_a(i)+g_a(j))/2 * (g_c(i)+g_c(j))/2.
fn lag_pair_quarter(
    grads: &[Vec<f64>],
    l: &[i64],
    a: usize,
    c: usize,
    dims: &[usize],
    n: usize,
) -> f64 {
    let mut lo = vec![0usize; n];
    let mut hi = vec![0usize; n];
    for e in 0..n {
        lo[e] = (-l[e]).max(0) as usize;
        let top = dims[e] as i64 - l[e].max(0);
        if top <= lo[e] as i64 {
            return 0.0;
        }
        hi[e] = top as usize;
    }
    let mut idx = lo.clone();
    let mut acc = 0.0;
    loop {
        let mut i = 0usize;
        let mut j = 0usize;
        for e in 0..n {
            i = i * dims[e] + idx[e];
            j = j * dims[e] + (idx[e] as i64 + l[e]) as usize;
        }
        let da = 0.5 * (grads[a][i] + grads[a][j]);
        let dc = 0.5 * (grads[c][i] + grads[c][j]);
        acc += da * dc;
        let mut e = n;
        let mut done = true;
        while e > 0 {
            e -= 1;
            idx[e] += 1;
            if idx[e] < hi[e] {
                done = false;
                break;
            }
            idx[e] = lo[e];
        }
        if done {
            return acc;
        }
    }
}
