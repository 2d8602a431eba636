//! Weighted half-plane extensions of one-dimensional data.
//!
//! A function g on the interval extends to the upper half plane as the
//! solution of div(y^{1-2s} grad w) = 0, and the energy of that extension,
//! integral of y^{1-2s} |grad w|^2, measures a fractional seminorm of g up
//! to a constant c2(s). This module evaluates the extension two ways: by
//! quadrature of the explicit Poisson kernels on a truncated, graded mesh
//! (`poisson_direct`, `poisson_dual`), and by solving the discrete weighted
//! Laplace problem on the finite cylinder over the box with lateral zero
//! boundary (`cylinder_navier`, `cylinder_navier_dual`). The constant c2 is
//! not hardcoded anywhere; `calibrate_c2` pins it by comparing the extension
//! energy against the Fourier-side form on witness functions and demands
//! that the ratio be reproducible across witnesses.
//!
//! Everything here is one-dimensional in x. The cylinder problems are then
//! two-dimensional solves at desk scale, and they serve as an independent
//! route to the same quadratic forms the spectral modules compute, which is
//! what makes the cross-checks in the tests meaningful.
//!
//! Determinism: kernel quadratures parallelize over target nodes with each
//! target evaluated by a fixed sequential panel recursion, sums are pairwise
//! with a fixed shape, and the linear solver is single-threaded, so results
//! are bit-identical across thread counts.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::sync::Arc;

use rayon::prelude::*;
use statrs::function::gamma::gamma;

use crate::domain::{l1_norm, GridFunction, UniformGrid};
use crate::error::{Error, Result};
use crate::fourier::{laplacian_power_k, q_dirichlet, FormOrder, Parity, DEFAULT_PAD};
use crate::numeric::{gauss_legendre_12, pairwise_sum, parallel_sum, solve_tridiagonal};

/// Growth ratio of the horizontal cell widths outside the box. Geometric
/// padding reaches ten box diameters in a few dozen nodes while keeping the
/// first padded cells comparable to the interior spacing.
const PAD_RATIO: f64 = 1.15;

/// A quadrature panel is accepted once its length is at most this multiple
/// of its distance to the kernel's peak; 12-point Gauss-Legendre on such a
/// panel resolves the kernel to ~1e-9 relative.
const PANEL_THETA: f64 = 2.0;

/// Bisection depth cap for the panel recursion. Hitting it means the target
/// sits closer to the source than 2^-40 of a cell, i.e. the mesh grading is
/// pathologically steep for the requested height.
const MAX_PANEL_DEPTH: u32 = 40;

/// Orders this close to 1/2 take the logarithmic dual kernel; the power
/// kernel's normalization degenerates like 1/(1-2s) there.
const LOG_BRANCH_TOL: f64 = 1e-12;

/// Vertical cell count of the meshes built internally by `calibrate_c2`.
const CAL_Y_CELLS: usize = 64;

/// Relative residual target of the conjugate gradient solver.
const PCG_TOL: f64 = 1e-10;

/// Iteration cap of the conjugate gradient solver.
const PCG_MAX_ITERS: usize = 50_000;

/// Energy fraction in the outermost octave of x or y beyond which the
/// truncated-cylinder value is reported as unreliable.
const TAIL_FRACTION: f64 = 0.01;

/// Truncated upper half plane discretization: uniform x nodes over the box,
/// geometrically padded x nodes out to ten box diameters on both sides, and
/// a graded vertical axis y_i = Y (i/M)^gamma that concentrates nodes in the
/// y^{2s} boundary layer at the trace.
#[derive(Debug, Clone)]
pub struct CylinderGrid {
    x_nodes: Vec<f64>,
    y_nodes: Vec<f64>,
    core_lo: usize,
    core_hi: usize,
    sigma: f64,
    grading: f64,
    omega_half_width: f64,
    omega_points: usize,
}

impl CylinderGrid {
    /// Mesh with the default grading exponent max(2, 3/(2 sigma)) and height
    /// ten box diameters. The exponent is chosen so the piecewise-linear
    /// energy error of the y^{2 sigma} trace layer in the first cell decays
    /// like the cube of the vertical cell count.
    pub fn graded(omega: &UniformGrid, sigma: f64, y_cells: usize) -> Result<Self> {
        let grading = (3.0 / (2.0 * sigma)).max(2.0);
        let height = 10.0 * omega.domain().diameter();
        Self::custom(omega, sigma, y_cells, grading, height)
    }

    /// Mesh with explicit grading exponent and height. The height must be at
    /// least ten box diameters; below that the truncated tails of the
    /// half-plane energies are not negligible against the percent-level
    /// budgets the identities are checked to.
    pub fn custom(
        omega: &UniformGrid,
        sigma: f64,
        y_cells: usize,
        grading: f64,
        height: f64,
    ) -> Result<Self> {
        if omega.n() != 1 {
            return Err(Error::Precondition(format!(
                "the half-plane extension is built over an interval; got a base grid with n = {}",
                omega.n()
            )));
        }
        if !(sigma > 0.0 && sigma < 1.0) {
            return Err(Error::InvalidOrder(format!("sigma = {sigma} not in (0, 1)")));
        }
        if y_cells < 8 {
            return Err(Error::Precondition(format!(
                "need at least 8 vertical cells, got {y_cells}"
            )));
        }
        if !(grading.is_finite() && grading >= 1.0) {
            return Err(Error::Precondition(format!(
                "grading exponent {grading} must be finite and at least 1"
            )));
        }
        let diam = omega.domain().diameter();
        if !(height >= 10.0 * diam * (1.0 - 1e-12)) {
            return Err(Error::Precondition(format!(
                "cylinder height {height} is below ten box diameters = {}",
                10.0 * diam
            )));
        }
        let h = omega.domain().half_width(0);
        let np = omega.points(0);
        let dx = omega.spacing(0);

        // Closed core: the box nodes plus the right endpoint +h, so the
        // interval is covered by cells with both ends present.
        let mut core: Vec<f64> = (0..np).map(|i| omega.coord(0, i)).collect();
        core.push(h);

        // Geometric padding from +h out to ten diameters; the last step is
        // snapped to the extent rather than leaving a sliver cell.
        let extent = 10.0 * diam;
        let mut right: Vec<f64> = Vec::new();
        let mut x = h;
        let mut step = dx;
        loop {
            step *= PAD_RATIO;
            x += step;
            if x >= extent - 0.5 * step {
                right.push(extent);
                break;
            }
            right.push(x);
        }

        let mut x_nodes: Vec<f64> = right.iter().rev().map(|&v| -v).collect();
        let core_lo = x_nodes.len();
        x_nodes.extend_from_slice(&core);
        let core_hi = x_nodes.len() - 1;
        x_nodes.extend_from_slice(&right);

        let y_nodes: Vec<f64> = (0..=y_cells)
            .map(|i| height * ((i as f64) / (y_cells as f64)).powf(grading))
            .collect();

        Ok(CylinderGrid {
            x_nodes,
            y_nodes,
            core_lo,
            core_hi,
            sigma,
            grading,
            omega_half_width: h,
            omega_points: np,
        })
    }

    /// Same footprint with doubled vertical resolution. The graded nodes
    /// nest exactly: (i/M)^gamma = (2i/2M)^gamma in floating point as well,
    /// so every coarse node is a fine node and refinement arguments about
    /// nested trial spaces hold without interpolation error.
    pub fn refine_y(&self) -> Self {
        let m = 2 * (self.y_nodes.len() - 1);
        let height = *self.y_nodes.last().expect("grid has vertical nodes");
        let y_nodes: Vec<f64> = (0..=m)
            .map(|i| height * ((i as f64) / (m as f64)).powf(self.grading))
            .collect();
        CylinderGrid {
            y_nodes,
            ..self.clone()
        }
    }

    pub fn x_nodes(&self) -> &[f64] {
        &self.x_nodes
    }

    pub fn y_nodes(&self) -> &[f64] {
        &self.y_nodes
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn grading(&self) -> f64 {
        self.grading
    }

    /// Inclusive index range of the x nodes that cover the box itself.
    pub fn core_range(&self) -> (usize, usize) {
        (self.core_lo, self.core_hi)
    }

    pub fn nx(&self) -> usize {
        self.x_nodes.len()
    }

    pub fn ny(&self) -> usize {
        self.y_nodes.len()
    }

    pub fn height(&self) -> f64 {
        *self.y_nodes.last().expect("grid has vertical nodes")
    }

    fn flat(&self, i: usize, j: usize) -> usize {
        j * self.nx() + i
    }

    /// A boundary datum is usable when it lives on the interval grid this
    /// mesh was built from, vanishes near the box ends, and the caller's
    /// order parameter agrees with the one baked into the grading.
    fn check_datum(&self, gk: &GridFunction, sigma: f64) -> Result<()> {
        if (sigma - self.sigma).abs() > 1e-12 {
            return Err(Error::Precondition(format!(
                "order mismatch: sigma = {sigma} but the mesh was graded for {}",
                self.sigma
            )));
        }
        let g = gk.grid();
        if g.n() != 1 {
            return Err(Error::Precondition(format!(
                "boundary datum must be one-dimensional, got n = {}",
                g.n()
            )));
        }
        if g.points(0) != self.omega_points
            || (g.domain().half_width(0) - self.omega_half_width).abs()
                > 1e-12 * self.omega_half_width
        {
            return Err(Error::Precondition(
                "boundary datum lives on a different interval grid than the cylinder".into(),
            ));
        }
        if !gk.is_interior_supported() && gk.values().iter().any(|&v| v != 0.0) {
            return Err(Error::Precondition(
                "boundary datum must vanish near the interval ends".into(),
            ));
        }
        Ok(())
    }
}

/// Which Poisson formula produced a field. The direct field interpolates its
/// boundary datum at the trace; the dual field carries the datum as a
/// weighted Neumann condition instead, and its trace is the smoother object
/// the duality pairing integrates against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldKind {
    Direct,
    Dual,
}

/// Values over the cylinder nodes, row by row from the trace up: the value
/// at (x_i, y_j) sits at index j * nx + i.
#[derive(Debug, Clone)]
pub struct ExtensionField {
    grid: Arc<CylinderGrid>,
    values: Vec<f64>,
    kind: FieldKind,
}

impl ExtensionField {
    fn new(grid: Arc<CylinderGrid>, values: Vec<f64>, kind: FieldKind) -> Result<Self> {
        debug_assert_eq!(values.len(), grid.nx() * grid.ny());
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::QuadratureFailure(
                "extension field contains a non-finite value".into(),
            ));
        }
        Ok(ExtensionField { grid, values, kind })
    }

    pub fn grid(&self) -> &Arc<CylinderGrid> {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn kind(&self) -> FieldKind {
        self.kind
    }

    pub fn value_at(&self, i: usize, j: usize) -> f64 {
        self.values[self.grid.flat(i, j)]
    }

    /// Diagnostic dump, one node per line: x,y,value.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("x,y,value\n");
        for j in 0..self.grid.ny() {
            for i in 0..self.grid.nx() {
                let _ = writeln!(
                    out,
                    "{},{},{}",
                    self.grid.x_nodes[i],
                    self.grid.y_nodes[j],
                    self.values[self.grid.flat(i, j)]
                );
            }
        }
        out
    }
}

/// One interval cell of the piecewise-linear source model, kept only where
/// the datum is not identically zero.
struct Segment {
    x0: f64,
    x1: f64,
    g0: f64,
    g1: f64,
}

impl Segment {
    fn slope(&self) -> f64 {
        (self.g1 - self.g0) / (self.x1 - self.x0)
    }

    fn eval(&self, x: f64) -> f64 {
        self.g0 + self.slope() * (x - self.x0)
    }
}

/// Piecewise-linear model of the datum over the box. The grid is half open,
/// so the missing right endpoint +h is closed with a zero value, exact for
/// data vanishing near the ends.
fn active_segments(gk: &GridFunction, half_width: f64) -> Vec<Segment> {
    let g = gk.grid();
    let np = g.points(0);
    let vals = gk.values();
    let mut segs = Vec::new();
    for i in 0..np {
        let (x1, g1) = if i + 1 < np {
            (g.coord(0, i + 1), vals[i + 1])
        } else {
            (half_width, 0.0)
        };
        if vals[i] != 0.0 || g1 != 0.0 {
            segs.push(Segment {
                x0: g.coord(0, i),
                x1,
                g0: vals[i],
                g1,
            });
        }
    }
    segs
}

/// Integral of f over [a, b] by bisection until each panel is short against
/// its distance to the kernel peak at (xt, yt), then 12-point Gauss-Legendre
/// per panel. The recursion shape depends only on the geometry, so the
/// result is deterministic.
fn panel_integral<F: Fn(f64) -> f64>(
    a: f64,
    b: f64,
    xt: f64,
    yt: f64,
    depth: u32,
    f: &F,
) -> Result<f64> {
    let len = b - a;
    let dist = if xt < a {
        a - xt
    } else if xt > b {
        xt - b
    } else {
        0.0
    };
    if len <= PANEL_THETA * dist.max(yt) {
        let (xs, ws) = gauss_legendre_12(a, b);
        let mut acc = 0.0;
        for q in 0..12 {
            acc += ws[q] * f(xs[q]);
        }
        return Ok(acc);
    }
    if depth >= MAX_PANEL_DEPTH {
        return Err(Error::LayerResolution(format!(
            "kernel quadrature at height y = {yt} still needs panels shorter than \
             [{a}, {b}] after {MAX_PANEL_DEPTH} bisections"
        )));
    }
    let mid = 0.5 * (a + b);
    Ok(panel_integral(a, mid, xt, yt, depth + 1, f)?
        + panel_integral(mid, b, xt, yt, depth + 1, f)?)
}

/// Direct Poisson value at one interior node: c1 y^{2s} times the integral
/// of the datum against (|x-t|^2 + y^2)^{-(1+2s)/2}.
fn direct_value(segs: &[Segment], c1: f64, sigma: f64, xt: f64, yt: f64) -> Result<f64> {
    let ex = -(1.0 + 2.0 * sigma) / 2.0;
    let y2 = yt * yt;
    let mut parts = Vec::with_capacity(segs.len());
    for s in segs {
        let g0 = s.g0;
        let slope = s.slope();
        let x0 = s.x0;
        let v = panel_integral(s.x0, s.x1, xt, yt, 0, &|xi: f64| {
            let t = xt - xi;
            (g0 + slope * (xi - x0)) * (t * t + y2).powf(ex)
        })?;
        parts.push(v);
    }
    Ok(c1 * yt.powf(2.0 * sigma) * pairwise_sum(&parts))
}

/// Extension of the datum with the trace boundary condition: the kernel
/// y^{2s} (|x-t|^2 + y^2)^{-(1+2s)/2}, normalized by c1(s) = Gamma(s + 1/2)
/// / (sqrt(pi) Gamma(s)) so that the y -> 0 limit recovers the datum (the
/// kernel then integrates to one at every height). The trace row itself is
/// set to the datum values; padded trace nodes are zero because the datum
/// vanishes outside the box.
pub fn poisson_direct(
    gk: &GridFunction,
    sigma: f64,
    grid: &Arc<CylinderGrid>,
) -> Result<ExtensionField> {
    grid.check_datum(gk, sigma)?;
    let c1 = gamma(sigma + 0.5) / (PI.sqrt() * gamma(sigma));
    let segs = active_segments(gk, grid.omega_half_width);
    let nx = grid.nx();
    let ny = grid.ny();

    let mut values = vec![0.0; nx];
    for i in 0..gk.grid().points(0) {
        values[grid.core_lo + i] = gk.values()[i];
    }

    let rows: Result<Vec<Vec<f64>>> = (1..ny)
        .into_par_iter()
        .map(|j| {
            let yt = grid.y_nodes[j];
            (0..nx)
                .map(|i| direct_value(&segs, c1, sigma, grid.x_nodes[i], yt))
                .collect()
        })
        .collect();
    for row in rows? {
        values.extend_from_slice(&row);
    }
    ExtensionField::new(grid.clone(), values, FieldKind::Direct)
}

/// Kernel branch of the dual formula: a power kernel away from s = 1/2 and
/// the logarithm at it. The normalizations make the weighted flux at the
/// trace reproduce the datum: y^{1-2s} dw/dy -> -g as y -> 0.
enum DualKernel {
    Power { c3: f64, ex: f64 },
    Log,
}

fn dual_kernel(sigma: f64) -> DualKernel {
    if (sigma - 0.5).abs() < LOG_BRANCH_TOL {
        DualKernel::Log
    } else {
        DualKernel::Power {
            c3: gamma(1.5 - sigma) / ((1.0 - 2.0 * sigma) * PI.sqrt() * gamma(1.0 - sigma)),
            ex: -(1.0 - 2.0 * sigma) / 2.0,
        }
    }
}

/// Integral of (a + b t) t^{p-1} over [0, L]: the endpoint-singular piece of
/// the dual trace quadrature, exact for the piecewise-linear source model.
fn one_sided_power(a: f64, b: f64, l: f64, p: f64) -> f64 {
    if l <= 0.0 {
        return 0.0;
    }
    a * l.powf(p) / p + b * l.powf(p + 1.0) / (p + 1.0)
}

/// Integral of (a + b t) ln(t^2) over [0, L], the s = 1/2 analogue.
fn one_sided_log(a: f64, b: f64, l: f64) -> f64 {
    if l <= 0.0 {
        return 0.0;
    }
    let ln = l.ln();
    2.0 * a * (l * ln - l) + b * (l * l * ln - 0.5 * l * l)
}

/// Dual Poisson value at one node. Positive heights are regular and handled
/// by the adaptive panels; on the trace row the kernel has an integrable
/// singularity at the target, and any segment whose closure contains the
/// target is split there and integrated in closed form.
fn dual_value(
    segs: &[Segment],
    sigma: f64,
    kern: &DualKernel,
    xt: f64,
    yt: f64,
) -> Result<f64> {
    let y2 = yt * yt;
    let mut parts = Vec::with_capacity(segs.len());
    for s in segs {
        let g0 = s.g0;
        let slope = s.slope();
        let x0 = s.x0;
        let v = if yt == 0.0 && xt >= s.x0 && xt <= s.x1 {
            let a = s.eval(xt);
            match kern {
                DualKernel::Power { ex: _, .. } => {
                    let p = 2.0 * sigma;
                    one_sided_power(a, -slope, xt - s.x0, p)
                        + one_sided_power(a, slope, s.x1 - xt, p)
                }
                DualKernel::Log => {
                    one_sided_log(a, -slope, xt - s.x0) + one_sided_log(a, slope, s.x1 - xt)
                }
            }
        } else {
            match kern {
                DualKernel::Power { ex, .. } => {
                    let ex = *ex;
                    panel_integral(s.x0, s.x1, xt, yt, 0, &|xi: f64| {
                        let t = xt - xi;
                        (g0 + slope * (xi - x0)) * (t * t + y2).powf(ex)
                    })?
                }
                DualKernel::Log => panel_integral(s.x0, s.x1, xt, yt, 0, &|xi: f64| {
                    let t = xt - xi;
                    (g0 + slope * (xi - x0)) * (t * t + y2).ln()
                })?,
            }
        };
        parts.push(v);
    }
    let scale = match kern {
        DualKernel::Power { c3, .. } => *c3,
        DualKernel::Log => -1.0 / (2.0 * PI),
    };
    Ok(scale * pairwise_sum(&parts))
}

/// Extension of the datum with the weighted Neumann boundary condition:
/// kernel (|x-t|^2 + y^2)^{-(1-2s)/2} normalized so y^{1-2s} dw/dy -> -g at
/// the trace, switching to -ln(|x-t|^2 + y^2)/(2 pi) at s = 1/2. The datum
/// must have zero mean (it is a Laplacian of something compactly supported);
/// without that the two branches do not agree across s = 1/2 and the s >
/// 1/2 kernel grows at infinity.
pub fn poisson_dual(
    gk: &GridFunction,
    sigma: f64,
    grid: &Arc<CylinderGrid>,
) -> Result<ExtensionField> {
    grid.check_datum(gk, sigma)?;
    let mean = parallel_sum(gk.values()) * gk.grid().cell_volume();
    if mean.abs() > 1e-6 * l1_norm(gk) {
        return Err(Error::Precondition(format!(
            "dual extension needs a zero-mean datum; got mean {mean:e}"
        )));
    }
    let kern = dual_kernel(sigma);
    let segs = active_segments(gk, grid.omega_half_width);
    let nx = grid.nx();
    let ny = grid.ny();

    let rows: Result<Vec<Vec<f64>>> = (0..ny)
        .into_par_iter()
        .map(|j| {
            let yt = grid.y_nodes[j];
            (0..nx)
                .map(|i| dual_value(&segs, sigma, &kern, grid.x_nodes[i], yt))
                .collect()
        })
        .collect();
    let mut values = Vec::with_capacity(nx * ny);
    for row in rows? {
        values.extend_from_slice(&row);
    }
    ExtensionField::new(grid.clone(), values, FieldKind::Dual)
}

/// Exact moments of the weight over one vertical cell: with t = (y - a) /
/// (b - a), returns integral of y^{1-2s} t^p dy for p = 0, 1, 2. These are
/// differences of monomial antiderivatives, so no quadrature is involved
/// and the first cell (a = 0) is handled by the same closed form.
fn cell_moments(sigma: f64, a: f64, b: f64) -> [f64; 3] {
    let e0 = 2.0 - 2.0 * sigma;
    let i0 = (b.powf(e0) - a.powf(e0)) / e0;
    let i1 = (b.powf(e0 + 1.0) - a.powf(e0 + 1.0)) / (e0 + 1.0);
    let i2 = (b.powf(e0 + 2.0) - a.powf(e0 + 2.0)) / (e0 + 2.0);
    let d = b - a;
    [
        i0,
        (i1 - a * i0) / d,
        (i2 - 2.0 * a * i1 + a * a * i0) / (d * d),
    ]
}

/// Weighted gradient energy of one bilinear cell. a0/a1 are the horizontal
/// differences along the bottom and top edges, b0/b1 the vertical
/// differences along the left and right edges; m are the cell moments.
fn cell_energy(
    w00: f64,
    w10: f64,
    w01: f64,
    w11: f64,
    dx: f64,
    dy: f64,
    m: &[f64; 3],
) -> f64 {
    let a0 = w10 - w00;
    let a1 = w11 - w01;
    let b0 = w01 - w00;
    let b1 = w11 - w10;
    let xpart =
        (a0 * a0 * (m[0] - 2.0 * m[1] + m[2]) + 2.0 * a0 * a1 * (m[1] - m[2]) + a1 * a1 * m[2])
            / dx;
    let ypart = m[0] * dx * (b0 * b0 + b0 * b1 + b1 * b1) / (3.0 * dy * dy);
    xpart + ypart
}

struct EnergySplit {
    total: f64,
    x_tail: f64,
    y_tail: f64,
}

/// Piecewise-bilinear energy over the whole padded footprint, together with
/// the contributions of the outermost x and y octaves, which diagnose
/// whether the truncation to a finite rectangle was adequate.
fn weighted_energy(w: &ExtensionField) -> EnergySplit {
    let g = &w.grid;
    let nx = g.nx();
    let ny = g.ny();
    let extent = g.x_nodes[nx - 1];
    let height = g.height();
    let vals = &w.values;

    let rows: Vec<(f64, f64, f64)> = (0..ny - 1)
        .into_par_iter()
        .map(|j| {
            let m = cell_moments(g.sigma, g.y_nodes[j], g.y_nodes[j + 1]);
            let dy = g.y_nodes[j + 1] - g.y_nodes[j];
            let in_y_tail = g.y_nodes[j + 1] > 0.5 * height;
            let mut all = Vec::with_capacity(nx - 1);
            let mut xt = Vec::new();
            for i in 0..nx - 1 {
                let dx = g.x_nodes[i + 1] - g.x_nodes[i];
                let e = cell_energy(
                    vals[g.flat(i, j)],
                    vals[g.flat(i + 1, j)],
                    vals[g.flat(i, j + 1)],
                    vals[g.flat(i + 1, j + 1)],
                    dx,
                    dy,
                    &m,
                );
                all.push(e);
                if g.x_nodes[i].abs().max(g.x_nodes[i + 1].abs()) > 0.5 * extent {
                    xt.push(e);
                }
            }
            let row_total = pairwise_sum(&all);
            let row_xt = pairwise_sum(&xt);
            let row_yt = if in_y_tail { row_total } else { 0.0 };
            (row_total, row_xt, row_yt)
        })
        .collect();

    let totals: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let xts: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let yts: Vec<f64> = rows.iter().map(|r| r.2).collect();
    EnergySplit {
        total: pairwise_sum(&totals),
        x_tail: pairwise_sum(&xts),
        y_tail: pairwise_sum(&yts),
    }
}

fn gate_tails(e: &EnergySplit) -> Result<()> {
    if e.x_tail > TAIL_FRACTION * e.total {
        return Err(Error::Truncation(format!(
            "outermost horizontal octave carries {:.3}% of the extension energy; \
             the footprint is too small",
            100.0 * e.x_tail / e.total
        )));
    }
    if e.y_tail > TAIL_FRACTION * e.total {
        return Err(Error::Truncation(format!(
            "outermost vertical octave carries {:.3}% of the extension energy; \
             the cylinder is too short",
            100.0 * e.y_tail / e.total
        )));
    }
    Ok(())
}

/// Weighted gradient energy of a direct extension field over the truncated
/// half plane. Together with the calibrated constant this reproduces the
/// Fourier-side form of the datum. Errors if the outermost octave of either
/// axis carries more than 1% of the energy, since then the truncation, not
/// the datum, controls the value.
pub fn energy_direct(w: &ExtensionField) -> Result<f64> {
    if w.kind != FieldKind::Direct {
        return Err(Error::Precondition(
            "the trace-datum energy identity applies to direct extension fields only".into(),
        ));
    }
    let e = weighted_energy(w);
    gate_tails(&e)?;
    Ok(e.total)
}

/// The constant tying the extension energy to the Fourier-side quadratic
/// form, estimated as the mean of the ratio over witness functions. At
/// least three witnesses are required, and their ratios must agree to a 1%
/// coefficient of variation; disagreement means the discretization, not the
/// constant, is controlling the numbers, and is reported as an error
/// rather than averaged away.
pub fn calibrate_c2(sigma: f64, witnesses: &[GridFunction]) -> Result<f64> {
    if witnesses.len() < 3 {
        return Err(Error::Precondition(format!(
            "calibration needs at least 3 witness functions, got {}",
            witnesses.len()
        )));
    }
    let ord = FormOrder::new(sigma)?;
    let mut ratios = Vec::with_capacity(witnesses.len());
    for u in witnesses {
        if u.grid().n() != 1 {
            return Err(Error::Precondition(
                "calibration witnesses must be one-dimensional".into(),
            ));
        }
        let grid = Arc::new(CylinderGrid::graded(u.grid(), sigma, CAL_Y_CELLS)?);
        let field = poisson_direct(u, sigma, &grid)?;
        let energy = energy_direct(&field)?;
        if !(energy > 0.0) {
            return Err(Error::Calibration(
                "a calibration witness has zero extension energy".into(),
            ));
        }
        let q = q_dirichlet(u, &ord, DEFAULT_PAD)?;
        ratios.push(q / energy);
    }
    let mean = pairwise_sum(&ratios) / ratios.len() as f64;
    let var = ratios.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / ratios.len() as f64;
    let cov = var.sqrt() / mean;
    if !(cov <= 0.01) {
        return Err(Error::Calibration(format!(
            "witness ratios spread {:.3}% around {mean}; the discretization is not \
             consistent enough to read off the constant",
            100.0 * cov
        )));
    }
    Ok(mean)
}

/// The weighted 5-point system on the core columns of the cylinder. Built
/// from linear elements on right triangles: each rectangular cell is split
/// by its diagonal, and because the two gradient directions of a right
/// triangle involve disjoint node pairs, the weighted element energy is a
/// sum of per-edge terms with no diagonal coupling for any positive weight.
/// The discrete energy is therefore both the assembled finite-element
/// energy (so refinement arguments over nested spaces are exact) and a
/// 5-point scheme.
struct CoreSystem {
    ncx: usize,
    ny: usize,
    /// Horizontal edge weight per row.
    kx: Vec<f64>,
    /// Vertical edge weight per cell row.
    ky: Vec<f64>,
    y_nodes: Vec<f64>,
    height: f64,
}

impl CoreSystem {
    fn build(grid: &CylinderGrid) -> CoreSystem {
        let ncx = grid.core_hi - grid.core_lo + 1;
        let ny = grid.ny();
        let m = ny - 1;
        let dx = grid.x_nodes[grid.core_lo + 1] - grid.x_nodes[grid.core_lo];
        let mut m0 = vec![0.0; m];
        let mut m1 = vec![0.0; m];
        for j in 0..m {
            let mm = cell_moments(grid.sigma, grid.y_nodes[j], grid.y_nodes[j + 1]);
            m0[j] = mm[0];
            m1[j] = mm[1];
        }
        // Lower-triangle weight of cell row j is dx (m0 - m1), upper is
        // dx m1; a horizontal edge in node row j collects the lower triangle
        // above it and the upper triangle below it.
        let mut kx = vec![0.0; ny];
        for j in 0..ny {
            let mut w = 0.0;
            if j < m {
                w += m0[j] - m1[j];
            }
            if j > 0 {
                w += m1[j - 1];
            }
            kx[j] = w / dx;
        }
        let mut ky = vec![0.0; m];
        for j in 0..m {
            let dy = grid.y_nodes[j + 1] - grid.y_nodes[j];
            ky[j] = dx * m0[j] / (dy * dy);
        }
        CoreSystem {
            ncx,
            ny,
            kx,
            ky,
            y_nodes: grid.y_nodes.clone(),
            height: grid.height(),
        }
    }

    fn len(&self) -> usize {
        self.ncx * self.ny
    }

    fn idx(&self, i: usize, j: usize) -> usize {
        j * self.ncx + i
    }

    fn diag(&self, i: usize, j: usize) -> f64 {
        let mut d = 0.0;
        if i > 0 {
            d += self.kx[j];
        }
        if i < self.ncx - 1 {
            d += self.kx[j];
        }
        if j > 0 {
            d += self.ky[j - 1];
        }
        if j < self.ny - 1 {
            d += self.ky[j];
        }
        d
    }

    fn apply(&self, w: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        for j in 0..self.ny {
            let k = self.kx[j];
            let base = j * self.ncx;
            for i in 0..self.ncx - 1 {
                let d = k * (w[base + i] - w[base + i + 1]);
                out[base + i] += d;
                out[base + i + 1] -= d;
            }
        }
        for j in 0..self.ny - 1 {
            let k = self.ky[j];
            let lo = j * self.ncx;
            let hi = lo + self.ncx;
            for i in 0..self.ncx {
                let d = k * (w[lo + i] - w[hi + i]);
                out[lo + i] += d;
                out[hi + i] -= d;
            }
        }
    }

    /// Line relaxation in y: solve the tridiagonal vertical coupling of each
    /// free column exactly. The graded mesh makes vertical edges orders of
    /// magnitude stiffer than horizontal ones near the trace, and plain
    /// diagonal scaling cannot see that anisotropy.
    fn precondition(&self, dirichlet: &[bool], r: &[f64], z: &mut [f64]) {
        z.fill(0.0);
        for i in 0..self.ncx {
            let mut j0 = 0;
            while j0 < self.ny && dirichlet[self.idx(i, j0)] {
                j0 += 1;
            }
            if j0 == self.ny {
                continue;
            }
            // Free rows of a column are contiguous: only the trace row is
            // ever pinned besides whole lateral columns.
            let rows = self.ny - j0;
            let mut diag = Vec::with_capacity(rows);
            let mut off = Vec::with_capacity(rows - 1);
            let mut rhs = Vec::with_capacity(rows);
            for j in j0..self.ny {
                diag.push(self.diag(i, j));
                rhs.push(r[self.idx(i, j)]);
                if j + 1 < self.ny {
                    off.push(-self.ky[j]);
                }
            }
            let sol = solve_tridiagonal(&off, &diag, &off, &rhs);
            for (jj, v) in sol.into_iter().enumerate() {
                z[self.idx(i, j0 + jj)] = v;
            }
        }
    }

    /// Discrete energy as the sum of per-edge terms, split off the share of
    /// the outermost vertical octave.
    fn energy_split(&self, w: &[f64]) -> (f64, f64) {
        let mut all = Vec::with_capacity(2 * self.len());
        let mut tail = Vec::new();
        let hh = 0.5 * self.height;
        for j in 0..self.ny {
            let k = self.kx[j];
            let base = j * self.ncx;
            for i in 0..self.ncx - 1 {
                let d = w[base + i] - w[base + i + 1];
                let e = k * d * d;
                all.push(e);
                if self.y_nodes[j] > hh {
                    tail.push(e);
                }
            }
        }
        for j in 0..self.ny - 1 {
            let k = self.ky[j];
            let lo = j * self.ncx;
            let hi = lo + self.ncx;
            for i in 0..self.ncx {
                let d = w[lo + i] - w[hi + i];
                let e = k * d * d;
                all.push(e);
                if self.y_nodes[j + 1] > hh {
                    tail.push(e);
                }
            }
        }
        (pairwise_sum(&all), pairwise_sum(&tail))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let prods: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    pairwise_sum(&prods)
}

/// Conjugate gradients with the line-in-y preconditioner, zero initial
/// guess, single-threaded and therefore bit-reproducible. `boundary` holds
/// the pinned values at `dirichlet` nodes; `load` is the free-node right
/// hand side.
fn solve_core(
    sys: &CoreSystem,
    dirichlet: &[bool],
    boundary: &[f64],
    load: &[f64],
) -> Result<Vec<f64>> {
    let n = sys.len();
    let mut w0 = vec![0.0; n];
    for k in 0..n {
        if dirichlet[k] {
            w0[k] = boundary[k];
        }
    }
    let mut aw0 = vec![0.0; n];
    sys.apply(&w0, &mut aw0);
    let mut b = vec![0.0; n];
    for k in 0..n {
        if !dirichlet[k] {
            b[k] = load[k] - aw0[k];
        }
    }
    let bnorm = dot(&b, &b).sqrt();
    if bnorm == 0.0 {
        return Ok(w0);
    }

    let mut x = vec![0.0; n];
    let mut r = b;
    let mut z = vec![0.0; n];
    sys.precondition(dirichlet, &r, &mut z);
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut q = vec![0.0; n];
    for _ in 0..PCG_MAX_ITERS {
        sys.apply(&p, &mut q);
        for k in 0..n {
            if dirichlet[k] {
                q[k] = 0.0;
            }
        }
        let pq = dot(&p, &q);
        if !(pq > 0.0) {
            return Err(Error::QuadratureFailure(
                "cylinder stiffness matrix lost positive definiteness".into(),
            ));
        }
        let alpha = rz / pq;
        for k in 0..n {
            x[k] += alpha * p[k];
            r[k] -= alpha * q[k];
        }
        if dot(&r, &r).sqrt() <= PCG_TOL * bnorm {
            for k in 0..n {
                x[k] += w0[k];
            }
            return Ok(x);
        }
        sys.precondition(dirichlet, &r, &mut z);
        let rz_next = dot(&r, &z);
        let beta = rz_next / rz;
        rz = rz_next;
        for k in 0..n {
            p[k] = z[k] + beta * p[k];
        }
    }
    Err(Error::ConvergenceFailure(format!(
        "conjugate gradient did not reach {PCG_TOL:e} relative residual \
         within {PCG_MAX_ITERS} iterations"
    )))
}

/// Boundary-condition layout shared by the two cylinder solves: lateral
/// columns always pinned to zero, the trace row pinned only for the primal
/// problem.
fn core_boundary(sys: &CoreSystem, trace: Option<&[f64]>) -> (Vec<bool>, Vec<f64>) {
    let n = sys.len();
    let mut dirichlet = vec![false; n];
    let mut boundary = vec![0.0; n];
    for j in 0..sys.ny {
        dirichlet[sys.idx(0, j)] = true;
        dirichlet[sys.idx(sys.ncx - 1, j)] = true;
    }
    if let Some(tr) = trace {
        for i in 0..sys.ncx {
            let k = sys.idx(i, 0);
            dirichlet[k] = true;
            boundary[k] = if i == 0 || i == sys.ncx - 1 { 0.0 } else { tr[i] };
        }
    }
    (dirichlet, boundary)
}

/// Datum values at the core nodes: the interval nodes carry the sampled
/// values, the closing right endpoint carries zero.
fn core_trace(gk: &GridFunction, ncx: usize) -> Vec<f64> {
    let np = gk.grid().points(0);
    (0..ncx)
        .map(|i| if i < np { gk.values()[i] } else { 0.0 })
        .collect()
}

/// Box form of order sigma by energy minimization on the finite cylinder:
/// solve the weighted Laplace problem over the box with the datum pinned at
/// the trace, zero lateral boundary and a natural top, and return c2 times
/// the discrete energy. The minimization runs over a conforming subspace,
/// so the value approaches the spectral box form from above as the mesh is
/// refined. The calibrated constant is passed in explicitly; this routine
/// has no way to derive it on its own.
pub fn cylinder_navier(
    gk: &GridFunction,
    sigma: f64,
    grid: &Arc<CylinderGrid>,
    c2: f64,
) -> Result<f64> {
    grid.check_datum(gk, sigma)?;
    if !(c2 > 0.0 && c2.is_finite()) {
        return Err(Error::Precondition(format!(
            "calibration constant must be positive and finite, got {c2}"
        )));
    }
    let sys = CoreSystem::build(grid);
    let trace = core_trace(gk, sys.ncx);
    let (dirichlet, boundary) = core_boundary(&sys, Some(&trace));
    let load = vec![0.0; sys.len()];
    let w = solve_core(&sys, &dirichlet, &boundary, &load)?;
    let (total, tail) = sys.energy_split(&w);
    if tail > TAIL_FRACTION * total {
        return Err(Error::Truncation(format!(
            "outermost vertical octave carries {:.3}% of the cylinder energy; \
             the cylinder is too short for this datum",
            100.0 * tail / total
        )));
    }
    Ok(c2 * total)
}

/// Box form of order 2 - sigma by maximization on the finite cylinder: the
/// datum enters as a linear trace pairing rather than a pinned value, the
/// optimality system is the same weighted Laplace problem with a Neumann
/// trace, and the value (2 linear - energy) / c2 at the optimum approaches
/// the spectral box form from below under mesh refinement.
pub fn cylinder_navier_dual(
    gk: &GridFunction,
    sigma: f64,
    grid: &Arc<CylinderGrid>,
    c2: f64,
) -> Result<f64> {
    grid.check_datum(gk, sigma)?;
    if !(c2 > 0.0 && c2.is_finite()) {
        return Err(Error::Precondition(format!(
            "calibration constant must be positive and finite, got {c2}"
        )));
    }
    let sys = CoreSystem::build(grid);
    let dx = grid.x_nodes[grid.core_lo + 1] - grid.x_nodes[grid.core_lo];
    let trace = core_trace(gk, sys.ncx);
    let (dirichlet, boundary) = core_boundary(&sys, None);
    // Linear-element load of the trace pairing against the datum.
    let mut load = vec![0.0; sys.len()];
    for i in 1..sys.ncx - 1 {
        load[sys.idx(i, 0)] = dx / 6.0 * (trace[i - 1] + 4.0 * trace[i] + trace[i + 1]);
    }
    let w = solve_core(&sys, &dirichlet, &boundary, &load)?;
    let pair: Vec<f64> = (0..sys.ncx).map(|i| load[sys.idx(i, 0)] * w[sys.idx(i, 0)]).collect();
    let linear = pairwise_sum(&pair);
    let (total, tail) = sys.energy_split(&w);
    if tail > TAIL_FRACTION * total {
        return Err(Error::Truncation(format!(
            "outermost vertical octave carries {:.3}% of the cylinder energy; \
             the cylinder is too short for this datum",
            100.0 * tail / total
        )));
    }
    Ok((2.0 * linear - total) / c2)
}

/// Outcome of the dual-route evaluation of the whole-line form, carrying the
/// Fourier-side value it is supposed to reproduce and whether the two agree
/// within 5%. Disagreement is diagnostic, not fatal: the value is still
/// returned for inspection.
#[derive(Debug, Clone, Copy)]
pub struct DualCheck {
    pub value: f64,
    pub fourier_reference: f64,
    pub consistent: bool,
}

/// Whole-line form of order m in (1, 2) through the dual extension: with g
/// = -Laplacian of u and w its dual extension, the quantity (2 integral of
/// g w(.,0) - energy of w) / c2 reproduces the Fourier-side form of order
/// m = 2 - sigma. The trace pairing runs over the box (g vanishes outside);
/// the energy runs over the whole padded footprint.
pub fn q_dirichlet_dual(
    u: &GridFunction,
    ord: &FormOrder,
    grid: &Arc<CylinderGrid>,
    c2: f64,
) -> Result<DualCheck> {
    let sigma = match (ord.parity(), ord.decomposition()) {
        (Parity::FloorOdd, Some((1, s))) => s,
        _ => {
            return Err(Error::InvalidOrder(format!(
                "the dual identity needs an order in (1, 2), got m = {}",
                ord.m()
            )))
        }
    };
    if !(c2 > 0.0 && c2.is_finite()) {
        return Err(Error::Precondition(format!(
            "calibration constant must be positive and finite, got {c2}"
        )));
    }
    let gk = laplacian_power_k(u, 1)?;
    let w = poisson_dual(&gk, sigma, grid)?;

    // Pairing of two piecewise-linear functions cell by cell over the box.
    let np = gk.grid().points(0);
    let dx = gk.grid().spacing(0);
    let gv = gk.values();
    let g_at = |i: usize| if i < np { gv[i] } else { 0.0 };
    let mut cells = Vec::with_capacity(np);
    for i in 0..np {
        let (g0, g1) = (g_at(i), g_at(i + 1));
        if g0 == 0.0 && g1 == 0.0 {
            continue;
        }
        let w0 = w.value_at(grid.core_lo + i, 0);
        let w1 = w.value_at(grid.core_lo + i + 1, 0);
        cells.push(dx / 6.0 * (2.0 * g0 * w0 + g0 * w1 + g1 * w0 + 2.0 * g1 * w1));
    }
    let linear = pairwise_sum(&cells);

    let e = weighted_energy(&w);
    gate_tails(&e)?;
    let value = (2.0 * linear - e.total) / c2;
    let reference = q_dirichlet(u, ord, DEFAULT_PAD)?;
    let consistent = if reference != 0.0 {
        ((value - reference) / reference).abs() <= 0.05
    } else {
        value.abs() <= 1e-12
    };
    Ok(DualCheck {
        value,
        fourier_reference: reference,
        consistent,
    })
}
