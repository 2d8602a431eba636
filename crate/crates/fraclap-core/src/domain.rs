//! Box domains, tensor grids, sampled functions, and the generator family.
//!
//! Grid convention: each axis of the box (-h, h) carries N equispaced nodes
//! x_i = -h + i*dx with dx = 2h/N and i = 0..N-1. The right endpoint +h is
//! dropped; for compactly supported functions both endpoints carry zeros, so
//! the plain cell sum dx^n * sum(u_i) coincides with the tensor trapezoidal
//! rule. N is required to be even so the origin is the node i = N/2 on every
//! axis, which the Hardy weight and the radial generators rely on, and so
//! that zero-padding by an integer factor keeps the source nodes on the
//! padded lattice.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numeric::{gauss_legendre_12, parallel_sum};

/// An origin-centered box, the product of (-h_a, h_a) over axes a.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxDomain {
    half_widths: Vec<f64>,
}

impl BoxDomain {
    pub fn new(half_widths: &[f64]) -> Result<Self> {
        let n = half_widths.len();
        if !(1..=3).contains(&n) {
            return Err(Error::Precondition(format!(
                "dimension {n} not in {{1,2,3}}"
            )));
        }
        if half_widths.iter().any(|&h| !(h > 0.0) || !h.is_finite()) {
            return Err(Error::Precondition(
                "half widths must be positive and finite".into(),
            ));
        }
        Ok(BoxDomain {
            half_widths: half_widths.to_vec(),
        })
    }

    /// Cube shortcut: (-h, h)^n.
    pub fn cube(n: usize, half_width: f64) -> Result<Self> {
        Self::new(&vec![half_width; n])
    }

    pub fn n(&self) -> usize {
        self.half_widths.len()
    }

    pub fn half_widths(&self) -> &[f64] {
        &self.half_widths
    }

    pub fn half_width(&self, axis: usize) -> f64 {
        self.half_widths[axis]
    }

    pub fn min_half_width(&self) -> f64 {
        self.half_widths.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn diameter(&self) -> f64 {
        // Euclidean diameter of the box.
        (self
            .half_widths
            .iter()
            .map(|h| (2.0 * h) * (2.0 * h))
            .sum::<f64>())
        .sqrt()
    }

    pub fn volume(&self) -> f64 {
        self.half_widths.iter().map(|h| 2.0 * h).product()
    }
}

/// Tensor grid over a box. Node i on axis a sits at -h_a + i*spacing_a.
#[derive(Debug, Clone, PartialEq)]
pub struct UniformGrid {
    domain: BoxDomain,
    points_per_axis: Vec<usize>,
    spacing: Vec<f64>,
}

impl UniformGrid {
    pub fn new(domain: BoxDomain, points_per_axis: &[usize]) -> Result<Self> {
        if points_per_axis.len() != domain.n() {
            return Err(Error::Precondition(format!(
                "points_per_axis has {} entries for dimension {}",
                points_per_axis.len(),
                domain.n()
            )));
        }
        for &n in points_per_axis {
            if n < 8 {
                return Err(Error::Precondition(format!(
                    "points_per_axis {n} < 8"
                )));
            }
            if n % 2 != 0 {
                return Err(Error::Precondition(format!(
                    "points_per_axis {n} must be even so the origin is a node"
                )));
            }
        }
        let spacing = domain
            .half_widths()
            .iter()
            .zip(points_per_axis)
            .map(|(&h, &n)| 2.0 * h / n as f64)
            .collect();
        Ok(UniformGrid {
            domain,
            points_per_axis: points_per_axis.to_vec(),
            spacing,
        })
    }

    /// Same node count on every axis.
    pub fn isotropic(domain: BoxDomain, points: usize) -> Result<Self> {
        let n = domain.n();
        Self::new(domain, &vec![points; n])
    }

    pub fn domain(&self) -> &BoxDomain {
        &self.domain
    }

    pub fn n(&self) -> usize {
        self.domain.n()
    }

    pub fn points(&self, axis: usize) -> usize {
        self.points_per_axis[axis]
    }

    pub fn points_per_axis(&self) -> &[usize] {
        &self.points_per_axis
    }

    pub fn spacing(&self, axis: usize) -> f64 {
        self.spacing[axis]
    }

    pub fn spacings(&self) -> &[f64] {
        &self.spacing
    }

    /// Volume of one grid cell.
    pub fn cell_volume(&self) -> f64 {
        self.spacing.iter().product()
    }

    /// Total number of nodes.
    pub fn len(&self) -> usize {
        self.points_per_axis.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Coordinate of node index i on one axis.
    pub fn coord(&self, axis: usize, i: usize) -> f64 {
        -self.domain.half_width(axis) + self.spacing[axis] * i as f64
    }

    /// Decompose a flat node index (lexicographic, last axis fastest) into
    /// per-axis indices.
    pub fn unflatten(&self, mut flat: usize, idx: &mut [usize]) {
        for axis in (0..self.n()).rev() {
            let n = self.points_per_axis[axis];
            idx[axis] = flat % n;
            flat /= n;
        }
    }

    /// Coordinates of a flat node index.
    pub fn node_coords(&self, flat: usize) -> Vec<f64> {
        let mut idx = vec![0usize; self.n()];
        self.unflatten(flat, &mut idx);
        idx.iter()
            .enumerate()
            .map(|(a, &i)| self.coord(a, i))
            .collect()
    }

    /// Euclidean norm of the node position.
    pub fn node_radius(&self, flat: usize) -> f64 {
        self.node_coords(flat)
            .iter()
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }
}

/// A real function sampled on a grid, with optional certified support radius.
#[derive(Debug, Clone)]
pub struct GridFunction {
    grid: Arc<UniformGrid>,
    values: Vec<f64>,
    support_radius: Option<f64>,
}

/// Threshold below which a sample counts as an exact zero for the support
/// invariant.
pub const SUPPORT_TOL: f64 = 1e-14;

impl GridFunction {
    pub fn new(grid: Arc<UniformGrid>, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::Precondition(format!(
                "value array length {} does not match grid size {}",
                values.len(),
                grid.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Precondition("non-finite sample".into()));
        }
        Ok(GridFunction {
            grid,
            values,
            support_radius: None,
        })
    }

    /// Sample an analytic function at the grid nodes.
    pub fn sample<F: Fn(&[f64]) -> f64>(grid: Arc<UniformGrid>, f: F) -> Result<Self> {
        let mut idx = vec![0usize; grid.n()];
        let mut coords = vec![0.0; grid.n()];
        let mut values = Vec::with_capacity(grid.len());
        for flat in 0..grid.len() {
            grid.unflatten(flat, &mut idx);
            for (a, &i) in idx.iter().enumerate() {
                coords[a] = grid.coord(a, i);
            }
            values.push(f(&coords));
        }
        GridFunction::new(grid, values)
    }

    pub fn zeros(grid: Arc<UniformGrid>) -> Self {
        let len = grid.len();
        GridFunction {
            grid,
            values: vec![0.0; len],
            support_radius: None,
        }
    }

    pub fn grid(&self) -> &Arc<UniformGrid> {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        // Mutation invalidates any certified support radius.
        self.support_radius = None;
        &mut self.values
    }

    pub fn support_radius(&self) -> Option<f64> {
        self.support_radius
    }

    /// Certify that the function vanishes outside radius r. Verifies the
    /// samples and records the radius.
    pub fn set_support_radius(&mut self, r: f64) -> Result<()> {
        if !(r >= 0.0) {
            return Err(Error::Precondition("support radius must be >= 0".into()));
        }
        for flat in 0..self.grid.len() {
            if self.grid.node_radius(flat) >= r && self.values[flat].abs() > SUPPORT_TOL {
                return Err(Error::Precondition(format!(
                    "sample {} at radius {} exceeds support tolerance",
                    self.values[flat],
                    self.grid.node_radius(flat)
                )));
            }
        }
        self.support_radius = Some(r);
        Ok(())
    }

    /// True when no sample on the outermost node shell exceeds the support
    /// tolerance; padding-based transforms require this.
    pub fn is_interior_supported(&self) -> bool {
        let n = self.grid.n();
        let mut idx = vec![0usize; n];
        for flat in 0..self.grid.len() {
            self.grid.unflatten(flat, &mut idx);
            let on_shell = idx
                .iter()
                .enumerate()
                .any(|(a, &i)| i == 0 || i + 1 == self.grid.points(a));
            if on_shell && self.values[flat].abs() > 1e-12 {
                return false;
            }
        }
        true
    }

    /// Inject this function into a larger grid with identical spacing whose
    /// nodes contain the source nodes. The image is zero outside the source
    /// box; the support radius carries over.
    pub fn embed_into(&self, target: Arc<UniformGrid>) -> Result<GridFunction> {
        let n = self.grid.n();
        if target.n() != n {
            return Err(Error::Precondition("dimension mismatch".into()));
        }
        let mut offsets = vec![0usize; n];
        for a in 0..n {
            let ds = self.grid.spacing(a);
            let dt = target.spacing(a);
            if ((ds - dt) / ds).abs() > 1e-12 {
                return Err(Error::Precondition(format!(
                    "spacing mismatch on axis {a}: {ds} vs {dt}"
                )));
            }
            // Node 0 of the source must land on an integer target node.
            let shift = (self.grid.coord(a, 0) - target.coord(a, 0)) / dt;
            let rounded = shift.round();
            if (shift - rounded).abs() > 1e-9 || rounded < 0.0 {
                return Err(Error::Precondition(format!(
                    "source nodes are not aligned with the target lattice on axis {a}"
                )));
            }
            let off = rounded as usize;
            if off + self.grid.points(a) > target.points(a) {
                return Err(Error::Precondition(format!(
                    "target grid does not contain the source box on axis {a}"
                )));
            }
            offsets[a] = off;
        }
        let mut out = GridFunction::zeros(target.clone());
        let mut sidx = vec![0usize; n];
        for sflat in 0..self.grid.len() {
            self.grid.unflatten(sflat, &mut sidx);
            let mut tflat = 0usize;
            for a in 0..n {
                tflat = tflat * target.points(a) + (sidx[a] + offsets[a]);
            }
            out.values[tflat] = self.values[sflat];
        }
        out.support_radius = self.support_radius;
        Ok(out)
    }

    /// View the same samples as living on the box scaled by t: this is an
    /// exact sampling of u(x/t) on the scaled grid, since the nodes scale
    /// with the box.
    pub fn dilate_metadata(&self, t: f64) -> Result<GridFunction> {
        if !(t > 0.0) || !t.is_finite() {
            return Err(Error::Precondition("dilation factor must be positive".into()));
        }
        let hw: Vec<f64> = self
            .grid
            .domain()
            .half_widths()
            .iter()
            .map(|h| h * t)
            .collect();
        let domain = BoxDomain::new(&hw)?;
        let grid = Arc::new(UniformGrid::new(domain, self.grid.points_per_axis())?);
        // The support invariant was verified on the original grid; both the
        // nodes and the radius scale by t, so it carries over exactly.
        Ok(GridFunction {
            grid,
            values: self.values.clone(),
            support_radius: self.support_radius.map(|r| r * t),
        })
    }
}

/// Parameters of the rescaled, cut-off extremal profile
/// (eps^2 + |x|^2)^{(2m-n)/2}.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BubbleParams {
    pub n: usize,
    pub m: f64,
    pub eps: f64,
    pub delta: f64,
}

impl BubbleParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.m > 0.0 && 2.0 * self.m < self.n as f64) {
            return Err(Error::InvalidOrder(format!(
                "profile order m = {} not in (0, n/2) for n = {}",
                self.m, self.n
            )));
        }
        if !(self.eps > 0.0) || !(self.delta > 0.0) {
            return Err(Error::Precondition(
                "bubble scale and cutoff radius must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Quintic smoothstep: C^2 transition from 0 at t=0 to 1 at t=1.
fn smoothstep(t: f64) -> f64 {
    t * t * t * (10.0 + t * (-15.0 + 6.0 * t))
}

/// Radial C^2 cutoff: 1 on |x| <= delta, 0 on |x| >= 2*delta.
pub fn radial_cutoff(r: f64, delta: f64) -> f64 {
    if r <= delta {
        1.0
    } else if r >= 2.0 * delta {
        0.0
    } else {
        1.0 - smoothstep((r - delta) / delta)
    }
}

/// Build the cut-off bubble u(x) = cutoff(|x|) * (eps^2 + |x|^2)^{(2m-n)/2}
/// with support radius 2*delta.
pub fn make_bubble(p: &BubbleParams, grid: &Arc<UniformGrid>) -> Result<GridFunction> {
    p.validate()?;
    if grid.n() != p.n {
        return Err(Error::Precondition(format!(
            "grid dimension {} does not match bubble dimension {}",
            grid.n(),
            p.n
        )));
    }
    if 2.0 * p.delta >= grid.domain().min_half_width() {
        return Err(Error::Precondition(format!(
            "support radius {} does not fit inside half-width {}",
            2.0 * p.delta,
            grid.domain().min_half_width()
        )));
    }
    let expo = (2.0 * p.m - p.n as f64) / 2.0;
    let mut u = GridFunction::sample(grid.clone(), |x| {
        let r2: f64 = x.iter().map(|xi| xi * xi).sum();
        let r = r2.sqrt();
        let cut = radial_cutoff(r, p.delta);
        if cut == 0.0 {
            0.0
        } else {
            cut * (p.eps * p.eps + r2).powf(expo)
        }
    })?;
    u.set_support_radius(2.0 * p.delta)?;
    Ok(u)
}

/// The radial cutoff itself as a grid function (1 inside delta, 0 outside
/// 2*delta), support radius 2*delta.
pub fn make_cutoff(grid: &Arc<UniformGrid>, delta: f64) -> Result<GridFunction> {
    if !(delta > 0.0) || 2.0 * delta >= grid.domain().min_half_width() {
        return Err(Error::Precondition(
            "cutoff radius must be positive with 2*delta inside the domain".into(),
        ));
    }
    let mut u = GridFunction::sample(grid.clone(), |x| {
        let r = x.iter().map(|xi| xi * xi).sum::<f64>().sqrt();
        radial_cutoff(r, delta)
    })?;
    u.set_support_radius(2.0 * delta)?;
    Ok(u)
}

/// Smooth compactly supported bump exp(1 - 1/(1 - (|x|/r)^2)) on |x| < r,
/// zero outside; value 1 at the origin.
pub fn make_bump(grid: &Arc<UniformGrid>, r: f64) -> Result<GridFunction> {
    if !(r > 0.0) || r >= grid.domain().min_half_width() {
        return Err(Error::Precondition(
            "bump radius must be positive and fit inside the domain".into(),
        ));
    }
    let mut u = GridFunction::sample(grid.clone(), |x| {
        let q = x.iter().map(|xi| xi * xi).sum::<f64>() / (r * r);
        if q >= 1.0 {
            0.0
        } else {
            (1.0 - 1.0 / (1.0 - q)).exp()
        }
    })?;
    u.set_support_radius(r)?;
    Ok(u)
}

/// Integral of |u| by the tensor trapezoidal rule. With compact support away
/// from the boundary this is the plain cell sum.
pub fn l1_norm(u: &GridFunction) -> f64 {
    let cell = u.grid().cell_volume();
    let vals: Vec<f64> = u.values().iter().map(|v| v.abs()).collect();
    cell * parallel_sum(&vals)
}

/// (integral of |u|^p)^{1/p} by the cell rule.
pub fn lp_norm(u: &GridFunction, p: f64) -> Result<f64> {
    if !(p >= 1.0) {
        return Err(Error::InvalidExponent(p));
    }
    let cell = u.grid().cell_volume();
    let vals: Vec<f64> = u.values().iter().map(|v| v.abs().powf(p)).collect();
    Ok((cell * parallel_sum(&vals)).powf(1.0 / p))
}

/// Per-cell masses of the Hardy weight |x|^{-2s}: W_i = integral of the
/// weight over the cell centered at node i. The origin cell is integrated
/// exactly (1D closed form) or by dyadic refinement toward the singularity
/// (2D/3D); other cells use a closed form in 1D and tensor Gauss-Legendre
/// in higher dimensions.
pub fn hardy_cell_weights(grid: &UniformGrid, s: f64) -> Result<Vec<f64>> {
    let n = grid.n();
    if !(s >= 0.0) {
        return Err(Error::Precondition("s must be >= 0".into()));
    }
    if 2.0 * s >= n as f64 {
        return Err(Error::DivergentWeight {
            two_s: 2.0 * s,
            n,
        });
    }
    if s == 0.0 {
        return Ok(vec![grid.cell_volume(); grid.len()]);
    }
    match n {
        1 => Ok(hardy_weights_1d(grid, s)),
        _ => Ok(hardy_weights_nd(grid, s)),
    }
}

fn hardy_weights_1d(grid: &UniformGrid, s: f64) -> Vec<f64> {
    let dx = grid.spacing(0);
    let nn = grid.points(0);
    let e = 1.0 - 2.0 * s; // antiderivative exponent; e > 0 since 2s < 1
    let anti = |t: f64| t.abs().powf(e) / e * t.signum();
    (0..nn)
        .map(|i| {
            let x = grid.coord(0, i);
            let a = x - 0.5 * dx;
            let b = x + 0.5 * dx;
            if a < 0.0 && b > 0.0 {
                // Origin cell: split at the singularity; both pieces are
                // integrable since 2s < 1.
                (anti(b) - anti(0.0)) + (anti(0.0) - anti(a))
            } else {
                anti(b) - anti(a)
            }
        })
        .collect()
}

fn hardy_weights_nd(grid: &UniformGrid, s: f64) -> Vec<f64> {
    let n = grid.n();
    let mut idx = vec![0usize; n];
    let mut out = vec![0.0; grid.len()];
    for flat in 0..grid.len() {
        grid.unflatten(flat, &mut idx);
        let mut lo = vec![0.0; n];
        let mut hi = vec![0.0; n];
        let mut contains_origin = true;
        for a in 0..n {
            let x = grid.coord(a, idx[a]);
            lo[a] = x - 0.5 * grid.spacing(a);
            hi[a] = x + 0.5 * grid.spacing(a);
            if !(lo[a] < 0.0 && hi[a] > 0.0) {
                contains_origin = false;
            }
        }
        out[flat] = if contains_origin {
            hardy_origin_cell(&lo, &hi, s)
        } else {
            hardy_box_gl(&lo, &hi, s)
        };
    }
    out
}

/// Tensor GL-12 integral of |x|^{-2s} over a box not containing the origin.
fn hardy_box_gl(lo: &[f64], hi: &[f64], s: f64) -> f64 {
    let n = lo.len();
    let mut nodes = Vec::with_capacity(n);
    for a in 0..n {
        nodes.push(gauss_legendre_12(lo[a], hi[a]));
    }
    let mut total = 0.0;
    let mut stack_idx = vec![0usize; n];
    loop {
        let mut r2 = 0.0;
        let mut w = 1.0;
        for a in 0..n {
            let (x, wt) = &nodes[a];
            r2 += x[stack_idx[a]] * x[stack_idx[a]];
            w *= wt[stack_idx[a]];
        }
        total += w * r2.powf(-s);
        // advance the tensor index
        let mut a = n;
        loop {
            if a == 0 {
                return total;
            }
            a -= 1;
            stack_idx[a] += 1;
            if stack_idx[a] < 12 {
                break;
            }
            stack_idx[a] = 0;
        }
    }
}

/// Exact-to-roundoff integral of |x|^{-2s} over a cell containing the origin:
/// split into the 2^n quadrant boxes touching 0, then peel each quadrant into
/// dyadic shells. Each shell avoids the singularity, so GL-12 converges fast;
/// the shell sum converges geometrically since the weight is integrable.
fn hardy_origin_cell(lo: &[f64], hi: &[f64], s: f64) -> f64 {
    let n = lo.len();
    let mut total = 0.0;
    // Enumerate quadrants by sign pattern.
    for q in 0..(1usize << n) {
        let mut qlo = vec![0.0; n];
        let mut qhi = vec![0.0; n];
        for a in 0..n {
            if q & (1 << a) == 0 {
                qlo[a] = 0.0;
                qhi[a] = hi[a];
            } else {
                qlo[a] = lo[a];
                qhi[a] = 0.0;
            }
        }
        // Dyadic peeling: integrate quadrant scaled by 2^{-k} shells. The
        // shell between scale t and t/2 is the scaled quadrant minus its
        // half-scaled copy; by homogeneity each shell integral is the first
        // shell's integral times (2^{-(n-2s)})^k, so we sum the series
        // analytically after computing the outermost shell.
        let shell = hardy_box_minus_half(&qlo, &qhi, s);
        let ratio = 2.0f64.powf(-(n as f64 - 2.0 * s));
        total += shell / (1.0 - ratio);
    }
    total
}

/// Integral of |x|^{-2s} over a corner quadrant box minus its half-scaled
/// copy (the outermost dyadic shell). The shell does not touch the origin
/// except at lower-dimensional faces of the inner box, so split it into
/// sub-boxes that each exclude the singular corner.
fn hardy_box_minus_half(qlo: &[f64], qhi: &[f64], s: f64) -> f64 {
    let n = qlo.len();
    // The shell is the quadrant minus the half quadrant; decompose into the
    // 2^n - 1 sub-boxes of the half-split along each axis, skipping the one
    // containing the corner at the origin.
    let mut total = 0.0;
    for part in 1..(1usize << n) {
        let mut lo = vec![0.0; n];
        let mut hi = vec![0.0; n];
        for a in 0..n {
            let mid = 0.5 * (qlo[a] + qhi[a]);
            // bit set: outer half along this axis (away from the origin
            // corner, which sits at the zero end of the quadrant)
            let origin_at_lo = qlo[a] == 0.0;
            if part & (1 << a) != 0 {
                if origin_at_lo {
                    lo[a] = mid;
                    hi[a] = qhi[a];
                } else {
                    lo[a] = qlo[a];
                    hi[a] = mid;
                }
            } else if origin_at_lo {
                lo[a] = qlo[a];
                hi[a] = mid;
            } else {
                lo[a] = mid;
                hi[a] = qhi[a];
            }
        }
        total += hardy_box_gl(&lo, &hi, s);
    }
    total
}

/// Integral of |x|^{-2s} u(x)^2 with u frozen at its cell value and the
/// weight integrated exactly per cell.
pub fn hardy_integral(u: &GridFunction, s: f64) -> Result<f64> {
    let w = hardy_cell_weights(u.grid(), s)?;
    let vals: Vec<f64> = u
        .values()
        .iter()
        .zip(&w)
        .map(|(&v, &wi)| v * v * wi)
        .collect();
    Ok(parallel_sum(&vals))
}
