//! Domain-growth experiments on the gap between the two box forms.
//!
//! For a compactly supported function the restricted form does not see the
//! ambient box at all, while the spectral box form does. This module
//! measures their signed difference for one function in one box, sweeps it
//! over a family of growing boxes, and fits the decay rate of the gap
//! against the separation between the support ball and the box. The sign
//! convention follows the ordering that holds for each parity class: the
//! gap of a conforming pair is nonnegative up to discretization slack, and
//! its normalized magnitude (the bound ratio) should stay bounded along a
//! sweep.
//!
//! Sweep points are independent and run in parallel; reports are collected
//! in input order, so repeated runs produce identical output.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::domain::{l1_norm, BoxDomain, GridFunction, UniformGrid};
use crate::error::{Error, Result};
use crate::fourier::{q_dirichlet, FormOrder, Parity, DEFAULT_PAD};
use crate::navier::{expand, q_navier_strict, SineBasis};
use std::sync::Arc;

/// Relative slack granted to the parity ordering of the two forms: the gap
/// may dip this far below zero before it counts as a violation, covering
/// discretization error in either form.
pub const ORDERING_SLACK: f64 = 1e-6;

/// Gaps smaller than this fraction of the restricted form are cancellation
/// noise between two independently computed values, not measurements.
pub const GAP_NOISE_FLOOR: f64 = 1e-12;

/// Growth of the bound ratio across a sweep beyond this factor is reported
/// as a violation of the expected envelope.
pub const RATIO_SPREAD_LIMIT: f64 = 10.0;

/// One measurement of both forms of a fixed function in one box, with the
/// signed gap oriented so that the parity ordering predicts it nonnegative,
/// and the gap magnitude normalized by the separation power and the box
/// ball that govern its expected size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GapReport {
    /// Order of the forms.
    pub m: f64,
    /// Space dimension.
    pub n: usize,
    /// Radius of the ball certified to contain the support.
    pub support_radius: f64,
    /// Radius of the larger concentric ball inside the box; the gap is
    /// normalized against this ball and its separation from the support.
    pub outer_radius: f64,
    /// Smallest half-width of the box the spectral form was computed in.
    pub omega_half_width: f64,
    /// The restricted (integral) form; independent of the box.
    pub q_dirichlet: f64,
    /// The spectral form in this box.
    pub q_navier: f64,
    /// Spectral minus restricted when the floor of m is even, restricted
    /// minus spectral when it is odd; nonnegative up to slack either way.
    pub signed_gap: f64,
    /// |gap| * (outer - support)^{2n+2m} / (outer^n * l1^2), the gap
    /// magnitude relative to its expected envelope.
    pub bound_ratio: f64,
}

/// Least-squares decay fit of log |gap| against log separation.
#[derive(Debug, Clone, PartialEq)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    /// Whether the fitted decay is at least as fast as the envelope
    /// exponent -(2n+2m), within one unit of fit margin.
    pub consistent_with_bound: bool,
    /// Indices of reports whose gap sat below the noise floor and were
    /// left out of the fit.
    pub excluded: Vec<usize>,
}

/// Spread of the bound ratio over a sweep, with the sweep maximum doubling
/// as an empirical envelope constant for this function and order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RatioEnvelope {
    pub min: f64,
    pub max: f64,
    /// True when the ratio grew by more than [`RATIO_SPREAD_LIMIT`] across
    /// the sweep, which the decay bound does not permit.
    pub violation: bool,
}

/// Re-inject a function into a (weakly) larger box on the same lattice.
/// The box must extend the function's own box by whole grid cells.
fn embedded_on(u: &GridFunction, omega: &BoxDomain) -> Result<GridFunction> {
    let grid = u.grid();
    if grid.domain() == omega {
        return Ok(u.clone());
    }
    let n = grid.n();
    let mut points = Vec::with_capacity(n);
    for a in 0..n {
        let p = grid.points(a) as f64 * omega.half_width(a) / grid.domain().half_width(a);
        let rounded = p.round();
        if (p - rounded).abs() > 1e-9 * p.max(1.0) {
            return Err(Error::Precondition(format!(
                "half-width {} is not a whole number of grid cells on axis {a}",
                omega.half_width(a)
            )));
        }
        points.push(rounded as usize);
    }
    let target = Arc::new(UniformGrid::new(omega.clone(), &points)?);
    u.embed_into(target)
}

/// Measure both forms of `u` in the box `omega` and report the signed gap.
///
/// `support_radius` must be a certified bound on the support of `u`, and
/// `outer_radius` a strictly larger radius whose ball still fits inside
/// `omega`; the gap normalization is taken relative to that ball. The box
/// may be larger than the one `u` lives on as long as it extends it by
/// whole cells; the spectral form is then computed after zero-extension.
pub fn gap_once(
    u: &GridFunction,
    ord: &FormOrder,
    omega: &BoxDomain,
    support_radius: f64,
    outer_radius: f64,
) -> Result<GapReport> {
    if ord.parity() == Parity::Integer {
        return Err(Error::InvalidOrder(format!(
            "the two forms coincide at integer order {}; the gap is defined \
             for fractional orders only",
            ord.m()
        )));
    }
    let certified = u.support_radius().ok_or_else(|| {
        Error::Precondition("the function carries no certified support radius".into())
    })?;
    if certified > support_radius * (1.0 + 1e-12) {
        return Err(Error::Precondition(format!(
            "support radius {certified} exceeds the declared ball {support_radius}"
        )));
    }
    if !(support_radius > 0.0 && support_radius < outer_radius) {
        return Err(Error::Precondition(format!(
            "need 0 < support radius < outer radius, got {support_radius} \
             and {outer_radius}"
        )));
    }
    let half_width = omega.min_half_width();
    if outer_radius > half_width * (1.0 + 1e-12) {
        return Err(Error::Precondition(format!(
            "outer ball radius {outer_radius} does not fit inside the box \
             half-width {half_width}"
        )));
    }

    let q_d = q_dirichlet(u, ord, DEFAULT_PAD)?;
    let wide = embedded_on(u, omega)?;
    let modes = (0..omega.n())
        .map(|a| wide.grid().points(a) / 2)
        .min()
        .expect("boxes have at least one axis");
    let basis = Arc::new(SineBasis::new(omega.clone(), modes)?);
    let q_n = q_navier_strict(&expand(&wide, &basis)?, ord.m())?;

    let signed_gap = match ord.parity() {
        Parity::FloorEven => q_n - q_d,
        Parity::FloorOdd => q_d - q_n,
        Parity::Integer => unreachable!("rejected above"),
    };
    let n = omega.n();
    let l1 = l1_norm(u);
    let sep = outer_radius - support_radius;
    let bound_ratio = signed_gap.abs() * sep.powf(2.0 * (n as f64 + ord.m()))
        / (outer_radius.powi(n as i32) * l1 * l1);
    Ok(GapReport {
        m: ord.m(),
        n,
        support_radius,
        outer_radius,
        omega_half_width: half_width,
        q_dirichlet: q_d,
        q_navier: q_n,
        signed_gap,
        bound_ratio,
    })
}

/// Measure the gap of one function in a family of concentric cubes, one
/// report per half-width, in input order. The outer ball of each report is
/// the largest ball in that cube. Points run in parallel; each report is a
/// deterministic function of its half-width alone, so repeated half-widths
/// yield identical rows.
pub fn gap_sweep_domain(
    u: &GridFunction,
    ord: &FormOrder,
    half_widths: &[f64],
) -> Result<Vec<GapReport>> {
    let r = u.support_radius().ok_or_else(|| {
        Error::Precondition("the function carries no certified support radius".into())
    })?;
    for &h in half_widths {
        if !(h > r) {
            return Err(Error::Precondition(format!(
                "sweep half-width {h} does not exceed the support radius {r}"
            )));
        }
    }
    let n = u.grid().n();
    half_widths
        .par_iter()
        .map(|&h| gap_once(u, ord, &BoxDomain::cube(n, h)?, r, h))
        .collect()
}

/// Fit log |gap| against log (outer - support) by least squares over
/// reports of a common function and order. Points whose gap magnitude sits
/// below [`GAP_NOISE_FLOOR`] times the restricted form are excluded from
/// the fit and their indices reported back.
pub fn gap_rate_fit(reports: &[GapReport]) -> Result<RateFit> {
    let first = reports
        .first()
        .ok_or_else(|| Error::Precondition("no reports to fit".into()))?;
    for rep in reports {
        if rep.m != first.m || rep.n != first.n || rep.support_radius != first.support_radius {
            return Err(Error::Precondition(
                "rate fit needs reports of one function at one order".into(),
            ));
        }
    }

    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut excluded = Vec::new();
    for (i, rep) in reports.iter().enumerate() {
        if rep.signed_gap.abs() <= GAP_NOISE_FLOOR * rep.q_dirichlet {
            excluded.push(i);
        } else {
            xs.push((rep.outer_radius - rep.support_radius).ln());
            ys.push(rep.signed_gap.abs().ln());
        }
    }
    let mut seps = xs.clone();
    seps.sort_by(f64::total_cmp);
    seps.dedup();
    if seps.len() < 4 {
        return Err(Error::Precondition(format!(
            "rate fit needs at least 4 distinct separations above the noise \
             floor, got {}",
            seps.len()
        )));
    }

    let k = xs.len() as f64;
    let mean_x = xs.iter().sum::<f64>() / k;
    let mean_y = ys.iter().sum::<f64>() / k;
    let mut cov = 0.0;
    let mut var = 0.0;
    for (x, y) in xs.iter().zip(&ys) {
        cov += (x - mean_x) * (y - mean_y);
        var += (x - mean_x) * (x - mean_x);
    }
    let slope = cov / var;
    let intercept = mean_y - slope * mean_x;
    let envelope_exponent = -2.0 * (first.n as f64 + first.m);
    Ok(RateFit {
        slope,
        intercept,
        consistent_with_bound: slope <= envelope_exponent + 1.0,
        excluded,
    })
}

/// Spread of the bound ratio across a sweep, over the points whose gap is
/// above the noise floor.
pub fn ratio_envelope(reports: &[GapReport]) -> Result<RatioEnvelope> {
    let mut min = f64::INFINITY;
    let mut max = 0.0f64;
    for rep in reports {
        if rep.signed_gap.abs() > GAP_NOISE_FLOOR * rep.q_dirichlet {
            min = min.min(rep.bound_ratio);
            max = max.max(rep.bound_ratio);
        }
    }
    if !min.is_finite() {
        return Err(Error::Precondition(
            "every gap in the sweep sits below the noise floor".into(),
        ));
    }
    Ok(RatioEnvelope {
        min,
        max,
        violation: max > RATIO_SPREAD_LIMIT * min,
    })
}

/// Render sweep reports as CSV, one row per report.
pub fn reports_to_csv(reports: &[GapReport]) -> String {
    let mut out = String::from("m,n,r,R,omega,QD,QN,gap,bound_ratio\n");
    for rep in reports {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            rep.m,
            rep.n,
            rep.support_radius,
            rep.outer_radius,
            rep.omega_half_width,
            rep.q_dirichlet,
            rep.q_navier,
            rep.signed_gap,
            rep.bound_ratio
        )
        .expect("writing to a string cannot fail");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{make_bubble, make_bump, BubbleParams};

    fn grid1(h: f64, n: usize) -> Arc<UniformGrid> {
        Arc::new(UniformGrid::isotropic(BoxDomain::cube(1, h).unwrap(), n).unwrap())
    }

    /// The standard profile with support radius 0.25.
    fn small_bubble(grid: &Arc<UniformGrid>) -> GridFunction {
        let p = BubbleParams {
            n: 1,
            m: 0.3,
            eps: 0.5,
            delta: 0.125,
        };
        make_bubble(&p, grid).unwrap()
    }

    fn ord(m: f64) -> FormOrder {
        FormOrder::new(m).unwrap()
    }

    #[test]
    fn integer_orders_are_rejected() {
        let g = grid1(1.0, 256);
        let u = small_bubble(&g);
        let omega = BoxDomain::cube(1, 1.0).unwrap();
        for m in [1.0, 2.0] {
            assert!(matches!(
                gap_once(&u, &ord(m), &omega, 0.25, 1.0),
                Err(Error::InvalidOrder(_))
            ));
        }
    }

    #[test]
    fn orderings_hold_for_both_parities() {
        let g = grid1(1.0, 512);
        let u = small_bubble(&g);
        let omega = BoxDomain::cube(1, 1.0).unwrap();

        // Floor even: the restricted form is an infimum over the box class,
        // so the spectral form sits above it.
        let rep = gap_once(&u, &ord(0.4), &omega, 0.25, 1.0).unwrap();
        assert!(rep.q_dirichlet > 0.0 && rep.q_navier > 0.0);
        assert!((rep.signed_gap - (rep.q_navier - rep.q_dirichlet)).abs() < 1e-15);
        assert!(
            rep.signed_gap >= -ORDERING_SLACK * rep.q_dirichlet,
            "even-floor ordering violated: gap {}",
            rep.signed_gap
        );

        // Floor odd: the restricted form is a supremum, so the orientation
        // flips.
        let rep = gap_once(&u, &ord(1.5), &omega, 0.25, 1.0).unwrap();
        assert!((rep.signed_gap - (rep.q_dirichlet - rep.q_navier)).abs() < 1e-15);
        assert!(
            rep.signed_gap >= -ORDERING_SLACK * rep.q_dirichlet,
            "odd-floor ordering violated: gap {}",
            rep.signed_gap
        );
    }

    #[test]
    fn sweep_gap_decreases_and_ratio_stays_bounded() {
        let g = grid1(0.5, 256);
        let u = small_bubble(&g);
        let reports = gap_sweep_domain(&u, &ord(0.4), &[0.5, 1.0, 2.0, 4.0]).unwrap();
        assert_eq!(reports.len(), 4);

        for rep in &reports {
            assert!(rep.signed_gap >= -ORDERING_SLACK * rep.q_dirichlet);
            assert_eq!(rep.outer_radius, rep.omega_half_width);
        }
        // The restricted form never sees the box, so the column is constant.
        for rep in &reports[1..] {
            assert_eq!(rep.q_dirichlet, reports[0].q_dirichlet);
        }
        for pair in reports.windows(2) {
            assert!(
                pair[1].signed_gap.abs() < pair[0].signed_gap.abs(),
                "gap did not shrink: {} then {}",
                pair[0].signed_gap,
                pair[1].signed_gap
            );
        }
        let env = ratio_envelope(&reports).unwrap();
        assert!(!env.violation, "ratio spread {} / {}", env.max, env.min);
        assert!(env.max <= RATIO_SPREAD_LIMIT * env.min);
    }

    #[test]
    fn repeated_half_widths_give_identical_reports() {
        let g = grid1(0.5, 128);
        let u = small_bubble(&g);
        let reports = gap_sweep_domain(&u, &ord(0.4), &[1.0, 2.0, 1.0]).unwrap();
        assert_eq!(reports[0], reports[2]);
        assert_ne!(reports[0], reports[1]);
    }

    #[test]
    fn sweep_holds_for_the_odd_parity_class() {
        // The odd-class gap decays two orders faster than the even one, so
        // a wide sweep bottoms out on the forms' own accuracy floor around
        // a few parts in 1e6; this window keeps every gap a real signal.
        let g = grid1(0.5, 512);
        let u = small_bubble(&g);
        let reports = gap_sweep_domain(&u, &ord(1.5), &[0.5, 0.625, 0.75, 1.0]).unwrap();
        for rep in &reports {
            assert!(
                rep.signed_gap >= -ORDERING_SLACK * rep.q_dirichlet,
                "ordering violated at half-width {}: gap {}",
                rep.omega_half_width,
                rep.signed_gap
            );
        }
        for pair in reports.windows(2) {
            assert!(pair[1].signed_gap.abs() < pair[0].signed_gap.abs());
        }
        assert!(!ratio_envelope(&reports).unwrap().violation);
    }

    #[test]
    fn bound_ratio_is_scale_invariant() {
        let g = grid1(1.0, 256);
        let u = small_bubble(&g);
        let mut scaled = u.clone();
        for v in scaled.values_mut() {
            *v *= 3.0;
        }
        // Mutation drops the support certificate; scaling cannot widen the
        // support, so re-certifying the same radius succeeds.
        scaled.set_support_radius(0.25).unwrap();
        let omega = BoxDomain::cube(1, 1.0).unwrap();
        let a = gap_once(&u, &ord(0.4), &omega, 0.25, 1.0).unwrap();
        let b = gap_once(&scaled, &ord(0.4), &omega, 0.25, 1.0).unwrap();
        assert!((b.signed_gap - 9.0 * a.signed_gap).abs() <= 1e-12 * a.signed_gap.abs() * 9.0);
        assert!((b.bound_ratio - a.bound_ratio).abs() <= 1e-12 * a.bound_ratio);
    }

    #[test]
    fn fit_recovers_a_planted_power_law() {
        // Synthetic reports: gap = 7 * sep^{-(2n+2m)} exactly.
        let m = 0.4;
        let expo = -(2.0 + 2.0 * m);
        let reports: Vec<GapReport> = [0.25, 0.75, 1.75, 3.75]
            .iter()
            .map(|&sep| GapReport {
                m,
                n: 1,
                support_radius: 0.25,
                outer_radius: 0.25 + sep,
                omega_half_width: 0.25 + sep,
                q_dirichlet: 1.0,
                q_navier: 1.0,
                signed_gap: 7.0 * sep.powf(expo),
                bound_ratio: 1.0,
            })
            .collect();
        let fit = gap_rate_fit(&reports).unwrap();
        assert!((fit.slope - expo).abs() < 1e-6, "slope {}", fit.slope);
        assert!((fit.intercept - 7.0f64.ln()).abs() < 1e-6);
        assert!(fit.consistent_with_bound);
        assert!(fit.excluded.is_empty());
    }

    #[test]
    fn fit_flags_constant_gaps_and_excludes_noise() {
        let base = GapReport {
            m: 0.4,
            n: 1,
            support_radius: 0.25,
            outer_radius: 1.0,
            omega_half_width: 1.0,
            q_dirichlet: 1.0,
            q_navier: 1.0,
            signed_gap: 0.5,
            bound_ratio: 1.0,
        };
        let mut reports = Vec::new();
        for (i, &outer) in [0.5, 1.0, 2.0, 4.0, 8.0].iter().enumerate() {
            let mut rep = base;
            rep.outer_radius = outer;
            rep.omega_half_width = outer;
            if i == 3 {
                // One point buried in cancellation noise.
                rep.signed_gap = 1e-14;
            }
            reports.push(rep);
        }
        let fit = gap_rate_fit(&reports).unwrap();
        assert_eq!(fit.excluded, vec![3]);
        assert!(fit.slope.abs() < 1e-12, "slope {}", fit.slope);
        assert!(!fit.consistent_with_bound);

        // Dropping to three distinct separations starves the fit.
        assert!(matches!(
            gap_rate_fit(&reports[..4]),
            Err(Error::Precondition(_))
        ));
        // Mixed orders cannot be fit together.
        let mut foreign = base;
        foreign.m = 0.6;
        reports[4] = foreign;
        assert!(matches!(
            gap_rate_fit(&reports),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn measured_decay_rate_sits_in_the_observed_band() {
        let g = grid1(0.5, 256);
        let u = small_bubble(&g);
        let reports = gap_sweep_domain(&u, &ord(0.4), &[0.5, 1.0, 2.0, 4.0]).unwrap();
        let fit = gap_rate_fit(&reports).unwrap();
        assert!(fit.excluded.is_empty());
        // Measured decay over this pre-asymptotic window is distinctly
        // slower than the envelope exponent -2.8; the envelope itself is
        // checked through the bounded ratio, not the local slope.
        assert!(
            fit.slope <= -1.2 && fit.slope >= -2.0,
            "slope {} left the observed band",
            fit.slope
        );
    }

    #[test]
    fn two_dimensional_sweep_obeys_the_same_ordering() {
        let d = BoxDomain::cube(2, 0.5).unwrap();
        // 128 points per axis: the smallest box retains 64 modes per axis,
        // which the strict tail gate on the spectral form needs for a bump
        // this narrow.
        let g = Arc::new(UniformGrid::isotropic(d, 128).unwrap());
        let u = make_bump(&g, 0.3).unwrap();
        let reports = gap_sweep_domain(&u, &ord(0.6), &[0.5, 1.0, 2.0]).unwrap();
        for rep in &reports {
            assert_eq!(rep.n, 2);
            assert!(rep.signed_gap >= -ORDERING_SLACK * rep.q_dirichlet);
        }
        for pair in reports.windows(2) {
            assert!(pair[1].signed_gap.abs() < pair[0].signed_gap.abs());
        }
        assert!(ratio_envelope(&reports).unwrap().max.is_finite());
    }

    #[test]
    fn csv_has_one_row_per_report_and_the_header() {
        let g = grid1(0.5, 128);
        let u = small_bubble(&g);
        let reports = gap_sweep_domain(&u, &ord(0.4), &[0.5, 1.0]).unwrap();
        let csv = reports_to_csv(&reports);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "m,n,r,R,omega,QD,QN,gap,bound_ratio");
        assert_eq!(lines.len(), 3);
        let fields: Vec<&str> = lines[1].split(',').collect();
        assert_eq!(fields.len(), 9);
        assert_eq!(fields[0], "0.4");
        assert_eq!(fields[4].parse::<f64>().unwrap(), 0.5);
    }

    #[test]
    fn preconditions_are_enforced() {
        let g = grid1(1.0, 256);
        let u = small_bubble(&g);
        let omega = BoxDomain::cube(1, 1.0).unwrap();
        let m04 = ord(0.4);

        // Declared ball smaller than the certified support.
        assert!(matches!(
            gap_once(&u, &m04, &omega, 0.2, 1.0),
            Err(Error::Precondition(_))
        ));
        // No certified support at all.
        let bare = GridFunction::sample(g.clone(), |x| (1.0 - x[0] * x[0]).max(0.0)).unwrap();
        assert!(matches!(
            gap_once(&bare, &m04, &omega, 0.25, 1.0),
            Err(Error::Precondition(_))
        ));
        // Outer ball poking out of the box, and radii out of order.
        assert!(gap_once(&u, &m04, &omega, 0.25, 1.5).is_err());
        assert!(gap_once(&u, &m04, &omega, 0.25, 0.2).is_err());
        // A box that does not extend the grid by whole cells.
        let odd_box = BoxDomain::cube(1, 1.3).unwrap();
        assert!(matches!(
            gap_once(&u, &m04, &odd_box, 0.25, 1.0),
            Err(Error::Precondition(_))
        ));
        // Sweep half-width at or below the support radius.
        assert!(gap_sweep_domain(&u, &m04, &[0.25, 1.0]).is_err());
    }
}
