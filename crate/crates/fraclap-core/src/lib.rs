//! Fractional Dirichlet and Navier Laplacian quadratic forms on boxes.
//!
//! The crate computes, for functions supported inside an origin-centered box:
//!
//! * the unconstrained (Dirichlet) form of order m via oscillatory lattice
//!   quadrature in frequency space ([`fourier`]),
//! * the box-adapted (Navier) spectral form built from Dirichlet Laplacian
//!   eigenfunctions ([`navier`]),
//! * the gap between the two forms and its decay under domain growth
//!   ([`gap`]),
//! * harmonic-extension solvers that realize the fractional form as a
//!   degenerate elliptic energy on a half-cylinder ([`extension`]),
//! * constrained Rayleigh-quotient minimization for ground states with a
//!   Hardy-type spectral perturbation ([`ground_state`]).
//!
//! All quadratures and reductions are deterministic: results are bit-stable
//! across run counts and thread counts (see [`numeric`]).

pub mod domain;
pub mod error;
pub mod extension;
pub mod fourier;
pub mod gagliardo;
pub mod gap;
pub mod ground_state;
pub mod navier;
pub mod numeric;

pub use domain::{
    hardy_cell_weights, hardy_integral, l1_norm, lp_norm, make_bubble, make_bump, make_cutoff,
    BoxDomain, BubbleParams, GridFunction, UniformGrid,
};
pub use error::{Error, Result};
pub use extension::{
    calibrate_c2, cylinder_navier, cylinder_navier_dual, energy_direct, poisson_direct,
    poisson_dual, q_dirichlet_dual, CylinderGrid, DualCheck, ExtensionField, FieldKind,
};
pub use fourier::{
    dilation_check, laplacian_power_k, q_dirichlet, q_dirichlet_checked, q_dirichlet_raw,
    transform, FormOrder, PaddedSpectrum, Parity, DEFAULT_PAD,
};
pub use gagliardo::gagliardo_form;
pub use gap::{
    gap_once, gap_rate_fit, gap_sweep_domain, ratio_envelope, reports_to_csv, GapReport,
    RateFit, RatioEnvelope,
};
pub use ground_state::{
    bubble_curve, critical_scan, minimize, rayleigh, scan_to_csv, sobolev_constant_estimate,
    BNProblem, BubbleLadder, Perturbation, RayleighReport, ScanCell, ScanConfig, ScanOutcome,
    ScanRecord, SobolevEstimate,
};
pub use navier::{
    el_residual, expand, lambda1, lambda1_hardy, q_navier, q_navier_strict, reconstruct,
    NavierValue, SineBasis, SpectralCoeffs,
};
