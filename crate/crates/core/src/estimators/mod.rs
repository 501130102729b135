//! Numerical estimates of the constants the coercive-inequality theory asserts to exist.
//!
//! Every constant is a lower bound obtained by maximizing over a finite family of test
//! functions or configurations, paired with a refinement or radius-stability flag.

mod dobrushin;
mod dynamics;
mod family;
mod report;
mod sgi;
mod ubound;

pub use dobrushin::{
    closed_form_constants, dobrushin_check, dobrushin_sweep, estimate_threshold,
    unit_sphere_points, ClosedForm, DobrushinParams, DobrushinResult, DobrushinSweep, Threshold,
};
pub use dynamics::{
    boundary_sensitivity, contraction_rate, fit_rate, gradient_series, nearest_config,
    sweepout_check, DecayMatrix, RateFit, EXACT_FLOOR,
};
pub use family::{build_family, inscribed_radius, FamilySpec, LogValue, TestFunction};
pub use report::{fit_line, write_csv, EstimateReport, LineFit, RunContext};
pub use sgi::{
    estimate_sgi_constant, estimate_sgi_on, generator_gap, rayleigh_max, DiscreteMeasure,
    GeneratorGap, RayleighMax, SgiParams, MAX_GENERATOR_NODES, MIN_DENOMINATOR,
};
pub use ubound::{
    c1_ratio, c2_points, c2_sup, verify_gradient_bound_c2, verify_ubound_c1, C1Params, C1Point,
    C2Params, C2Point, UBoundFunction, MIN_C1_RHS,
};
