//! Heisenberg group arithmetic, sub-gradients and homogeneous norms.
//!
//! The group is ℝ³ with the law
//! `a ∘ b = (a1 + b1, a2 + b2, a3 + b3 + 2(a1 b2 − a2 b1))`,
//! dilations `δ_λ(x) = (λx1, λx2, λ²x3)` and the generating vector fields
//! `X¹ = ∂1 + 2x2 ∂3`, `X² = ∂2 − 2x1 ∂3` whose bracket is `−4∂3`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A point of the Heisenberg group: horizontal part `(x1, x2)`, vertical part `x3`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GroupPoint {
    pub x1: f64,
    pub x2: f64,
    pub x3: f64,
}

impl GroupPoint {
    pub const IDENTITY: GroupPoint = GroupPoint {
        x1: 0.0,
        x2: 0.0,
        x3: 0.0,
    };

    pub const fn new(x1: f64, x2: f64, x3: f64) -> Self {
        Self { x1, x2, x3 }
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x1, self.x2, self.x3]
    }

    /// Euclidean length of the horizontal part.
    pub fn horizontal_len(&self) -> f64 {
        self.x1.hypot(self.x2)
    }

    pub fn compose(&self, other: &GroupPoint) -> GroupPoint {
        compose(self, other)
    }

    pub fn inverse(&self) -> GroupPoint {
        inverse(self)
    }

    pub fn is_finite(&self) -> bool {
        self.x1.is_finite() && self.x2.is_finite() && self.x3.is_finite()
    }
}

/// Coefficients of a horizontal vector on `X¹`, `X²`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct HorizontalVector {
    pub v1: f64,
    pub v2: f64,
}

impl HorizontalVector {
    pub const fn new(v1: f64, v2: f64) -> Self {
        Self { v1, v2 }
    }

    pub fn euclidean_length(&self) -> f64 {
        self.v1.hypot(self.v2)
    }

    pub fn scale(self, s: f64) -> Self {
        Self::new(self.v1 * s, self.v2 * s)
    }
}

impl std::ops::Add for HorizontalVector {
    type Output = HorizontalVector;
    fn add(self, o: HorizontalVector) -> HorizontalVector {
        HorizontalVector::new(self.v1 + o.v1, self.v2 + o.v2)
    }
}

pub fn compose(a: &GroupPoint, b: &GroupPoint) -> GroupPoint {
    GroupPoint {
        x1: a.x1 + b.x1,
        x2: a.x2 + b.x2,
        x3: a.x3 + b.x3 + 2.0 * (a.x1 * b.x2 - a.x2 * b.x1),
    }
}

/// Group inverse; coordinatewise negation.
pub fn inverse(a: &GroupPoint) -> GroupPoint {
    GroupPoint::new(-a.x1, -a.x2, -a.x3)
}

pub fn dilate(lambda: f64, a: &GroupPoint) -> Result<GroupPoint> {
    if !(lambda > 0.0) {
        return Err(Error::NonPositiveDilation(lambda));
    }
    Ok(GroupPoint::new(
        lambda * a.x1,
        lambda * a.x2,
        lambda * lambda * a.x3,
    ))
}

/// How sub-gradients are obtained.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum GradientMode {
    Analytic,
    /// Symmetric differences with step `step * (1 + |a|)`.
    FiniteDifference {
        step: f64,
    },
}

impl Default for GradientMode {
    fn default() -> Self {
        GradientMode::FiniteDifference {
            step: DEFAULT_FD_STEP,
        }
    }
}

pub const DEFAULT_FD_STEP: f64 = 1e-4;

/// A scalar field on the group.
pub trait ScalarField {
    fn value(&self, a: &GroupPoint) -> f64;

    /// Closed-form sub-gradient, if the field has one.
    fn analytic_subgradient(&self, _a: &GroupPoint) -> Option<Result<HorizontalVector>> {
        None
    }
}

impl<F: Fn(&GroupPoint) -> f64> ScalarField for F {
    fn value(&self, a: &GroupPoint) -> f64 {
        self(a)
    }
}

/// `(X¹f(a), X²f(a))`.
pub fn apply_subgradient<F: ScalarField + ?Sized>(
    f: &F,
    a: &GroupPoint,
    mode: GradientMode,
) -> Result<HorizontalVector> {
    match mode {
        GradientMode::Analytic => f
            .analytic_subgradient(a)
            .unwrap_or_else(|| Err(Error::NoAnalyticGradient("scalar field".into()))),
        GradientMode::FiniteDifference { step } => {
            if !(step > 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "finite-difference step must be positive, got {step}"
                )));
            }
            let scale = 1.0 + (a.x1 * a.x1 + a.x2 * a.x2 + a.x3 * a.x3).sqrt();
            let h = step * scale;
            let eval = |p: GroupPoint| -> Result<f64> {
                let v = f.value(&p);
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(Error::NonFinite {
                        what: format!("scalar field at {:?}", p.to_array()),
                        value: v,
                    })
                }
            };
            let d = |e: [f64; 3]| -> Result<f64> {
                let plus = GroupPoint::new(a.x1 + h * e[0], a.x2 + h * e[1], a.x3 + h * e[2]);
                let minus = GroupPoint::new(a.x1 - h * e[0], a.x2 - h * e[1], a.x3 - h * e[2]);
                Ok((eval(plus)? - eval(minus)?) / (2.0 * h))
            };
            let d1 = d([1.0, 0.0, 0.0])?;
            let d2 = d([0.0, 1.0, 0.0])?;
            let d3 = d([0.0, 0.0, 1.0])?;
            Ok(HorizontalVector::new(
                d1 + 2.0 * a.x2 * d3,
                d2 - 2.0 * a.x1 * d3,
            ))
        }
    }
}

/// Center weight making `(|w|⁴ + c z²)^{1/4}` satisfy `|∇N| = |w|/N` for this group law.
pub const KAPLAN_CENTER_WEIGHT: f64 = 1.0;

/// Gauge `(|w|⁴ + c·z²)^{1/4}` for an arbitrary center weight `c > 0`.
pub fn gauge_norm(a: &GroupPoint, center_weight: f64) -> f64 {
    let w2 = a.x1 * a.x1 + a.x2 * a.x2;
    (w2 * w2 + center_weight * a.x3 * a.x3).sqrt().sqrt()
}

fn gauge_subgradient(a: &GroupPoint, center_weight: f64) -> Result<HorizontalVector> {
    let n = gauge_norm(a, center_weight);
    if n == 0.0 {
        return Err(not_differentiable(a));
    }
    let w2 = a.x1 * a.x1 + a.x2 * a.x2;
    let n3 = n * n * n;
    Ok(HorizontalVector::new(
        (w2 * a.x1 + center_weight * a.x2 * a.x3) / n3,
        (w2 * a.x2 - center_weight * a.x1 * a.x3) / n3,
    ))
}

/// Kaplan norm, the gauge whose sub-gradient has length `|w|/N`.
pub fn kaplan_norm(a: &GroupPoint) -> f64 {
    gauge_norm(a, KAPLAN_CENTER_WEIGHT)
}

pub fn horizontal_norm(a: &GroupPoint) -> f64 {
    a.horizontal_len()
}

fn not_differentiable(a: &GroupPoint) -> Error {
    Error::NotDifferentiable(a.x1, a.x2, a.x3)
}

/// Result of the geodesic solve behind [`cc_distance`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CcSolution {
    pub distance: f64,
    /// Turning angle of the horizontal projection of the geodesic, in `[0, 2π]`.
    pub turning_angle: f64,
    /// Relative residual of the angle equation.
    pub residual: f64,
    pub iterations: usize,
}

/// Turning angle θ together with `sin(θ/2)`, `cos(θ/2)` kept accurate near 2π.
#[derive(Debug, Clone, Copy)]
struct Angle {
    theta: f64,
    s: f64,
    c: f64,
}

impl Angle {
    fn low(theta: f64) -> Self {
        Self {
            theta,
            s: (0.5 * theta).sin(),
            c: (0.5 * theta).cos(),
        }
    }

    /// θ = 2π − 2ψ.
    fn high(psi: f64) -> Self {
        Self {
            theta: 2.0 * PI - 2.0 * psi,
            s: psi.sin(),
            c: -psi.cos(),
        }
    }

    fn theta_minus_sin(&self) -> f64 {
        let t = self.theta;
        if t < 0.05 {
            let t2 = t * t;
            t * t2 / 6.0 * (1.0 - t2 / 20.0 * (1.0 - t2 / 42.0 * (1.0 - t2 / 72.0)))
        } else {
            t - 2.0 * self.s * self.c
        }
    }

    /// `μ(θ) = (θ − sin θ) / (2 sin²(θ/2))`, the ratio `|z|/|w|²` reached with turning angle θ,
    /// and `μ'(θ)`.
    fn ratio_and_slope(&self) -> (f64, f64) {
        if self.theta == 0.0 {
            return (0.0, 1.0 / 3.0);
        }
        let n = self.theta_minus_sin();
        let s2 = self.s * self.s;
        (n / (2.0 * s2), 1.0 - n * self.c / (2.0 * s2 * self.s))
    }

    /// `F(θ) = θ / (2 sin(θ/2))` and `F'(θ)`.
    fn arc_factor(&self) -> (f64, f64) {
        let t = self.theta;
        if t < 1e-3 {
            (1.0 + t * t / 24.0, t / 12.0)
        } else {
            let s2 = self.s * self.s;
            (t / (2.0 * self.s), (2.0 * self.s - t * self.c) / (4.0 * s2))
        }
    }
}

/// Safeguarded Newton for an increasing `g` on `[lo, hi]` with `g(lo) ≤ 0 ≤ g(hi)`.
fn bracketed_newton(
    g: impl Fn(f64) -> (f64, f64),
    mut lo: f64,
    mut hi: f64,
    mut t: f64,
) -> (f64, usize) {
    for it in 1..=200 {
        let (v, dv) = g(t);
        if v == 0.0 {
            return (t, it);
        }
        if v > 0.0 {
            hi = t;
        } else {
            lo = t;
        }
        let mut next = t - v / dv;
        if !next.is_finite() || next <= lo || next >= hi {
            next = 0.5 * (lo + hi);
        }
        let done = (next - t).abs() <= 4.0 * f64::EPSILON * t.abs().max(f64::MIN_POSITIVE)
            || hi - lo <= 2.0 * f64::EPSILON * hi.abs();
        t = next;
        if done {
            return (t, it);
        }
    }
    (t, 200)
}

/// Solves `μ(θ) = ratio`; angles past π are parametrized by `ψ = π − θ/2`.
fn solve_turning_angle(ratio: f64) -> (Angle, f64, usize) {
    let (angle, iterations) = if ratio <= 0.5 * PI {
        let (t, it) = bracketed_newton(
            |t| {
                let (m, dm) = Angle::low(t).ratio_and_slope();
                (m - ratio, dm)
            },
            0.0,
            PI,
            (3.0 * ratio).min(PI),
        );
        (Angle::low(t), it)
    } else {
        // μ decreases in ψ, so solve ratio − μ(ψ) = 0
        let (p, it) = bracketed_newton(
            |p| {
                let (m, dm) = Angle::high(p).ratio_and_slope();
                (ratio - m, 2.0 * dm)
            },
            0.0,
            0.5 * PI,
            (PI / ratio).sqrt().min(0.5 * PI),
        );
        (Angle::high(p), it)
    };
    let residual = ((angle.ratio_and_slope().0 - ratio) / ratio).abs();
    (angle, residual, iterations)
}

/// Tolerance on the relative residual of the turning-angle equation.
pub const CC_RESIDUAL_TOL: f64 = 1e-9;

fn solve_cc(a: &GroupPoint) -> Result<(f64, Option<Angle>, f64, usize)> {
    if !a.is_finite() {
        return Err(Error::NonFinite {
            what: "cc_distance input".into(),
            value: f64::NAN,
        });
    }
    let w = a.horizontal_len();
    let z = a.x3.abs();
    if z == 0.0 {
        return Ok((w, Some(Angle::low(0.0)), 0.0, 0));
    }
    if w == 0.0 || z / (w * w) > 1e30 {
        return Ok(((PI * z).sqrt(), None, 0.0, 0));
    }
    let (angle, residual, iterations) = solve_turning_angle(z / (w * w));
    if !(residual <= CC_RESIDUAL_TOL) {
        return Err(Error::SolverNonConvergence { residual });
    }
    Ok((w * angle.arc_factor().0, Some(angle), residual, iterations))
}

/// Solves the geodesic problem from the identity to `a` over the helix family.
///
/// The horizontal projection of a length-minimizing curve is a circular arc
/// with turning angle θ ∈ [0, 2π]; the enclosed area fixes `|x3|/|w|²`, so θ is
/// the root of a monotone scalar equation and `d = θ|w| / (2 sin(θ/2))`.
pub fn cc_distance_solve(a: &GroupPoint) -> Result<CcSolution> {
    let (distance, angle, residual, iterations) = solve_cc(a)?;
    Ok(CcSolution {
        distance,
        turning_angle: angle.map_or(2.0 * PI, |g| g.theta),
        residual,
        iterations,
    })
}

/// Carnot-Carathéodory norm `d(a) = d(a, 0)`.
pub fn cc_distance(a: &GroupPoint) -> f64 {
    match solve_cc(a) {
        Ok(s) => s.0,
        Err(_) => f64::NAN,
    }
}

/// Closed-form sub-gradient of `d` away from the center.
fn cc_subgradient(a: &GroupPoint) -> Result<HorizontalVector> {
    let w = a.horizontal_len();
    let (_, angle, _, _) = solve_cc(a)?;
    let angle = match angle {
        Some(g) if w > 0.0 => g,
        _ => return Err(not_differentiable(a)),
    };
    let r = a.x3.abs() / (w * w);
    let (f, fp) = angle.arc_factor();
    let (_, mu_p) = angle.ratio_and_slope();
    // d = |w| F(θ(r)), r = |z|/|w|²
    let dd_dw = f - 2.0 * r * fp / mu_p;
    let dd_dz = a.x3.signum() * fp / (w * mu_p);
    let d1 = a.x1 / w * dd_dw;
    let d2 = a.x2 / w * dd_dw;
    Ok(HorizontalVector::new(
        d1 + 2.0 * a.x2 * dd_dz,
        d2 - 2.0 * a.x1 * dd_dz,
    ))
}

/// `d(b⁻¹ ∘ a)`; invariant under `a, b ↦ g∘a, g∘b`.
pub fn left_translate_distance(g: &GroupPoint, a: &GroupPoint, b: &GroupPoint) -> Result<f64> {
    let ga = compose(g, a);
    let gb = compose(g, b);
    Ok(cc_distance_solve(&compose(&inverse(&gb), &ga))?.distance)
}

/// Shape of a homogeneous norm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NormKind {
    Kaplan,
    CarnotCaratheodory,
    /// Horizontal quasinorm `|w|`; vanishes on the center.
    Horizontal,
    /// `(|w|⁴ + c z²)^{1/4}` with explicit center weight.
    Gauge {
        center_weight: f64,
    },
    /// Euclidean norm of the first `dim` coordinates (ℝⁿ spin spaces).
    Euclidean {
        dim: usize,
    },
    /// `(Π ρ_k^{e_k})^{1/Σ e_k}`.
    PowerProduct {
        factors: Vec<(NormKind, f64)>,
    },
    /// `Σ c_k ρ_k` with `c_k ≥ 0`.
    LinearCombination {
        terms: Vec<(f64, NormKind)>,
    },
}

impl NormKind {
    pub fn label(&self) -> String {
        match self {
            NormKind::Kaplan => "N".into(),
            NormKind::CarnotCaratheodory => "d".into(),
            NormKind::Horizontal => "|h|".into(),
            NormKind::Gauge { center_weight } => format!("gauge[{center_weight}]"),
            NormKind::Euclidean { .. } => "|x|".into(),
            NormKind::PowerProduct { factors } => {
                let parts: Vec<String> = factors
                    .iter()
                    .map(|(k, e)| format!("{}^{e}", k.label()))
                    .collect();
                format!("pp({})", parts.join("*"))
            }
            NormKind::LinearCombination { terms } => {
                let parts: Vec<String> = terms
                    .iter()
                    .map(|(c, k)| format!("{c}*{}", k.label()))
                    .collect();
                format!("lc({})", parts.join("+"))
            }
        }
    }

    /// True for norms defined on the Heisenberg group.
    pub fn is_heisenberg(&self) -> bool {
        match self {
            NormKind::Euclidean { .. } => false,
            NormKind::PowerProduct { factors } => factors.iter().all(|(k, _)| k.is_heisenberg()),
            NormKind::LinearCombination { terms } => terms.iter().all(|(_, k)| k.is_heisenberg()),
            _ => true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            NormKind::Gauge { center_weight } if !(*center_weight > 0.0) => Err(
                Error::InvalidParameter(format!("gauge center weight {center_weight} must be > 0")),
            ),
            NormKind::Euclidean { dim } if !(1..=3).contains(dim) => Err(Error::InvalidParameter(
                format!("euclidean spin dimension {dim} outside 1..=3"),
            )),
            NormKind::PowerProduct { factors } => {
                if factors.is_empty() {
                    return Err(Error::InvalidParameter("empty power product".into()));
                }
                let total: f64 = factors.iter().map(|(_, e)| *e).sum();
                if factors.iter().any(|(_, e)| !(*e > 0.0)) || !(total > 0.0) {
                    return Err(Error::InvalidParameter(
                        "power-product exponents must be positive".into(),
                    ));
                }
                factors.iter().try_for_each(|(k, _)| k.validate())
            }
            NormKind::LinearCombination { terms } => {
                if terms.is_empty() || terms.iter().any(|(c, _)| !(*c >= 0.0)) {
                    return Err(Error::InvalidParameter(
                        "linear combination needs nonnegative coefficients".into(),
                    ));
                }
                if terms.iter().all(|(c, _)| *c == 0.0) {
                    return Err(Error::InvalidParameter("all coefficients are zero".into()));
                }
                terms.iter().try_for_each(|(_, k)| k.validate())
            }
            _ => Ok(()),
        }
    }

    /// Norm value at a spin `x` (group point coordinates, or ℝⁿ padded with zeros).
    pub fn eval(&self, x: &[f64; 3]) -> f64 {
        match self {
            NormKind::Kaplan => kaplan_norm(&GroupPoint::from_array(*x)),
            NormKind::CarnotCaratheodory => cc_distance(&GroupPoint::from_array(*x)),
            NormKind::Horizontal => x[0].hypot(x[1]),
            NormKind::Gauge { center_weight } => {
                gauge_norm(&GroupPoint::from_array(*x), *center_weight)
            }
            NormKind::Euclidean { dim } => x[..*dim].iter().map(|v| v * v).sum::<f64>().sqrt(),
            NormKind::PowerProduct { factors } => {
                let total: f64 = factors.iter().map(|(_, e)| *e).sum();
                let log_sum: f64 = factors
                    .iter()
                    .map(|(k, e)| {
                        let v = k.eval(x);
                        if v == 0.0 {
                            f64::NEG_INFINITY
                        } else {
                            e * v.ln()
                        }
                    })
                    .sum();
                if log_sum == f64::NEG_INFINITY {
                    0.0
                } else {
                    (log_sum / total).exp()
                }
            }
            NormKind::LinearCombination { terms } => terms.iter().map(|(c, k)| c * k.eval(x)).sum(),
        }
    }

    /// Closed-form gradient (sub-gradient on ℍ, Euclidean gradient on ℝⁿ), padded to 3 slots.
    pub fn analytic_gradient(&self, x: &[f64; 3]) -> Result<[f64; 3]> {
        let p = GroupPoint::from_array(*x);
        match self {
            NormKind::Kaplan => gauge_subgradient(&p, KAPLAN_CENTER_WEIGHT).map(hv3),
            NormKind::Gauge { center_weight } => gauge_subgradient(&p, *center_weight).map(hv3),
            NormKind::CarnotCaratheodory => cc_subgradient(&p).map(hv3),
            NormKind::Horizontal => {
                let w = p.horizontal_len();
                if w == 0.0 {
                    Err(not_differentiable(&p))
                } else {
                    Ok([x[0] / w, x[1] / w, 0.0])
                }
            }
            NormKind::Euclidean { dim } => {
                let r = self.eval(x);
                if r == 0.0 {
                    return Err(not_differentiable(&p));
                }
                let mut g = [0.0; 3];
                for k in 0..*dim {
                    g[k] = x[k] / r;
                }
                Ok(g)
            }
            NormKind::PowerProduct { factors } => {
                let total: f64 = factors.iter().map(|(_, e)| *e).sum();
                let value = self.eval(x);
                if value == 0.0 {
                    return Err(not_differentiable(&p));
                }
                let mut g = [0.0; 3];
                for (k, e) in factors {
                    let v = k.eval(x);
                    if v == 0.0 {
                        return Err(not_differentiable(&p));
                    }
                    let gk = k.analytic_gradient(x)?;
                    for c in 0..3 {
                        g[c] += value * e / total * gk[c] / v;
                    }
                }
                Ok(g)
            }
            NormKind::LinearCombination { terms } => {
                let mut g = [0.0; 3];
                for (c, k) in terms {
                    if *c == 0.0 {
                        continue;
                    }
                    let gk = k.analytic_gradient(x)?;
                    for i in 0..3 {
                        g[i] += c * gk[i];
                    }
                }
                Ok(g)
            }
        }
    }

    /// Points where the norm is known not to be differentiable.
    pub fn is_singular_at(&self, x: &[f64; 3]) -> bool {
        match self {
            NormKind::Kaplan | NormKind::Gauge { .. } => x.iter().all(|v| *v == 0.0),
            NormKind::CarnotCaratheodory | NormKind::Horizontal => x[0] == 0.0 && x[1] == 0.0,
            NormKind::Euclidean { dim } => x[..*dim].iter().all(|v| *v == 0.0),
            NormKind::PowerProduct { factors } => factors
                .iter()
                .any(|(k, _)| k.is_singular_at(x) || k.eval(x) == 0.0),
            NormKind::LinearCombination { terms } => {
                terms.iter().any(|(c, k)| *c != 0.0 && k.is_singular_at(x))
            }
        }
    }
}

fn hv3(v: HorizontalVector) -> [f64; 3] {
    [v.v1, v.v2, 0.0]
}

/// A homogeneous norm together with the way its gradient is evaluated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HomogeneousNorm {
    pub kind: NormKind,
    #[serde(default = "analytic_mode")]
    pub gradient_mode: GradientMode,
}

fn analytic_mode() -> GradientMode {
    GradientMode::Analytic
}

impl HomogeneousNorm {
    pub fn new(kind: NormKind) -> Self {
        Self {
            kind,
            gradient_mode: GradientMode::Analytic,
        }
    }

    pub fn kaplan() -> Self {
        Self::new(NormKind::Kaplan)
    }

    pub fn cc() -> Self {
        Self::new(NormKind::CarnotCaratheodory)
    }

    pub fn horizontal() -> Self {
        Self::new(NormKind::Horizontal)
    }

    pub fn euclidean(dim: usize) -> Self {
        Self::new(NormKind::Euclidean { dim })
    }

    pub fn with_mode(mut self, mode: GradientMode) -> Self {
        self.gradient_mode = mode;
        self
    }

    pub fn eval(&self, x: &[f64; 3]) -> f64 {
        self.kind.eval(x)
    }

    pub fn eval_point(&self, a: &GroupPoint) -> f64 {
        self.kind.eval(&a.to_array())
    }

    /// Gradient in the configured mode; `NotDifferentiable` at singular points.
    pub fn gradient(&self, x: &[f64; 3]) -> Result<[f64; 3]> {
        if self.kind.is_singular_at(x) {
            return Err(Error::NotDifferentiable(x[0], x[1], x[2]));
        }
        match self.gradient_mode {
            GradientMode::Analytic => self.kind.analytic_gradient(x),
            GradientMode::FiniteDifference { .. } => match &self.kind {
                NormKind::Euclidean { dim } => {
                    euclidean_fd_gradient(&|y| self.kind.eval(y), x, *dim, self.gradient_mode)
                }
                _ => apply_subgradient(self, &GroupPoint::from_array(*x), self.gradient_mode)
                    .map(hv3),
            },
        }
    }
}

impl ScalarField for HomogeneousNorm {
    fn value(&self, a: &GroupPoint) -> f64 {
        self.eval_point(a)
    }

    fn analytic_subgradient(&self, a: &GroupPoint) -> Option<Result<HorizontalVector>> {
        let x = a.to_array();
        if self.kind.is_singular_at(&x) {
            return Some(Err(not_differentiable(a)));
        }
        Some(
            self.kind
                .analytic_gradient(&x)
                .map(|g| HorizontalVector::new(g[0], g[1])),
        )
    }
}

/// Symmetric-difference Euclidean gradient over the first `dim` coordinates.
pub fn euclidean_fd_gradient(
    f: &dyn Fn(&[f64; 3]) -> f64,
    x: &[f64; 3],
    dim: usize,
    mode: GradientMode,
) -> Result<[f64; 3]> {
    let step = match mode {
        GradientMode::FiniteDifference { step } => step,
        GradientMode::Analytic => DEFAULT_FD_STEP,
    };
    let scale = 1.0 + x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let h = step * scale;
    let mut g = [0.0; 3];
    for k in 0..dim {
        let mut p = *x;
        let mut m = *x;
        p[k] += h;
        m[k] -= h;
        let (fp, fm) = (f(&p), f(&m));
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite {
                what: "euclidean field".into(),
                value: if fp.is_finite() { fm } else { fp },
            });
        }
        g[k] = (fp - fm) / (2.0 * h);
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn compose_examples() {
        let r = compose(
            &GroupPoint::new(1.0, 0.0, 0.0),
            &GroupPoint::new(0.0, 1.0, 0.0),
        );
        assert_eq!(r, GroupPoint::new(1.0, 1.0, 2.0));
        let a = GroupPoint::new(0.3, -1.2, 4.0);
        assert_eq!(compose(&GroupPoint::IDENTITY, &a), a);
        let r = compose(
            &GroupPoint::new(1.0, 2.0, 3.0),
            &GroupPoint::new(-1.0, -2.0, -3.0),
        );
        assert_eq!(r, GroupPoint::IDENTITY);
    }

    #[test]
    fn inverse_examples() {
        assert_eq!(
            inverse(&GroupPoint::new(1.0, 2.0, 3.0)),
            GroupPoint::new(-1.0, -2.0, -3.0)
        );
        assert_eq!(inverse(&GroupPoint::IDENTITY), GroupPoint::IDENTITY);
    }

    #[test]
    fn dilate_examples_and_rejection() {
        let a = GroupPoint::new(1.0, 1.0, 1.0);
        assert_eq!(dilate(2.0, &a).unwrap(), GroupPoint::new(2.0, 2.0, 4.0));
        assert_eq!(dilate(1.0, &a).unwrap(), a);
        assert!(matches!(
            dilate(0.0, &a),
            Err(Error::NonPositiveDilation(_))
        ));
        assert!(matches!(
            dilate(-1.0, &a),
            Err(Error::NonPositiveDilation(_))
        ));
    }

    #[test]
    fn subgradient_of_vertical_coordinate() {
        let f = |p: &GroupPoint| p.x3;
        let g = apply_subgradient(&f, &GroupPoint::new(1.0, 2.0, 0.0), GradientMode::default())
            .unwrap();
        assert_abs_diff_eq!(g.v1, 4.0, epsilon = 1e-9);
        assert_abs_diff_eq!(g.v2, -2.0, epsilon = 1e-9);
    }

    #[test]
    fn kaplan_subgradient_on_horizontal_unit_point() {
        let n = HomogeneousNorm::kaplan();
        let a = GroupPoint::new(1.0, 0.0, 0.0);
        for mode in [GradientMode::Analytic, GradientMode::default()] {
            let g = apply_subgradient(&n, &a, mode).unwrap();
            assert_abs_diff_eq!(g.v1, 1.0, epsilon = 1e-8);
            assert_abs_diff_eq!(g.v2, 0.0, epsilon = 1e-8);
            assert_abs_diff_eq!(g.euclidean_length(), 1.0, epsilon = 1e-8);
        }
    }

    #[test]
    fn commutator_is_minus_four_d3() {
        // smooth test field
        let f =
            |p: &GroupPoint| (0.3 * p.x1).sin() * p.x2 + (0.5 * p.x3).cos() * p.x1 + p.x3 * p.x3;
        let a = GroupPoint::new(0.4, -0.7, 0.9);
        let h = 1e-3;
        let mode = GradientMode::FiniteDifference { step: 1e-5 };
        let x1 = |p: &GroupPoint| apply_subgradient(&f, p, mode).unwrap().v1;
        let x2 = |p: &GroupPoint| apply_subgradient(&f, p, mode).unwrap().v2;
        let outer = GradientMode::FiniteDifference {
            step: h / (1.0 + 1.2),
        };
        let x1x2 = apply_subgradient(&x2, &a, outer).unwrap().v1;
        let x2x1 = apply_subgradient(&x1, &a, outer).unwrap().v2;
        let d3 = ((f)(&GroupPoint::new(a.x1, a.x2, a.x3 + 1e-5))
            - (f)(&GroupPoint::new(a.x1, a.x2, a.x3 - 1e-5)))
            / 2e-5;
        assert_abs_diff_eq!(x1x2 - x2x1, -4.0 * d3, epsilon = 1e-4);
    }

    #[test]
    fn kaplan_examples() {
        assert_abs_diff_eq!(kaplan_norm(&GroupPoint::new(1.0, 0.0, 0.0)), 1.0);
        assert_abs_diff_eq!(kaplan_norm(&GroupPoint::new(0.0, 0.0, 1.0)), 1.0);
        // the weight-16 gauge of the literature convention
        assert_abs_diff_eq!(gauge_norm(&GroupPoint::new(0.0, 0.0, 1.0), 16.0), 2.0);
        let a = GroupPoint::new(1.0, 0.0, 1.0);
        let a2 = dilate(2.0, &a).unwrap();
        assert_abs_diff_eq!(
            gauge_norm(&a2, 16.0),
            2.0 * 17f64.powf(0.25),
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(kaplan_norm(&a2), 2.0 * kaplan_norm(&a), epsilon = 1e-12);
    }

    #[test]
    fn cc_examples() {
        assert_eq!(cc_distance(&GroupPoint::IDENTITY), 0.0);
        assert_abs_diff_eq!(cc_distance(&GroupPoint::new(3.0, 4.0, 0.0)), 5.0);
        let a = GroupPoint::new(0.3, -0.8, 1.7);
        let a3 = dilate(3.0, &a).unwrap();
        assert_abs_diff_eq!(cc_distance(&a3), 3.0 * cc_distance(&a), epsilon = 1e-9);
    }

    #[test]
    fn cc_is_continuous_toward_the_center() {
        let center = cc_distance(&GroupPoint::new(0.0, 0.0, 1.0));
        let near = cc_distance(&GroupPoint::new(1e-7, 0.0, 1.0));
        assert_abs_diff_eq!(center, near, epsilon = 1e-6);
        // high-precision reference value
        let near_axis = cc_distance(&GroupPoint::new(1e-3, 0.0, 1.0));
        assert_abs_diff_eq!(near_axis, 1.771_453_851_429_115, epsilon = 1e-12);
    }

    #[test]
    fn cc_small_vertical_component() {
        // d ≈ |w| for tiny z
        let d = cc_distance(&GroupPoint::new(1.0, 0.0, 1e-12));
        assert_abs_diff_eq!(d, 1.0, epsilon = 1e-10);
    }

    #[test]
    fn cc_analytic_matches_fd() {
        let n = HomogeneousNorm::cc();
        let fd = n
            .clone()
            .with_mode(GradientMode::FiniteDifference { step: 1e-5 });
        for p in [
            [0.5, 0.2, 0.3],
            [-1.0, 0.4, -2.0],
            [0.1, 0.05, 3.0],
            [2.0, 1.0, 0.0],
        ] {
            let ga = n.gradient(&p).unwrap();
            let gf = fd.gradient(&p).unwrap();
            assert_abs_diff_eq!(ga[0], gf[0], epsilon = 1e-6);
            assert_abs_diff_eq!(ga[1], gf[1], epsilon = 1e-6);
        }
    }

    #[test]
    fn singular_points_are_flagged() {
        let z = [0.0, 0.0, 0.0];
        assert!(HomogeneousNorm::kaplan().gradient(&z).is_err());
        assert!(HomogeneousNorm::cc().gradient(&[0.0, 0.0, 1.0]).is_err());
        assert!(HomogeneousNorm::horizontal()
            .gradient(&[0.0, 0.0, 1.0])
            .is_err());
        assert!(HomogeneousNorm::kaplan().gradient(&[0.0, 0.0, 1.0]).is_ok());
    }

    #[test]
    fn horizontal_examples() {
        assert_eq!(horizontal_norm(&GroupPoint::new(3.0, 4.0, 7.0)), 5.0);
        assert_eq!(horizontal_norm(&GroupPoint::new(0.0, 0.0, 5.0)), 0.0);
        let a = GroupPoint::new(3.0, 4.0, 7.0);
        assert_eq!(horizontal_norm(&dilate(2.0, &a).unwrap()), 10.0);
    }

    #[test]
    fn left_translate_examples() {
        let a = GroupPoint::new(0.4, 1.0, -0.3);
        let g = GroupPoint::new(-2.0, 0.5, 1.0);
        assert_abs_diff_eq!(
            left_translate_distance(&g, &a, &a).unwrap(),
            0.0,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            left_translate_distance(&GroupPoint::IDENTITY, &a, &GroupPoint::IDENTITY).unwrap(),
            cc_distance(&a),
            epsilon = 1e-12
        );
    }

    #[test]
    fn composite_norms_are_homogeneous() {
        let pp = NormKind::PowerProduct {
            factors: vec![(NormKind::Kaplan, 1.0), (NormKind::CarnotCaratheodory, 2.0)],
        };
        let lc = NormKind::LinearCombination {
            terms: vec![(0.5, NormKind::Kaplan), (2.0, NormKind::Horizontal)],
        };
        let a = GroupPoint::new(0.7, -0.2, 0.9);
        for k in [pp, lc] {
            k.validate().unwrap();
            let v = k.eval(&a.to_array());
            let v2 = k.eval(&dilate(2.0, &a).unwrap().to_array());
            assert_abs_diff_eq!(v2, 2.0 * v, epsilon = 1e-9);
            let vi = k.eval(&inverse(&a).to_array());
            assert_abs_diff_eq!(vi, v, epsilon = 1e-9);
        }
    }

    #[test]
    fn composite_gradient_matches_fd() {
        let pp = HomogeneousNorm::new(NormKind::PowerProduct {
            factors: vec![(NormKind::Kaplan, 1.0), (NormKind::Horizontal, 1.0)],
        });
        let fd = pp
            .clone()
            .with_mode(GradientMode::FiniteDifference { step: 1e-6 });
        let x = [0.6, -0.4, 0.8];
        let (a, b) = (pp.gradient(&x).unwrap(), fd.gradient(&x).unwrap());
        assert_abs_diff_eq!(a[0], b[0], epsilon = 1e-6);
        assert_abs_diff_eq!(a[1], b[1], epsilon = 1e-6);
    }

    #[test]
    fn invalid_composites_rejected() {
        assert!(NormKind::PowerProduct { factors: vec![] }
            .validate()
            .is_err());
        assert!(NormKind::LinearCombination {
            terms: vec![(-1.0, NormKind::Kaplan)]
        }
        .validate()
        .is_err());
    }
}
