use serde::{Deserialize, Serialize};

use super::family::{build_family, FamilySpec};
use super::report::EstimateReport;
use crate::error::{Error, Result};
use crate::heisenberg::HomogeneousNorm;
use crate::lattice::{
    dilate_spin, sample_directions, Interaction, InteractionTerm, Phase, Spin, SpinSpace,
};
use crate::par;
use crate::quadrature::{GridSpec, QuadratureGrid};

/// `η = ρ^e`, the weight of the U-bound conditions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UBoundFunction {
    pub norm: HomogeneousNorm,
    pub exponent: f64,
    /// Human-readable form such as `d^2` or `N^(p-3)`.
    pub tag: String,
}

impl UBoundFunction {
    pub fn new(norm: HomogeneousNorm, exponent: f64, tag: impl Into<String>) -> Self {
        Self {
            norm,
            exponent,
            tag: tag.into(),
        }
    }

    pub fn eval(&self, x: &Spin) -> f64 {
        if self.exponent == 0.0 {
            1.0
        } else {
            self.norm.eval(x).powf(self.exponent)
        }
    }

    /// True when `η` increases without bound along every sampled dilation ray.
    pub fn diverges(&self, spin: SpinSpace) -> bool {
        sample_directions(spin, 16).iter().all(|u| {
            let radii = [1.0, 10.0, 100.0, 1000.0];
            let v: Vec<f64> = radii
                .iter()
                .map(|&r| self.eval(&dilate_spin(spin, r, u)))
                .collect();
            v.windows(2).all(|w| w[1] > w[0]) && v[3] > 100.0 * v[0].max(1e-300)
        })
    }

    fn check_on(&self, nodes: &[Spin]) -> Result<Vec<f64>> {
        let v: Vec<f64> = par::map_collect(nodes.len(), |k| self.eval(&nodes[k]));
        if let Some(bad) = v.iter().find(|x| !(**x >= 0.0) || !x.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "U-bound function {} takes the value {bad} on the grid",
                self.tag
            )));
        }
        Ok(v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct C1Params {
    pub q: f64,
    pub family: FamilySpec,
    /// Box scale factors; the first is the reference radius `L`.
    pub radius_factors: Vec<f64>,
    pub stability_tolerance: f64,
}

impl C1Params {
    pub fn new(q: f64) -> Self {
        Self {
            q,
            family: FamilySpec::default().with_shells(24),
            radius_factors: vec![1.0, 1.5],
            stability_tolerance: 0.1,
        }
    }

    pub fn with_factors(mut self, f: Vec<f64>) -> Self {
        self.radius_factors = f;
        self
    }
}

/// Best C1 ratio on one box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct C1Point {
    pub value: f64,
    pub class: String,
    pub inscribed_radius: f64,
    pub nodes_per_axis: usize,
    pub skipped: usize,
}

/// Relative `RHS` below this is treated as an empty test function.
pub const MIN_C1_RHS: f64 = 1e-12;

pub fn c1_ratio(
    phase: &Phase,
    eta: &UBoundFunction,
    spin: SpinSpace,
    q: f64,
    spec: &GridSpec,
    family: &FamilySpec,
) -> Result<C1Point> {
    let grid = QuadratureGrid::new(spin, spec, phase)?;
    let phi: Vec<f64> = par::map_collect(grid.len(), |k| phase.eval(&grid.nodes[k]));
    let eta_v = eta.check_on(&grid.nodes)?;
    let pmin = phi.iter().copied().fold(f64::INFINITY, f64::min);
    let ln_z = grid
        .weights
        .iter()
        .zip(&phi)
        .map(|(w, p)| w * (pmin - p).exp())
        .sum::<f64>()
        .ln()
        - pmin;
    let fam = build_family(family, &grid, phase);
    let mut best = C1Point {
        value: 0.0,
        class: String::new(),
        inscribed_radius: super::family::inscribed_radius(
            spin,
            &phase.leading().expect("validated phase").norm,
            &grid.half_widths,
        ),
        nodes_per_axis: grid.nodes_per_axis,
        skipped: 0,
    };
    for f in &fam {
        let vals = par::map_collect(grid.len(), |k| f.eval(spin, phase, q, &grid.nodes[k]));
        let mut lv = Vec::with_capacity(vals.len());
        for v in vals {
            lv.push(v?);
        }
        // exponent of e^{q s − φ}, shifted by its maximum over the support
        let expo: Vec<f64> = (0..grid.len())
            .map(|k| q * lv[k].log_scale - phi[k])
            .collect();
        let emax = (0..grid.len())
            .filter(|&k| lv[k].value != 0.0 || lv[k].gradient.iter().any(|c| *c != 0.0))
            .map(|k| expo[k])
            .fold(f64::NEG_INFINITY, f64::max);
        if !emax.is_finite() {
            best.skipped += 1;
            continue;
        }
        let mut lhs = 0.0;
        let mut rhs = 0.0;
        for k in 0..grid.len() {
            let w = grid.weights[k] * (expo[k] - emax).exp();
            let vq = lv[k].value.abs().powf(q);
            let g2: f64 = lv[k].gradient.iter().map(|c| c * c).sum();
            lhs += w * vq * eta_v[k];
            rhs += w * (g2.powf(0.5 * q) + vq);
        }
        if !(rhs > 0.0) || rhs.ln() + emax - ln_z < MIN_C1_RHS.ln() {
            best.skipped += 1;
            continue;
        }
        let r = lhs / rhs;
        if r > best.value {
            best.value = r;
            best.class = f.class().to_string();
        }
    }
    Ok(best)
}

/// `B̂ = max_g ∫|g|^q η e^{−φ} / ∫(|∇g|^q + |g|^q) e^{−φ}` on boxes of growing radius.
pub fn verify_ubound_c1(
    phase: &Phase,
    eta: &UBoundFunction,
    spin: SpinSpace,
    spec: &GridSpec,
    params: &C1Params,
) -> Result<EstimateReport> {
    if params.radius_factors.is_empty() {
        return Err(Error::InvalidParameter("no radius factors".into()));
    }
    let mut points = Vec::new();
    for &f in &params.radius_factors {
        let s = spec.scaled_box(spin, phase, f)?;
        points.push(c1_ratio(phase, eta, spin, params.q, &s, &params.family)?);
    }
    let values: Vec<f64> = points.iter().map(|p| p.value).collect();
    let growth: Vec<f64> = values.windows(2).map(|w| w[1] / w[0]).collect();
    let stable = growth
        .first()
        .is_none_or(|g| (g - 1.0).abs() <= params.stability_tolerance);
    let mut report = EstimateReport::new("B_C1", values[0], "family_max", params.q)
        .with_verdict(params.stability_tolerance, stable)
        .with_uncertainty(
            values
                .iter()
                .map(|v| (v - values[0]).abs())
                .fold(0.0, f64::max),
        )
        .meta("eta", &eta.tag)
        .meta("radius_factors", &params.radius_factors)
        .meta("values", &values)
        .meta("growth", &growth)
        .meta("points", &points)
        .meta("seed", params.family.seed);
    if !growth.is_empty() && growth.iter().all(|g| *g >= 1.25) {
        report = report.flag("diverging");
    }
    if !stable {
        report = report.flag("unstable");
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct C2Params {
    pub q: f64,
    pub points_per_axis: usize,
    pub refine_points: usize,
    pub radius: f64,
    pub radius_factors: Vec<f64>,
    pub stability_tolerance: f64,
}

impl C2Params {
    pub fn new(q: f64) -> Self {
        Self {
            q,
            points_per_axis: 20,
            refine_points: 14,
            radius: 2.0,
            radius_factors: vec![1.0, 2.0, 4.0],
            stability_tolerance: 0.05,
        }
    }
}

/// Cell-centred points of the homogeneous box of radius `r`.
pub fn c2_points(spin: SpinSpace, r: f64, n: usize) -> Vec<Spin> {
    let axis = |half: f64| -> Vec<f64> {
        (0..n)
            .map(|i| -half + (i as f64 + 0.5) * 2.0 * half / n as f64)
            .collect()
    };
    let dim = spin.dim();
    let halves: Vec<f64> = match spin {
        SpinSpace::Heisenberg => vec![r, r, r * r],
        SpinSpace::Euclidean { .. } => vec![r; dim],
    };
    let axes: Vec<Vec<f64>> = halves.iter().map(|&h| axis(h)).collect();
    let total = n.pow(dim as u32);
    (0..total)
        .map(|mut k| {
            let mut x = [0.0; 3];
            for a in (0..dim).rev() {
                x[a] = axes[a][k % n];
                k /= n;
            }
            x
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct C2Point {
    pub radius: f64,
    pub points_per_axis: usize,
    pub value: f64,
    pub skipped_points: usize,
    pub skipped_pairs: usize,
}

type SlotData = Vec<(f64, Spin, f64, Spin)>;

/// Per-point factors `(ρ^α, ∇ρ^α, δ^β, ∇δ^β)` of each product term.
fn product_data(terms: &[InteractionTerm], spin: SpinSpace, x: &Spin) -> Result<SlotData> {
    terms
        .iter()
        .map(|t| match t {
            InteractionTerm::Product {
                rho,
                alpha,
                delta,
                beta_exp,
                ..
            } => {
                let single = |n: &HomogeneousNorm, e: f64| -> Result<(f64, Spin)> {
                    let v = Interaction::norm_product(1.0, n.clone(), e, 0.0);
                    let (g, _) = v.gradients(spin, x, x)?;
                    Ok((v.eval(spin, x, x), g))
                };
                let (a, ga) = single(rho, *alpha)?;
                let (d, gd) = single(delta, *beta_exp)?;
                Ok((a, ga, d, gd))
            }
            InteractionTerm::GroupDifference { .. } => unreachable!("filtered"),
        })
        .collect()
}

/// `sup (|∇₁V|^q + |∇₂V|^q)/(1 + η(x) + η(y))` over grid pairs.
pub fn c2_sup(
    v: &Interaction,
    eta: &UBoundFunction,
    spin: SpinSpace,
    q: f64,
    radius: f64,
    n: usize,
) -> Result<C2Point> {
    let pts = c2_points(spin, radius, n);
    let products: Vec<InteractionTerm> = v
        .terms
        .iter()
        .filter(|t| matches!(t, InteractionTerm::Product { .. }))
        .cloned()
        .collect();
    let coeffs: Vec<f64> = products
        .iter()
        .map(|t| match t {
            InteractionTerm::Product { coefficient, .. } => *coefficient,
            _ => 0.0,
        })
        .collect();
    let diffs = Interaction::new(
        v.terms
            .iter()
            .filter(|t| matches!(t, InteractionTerm::GroupDifference { .. }))
            .cloned()
            .collect(),
    );
    let data: Vec<Option<SlotData>> =
        par::map_collect(pts.len(), |k| product_data(&products, spin, &pts[k]).ok());
    let eta_v: Vec<f64> = par::map_collect(pts.len(), |k| eta.eval(&pts[k]));
    let ok: Vec<usize> = (0..pts.len()).filter(|&k| data[k].is_some()).collect();
    let skipped_points = pts.len() - ok.len();
    let per_row = par::map_collect(ok.len(), |a| {
        let i = ok[a];
        let di = data[i].as_ref().expect("kept");
        let mut best = 0.0f64;
        let mut skipped = 0usize;
        for &j in &ok {
            let dj = data[j].as_ref().expect("kept");
            let mut g1 = [0.0; 3];
            let mut g2 = [0.0; 3];
            for (t, c) in coeffs.iter().enumerate() {
                let (ai, gai, _, _) = di[t];
                let (_, _, dj_v, gdj) = dj[t];
                for k in 0..3 {
                    g1[k] += c * dj_v * gai[k];
                    g2[k] += c * ai * gdj[k];
                }
            }
            if !diffs.terms.is_empty() {
                match diffs.gradients(spin, &pts[i], &pts[j]) {
                    Ok((a1, a2)) => {
                        for k in 0..3 {
                            g1[k] += a1[k];
                            g2[k] += a2[k];
                        }
                    }
                    Err(_) => {
                        skipped += 1;
                        continue;
                    }
                }
            }
            let n1: f64 = g1.iter().map(|c| c * c).sum::<f64>().powf(0.5 * q);
            let n2: f64 = g2.iter().map(|c| c * c).sum::<f64>().powf(0.5 * q);
            best = best.max((n1 + n2) / (1.0 + eta_v[i] + eta_v[j]));
        }
        (best, skipped)
    });
    let value = per_row.iter().map(|r| r.0).fold(0.0, f64::max);
    let skipped_pairs = per_row.iter().map(|r| r.1).sum();
    if !value.is_finite() {
        return Err(Error::NonFinite {
            what: "C2 ratio".into(),
            value,
        });
    }
    Ok(C2Point {
        radius,
        points_per_axis: n,
        value,
        skipped_points,
        skipped_pairs,
    })
}

/// Sup of the C2 ratio over growing boxes, with a refinement comparison at the base radius.
pub fn verify_gradient_bound_c2(
    v: &Interaction,
    eta: &UBoundFunction,
    spin: SpinSpace,
    params: &C2Params,
) -> Result<EstimateReport> {
    if params.points_per_axis < 2 || params.radius_factors.is_empty() {
        return Err(Error::InvalidParameter(
            "C2 grid needs ≥ 2 points and a radius".into(),
        ));
    }
    let mut points = Vec::new();
    for &f in &params.radius_factors {
        points.push(c2_sup(
            v,
            eta,
            spin,
            params.q,
            params.radius * f,
            params.points_per_axis,
        )?);
    }
    let coarse = c2_sup(v, eta, spin, params.q, params.radius, params.refine_points)?;
    let values: Vec<f64> = points.iter().map(|p| p.value).collect();
    let growth: Vec<f64> = values
        .windows(2)
        .map(|w| if w[0] > 0.0 { w[1] / w[0] } else { 1.0 })
        .collect();
    let diverging = !growth.is_empty() && growth.iter().all(|g| *g >= 1.25);
    let refine_gap = if values[0] > 0.0 {
        (values[0] - coarse.value).abs() / values[0]
    } else {
        coarse.value
    };
    let refined = refine_gap <= params.stability_tolerance;
    let sup = values.iter().copied().fold(0.0, f64::max);
    let mut report = EstimateReport::new("B_C2", sup, "grid_sup", params.q)
        .with_verdict(params.stability_tolerance, refined && !diverging)
        .with_uncertainty((values[0] - coarse.value).abs())
        .meta("eta", &eta.tag)
        .meta("values", &values)
        .meta("growth", &growth)
        .meta("points", &points)
        .meta("coarse", &coarse)
        .meta("refinement_gap", refine_gap);
    if diverging {
        report = report.flag("diverging");
    }
    if !refined {
        report = report.flag("refinement-unstable");
    }
    let skipped: usize = points
        .iter()
        .map(|p| p.skipped_points + p.skipped_pairs)
        .sum();
    if skipped > 0 {
        report = report.meta("skipped", skipped);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_interaction_has_zero_bound() {
        let eta = UBoundFunction::new(HomogeneousNorm::cc(), 2.0, "d^2");
        let v = Interaction::norm_product(3.0, HomogeneousNorm::cc(), 0.0, 0.0);
        let p = c2_sup(&v, &eta, SpinSpace::Heisenberg, 2.0, 2.0, 6).unwrap();
        assert_eq!(p.value, 0.0);
    }

    #[test]
    fn c2_points_avoid_identity() {
        let pts = c2_points(SpinSpace::Heisenberg, 1.0, 4);
        assert_eq!(pts.len(), 64);
        assert!(pts.iter().all(|x| x[0] != 0.0 && x[1] != 0.0));
    }

    #[test]
    fn c1_constant_function_gives_eta_mean() {
        // with only the constant function B̂ = ν(η); for φ = x²/2, η = x², ν(η) = 1
        let phase = Phase::monomial(0.5, 2.0, HomogeneousNorm::euclidean(1));
        let eta = UBoundFunction::new(HomogeneousNorm::euclidean(1), 2.0, "x^2");
        let fam = FamilySpec {
            bumps: 0,
            norm_powers: 0,
            coordinates: 0,
            shells: 0,
            seed: 1,
        };
        let p = c1_ratio(
            &phase,
            &eta,
            SpinSpace::Euclidean { n: 1 },
            2.0,
            &GridSpec::new(201),
            &fam,
        )
        .unwrap();
        assert!((p.value - 1.0).abs() < 1e-8, "{}", p.value);
    }

    #[test]
    fn eta_divergence() {
        assert!(UBoundFunction::new(HomogeneousNorm::kaplan(), 1.0, "N")
            .diverges(SpinSpace::Heisenberg));
        assert!(
            !UBoundFunction::new(HomogeneousNorm::kaplan(), -0.5, "N^-0.5")
                .diverges(SpinSpace::Heisenberg)
        );
    }
}
