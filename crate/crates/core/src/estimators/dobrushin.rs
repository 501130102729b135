use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::report::{fit_line, EstimateReport};
use super::ubound::UBoundFunction;
use crate::engine::{Engine, EngineOptions};
use crate::error::{Error, Result};
use crate::heisenberg::kaplan_norm;
use crate::heisenberg::GroupPoint;
use crate::lattice::{dilate_spin, neighbors, Boundary, Site, Spin, SpinModel, SpinSpace};
use crate::quadrature::GridSpec;

/// `K₁` and `c₁` of the single-site defective U-bound, from `B` and `β^q`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClosedForm {
    pub k1: f64,
    pub c1: f64,
}

/// Requires `2^{q−1} B² β^q < 1`.
pub fn closed_form_constants(b: f64, q: f64, beta_q: f64) -> Result<ClosedForm> {
    if !(b > 0.0) || !(beta_q >= 0.0) || !(q > 1.0 && q <= 2.0) {
        return Err(Error::InvalidParameter(format!(
            "closed form needs B > 0, β^q ≥ 0, q in (1, 2]; got B={b}, β^q={beta_q}, q={q}"
        )));
    }
    let t = 2f64.powf(q - 1.0);
    let denom = 1.0 - t * b * b * beta_q;
    if !(denom > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "2^(q-1) B^2 beta^q = {} is not below 1",
            t * b * b * beta_q
        )));
    }
    Ok(ClosedForm {
        k1: (t * b).max(b * (1.0 + t * b * beta_q)) / denom,
        c1: t * b * b / denom,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DobrushinParams {
    pub lambdas: Vec<f64>,
    pub directions: usize,
    pub seed: u64,
    pub eta: UBoundFunction,
    /// Box enlargements (×1.5 each) tried when a boundary pushes mass to the faces.
    pub max_enlargements: usize,
    /// Supplied `B̂` from the C1/C2 checks enables the closed-form bound.
    pub b_hat: Option<f64>,
}

impl DobrushinParams {
    pub fn new(eta: UBoundFunction, seed: u64) -> Self {
        Self {
            lambdas: vec![0.0, 0.5, 1.0, 2.0, 4.0],
            directions: 8,
            seed,
            eta,
            max_enlargements: 4,
            b_hat: None,
        }
    }
}

/// Points on the unit sphere of the Kaplan norm (Euclidean sphere on ℝⁿ).
pub fn unit_sphere_points(spin: SpinSpace, count: usize, seed: u64) -> Vec<Spin> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let mut v = [0.0; 3];
            for c in v.iter_mut().take(spin.dim()) {
                *c = StandardNormal.sample(&mut rng);
            }
            let r = match spin {
                SpinSpace::Heisenberg => kaplan_norm(&GroupPoint::from_array(v)),
                SpinSpace::Euclidean { .. } => v.iter().map(|c| c * c).sum::<f64>().sqrt(),
            };
            dilate_spin(spin, 1.0 / r, &v)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DobrushinResult {
    pub beta: f64,
    pub k1: EstimateReport,
    pub c1: EstimateReport,
    pub sum_c: EstimateReport,
    pub closed_form: Option<ClosedForm>,
}

impl DobrushinResult {
    pub fn reports(&self) -> Vec<EstimateReport> {
        vec![self.k1.clone(), self.c1.clone(), self.sum_c.clone()]
    }
}

/// `E_i^ω(η_i)` with the box enlarged until the tail check passes.
fn conditional_eta(
    model: &SpinModel,
    site: &Site,
    omega: &Boundary,
    spec: &GridSpec,
    params: &DobrushinParams,
) -> Result<(f64, usize)> {
    let mut spec = spec.clone();
    for attempt in 0..=params.max_enlargements {
        match Engine::for_sites(
            model,
            std::slice::from_ref(site),
            omega,
            &spec,
            EngineOptions::default(),
        ) {
            Ok(e) => {
                let eta = &params.eta;
                let f = e.site_function(0, |x| eta.eval(x))?;
                return Ok((e.mean(&f)?, attempt));
            }
            Err(err)
                if matches!(err.root(), Error::EnlargeBox { .. })
                    && attempt < params.max_enlargements =>
            {
                spec = spec.scaled_box(model.spin, &model.phase, 1.5)?;
            }
            Err(err) => return Err(err),
        }
    }
    unreachable!("loop returns on the last attempt")
}

/// Regresses `E_i^ω(η_i)` on `Σ_j |β_ij|^q η(ω_j)` over a dilation-scaled boundary family.
pub fn dobrushin_check(
    model: &SpinModel,
    spec: &GridSpec,
    params: &DobrushinParams,
) -> Result<DobrushinResult> {
    model.validate()?;
    if params.directions == 0 || params.lambdas.is_empty() {
        return Err(Error::InvalidParameter("empty boundary family".into()));
    }
    let q = model.q;
    let site: Site = vec![0; model.dimension];
    let nbrs: Vec<(Site, f64)> = neighbors(&site, model)
        .into_iter()
        .map(|n| {
            let b = model.beta_ij(&site, &n);
            (n, b)
        })
        .collect();
    let beta_q: f64 = nbrs.iter().map(|(_, b)| b.abs().powf(q)).sum();
    let beta = model.couplings.beta;
    let us = unit_sphere_points(model.spin, params.directions, params.seed);
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut enlarged = 0;
    for &lambda in &params.lambdas {
        for k in 0..us.len() {
            let omega: Boundary = nbrs
                .iter()
                .enumerate()
                .map(|(idx, (n, _))| {
                    (
                        n.clone(),
                        dilate_spin(model.spin, lambda, &us[(k + idx) % us.len()]),
                    )
                })
                .collect();
            let x: f64 = nbrs
                .iter()
                .map(|(n, b)| b.abs().powf(q) * params.eta.eval(&omega[n]))
                .sum();
            let (e, grown) = conditional_eta(model, &site, &omega, spec, params)?;
            enlarged = enlarged.max(grown);
            xs.push(x);
            ys.push(e);
        }
    }
    let meta = |r: EstimateReport| {
        r.with_beta(beta)
            .meta("eta", &params.eta.tag)
            .meta("boundaries", xs.len())
            .meta("seed", params.seed)
            .meta("enlargements", enlarged)
            .meta("nodes_per_axis", spec.nodes_per_axis)
    };
    let (k1, c1, k1_se, c1_se, r2, method) = if beta_q == 0.0 {
        let mean = ys.iter().sum::<f64>() / ys.len() as f64;
        (mean, 0.0, 0.0, 0.0, 1.0, "decoupled")
    } else {
        let fit = fit_line(&xs, &ys)
            .map_err(|e| Error::RankDeficient(format!("{e}; widen the boundary family")))?;
        (
            fit.intercept,
            fit.slope,
            fit.intercept_se,
            fit.slope_se,
            fit.r_squared,
            "least_squares",
        )
    };
    let sum = c1 * beta_q;
    let closed_form = match params.b_hat {
        Some(b) => closed_form_constants(b, q, beta_q).ok(),
        None => None,
    };
    let mut sum_c = meta(EstimateReport::new("sum_c", sum, method, q))
        .with_uncertainty(c1_se * beta_q)
        .with_verdict(1.0, sum < 1.0)
        .meta("beta_q", beta_q)
        .meta("r_squared", r2);
    if let Some(cf) = closed_form {
        sum_c = sum_c
            .meta("closed_form_k1", cf.k1)
            .meta("closed_form_c1", cf.c1);
    }
    Ok(DobrushinResult {
        beta,
        k1: meta(EstimateReport::new("K1", k1, method, q)).with_uncertainty(k1_se),
        c1: meta(EstimateReport::new("c1", c1, method, q)).with_uncertainty(c1_se),
        sum_c,
        closed_form,
    })
}

/// Empirical threshold: first crossing of `Σĉ = 1`, interpolated, or extrapolated past the sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Threshold {
    pub beta0: f64,
    pub extrapolated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DobrushinSweep {
    pub results: Vec<DobrushinResult>,
    pub monotone: bool,
    pub threshold: Option<Threshold>,
}

pub fn estimate_threshold(betas: &[f64], sums: &[f64]) -> Option<Threshold> {
    for k in 1..betas.len() {
        if sums[k] >= 1.0 && sums[k - 1] < 1.0 {
            let t = (1.0 - sums[k - 1]) / (sums[k] - sums[k - 1]);
            return Some(Threshold {
                beta0: betas[k - 1] + t * (betas[k] - betas[k - 1]),
                extrapolated: false,
            });
        }
    }
    if sums.first().is_some_and(|s| *s >= 1.0) {
        return Some(Threshold {
            beta0: betas[0],
            extrapolated: false,
        });
    }
    let n = betas.len();
    if n < 2 {
        return None;
    }
    let slope = (sums[n - 1] - sums[n - 2]) / (betas[n - 1] - betas[n - 2]);
    (slope > 0.0).then(|| Threshold {
        beta0: betas[n - 1] + (1.0 - sums[n - 1]) / slope,
        extrapolated: true,
    })
}

/// Runs the check over `betas` with a shared boundary family.
pub fn dobrushin_sweep(
    model: &SpinModel,
    spec: &GridSpec,
    params: &DobrushinParams,
    betas: &[f64],
) -> Result<DobrushinSweep> {
    let mut results = Vec::with_capacity(betas.len());
    for &b in betas {
        results.push(dobrushin_check(&model.with_beta(b), spec, params)?);
    }
    let sums: Vec<f64> = results.iter().map(|r| r.sum_c.value).collect();
    let monotone = sums.windows(2).all(|w| w[1] >= w[0] - 1e-12);
    Ok(DobrushinSweep {
        threshold: estimate_threshold(betas, &sums),
        results,
        monotone,
    })
}
