//! One runner per subcommand; each returns the reports it produced.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use carnot_gibbs::engine::{
    dlr_compatibility_check, mcmc_sample, Engine, GridFunction, McmcParams,
};
use carnot_gibbs::estimators::{
    boundary_sensitivity, contraction_rate, dobrushin_check, dobrushin_sweep,
    estimate_sgi_constant, nearest_config, sweepout_check, verify_gradient_bound_c2,
    verify_ubound_c1, C1Params, C2Params, DecayMatrix, DobrushinParams, EstimateReport, FamilySpec,
    SgiParams,
};
use carnot_gibbs::heisenberg::{cc_distance, horizontal_norm, kaplan_norm, GroupPoint};
use carnot_gibbs::lattice::{build_partition, dilate_spin, Spin, SpinModel};
use carnot_gibbs::quadrature::GridSpec;
use carnot_gibbs::selftest::{run_self_test, InvariantCheck, SelfTestSpec};
use carnot_gibbs::{Error, Result};
use serde_json::{json, Value};

use crate::config::{self, ExperimentConfig, Resolved, DEFAULT_BOUNDARY};

/// Reports for the JSON array and CSV rows, plus the grid label recorded in each row.
pub struct Output {
    pub reports: Vec<EstimateReport>,
    pub json: Vec<Value>,
    pub grid: String,
}

impl Output {
    fn from_reports(reports: Vec<EstimateReport>, grid: &GridSpec) -> Result<Self> {
        let json = reports
            .iter()
            .map(serde_json::to_value)
            .collect::<std::result::Result<_, _>>()?;
        Ok(Self {
            reports,
            json,
            grid: grid_label(grid),
        })
    }
}

pub fn grid_label(g: &GridSpec) -> String {
    match &g.half_widths {
        Some(h) => format!("n={} L={h:?}", g.nodes_per_axis),
        None => format!("n={}", g.nodes_per_axis),
    }
}

/// Default resolution by spin dimension: one-dimensional grids can afford many more nodes.
fn nodes(model: &SpinModel, line: usize, cube: usize) -> usize {
    if model.spin.dim() == 1 {
        line
    } else {
        cube
    }
}

fn family(cfg: &ExperimentConfig) -> FamilySpec {
    FamilySpec::default().with_seed(cfg.seed())
}

pub fn norms(self_test: bool, point: Option<&[f64]>, seed: u64) -> Result<(Vec<Value>, bool)> {
    let mut out = Vec::new();
    let mut ok = true;
    if self_test {
        let checks: Vec<InvariantCheck> = run_self_test(&SelfTestSpec {
            seed,
            ..SelfTestSpec::default()
        })?;
        ok = checks.iter().all(|c| c.pass);
        for c in checks {
            out.push(serde_json::to_value(c)?);
        }
    }
    if let Some(p) = point {
        if p.len() != 3 {
            return Err(Error::InvalidParameter(format!(
                "--point needs 3 coordinates, got {}",
                p.len()
            )));
        }
        let a = GroupPoint::new(p[0], p[1], p[2]);
        out.push(json!({
            "point": p,
            "kaplan": kaplan_norm(&a),
            "cc": cc_distance(&a),
            "horizontal": horizontal_norm(&a),
        }));
    }
    if out.is_empty() {
        return Err(Error::InvalidParameter(
            "norms needs --self-test or --point".into(),
        ));
    }
    Ok((out, ok))
}

pub fn sgi(cfg: &ExperimentConfig, m: &Resolved) -> Result<Output> {
    let model = &m.model;
    let spec = config::grid(cfg, nodes(model, 201, 17));
    let window = config::window(cfg, 1, model.range())?;
    let engine = Engine::new(model, &window, &spec)?;
    let params = SgiParams::new(model.q)?.with_family(family(cfg));
    let report = estimate_sgi_constant(&engine, &params)?;
    Output::from_reports(vec![report], &spec)
}

pub fn ubound(cfg: &ExperimentConfig, m: &Resolved) -> Result<Output> {
    let model = &m.model;
    let spec = config::grid(cfg, nodes(model, 201, 25));
    let mut params = C1Params::new(model.q);
    params.family = params.family.with_seed(cfg.seed());
    let report = verify_ubound_c1(&model.phase, m.eta()?, model.spin, &spec, &params)?;
    Output::from_reports(vec![report], &spec)
}

pub fn c2(m: &Resolved) -> Result<Output> {
    let model = &m.model;
    let params = C2Params::new(model.q);
    let report = verify_gradient_bound_c2(&model.interaction, m.eta()?, model.spin, &params)?;
    let spec = GridSpec::new(params.points_per_axis);
    Output::from_reports(vec![report], &spec)
}

pub fn dobrushin(cfg: &ExperimentConfig, m: &Resolved) -> Result<Output> {
    let model = &m.model;
    let spec = config::grid(cfg, nodes(model, 101, 17));
    let params = DobrushinParams::new(m.eta()?.clone(), cfg.seed());
    let mut out = match &cfg.beta_sweep {
        Some(s) => {
            let betas = config::parse_sweep(s)?;
            let sweep = dobrushin_sweep(model, &spec, &params, &betas)?;
            let reports = sweep.results.iter().flat_map(|r| r.reports()).collect();
            let mut out = Output::from_reports(reports, &spec)?;
            out.json.push(json!({
                "sweep": {
                    "betas": betas,
                    "sum_c": sweep.results.iter().map(|r| r.sum_c.value).collect::<Vec<_>>(),
                    "monotone": sweep.monotone,
                    "threshold": sweep.threshold,
                }
            }));
            out
        }
        None => Output::from_reports(dobrushin_check(model, &spec, &params)?.reports(), &spec)?,
    };
    out.grid = grid_label(&spec);
    Ok(out)
}

fn probe_family(engine: &Engine) -> Result<Vec<GridFunction>> {
    Ok(vec![
        engine.additive_function(|x| x[0] * x[0] + x[1] * x[1] + x[2].abs())?,
        engine.additive_function(|x| x[0] + 0.5 * x[2])?,
    ])
}

pub fn dynamics(cfg: &ExperimentConfig, m: &Resolved) -> Result<Output> {
    let model = &m.model;
    let spec = config::grid(cfg, nodes(model, 41, 9));
    let window = config::window(cfg, 4, model.range())?;
    let engine = Engine::new(model, &window, &spec)?;
    let partition = build_partition(model.dimension, model.range())?;
    let m_max = cfg.m_max.unwrap_or(6);
    let family = probe_family(&engine)?;
    let mut reports = vec![contraction_rate(&engine, &partition, &family, m_max)?];
    let u = cfg
        .window
        .as_ref()
        .and_then(|w| w.boundary)
        .unwrap_or(DEFAULT_BOUNDARY);
    let config_at = |lambda: f64| -> Vec<usize> {
        nearest_config(
            &engine,
            &vec![dilate_spin(model.spin, lambda, &u); engine.len()],
        )
    };
    reports.push(boundary_sensitivity(
        &engine,
        &partition,
        &family[0],
        &config_at(0.5),
        &config_at(2.0),
        m_max,
    )?);
    if engine.len() >= 2 {
        let decay = DecayMatrix::new(0.5, model.dimension, model.range())?;
        reports.push(sweepout_check(
            &engine,
            0,
            1,
            &family,
            &decay,
            &[1.0, 1.5, 2.0, 3.0, 5.0],
        )?);
    }
    Output::from_reports(reports, &spec)
}

/// Nonempty subsets of `0..n`, smallest first.
fn subsets(n: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = (1u32..(1 << n))
        .map(|mask| (0..n).filter(|k| mask & (1 << k) != 0).collect())
        .collect();
    out.sort_by_key(|s| s.len());
    out
}

pub fn dlr(
    cfg: &ExperimentConfig,
    m: &Resolved,
    with_mcmc: bool,
    out_dir: Option<&Path>,
) -> Result<Output> {
    let model = &m.model;
    let spec = config::grid(cfg, nodes(model, 41, 17));
    let window = config::window(cfg, 2, model.range())?;
    let engine = Engine::new(model, &window, &spec)?;
    let n = engine.len();
    let sets = if n <= 3 {
        subsets(n)
    } else {
        let mut s: Vec<Vec<usize>> = (0..n).map(|k| vec![k]).collect();
        s.push((0..n).collect());
        s
    };
    let mut f = engine.additive_function(|x| x[0] + x[2].abs())?;
    if n >= 2 {
        f = f.add(&engine.pair_function(0, 1, |x, y| x[0] * y[0] + (x[2] - y[2]).sin())?);
    }
    let mut worst = 0.0f64;
    let mut residuals = Vec::new();
    for l2 in &sets {
        for l1 in &sets {
            if l1.iter().all(|s| l2.contains(s)) {
                let r = dlr_compatibility_check(&engine, l1, l2, &f)?;
                worst = worst.max(r);
                residuals.push(json!({"inner": l1, "outer": l2, "residual": r}));
            }
        }
    }
    let beta = engine.bonds().iter().map(|b| b.2.abs()).fold(0.0, f64::max);
    let mut reports =
        vec![
            EstimateReport::new("dlr_residual", worst, "nested_expectations", model.q)
                .with_beta(beta)
                .with_verdict(1e-5, worst < 1e-5)
                .meta("pairs", &residuals),
        ];
    if with_mcmc {
        reports.push(mcmc_agreement(cfg, model, &window, &engine, out_dir)?.with_beta(beta));
    }
    Output::from_reports(reports, &spec)
}

/// Largest |z| between chain means and quadrature means of per-site observables.
fn mcmc_agreement(
    cfg: &ExperimentConfig,
    model: &SpinModel,
    window: &carnot_gibbs::lattice::LatticeWindow,
    engine: &Engine,
    out_dir: Option<&Path>,
) -> Result<EstimateReport> {
    let params = cfg.mcmc.clone().unwrap_or(McmcParams {
        seed: cfg.seed(),
        ..McmcParams::default()
    });
    let run = match out_dir {
        Some(dir) => {
            let mut w = BufWriter::new(File::create(dir.join("mcmc_chain0.csv"))?);
            mcmc_sample(model, window, &params, Some(&mut w))?
        }
        None => mcmc_sample(model, window, &params, None)?,
    };
    type Obs = fn(&Spin) -> f64;
    let observables: [(&str, Obs); 5] = [
        ("x1", |x| x[0]),
        ("x2", |x| x[1]),
        ("x3", |x| x[2]),
        ("x1^2", |x| x[0] * x[0]),
        ("x3^2", |x| x[2] * x[2]),
    ];
    let mut worst = 0.0f64;
    let mut rows = Vec::new();
    for site in 0..engine.len() {
        for (name, f) in observables {
            let exact = engine.mean(&engine.site_function(site, f)?)?;
            let s = run.summarize(|cfg| f(&cfg[site]));
            let z = (s.mean - exact).abs() / s.std_error;
            worst = worst.max(z);
            rows.push(json!({"site": site, "observable": name, "quadrature": exact, "mcmc": s.mean, "se": s.std_error, "z": z}));
        }
    }
    Ok(
        EstimateReport::new("mcmc_max_z", worst, "batch_means", model.q)
            .with_verdict(3.0, worst <= 3.0)
            .meta("acceptance", run.acceptance())
            .meta("observables", &rows)
            .meta("seed", params.seed),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn subsets_are_ordered_by_size() {
        let s = subsets(3);
        assert_eq!(s.len(), 7);
        assert_eq!(s[0], vec![0]);
        assert_eq!(s[6], vec![0, 1, 2]);
    }
}
