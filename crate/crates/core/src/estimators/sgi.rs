use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::family::{build_family, FamilySpec, TestFunction};
use super::report::EstimateReport;
use crate::engine::Engine;
use crate::error::{Error, Result};
use crate::lattice::{dual_exponent, Phase, Spin};
use crate::par;
use crate::quadrature::QuadratureGrid;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgiParams {
    pub q: f64,
    pub p: f64,
    pub family: FamilySpec,
    /// Also solve the discretized generator for its gap (used only for `q = 2`).
    pub eigen: bool,
}

impl SgiParams {
    pub fn new(q: f64) -> Result<Self> {
        let s = Self {
            q,
            p: dual_exponent(q),
            family: FamilySpec::default(),
            eigen: true,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn with_family(mut self, family: FamilySpec) -> Self {
        self.family = family;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.q > 1.0 && self.q <= 2.0) {
            return Err(Error::InvalidParameter(format!(
                "q = {} outside (1, 2]",
                self.q
            )));
        }
        if (1.0 / self.p + 1.0 / self.q - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidParameter(format!(
                "p = {} is not dual to q = {}",
                self.p, self.q
            )));
        }
        Ok(())
    }
}

/// A probability vector on the product of one quadrature grid over `sites` copies.
/// Flat indices put site 0 most significant.
#[derive(Debug, Clone)]
pub struct DiscreteMeasure<'a> {
    pub grid: &'a QuadratureGrid,
    pub sites: usize,
    pub mass: Vec<f64>,
}

impl<'a> DiscreteMeasure<'a> {
    /// Joint law of every window site.
    pub fn from_engine(engine: &'a Engine) -> Result<Self> {
        let all: Vec<usize> = (0..engine.len()).collect();
        let m = engine.marginal(&all)?;
        Ok(Self {
            grid: &engine.grid,
            sites: engine.len(),
            mass: m.data.as_ref().clone(),
        })
    }

    /// `exp(−U)` on one site, normalized.
    pub fn single_site(
        grid: &'a QuadratureGrid,
        energy: impl Fn(&Spin) -> f64 + Sync,
    ) -> Result<Self> {
        let u: Vec<f64> = par::map_collect(grid.len(), |k| energy(&grid.nodes[k]));
        let umin = u.iter().copied().fold(f64::INFINITY, f64::min);
        if !umin.is_finite() {
            return Err(Error::NonFinite {
                what: "single-site energy".into(),
                value: umin,
            });
        }
        let mut mass: Vec<f64> = (0..grid.len())
            .map(|k| grid.weights[k] * (umin - u[k]).exp())
            .collect();
        let z: f64 = mass.iter().sum();
        for m in mass.iter_mut() {
            *m /= z;
        }
        Ok(Self {
            grid,
            sites: 1,
            mass,
        })
    }

    pub fn len(&self) -> usize {
        self.mass.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mass.is_empty()
    }

    fn digit(&self, j: usize, site: usize) -> usize {
        let g = self.grid.len();
        (j / g.pow((self.sites - 1 - site) as u32)) % g
    }

    /// `(ν|f − νf|^q, ν|∇f|^q)` for `f = Σ_{k ∈ on} h(x_k)`.
    pub fn rayleigh_parts(
        &self,
        values: &[f64],
        grads: &[Spin],
        on: &[usize],
        q: f64,
    ) -> (f64, f64) {
        let n = self.len();
        let fval = |j: usize| on.iter().map(|&k| values[self.digit(j, k)]).sum::<f64>();
        let mean = par::sum(n, |j| self.mass[j] * fval(j));
        let num = par::sum(n, |j| self.mass[j] * (fval(j) - mean).abs().powf(q));
        let den = par::sum(n, |j| {
            let g2: f64 = on
                .iter()
                .map(|&k| grads[self.digit(j, k)].iter().map(|c| c * c).sum::<f64>())
                .sum();
            self.mass[j] * g2.powf(0.5 * q)
        });
        (num, den)
    }
}

/// Denominators below this are treated as constant test functions.
pub const MIN_DENOMINATOR: f64 = 1e-10;

/// Best Rayleigh ratio over the family, with the class that attains it.
#[derive(Debug, Clone, PartialEq)]
pub struct RayleighMax {
    pub value: f64,
    pub class: String,
    pub evaluated: usize,
    pub excluded: usize,
}

pub fn rayleigh_max(
    measure: &DiscreteMeasure,
    phase: &Phase,
    family: &[TestFunction],
    q: f64,
) -> Result<RayleighMax> {
    let grid = measure.grid;
    let mut patterns: Vec<Vec<usize>> = (0..measure.sites).map(|k| vec![k]).collect();
    if measure.sites > 1 {
        patterns.push((0..measure.sites).collect());
    }
    let mut best = RayleighMax {
        value: 0.0,
        class: String::new(),
        evaluated: 0,
        excluded: 0,
    };
    for f in family {
        let mut values = Vec::with_capacity(grid.len());
        let mut grads = Vec::with_capacity(grid.len());
        for x in &grid.nodes {
            let lv = f.eval(grid.spin, phase, q, x)?;
            let s = lv.log_scale.exp();
            values.push(s * lv.value);
            grads.push(lv.gradient.map(|c| s * c));
        }
        for on in &patterns {
            let (num, den) = measure.rayleigh_parts(&values, &grads, on, q);
            if !(den >= MIN_DENOMINATOR) {
                best.excluded += 1;
                continue;
            }
            best.evaluated += 1;
            let r = num / den;
            if r > best.value {
                best.value = r;
                best.class = f.class().to_string();
            }
        }
    }
    Ok(best)
}

/// Smallest nonzero eigenvalue of the discretized generator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeneratorGap {
    pub lambda: f64,
    pub iterations: usize,
    pub converged: bool,
    pub active_nodes: usize,
}

/// Node count above which the generator is not assembled.
pub const MAX_GENERATOR_NODES: usize = 300_000;

struct Csr {
    start: Vec<usize>,
    col: Vec<usize>,
    val: Vec<f64>,
}

impl Csr {
    fn from_triplets(n: usize, mut t: Vec<(usize, usize, f64)>) -> Self {
        t.sort_unstable_by_key(|a| (a.0, a.1));
        let mut start = vec![0; n + 1];
        let mut col = Vec::with_capacity(t.len());
        let mut val: Vec<f64> = Vec::with_capacity(t.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in t {
            if last == Some((r, c)) {
                *val.last_mut().expect("entry") += v;
                continue;
            }
            last = Some((r, c));
            col.push(c);
            val.push(v);
            start[r + 1] = col.len();
        }
        for r in 0..n {
            start[r + 1] = start[r + 1].max(start[r]);
        }
        Self { start, col, val }
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        let start = &self.start;
        let col = &self.col;
        let val = &self.val;
        let out = par::map_collect(y.len(), |r| {
            (start[r]..start[r + 1])
                .map(|k| val[k] * x[col[k]])
                .sum::<f64>()
        });
        y.copy_from_slice(&out);
    }

    fn diagonal(&self, n: usize) -> Vec<f64> {
        (0..n)
            .map(|r| {
                (self.start[r]..self.start[r + 1])
                    .find(|&k| self.col[k] == r)
                    .map_or(0.0, |k| self.val[k])
            })
            .collect()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    par::sum(a.len(), |k| a[k] * b[k])
}

/// Jacobi-preconditioned conjugate gradients for the consistent system `A y = b`.
fn pcg(a: &Csr, diag: &[f64], b: &[f64], tol: f64, max_iter: usize) -> Result<Vec<f64>> {
    let n = b.len();
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let bnorm = dot(b, b).sqrt();
    if bnorm == 0.0 {
        return Ok(x);
    }
    let mut z: Vec<f64> = r.iter().zip(diag).map(|(r, d)| r / d).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![0.0; n];
    for _ in 0..max_iter {
        a.apply(&p, &mut ap);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            break;
        }
        let alpha = rz / pap;
        for k in 0..n {
            x[k] += alpha * p[k];
            r[k] -= alpha * ap[k];
        }
        if dot(&r, &r).sqrt() <= tol * bnorm {
            return Ok(x);
        }
        for k in 0..n {
            z[k] = r[k] / diag[k];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for k in 0..n {
            p[k] = z[k] + beta * p[k];
        }
    }
    let res = dot(&r, &r).sqrt() / bnorm;
    if res < 1e-6 {
        Ok(x)
    } else {
        Err(Error::EigenSolver(format!(
            "CG stalled at relative residual {res:e}"
        )))
    }
}

/// Assembles `E(f) = ½ Σ_J m_J Σ_± |∇^± f(J)|²` with one-sided differences and
/// no flux across the box faces, then finds its gap relative to the mass by
/// inverse iteration.
pub fn generator_gap(measure: &DiscreteMeasure, seed: u64) -> Result<GeneratorGap> {
    let n = measure.len();
    if n > MAX_GENERATOR_NODES {
        return Err(Error::EigenSolver(format!(
            "{n} nodes exceed the generator limit {MAX_GENERATOR_NODES}"
        )));
    }
    let grid = measure.grid;
    let g = grid.len();
    let spin = grid.spin;
    let dim = grid.dim();
    let mmax = measure.mass.iter().copied().fold(0.0, f64::max);
    let active_of: Vec<Option<usize>> = {
        let mut next = 0;
        measure
            .mass
            .iter()
            .map(|&m| {
                (m > 1e-14 * mmax).then(|| {
                    next += 1;
                    next - 1
                })
            })
            .collect()
    };
    let active: Vec<usize> = (0..n).filter(|&j| active_of[j].is_some()).collect();
    let na = active.len();
    if na < 2 {
        return Err(Error::EigenSolver("fewer than two nodes carry mass".into()));
    }
    // gradient component c as a combination of coordinate partials
    let lin: Vec<Vec<[f64; 3]>> = (0..g)
        .map(|node| {
            let x = grid.nodes[node];
            (0..spin.gradient_dim())
                .map(|c| {
                    let mut row = [0.0; 3];
                    for (a, slot) in row.iter_mut().enumerate().take(dim) {
                        let mut e = [0.0; 3];
                        e[a] = 1.0;
                        *slot = spin.gradient_from_partials(&x, &e)[c];
                    }
                    row
                })
                .collect()
        })
        .collect();
    let mut triplets = Vec::new();
    for (ia, &j) in active.iter().enumerate() {
        let w = 0.5 * measure.mass[j];
        for site in 0..measure.sites {
            let stride = g.pow((measure.sites - 1 - site) as u32);
            let node = measure.digit(j, site);
            for dir in [1isize, -1] {
                let mut nb = [None; 3];
                let mut h = [0.0; 3];
                for a in 0..dim {
                    if let Some(t) = grid.step(node, a, dir) {
                        let jj = j - node * stride + t * stride;
                        if let Some(k) = active_of[jj] {
                            nb[a] = Some(k);
                            h[a] = grid.nodes[t][a] - grid.nodes[node][a];
                        }
                    }
                }
                for row in &lin[node] {
                    let mut entries: Vec<(usize, f64)> = vec![(ia, 0.0)];
                    let mut ok = true;
                    for a in 0..dim {
                        if row[a] == 0.0 {
                            continue;
                        }
                        match nb[a] {
                            Some(k) => {
                                entries.push((k, row[a] / h[a]));
                                entries[0].1 -= row[a] / h[a];
                            }
                            None => ok = false,
                        }
                    }
                    if !ok {
                        continue;
                    }
                    for &(r, vr) in &entries {
                        for &(c, vc) in &entries {
                            triplets.push((r, c, w * vr * vc));
                        }
                    }
                }
            }
        }
    }
    let a = Csr::from_triplets(na, triplets);
    let diag = a.diagonal(na);
    if diag.iter().any(|d| !(*d > 0.0)) {
        return Err(Error::EigenSolver(
            "isolated node in the generator stencil".into(),
        ));
    }
    let m: Vec<f64> = active.iter().map(|&j| measure.mass[j]).collect();
    let mtot: f64 = m.iter().sum();
    let center = |x: &mut [f64]| {
        let c = dot(&m, x) / mtot;
        x.iter_mut().for_each(|v| *v -= c);
    };
    let mnorm = |x: &[f64]| par::sum(x.len(), |k| m[k] * x[k] * x[k]).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x: Vec<f64> = (0..na).map(|_| StandardNormal.sample(&mut rng)).collect();
    center(&mut x);
    let s = mnorm(&x);
    x.iter_mut().for_each(|v| *v /= s);
    let mut ax = vec![0.0; na];
    let mut lambda = f64::INFINITY;
    let max_iter = 400;
    for it in 1..=max_iter {
        let b: Vec<f64> = (0..na).map(|k| m[k] * x[k]).collect();
        let mut y = pcg(&a, &diag, &b, 1e-11, 20 * na + 100)?;
        center(&mut y);
        let s = mnorm(&y);
        if !(s > 0.0) || !s.is_finite() {
            return Err(Error::EigenSolver("inverse iteration collapsed".into()));
        }
        y.iter_mut().for_each(|v| *v /= s);
        x = y;
        a.apply(&x, &mut ax);
        let next = dot(&x, &ax);
        if (next - lambda).abs() <= 1e-10 * next {
            return Ok(GeneratorGap {
                lambda: next,
                iterations: it,
                converged: true,
                active_nodes: na,
            });
        }
        lambda = next;
    }
    Ok(GeneratorGap {
        lambda,
        iterations: max_iter,
        converged: false,
        active_nodes: na,
    })
}

/// `Ĉ = max(best Rayleigh ratio, 1/λ₁)` on a discrete measure.
pub fn estimate_sgi_on(
    measure: &DiscreteMeasure,
    phase: &Phase,
    params: &SgiParams,
) -> Result<EstimateReport> {
    params.validate()?;
    let family = build_family(&params.family, measure.grid, phase);
    if family.is_empty() {
        return Err(Error::InvalidParameter("empty test family".into()));
    }
    let ray = rayleigh_max(measure, phase, &family, params.q)?;
    let mut report = EstimateReport::new("C_SG", ray.value, "rayleigh", params.q)
        .meta("rayleigh", ray.value)
        .meta("rayleigh_class", &ray.class)
        .meta("family_evaluated", ray.evaluated)
        .meta("family_excluded", ray.excluded)
        .meta("nodes_per_axis", measure.grid.nodes_per_axis)
        .meta("half_widths", &measure.grid.half_widths)
        .meta("sites", measure.sites)
        .meta("seed", params.family.seed);
    if params.q != 2.0 || !params.eigen {
        return Ok(report.flag("rayleigh-only"));
    }
    match generator_gap(measure, params.family.seed) {
        Ok(gap) => {
            let c_eig = 1.0 / gap.lambda;
            report = report
                .meta("generator", c_eig)
                .meta("generator_lambda", gap.lambda)
                .meta("generator_iterations", gap.iterations)
                .meta("generator_nodes", gap.active_nodes)
                .with_uncertainty((c_eig - ray.value).abs());
            if !gap.converged {
                report = report.flag("generator-unconverged");
            }
            report.method = "rayleigh+generator".into();
            report.value = ray.value.max(c_eig);
        }
        Err(e) => {
            log::warn!("generator gap unavailable, using Rayleigh ratios only: {e}");
            report = report
                .flag("eigen-fallback")
                .meta("eigen_error", e.to_string());
        }
    }
    Ok(report)
}

/// q-spectral-gap constant of an engine's window measure.
pub fn estimate_sgi_constant(engine: &Engine, params: &SgiParams) -> Result<EstimateReport> {
    let measure = DiscreteMeasure::from_engine(engine)?;
    let beta = engine.bonds().iter().map(|b| b.2.abs()).fold(0.0, f64::max);
    Ok(estimate_sgi_on(&measure, &engine.model.phase, params)?.with_beta(beta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heisenberg::HomogeneousNorm;
    use crate::lattice::SpinSpace;
    use crate::quadrature::GridSpec;

    fn gaussian(n: usize) -> (Phase, QuadratureGrid) {
        let phase = Phase::monomial(0.5, 2.0, HomogeneousNorm::euclidean(1));
        let grid =
            QuadratureGrid::new(SpinSpace::Euclidean { n: 1 }, &GridSpec::new(n), &phase).unwrap();
        (phase, grid)
    }

    #[test]
    fn ornstein_uhlenbeck_gap_is_one() {
        let (phase, grid) = gaussian(201);
        let m = DiscreteMeasure::single_site(&grid, |x| phase.eval(x)).unwrap();
        let gap = generator_gap(&m, 1).unwrap();
        assert!(gap.converged);
        assert!((gap.lambda - 1.0).abs() < 0.02, "λ = {}", gap.lambda);
    }

    #[test]
    fn linear_function_saturates_gaussian_poincare() {
        let (phase, grid) = gaussian(201);
        let m = DiscreteMeasure::single_site(&grid, |x| phase.eval(x)).unwrap();
        let values: Vec<f64> = grid.nodes.iter().map(|x| x[0]).collect();
        let grads = vec![[1.0, 0.0, 0.0]; grid.len()];
        let (num, den) = m.rayleigh_parts(&values, &grads, &[0], 2.0);
        assert!((num / den - 1.0).abs() < 1e-6);
    }

    #[test]
    fn constant_function_is_excluded() {
        let (phase, grid) = gaussian(101);
        let m = DiscreteMeasure::single_site(&grid, |x| phase.eval(x)).unwrap();
        let r = rayleigh_max(&m, &phase, &[TestFunction::Constant], 2.0).unwrap();
        assert_eq!((r.evaluated, r.excluded), (0, 1));
    }

    #[test]
    fn bounded_perturbation_moves_ratio_by_bounded_factor() {
        let (phase, grid) = gaussian(201);
        let v = 0.3;
        let fam = build_family(&FamilySpec::default(), &grid, &phase);
        for q in [1.5, 2.0] {
            let base = DiscreteMeasure::single_site(&grid, |x| phase.eval(x)).unwrap();
            let pert =
                DiscreteMeasure::single_site(&grid, |x| phase.eval(x) + v * (3.0 * x[0]).sin())
                    .unwrap();
            let a = rayleigh_max(&base, &phase, &fam, q).unwrap().value;
            let b = rayleigh_max(&pert, &phase, &fam, q).unwrap().value;
            let bound = (2.0 * q * v).exp();
            assert!(b <= bound * a && a <= bound * b, "q={q}: {a} vs {b}");
        }
    }

    #[test]
    fn params_reject_bad_q() {
        assert!(SgiParams::new(2.5).is_err());
        assert!(SgiParams::new(1.0).is_err());
        let p = SgiParams::new(1.5).unwrap();
        assert!((p.p - 3.0).abs() < 1e-12);
    }
}
