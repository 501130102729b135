//! Conditional expectations, the sweep operator and sampling on a finite window.
//!
//! Every window site carries the same quadrature grid. The window Gibbs measure is
//! `Π_i A_i(x_i) Π_bonds K(x_i, x_j)` with unary tables `A_i = w·exp(−φ − exterior bonds)`
//! and bond kernels `K = exp(−β_ij V_s)`. Expectations are computed by variable
//! elimination on these factors, so only tables over the coordinates a function
//! still depends on are ever stored.

mod mcmc;
mod tensor;

pub use mcmc::{mcmc_sample, McmcParams, McmcRun, McmcSummary};
pub use tensor::{contract, eliminate, GridFunction, Tensor};

use std::collections::{BTreeSet, HashMap};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{
    potential_energy, Boundary, LatticeWindow, Site, Spin, SpinModel, SublatticePartition,
};
use crate::par;
use crate::quadrature::{GridSpec, QuadratureGrid};

/// Default cap on table entries (about 0.5 GB of `f64`).
pub const DEFAULT_TENSOR_LIMIT: usize = 64 * 1024 * 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineOptions {
    pub tensor_limit: usize,
    /// Reject grids whose outer face carries more than this mass fraction.
    pub truncation_tolerance: Option<f64>,
}

impl Default for EngineOptions {
    fn default() -> Self {
        Self {
            tensor_limit: DEFAULT_TENSOR_LIMIT,
            truncation_tolerance: Some(1e-8),
        }
    }
}

/// Quadrature realization of the window's local specification.
#[derive(Debug)]
pub struct Engine {
    pub model: SpinModel,
    pub sites: Vec<Site>,
    pub grid: QuadratureGrid,
    pub options: EngineOptions,
    unary: Vec<Tensor>,
    /// `ln` of the factor removed from each unary table.
    log_scale: Vec<f64>,
    bonds: Vec<(usize, usize, f64)>,
    kernels: Vec<Tensor>,
    adjacency: Vec<Vec<usize>>,
    truncation: Vec<f64>,
    normalizers: Mutex<HashMap<Vec<usize>, Arc<Tensor>>>,
    marginals: Mutex<HashMap<Vec<usize>, Arc<Tensor>>>,
}

impl Engine {
    pub fn new(model: &SpinModel, window: &LatticeWindow, spec: &GridSpec) -> Result<Self> {
        Self::with_options(model, window, spec, EngineOptions::default())
    }

    pub fn with_options(
        model: &SpinModel,
        window: &LatticeWindow,
        spec: &GridSpec,
        options: EngineOptions,
    ) -> Result<Self> {
        model.validate()?;
        window.validate(model)?;
        let grid = QuadratureGrid::new(model.spin, spec, &model.phase)?;
        let bonds = window
            .interior_bonds(model)
            .into_iter()
            .map(|b| (b.i, b.j, b.beta))
            .collect();
        let mut exterior = vec![Vec::new(); window.len()];
        for b in window.exterior_bonds(model)? {
            exterior[b.i].push((b.value, b.beta));
        }
        Self::assemble(model, window.sites(), grid, bonds, exterior, options)
    }

    /// Engine over an arbitrary site set with every outside neighbor fixed by `omega`.
    pub fn for_sites(
        model: &SpinModel,
        sites: &[Site],
        omega: &Boundary,
        spec: &GridSpec,
        options: EngineOptions,
    ) -> Result<Self> {
        model.validate()?;
        let grid = QuadratureGrid::new(model.spin, spec, &model.phase)?;
        let index: HashMap<&Site, usize> = sites.iter().enumerate().map(|(k, s)| (s, k)).collect();
        let mut bonds = Vec::new();
        let mut exterior = vec![Vec::new(); sites.len()];
        for (i, s) in sites.iter().enumerate() {
            for n in crate::lattice::neighbors(s, model) {
                let b = model.beta_ij(s, &n);
                if b == 0.0 {
                    continue;
                }
                match index.get(&n) {
                    Some(&j) => {
                        if i < j {
                            bonds.push((i, j, b));
                        }
                    }
                    None => {
                        let v = *omega
                            .get(&n)
                            .ok_or_else(|| Error::MissingBoundary(n.clone()))?;
                        exterior[i].push((v, b));
                    }
                }
            }
        }
        Self::assemble(model, sites.to_vec(), grid, bonds, exterior, options)
    }

    fn assemble(
        model: &SpinModel,
        sites: Vec<Site>,
        grid: QuadratureGrid,
        bonds: Vec<(usize, usize, f64)>,
        exterior: Vec<Vec<(Spin, f64)>>,
        options: EngineOptions,
    ) -> Result<Self> {
        let g = grid.len();
        let phase: Vec<f64> = par::map_collect(g, |k| model.phase.eval(&grid.nodes[k]));
        let mut unary = Vec::with_capacity(sites.len());
        let mut log_scale = Vec::with_capacity(sites.len());
        let mut truncation = Vec::with_capacity(sites.len());
        for (i, ext) in exterior.iter().enumerate() {
            let u: Vec<f64> = par::map_collect(g, |k| {
                let x = &grid.nodes[k];
                phase[k]
                    + ext
                        .iter()
                        .map(|(w, b)| b * model.bond_energy(x, w))
                        .sum::<f64>()
            });
            if let Some(bad) = u.iter().find(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    what: "site energy on the grid".into(),
                    value: *bad,
                }
                .at_site(i));
            }
            let umin = u.iter().copied().fold(f64::INFINITY, f64::min);
            let a: Vec<f64> = (0..g)
                .map(|k| grid.weights[k] * (umin - u[k]).exp())
                .collect();
            let frac = grid.boundary_mass_fraction(&a);
            if let Some(tol) = options.truncation_tolerance {
                grid.check_truncation(&a, tol).map_err(|e| e.at_site(i))?;
            }
            truncation.push(frac);
            unary.push(Tensor::new(g, vec![i], a)?);
            log_scale.push(-umin);
        }
        let bond_len = tensor::checked_len(g, 2).unwrap_or(usize::MAX);
        if !bonds.is_empty() && bond_len > options.tensor_limit {
            return Err(Error::TooLarge {
                sites: 2,
                entries: bond_len,
                limit: options.tensor_limit,
            });
        }
        // one kernel per distinct coupling value
        let mut by_beta: Vec<(u64, Arc<Vec<f64>>)> = Vec::new();
        let mut kernels = Vec::with_capacity(bonds.len());
        let mut adjacency = vec![Vec::new(); sites.len()];
        for (bi, &(i, j, beta)) in bonds.iter().enumerate() {
            adjacency[i].push(bi);
            adjacency[j].push(bi);
            let key = beta.to_bits();
            let data = match by_beta.iter().find(|(k, _)| *k == key) {
                Some((_, d)) => d.clone(),
                None => {
                    let d = Arc::new(bond_kernel(model, &grid, beta)?);
                    by_beta.push((key, d.clone()));
                    d
                }
            };
            kernels.push(Tensor {
                nodes: g,
                scope: vec![i, j],
                data,
                symmetric: true,
            });
        }
        Ok(Self {
            model: model.clone(),
            sites,
            grid,
            options,
            unary,
            log_scale,
            bonds,
            kernels,
            adjacency,
            truncation,
            normalizers: Mutex::new(HashMap::new()),
            marginals: Mutex::new(HashMap::new()),
        })
    }

    /// Grid points per site.
    pub fn nodes(&self) -> usize {
        self.grid.len()
    }

    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    pub fn limit(&self) -> usize {
        self.options.tensor_limit
    }

    /// Outer-face mass fraction of each site's unary table.
    pub fn truncation_fractions(&self) -> &[f64] {
        &self.truncation
    }

    pub fn bonds(&self) -> &[(usize, usize, f64)] {
        &self.bonds
    }

    /// Window sites sharing a bond with `i`.
    pub fn window_neighbors(&self, i: usize) -> Vec<usize> {
        let mut out: Vec<usize> = self.adjacency[i]
            .iter()
            .map(|&b| {
                let (a, c, _) = self.bonds[b];
                if a == i {
                    c
                } else {
                    a
                }
            })
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    pub fn site_index(&self, s: &[i64]) -> Option<usize> {
        self.sites.iter().position(|t| t.as_slice() == s)
    }

    /// Tabulates `f` at the grid nodes of one site.
    pub fn site_function(
        &self,
        site: usize,
        f: impl Fn(&Spin) -> f64 + Sync + Send,
    ) -> Result<GridFunction> {
        let v = par::map_collect(self.nodes(), |k| f(&self.grid.nodes[k]));
        Ok(GridFunction::from_tensor(Tensor::new(
            self.nodes(),
            vec![site],
            v,
        )?))
    }

    /// `Σ_i f(x_i)` over all window sites.
    pub fn additive_function(
        &self,
        f: impl Fn(&Spin) -> f64 + Sync + Send,
    ) -> Result<GridFunction> {
        let v = par::map_collect(self.nodes(), |k| f(&self.grid.nodes[k]));
        GridFunction::site_sum(
            self.nodes(),
            (0..self.len()).map(|i| (i, v.clone())).collect(),
        )
    }

    /// Tabulates `f(x_i, x_j)` over two sites (`i < j`).
    pub fn pair_function(
        &self,
        i: usize,
        j: usize,
        f: impl Fn(&Spin, &Spin) -> f64 + Sync + Send,
    ) -> Result<GridFunction> {
        let (a, b) = if i < j { (i, j) } else { (j, i) };
        let g = self.nodes();
        let len = tensor::checked_len(g, 2).unwrap_or(usize::MAX);
        if len > self.limit() {
            return Err(Error::TooLarge {
                sites: 2,
                entries: len,
                limit: self.limit(),
            });
        }
        let swap = i > j;
        let v = par::map_collect(len, |k| {
            let (x, y) = (&self.grid.nodes[k / g], &self.grid.nodes[k % g]);
            if swap {
                f(y, x)
            } else {
                f(x, y)
            }
        });
        Ok(GridFunction::from_tensor(Tensor::new(g, vec![a, b], v)?))
    }

    /// Partition of `lambda` into bond-connected clusters.
    fn clusters(&self, lambda: &[usize]) -> Vec<Vec<usize>> {
        let set: BTreeSet<usize> = lambda.iter().copied().collect();
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for &s in &set {
            if !seen.insert(s) {
                continue;
            }
            let mut comp = vec![s];
            let mut stack = vec![s];
            while let Some(v) = stack.pop() {
                for n in self.window_neighbors(v) {
                    if set.contains(&n) && seen.insert(n) {
                        comp.push(n);
                        stack.push(n);
                    }
                }
            }
            comp.sort_unstable();
            out.push(comp);
        }
        out
    }

    /// Unary tables of `cluster` and every kernel touching it.
    fn cluster_factors(&self, cluster: &[usize]) -> Vec<Tensor> {
        let mut out: Vec<Tensor> = cluster.iter().map(|&i| self.unary[i].clone()).collect();
        let mut bonds: Vec<usize> = cluster
            .iter()
            .flat_map(|&i| self.adjacency[i].clone())
            .collect();
        bonds.sort_unstable();
        bonds.dedup();
        out.extend(bonds.into_iter().map(|b| self.kernels[b].clone()));
        out
    }

    /// `1 / Z_C` as a table over the window neighbors of `cluster`.
    fn inverse_normalizer(&self, cluster: &[usize]) -> Result<Arc<Tensor>> {
        if let Some(t) = self.normalizers.lock().expect("cache lock").get(cluster) {
            return Ok(t.clone());
        }
        let z = eliminate(
            self.nodes(),
            self.cluster_factors(cluster),
            cluster,
            self.limit(),
        )?;
        if let Some(bad) = z.data.iter().find(|v| !(**v > 0.0) || !v.is_finite()) {
            return Err(Error::NonFinite {
                what: format!("partition function of sites {cluster:?}"),
                value: *bad,
            });
        }
        let inv = Arc::new(z.map(|v| 1.0 / v));
        self.normalizers
            .lock()
            .expect("cache lock")
            .insert(cluster.to_vec(), inv.clone());
        Ok(inv)
    }

    /// Applies `E_C` to one table, for a bond-connected cluster `C`.
    fn expect_cluster(&self, cluster: &[usize], t: &Tensor) -> Result<Tensor> {
        let zinv = self.inverse_normalizer(cluster)?;
        let mut factors = self.cluster_factors(cluster);
        factors.push(t.clone());
        let num = eliminate(self.nodes(), factors, cluster, self.limit())?;
        tensor::multiply_all(self.nodes(), vec![num, (*zinv).clone()], self.limit())
    }

    fn boundary_of(&self, cluster: &[usize]) -> Vec<usize> {
        let mut out: Vec<usize> = cluster
            .iter()
            .flat_map(|&i| self.window_neighbors(i))
            .filter(|n| !cluster.contains(n))
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    /// `E_Λ f` with the other window sites as free coordinates and the exterior fixed.
    pub fn expect(&self, lambda: &[usize], f: &GridFunction) -> Result<GridFunction> {
        if let Some(&bad) = lambda.iter().find(|&&s| s >= self.len()) {
            return Err(Error::InvalidParameter(format!(
                "site {bad} outside the window"
            )));
        }
        let clusters = self.clusters(lambda);
        let mut terms = Vec::with_capacity(f.terms.len());
        for t in &f.terms {
            let mut cur = t.clone();
            let mut pending: Vec<&Vec<usize>> = clusters.iter().collect();
            loop {
                // next cluster touching the table, smallest resulting scope first
                let choice = pending
                    .iter()
                    .enumerate()
                    .filter(|(_, c)| c.iter().any(|s| cur.contains(*s)))
                    .map(|(k, c)| {
                        let mut scope: BTreeSet<usize> = cur.scope.iter().copied().collect();
                        scope.extend(self.boundary_of(c));
                        for s in c.iter() {
                            scope.remove(s);
                        }
                        (k, scope.len())
                    })
                    .min_by_key(|(_, n)| *n);
                let Some((k, _)) = choice else { break };
                let c = pending.swap_remove(k);
                cur = self.expect_cluster(c, &cur).map_err(|e| e.at_site(c[0]))?;
            }
            terms.push(cur);
        }
        Ok(GridFunction {
            nodes: self.nodes(),
            terms,
        }
        .merged())
    }

    /// Evaluates `E_Λ f` at a grid configuration of the other sites.
    pub fn expect_at(&self, lambda: &[usize], f: &GridFunction, config: &[usize]) -> Result<f64> {
        Ok(self.expect(lambda, f)?.value_at(config))
    }

    /// Marginal of the window measure on `sites` (sums to one).
    pub fn marginal(&self, sites: &[usize]) -> Result<Arc<Tensor>> {
        let mut key = sites.to_vec();
        key.sort_unstable();
        key.dedup();
        if let Some(t) = self.marginals.lock().expect("cache lock").get(&key) {
            return Ok(t.clone());
        }
        let mut factors: Vec<Tensor> = self.unary.clone();
        factors.extend(self.kernels.iter().cloned());
        let rest: Vec<usize> = (0..self.len()).filter(|s| !key.contains(s)).collect();
        let mut m = eliminate(self.nodes(), factors, &rest, self.limit())?;
        if m.scope != key {
            m = m.broadcast(&key, self.limit())?;
        }
        let total: f64 = m.data.iter().sum();
        if !(total > 0.0) || !total.is_finite() {
            return Err(Error::NonFinite {
                what: "window partition function".into(),
                value: total,
            });
        }
        let m = Arc::new(m.scale(1.0 / total));
        self.marginals
            .lock()
            .expect("cache lock")
            .insert(key, m.clone());
        Ok(m)
    }

    /// `ν(f)` under the window measure.
    pub fn mean(&self, f: &GridFunction) -> Result<f64> {
        let mut total = 0.0;
        for t in &f.terms {
            if let Some(v) = t.scalar_value() {
                total += v;
                continue;
            }
            let m = self.marginal(&t.scope)?;
            total += par::sum(t.len(), |k| t.data[k] * m.data[k]);
        }
        Ok(total)
    }

    /// `ln Z` of the window measure, including the removed unary scales.
    pub fn log_partition(&self) -> Result<f64> {
        let mut factors: Vec<Tensor> = self.unary.clone();
        factors.extend(self.kernels.iter().cloned());
        let all: Vec<usize> = (0..self.len()).collect();
        let z = eliminate(self.nodes(), factors, &all, self.limit())?
            .scalar_value()
            .expect("all sites eliminated");
        Ok(z.ln() + self.log_scale.iter().sum::<f64>())
    }

    /// Applies `E_{Γ_0}` twice, then `E_{Γ_1}, …, E_{Γ_{N−1}}`.
    pub fn sweep(&self, f: &GridFunction, partition: &SublatticePartition) -> Result<GridFunction> {
        let comps = self.components(partition);
        let mut h = self.expect(&comps[0], f)?;
        h = self.expect(&comps[0], &h)?;
        for c in &comps[1..] {
            h = self.expect(c, &h)?;
        }
        Ok(h)
    }

    /// Window site indices of each partition component.
    pub fn components(&self, partition: &SublatticePartition) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); partition.len()];
        for (k, s) in self.sites.iter().enumerate() {
            out[partition.component_of(s)].push(k);
        }
        out
    }

    /// `𝒫f, …, 𝒫^m f` with spreads and a divergence flag.
    pub fn iterate_sweep(
        &self,
        f: &GridFunction,
        m: usize,
        partition: &SublatticePartition,
    ) -> Result<SweepTrace> {
        if m == 0 {
            return Err(Error::InvalidParameter("iterate_sweep needs m ≥ 1".into()));
        }
        let mut iterates = Vec::with_capacity(m);
        let mut spreads = Vec::with_capacity(m);
        let mut cur = f.clone();
        let mut growth = 0;
        let mut diverging = false;
        for _ in 0..m {
            cur = self.sweep(&cur, partition)?;
            let s = cur.spread(self.limit())?;
            if let Some(&prev) = spreads.last() {
                if s > prev {
                    growth += 1;
                    if growth >= 3 {
                        diverging = true;
                    }
                } else {
                    growth = 0;
                }
            }
            spreads.push(s);
            iterates.push(cur.clone());
        }
        let estimate = match cur.scalar_value() {
            Some(v) => v,
            None => self.mean(&cur)?,
        };
        Ok(SweepTrace {
            iterates,
            spreads,
            estimate,
            diverging,
        })
    }

    /// `|∇F|^q` on the grid of `F`'s scope by central differences.
    pub fn gradient_power(&self, f: &GridFunction, q: f64) -> Result<GridFunction> {
        let t = match f.scalar_value() {
            Some(_) => return Ok(GridFunction::constant(self.nodes(), 0.0)),
            None => f.dense(self.limit())?,
        };
        let per: Vec<Tensor> = t.scope.iter().map(|&s| self.partial_sq(&t, s)).collect();
        let mut acc = per[0].data.as_ref().clone();
        for p in &per[1..] {
            for (a, b) in acc.iter_mut().zip(p.data.iter()) {
                *a += b;
            }
        }
        let half = 0.5 * q;
        let data = par::map_collect(acc.len(), |k| acc[k].powf(half));
        Ok(GridFunction::from_tensor(Tensor::new(
            self.nodes(),
            t.scope.clone(),
            data,
        )?))
    }

    /// `|∇_s F|^q` for one site of `F`'s scope.
    pub fn site_gradient_power(
        &self,
        f: &GridFunction,
        site: usize,
        q: f64,
    ) -> Result<GridFunction> {
        if !f.depends_on(site) {
            return Ok(GridFunction::constant(self.nodes(), 0.0));
        }
        let t = f.dense(self.limit())?;
        let p = self.partial_sq(&t, site);
        let half = 0.5 * q;
        Ok(GridFunction::from_tensor(p.map(|v| v.powf(half))))
    }

    /// `|∇_s t|²` over `t`'s scope.
    fn partial_sq(&self, t: &Tensor, site: usize) -> Tensor {
        let pos = t.scope.binary_search(&site).expect("site in scope");
        let g = self.nodes();
        let stride = g.pow((t.scope.len() - 1 - pos) as u32);
        let spin = self.model.spin;
        let dim = self.grid.dim();
        let grid = &self.grid;
        let data = par::map_collect(t.len(), |k| {
            let node = (k / stride) % g;
            let x = grid.nodes[node];
            let mut d = [0.0; 3];
            for (axis, slot) in d.iter_mut().enumerate().take(dim) {
                let up = grid.step(node, axis, 1);
                let down = grid.step(node, axis, -1);
                let (hi, lo) = (up.unwrap_or(node), down.unwrap_or(node));
                let dx = grid.nodes[hi][axis] - grid.nodes[lo][axis];
                let fh = t.data[k - node * stride + hi * stride];
                let fl = t.data[k - node * stride + lo * stride];
                *slot = (fh - fl) / dx;
            }
            let v = spin.gradient_from_partials(&x, &d);
            v.iter().map(|c| c * c).sum()
        });
        Tensor {
            nodes: g,
            scope: t.scope.clone(),
            data: Arc::new(data),
            symmetric: false,
        }
    }

    /// `ν|∇F|^q`. For `q = 2` the site contributions are taken separately, so only
    /// the terms touching each site are ever combined.
    pub fn gradient_moment(&self, f: &GridFunction, q: f64) -> Result<f64> {
        if q != 2.0 {
            return self.mean(&self.gradient_power(f, q)?);
        }
        let mut total = 0.0;
        for s in f.scope() {
            total += self.site_gradient_moment(f, s, 2.0)?;
        }
        Ok(total)
    }

    /// `ν|∇_s F|^q`, combining only the terms of `F` that touch `s`.
    pub fn site_gradient_moment(&self, f: &GridFunction, site: usize, q: f64) -> Result<f64> {
        let local = GridFunction {
            nodes: self.nodes(),
            terms: f
                .terms
                .iter()
                .filter(|t| t.contains(site))
                .cloned()
                .collect(),
        };
        if local.terms.is_empty() {
            return Ok(0.0);
        }
        self.mean(&self.site_gradient_power(&local, site, q)?)
    }

    /// Window energy at a grid configuration.
    pub fn energy_at(&self, config: &[usize]) -> f64 {
        let mut u = 0.0;
        for (i, &c) in config.iter().enumerate() {
            u -= (self.unary[i].data[c] / self.grid.weights[c]).ln() + self.log_scale[i];
        }
        for (b, &(i, j, _)) in self.bonds.iter().enumerate() {
            u -= self.kernels[b].data[config[i] * self.nodes() + config[j]].ln();
        }
        u
    }
}

fn bond_kernel(model: &SpinModel, grid: &QuadratureGrid, beta: f64) -> Result<Vec<f64>> {
    let g = grid.len();
    let mut data = vec![0.0; g * g];
    par::fill_blocks(&mut data, g, |start, row| {
        let x = &grid.nodes[start / g];
        for (h, slot) in row.iter_mut().enumerate() {
            *slot = -beta * model.bond_energy(x, &grid.nodes[h]);
        }
    });
    let worst = data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !worst.is_finite() || worst > 700.0 {
        return Err(Error::NonFinite {
            what: "bond kernel exponent".into(),
            value: worst,
        });
    }
    for v in data.iter_mut() {
        *v = v.exp();
    }
    Ok(data)
}

/// Iterates of the sweep operator.
#[derive(Debug, Clone)]
pub struct SweepTrace {
    pub iterates: Vec<GridFunction>,
    /// `max − min` of each iterate over its remaining coordinates.
    pub spreads: Vec<f64>,
    /// `ν(𝒫^m f)` for the last iterate.
    pub estimate: f64,
    /// Spread grew on three consecutive sweeps.
    pub diverging: bool,
}

/// `∫ exp(−U_i^ω) dx_i` for a single site by quadrature.
pub fn partition_function(
    model: &SpinModel,
    site: &[i64],
    omega: &Boundary,
    spec: &GridSpec,
) -> Result<f64> {
    let grid = QuadratureGrid::new(model.spin, spec, &model.phase)?;
    let lambda = vec![site.to_vec()];
    let mut energies = Vec::with_capacity(grid.len());
    for x in &grid.nodes {
        energies.push(potential_energy(model, &lambda, &[*x], omega)?);
    }
    let dens: Vec<f64> = energies
        .iter()
        .zip(&grid.weights)
        .map(|(u, w)| w * (-u).exp())
        .collect();
    grid.check_truncation(&dens, spec.tail_tolerance)?;
    let z: f64 = dens.iter().sum();
    if !(z > 0.0) || !z.is_finite() {
        return Err(Error::NonFinite {
            what: "single-site partition function".into(),
            value: z,
        });
    }
    Ok(z)
}

/// Residual `max |E_{Λ2}(E_{Λ1} f) − E_{Λ2} f|` over the remaining coordinates.
pub fn dlr_compatibility_check(
    engine: &Engine,
    lambda1: &[usize],
    lambda2: &[usize],
    f: &GridFunction,
) -> Result<f64> {
    if !lambda1.iter().all(|s| lambda2.contains(s)) {
        return Err(Error::InvalidParameter("Λ1 must be contained in Λ2".into()));
    }
    let inner = engine.expect(lambda1, f)?;
    let lhs = engine.expect(lambda2, &inner)?;
    let rhs = engine.expect(lambda2, f)?;
    let diff = lhs.add(&rhs.scale(-1.0)).merged();
    let t = diff.dense(engine.limit())?;
    Ok(t.data.iter().fold(0.0, |m, v| m.max(v.abs())))
}

/// Backend realizing `E_Λ^ω` for continuous observables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "backend", rename_all = "snake_case")]
pub enum Backend {
    Quadrature(GridSpec),
    Mcmc(McmcParams),
}

/// `E_Λ^ω` on a site set with every other spin fixed.
#[derive(Debug, Clone)]
pub struct ConditionalExpectationOperator {
    pub model: SpinModel,
    pub sites: Vec<Site>,
    pub backend: Backend,
}

/// Expectation with its standard error (zero for quadrature).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Expectation {
    pub value: f64,
    pub std_error: f64,
}

impl ConditionalExpectationOperator {
    pub fn new(model: &SpinModel, sites: Vec<Site>, backend: Backend) -> Self {
        Self {
            model: model.clone(),
            sites,
            backend,
        }
    }

    /// `E_Λ^ω f` for an observable of the spins on `Λ` (listed in `sites` order).
    pub fn expectation(
        &self,
        f: &(dyn Fn(&[Spin]) -> f64 + Sync),
        omega: &Boundary,
    ) -> Result<Expectation> {
        match &self.backend {
            Backend::Quadrature(spec) => {
                let options = EngineOptions {
                    truncation_tolerance: Some(spec.tail_tolerance),
                    ..EngineOptions::default()
                };
                let engine = Engine::for_sites(&self.model, &self.sites, omega, spec, options)?;
                let n = engine.len();
                let g = engine.nodes();
                let total = tensor::checked_len(g, n).unwrap_or(usize::MAX);
                if total > engine.limit() {
                    return Err(Error::TooLarge {
                        sites: n,
                        entries: total,
                        limit: engine.limit(),
                    });
                }
                let joint = engine.marginal(&(0..n).collect::<Vec<_>>())?;
                let value = par::sum(total, |k| {
                    let digits = joint.digits(k);
                    let x: Vec<Spin> = digits.iter().map(|&d| engine.grid.nodes[d]).collect();
                    joint.data[k] * f(&x)
                });
                Ok(Expectation {
                    value,
                    std_error: 0.0,
                })
            }
            Backend::Mcmc(params) => {
                let run = mcmc::sample_sites(&self.model, &self.sites, omega, params, None)?;
                let s = run.summarize(|x| f(x));
                Ok(Expectation {
                    value: s.mean,
                    std_error: s.std_error,
                })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heisenberg::HomogeneousNorm;
    use crate::lattice::{build_partition, CouplingMatrix, Interaction, Phase, SpinSpace};
    use approx::assert_abs_diff_eq;

    fn kaplan(beta: f64) -> SpinModel {
        let n = HomogeneousNorm::kaplan();
        SpinModel::new(
            SpinSpace::Heisenberg,
            1,
            Phase::monomial(1.0, 4.0, n.clone()),
            Interaction::norm_product(-1.0, n, 1.0, 1.0),
            CouplingMatrix::nearest_neighbor(beta),
            2.0,
        )
        .unwrap()
    }

    fn gaussian(beta: f64) -> SpinModel {
        let n = HomogeneousNorm::euclidean(1);
        SpinModel::new(
            SpinSpace::Euclidean { n: 1 },
            1,
            Phase::monomial(0.5, 2.0, n.clone()),
            Interaction::norm_product(1.0, n, 1.0, 1.0),
            CouplingMatrix::nearest_neighbor(beta),
            2.0,
        )
        .unwrap()
    }

    fn chain(len: usize, value: Spin) -> LatticeWindow {
        LatticeWindow::chain(len).with_uniform_boundary(1, value)
    }

    #[test]
    fn unit_function_is_preserved() {
        let m = kaplan(0.2);
        let e = Engine::new(&m, &chain(3, [0.5, 0.0, 0.3]), &GridSpec::new(5)).unwrap();
        let one = GridFunction::constant(e.nodes(), 1.0);
        for lambda in [vec![0], vec![1], vec![0, 2], vec![0, 1, 2]] {
            let r = e.expect(&lambda, &one).unwrap();
            assert_abs_diff_eq!(r.scalar_value().unwrap(), 1.0, epsilon = 1e-12);
        }
        // a function of x_1 also integrates to a function with E 1 = 1 behavior
        let f = e.site_function(1, |_| 1.0).unwrap();
        let r = e.expect(&[1], &f).unwrap();
        let t = r.dense(e.limit()).unwrap();
        assert!(t.data.iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn single_site_expectation_matches_direct_quadrature() {
        let m = kaplan(0.3);
        let w = chain(2, [0.2, -0.4, 0.6]);
        let spec = GridSpec::new(5);
        let e = Engine::new(&m, &w, &spec).unwrap();
        let f = e.site_function(0, |x| x[0] * x[0] + x[2]).unwrap();
        let r = e.expect(&[0], &f).unwrap();
        // direct: fix x_1 at a node, integrate x_0 with the full energy
        let omega = w.boundary_map();
        for y in [0usize, 17, 62] {
            let mut num = 0.0;
            let mut den = 0.0;
            for (k, x) in e.grid.nodes.iter().enumerate() {
                let u = w.energy(&m, &[*x, e.grid.nodes[y]]).unwrap();
                let p = e.grid.weights[k] * (-u).exp();
                num += p * (x[0] * x[0] + x[2]);
                den += p;
            }
            let _ = &omega;
            assert_abs_diff_eq!(r.value_at(&[0, y]), num / den, epsilon = 1e-12);
        }
    }

    #[test]
    fn beta_zero_sweep_is_exact_mean() {
        let m = kaplan(0.0);
        let e = Engine::new(&m, &chain(4, [0.0; 3]), &GridSpec::new(5)).unwrap();
        let f = e.additive_function(|x| x[0] * x[0] + x[2] * x[2]).unwrap();
        let p = build_partition(1, 1).unwrap();
        let tr = e.iterate_sweep(&f, 1, &p).unwrap();
        let v = tr.iterates[0]
            .scalar_value()
            .expect("constant after one sweep");
        assert_eq!(tr.spreads[0], 0.0);
        assert_abs_diff_eq!(v, e.mean(&f).unwrap(), epsilon = 1e-12);
    }

    #[test]
    fn odd_function_has_zero_mean() {
        let m = kaplan(0.2);
        let e = Engine::new(&m, &chain(2, [0.3, 0.1, 0.5]), &GridSpec::new(5)).unwrap();
        let f = e.site_function(0, |x| x[0] + x[1] * x[2]).unwrap();
        let r = e.expect(&[0], &f).unwrap();
        let t = r.dense(e.limit()).unwrap();
        assert!(t.data.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn dlr_on_nested_sets() {
        let m = gaussian(0.3);
        let e = Engine::new(&m, &chain(3, [0.7, 0.0, 0.0]), &GridSpec::new(31)).unwrap();
        let f = e
            .pair_function(0, 2, |x, y| (x[0] - 0.3 * y[0]).powi(2))
            .unwrap()
            .add(&e.site_function(1, |x| x[0].sin()).unwrap());
        let sets: Vec<Vec<usize>> = vec![vec![0], vec![1], vec![0, 1], vec![1, 2], vec![0, 1, 2]];
        for l2 in &sets {
            for l1 in &sets {
                if l1.iter().all(|s| l2.contains(s)) {
                    let r = dlr_compatibility_check(&e, l1, l2, &f).unwrap();
                    assert!(r < 1e-12, "{l1:?} ⊂ {l2:?}: {r}");
                }
            }
        }
    }

    #[test]
    fn gaussian_partition_function_and_boundary_independence() {
        let m = gaussian(0.0);
        let spec = GridSpec::new(201);
        let z = partition_function(&m, &[0], &Boundary::new(), &spec).unwrap();
        assert_abs_diff_eq!(z, (2.0 * std::f64::consts::PI).sqrt(), epsilon = 1e-7);
        let k = kaplan(0.0);
        let spec = GridSpec::new(9);
        let a = partition_function(&k, &[0], &Boundary::new(), &spec).unwrap();
        let omega: Boundary = [(vec![-1], [1.0, 2.0, 3.0])].into_iter().collect();
        let b = partition_function(&k, &[0], &omega, &spec).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn small_box_is_rejected() {
        let m = gaussian(0.0);
        let spec = GridSpec::new(21).with_half_widths(vec![1.0]);
        let e = Engine::new(&m, &chain(1, [0.0; 3]), &spec).unwrap_err();
        assert!(matches!(e, Error::AtSite { .. }));
        let z = partition_function(&m, &[0], &Boundary::new(), &spec).unwrap_err();
        assert!(matches!(z, Error::EnlargeBox { .. }));
    }

    #[test]
    fn gradient_of_linear_function() {
        let m = gaussian(0.0);
        let e = Engine::new(&m, &chain(1, [0.0; 3]), &GridSpec::new(41)).unwrap();
        let f = e.site_function(0, |x| 3.0 * x[0]).unwrap();
        assert_abs_diff_eq!(e.gradient_moment(&f, 2.0).unwrap(), 9.0, epsilon = 1e-9);
    }

    #[test]
    fn jensen_contraction() {
        let m = kaplan(0.25);
        let e = Engine::new(&m, &chain(2, [0.1, 0.2, 0.3]), &GridSpec::new(5)).unwrap();
        let f = e
            .pair_function(0, 1, |x, y| (x[0] - y[2]).sin() + x[2])
            .unwrap();
        let q = 1.5;
        let ef = e.expect(&[0], &f).unwrap().dense(e.limit()).unwrap();
        let fq = GridFunction::from_tensor(f.dense(e.limit()).unwrap().map(|v| v.abs().powf(q)));
        let efq = e.expect(&[0], &fq).unwrap().dense(e.limit()).unwrap();
        for (a, b) in ef.data.iter().zip(efq.data.iter()) {
            assert!(a.abs().powf(q) <= b + 1e-8);
        }
    }
}
