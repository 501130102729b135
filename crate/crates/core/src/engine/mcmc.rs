//! Metropolis-within-Gibbs sampling of the window measure.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{Boundary, LatticeWindow, Site, Spin, SpinModel, SpinSpace};
use crate::par;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McmcParams {
    /// Horizontal proposal scale σ; the vertical scale is σ².
    pub proposal_scale: f64,
    /// Total sweeps per chain, burn-in included.
    pub steps: usize,
    pub burn_in: usize,
    pub seed: u64,
    pub thinning: usize,
    #[serde(default = "one")]
    pub chains: usize,
}

fn one() -> usize {
    1
}

impl Default for McmcParams {
    fn default() -> Self {
        Self {
            proposal_scale: 0.8,
            steps: 20_000,
            burn_in: 2_000,
            seed: 0x5eed,
            thinning: 1,
            chains: 4,
        }
    }
}

impl McmcParams {
    pub fn validate(&self) -> Result<()> {
        if self.steps <= self.burn_in {
            return Err(Error::InvalidParameter(format!(
                "steps ({}) must exceed burn-in ({})",
                self.steps, self.burn_in
            )));
        }
        if self.thinning == 0 || self.chains == 0 {
            return Err(Error::InvalidParameter(
                "thinning and chain count must be ≥ 1".into(),
            ));
        }
        if !(self.proposal_scale > 0.0) || !self.proposal_scale.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "proposal scale {} must be positive",
                self.proposal_scale
            )));
        }
        Ok(())
    }
}

/// Recorded sweeps of one chain.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainRun {
    /// Configurations after burn-in, every `thinning` sweeps.
    pub samples: Vec<Vec<Spin>>,
    pub energies: Vec<f64>,
    pub acceptance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct McmcRun {
    pub chains: Vec<ChainRun>,
}

/// Pooled batch-means estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McmcSummary {
    pub mean: f64,
    pub std_error: f64,
    pub acceptance: f64,
    pub samples: usize,
}

const BATCHES: usize = 20;

impl McmcRun {
    pub fn acceptance(&self) -> f64 {
        self.chains.iter().map(|c| c.acceptance).sum::<f64>() / self.chains.len() as f64
    }

    /// Mean of `f` over all chains with a batch-means standard error.
    pub fn summarize(&self, f: impl Fn(&[Spin]) -> f64) -> McmcSummary {
        let mut means = Vec::new();
        let mut var_sum = 0.0;
        let mut samples = 0;
        for c in &self.chains {
            let v: Vec<f64> = c.samples.iter().map(|x| f(x)).collect();
            samples += v.len();
            let b = BATCHES.min(v.len()).max(1);
            let len = v.len() / b;
            let batch: Vec<f64> = (0..b)
                .map(|k| v[k * len..(k + 1) * len].iter().sum::<f64>() / len.max(1) as f64)
                .collect();
            let m = batch.iter().sum::<f64>() / b as f64;
            let var = if b > 1 {
                batch.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (b - 1) as f64 / b as f64
            } else {
                0.0
            };
            means.push(m);
            var_sum += var;
        }
        let c = means.len() as f64;
        McmcSummary {
            mean: means.iter().sum::<f64>() / c,
            std_error: var_sum.sqrt() / c,
            acceptance: self.acceptance(),
            samples,
        }
    }
}

/// Interaction structure seen by the sampler.
struct Local {
    spin: SpinSpace,
    neighbors: Vec<Vec<(usize, f64)>>,
    exterior: Vec<Vec<(Spin, f64)>>,
}

impl Local {
    fn site_energy(&self, model: &SpinModel, i: usize, x: &Spin, cfg: &[Spin]) -> f64 {
        let mut u = model.phase.eval(x);
        for &(j, b) in &self.neighbors[i] {
            u += b * model.bond_energy(x, &cfg[j]);
        }
        for (w, b) in &self.exterior[i] {
            u += b * model.bond_energy(x, w);
        }
        u
    }

    fn total_energy(&self, model: &SpinModel, cfg: &[Spin]) -> f64 {
        let mut u = 0.0;
        for (i, x) in cfg.iter().enumerate() {
            u += model.phase.eval(x);
            for &(j, b) in &self.neighbors[i] {
                if i < j {
                    u += b * model.bond_energy(x, &cfg[j]);
                }
            }
            for (w, b) in &self.exterior[i] {
                u += b * model.bond_energy(x, w);
            }
        }
        u
    }
}

/// Runs the chains on a window; the first chain's recorded sweeps go to `csv` when given.
pub fn mcmc_sample(
    model: &SpinModel,
    window: &LatticeWindow,
    params: &McmcParams,
    csv: Option<&mut dyn Write>,
) -> Result<McmcRun> {
    model.validate()?;
    window.validate(model)?;
    let n = window.len();
    let mut neighbors = vec![Vec::new(); n];
    for b in window.interior_bonds(model) {
        neighbors[b.i].push((b.j, b.beta));
        neighbors[b.j].push((b.i, b.beta));
    }
    let mut exterior = vec![Vec::new(); n];
    for b in window.exterior_bonds(model)? {
        exterior[b.i].push((b.value, b.beta));
    }
    run(
        model,
        &Local {
            spin: model.spin,
            neighbors,
            exterior,
        },
        params,
        csv,
    )
}

/// Runs the chains on an arbitrary site set with all outside neighbors fixed by `omega`.
pub(crate) fn sample_sites(
    model: &SpinModel,
    sites: &[Site],
    omega: &Boundary,
    params: &McmcParams,
    csv: Option<&mut dyn Write>,
) -> Result<McmcRun> {
    model.validate()?;
    let mut neighbors = vec![Vec::new(); sites.len()];
    let mut exterior = vec![Vec::new(); sites.len()];
    for (i, s) in sites.iter().enumerate() {
        for nb in crate::lattice::neighbors(s, model) {
            let b = model.beta_ij(s, &nb);
            if b == 0.0 {
                continue;
            }
            match sites.iter().position(|t| *t == nb) {
                Some(j) => neighbors[i].push((j, b)),
                None => {
                    let v = *omega
                        .get(&nb)
                        .ok_or_else(|| Error::MissingBoundary(nb.clone()))?;
                    exterior[i].push((v, b));
                }
            }
        }
    }
    run(
        model,
        &Local {
            spin: model.spin,
            neighbors,
            exterior,
        },
        params,
        csv,
    )
}

fn run(
    model: &SpinModel,
    local: &Local,
    params: &McmcParams,
    csv: Option<&mut dyn Write>,
) -> Result<McmcRun> {
    params.validate()?;
    let chains = par::map_collect(params.chains, |c| run_chain(model, local, params, c as u64));
    let acceptance = chains.iter().map(|c| c.0.acceptance).sum::<f64>() / chains.len() as f64;
    if !(0.1..=0.7).contains(&acceptance) {
        log::warn!(
            "acceptance rate {acceptance:.3} outside [0.1, 0.7]; retune the proposal scale {}",
            params.proposal_scale
        );
    }
    if let Some(w) = csv {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["step", "site", "x1", "x2", "x3", "U"])?;
        for (step, cfg, u) in &chains[0].1 {
            for (i, x) in cfg.iter().enumerate() {
                wr.write_record(&[
                    step.to_string(),
                    i.to_string(),
                    x[0].to_string(),
                    x[1].to_string(),
                    x[2].to_string(),
                    u.to_string(),
                ])?;
            }
        }
        wr.flush()?;
    }
    Ok(McmcRun {
        chains: chains.into_iter().map(|c| c.0).collect(),
    })
}

type Trace = Vec<(usize, Vec<Spin>, f64)>;

fn run_chain(
    model: &SpinModel,
    local: &Local,
    params: &McmcParams,
    chain: u64,
) -> (ChainRun, Trace) {
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    rng.set_stream(chain);
    let n = local.neighbors.len();
    let mut cfg: Vec<Spin> = vec![[0.0; 3]; n];
    let mut energy = local.total_energy(model, &cfg);
    let sigma = params.proposal_scale;
    let dim = local.spin.dim();
    let mut accepted = 0usize;
    let mut proposed = 0usize;
    let mut samples = Vec::new();
    let mut energies = Vec::new();
    let mut trace = Vec::new();
    for step in 0..params.steps {
        for i in 0..n {
            let mut g = [0.0; 3];
            for (a, slot) in g.iter_mut().enumerate().take(dim) {
                let z: f64 = rng.sample(StandardNormal);
                // dilation-consistent scaling: the vertical step is σ²
                *slot = if local.spin == SpinSpace::Heisenberg && a == 2 {
                    sigma * sigma * z
                } else {
                    sigma * z
                };
            }
            let old = cfg[i];
            let new = local.spin.compose(&old, &g);
            let du =
                local.site_energy(model, i, &new, &cfg) - local.site_energy(model, i, &old, &cfg);
            let u: f64 = rng.random();
            let accept = du <= 0.0 || u < (-du).exp();
            if step >= params.burn_in {
                proposed += 1;
            }
            if accept {
                cfg[i] = new;
                energy += du;
                if step >= params.burn_in {
                    accepted += 1;
                }
            }
        }
        if step >= params.burn_in && (step - params.burn_in).is_multiple_of(params.thinning) {
            samples.push(cfg.clone());
            energies.push(energy);
            if chain == 0 {
                trace.push((step, cfg.clone(), energy));
            }
        }
    }
    (
        ChainRun {
            samples,
            energies,
            acceptance: accepted as f64 / proposed.max(1) as f64,
        },
        trace,
    )
}
