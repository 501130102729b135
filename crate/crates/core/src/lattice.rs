//! Lattice geometry, finite-range couplings, potentials and the sublattice partition.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heisenberg::{
    compose, inverse, GradientMode, GroupPoint, HomogeneousNorm, HorizontalVector,
};

/// A lattice site in ℤ^D.
pub type Site = Vec<i64>;

/// Spin values are stored as three coordinates; ℝⁿ spins use the first `n`.
pub type Spin = [f64; 3];

pub fn l1_distance(a: &[i64], b: &[i64]) -> u64 {
    a.iter().zip(b).map(|(x, y)| x.abs_diff(*y)).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SpinSpace {
    Heisenberg,
    Euclidean { n: usize },
}

impl SpinSpace {
    /// Number of real coordinates per spin.
    pub fn dim(&self) -> usize {
        match self {
            SpinSpace::Heisenberg => 3,
            SpinSpace::Euclidean { n } => *n,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            SpinSpace::Euclidean { n } if !(1..=3).contains(n) => Err(Error::InvalidModel(
                format!("euclidean spin dimension {n} outside 1..=3"),
            )),
            _ => Ok(()),
        }
    }

    /// Group product: Heisenberg law, or vector addition.
    pub fn compose(&self, a: &Spin, b: &Spin) -> Spin {
        match self {
            SpinSpace::Heisenberg => {
                compose(&GroupPoint::from_array(*a), &GroupPoint::from_array(*b)).to_array()
            }
            SpinSpace::Euclidean { .. } => [a[0] + b[0], a[1] + b[1], a[2] + b[2]],
        }
    }

    pub fn inverse(&self, a: &Spin) -> Spin {
        match self {
            SpinSpace::Heisenberg => inverse(&GroupPoint::from_array(*a)).to_array(),
            SpinSpace::Euclidean { .. } => [-a[0], -a[1], -a[2]],
        }
    }

    /// `a ∘ b⁻¹`, the difference seen by the invariant fields.
    pub fn difference(&self, a: &Spin, b: &Spin) -> Spin {
        self.compose(a, &self.inverse(b))
    }

    /// Combines coordinate partials into the gradient: sub-gradient on ℍ, identity on ℝⁿ.
    pub fn gradient_from_partials(&self, x: &Spin, d: &[f64; 3]) -> Spin {
        match self {
            SpinSpace::Heisenberg => [d[0] + 2.0 * x[1] * d[2], d[1] - 2.0 * x[0] * d[2], 0.0],
            SpinSpace::Euclidean { .. } => *d,
        }
    }

    /// Number of gradient components.
    pub fn gradient_dim(&self) -> usize {
        match self {
            SpinSpace::Heisenberg => 2,
            SpinSpace::Euclidean { n } => *n,
        }
    }
}

/// `ρ(x)^e` and its gradient. Exponent 0 is the constant 1.
fn power_with_gradient(norm: &HomogeneousNorm, e: f64, x: &Spin) -> Result<(f64, Spin)> {
    if e == 0.0 {
        return Ok((1.0, [0.0; 3]));
    }
    let r = norm.eval(x);
    if r == 0.0 {
        if e > 1.0 {
            return Ok((0.0, [0.0; 3]));
        }
        return Err(Error::NotDifferentiable(x[0], x[1], x[2]));
    }
    let g = norm.gradient(x)?;
    let v = r.powf(e);
    let s = e * v / r;
    Ok((v, [s * g[0], s * g[1], s * g[2]]))
}

fn power(norm: &HomogeneousNorm, e: f64, x: &Spin) -> f64 {
    if e == 0.0 {
        1.0
    } else {
        norm.eval(x).powf(e)
    }
}

fn check_exponent(e: f64, what: &str) -> Result<()> {
    if e == 0.0 || e >= 1.0 && e.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidModel(format!(
            "{what} exponent {e} must lie in {{0}} ∪ [1, ∞)"
        )))
    }
}

/// Finite-range couplings `β_ij = β · profile[‖i − j‖₁ − 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CouplingMatrix {
    pub range: usize,
    pub beta: f64,
    /// Relative strengths by l¹ distance `1..=range`, each in `[-1, 1]`.
    pub profile: Vec<f64>,
}

impl CouplingMatrix {
    pub fn uniform(range: usize, beta: f64) -> Self {
        Self {
            range,
            beta,
            profile: vec![1.0; range],
        }
    }

    pub fn nearest_neighbor(beta: f64) -> Self {
        Self::uniform(1, beta)
    }

    pub fn with_beta(&self, beta: f64) -> Self {
        Self {
            beta,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.range == 0 {
            return Err(Error::InvalidModel("coupling range must be ≥ 1".into()));
        }
        if self.profile.len() != self.range {
            return Err(Error::InvalidModel(format!(
                "coupling profile has {} entries for range {}",
                self.profile.len(),
                self.range
            )));
        }
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return Err(Error::InvalidModel(format!(
                "coupling strength β = {} must be finite and ≥ 0",
                self.beta
            )));
        }
        if self.profile.iter().any(|p| !(p.abs() <= 1.0)) {
            return Err(Error::InvalidModel(
                "coupling profile entries must lie in [-1, 1]".into(),
            ));
        }
        Ok(())
    }

    pub fn get(&self, i: &[i64], j: &[i64]) -> f64 {
        let d = l1_distance(i, j) as usize;
        if d == 0 || d > self.range {
            0.0
        } else {
            self.beta * self.profile[d - 1]
        }
    }

    /// `Σ_{j ≠ i} |β_ij|^q` for a site of `ℤ^D`.
    pub fn row_power_sum(&self, dimension: usize, q: f64) -> f64 {
        let mut total = 0.0;
        for off in l1_ball(dimension, self.range) {
            let d = off.iter().map(|v| v.unsigned_abs()).sum::<u64>() as usize;
            if d > 0 {
                total += (self.beta * self.profile[d - 1]).abs().powf(q);
            }
        }
        total
    }
}

/// All offsets with `‖o‖₁ ≤ r`, in lexicographic order.
pub fn l1_ball(dimension: usize, r: usize) -> Vec<Site> {
    let r = r as i64;
    let mut out = vec![vec![]];
    for _ in 0..dimension {
        let mut next = Vec::new();
        for prefix in &out {
            let used: i64 = prefix.iter().map(|v: &i64| v.abs()).sum();
            for v in -(r - used)..=(r - used) {
                let mut p = prefix.clone();
                p.push(v);
                next.push(p);
            }
        }
        out = next;
    }
    out
}

/// One term `c · ρ(x)^e` of a phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseTerm {
    pub coefficient: f64,
    pub exponent: f64,
    pub norm: HomogeneousNorm,
}

/// Single-site potential `φ(x) = Σ c_k ρ_k(x)^{e_k}`; the first term leads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phase {
    pub terms: Vec<PhaseTerm>,
}

impl Phase {
    pub fn monomial(coefficient: f64, exponent: f64, norm: HomogeneousNorm) -> Self {
        Self {
            terms: vec![PhaseTerm {
                coefficient,
                exponent,
                norm,
            }],
        }
    }

    pub fn with_term(mut self, coefficient: f64, exponent: f64, norm: HomogeneousNorm) -> Self {
        self.terms.push(PhaseTerm {
            coefficient,
            exponent,
            norm,
        });
        self
    }

    pub fn leading(&self) -> Option<&PhaseTerm> {
        self.terms.first()
    }

    /// Order `p` of the phase (exponent of the leading term).
    pub fn order(&self) -> f64 {
        self.leading().map_or(0.0, |t| t.exponent)
    }

    pub fn validate(&self) -> Result<()> {
        let lead = self
            .leading()
            .ok_or_else(|| Error::InvalidModel("phase has no terms".into()))?;
        if !(lead.coefficient > 0.0) {
            return Err(Error::InvalidModel(
                "leading phase coefficient must be positive".into(),
            ));
        }
        for t in &self.terms {
            t.norm.kind.validate()?;
            if !t.coefficient.is_finite() || !(t.exponent >= 0.0) || !t.exponent.is_finite() {
                return Err(Error::InvalidModel(format!(
                    "phase term {}·ρ^{} is not admissible",
                    t.coefficient, t.exponent
                )));
            }
            if t.exponent > lead.exponent {
                return Err(Error::InvalidModel(format!(
                    "phase exponent {} exceeds the leading order {}",
                    t.exponent, lead.exponent
                )));
            }
        }
        if lead.exponent <= 0.0 {
            return Err(Error::InvalidModel("phase order must be positive".into()));
        }
        Ok(())
    }

    pub fn eval(&self, x: &Spin) -> f64 {
        self.terms
            .iter()
            .map(|t| t.coefficient * power(&t.norm, t.exponent, x))
            .sum()
    }

    pub fn gradient(&self, x: &Spin) -> Result<Spin> {
        let mut g = [0.0; 3];
        for t in &self.terms {
            let (_, gt) = power_with_gradient(&t.norm, t.exponent, x)?;
            for k in 0..3 {
                g[k] += t.coefficient * gt[k];
            }
        }
        Ok(g)
    }

    /// Minimum of φ along dilation rays from a set of directions; `None` if it falls without bound.
    pub fn radial_minimum(&self, spin: SpinSpace) -> Option<f64> {
        let dirs = sample_directions(spin, 24);
        let mut min = f64::INFINITY;
        for u in &dirs {
            let mut r = 1e-3;
            while r < 1e3 {
                let v = self.eval(&dilate_spin(spin, r, u));
                if !v.is_finite() {
                    return None;
                }
                min = min.min(v);
                r *= 1.1;
            }
            // the leading term must dominate at the far end of the ray
            let far = self.eval(&dilate_spin(spin, 1e3, u));
            if far < self.eval(&dilate_spin(spin, 1e2, u)) {
                return None;
            }
        }
        Some(min)
    }
}

/// `δ_λ` on ℍ, scalar multiplication on ℝⁿ.
pub fn dilate_spin(spin: SpinSpace, lambda: f64, x: &Spin) -> Spin {
    match spin {
        SpinSpace::Heisenberg => [lambda * x[0], lambda * x[1], lambda * lambda * x[2]],
        SpinSpace::Euclidean { .. } => [lambda * x[0], lambda * x[1], lambda * x[2]],
    }
}

/// Deterministic spread of directions (not normalized).
pub fn sample_directions(spin: SpinSpace, count: usize) -> Vec<Spin> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..count)
        .map(|k| {
            let t = (k as f64 + 0.5) / count as f64;
            let zc = 1.0 - 2.0 * t;
            let r = (1.0 - zc * zc).sqrt();
            let a = golden * k as f64;
            match spin {
                SpinSpace::Heisenberg => [r * a.cos(), r * a.sin(), zc],
                SpinSpace::Euclidean { n: 1 } => [if k % 2 == 0 { 1.0 } else { -1.0 }, 0.0, 0.0],
                SpinSpace::Euclidean { n: 2 } => {
                    let a = 2.0 * std::f64::consts::PI * t;
                    [a.cos(), a.sin(), 0.0]
                }
                SpinSpace::Euclidean { .. } => [r * a.cos(), r * a.sin(), zc],
            }
        })
        .collect()
}

/// One monomial of a pair interaction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InteractionTerm {
    /// `c · ρ(x)^α · δ(y)^β`.
    Product {
        coefficient: f64,
        rho: HomogeneousNorm,
        alpha: f64,
        delta: HomogeneousNorm,
        beta_exp: f64,
    },
    /// `c · ρ(x ∘ y⁻¹)^e`.
    GroupDifference {
        coefficient: f64,
        norm: HomogeneousNorm,
        exponent: f64,
    },
}

impl InteractionTerm {
    pub fn product(
        c: f64,
        rho: HomogeneousNorm,
        alpha: f64,
        delta: HomogeneousNorm,
        b: f64,
    ) -> Self {
        InteractionTerm::Product {
            coefficient: c,
            rho,
            alpha,
            delta,
            beta_exp: b,
        }
    }

    /// Total homogeneity degree of the monomial.
    pub fn degree(&self) -> f64 {
        match self {
            InteractionTerm::Product {
                alpha, beta_exp, ..
            } => alpha + beta_exp,
            InteractionTerm::GroupDifference { exponent, .. } => *exponent,
        }
    }

    fn eval(&self, spin: SpinSpace, x: &Spin, y: &Spin) -> f64 {
        match self {
            InteractionTerm::Product {
                coefficient,
                rho,
                alpha,
                delta,
                beta_exp,
            } => coefficient * power(rho, *alpha, x) * power(delta, *beta_exp, y),
            InteractionTerm::GroupDifference {
                coefficient,
                norm,
                exponent,
            } => coefficient * power(norm, *exponent, &spin.difference(x, y)),
        }
    }

    fn gradients(&self, spin: SpinSpace, x: &Spin, y: &Spin) -> Result<(Spin, Spin)> {
        match self {
            InteractionTerm::Product {
                coefficient,
                rho,
                alpha,
                delta,
                beta_exp,
            } => {
                let (rx, gx) = power_with_gradient(rho, *alpha, x)?;
                let (dy, gy) = power_with_gradient(delta, *beta_exp, y)?;
                let c = *coefficient;
                Ok((
                    [c * dy * gx[0], c * dy * gx[1], c * dy * gx[2]],
                    [c * rx * gy[0], c * rx * gy[1], c * rx * gy[2]],
                ))
            }
            InteractionTerm::GroupDifference {
                coefficient,
                norm,
                exponent,
            } => {
                // the fields commute with right translations; ρ is symmetric
                let (_, gx) = power_with_gradient(norm, *exponent, &spin.difference(x, y))?;
                let (_, gy) = power_with_gradient(norm, *exponent, &spin.difference(y, x))?;
                let c = *coefficient;
                Ok((
                    [c * gx[0], c * gx[1], c * gx[2]],
                    [c * gy[0], c * gy[1], c * gy[2]],
                ))
            }
        }
    }
}

/// Pair interaction `V(x, y)` as a sum of monomials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Interaction {
    pub terms: Vec<InteractionTerm>,
}

impl Interaction {
    pub fn new(terms: Vec<InteractionTerm>) -> Self {
        Self { terms }
    }

    pub fn none() -> Self {
        Self::default()
    }

    /// `c · ρ(x)^a · ρ(y)^b` with the same norm in both slots.
    pub fn norm_product(c: f64, norm: HomogeneousNorm, a: f64, b: f64) -> Self {
        Self::new(vec![InteractionTerm::product(c, norm.clone(), a, norm, b)])
    }

    pub fn degree(&self) -> f64 {
        self.terms.iter().map(|t| t.degree()).fold(0.0, f64::max)
    }

    pub fn validate(&self, order: f64) -> Result<()> {
        for t in &self.terms {
            match t {
                InteractionTerm::Product {
                    coefficient,
                    rho,
                    alpha,
                    delta,
                    beta_exp,
                } => {
                    check_exponent(*alpha, "interaction")?;
                    check_exponent(*beta_exp, "interaction")?;
                    rho.kind.validate()?;
                    delta.kind.validate()?;
                    if !coefficient.is_finite() {
                        return Err(Error::InvalidModel(
                            "non-finite interaction coefficient".into(),
                        ));
                    }
                }
                InteractionTerm::GroupDifference {
                    coefficient,
                    norm,
                    exponent,
                } => {
                    check_exponent(*exponent, "interaction")?;
                    norm.kind.validate()?;
                    if !coefficient.is_finite() {
                        return Err(Error::InvalidModel(
                            "non-finite interaction coefficient".into(),
                        ));
                    }
                }
            }
            if t.degree() > order {
                return Err(Error::InvalidModel(format!(
                    "interaction degree {} exceeds the phase order {order}",
                    t.degree()
                )));
            }
        }
        Ok(())
    }

    pub fn eval(&self, spin: SpinSpace, x: &Spin, y: &Spin) -> f64 {
        self.terms.iter().map(|t| t.eval(spin, x, y)).sum()
    }

    /// `½(V(x, y) + V(y, x))`, the weight carried by one bond.
    pub fn symmetric(&self, spin: SpinSpace, x: &Spin, y: &Spin) -> f64 {
        0.5 * (self.eval(spin, x, y) + self.eval(spin, y, x))
    }

    /// Gradients of `V` in each slot.
    pub fn gradients(&self, spin: SpinSpace, x: &Spin, y: &Spin) -> Result<(Spin, Spin)> {
        let mut gx = [0.0; 3];
        let mut gy = [0.0; 3];
        for t in &self.terms {
            let (a, b) = t.gradients(spin, x, y)?;
            for k in 0..3 {
                gx[k] += a[k];
                gy[k] += b[k];
            }
        }
        Ok((gx, gy))
    }

    /// Gradients of the symmetrized bond weight in each slot.
    pub fn symmetric_gradients(&self, spin: SpinSpace, x: &Spin, y: &Spin) -> Result<(Spin, Spin)> {
        let (a1, b1) = self.gradients(spin, x, y)?;
        let (a2, b2) = self.gradients(spin, y, x)?;
        Ok((
            [
                0.5 * (a1[0] + b2[0]),
                0.5 * (a1[1] + b2[1]),
                0.5 * (a1[2] + b2[2]),
            ],
            [
                0.5 * (b1[0] + a2[0]),
                0.5 * (b1[1] + a2[1]),
                0.5 * (b1[2] + a2[2]),
            ],
        ))
    }

    pub fn is_symmetric_form(&self) -> bool {
        self.terms.iter().all(|t| match t {
            InteractionTerm::Product {
                rho,
                alpha,
                delta,
                beta_exp,
                ..
            } => rho == delta && alpha == beta_exp,
            InteractionTerm::GroupDifference { .. } => true,
        })
    }

    /// Replaces every norm's gradient mode.
    pub fn with_gradient_mode(&self, mode: GradientMode) -> Self {
        let terms = self
            .terms
            .iter()
            .map(|t| match t.clone() {
                InteractionTerm::Product {
                    coefficient,
                    rho,
                    alpha,
                    delta,
                    beta_exp,
                } => InteractionTerm::Product {
                    coefficient,
                    rho: rho.with_mode(mode),
                    alpha,
                    delta: delta.with_mode(mode),
                    beta_exp,
                },
                InteractionTerm::GroupDifference {
                    coefficient,
                    norm,
                    exponent,
                } => InteractionTerm::GroupDifference {
                    coefficient,
                    norm: norm.with_mode(mode),
                    exponent,
                },
            })
            .collect();
        Self { terms }
    }
}

/// Sub-gradients of `V` in each slot at two group points.
pub fn interaction_gradients(
    v: &Interaction,
    x: &GroupPoint,
    y: &GroupPoint,
) -> Result<(HorizontalVector, HorizontalVector)> {
    let (a, b) = v.gradients(SpinSpace::Heisenberg, &x.to_array(), &y.to_array())?;
    Ok((
        HorizontalVector::new(a[0], a[1]),
        HorizontalVector::new(b[0], b[1]),
    ))
}

/// Full model: phase, pair interaction, couplings and lattice dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpinModel {
    pub spin: SpinSpace,
    pub dimension: usize,
    pub phase: Phase,
    pub interaction: Interaction,
    pub couplings: CouplingMatrix,
    /// Exponent dual to `q`.
    pub p: f64,
    pub q: f64,
}

impl SpinModel {
    pub fn new(
        spin: SpinSpace,
        dimension: usize,
        phase: Phase,
        interaction: Interaction,
        couplings: CouplingMatrix,
        q: f64,
    ) -> Result<Self> {
        let m = Self {
            spin,
            dimension,
            phase,
            interaction,
            couplings,
            p: dual_exponent(q),
            q,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        self.spin.validate()?;
        if self.dimension == 0 {
            return Err(Error::InvalidModel("lattice dimension must be ≥ 1".into()));
        }
        if !(self.q > 1.0 && self.q <= 2.0) {
            return Err(Error::InvalidModel(format!(
                "q = {} outside (1, 2]",
                self.q
            )));
        }
        if (1.0 / self.p + 1.0 / self.q - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidModel(format!(
                "p = {} is not dual to q = {}",
                self.p, self.q
            )));
        }
        self.phase.validate()?;
        self.interaction.validate(self.phase.order())?;
        self.couplings.validate()?;
        let heis = self.spin == SpinSpace::Heisenberg;
        let norms_ok = self
            .phase
            .terms
            .iter()
            .map(|t| &t.norm)
            .chain(self.interaction.terms.iter().flat_map(|t| match t {
                InteractionTerm::Product { rho, delta, .. } => vec![rho, delta],
                InteractionTerm::GroupDifference { norm, .. } => vec![norm],
            }))
            .all(|n| n.kind.is_heisenberg() == heis);
        if !norms_ok {
            return Err(Error::InvalidModel(
                "norm kinds do not match the spin space".into(),
            ));
        }
        Ok(())
    }

    pub fn with_beta(&self, beta: f64) -> Self {
        Self {
            couplings: self.couplings.with_beta(beta),
            ..self.clone()
        }
    }

    pub fn range(&self) -> usize {
        self.couplings.range
    }

    pub fn beta_ij(&self, i: &[i64], j: &[i64]) -> f64 {
        self.couplings.get(i, j)
    }

    pub fn bond_energy(&self, x: &Spin, y: &Spin) -> f64 {
        self.interaction.symmetric(self.spin, x, y)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: SpinModel =
            serde_json::from_str(s).map_err(|e| Error::InvalidModel(format!("model JSON: {e}")))?;
        m.validate()?;
        Ok(m)
    }
}

pub fn dual_exponent(q: f64) -> f64 {
    q / (q - 1.0)
}

/// All `j ≠ i` with `‖i − j‖₁ ≤ R`.
pub fn neighbors(i: &[i64], model: &SpinModel) -> Vec<Site> {
    neighbors_within(i, model.range())
}

pub fn neighbors_within(i: &[i64], range: usize) -> Vec<Site> {
    l1_ball(i.len(), range)
        .into_iter()
        .filter(|o| o.iter().any(|v| *v != 0))
        .map(|o| i.iter().zip(&o).map(|(a, b)| a + b).collect())
        .collect()
}

/// Exterior configuration: spin values indexed by site.
pub type Boundary = BTreeMap<Site, Spin>;

/// `U_Λ^ω(x_Λ)`: phase on Λ, one symmetrized bond per unordered pair inside Λ,
/// and one bond per pair linking Λ to the exterior configuration `omega`.
pub fn potential_energy(
    model: &SpinModel,
    lambda: &[Site],
    x: &[Spin],
    omega: &Boundary,
) -> Result<f64> {
    if lambda.len() != x.len() {
        return Err(Error::InvalidParameter(format!(
            "{} sites but {} spin values",
            lambda.len(),
            x.len()
        )));
    }
    let inside: BTreeMap<&Site, usize> = lambda.iter().enumerate().map(|(k, s)| (s, k)).collect();
    if inside.len() != lambda.len() {
        return Err(Error::InvalidParameter("repeated site in Λ".into()));
    }
    let mut u: f64 = x.iter().map(|xi| model.phase.eval(xi)).sum();
    for (a, si) in lambda.iter().enumerate() {
        for sj in neighbors(si, model) {
            let b = model.beta_ij(si, &sj);
            if b == 0.0 {
                continue;
            }
            match inside.get(&sj) {
                Some(&k) => {
                    if a < k {
                        u += b * model.bond_energy(&x[a], &x[k]);
                    }
                }
                None => {
                    let w = omega
                        .get(&sj)
                        .ok_or_else(|| Error::MissingBoundary(sj.clone()))?;
                    u += b * model.bond_energy(&x[a], w);
                }
            }
        }
    }
    Ok(u)
}

/// A finite box of sites `[0, extent_k)` with its exterior configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatticeWindow {
    pub extent: Vec<usize>,
    /// Values on the exterior halo; ignored when `periodic`.
    #[serde(default)]
    pub boundary: Vec<(Site, Spin)>,
    /// Wraps the window onto a torus; not a finite subsystem of ℤ^D.
    #[serde(default)]
    pub periodic: bool,
}

/// Bond between two window sites, with its accumulated coupling.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bond {
    pub i: usize,
    pub j: usize,
    pub beta: f64,
}

/// Bond between a window site and a fixed exterior spin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExteriorBond {
    pub i: usize,
    pub value: Spin,
    pub beta: f64,
}

impl LatticeWindow {
    pub fn new(extent: Vec<usize>) -> Self {
        Self {
            extent,
            boundary: Vec::new(),
            periodic: false,
        }
    }

    pub fn chain(len: usize) -> Self {
        Self::new(vec![len])
    }

    pub fn dimension(&self) -> usize {
        self.extent.len()
    }

    pub fn len(&self) -> usize {
        self.extent.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Site multi-index of enumeration index `k` (first axis slowest).
    pub fn site(&self, k: usize) -> Site {
        let mut rem = k;
        let mut s = vec![0; self.extent.len()];
        for a in (0..self.extent.len()).rev() {
            s[a] = (rem % self.extent[a]) as i64;
            rem /= self.extent[a];
        }
        s
    }

    pub fn sites(&self) -> Vec<Site> {
        (0..self.len()).map(|k| self.site(k)).collect()
    }

    pub fn index_of(&self, s: &[i64]) -> Option<usize> {
        if s.len() != self.extent.len() {
            return None;
        }
        let mut k = 0;
        for (a, &v) in s.iter().enumerate() {
            if v < 0 || v as usize >= self.extent[a] {
                return None;
            }
            k = k * self.extent[a] + v as usize;
        }
        Some(k)
    }

    fn wrap(&self, s: &[i64]) -> Site {
        s.iter()
            .zip(&self.extent)
            .map(|(v, e)| v.rem_euclid(*e as i64))
            .collect()
    }

    /// Exterior sites within range `r` of the window.
    pub fn halo(&self, r: usize) -> Vec<Site> {
        if self.periodic {
            return Vec::new();
        }
        let mut out = std::collections::BTreeSet::new();
        for s in self.sites() {
            for n in neighbors_within(&s, r) {
                if self.index_of(&n).is_none() {
                    out.insert(n);
                }
            }
        }
        out.into_iter().collect()
    }

    pub fn boundary_map(&self) -> Boundary {
        self.boundary.iter().cloned().collect()
    }

    /// Sets every halo site to the same spin value.
    pub fn with_uniform_boundary(mut self, r: usize, value: Spin) -> Self {
        self.boundary = self.halo(r).into_iter().map(|s| (s, value)).collect();
        self
    }

    pub fn with_boundary(mut self, boundary: Boundary) -> Self {
        self.boundary = boundary.into_iter().collect();
        self
    }

    pub fn validate(&self, model: &SpinModel) -> Result<()> {
        if self.extent.len() != model.dimension {
            return Err(Error::InvalidModel(format!(
                "window dimension {} differs from model dimension {}",
                self.extent.len(),
                model.dimension
            )));
        }
        if self.extent.contains(&0) {
            return Err(Error::InvalidParameter(
                "window extent must be positive".into(),
            ));
        }
        if self.periodic {
            let m = model.range() + 1;
            if self
                .extent
                .iter()
                .any(|e| e % m != 0 || *e < 2 * model.range() + 1)
            {
                return Err(Error::InvalidParameter(format!(
                    "periodic extents must be multiples of {m} and exceed twice the range"
                )));
            }
            return Ok(());
        }
        let map = self.boundary_map();
        for s in self.halo(model.range()) {
            if !map.contains_key(&s) {
                return Err(Error::MissingBoundary(s));
            }
        }
        Ok(())
    }

    /// Bonds between window sites with nonzero coupling, `i < j`.
    pub fn interior_bonds(&self, model: &SpinModel) -> Vec<Bond> {
        let mut acc: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        for (i, s) in self.sites().iter().enumerate() {
            for n in neighbors(s, model) {
                let b = model.beta_ij(s, &n);
                if b == 0.0 {
                    continue;
                }
                let target = if self.periodic {
                    Some(self.wrap(&n))
                } else {
                    Some(n.clone())
                };
                if let Some(j) = target.and_then(|t| self.index_of(&t)) {
                    if i < j {
                        *acc.entry((i, j)).or_insert(0.0) += b;
                    }
                }
            }
        }
        acc.into_iter()
            .filter(|(_, b)| *b != 0.0)
            .map(|((i, j), beta)| Bond { i, j, beta })
            .collect()
    }

    /// Bonds from window sites to the exterior configuration.
    pub fn exterior_bonds(&self, model: &SpinModel) -> Result<Vec<ExteriorBond>> {
        if self.periodic {
            return Ok(Vec::new());
        }
        let map = self.boundary_map();
        let mut out = Vec::new();
        for (i, s) in self.sites().iter().enumerate() {
            for n in neighbors(s, model) {
                if self.index_of(&n).is_some() {
                    continue;
                }
                let b = model.beta_ij(s, &n);
                if b == 0.0 {
                    continue;
                }
                let value = *map
                    .get(&n)
                    .ok_or_else(|| Error::MissingBoundary(n.clone()))?;
                out.push(ExteriorBond { i, value, beta: b });
            }
        }
        Ok(out)
    }

    /// Full-window energy of a configuration listed in enumeration order.
    pub fn energy(&self, model: &SpinModel, x: &[Spin]) -> Result<f64> {
        if self.periodic {
            let mut u: f64 = x.iter().map(|v| model.phase.eval(v)).sum();
            for b in self.interior_bonds(model) {
                u += b.beta * model.bond_energy(&x[b.i], &x[b.j]);
            }
            return Ok(u);
        }
        potential_energy(model, &self.sites(), x, &self.boundary_map())
    }
}

/// Congruence classes of `((R+1)ℤ)^D`, ordered lexicographically by offset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SublatticePartition {
    pub dimension: usize,
    pub range: usize,
    pub offsets: Vec<Site>,
}

impl SublatticePartition {
    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    pub fn modulus(&self) -> i64 {
        self.range as i64 + 1
    }

    /// Index `n` of the component Γ_n containing `s`.
    pub fn component_of(&self, s: &[i64]) -> usize {
        let m = self.modulus();
        s.iter()
            .fold(0usize, |acc, v| acc * m as usize + v.rem_euclid(m) as usize)
    }

    /// Window site indices of each component.
    pub fn restrict(&self, window: &LatticeWindow) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.len()];
        for (k, s) in window.sites().iter().enumerate() {
            out[self.component_of(s)].push(k);
        }
        out
    }
}

pub fn build_partition(dimension: usize, range: usize) -> Result<SublatticePartition> {
    if dimension == 0 || range == 0 {
        return Err(Error::InvalidParameter(
            "partition needs D ≥ 1 and R ≥ 1".into(),
        ));
    }
    let m = range as i64 + 1;
    let mut offsets: Vec<Site> = vec![vec![]];
    for _ in 0..dimension {
        offsets = offsets
            .into_iter()
            .flat_map(|p| {
                (0..m).map(move |v| {
                    let mut q = p.clone();
                    q.push(v);
                    q
                })
            })
            .collect();
    }
    Ok(SublatticePartition {
        dimension,
        range,
        offsets,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn kaplan_model(beta: f64) -> SpinModel {
        let n = HomogeneousNorm::kaplan();
        SpinModel::new(
            SpinSpace::Heisenberg,
            1,
            Phase::monomial(1.0, 2.0, n.clone()),
            Interaction::norm_product(1.0, n, 1.0, 1.0),
            CouplingMatrix::nearest_neighbor(beta),
            2.0,
        )
        .unwrap()
    }

    #[test]
    fn neighbor_examples() {
        let m2 = SpinModel {
            dimension: 2,
            ..kaplan_model(0.1)
        };
        let mut n = neighbors(&[0, 0], &m2);
        n.sort();
        assert_eq!(n, vec![vec![-1, 0], vec![0, -1], vec![0, 1], vec![1, 0]]);
        let m = SpinModel {
            couplings: CouplingMatrix::uniform(2, 0.1),
            ..kaplan_model(0.1)
        };
        let mut n = neighbors(&[0], &m);
        n.sort();
        assert_eq!(n, vec![vec![-2], vec![-1], vec![1], vec![2]]);
        assert_eq!(neighbors_within(&[0, 0, 0], 1).len(), 6);
    }

    #[test]
    fn potential_example() {
        // φ = N², V = N(x)N(y), β = 0.1, x0 = (1,0,0), ω±1 = (0,0,1)
        let m = kaplan_model(0.1);
        let omega: Boundary = [(vec![-1], [0.0, 0.0, 1.0]), (vec![1], [0.0, 0.0, 1.0])]
            .into_iter()
            .collect();
        let u = potential_energy(&m, &[vec![0]], &[[1.0, 0.0, 0.0]], &omega).unwrap();
        // N(0,0,1) = 1 with the unit center weight
        assert_abs_diff_eq!(u, 1.0 + 0.1 * 1.0 + 0.1 * 1.0, epsilon = 1e-12);
    }

    #[test]
    fn potential_example_with_weight_sixteen_gauge() {
        let n = HomogeneousNorm::new(crate::heisenberg::NormKind::Gauge {
            center_weight: 16.0,
        });
        let m = SpinModel::new(
            SpinSpace::Heisenberg,
            1,
            Phase::monomial(1.0, 2.0, n.clone()),
            Interaction::norm_product(1.0, n, 1.0, 1.0),
            CouplingMatrix::nearest_neighbor(0.1),
            2.0,
        )
        .unwrap();
        let omega: Boundary = [(vec![-1], [0.0, 0.0, 1.0]), (vec![1], [0.0, 0.0, 1.0])]
            .into_iter()
            .collect();
        let u = potential_energy(&m, &[vec![0]], &[[1.0, 0.0, 0.0]], &omega).unwrap();
        assert_abs_diff_eq!(u, 1.4, epsilon = 1e-12);
    }

    #[test]
    fn missing_boundary_names_site() {
        let m = kaplan_model(0.1);
        let omega: Boundary = [(vec![-1], [0.0; 3])].into_iter().collect();
        let e = potential_energy(&m, &[vec![0]], &[[1.0, 0.0, 0.0]], &omega).unwrap_err();
        assert_eq!(e, Error::MissingBoundary(vec![1]));
    }

    #[test]
    fn zero_couplings_leave_phase_only() {
        let m = kaplan_model(0.0);
        let x = [[1.0, 2.0, 0.5], [0.3, 0.0, -1.0]];
        let u = potential_energy(&m, &[vec![0], vec![1]], &x, &Boundary::new()).unwrap();
        assert_abs_diff_eq!(
            u,
            m.phase.eval(&x[0]) + m.phase.eval(&x[1]),
            epsilon = 1e-12
        );
    }

    #[test]
    fn partition_examples() {
        let p = build_partition(1, 1).unwrap();
        let w = LatticeWindow::chain(6);
        assert_eq!(p.restrict(&w), vec![vec![0, 2, 4], vec![1, 3, 5]]);
        assert_eq!(build_partition(2, 1).unwrap().len(), 4);
        let p3 = build_partition(1, 2).unwrap();
        assert_eq!(
            p3.restrict(&LatticeWindow::chain(7)),
            vec![vec![0, 3, 6], vec![1, 4], vec![2, 5]]
        );
        assert!(build_partition(0, 1).is_err());
    }

    #[test]
    fn interaction_gradient_example() {
        let n = HomogeneousNorm::kaplan();
        let v = Interaction::norm_product(1.0, n, 1.0, 1.0);
        let (gx, gy) = interaction_gradients(
            &v,
            &GroupPoint::new(1.0, 0.0, 0.0),
            &GroupPoint::new(0.0, 0.0, 1.0),
        )
        .unwrap();
        // N(y) = 1, ∇N(x) = (1, 0)
        assert_abs_diff_eq!(gx.v1, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(gx.v2, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(gy.v1, 0.0, epsilon = 1e-12);
        // ∇N at (0,0,1) is (0, 0) for the unit-weight gauge
        assert_abs_diff_eq!(gy.v2, 0.0, epsilon = 1e-12);

        let c = Interaction::new(vec![InteractionTerm::product(
            3.0,
            HomogeneousNorm::kaplan(),
            0.0,
            HomogeneousNorm::kaplan(),
            0.0,
        )]);
        let (a, b) = interaction_gradients(
            &c,
            &GroupPoint::new(1.0, 2.0, 3.0),
            &GroupPoint::new(0.0, 1.0, 0.0),
        )
        .unwrap();
        assert_eq!((a.v1, a.v2, b.v1, b.v2), (0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn exponent_rules() {
        let n = HomogeneousNorm::kaplan();
        let bad = Interaction::norm_product(1.0, n.clone(), 0.5, 1.0);
        assert!(bad.validate(4.0).is_err());
        let too_high = Interaction::norm_product(1.0, n, 3.0, 3.0);
        assert!(too_high.validate(4.0).is_err());
    }

    #[test]
    fn model_json_round_trip() {
        let m = kaplan_model(0.05);
        let s = m.to_json().unwrap();
        assert_eq!(SpinModel::from_json(&s).unwrap(), m);
        assert!(SpinModel::from_json("{").is_err());
    }

    #[test]
    fn window_bonds() {
        let m = kaplan_model(0.2);
        let w = LatticeWindow::chain(3).with_uniform_boundary(1, [0.0, 0.0, 1.0]);
        w.validate(&m).unwrap();
        let b = w.interior_bonds(&m);
        assert_eq!(b.len(), 2);
        let e = w.exterior_bonds(&m).unwrap();
        assert_eq!(e.iter().map(|b| b.i).collect::<Vec<_>>(), vec![0, 2]);
        let p = LatticeWindow {
            periodic: true,
            ..LatticeWindow::chain(4)
        };
        p.validate(&m).unwrap();
        assert_eq!(p.interior_bonds(&m).len(), 4);
    }

    #[test]
    fn group_difference_gradient_bounded_by_one() {
        let v = Interaction::new(vec![InteractionTerm::GroupDifference {
            coefficient: 1.0,
            norm: HomogeneousNorm::cc(),
            exponent: 1.0,
        }]);
        let x = [0.7, -0.3, 0.4];
        let y = [-0.2, 0.5, 1.1];
        let (gx, gy) = v.gradients(SpinSpace::Heisenberg, &x, &y).unwrap();
        assert!(gx[0].hypot(gx[1]) <= 1.0 + 1e-9);
        assert!(gy[0].hypot(gy[1]) <= 1.0 + 1e-9);
        let fd = v.with_gradient_mode(GradientMode::FiniteDifference { step: 1e-6 });
        let (fx, fy) = fd.gradients(SpinSpace::Heisenberg, &x, &y).unwrap();
        // the finite-difference path differentiates the composite directly
        let direct = |p: &GroupPoint| v.eval(SpinSpace::Heisenberg, &p.to_array(), &y);
        let g = crate::heisenberg::apply_subgradient(
            &direct,
            &GroupPoint::from_array(x),
            GradientMode::FiniteDifference { step: 1e-6 },
        )
        .unwrap();
        assert_abs_diff_eq!(gx[0], g.v1, epsilon = 1e-5);
        assert_abs_diff_eq!(gx[1], g.v2, epsilon = 1e-5);
        assert_abs_diff_eq!(fx[0], gx[0], epsilon = 1e-5);
        assert_abs_diff_eq!(fy[1], gy[1], epsilon = 1e-5);
    }
}
