//! Tensor-product quadrature on a truncation box of the spin space.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{Phase, Spin, SpinSpace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    #[default]
    Trapezoid,
    GaussLegendre,
}

/// Box and resolution of a quadrature grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub nodes_per_axis: usize,
    #[serde(default)]
    pub rule: Rule,
    /// Half-widths per axis; derived from the phase when absent.
    #[serde(default)]
    pub half_widths: Option<Vec<f64>>,
    /// Target tail mass of `exp(−φ)` outside the box.
    #[serde(default = "default_tail")]
    pub tail_tolerance: f64,
}

fn default_tail() -> f64 {
    1e-8
}

impl GridSpec {
    pub fn new(nodes_per_axis: usize) -> Self {
        Self {
            nodes_per_axis,
            rule: Rule::Trapezoid,
            half_widths: None,
            tail_tolerance: default_tail(),
        }
    }

    pub fn with_rule(mut self, rule: Rule) -> Self {
        self.rule = rule;
        self
    }

    pub fn with_half_widths(mut self, hw: Vec<f64>) -> Self {
        self.half_widths = Some(hw);
        self
    }

    /// Same spec with every half-width multiplied by `factor`, keeping the node spacing.
    pub fn scaled_box(&self, spin: SpinSpace, phase: &Phase, factor: f64) -> Result<GridSpec> {
        let hw = match &self.half_widths {
            Some(h) => h.clone(),
            None => auto_half_widths(spin, phase, self.tail_tolerance)?,
        };
        let n = ((self.nodes_per_axis as f64 - 1.0) * factor).round() as usize + 1;
        let n = if n.is_multiple_of(2) { n + 1 } else { n };
        Ok(GridSpec {
            nodes_per_axis: n,
            half_widths: Some(hw.iter().map(|h| h * factor).collect()),
            ..self.clone()
        })
    }
}

/// Nodes and positive weights of a product rule.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureGrid {
    pub spin: SpinSpace,
    pub rule: Rule,
    pub nodes_per_axis: usize,
    pub half_widths: Vec<f64>,
    /// Per-axis abscissae.
    pub axes: Vec<Vec<f64>>,
    /// Flattened nodes, last axis fastest.
    pub nodes: Vec<Spin>,
    pub weights: Vec<f64>,
}

impl QuadratureGrid {
    pub fn new(spin: SpinSpace, spec: &GridSpec, phase: &Phase) -> Result<Self> {
        let dim = spin.dim();
        let hw = match &spec.half_widths {
            Some(h) => h.clone(),
            None => auto_half_widths(spin, phase, spec.tail_tolerance)?,
        };
        Self::with_box(spin, spec.rule, spec.nodes_per_axis, hw, dim)
    }

    pub fn with_box(
        spin: SpinSpace,
        rule: Rule,
        n: usize,
        half_widths: Vec<f64>,
        dim: usize,
    ) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidParameter(format!(
                "need at least 2 nodes per axis, got {n}"
            )));
        }
        if half_widths.len() != dim || half_widths.iter().any(|h| !(*h > 0.0) || !h.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "half-widths {half_widths:?} do not fit a {dim}-axis box"
            )));
        }
        let (unit_x, unit_w) = match rule {
            Rule::Trapezoid => trapezoid(n),
            Rule::GaussLegendre => gauss_legendre(n),
        };
        let axes: Vec<Vec<f64>> = half_widths
            .iter()
            .map(|h| unit_x.iter().map(|x| h * x).collect())
            .collect();
        let axis_w: Vec<Vec<f64>> = half_widths
            .iter()
            .map(|h| unit_w.iter().map(|w| h * w).collect())
            .collect();
        let total = n.pow(dim as u32);
        let mut nodes = Vec::with_capacity(total);
        let mut weights = Vec::with_capacity(total);
        for k in 0..total {
            let idx = unflatten(k, n, dim);
            let mut x = [0.0; 3];
            let mut w = 1.0;
            for a in 0..dim {
                x[a] = axes[a][idx[a]];
                w *= axis_w[a][idx[a]];
            }
            nodes.push(x);
            weights.push(w);
        }
        Ok(Self {
            spin,
            rule,
            nodes_per_axis: n,
            half_widths,
            axes,
            nodes,
            weights,
        })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn volume(&self) -> f64 {
        self.half_widths.iter().map(|h| 2.0 * h).product()
    }

    /// Per-axis index of a flat node index.
    pub fn axis_index(&self, k: usize) -> [usize; 3] {
        let v = unflatten(k, self.nodes_per_axis, self.dim());
        let mut out = [0; 3];
        out[..v.len()].copy_from_slice(&v);
        out
    }

    /// Flat index moved by `delta` along `axis`, or `None` past the edge.
    pub fn step(&self, k: usize, axis: usize, delta: isize) -> Option<usize> {
        let n = self.nodes_per_axis;
        let stride = n.pow((self.dim() - 1 - axis) as u32);
        let i = (k / stride) % n;
        let j = i as isize + delta;
        if j < 0 || j >= n as isize {
            None
        } else {
            Some((k as isize + delta * stride as isize) as usize)
        }
    }

    /// Whether node `k` lies on the outer face of the box.
    pub fn on_boundary(&self, k: usize) -> bool {
        let idx = self.axis_index(k);
        idx[..self.dim()]
            .iter()
            .any(|&i| i == 0 || i + 1 == self.nodes_per_axis)
    }

    pub fn integrate(&self, f: impl Fn(&Spin) -> f64 + Sync + Send) -> f64 {
        crate::par::sum(self.len(), |k| self.weights[k] * f(&self.nodes[k]))
    }

    /// Fraction of `Σ w·density` carried by nodes on the outer face.
    pub fn boundary_mass_fraction(&self, density: &[f64]) -> f64 {
        let total = crate::par::sum(self.len(), |k| density[k]);
        let edge = crate::par::sum(self.len(), |k| {
            if self.on_boundary(k) {
                density[k]
            } else {
                0.0
            }
        });
        if total > 0.0 {
            edge / total
        } else {
            1.0
        }
    }

    /// `EnlargeBox` when the outer face carries too much mass.
    pub fn check_truncation(&self, weighted_density: &[f64], tolerance: f64) -> Result<f64> {
        let fraction = self.boundary_mass_fraction(weighted_density);
        if fraction > tolerance || !fraction.is_finite() {
            return Err(Error::EnlargeBox {
                fraction,
                tolerance,
                half_widths: self.half_widths.clone(),
            });
        }
        Ok(fraction)
    }
}

fn unflatten(mut k: usize, n: usize, dim: usize) -> Vec<usize> {
    let mut idx = vec![0; dim];
    for a in (0..dim).rev() {
        idx[a] = k % n;
        k /= n;
    }
    idx
}

fn trapezoid(n: usize) -> (Vec<f64>, Vec<f64>) {
    let h = 2.0 / (n - 1) as f64;
    let x = (0..n).map(|i| -1.0 + h * i as f64).collect();
    let w = (0..n)
        .map(|i| if i == 0 || i == n - 1 { 0.5 * h } else { h })
        .collect();
    (x, w)
}

/// Gauss–Legendre rule on `[-1, 1]` by Newton iteration on `P_n`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 1.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let pn = if n == 1 { z } else { p1 };
            let pm = if n == 1 { 1.0 } else { p0 };
            dp = n as f64 * (z * pn - pm) / (z * z - 1.0);
            let dz = pn / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        let wi = 2.0 / ((1.0 - z * z) * dp * dp);
        w[i] = wi;
        w[n - 1 - i] = wi;
    }
    (x, w)
}

/// Leading-term radius where `φ` has risen `ln(1/tol) + 5` above its minimum.
pub fn truncation_radius(spin: SpinSpace, phase: &Phase, tolerance: f64) -> Result<f64> {
    let lead = phase
        .leading()
        .ok_or_else(|| Error::InvalidModel("phase has no terms".into()))?;
    let floor = phase
        .radial_minimum(spin)
        .ok_or_else(|| Error::InvalidModel("phase is not bounded below".into()))?;
    let rise = (1.0 / tolerance).ln() + 5.0;
    let dirs = crate::lattice::sample_directions(spin, 64);
    let unit: Vec<Spin> = dirs
        .iter()
        .map(|u| {
            let r = lead.norm.eval(u);
            crate::lattice::dilate_spin(spin, 1.0 / r, u)
        })
        .collect();
    // smallest r beyond which φ on the leading-norm sphere stays above floor + rise
    let low = |r: f64| {
        unit.iter()
            .map(|u| phase.eval(&crate::lattice::dilate_spin(spin, r, u)))
            .fold(f64::INFINITY, f64::min)
            - floor
    };
    let mut r = (rise / lead.coefficient).powf(1.0 / lead.exponent);
    let mut guard = 0;
    while low(r) < rise || low(1.5 * r) < rise {
        r *= 1.2;
        guard += 1;
        if guard > 200 {
            return Err(Error::InvalidModel(
                "could not find a truncation radius for the phase".into(),
            ));
        }
    }
    Ok(r)
}

/// Box half-widths containing the leading-norm ball of [`truncation_radius`].
pub fn auto_half_widths(spin: SpinSpace, phase: &Phase, tolerance: f64) -> Result<Vec<f64>> {
    let r = truncation_radius(spin, phase, tolerance)?;
    let lead = &phase.leading().expect("validated above").norm;
    Ok(match spin {
        SpinSpace::Heisenberg => {
            let h = r / lead.eval(&[1.0, 0.0, 0.0]);
            let c = lead.eval(&[0.0, 0.0, 1.0]);
            vec![h, h, r * r / (c * c)]
        }
        SpinSpace::Euclidean { n } => vec![r; n],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heisenberg::HomogeneousNorm;
    use approx::assert_abs_diff_eq;

    #[test]
    fn gauss_legendre_is_exact_for_polynomials() {
        for n in [2, 5, 10, 21] {
            let (x, w) = gauss_legendre(n);
            assert_abs_diff_eq!(w.iter().sum::<f64>(), 2.0, epsilon = 1e-13);
            for deg in 0..(2 * n) {
                let q: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(deg as i32)).sum();
                let exact = if deg % 2 == 1 {
                    0.0
                } else {
                    2.0 / (deg as f64 + 1.0)
                };
                assert_abs_diff_eq!(q, exact, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn weights_sum_to_volume() {
        let g = QuadratureGrid::with_box(
            SpinSpace::Heisenberg,
            Rule::Trapezoid,
            5,
            vec![1.0, 2.0, 3.0],
            3,
        )
        .unwrap();
        assert_abs_diff_eq!(g.weights.iter().sum::<f64>(), g.volume(), epsilon = 1e-12);
        assert!(g.weights.iter().all(|w| *w > 0.0));
    }

    #[test]
    fn gaussian_partition_function() {
        let phase = Phase::monomial(0.5, 2.0, HomogeneousNorm::euclidean(1));
        let spin = SpinSpace::Euclidean { n: 1 };
        let z1 = QuadratureGrid::new(spin, &GridSpec::new(201), &phase)
            .unwrap()
            .integrate(|x| (-phase.eval(x)).exp());
        let z2 = QuadratureGrid::new(spin, &GridSpec::new(401), &phase)
            .unwrap()
            .integrate(|x| (-phase.eval(x)).exp());
        let exact = (2.0 * std::f64::consts::PI).sqrt();
        assert_abs_diff_eq!(z1, exact, epsilon = 1e-7);
        assert!((z2 - z1).abs() < 1e-6);
    }

    #[test]
    fn refinement_reduces_error() {
        // smooth integrand on a fixed box
        let spin = SpinSpace::Euclidean { n: 1 };
        let err = |n: usize| {
            let g = QuadratureGrid::with_box(spin, Rule::Trapezoid, n, vec![1.0], 1).unwrap();
            (g.integrate(|x| x[0].cos()) - 2.0 * 1f64.sin()).abs()
        };
        assert!(err(41) < 0.5 * err(21));
    }

    #[test]
    fn step_and_boundary() {
        let g =
            QuadratureGrid::with_box(SpinSpace::Heisenberg, Rule::Trapezoid, 3, vec![1.0; 3], 3)
                .unwrap();
        let centre = 13;
        assert!(!g.on_boundary(centre));
        assert_eq!(g.step(centre, 2, 1), Some(14));
        assert_eq!(g.step(centre, 0, -1), Some(4));
        assert_eq!(g.step(0, 0, -1), None);
    }

    #[test]
    fn kaplan_box_contains_the_ball() {
        let phase = Phase::monomial(1.0, 4.0, HomogeneousNorm::kaplan());
        let hw = auto_half_widths(SpinSpace::Heisenberg, &phase, 1e-8).unwrap();
        let r = (23.42f64).powf(0.25);
        assert!(hw[0] >= r - 1e-9);
        assert!(hw[2] >= r * r - 1e-9);
    }
}
