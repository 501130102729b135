use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::heisenberg::HomogeneousNorm;
use crate::lattice::{Phase, Spin, SpinSpace};
use crate::quadrature::QuadratureGrid;

/// Sizes of each test-function class and the seed that draws them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilySpec {
    pub bumps: usize,
    pub norm_powers: usize,
    pub coordinates: usize,
    /// Tilted shells `exp(φ/q)·b(ρ − r)`; only meaningful for the U-bound check.
    #[serde(default)]
    pub shells: usize,
    pub seed: u64,
}

impl Default for FamilySpec {
    fn default() -> Self {
        Self {
            bumps: 50,
            norm_powers: 50,
            coordinates: 50,
            shells: 0,
            seed: 0x5eed,
        }
    }
}

impl FamilySpec {
    pub fn with_shells(mut self, shells: usize) -> Self {
        self.shells = shells;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "class", rename_all = "snake_case")]
pub enum TestFunction {
    Constant,
    /// `exp(−½ Σ ((x_a − c_a)/σ_a)²)`.
    Bump {
        center: Spin,
        widths: Spin,
    },
    /// `min(ρ^s, cap)`.
    NormPower {
        norm: HomogeneousNorm,
        exponent: f64,
        cap: f64,
    },
    /// `Σ l_a x_a + Σ k_a x_a²`.
    Polynomial {
        linear: Spin,
        quadratic: Spin,
    },
    /// `exp(φ/q) · (1 − ((ρ − r)/w)²)²` on `|ρ − r| < w`.
    TiltedShell {
        norm: HomogeneousNorm,
        radius: f64,
        width: f64,
    },
}

/// `g = e^s v` and `∇g = e^s grad`, kept apart so tilted functions never overflow.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogValue {
    pub log_scale: f64,
    pub value: f64,
    pub gradient: Spin,
}

fn shell(t: f64, w: f64) -> (f64, f64) {
    let u = t / w;
    if u.abs() >= 1.0 {
        return (0.0, 0.0);
    }
    let s = 1.0 - u * u;
    (s * s, -4.0 * u * s / w)
}

impl TestFunction {
    pub fn class(&self) -> &'static str {
        match self {
            TestFunction::Constant => "constant",
            TestFunction::Bump { .. } => "bump",
            TestFunction::NormPower { .. } => "norm_power",
            TestFunction::Polynomial { .. } => "coordinate",
            TestFunction::TiltedShell { .. } => "tilted_shell",
        }
    }

    fn log_scale(&self, phase: &Phase, q: f64, x: &Spin) -> f64 {
        match self {
            TestFunction::TiltedShell { .. } => phase.eval(x) / q,
            _ => 0.0,
        }
    }

    fn mantissa(&self, x: &Spin) -> f64 {
        match self {
            TestFunction::Constant => 1.0,
            TestFunction::Bump { center, widths } => {
                let e: f64 = (0..3)
                    .filter(|&a| widths[a] > 0.0)
                    .map(|a| ((x[a] - center[a]) / widths[a]).powi(2))
                    .sum();
                (-0.5 * e).exp()
            }
            TestFunction::NormPower {
                norm,
                exponent,
                cap,
            } => norm.eval(x).powf(*exponent).min(*cap),
            TestFunction::Polynomial { linear, quadratic } => (0..3)
                .map(|a| linear[a] * x[a] + quadratic[a] * x[a] * x[a])
                .sum(),
            TestFunction::TiltedShell {
                norm,
                radius,
                width,
            } => shell(norm.eval(x) - radius, *width).0,
        }
    }

    /// Coordinate partials of the mantissa, when they have a closed form.
    fn partials(&self, x: &Spin) -> Option<[f64; 3]> {
        match self {
            TestFunction::Constant => Some([0.0; 3]),
            TestFunction::Bump { center, widths } => {
                let e: f64 = (0..3)
                    .filter(|&a| widths[a] > 0.0)
                    .map(|a| ((x[a] - center[a]) / widths[a]).powi(2))
                    .sum();
                let v = (-0.5 * e).exp();
                let mut d = [0.0; 3];
                for a in 0..3 {
                    if widths[a] > 0.0 {
                        d[a] = -v * (x[a] - center[a]) / (widths[a] * widths[a]);
                    }
                }
                Some(d)
            }
            TestFunction::Polynomial { linear, quadratic } => {
                Some([0, 1, 2].map(|a| linear[a] + 2.0 * quadratic[a] * x[a]))
            }
            _ => None,
        }
    }

    pub fn eval(&self, spin: SpinSpace, phase: &Phase, q: f64, x: &Spin) -> Result<LogValue> {
        let log_scale = self.log_scale(phase, q, x);
        let value = self.mantissa(x);
        let analytic = match self {
            TestFunction::NormPower {
                norm,
                exponent,
                cap,
            } => {
                let r = norm.eval(x);
                if r.powf(*exponent) >= *cap {
                    Some([0.0; 3])
                } else if r == 0.0 {
                    None
                } else {
                    norm.gradient(x).ok().map(|g| {
                        let s = exponent * r.powf(exponent - 1.0);
                        [s * g[0], s * g[1], s * g[2]]
                    })
                }
            }
            TestFunction::TiltedShell {
                norm,
                radius,
                width,
            } => {
                let r = norm.eval(x);
                let (b, db) = shell(r - radius, *width);
                if b == 0.0 && db == 0.0 {
                    Some([0.0; 3])
                } else {
                    match (norm.gradient(x), phase.gradient(x)) {
                        (Ok(gr), Ok(gp)) => Some([0, 1, 2].map(|a| b * gp[a] / q + db * gr[a])),
                        _ => None,
                    }
                }
            }
            _ => self.partials(x).map(|d| spin.gradient_from_partials(x, &d)),
        };
        let gradient = match analytic {
            Some(g) => g,
            None => self.fd_gradient(spin, phase, q, x, log_scale),
        };
        Ok(LogValue {
            log_scale,
            value,
            gradient,
        })
    }

    /// Central differences of `e^{s(y) − s(x)} v(y)`, combined into the gradient.
    fn fd_gradient(&self, spin: SpinSpace, phase: &Phase, q: f64, x: &Spin, s0: f64) -> Spin {
        let mut d = [0.0; 3];
        for (a, slot) in d.iter_mut().enumerate().take(spin.dim()) {
            let h = 1e-5 * (1.0 + x[a].abs());
            let mut up = *x;
            let mut dn = *x;
            up[a] += h;
            dn[a] -= h;
            let f = |y: &Spin| (self.log_scale(phase, q, y) - s0).exp() * self.mantissa(y);
            *slot = (f(&up) - f(&dn)) / (2.0 * h);
        }
        spin.gradient_from_partials(x, &d)
    }
}

/// Largest `r` with the `ρ`-ball of radius `r` inside the box.
pub fn inscribed_radius(spin: SpinSpace, norm: &HomogeneousNorm, half_widths: &[f64]) -> f64 {
    match spin {
        SpinSpace::Heisenberg => {
            let h = half_widths[0].min(half_widths[1]);
            norm.eval(&[h, 0.0, 0.0])
                .min(norm.eval(&[0.0, h, 0.0]))
                .min(norm.eval(&[0.0, 0.0, half_widths[2]]))
        }
        SpinSpace::Euclidean { .. } => half_widths.iter().copied().fold(f64::INFINITY, f64::min),
    }
}

/// Draws the family for a grid; the constant function comes first.
pub fn build_family(spec: &FamilySpec, grid: &QuadratureGrid, phase: &Phase) -> Vec<TestFunction> {
    let spin = grid.spin;
    let dim = spin.dim();
    let hw = &grid.half_widths;
    let norm = phase
        .leading()
        .map(|t| t.norm.clone())
        .unwrap_or_else(|| HomogeneousNorm::euclidean(dim));
    let r_box = inscribed_radius(spin, &norm, hw);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = vec![TestFunction::Constant];
    for _ in 0..spec.bumps {
        let mut center = [0.0; 3];
        let mut widths = [0.0; 3];
        for a in 0..dim {
            center[a] = hw[a] * rng.random_range(-0.6..0.6);
            widths[a] = hw[a] * rng.random_range(0.08..0.4);
        }
        out.push(TestFunction::Bump { center, widths });
    }
    for _ in 0..spec.norm_powers {
        let exponent: f64 = rng.random_range(0.5..3.0);
        let cap = (rng.random_range(0.3..1.0) * r_box).powf(exponent);
        out.push(TestFunction::NormPower {
            norm: norm.clone(),
            exponent,
            cap,
        });
    }
    for k in 0..spec.coordinates {
        let mut linear = [0.0; 3];
        let mut quadratic = [0.0; 3];
        for a in 0..dim {
            let l: f64 = rng.sample(StandardNormal);
            linear[a] = l / hw[a];
            if k % 2 == 1 {
                let c: f64 = rng.sample(StandardNormal);
                quadratic[a] = c / (hw[a] * hw[a]);
            }
        }
        out.push(TestFunction::Polynomial { linear, quadratic });
    }
    if spec.shells > 0 {
        let n = grid.nodes_per_axis.max(2) as f64;
        let width = 4.0 * 2.0 * hw[0] / (n - 1.0);
        let lo = 2.0 * width;
        let hi = r_box - width;
        for k in 0..spec.shells {
            if hi <= lo {
                break;
            }
            let t = if spec.shells == 1 {
                1.0
            } else {
                k as f64 / (spec.shells - 1) as f64
            };
            out.push(TestFunction::TiltedShell {
                norm: norm.clone(),
                radius: lo + t * (hi - lo),
                width,
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heisenberg::{GradientMode, HomogeneousNorm};
    use crate::quadrature::GridSpec;

    fn fd_check(f: &TestFunction, spin: SpinSpace, phase: &Phase, x: &Spin) {
        let lv = f.eval(spin, phase, 2.0, x).unwrap();
        let fd = f.fd_gradient(spin, phase, 2.0, x, lv.log_scale);
        for a in 0..3 {
            assert!(
                (lv.gradient[a] - fd[a]).abs() < 1e-5 * (1.0 + fd[a].abs()),
                "{} at {x:?}: {:?} vs {fd:?}",
                f.class(),
                lv.gradient
            );
        }
    }

    #[test]
    fn analytic_gradients_match_differences() {
        let phase = Phase::monomial(1.0, 4.0, HomogeneousNorm::kaplan());
        let grid = QuadratureGrid::new(SpinSpace::Heisenberg, &GridSpec::new(9), &phase).unwrap();
        let fam = build_family(&FamilySpec::default().with_shells(4), &grid, &phase);
        assert_eq!(fam[0], TestFunction::Constant);
        for f in &fam {
            for x in [[0.3, -0.2, 0.4], [1.1, 0.5, -0.7], [-0.4, 0.9, 1.3]] {
                fd_check(f, SpinSpace::Heisenberg, &phase, &x);
            }
        }
    }

    #[test]
    fn cc_norm_power_falls_back_on_center() {
        let phase = Phase::monomial(1.0, 2.0, HomogeneousNorm::cc());
        let f = TestFunction::NormPower {
            norm: HomogeneousNorm::cc().with_mode(GradientMode::Analytic),
            exponent: 2.0,
            cap: 100.0,
        };
        let lv = f
            .eval(SpinSpace::Heisenberg, &phase, 2.0, &[0.0, 0.0, 1.0])
            .unwrap();
        assert!(lv.gradient.iter().all(|g| g.is_finite()));
    }
}
