//! Randomized invariant checks for the group law and the homogeneous norms.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::heisenberg::{
    apply_subgradient, cc_distance, compose, dilate, inverse, kaplan_norm, GradientMode,
    GroupPoint, HomogeneousNorm, DEFAULT_FD_STEP,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvariantCheck {
    pub name: String,
    pub points: usize,
    pub max_error: f64,
    pub tolerance: f64,
    pub pass: bool,
    pub seconds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelfTestSpec {
    /// Points for the algebraic checks.
    pub algebra_points: usize,
    /// Points for the gradient and CC checks.
    pub gradient_points: usize,
    pub seed: u64,
}

impl Default for SelfTestSpec {
    fn default() -> Self {
        Self {
            algebra_points: 10_000,
            gradient_points: 500,
            seed: 7,
        }
    }
}

fn random_point(rng: &mut ChaCha8Rng, scale: f64) -> GroupPoint {
    GroupPoint::new(
        rng.random_range(-scale..scale),
        rng.random_range(-scale..scale),
        rng.random_range(-scale * scale..scale * scale),
    )
}

/// Points with `|w| ≥ 0.1`, away from the center where the CC distance is not smooth.
fn off_center_point(rng: &mut ChaCha8Rng) -> GroupPoint {
    loop {
        let a = random_point(rng, 2.0);
        if a.horizontal_len() >= 0.1 {
            return a;
        }
    }
}

fn point_error(a: &GroupPoint, b: &GroupPoint) -> f64 {
    let (a, b) = (a.to_array(), b.to_array());
    (0..3)
        .map(|k| (a[k] - b[k]).abs() / (1.0 + a[k].abs().max(b[k].abs())))
        .fold(0.0, f64::max)
}

struct Check {
    name: &'static str,
    tolerance: f64,
    points: usize,
    max_error: f64,
    start: Instant,
}

impl Check {
    fn new(name: &'static str, tolerance: f64) -> Self {
        Self {
            name,
            tolerance,
            points: 0,
            max_error: 0.0,
            start: Instant::now(),
        }
    }

    fn record(&mut self, e: f64) {
        self.points += 1;
        // NaN must fail the check.
        self.max_error = if e.is_nan() {
            f64::INFINITY
        } else {
            self.max_error.max(e)
        };
    }

    fn finish(self) -> InvariantCheck {
        InvariantCheck {
            name: self.name.into(),
            points: self.points,
            max_error: self.max_error,
            tolerance: self.tolerance,
            pass: self.max_error <= self.tolerance,
            seconds: self.start.elapsed().as_secs_f64(),
        }
    }
}

/// Associativity, inverses, dilation automorphism and Kaplan homogeneity/symmetry.
pub fn algebra_checks(spec: &SelfTestSpec) -> Result<Vec<InvariantCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut assoc = Check::new("associativity", 1e-12);
    let mut inv = Check::new("inverse", 1e-12);
    let mut dil = Check::new("dilation_automorphism", 1e-12);
    let mut hom = Check::new("kaplan_homogeneity", 1e-9);
    let mut sym = Check::new("kaplan_symmetry", 1e-9);
    for _ in 0..spec.algebra_points {
        let a = random_point(&mut rng, 3.0);
        let b = random_point(&mut rng, 3.0);
        let c = random_point(&mut rng, 3.0);
        let lambda = rng.random_range(0.05..5.0);
        assoc.record(point_error(
            &compose(&compose(&a, &b), &c),
            &compose(&a, &compose(&b, &c)),
        ));
        let e = GroupPoint::IDENTITY;
        inv.record(
            point_error(&compose(&a, &inverse(&a)), &e)
                .max(point_error(&compose(&inverse(&a), &a), &e)),
        );
        dil.record(point_error(
            &dilate(lambda, &compose(&a, &b))?,
            &compose(&dilate(lambda, &a)?, &dilate(lambda, &b)?),
        ));
        let n = kaplan_norm(&a);
        hom.record((kaplan_norm(&dilate(lambda, &a)?) - lambda * n).abs() / (lambda * n).max(1.0));
        sym.record((kaplan_norm(&inverse(&a)) - n).abs() / n.max(1.0));
    }
    Ok(vec![
        assoc.finish(),
        inv.finish(),
        dil.finish(),
        hom.finish(),
        sym.finish(),
    ])
}

fn fd_subgradient_len(norm: &HomogeneousNorm, a: &GroupPoint) -> Result<f64> {
    let mode = GradientMode::FiniteDifference {
        step: DEFAULT_FD_STEP,
    };
    Ok(apply_subgradient(&|p: &GroupPoint| norm.eval_point(p), a, mode)?.euclidean_length())
}

/// `|∇d| = 1` by finite differences, and `d(δ_λ a) = λ d(a)`.
pub fn cc_checks(spec: &SelfTestSpec) -> Result<Vec<InvariantCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0xcc);
    let d = HomogeneousNorm::cc();
    let mut eik = Check::new("cc_eikonal", 1e-2);
    for _ in 0..spec.gradient_points {
        let a = off_center_point(&mut rng);
        eik.record((fd_subgradient_len(&d, &a)? - 1.0).abs());
    }
    let eik = eik.finish();
    let mut hom = Check::new("cc_homogeneity", 1e-6);
    for _ in 0..spec.gradient_points {
        let a = random_point(&mut rng, 2.0);
        let lambda = rng.random_range(0.1..4.0);
        let da = cc_distance(&a);
        hom.record(
            (cc_distance(&dilate(lambda, &a)?) - lambda * da).abs() / (lambda * da).max(1.0),
        );
    }
    Ok(vec![eik, hom.finish()])
}

/// `|∇N| = |w|/N`, both by finite differences and in closed form.
pub fn kaplan_gradient_checks(spec: &SelfTestSpec) -> Result<Vec<InvariantCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x4b);
    let n = HomogeneousNorm::kaplan();
    let mut fd = Check::new("kaplan_gradient_identity_fd", 1e-4);
    let mut an = Check::new("kaplan_gradient_identity_analytic", 1e-4);
    for _ in 0..spec.gradient_points {
        let a = off_center_point(&mut rng);
        let target = a.horizontal_len() / kaplan_norm(&a);
        fd.record((fd_subgradient_len(&n, &a)? - target).abs());
        let g = n.gradient(&a.to_array())?;
        an.record((g[0].hypot(g[1]) - target).abs());
    }
    Ok(vec![fd.finish(), an.finish()])
}

/// The whole suite.
pub fn run_self_test(spec: &SelfTestSpec) -> Result<Vec<InvariantCheck>> {
    let mut out = algebra_checks(spec)?;
    out.extend(cc_checks(spec)?);
    out.extend(kaplan_gradient_checks(spec)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_suite_passes() {
        let spec = SelfTestSpec {
            algebra_points: 500,
            gradient_points: 40,
            seed: 3,
        };
        for c in run_self_test(&spec).unwrap() {
            assert!(c.pass, "{c:?}");
        }
    }
}
