//! Estimator verdicts on catalog presets agree with the presets' expected tags.

use carnot_gibbs::catalog::{preset_cc_polynomial, preset_euclidean, preset_kaplan, ModelPreset};
use carnot_gibbs::estimators::{verify_gradient_bound_c2, verify_ubound_c1, C1Params, C2Params};
use carnot_gibbs::heisenberg::HomogeneousNorm;
use carnot_gibbs::lattice::Interaction;
use carnot_gibbs::quadrature::GridSpec;

fn presets() -> Vec<ModelPreset> {
    let nn = Interaction::norm_product(-1.0, HomogeneousNorm::kaplan(), 1.0, 1.0);
    vec![
        preset_cc_polynomial(1.0, 2.0, 1, 0.1).unwrap(),
        preset_cc_polynomial(1.0, 2.0, 2, 0.1).unwrap(),
        preset_cc_polynomial(1.0, 2.0, 4, 0.1).unwrap(),
        preset_kaplan(1.0, 4.0, None, 0.1).unwrap(),
        preset_kaplan(1.0, 4.0, Some(nn.clone()), 0.1).unwrap(),
        preset_kaplan(1.0, 5.0, Some(nn), 0.1).unwrap(),
        preset_euclidean(1, 0.5, 2.0, &[(1.0, 1.0, 1.0)], 0.1).unwrap(),
    ]
}

#[test]
fn c2_verdicts_match_tags() {
    for p in presets() {
        let r =
            verify_gradient_bound_c2(&p.interaction, &p.eta, p.spin, &C2Params::new(p.q)).unwrap();
        let label = format!(
            "{} {:?}: value {} flags {:?}",
            p.name, p.tags, r.value, r.flags
        );
        if p.has_tag("C2-pass") {
            assert!(!r.has_flag("diverging"), "{label}");
            assert!(r.value.is_finite() && r.value > 0.0, "{label}");
        } else {
            assert!(p.has_tag("C2-fail"), "{label}");
            assert!(r.has_flag("diverging"), "{label}");
        }
    }
}

#[test]
fn linear_cc_interaction_has_its_exact_c2_bound() {
    // V = (d(x) + d(y))/2 with |grad d| = 1: the ratio is (1/2)/(1 + d(x)^2 + d(y)^2), largest at the
    // origin where d is not differentiable, so grids approach 1/2 from below.
    let p = preset_cc_polynomial(1.0, 2.0, 1, 0.1).unwrap();
    let r = verify_gradient_bound_c2(&p.interaction, &p.eta, p.spin, &C2Params::new(p.q)).unwrap();
    assert!(r.value > 0.25 && r.value <= 0.5 + 1e-9, "{}", r.value);
    let p = preset_cc_polynomial(1.0, 2.0, 2, 0.1).unwrap();
    let r = verify_gradient_bound_c2(&p.interaction, &p.eta, p.spin, &C2Params::new(p.q)).unwrap();
    assert_eq!(r.pass, Some(true), "{} {:?}", r.value, r.flags);
}

#[test]
fn kaplan_c1_is_stable() {
    let p = preset_kaplan(1.0, 4.0, None, 0.1).unwrap();
    assert!(p.has_tag("C1-pass"));
    let r = verify_ubound_c1(
        &p.phase,
        &p.eta,
        p.spin,
        &GridSpec::new(25),
        &C1Params::new(p.q),
    )
    .unwrap();
    assert_eq!(r.pass, Some(true), "{:?} {:?}", r.value, r.flags);
    assert!(r.value > 0.0 && r.value.is_finite());
}
