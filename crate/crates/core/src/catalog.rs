//! Preset models for the three example families, with hypothesis records.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::UBoundFunction;
use crate::heisenberg::HomogeneousNorm;
use crate::lattice::{
    dual_exponent, CouplingMatrix, Interaction, InteractionTerm, Phase, SpinModel, SpinSpace,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypothesisRecord {
    /// Order of the phase.
    pub phase_order: f64,
    pub q: f64,
    /// Exponent dual to `q`.
    pub p: f64,
    /// Total degree of the interaction.
    pub r: f64,
    pub alpha: f64,
    pub beta_range: (f64, f64),
    pub norms: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelPreset {
    pub name: String,
    pub spin: SpinSpace,
    pub dimension: usize,
    pub phase: Phase,
    pub interaction: Interaction,
    pub couplings: CouplingMatrix,
    pub q: f64,
    pub eta: UBoundFunction,
    pub hypothesis: HypothesisRecord,
    /// Expected verdicts such as `C2-fail` or `eta-degenerate`.
    pub tags: Vec<String>,
    /// All hypotheses of the corresponding theorem hold.
    pub valid: bool,
}

impl ModelPreset {
    /// The spin model; fails for negative controls whose interaction outgrows the phase.
    pub fn model(&self) -> Result<SpinModel> {
        SpinModel::new(
            self.spin,
            self.dimension,
            self.phase.clone(),
            self.interaction.clone(),
            self.couplings.clone(),
            self.q,
        )
    }

    pub fn has_tag(&self, t: &str) -> bool {
        self.tags.iter().any(|x| x == t)
    }

    pub fn with_dimension(mut self, d: usize) -> Self {
        self.dimension = d;
        self
    }

    pub fn with_beta(mut self, beta: f64) -> Self {
        self.couplings = self.couplings.with_beta(beta);
        self.hypothesis.beta_range = (0.0, beta.abs());
        self
    }

    /// Checks the record against the preset's own fields.
    pub fn validate(&self) -> Result<()> {
        let h = &self.hypothesis;
        if (1.0 / h.p + 1.0 / h.q - 1.0).abs() > 1e-12 || h.q != self.q {
            return Err(Error::InvalidModel(format!(
                "{}: hypothesis record has p = {}, q = {}",
                self.name, h.p, h.q
            )));
        }
        if h.phase_order != self.phase.order() || h.r != self.interaction.degree() {
            return Err(Error::InvalidModel(format!(
                "{}: hypothesis record disagrees with the model",
                self.name
            )));
        }
        Ok(())
    }

    /// Adds `c · d(x ∘ y⁻¹)` to the interaction.
    pub fn with_difference_term(mut self, c: f64) -> Self {
        let norm = match self.spin {
            SpinSpace::Heisenberg => HomogeneousNorm::cc(),
            SpinSpace::Euclidean { n } => HomogeneousNorm::euclidean(n),
        };
        self.interaction
            .terms
            .push(InteractionTerm::GroupDifference {
                coefficient: c,
                norm,
                exponent: 1.0,
            });
        self.hypothesis.r = self.interaction.degree();
        self
    }
}

fn tag(ok: bool, name: &str) -> String {
    format!("{name}-{}", if ok { "pass" } else { "fail" })
}

/// `φ = α d^p`, `V = ½(d(x)^a d(y)^b + d(x)^b d(y)^a)` with `a + b = r`, `η = d^{q(p−1)}`.
pub fn preset_cc_polynomial(alpha: f64, p: f64, r: u32, beta: f64) -> Result<ModelPreset> {
    if !(alpha > 0.0) || !(p > 1.0) || r == 0 {
        return Err(Error::InvalidParameter(format!(
            "cc-poly needs α > 0, p > 1, r ≥ 1; got α={alpha}, p={p}, r={r}"
        )));
    }
    if p < 2.0 {
        return Err(Error::InvalidParameter(format!(
            "p = {p} gives q = {} outside (1, 2]",
            dual_exponent(p)
        )));
    }
    let q = dual_exponent(p);
    let d = HomogeneousNorm::cc();
    let a = r.div_ceil(2) as f64;
    let b = (r / 2) as f64;
    let interaction = if a == b {
        Interaction::norm_product(1.0, d.clone(), a, b)
    } else {
        Interaction::new(vec![
            InteractionTerm::product(0.5, d.clone(), a, d.clone(), b),
            InteractionTerm::product(0.5, d.clone(), b, d.clone(), a),
        ])
    };
    let valid = r as f64 <= p;
    Ok(ModelPreset {
        name: "cc-poly".into(),
        spin: SpinSpace::Heisenberg,
        dimension: 1,
        phase: Phase::monomial(alpha, p, d.clone()),
        interaction,
        couplings: CouplingMatrix::nearest_neighbor(beta),
        q,
        eta: UBoundFunction::new(d, q * (p - 1.0), format!("d^{}", q * (p - 1.0))),
        hypothesis: HypothesisRecord {
            phase_order: p,
            q,
            p,
            r: r as f64,
            alpha,
            beta_range: (0.0, beta.abs()),
            norms: vec!["cc".into()],
        },
        tags: vec![tag(true, "C1"), tag(valid, "C2")],
        valid,
    })
}

/// `φ = α N^p`, default `V = N(x ∘ y⁻¹)`, `η = N^{p−3}`, `q = 2`.
///
/// `valid` records the theorem's hypotheses (`p > 3`, degree ≤ p). The C2 tag is
/// stricter: a term of degree `r` has `|∇V|^q ~ N^{q(r−1)}`, which `1 + η` only
/// dominates when `q(r − 1) ≤ p − 3`.
pub fn preset_kaplan(
    alpha: f64,
    p: f64,
    interaction: Option<Interaction>,
    beta: f64,
) -> Result<ModelPreset> {
    if !(alpha > 0.0) || !(p > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "kaplan needs α > 0 and p > 0; got α={alpha}, p={p}"
        )));
    }
    let n = HomogeneousNorm::kaplan();
    let interaction = interaction.unwrap_or_else(|| {
        Interaction::new(vec![InteractionTerm::GroupDifference {
            coefficient: 1.0,
            norm: n.clone(),
            exponent: 1.0,
        }])
    });
    let q = 2.0;
    let e = p - 3.0;
    let eta_diverges = e > 0.0;
    let c2_ok = interaction
        .terms
        .iter()
        .all(|t| q * (t.degree() - 1.0).max(0.0) <= e.max(0.0));
    let interaction_degree = interaction.degree();
    let mut tags = vec![tag(eta_diverges, "C1"), tag(c2_ok, "C2")];
    if !eta_diverges {
        tags.push("eta-degenerate".into());
    }
    Ok(ModelPreset {
        name: "kaplan".into(),
        spin: SpinSpace::Heisenberg,
        dimension: 1,
        phase: Phase::monomial(alpha, p, n.clone()),
        hypothesis: HypothesisRecord {
            phase_order: p,
            q,
            p: dual_exponent(q),
            r: interaction.degree(),
            alpha,
            beta_range: (0.0, beta.abs()),
            norms: vec!["kaplan".into()],
        },
        interaction,
        couplings: CouplingMatrix::nearest_neighbor(beta),
        q,
        eta: UBoundFunction::new(n, e, format!("N^{e}")),
        tags,
        valid: p > 3.0 && interaction_degree <= p,
    })
}

impl ModelPreset {
    /// Adds a lower-order phase term `c · ρ^e`, keeping the preset only if φ stays bounded below.
    pub fn with_lower_order(mut self, c: f64, e: f64) -> Result<Self> {
        let lead = self
            .phase
            .leading()
            .ok_or_else(|| Error::InvalidModel("phase has no terms".into()))?
            .clone();
        if !(e >= 0.0 && e < lead.exponent) {
            return Err(Error::InvalidModel(format!(
                "lower-order exponent {e} must lie in [0, {})",
                lead.exponent
            )));
        }
        self.phase = self.phase.with_term(c, e, lead.norm);
        if self.phase.radial_minimum(self.spin).is_none() {
            return Err(Error::InvalidModel("phase is not bounded below".into()));
        }
        Ok(self)
    }
}

/// `φ = α|x|^p` on ℝⁿ with `V = Σ c_k |x|^{r_k} |y|^{s_k}` and `η = |x|^{q(p−1)}`.
pub fn preset_euclidean(
    n: usize,
    alpha: f64,
    p: f64,
    monomials: &[(f64, f64, f64)],
    beta: f64,
) -> Result<ModelPreset> {
    SpinSpace::Euclidean { n }.validate()?;
    if !(alpha > 0.0) || !(p >= 2.0) {
        return Err(Error::InvalidParameter(format!(
            "euclidean needs α > 0 and p ≥ 2; got α={alpha}, p={p}"
        )));
    }
    let norm = HomogeneousNorm::euclidean(n);
    let mut terms = Vec::with_capacity(monomials.len());
    for &(c, r, s) in monomials {
        for e in [r, s] {
            if !(e == 0.0 || e >= 1.0) {
                return Err(Error::InvalidModel(format!(
                    "monomial exponent {e} must lie in {{0}} ∪ [1, ∞)"
                )));
            }
        }
        if r + s > p {
            return Err(Error::InvalidModel(format!(
                "monomial degree {} exceeds p = {p}",
                r + s
            )));
        }
        terms.push(InteractionTerm::product(
            c,
            norm.clone(),
            r,
            norm.clone(),
            s,
        ));
    }
    let interaction = Interaction::new(terms);
    let q = dual_exponent(p);
    Ok(ModelPreset {
        name: "euclidean".into(),
        spin: SpinSpace::Euclidean { n },
        dimension: 1,
        phase: Phase::monomial(alpha, p, norm.clone()),
        hypothesis: HypothesisRecord {
            phase_order: p,
            q,
            p,
            r: interaction.degree(),
            alpha,
            beta_range: (0.0, beta.abs()),
            norms: vec![format!("euclidean{n}")],
        },
        interaction,
        couplings: CouplingMatrix::nearest_neighbor(beta),
        q,
        eta: UBoundFunction::new(norm, q * (p - 1.0), format!("|x|^{}", q * (p - 1.0))),
        tags: vec![tag(true, "C1"), tag(true, "C2")],
        valid: true,
    })
}

pub const PRESET_NAMES: [&str; 3] = ["cc-poly", "kaplan", "euclidean"];

/// Default instance of a named preset.
pub fn preset_by_name(name: &str, beta: f64) -> Result<ModelPreset> {
    match name {
        "cc-poly" => preset_cc_polynomial(1.0, 2.0, 2, beta),
        "kaplan" => preset_kaplan(1.0, 4.0, None, beta),
        "euclidean" => preset_euclidean(1, 0.5, 2.0, &[(1.0, 1.0, 1.0)], beta),
        other => Err(Error::InvalidParameter(format!(
            "unknown preset {other:?}; expected one of {PRESET_NAMES:?}"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heisenberg::{GroupPoint, HorizontalVector};
    use crate::lattice::interaction_gradients;

    #[test]
    fn cc_presets_and_tags() {
        let ok = preset_cc_polynomial(1.0, 2.0, 2, 0.01).unwrap();
        assert!(ok.valid && ok.has_tag("C2-pass"));
        assert_eq!(ok.q, 2.0);
        ok.validate().unwrap();
        ok.model().unwrap();
        let bad = preset_cc_polynomial(1.0, 2.0, 3, 0.01).unwrap();
        assert!(!bad.valid && bad.has_tag("C2-fail"));
        assert!(bad.model().is_err());
        assert!(preset_cc_polynomial(-1.0, 2.0, 2, 0.1).is_err());
    }

    #[test]
    fn difference_term_gradient_is_bounded() {
        let p = preset_cc_polynomial(1.0, 2.0, 2, 0.01)
            .unwrap()
            .with_difference_term(1.0);
        let v = Interaction::new(p.interaction.terms[1..].to_vec());
        for (x, y) in [
            ([0.3, -0.7, 0.2], [1.1, 0.4, -0.9]),
            ([-1.2, 0.5, 2.0], [0.2, 0.1, 0.3]),
        ] {
            let (a, b) =
                interaction_gradients(&v, &GroupPoint::from_array(x), &GroupPoint::from_array(y))
                    .unwrap();
            let len = |h: HorizontalVector| h.euclidean_length();
            assert!(len(a) <= 1.0 + 1e-6 && len(b) <= 1.0 + 1e-6);
        }
        p.model().unwrap();
    }

    #[test]
    fn kaplan_presets() {
        let k = preset_kaplan(1.0, 4.0, None, 0.1).unwrap();
        assert!(k.valid && k.has_tag("C2-pass") && k.eta.exponent == 1.0 && k.q == 2.0);
        let nn = Interaction::norm_product(-1.0, HomogeneousNorm::kaplan(), 1.0, 1.0);
        let strong = preset_kaplan(1.0, 4.0, Some(nn.clone()), 0.1).unwrap();
        assert!(strong.valid && strong.has_tag("C2-fail"));
        assert!(preset_kaplan(1.0, 5.0, Some(nn), 0.1)
            .unwrap()
            .has_tag("C2-pass"));
        assert!(k.eta.diverges(SpinSpace::Heisenberg));
        let d = preset_kaplan(1.0, 2.5, None, 0.1).unwrap();
        assert!(d.has_tag("eta-degenerate") && !d.valid);
        let lo = k.with_lower_order(-2.0, 2.0).unwrap();
        assert!(lo.valid);
        lo.model().unwrap();
    }

    #[test]
    fn euclidean_presets() {
        let e = preset_euclidean(1, 0.5, 2.0, &[(1.0, 1.0, 1.0)], 0.05).unwrap();
        assert!(e.valid && e.q == 2.0);
        assert!((e.phase.eval(&[1.5, 0.0, 0.0]) - 1.125).abs() < 1e-12);
        e.model().unwrap();
        assert!(preset_euclidean(1, 0.5, 2.0, &[(1.0, 0.5, 1.0)], 0.05).is_err());
        assert!(preset_euclidean(1, 0.5, 2.0, &[(1.0, 2.0, 1.0)], 0.05).is_err());
    }

    #[test]
    fn names_resolve() {
        for n in PRESET_NAMES {
            let p = preset_by_name(n, 0.0).unwrap();
            p.validate().unwrap();
            assert_eq!(p.name, n);
        }
        assert!(preset_by_name("ising", 0.1).is_err());
    }
}
