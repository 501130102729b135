use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::lattice::dual_exponent;

/// One estimated constant with its provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    /// Short name such as `C_SG`, `B_C1`, `xi`.
    pub constant: String,
    pub value: f64,
    pub method: String,
    pub uncertainty: f64,
    /// Verdict against `threshold`, when the estimate has one.
    pub pass: Option<bool>,
    pub threshold: Option<f64>,
    pub p: f64,
    pub q: f64,
    pub beta: Option<f64>,
    #[serde(default)]
    pub flags: Vec<String>,
    #[serde(default)]
    pub metadata: BTreeMap<String, Value>,
}

impl EstimateReport {
    pub fn new(constant: impl Into<String>, value: f64, method: impl Into<String>, q: f64) -> Self {
        Self {
            constant: constant.into(),
            value,
            method: method.into(),
            uncertainty: 0.0,
            pass: None,
            threshold: None,
            p: dual_exponent(q),
            q,
            beta: None,
            flags: Vec::new(),
            metadata: BTreeMap::new(),
        }
    }

    pub fn with_uncertainty(mut self, u: f64) -> Self {
        self.uncertainty = if u.is_finite() {
            u.abs()
        } else {
            f64::INFINITY
        };
        self
    }

    pub fn with_beta(mut self, beta: f64) -> Self {
        self.beta = Some(beta);
        self
    }

    /// Records a verdict; `pass` is computed by the caller.
    pub fn with_verdict(mut self, threshold: f64, pass: bool) -> Self {
        self.threshold = Some(threshold);
        self.pass = Some(pass);
        self
    }

    pub fn flag(mut self, f: impl Into<String>) -> Self {
        self.flags.push(f.into());
        self
    }

    pub fn has_flag(&self, f: &str) -> bool {
        self.flags.iter().any(|x| x == f)
    }

    pub fn meta(mut self, key: &str, v: impl Serialize) -> Self {
        let v = serde_json::to_value(v).unwrap_or(Value::Null);
        self.metadata.insert(key.to_string(), v);
        self
    }

    pub fn meta_f64s(&self, key: &str) -> Option<Vec<f64>> {
        self.metadata
            .get(key)?
            .as_array()?
            .iter()
            .map(|v| v.as_f64())
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Fields shared by every row of a sweep file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunContext {
    pub seed: u64,
    pub grid: String,
    pub preset: String,
    pub version: String,
}

impl RunContext {
    pub fn new(seed: u64, grid: impl Into<String>, preset: impl Into<String>) -> Self {
        Self {
            seed,
            grid: grid.into(),
            preset: preset.into(),
            version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }
}

/// Writes reports as RFC-4180 CSV: `beta, constant_name, value, uncertainty, pass`
/// followed by the run context columns.
pub fn write_csv(out: &mut dyn Write, reports: &[EstimateReport], ctx: &RunContext) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "beta",
        "constant_name",
        "value",
        "uncertainty",
        "pass",
        "seed",
        "grid",
        "preset",
        "version",
    ])?;
    for r in reports {
        let beta = r.beta.map(|b| b.to_string()).unwrap_or_default();
        let pass = r.pass.map(|p| p.to_string()).unwrap_or_default();
        w.write_record([
            beta,
            r.constant.clone(),
            r.value.to_string(),
            r.uncertainty.to_string(),
            pass,
            ctx.seed.to_string(),
            ctx.grid.clone(),
            ctx.preset.clone(),
            ctx.version.clone(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Least-squares line `y = a + b x` with the slope's standard error and R².
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineFit {
    pub intercept: f64,
    pub slope: f64,
    pub slope_se: f64,
    pub intercept_se: f64,
    pub r_squared: f64,
}

pub fn fit_line(x: &[f64], y: &[f64]) -> Result<LineFit> {
    let n = x.len();
    if n < 2 || y.len() != n {
        return Err(Error::RankDeficient(format!(
            "line fit needs ≥ 2 points, got {n}"
        )));
    }
    let nf = n as f64;
    let mx = x.iter().sum::<f64>() / nf;
    let my = y.iter().sum::<f64>() / nf;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|v| (v - my).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    if !(sxx > 1e-300) || sxx <= 1e-14 * x.iter().map(|v| v * v).sum::<f64>() {
        return Err(Error::RankDeficient("regressor is constant".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = x
        .iter()
        .zip(y)
        .map(|(a, b)| (b - intercept - slope * a).powi(2))
        .sum();
    let r_squared = if syy > 0.0 { 1.0 - sse / syy } else { 1.0 };
    let s2 = if n > 2 { sse / (nf - 2.0) } else { 0.0 };
    Ok(LineFit {
        intercept,
        slope,
        slope_se: (s2 / sxx).sqrt(),
        intercept_se: (s2 * (1.0 / nf + mx * mx / sxx)).sqrt(),
        r_squared,
    })
}
