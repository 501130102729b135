//! Experiment configuration: a JSON file whose fields command-line flags override.

use std::path::{Path, PathBuf};

use carnot_gibbs::catalog::{preset_by_name, ModelPreset, PRESET_NAMES};
use carnot_gibbs::engine::McmcParams;
use carnot_gibbs::estimators::UBoundFunction;
use carnot_gibbs::lattice::{LatticeWindow, Spin, SpinModel};
use carnot_gibbs::quadrature::GridSpec;
use carnot_gibbs::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowConfig {
    /// Box extent per lattice axis; its length is the lattice dimension.
    pub extent: Vec<usize>,
    /// Spin placed on every exterior site within range.
    pub boundary: Option<Spin>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub preset: Option<String>,
    /// Inline model, used instead of a preset.
    pub model: Option<SpinModel>,
    /// Growth function for inline models.
    pub eta: Option<UBoundFunction>,
    pub beta: Option<f64>,
    pub q: Option<f64>,
    pub window: Option<WindowConfig>,
    pub grid: Option<GridSpec>,
    pub mcmc: Option<McmcParams>,
    /// `start:stop:count`.
    pub beta_sweep: Option<String>,
    pub m_max: Option<usize>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub threads: Option<usize>,
}

pub const DEFAULT_SEED: u64 = 0x5eed;
pub const DEFAULT_BOUNDARY: Spin = [0.5, 0.0, 0.5];

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::InvalidParameter(format!("config {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::InvalidParameter(format!("config {}: {e}", path.display())))
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(DEFAULT_SEED)
    }
}

/// The model an experiment runs on.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub name: String,
    pub model: SpinModel,
    pub eta: Option<UBoundFunction>,
    pub preset: Option<ModelPreset>,
}

impl Resolved {
    /// Expected-verdict tags of the preset, empty for inline models.
    pub fn tags(&self) -> &[String] {
        self.preset.as_ref().map_or(&[], |p| &p.tags)
    }
}

impl Resolved {
    pub fn eta(&self) -> Result<&UBoundFunction> {
        self.eta.as_ref().ok_or_else(|| {
            Error::InvalidParameter("this estimator needs `eta` for inline models".into())
        })
    }
}

/// Builds the model and checks it against the preset's hypothesis record.
pub fn resolve_model(cfg: &ExperimentConfig) -> Result<Resolved> {
    let dimension = cfg
        .window
        .as_ref()
        .map(|w| w.extent.len())
        .filter(|d| *d > 0)
        .unwrap_or(1);
    let beta = cfg.beta.unwrap_or(0.0);
    let resolved = match (&cfg.model, &cfg.preset) {
        (Some(_), Some(_)) => {
            return Err(Error::InvalidParameter(
                "give either a preset or an inline model, not both".into(),
            ))
        }
        (Some(m), None) => {
            let model = match cfg.beta {
                Some(b) => m.with_beta(b),
                None => m.clone(),
            };
            model.validate()?;
            Resolved {
                name: "inline".into(),
                model,
                eta: cfg.eta.clone(),
                preset: None,
            }
        }
        (None, Some(name)) => {
            let preset = preset_by_name(name, beta)?.with_dimension(dimension);
            preset.validate()?;
            let model = preset.model()?;
            Resolved {
                name: preset.name.clone(),
                model,
                eta: Some(cfg.eta.clone().unwrap_or_else(|| preset.eta.clone())),
                preset: Some(preset),
            }
        }
        (None, None) => {
            return Err(Error::InvalidParameter(format!(
                "no model: pass --preset ({}) or a config with `model`",
                PRESET_NAMES.join(", ")
            )))
        }
    };
    if let Some(q) = cfg.q {
        if q != resolved.model.q {
            return Err(Error::InvalidParameter(format!(
                "q = {q} does not match the model's q = {}",
                resolved.model.q
            )));
        }
    }
    Ok(resolved)
}

/// Lattice window from the config, a chain of `default_sites` otherwise.
pub fn window(cfg: &ExperimentConfig, default_sites: usize, range: usize) -> Result<LatticeWindow> {
    let w = cfg.window.clone().unwrap_or_default();
    let extent = if w.extent.is_empty() {
        vec![default_sites]
    } else {
        w.extent
    };
    if extent.contains(&0) {
        return Err(Error::InvalidParameter(
            "window extent must be positive".into(),
        ));
    }
    let boundary = w.boundary.unwrap_or(DEFAULT_BOUNDARY);
    Ok(LatticeWindow::new(extent).with_uniform_boundary(range, boundary))
}

/// Grid spec from the config, or `default_nodes` per axis.
pub fn grid(cfg: &ExperimentConfig, default_nodes: usize) -> GridSpec {
    cfg.grid
        .clone()
        .unwrap_or_else(|| GridSpec::new(default_nodes))
}

/// Parses `start:stop:count` into `count` evenly spaced values.
pub fn parse_sweep(s: &str) -> Result<Vec<f64>> {
    let bad = || Error::InvalidParameter(format!("beta sweep {s:?} is not start:stop:count"));
    let parts: Vec<&str> = s.split(':').collect();
    if parts.len() != 3 {
        return Err(bad());
    }
    let start: f64 = parts[0].trim().parse().map_err(|_| bad())?;
    let stop: f64 = parts[1].trim().parse().map_err(|_| bad())?;
    let count: usize = parts[2].trim().parse().map_err(|_| bad())?;
    let ok = count >= 2 && start >= 0.0 && stop > start && stop.is_finite();
    if !ok {
        return Err(Error::InvalidParameter(format!(
            "beta sweep needs 0 ≤ start < stop and count ≥ 2; got {s:?}"
        )));
    }
    Ok((0..count)
        .map(|k| {
            let b = start + (stop - start) * k as f64 / (count - 1) as f64;
            // Drop representation noise so CSV rows print as typed.
            (b * 1e12).round() / 1e12
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_parsing() {
        let b = parse_sweep("0:0.2:21").unwrap();
        assert_eq!(b.len(), 21);
        assert_eq!(b[0], 0.0);
        assert_eq!(b[3], 0.03);
        assert_eq!(b[20], 0.2);
        assert!(parse_sweep("0:0.2").is_err());
        assert!(parse_sweep("1:0:5").is_err());
    }

    #[test]
    fn q_must_match_preset() {
        let cfg = ExperimentConfig {
            preset: Some("kaplan".into()),
            q: Some(1.5),
            ..Default::default()
        };
        assert!(resolve_model(&cfg).unwrap_err().is_validation());
        let cfg = ExperimentConfig {
            preset: Some("euclidean".into()),
            q: Some(2.0),
            ..Default::default()
        };
        assert_eq!(resolve_model(&cfg).unwrap().model.q, 2.0);
    }

    #[test]
    fn config_rejects_unknown_fields() {
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"presett": "kaplan"}"#).is_err());
        let c: ExperimentConfig =
            serde_json::from_str(r#"{"preset": "kaplan", "window": {"extent": [3]}}"#).unwrap();
        assert_eq!(window(&c, 1, 1).unwrap().len(), 3);
    }
}
