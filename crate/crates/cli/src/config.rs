//! Config files: TOML (`.toml`) or JSON, with an optional `schemaVersion`.

use std::path::Path;

use adashrink::estimators::EstimatorKind;
use adashrink::quadrature::QuadratureSettings;
use adashrink::simkit::{Regime, TauShape, V0Regime};
use anyhow::{bail, Context};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;

pub fn load<T: DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    let mut value: serde_json::Value = if path.extension().is_some_and(|e| e == "toml") {
        toml::from_str(&text).with_context(|| format!("invalid TOML in {}", path.display()))?
    } else {
        serde_json::from_str(&text)
            .with_context(|| format!("invalid JSON in {}", path.display()))?
    };
    // Strip the version first so strict schemas do not see it.
    if let Some(v) = value
        .as_object_mut()
        .and_then(|m| m.remove("schemaVersion"))
    {
        if v.as_u64() != Some(SCHEMA_VERSION.into()) {
            bail!(
                "{}: schemaVersion {v} is not supported (expected {SCHEMA_VERSION})",
                path.display()
            );
        }
    }
    serde_json::from_value(value)
        .with_context(|| format!("invalid configuration in {}", path.display()))
}

/// Grid for `oracle`. A `kappa` of zero yields a single zero-effect cell
/// regardless of `tauShapes`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct OracleConfig {
    #[serde(rename = "K", default = "default_ks")]
    pub k: Vec<usize>,
    #[serde(rename = "N", default = "default_n")]
    pub n: usize,
    #[serde(default = "default_regimes")]
    pub v0_regimes: Vec<V0Regime>,
    #[serde(default = "default_shapes")]
    pub tau_shapes: Vec<TauShape>,
    #[serde(default = "default_kappas")]
    pub kappas: Vec<f64>,
    #[serde(default = "default_draws")]
    pub draws: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_kinds")]
    pub kinds: Vec<EstimatorKind>,
    #[serde(default)]
    pub quadrature: QuadratureSettings,
}

fn default_ks() -> Vec<usize> {
    vec![6, 12]
}
fn default_n() -> usize {
    1000
}
fn default_regimes() -> Vec<V0Regime> {
    vec![V0Regime::Low, V0Regime::High]
}
fn default_shapes() -> Vec<TauShape> {
    vec![TauShape::Dense, TauShape::Sparse]
}
fn default_kappas() -> Vec<f64> {
    vec![0.0, 3.0, 9.0]
}
fn default_draws() -> usize {
    20
}
fn default_kinds() -> Vec<EstimatorKind> {
    EstimatorKind::SHRINKERS.to_vec()
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            k: default_ks(),
            n: default_n(),
            v0_regimes: default_regimes(),
            tau_shapes: default_shapes(),
            kappas: default_kappas(),
            draws: default_draws(),
            seed: 0,
            kinds: default_kinds(),
            quadrature: QuadratureSettings::default(),
        }
    }
}

impl OracleConfig {
    /// Expands and validates the grid.
    pub fn cells(&self) -> anyhow::Result<Vec<Regime>> {
        if self.draws == 0 {
            bail!("draws must be at least 1");
        }
        if self.kinds.is_empty() {
            bail!("kinds must not be empty");
        }
        self.quadrature.validate()?;
        let mut out = Vec::new();
        for &k in &self.k {
            for kind in &self.kinds {
                kind.check_dim(k)?;
            }
            for &v0_regime in &self.v0_regimes {
                for &kappa in &self.kappas {
                    let shapes: &[TauShape] = if kappa == 0.0 {
                        &[TauShape::Zero]
                    } else {
                        &self.tau_shapes
                    };
                    for &tau_shape in shapes {
                        let r = Regime {
                            k,
                            v0_regime,
                            tau_shape,
                            kappa,
                        };
                        r.validate()?;
                        out.push(r);
                    }
                }
            }
        }
        if out.is_empty() {
            bail!("the grid is empty: K, v0Regimes, kappas and (for kappa > 0) tauShapes must be non-empty");
        }
        Ok(out)
    }
}
