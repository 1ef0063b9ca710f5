//! Difference-in-means and the three shrinkage estimators, with their
//! pointwise Stein unbiased risk estimates.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::covmodel::StructuredCovariance;
use crate::error::{check_len, Error, Result};

/// Squared norms below this are treated as an exactly zero contrast.
pub const ZERO_NORM_SQ: f64 = 1e-300;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum EstimatorKind {
    DiffInMeans,
    Bock,
    SureMin,
    Dimmery,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 4] =
        [Self::DiffInMeans, Self::Bock, Self::SureMin, Self::Dimmery];
    pub const SHRINKERS: [EstimatorKind; 3] = [Self::Bock, Self::SureMin, Self::Dimmery];

    pub fn is_shrinker(self) -> bool {
        self != Self::DiffInMeans
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::DiffInMeans => "diffInMeans",
            Self::Bock => "bock",
            Self::SureMin => "sureMin",
            Self::Dimmery => "dimmery",
        }
    }

    /// Shrinkers need at least three contrasts.
    pub fn check_dim(self, k: usize) -> Result<()> {
        if self.is_shrinker() && k < 3 {
            return Err(Error::TooFewArms {
                what: self.as_str(),
                min: 3,
                k,
            });
        }
        Ok(())
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EstimatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "diffinmeans" | "dim" => Ok(Self::DiffInMeans),
            "bock" => Ok(Self::Bock),
            "suremin" => Ok(Self::SureMin),
            "dimmery" => Ok(Self::Dimmery),
            _ => Err(Error::InvalidInput(format!("unknown estimator kind '{s}'"))),
        }
    }
}

/// Contrast vector `tau_hat` together with its (estimated) covariance.
#[derive(Clone, Debug)]
pub struct ContrastEstimate {
    pub tau_hat: Vec<f64>,
    pub sigma: StructuredCovariance,
}

impl ContrastEstimate {
    pub fn new(tau_hat: Vec<f64>, sigma: StructuredCovariance) -> Result<Self> {
        check_len("contrast vector vs covariance", sigma.dim(), tau_hat.len())?;
        if tau_hat.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput(
                "contrast vector has non-finite entries".into(),
            ));
        }
        Ok(Self { tau_hat, sigma })
    }

    pub fn dim(&self) -> usize {
        self.tau_hat.len()
    }
}

/// Options for the point estimators.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct ShrinkOptions {
    /// Clamp every multiplier at zero from below.
    pub positive_part: bool,
}

/// `mean_k - mean_0` for each active arm.
pub fn diff_in_means(means: &[f64]) -> Vec<f64> {
    match means.split_first() {
        Some((m0, rest)) => rest.iter().map(|m| m - m0).collect(),
        None => Vec::new(),
    }
}

/// Per-entry multipliers `f_k` with `delta_k = f_k * tau_hat_k`.
pub fn shrinkage_factors(kind: EstimatorKind, e: &ContrastEstimate) -> Result<Vec<f64>> {
    factors(kind, &e.sigma, &e.tau_hat)
}

/// [`shrinkage_factors`] on borrowed parts; `tau_hat` must match `sigma`.
pub fn factors(kind: EstimatorKind, s: &StructuredCovariance, tau_hat: &[f64]) -> Result<Vec<f64>> {
    let k = tau_hat.len();
    check_len("contrast vector vs covariance", s.dim(), k)?;
    kind.check_dim(k)?;
    Ok(match kind {
        EstimatorKind::DiffInMeans => vec![1.0; k],
        EstimatorKind::Bock => {
            norm_sq(tau_hat)?;
            let q = s.inv_quad_form(tau_hat);
            if !(q > 0.0) {
                return Err(Error::ZeroContrast);
            }
            vec![1.0 - (s.effective_dim() - 2.0) / q; k]
        }
        EstimatorKind::SureMin => {
            let ns = norm_sq(tau_hat)?;
            vec![1.0 - s.trace() / ns; k]
        }
        EstimatorKind::Dimmery => {
            let ns = norm_sq(tau_hat)?;
            let scale = (k as f64 - 2.0) / ns;
            s.variances().iter().map(|v| 1.0 - scale * v).collect()
        }
    })
}

fn norm_sq(x: &[f64]) -> Result<f64> {
    let s: f64 = x.iter().map(|v| v * v).sum();
    if s < ZERO_NORM_SQ {
        return Err(Error::ZeroContrast);
    }
    Ok(s)
}

/// Point estimate of `tau` under `kind`.
pub fn estimate(kind: EstimatorKind, e: &ContrastEstimate) -> Result<Vec<f64>> {
    estimate_with(kind, e, ShrinkOptions::default())
}

pub fn estimate_with(
    kind: EstimatorKind,
    e: &ContrastEstimate,
    opts: ShrinkOptions,
) -> Result<Vec<f64>> {
    let f = shrinkage_factors(kind, e)?;
    Ok(f.iter()
        .zip(&e.tau_hat)
        .map(|(&f, &t)| {
            if opts.positive_part {
                f.max(0.0) * t
            } else {
                f * t
            }
        })
        .collect())
}

/// `(1 - (p - 2) / tau_hat^T Sigma^{-1} tau_hat) tau_hat`, `p = tr Sigma / lambda_max`.
pub fn bock(e: &ContrastEstimate) -> Result<Vec<f64>> {
    estimate(EstimatorKind::Bock, e)
}

/// `(1 - tr Sigma / |tau_hat|^2) tau_hat`.
pub fn sure_min(e: &ContrastEstimate) -> Result<Vec<f64>> {
    estimate(EstimatorKind::SureMin, e)
}

/// `(1 - (K - 2) sigma_k^2 / |tau_hat|^2) tau_hat_k`.
pub fn dimmery(e: &ContrastEstimate) -> Result<Vec<f64>> {
    estimate(EstimatorKind::Dimmery, e)
}

/// Stein's unbiased estimate of `E |delta - tau|^2` at the observed `tau_hat`.
pub fn sure_value(kind: EstimatorKind, e: &ContrastEstimate) -> Result<f64> {
    sure(kind, &e.sigma, &e.tau_hat)
}

/// [`sure_value`] on borrowed parts.
pub fn sure(kind: EstimatorKind, s: &StructuredCovariance, x: &[f64]) -> Result<f64> {
    let k = x.len();
    check_len("contrast vector vs covariance", s.dim(), k)?;
    kind.check_dim(k)?;
    let tr = s.trace();
    match kind {
        EstimatorKind::DiffInMeans => Ok(tr),
        EstimatorKind::Bock => {
            let ns = norm_sq(x)?;
            let q = s.inv_quad_form(x);
            let p = s.effective_dim();
            Ok(tr + (p * p - 4.0) * ns / (q * q) - 2.0 * (p - 2.0) * tr / q)
        }
        EstimatorKind::SureMin => {
            let ns = norm_sq(x)?;
            Ok(tr - tr * tr / ns + 4.0 * tr * s.quad_form(x) / (ns * ns))
        }
        EstimatorKind::Dimmery => {
            let ns = norm_sq(x)?;
            let a = k as f64 - 2.0;
            let var = s.variances();
            let star_x: Vec<f64> = var.iter().zip(x).map(|(v, t)| v * t).collect();
            let star_sq: f64 = star_x.iter().map(|y| y * y).sum();
            let cross: f64 = s.mul_vec(&star_x).iter().zip(x).map(|(a, b)| a * b).sum();
            let tr_star_sq: f64 = var.iter().map(|v| v * v).sum();
            Ok(
                tr + a * a * star_sq / (ns * ns) + 4.0 * a * cross / (ns * ns)
                    - 2.0 * a * tr_star_sq / ns,
            )
        }
    }
}
