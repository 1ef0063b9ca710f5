//! Exact risk `E |delta(tau_hat) - tau|^2` under `tau_hat ~ N(tau, Sigma)`,
//! a Monte Carlo oracle, and closed-form approximations.
//!
//! Every exact risk is an expectation in whitened coordinates
//! `tau_hat = Sigma^{1/2} X`, `X ~ N(Sigma^{-1/2} tau, I)`, of the pointwise
//! SURE expression. Bock's denominator `X^T X` is isotropic; SURE-min and
//! Dimmery have denominator `X^T Sigma X`, handled in the eigenbasis of Sigma.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covmodel::{
    build_covariance, ArmCounts, ArmVariances, EffectVector, StructuredCovariance,
};
use crate::error::{check_len, Error, Result};
use crate::estimators::{factors, EstimatorKind};
use crate::quadform::{Denominator, Numerator};
use crate::quadrature::QuadratureSettings;

/// Minimum number of draws accepted by [`risk_mc`].
pub const MIN_MC_DRAWS: usize = 10_000;
const MC_CHUNKS: u64 = 64;

/// Risk of `kind` at allocation `n`, arm variances `V`, effects `tau`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiskQuery {
    pub kind: EstimatorKind,
    pub n: ArmCounts,
    #[serde(rename = "V")]
    pub v: ArmVariances,
    pub tau: EffectVector,
}

impl RiskQuery {
    pub fn new(
        kind: EstimatorKind,
        n: ArmCounts,
        v: ArmVariances,
        tau: EffectVector,
    ) -> Result<Self> {
        let q = Self { kind, n, v, tau };
        q.validate()?;
        Ok(q)
    }

    pub fn validate(&self) -> Result<()> {
        check_len(
            "counts vs variances",
            self.v.as_slice().len(),
            self.n.as_slice().len(),
        )?;
        check_len(
            "effects vs active arms",
            self.n.active_arms(),
            self.tau.len(),
        )?;
        self.kind.check_dim(self.tau.len())
    }

    pub fn covariance(&self) -> Result<StructuredCovariance> {
        build_covariance(&self.n, &self.v)
    }
}

/// Exact risk via one-dimensional quadrature.
pub fn risk_exact(q: &RiskQuery, s: &QuadratureSettings) -> Result<f64> {
    q.validate()?;
    risk_exact_sigma(q.kind, &q.covariance()?, q.tau.as_slice(), s)
}

/// Exact risk for an explicit covariance, bypassing allocations.
pub fn risk_exact_sigma(
    kind: EstimatorKind,
    sigma: &StructuredCovariance,
    tau: &[f64],
    s: &QuadratureSettings,
) -> Result<f64> {
    let k = sigma.dim();
    check_len("effects vs covariance", k, tau.len())?;
    kind.check_dim(k)?;
    let tr = sigma.trace();
    match kind {
        EstimatorKind::DiffInMeans => Ok(tr),
        EstimatorKind::Bock => {
            let kappa = sigma.inv_quad_form(tau).max(0.0);
            let p = sigma.effective_dim();
            let den = Denominator::isotropic(k, 1.0, kappa)?;
            let recip = den.reciprocal(s)?.value;
            let num = Numerator::Scalar {
                trace: tr,
                mean_form: tau.iter().map(|t| t * t).sum(),
            };
            let ratio = den.ratio(&num, s)?.value;
            Ok(tr + (p * p - 4.0) * ratio - 2.0 * (p - 2.0) * tr * recip)
        }
        EstimatorKind::SureMin => {
            let w = Whitened::new(sigma, tau)?;
            let recip = w.den.reciprocal(s)?.value;
            let a = Numerator::Diagonal(w.values.iter().map(|l| l * l).collect());
            let ratio = w.den.ratio(&a, s)?.value;
            Ok(tr + 4.0 * tr * ratio - tr * tr * recip)
        }
        EstimatorKind::Dimmery => {
            let w = Whitened::new(sigma, tau)?;
            let a = k as f64 - 2.0;
            let var = sigma.variances();
            let dense = sigma.to_dense();
            // (K-2)^2 Sigma_*^2 + 4 (K-2) sym(Sigma Sigma_*), as one numerator.
            let m = DMatrix::from_fn(k, k, |i, j| {
                let cross = 0.5 * dense[(i, j)] * (var[i] + var[j]);
                let star = if i == j { var[i] * var[i] } else { 0.0 };
                a * a * star + 4.0 * a * cross
            });
            let ratio = w.den.ratio(&Numerator::Dense(w.rotate(&m)), s)?.value;
            let recip = w.den.reciprocal(s)?.value;
            let tr_star_sq: f64 = var.iter().map(|v| v * v).sum();
            Ok(tr + ratio - 2.0 * a * tr_star_sq * recip)
        }
    }
}

/// Sigma's eigenbasis: `tau_hat^T M tau_hat = Y^T L^{1/2} Q^T M Q L^{1/2} Y`
/// with `Y ~ N(L^{-1/2} Q^T tau, I)` and denominator `Y^T L Y`.
struct Whitened {
    values: Vec<f64>,
    basis: DMatrix<f64>,
    den: Denominator,
}

impl Whitened {
    fn new(sigma: &StructuredCovariance, tau: &[f64]) -> Result<Self> {
        let eig = SymmetricEigen::new(sigma.to_dense());
        let values: Vec<f64> = eig.eigenvalues.iter().copied().collect();
        let basis = eig.eigenvectors;
        let rotated = basis.transpose() * DVector::from_column_slice(tau);
        let mean = rotated
            .iter()
            .zip(&values)
            .map(|(m, l)| m / l.sqrt())
            .collect();
        let den = Denominator::spectral(values.clone(), mean)?;
        Ok(Self { values, basis, den })
    }

    fn rotate(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        let mut r = self.basis.transpose() * m * &self.basis;
        let k = self.values.len();
        for i in 0..k {
            for j in 0..k {
                r[(i, j)] *= (self.values[i] * self.values[j]).sqrt();
            }
        }
        // Exact symmetry for the quadratic-form kernel.
        (&r + r.transpose()) * 0.5
    }
}

/// Monte Carlo estimate of the risk, with its standard error.
///
/// Draws are split into fixed chunks with independent ChaCha streams, so the
/// result does not depend on the thread count.
pub fn risk_mc(q: &RiskQuery, draws: usize, seed: u64) -> Result<(f64, f64)> {
    q.validate()?;
    risk_mc_sigma(q.kind, &q.covariance()?, q.tau.as_slice(), draws, seed)
}

pub fn risk_mc_sigma(
    kind: EstimatorKind,
    sigma: &StructuredCovariance,
    tau: &[f64],
    draws: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    mc_moments(sigma, tau, draws, seed, |x| {
        // A zero contrast has probability zero; fall back to tau_hat.
        let f = factors(kind, sigma, x).unwrap_or_else(|_| vec![1.0; x.len()]);
        x.iter()
            .zip(&f)
            .zip(tau)
            .map(|((xi, fi), ti)| (fi * xi - ti).powi(2))
            .sum()
    })
}

/// Mean and standard error of `h(tau_hat)` over `tau_hat ~ N(tau, Sigma)`.
pub fn mc_moments<H>(
    sigma: &StructuredCovariance,
    tau: &[f64],
    draws: usize,
    seed: u64,
    h: H,
) -> Result<(f64, f64)>
where
    H: Fn(&[f64]) -> f64 + Sync,
{
    check_len("effects vs covariance", sigma.dim(), tau.len())?;
    if draws < MIN_MC_DRAWS {
        return Err(Error::InvalidInput(format!(
            "Monte Carlo needs at least {MIN_MC_DRAWS} draws"
        )));
    }
    sigma.lambda_max();
    let sd: Vec<f64> = sigma.diag_part().iter().map(|d| d.sqrt()).collect();
    let sd0 = sigma.off().sqrt();
    let per = draws as u64 / MC_CHUNKS;
    let extra = draws as u64 % MC_CHUNKS;
    let sums: Vec<(f64, f64)> = (0..MC_CHUNKS)
        .into_par_iter()
        .map(|chunk| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(chunk);
            let count = per + u64::from(chunk < extra);
            let mut x = vec![0.0; tau.len()];
            let (mut s1, mut s2) = (0.0, 0.0);
            for _ in 0..count {
                let z0: f64 = rng.sample(StandardNormal);
                for k in 0..x.len() {
                    let z: f64 = rng.sample(StandardNormal);
                    x[k] = tau[k] + sd[k] * z + sd0 * z0;
                }
                let v = h(&x);
                s1 += v;
                s2 += v * v;
            }
            (s1, s2)
        })
        .collect();
    let (s1, s2) = sums
        .iter()
        .fold((0.0, 0.0), |(a, b), (c, d)| (a + c, b + d));
    let n = draws as f64;
    let mean = s1 / n;
    let var = ((s2 - n * mean * mean) / (n - 1.0)).max(0.0);
    Ok((mean, (var / n).sqrt()))
}

/// Closed-form Bock risk at `tau = 0`:
/// `tr S (1 - 2 (p - 2) / K + (p - 2)^2 / (K (K - 2)))`.
pub fn risk_bock_zero(sigma: &StructuredCovariance) -> Result<f64> {
    let k = sigma.dim();
    EstimatorKind::Bock.check_dim(k)?;
    let k = k as f64;
    let a = sigma.effective_dim() - 2.0;
    Ok(sigma.trace() * (1.0 - 2.0 * a / k + a * a / (k * (k - 2.0))))
}

/// Low-signal SURE-min risk from the leading moment-matched terms.
pub fn risk_suremin_lowsnr(sigma: &StructuredCovariance) -> Result<f64> {
    let tr = sigma.trace();
    let tr2 = sigma.trace_square();
    let den = tr * tr - 2.0 * tr2;
    if !(den > 0.0) {
        return Err(Error::ApproximationInvalid(
            "(tr S)^2 - 2 tr S^2 must be positive",
        ));
    }
    Ok(tr * (1.0 + (4.0 * tr2 - tr * tr) / den))
}

/// Dimmery risk proxy with `|tau_hat|^2` replaced by its null mean `tr S`.
pub fn risk_dimmery_proxy(sigma: &StructuredCovariance) -> Result<f64> {
    let k = sigma.dim();
    EstimatorKind::Dimmery.check_dim(k)?;
    let a = k as f64 - 2.0;
    let tr = sigma.trace();
    let c = sigma.off();
    let var = sigma.variances();
    let kf = k as f64;
    let tr_star_sq_sigma: f64 = var.iter().map(|v| v * v * v).sum();
    let tr_sigma_star_sigma: f64 = sigma
        .diag_part()
        .iter()
        .zip(&var)
        .map(|(d, v)| v * ((d + c) * (d + c) + (kf - 1.0) * c * c))
        .sum();
    let tr_star_sq: f64 = var.iter().map(|v| v * v).sum();
    Ok(
        tr + (a * a * tr_star_sq_sigma + 4.0 * a * tr_sigma_star_sigma) / (tr * tr)
            - 2.0 * a * tr_star_sq / tr,
    )
}

/// Satterthwaite moment-matched approximation of `E[1 / |tau_hat|^2]`.
pub fn satterthwaite_reciprocal(sigma: &StructuredCovariance, tau: &[f64]) -> Result<f64> {
    check_len("effects vs covariance", sigma.dim(), tau.len())?;
    let m = sigma.trace() + tau.iter().map(|t| t * t).sum::<f64>();
    let den = m * m - 2.0 * sigma.trace_square() - 4.0 * sigma.quad_form(tau);
    if !(den > 0.0) {
        return Err(Error::ApproximationInvalid(
            "moment-matched denominator must be positive",
        ));
    }
    Ok(m / den)
}
