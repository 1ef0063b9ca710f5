//! Covariance of the difference-in-means contrast vector.
//!
//! With `K` active arms sharing one control arm, the contrasts
//! `tau_hat_k = mean_k - mean_0` have covariance
//!
//! ```text
//! Sigma = diag(V_1/n_1, ..., V_K/n_K) + (V_0/n_0) * 1 1^T
//! ```
//!
//! i.e. a positive diagonal plus a positive rank-one update. [`StructuredCovariance`]
//! keeps only the `K` diagonal entries and the shared off-diagonal value, and
//! answers traces, quadratic forms, inverse products and the top eigenpair in
//! `O(K)` without materializing the dense matrix.

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

/// Largest admissible condition number before the covariance is rejected as singular.
pub const MAX_CONDITION: f64 = 1e14;

/// Units assigned to each arm; index 0 is the control arm.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct ArmCounts(Vec<usize>);

/// Alias used when the counts are the decision variable of a design problem.
pub type AllocationVector = ArmCounts;

impl ArmCounts {
    /// Requires at least two arms (control plus one active) and every count `>= 1`.
    pub fn new(counts: Vec<usize>) -> Result<Self> {
        if counts.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "need a control arm and at least one active arm, got {} arms",
                counts.len()
            )));
        }
        if let Some(k) = counts.iter().position(|&n| n == 0) {
            return Err(Error::InvalidInput(format!("arm {k} has zero units")));
        }
        Ok(Self(counts))
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    /// Number of active arms `K` (the control arm is not counted).
    pub fn active_arms(&self) -> usize {
        self.0.len() - 1
    }

    pub fn total(&self) -> usize {
        self.0.iter().sum()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.0.iter().map(|&n| n as f64).collect()
    }

    /// Counts after one more unit is assigned to `arm`.
    pub fn with_added(&self, arm: usize) -> Self {
        let mut next = self.0.clone();
        next[arm] += 1;
        Self(next)
    }

    /// Counts after one unit is moved from arm `from` to arm `to`.
    ///
    /// Returns `None` if that would leave `from` with fewer than `floor` units.
    pub fn with_swap(&self, from: usize, to: usize, floor: usize) -> Option<Self> {
        if from == to || self.0[from] <= floor.max(1) {
            return None;
        }
        let mut next = self.0.clone();
        next[from] -= 1;
        next[to] += 1;
        Some(Self(next))
    }
}

impl TryFrom<Vec<usize>> for ArmCounts {
    type Error = Error;
    fn try_from(v: Vec<usize>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<ArmCounts> for Vec<usize> {
    fn from(c: ArmCounts) -> Self {
        c.0
    }
}

impl std::ops::Index<usize> for ArmCounts {
    type Output = usize;
    fn index(&self, i: usize) -> &usize {
        &self.0[i]
    }
}

/// Potential-outcome variances per arm; index 0 is the control arm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ArmVariances(Vec<f64>);

impl ArmVariances {
    pub fn new(v: Vec<f64>) -> Result<Self> {
        if v.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "need a control arm and at least one active arm, got {} variances",
                v.len()
            )));
        }
        if let Some(k) = v.iter().position(|&x| !(x > 0.0 && x.is_finite())) {
            return Err(Error::InvalidInput(format!(
                "variance of arm {k} must be positive and finite, got {}",
                v[k]
            )));
        }
        Ok(Self(v))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn active_arms(&self) -> usize {
        self.0.len() - 1
    }

    pub fn control(&self) -> f64 {
        self.0[0]
    }

    pub fn active(&self) -> &[f64] {
        &self.0[1..]
    }
}

impl TryFrom<Vec<f64>> for ArmVariances {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<ArmVariances> for Vec<f64> {
    fn from(v: ArmVariances) -> Self {
        v.0
    }
}

/// Treatment effects of the `K` active arms relative to control.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct EffectVector(Vec<f64>);

impl EffectVector {
    pub fn new(tau: Vec<f64>) -> Result<Self> {
        if tau.is_empty() {
            return Err(Error::InvalidInput("effect vector is empty".into()));
        }
        if tau.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput(
                "effect vector has non-finite entries".into(),
            ));
        }
        Ok(Self(tau))
    }

    pub fn zeros(k: usize) -> Self {
        Self(vec![0.0; k])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl TryFrom<Vec<f64>> for EffectVector {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<EffectVector> for Vec<f64> {
    fn from(v: EffectVector) -> Self {
        v.0
    }
}

#[derive(Clone, Debug)]
struct TopEigen {
    value: f64,
    vector: Vec<f64>,
}

/// `diag(d) + c * 1 1^T` with `d > 0`, `c >= 0`.
///
/// Immutable; the top eigenpair and the dense inverse are computed on first
/// use and cached.
#[derive(Clone, Debug)]
pub struct StructuredCovariance {
    diag: Vec<f64>,
    off: f64,
    top: OnceLock<TopEigen>,
    inverse: OnceLock<DMatrix<f64>>,
}

impl PartialEq for StructuredCovariance {
    fn eq(&self, other: &Self) -> bool {
        self.diag == other.diag && self.off == other.off
    }
}

impl StructuredCovariance {
    /// Builds the structure directly from its diagonal part and shared
    /// off-diagonal value. `off = 0` gives a diagonal matrix (including the
    /// identity), which no allocation can produce but analytic checks need.
    pub fn from_parts(diag: Vec<f64>, off: f64) -> Result<Self> {
        if diag.is_empty() {
            return Err(Error::InvalidInput(
                "covariance needs at least one arm".into(),
            ));
        }
        if diag.iter().any(|&d| !(d > 0.0 && d.is_finite())) {
            return Err(Error::InvalidInput(
                "diagonal entries must be positive and finite".into(),
            ));
        }
        if !(off >= 0.0 && off.is_finite()) {
            return Err(Error::InvalidInput(
                "shared off-diagonal must be non-negative and finite".into(),
            ));
        }
        Ok(Self {
            diag,
            off,
            top: OnceLock::new(),
            inverse: OnceLock::new(),
        })
    }

    /// Covariance at a possibly fractional allocation (e.g. the unrounded
    /// Neyman allocation).
    pub fn from_allocation(n: &[f64], v: &ArmVariances) -> Result<Self> {
        check_len("allocation vs variances", v.as_slice().len(), n.len())?;
        if n.iter().any(|&x| !(x > 0.0 && x.is_finite())) {
            return Err(Error::InvalidInput(
                "allocation entries must be positive".into(),
            ));
        }
        let vs = v.as_slice();
        let diag = (1..n.len()).map(|k| vs[k] / n[k]).collect();
        Self::from_parts(diag, vs[0] / n[0])
    }

    /// Number of active arms `K`.
    pub fn dim(&self) -> usize {
        self.diag.len()
    }

    /// Diagonal part `V_k / n_k` (without the shared term).
    pub fn diag_part(&self) -> &[f64] {
        &self.diag
    }

    /// Shared off-diagonal value `V_0 / n_0`.
    pub fn off(&self) -> f64 {
        self.off
    }

    /// Full diagonal entries `sigma_k^2 = V_k/n_k + V_0/n_0`.
    pub fn variances(&self) -> Vec<f64> {
        self.diag.iter().map(|d| d + self.off).collect()
    }

    pub fn trace(&self) -> f64 {
        self.diag.iter().sum::<f64>() + self.dim() as f64 * self.off
    }

    /// `tr(Sigma^2)`, the squared Frobenius norm.
    pub fn trace_square(&self) -> f64 {
        let k = self.dim() as f64;
        let c = self.off;
        self.diag.iter().map(|d| (d + c) * (d + c)).sum::<f64>() + k * (k - 1.0) * c * c
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let k = self.dim();
        DMatrix::from_fn(k, k, |i, j| {
            if i == j {
                self.diag[i] + self.off
            } else {
                self.off
            }
        })
    }

    /// `Sigma x`.
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let s: f64 = x.iter().sum();
        self.diag
            .iter()
            .zip(x)
            .map(|(d, xi)| d * xi + self.off * s)
            .collect()
    }

    /// `x^T Sigma x`.
    pub fn quad_form(&self, x: &[f64]) -> f64 {
        let s: f64 = x.iter().sum();
        self.diag
            .iter()
            .zip(x)
            .map(|(d, xi)| d * xi * xi)
            .sum::<f64>()
            + self.off * s * s
    }

    /// `x^T Sigma^{-1} x` by Sherman-Morrison.
    pub fn inv_quad_form(&self, x: &[f64]) -> f64 {
        let mut diag_term = 0.0;
        let mut weighted = 0.0;
        let mut s_inv = 0.0;
        for (d, xi) in self.diag.iter().zip(x) {
            diag_term += xi * xi / d;
            weighted += xi / d;
            s_inv += 1.0 / d;
        }
        diag_term - self.off * weighted * weighted / (1.0 + self.off * s_inv)
    }

    /// Largest eigenvalue.
    pub fn lambda_max(&self) -> f64 {
        self.top_eigen().value
    }

    /// Unit-norm, entrywise non-negative eigenvector of [`Self::lambda_max`].
    pub fn dominant_eigenvector(&self) -> &[f64] {
        &self.top_eigen().vector
    }

    /// Effective dimension `p~ = tr(Sigma) / lambda_max`, in `[1, K]`.
    pub fn effective_dim(&self) -> f64 {
        self.trace() / self.lambda_max()
    }

    /// Upper bound on the 2-norm condition number. The smallest eigenvalue of
    /// a diagonal plus a positive rank-one update is at least `min_k d_k`.
    pub fn condition_bound(&self) -> f64 {
        let dmin = self.diag.iter().copied().fold(f64::INFINITY, f64::min);
        self.lambda_max() / dmin
    }

    /// Dense inverse by Sherman-Morrison, cached.
    pub fn inverse(&self) -> Result<&DMatrix<f64>> {
        let condition = self.condition_bound();
        if !(condition <= MAX_CONDITION) {
            return Err(Error::Singular { condition });
        }
        Ok(self.inverse.get_or_init(|| {
            let k = self.dim();
            let s_inv: f64 = self.diag.iter().map(|d| 1.0 / d).sum();
            let scale = self.off / (1.0 + self.off * s_inv);
            DMatrix::from_fn(k, k, |i, j| {
                let r = scale / (self.diag[i] * self.diag[j]);
                if i == j {
                    1.0 / self.diag[i] - r
                } else {
                    -r
                }
            })
        }))
    }

    /// The three dominance diagnostics for this covariance.
    pub fn dominance_checks(&self) -> DominanceChecks {
        let k = self.dim() as f64;
        let tr = self.trace();
        let lmax = self.lambda_max();
        let sig2 = self.variances();
        let max_s2 = sig2.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum_s4: f64 = sig2.iter().map(|s| s * s).sum();
        DominanceChecks {
            bock: tr > 2.0 * lmax,
            sure_min: 4.0 * lmax < tr,
            dimmery: 0.5 * max_s2 * ((k - 2.0) * max_s2 + 4.0 * lmax) <= sum_s4,
        }
    }

    fn top_eigen(&self) -> &TopEigen {
        self.top.get_or_init(|| {
            if self.off > 0.0 {
                secular_top(&self.diag, self.off)
            } else {
                dense_top(&self.to_dense())
            }
        })
    }
}

/// Largest root of `1 + c * sum_k 1/(d_k - lambda) = 0`.
///
/// Writing `lambda = d_max + g` the root satisfies `c * sum_k 1/(g + d_max - d_k) = 1`
/// with `g in (0, K c]`; the left side is decreasing in `g`, so a bracketed
/// Newton iteration converges from either side. The eigenvector has entries
/// proportional to `1 / (lambda - d_k)`.
fn secular_top(diag: &[f64], c: f64) -> TopEigen {
    let dmax = diag.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let gaps: Vec<f64> = diag.iter().map(|d| dmax - d).collect();
    let f = |g: f64| -> (f64, f64) {
        let mut h = 0.0;
        let mut dh = 0.0;
        for &delta in &gaps {
            let r = 1.0 / (g + delta);
            h += r;
            dh -= r * r;
        }
        (1.0 - c * h, -c * dh)
    };
    let mut lo = 0.0_f64;
    let mut hi = c * diag.len() as f64;
    let mut g = hi;
    for _ in 0..200 {
        let (fg, dfg) = f(g);
        if fg == 0.0 {
            break;
        }
        if fg < 0.0 {
            lo = g;
        } else {
            hi = g;
        }
        let newton = g - fg / dfg;
        let next = if newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        if (next - g).abs() <= 4.0 * f64::EPSILON * (dmax + g) {
            g = next;
            break;
        }
        g = next;
    }
    let mut vector: Vec<f64> = gaps.iter().map(|delta| 1.0 / (g + delta)).collect();
    let norm = vector.iter().map(|x| x * x).sum::<f64>().sqrt();
    vector.iter_mut().for_each(|x| *x /= norm);
    TopEigen {
        value: dmax + g,
        vector,
    }
}

fn dense_top(m: &DMatrix<f64>) -> TopEigen {
    let eig = SymmetricEigen::new(m.clone());
    let idx = eig.eigenvalues.imax();
    let col: DVector<f64> = eig.eigenvectors.column(idx).into_owned();
    let sign = if col.sum() < 0.0 { -1.0 } else { 1.0 };
    TopEigen {
        value: eig.eigenvalues[idx],
        vector: col.iter().map(|x| sign * x).collect(),
    }
}

/// Contrast covariance for integer counts `n` and arm variances `v`.
pub fn build_covariance(n: &ArmCounts, v: &ArmVariances) -> Result<StructuredCovariance> {
    check_len(
        "counts vs variances",
        v.as_slice().len(),
        n.as_slice().len(),
    )?;
    StructuredCovariance::from_allocation(&n.to_f64(), v)
}

/// Largest eigenvalue and its unit-norm non-negative eigenvector.
pub fn spectral(s: &StructuredCovariance) -> (f64, Vec<f64>) {
    (s.lambda_max(), s.dominant_eigenvector().to_vec())
}

/// Dense `Sigma^{-1}`.
pub fn inverse(s: &StructuredCovariance) -> Result<DMatrix<f64>> {
    s.inverse().cloned()
}

/// Sufficient conditions under which each shrinker dominates difference-in-means.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct DominanceChecks {
    /// `tr(Sigma) > 2 lambda_max`.
    pub bock: bool,
    /// `4 lambda_max < tr(Sigma)`.
    pub sure_min: bool,
    /// `(1/2) max s2 ((K-2) max s2 + 4 lambda_max) <= sum s2^2`.
    pub dimmery: bool,
}

pub fn dominance_checks(s: &StructuredCovariance) -> DominanceChecks {
    s.dominance_checks()
}

/// Whether the active-arm standard deviations are spread little enough,
/// relative to the control arm, that the effective dimension at the Neyman
/// allocation grows fastest in the control count.
pub fn bock_alloc_condition(v: &ArmVariances) -> bool {
    let k = v.active_arms() as f64;
    let sds = v.active().iter().map(|x| x.sqrt());
    let (lo, hi) = sds.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), s| {
        (lo.min(s), hi.max(s))
    });
    hi - lo <= 0.5 * (k * v.control()).sqrt()
}
