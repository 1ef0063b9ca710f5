//! Moments of ratios of Gaussian quadratic forms as one-dimensional integrals.
//!
//! For `X ~ N(mu, I_K)` and symmetric positive definite `B` with eigenvalues
//! `b_j`, write `m = Q^T mu` for the mean in the eigenbasis of `B`. Then
//!
//! ```text
//! E[1 / X^T B X]             = int_0^inf det(I + 2tB)^{-1/2} exp(-t sum_j b_j m_j^2 / (1 + 2t b_j)) dt
//! E[X^T A X / (X^T B X)^2]   = int_0^inf t det(I + 2tB)^{-1/2} exp(...) [tr(A M) + m^T M A M m] dt
//! ```
//!
//! with `M = (I + 2tB)^{-1}` and `A` expressed in the same eigenbasis. Both
//! follow from `1/q^p = Gamma(p)^{-1} int t^{p-1} e^{-tq} dt` and the Gaussian
//! moment generating function of `X^T B X`.
//!
//! The half line is mapped onto `w in (0, 1]` through `1 + 2 t s = w^{-2}`,
//! where `s` is the geometric mean of the `b_j`. The integrand becomes
//! `w^{K-3}` times factors that are smooth and bounded on `[0, 1]`, so the
//! polynomial tail of the original integrand turns into a regular endpoint.
//! For `B = I`, `mu = 0` the mapped integrands are polynomials and the
//! 15-point rule is exact.

use crate::error::{check_len, Error, Result};
use crate::quadrature::{integrate_with_breaks, Estimate, QuadratureSettings};
use nalgebra::{DMatrix, SymmetricEigen};

/// Smallest dimension for which both moments are finite.
pub const MIN_DIM: usize = 3;

/// The denominator form `X^T B X`, `X ~ N(mu, I)`, held in the eigenbasis of `B`.
#[derive(Clone, Debug)]
pub enum Denominator {
    /// `B = b I`; only `|mu|^2` matters.
    Isotropic {
        dim: usize,
        value: f64,
        mean_sq: f64,
    },
    /// Eigenvalues of `B` and the mean rotated into its eigenbasis.
    Spectral { values: Vec<f64>, mean: Vec<f64> },
}

/// The numerator matrix `A`, expressed in the eigenbasis of the denominator.
#[derive(Clone, Debug)]
pub enum Numerator {
    /// Only valid with an isotropic denominator: `tr(A)` and `mu^T A mu`.
    Scalar { trace: f64, mean_form: f64 },
    /// `A` is diagonal in the eigenbasis.
    Diagonal(Vec<f64>),
    /// General symmetric `A` in the eigenbasis.
    Dense(DMatrix<f64>),
}

impl Denominator {
    pub fn isotropic(dim: usize, value: f64, mean_sq: f64) -> Result<Self> {
        check_dim(dim)?;
        if !(value > 0.0 && value.is_finite()) {
            return Err(Error::InvalidInput(
                "denominator scale must be positive".into(),
            ));
        }
        if !(mean_sq >= 0.0 && mean_sq.is_finite()) {
            return Err(Error::InvalidInput(
                "squared mean norm must be finite".into(),
            ));
        }
        Ok(Self::Isotropic {
            dim,
            value,
            mean_sq,
        })
    }

    /// From eigenvalues of `B` and the mean already rotated into its eigenbasis.
    pub fn spectral(values: Vec<f64>, mean: Vec<f64>) -> Result<Self> {
        check_dim(values.len())?;
        check_len("mean vs eigenvalues", values.len(), mean.len())?;
        let max = values.iter().copied().fold(0.0, f64::max);
        if values.iter().any(|&b| !(b > 1e-14 * max && b.is_finite())) {
            return Err(Error::InvalidInput(
                "denominator matrix must be positive definite".into(),
            ));
        }
        if mean.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput("mean has non-finite entries".into()));
        }
        Ok(Self::Spectral { values, mean })
    }

    /// Eigendecomposes a dense `B` and returns the denominator together with
    /// the orthogonal eigenbasis `Q` (columns are eigenvectors).
    pub fn from_matrix(b: &DMatrix<f64>, mu: &[f64]) -> Result<(Self, DMatrix<f64>)> {
        check_square("B", b)?;
        check_len("mu vs B", b.nrows(), mu.len())?;
        check_symmetric("B", b)?;
        let eig = SymmetricEigen::new(b.clone());
        let q = eig.eigenvectors;
        let mean = (q.transpose() * nalgebra::DVector::from_column_slice(mu))
            .iter()
            .copied()
            .collect();
        let den = Self::spectral(eig.eigenvalues.iter().copied().collect(), mean)?;
        Ok((den, q))
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Isotropic { dim, .. } => *dim,
            Self::Spectral { values, .. } => values.len(),
        }
    }

    /// `E[1 / X^T B X]`.
    pub fn reciprocal(&self, s: &QuadratureSettings) -> Result<Estimate> {
        s.validate()?;
        let cutoff = (s.abs_tol * 1e-3).ln();
        match self {
            Self::Isotropic {
                dim,
                value,
                mean_sq,
            } => {
                let p = *dim as f64 - 3.0;
                let ln_b = value.ln();
                integrate_with_breaks(
                    |w: f64| {
                        let v = 1.0 - w * w;
                        let log = p * w.ln() - 0.5 * v * mean_sq - ln_b;
                        guarded_exp(log, cutoff)
                    },
                    &breaks(*dim, *mean_sq),
                    s,
                )
            }
            Self::Spectral { values, mean } => {
                let sp = Mapped::new(values, mean);
                integrate_with_breaks(
                    |w: f64| {
                        let log = sp.log_base(w);
                        guarded_exp(log, cutoff)
                    },
                    &breaks(values.len(), sp.rate()),
                    s,
                )
            }
        }
    }

    /// `E[X^T A X / (X^T B X)^2]`.
    pub fn ratio(&self, a: &Numerator, s: &QuadratureSettings) -> Result<Estimate> {
        s.validate()?;
        let cutoff = (s.abs_tol * 1e-3).ln();
        match (self, a) {
            (
                Self::Isotropic {
                    dim,
                    value,
                    mean_sq,
                },
                Numerator::Scalar { trace, mean_form },
            ) => {
                let p = *dim as f64 - 3.0;
                let ln_b = value.ln();
                let half_inv_b = 0.5 / value;
                integrate_with_breaks(
                    |w: f64| {
                        let w2 = w * w;
                        let v = 1.0 - w2;
                        let bracket = half_inv_b * v * (trace + w2 * mean_form);
                        let log = p * w.ln() - 0.5 * v * mean_sq - ln_b;
                        signed_guarded(log, bracket, cutoff)
                    },
                    &breaks(*dim, *mean_sq),
                    s,
                )
            }
            (Self::Spectral { values, mean }, num) => {
                let sp = Mapped::new(values, mean);
                let k = values.len();
                match num {
                    Numerator::Diagonal(d) => check_len("numerator diagonal", k, d.len())?,
                    Numerator::Dense(m) => {
                        check_len("numerator rows", k, m.nrows())?;
                        check_len("numerator cols", k, m.ncols())?;
                    }
                    Numerator::Scalar { .. } => {
                        return Err(Error::InvalidInput(
                            "scalar numerator requires an isotropic denominator".into(),
                        ))
                    }
                }
                integrate_with_breaks(
                    |w: f64| {
                        let log = sp.log_base(w);
                        let bracket = sp.bracket(w, num);
                        signed_guarded(log, bracket, cutoff)
                    },
                    &breaks(values.len(), sp.rate()),
                    s,
                )
            }
            (Self::Isotropic { .. }, _) => Err(Error::InvalidInput(
                "isotropic denominator needs a scalar numerator (trace and mean form)".into(),
            )),
        }
    }
}

/// Mapped-coordinate helpers for a general spectrum: `r_j = b_j / s`,
/// `g_j(w) = w^2 + r_j (1 - w^2)` so that `1 + 2 t b_j = g_j / w^2`.
struct Mapped<'a> {
    ratios: Vec<f64>,
    mean: &'a [f64],
    ln_scale: f64,
    half_inv_scale: f64,
    power: f64,
}

impl<'a> Mapped<'a> {
    fn new(values: &[f64], mean: &'a [f64]) -> Self {
        let k = values.len() as f64;
        let ln_scale = values.iter().map(|b| b.ln()).sum::<f64>() / k;
        let scale = ln_scale.exp();
        Self {
            ratios: values.iter().map(|b| b / scale).collect(),
            mean,
            ln_scale,
            half_inv_scale: 0.5 / scale,
            power: k - 3.0,
        }
    }

    /// Decay rate of the exponential factor at `w = 1`.
    fn rate(&self) -> f64 {
        self.ratios
            .iter()
            .zip(self.mean)
            .map(|(r, m)| r * m * m)
            .sum()
    }

    #[inline]
    fn log_base(&self, w: f64) -> f64 {
        let w2 = w * w;
        let v = 1.0 - w2;
        let mut log_det = 0.0;
        let mut expo = 0.0;
        for (r, m) in self.ratios.iter().zip(self.mean) {
            let g = w2 + r * v;
            log_det += g.ln();
            expo += r * m * m / g;
        }
        self.power * w.ln() - 0.5 * log_det - 0.5 * v * expo - self.ln_scale
    }

    /// `t [tr(A M) + m^T M A M m]` in mapped coordinates.
    #[inline]
    fn bracket(&self, w: f64, num: &Numerator) -> f64 {
        let w2 = w * w;
        let v = 1.0 - w2;
        let k = self.ratios.len();
        let g: Vec<f64> = self.ratios.iter().map(|r| w2 + r * v).collect();
        let inner = match num {
            Numerator::Diagonal(d) => {
                let mut tr = 0.0;
                let mut form = 0.0;
                for j in 0..k {
                    let inv = 1.0 / g[j];
                    tr += d[j] * inv;
                    let y = self.mean[j] * inv;
                    form += d[j] * y * y;
                }
                tr + w2 * form
            }
            Numerator::Dense(a) => {
                let y: Vec<f64> = (0..k).map(|j| self.mean[j] / g[j]).collect();
                let mut tr = 0.0;
                let mut form = 0.0;
                for j in 0..k {
                    tr += a[(j, j)] / g[j];
                    let mut row = 0.0;
                    for i in 0..k {
                        row += a[(i, j)] * y[i];
                    }
                    form += row * y[j];
                }
                tr + w2 * form
            }
            Numerator::Scalar { .. } => unreachable!("rejected before integration"),
        };
        self.half_inv_scale * v * inner
    }
}

/// Initial panels graded toward `w = 1`, where mass concentrates when the
/// noncentrality or the dimension is large (width about `1 / (rate + K)`).
fn breaks(dim: usize, rate: f64) -> Vec<f64> {
    let scale = rate + dim as f64;
    let mut pts = vec![1.0];
    let mut gap = 1.0 / scale;
    while gap < 0.5 {
        pts.push(1.0 - gap);
        gap *= 4.0;
    }
    pts.push(0.5);
    pts.push(0.0);
    pts.reverse();
    pts
}

#[inline]
fn guarded_exp(log: f64, cutoff: f64) -> f64 {
    if log < cutoff {
        0.0
    } else {
        log.exp()
    }
}

#[inline]
fn signed_guarded(log: f64, factor: f64, cutoff: f64) -> f64 {
    if factor == 0.0 {
        return 0.0;
    }
    let total = log + factor.abs().ln();
    if total < cutoff {
        0.0
    } else {
        factor.signum() * total.exp()
    }
}

fn check_dim(k: usize) -> Result<()> {
    if k < MIN_DIM {
        return Err(Error::TooFewArms {
            what: "quadratic-form moment",
            min: MIN_DIM,
            k,
        });
    }
    Ok(())
}

fn check_square(name: &'static str, m: &DMatrix<f64>) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(Error::DimensionMismatch {
            what: name,
            expected: m.nrows(),
            got: m.ncols(),
        });
    }
    Ok(())
}

fn check_symmetric(name: &str, m: &DMatrix<f64>) -> Result<()> {
    let asym = (m - m.transpose()).amax();
    if asym > 1e-12 * m.amax().max(f64::MIN_POSITIVE) {
        return Err(Error::InvalidInput(format!(
            "{name} must be symmetric (max asymmetry {asym:.3e}); symmetrize as (M + M^T)/2"
        )));
    }
    Ok(())
}

/// `E[1 / X^T B X]` for `X ~ N(mu, I)`.
pub fn reciprocal_moment(b: &DMatrix<f64>, mu: &[f64], s: &QuadratureSettings) -> Result<f64> {
    check_square("B", b)?;
    check_dim(b.nrows())?;
    let (den, _) = Denominator::from_matrix(b, mu)?;
    Ok(den.reciprocal(s)?.value)
}

/// `E[X^T A X / (X^T B X)^2]` for `X ~ N(mu, I)`.
pub fn ratio_moment(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    mu: &[f64],
    s: &QuadratureSettings,
) -> Result<f64> {
    check_square("B", b)?;
    check_dim(b.nrows())?;
    check_square("A", a)?;
    check_len("A vs B", b.nrows(), a.nrows())?;
    check_symmetric("A", a)?;
    let (den, q) = Denominator::from_matrix(b, mu)?;
    let rotated = q.transpose() * a * &q;
    Ok(den.ratio(&Numerator::Dense(rotated), s)?.value)
}

/// A moment request: `E[(X^T A X) / (X^T B X)^power]`, with `A` absent (taken
/// as 1) for the pure reciprocal.
#[derive(Clone, Debug)]
pub struct QuadFormMoment {
    pub numerator: Option<DMatrix<f64>>,
    pub denominator: DMatrix<f64>,
    pub mean: Vec<f64>,
    pub power: u8,
}

impl QuadFormMoment {
    pub fn evaluate(&self, s: &QuadratureSettings) -> Result<f64> {
        match (&self.numerator, self.power) {
            (None, 1) => reciprocal_moment(&self.denominator, &self.mean, s),
            (Some(a), 2) => ratio_moment(a, &self.denominator, &self.mean, s),
            _ => Err(Error::InvalidInput(
                "supported moments: reciprocal (no numerator, power 1) or ratio (numerator, power 2)"
                    .into(),
            )),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn settings() -> QuadratureSettings {
        QuadratureSettings::default()
    }

    /// Monte Carlo mean and standard error of `h(X)`, `X ~ N(mu, I)`.
    fn monte_carlo<H: Fn(&DVector<f64>) -> f64>(
        mu: &[f64],
        draws: usize,
        seed: u64,
        h: H,
    ) -> (f64, f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = mu.len();
        let mut x = DVector::zeros(k);
        let (mut sum, mut sum_sq) = (0.0, 0.0);
        for _ in 0..draws {
            for j in 0..k {
                let z: f64 = rng.sample(StandardNormal);
                x[j] = mu[j] + z;
            }
            let v = h(&x);
            sum += v;
            sum_sq += v * v;
        }
        let n = draws as f64;
        let mean = sum / n;
        let var = (sum_sq / n - mean * mean) * n / (n - 1.0);
        (mean, (var / n).sqrt())
    }

    fn random_spd(rng: &mut ChaCha8Rng, k: usize) -> DMatrix<f64> {
        let g = DMatrix::from_fn(k, k, |_, _| rng.random_range(-1.0..1.0));
        &g * g.transpose() + DMatrix::identity(k, k) * 0.5
    }

    fn random_sym(rng: &mut ChaCha8Rng, k: usize) -> DMatrix<f64> {
        let g = DMatrix::from_fn(k, k, |_, _| rng.random_range(-1.0..1.0));
        (&g + g.transpose()) * 0.5
    }

    #[test]
    fn inverse_chi_square_family() {
        for k in 3..=16 {
            let i = DMatrix::identity(k, k);
            let mu = vec![0.0; k];
            let exact = 1.0 / (k as f64 - 2.0);
            let r = reciprocal_moment(&i, &mu, &settings()).unwrap();
            assert!((r - exact).abs() < 1e-12, "K={k}: {r}");
            let q = ratio_moment(&i, &i, &mu, &settings()).unwrap();
            assert!((q - exact).abs() < 1e-12, "K={k}: {q}");
        }
        let r = reciprocal_moment(&DMatrix::identity(6, 6), &[0.0; 6], &settings()).unwrap();
        assert!((r - 0.25).abs() < 1e-12);
        let r = reciprocal_moment(&DMatrix::identity(12, 12), &[0.0; 12], &settings()).unwrap();
        assert!((r - 0.1).abs() < 1e-12);
    }

    #[test]
    fn isotropic_and_spectral_paths_agree() {
        let k = 7;
        let mu = [0.3, -0.2, 1.0, 0.0, 0.5, 0.1, -0.7];
        let mean_sq: f64 = mu.iter().map(|x| x * x).sum();
        let iso = Denominator::isotropic(k, 1.0, mean_sq).unwrap();
        let spec = Denominator::spectral(vec![1.0; k], mu.to_vec()).unwrap();
        let a = iso.reciprocal(&settings()).unwrap().value;
        let b = spec.reciprocal(&settings()).unwrap().value;
        assert!((a - b).abs() < 1e-12);
        let d = vec![0.5, 1.0, 2.0, 0.1, 0.3, 0.9, 1.5];
        let trace: f64 = d.iter().sum();
        let mean_form: f64 = d.iter().zip(&mu).map(|(a, m)| a * m * m).sum();
        let a = iso
            .ratio(&Numerator::Scalar { trace, mean_form }, &settings())
            .unwrap()
            .value;
        let b = spec
            .ratio(&Numerator::Diagonal(d.clone()), &settings())
            .unwrap()
            .value;
        let c = spec
            .ratio(
                &Numerator::Dense(DMatrix::from_diagonal(&DVector::from_vec(d))),
                &settings(),
            )
            .unwrap()
            .value;
        assert!((a - b).abs() < 1e-12);
        assert!((a - c).abs() < 1e-12);
    }

    #[test]
    fn identity_numerator_collapses_to_reciprocal() {
        let i = DMatrix::identity(6, 6);
        let r = ratio_moment(&i, &i, &[0.0; 6], &settings()).unwrap();
        assert!((r - 0.25).abs() < 1e-12);
    }

    #[test]
    fn ratio_with_sigma_numerator_at_zero_mean() {
        // E[X^T S X / |X|^4] = tr(S) / (K (K-2)) for X ~ N(0, I).
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let k = 6;
        let s = random_spd(&mut rng, k);
        let r = ratio_moment(&s, &DMatrix::identity(k, k), &[0.0; 6], &settings()).unwrap();
        let exact = s.trace() / (k as f64 * (k as f64 - 2.0));
        assert!((r - exact).abs() < 1e-12 * exact.max(1.0));
    }

    #[test]
    fn reciprocal_against_monte_carlo() {
        let k = 6;
        let mu = vec![3.0_f64.sqrt(), 0.0, 0.0, 0.0, 0.0, 0.0];
        let exact = reciprocal_moment(&DMatrix::identity(k, k), &mu, &settings()).unwrap();
        let (mean, se) = monte_carlo(&mu, 2_000_000, 21, |x| 1.0 / x.norm_squared());
        assert!((mean - exact).abs() < 3.0 * se, "{mean} +- {se} vs {exact}");
    }

    #[test]
    fn general_b_against_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let k = 6;
        let a = random_sym(&mut rng, k);
        let b = random_spd(&mut rng, k);
        let mut mu: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let norm = mu.iter().map(|x| x * x).sum::<f64>().sqrt();
        mu.iter_mut().for_each(|x| *x *= 2.0_f64.sqrt() / norm);
        let exact_r = reciprocal_moment(&b, &mu, &settings()).unwrap();
        let exact_q = ratio_moment(&a, &b, &mu, &settings()).unwrap();
        let (mr, ser) = monte_carlo(&mu, 2_000_000, 99, |x| {
            1.0 / (x.transpose() * &b * x)[(0, 0)]
        });
        assert!(
            (mr - exact_r).abs() < 3.0 * ser,
            "{mr} +- {ser} vs {exact_r}"
        );
        let (mq, seq) = monte_carlo(&mu, 2_000_000, 100, |x| {
            let q = (x.transpose() * &b * x)[(0, 0)];
            (x.transpose() * &a * x)[(0, 0)] / (q * q)
        });
        assert!(
            (mq - exact_q).abs() < 3.0 * seq,
            "{mq} +- {seq} vs {exact_q}"
        );
    }

    #[test]
    fn scale_covariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let k = 5;
        let a = random_sym(&mut rng, k);
        let b = random_spd(&mut rng, k);
        let mu = [0.4, -0.1, 0.2, 0.9, 0.0];
        let base = ratio_moment(&a, &b, &mu, &settings()).unwrap();
        let scaled = ratio_moment(&(&a * 3.5), &b, &mu, &settings()).unwrap();
        assert!((scaled - 3.5 * base).abs() < 1e-9 * base.abs().max(1.0));
        let zero = [0.0; 5];
        let r1 = reciprocal_moment(&b, &zero, &settings()).unwrap();
        let r2 = reciprocal_moment(&(&b * 4.0), &zero, &settings()).unwrap();
        assert!((r2 - r1 / 4.0).abs() < 1e-9 * r1);
    }

    #[test]
    fn reciprocal_decreases_in_noncentrality() {
        let k = 6;
        let i = DMatrix::identity(k, k);
        let mut prev = f64::INFINITY;
        for nc in [0.0, 0.5, 2.0, 8.0, 30.0] {
            let mut mu = vec![0.0; k];
            mu[0] = f64::sqrt(nc);
            let r = reciprocal_moment(&i, &mu, &settings()).unwrap();
            assert!(r < prev, "{r} !< {prev}");
            prev = r;
        }
    }

    #[test]
    fn tighter_tolerance_stays_within_error_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let k = 8;
        let b = random_spd(&mut rng, k);
        let mu: Vec<f64> = (0..k).map(|_| rng.random_range(-3.0..3.0)).collect();
        let (den, _) = Denominator::from_matrix(&b, &mu).unwrap();
        let loose = QuadratureSettings {
            abs_tol: 1e-6,
            rel_tol: 1e-6,
            max_panels: 2048,
        };
        let coarse = den.reciprocal(&loose).unwrap();
        let fine = den.reciprocal(&loose.tightened(2.0)).unwrap();
        assert!((coarse.value - fine.value).abs() <= coarse.error);
    }

    #[test]
    fn large_noncentrality_converges() {
        let k = 4;
        let den = Denominator::isotropic(k, 1.0, 1e4).unwrap();
        let r = den.reciprocal(&settings()).unwrap().value;
        // E[1/chi'^2] ~ 1/(K - 2 + lambda) for large noncentrality.
        assert!((r * (1e4 + 2.0) - 1.0).abs() < 1e-3, "{r}");
    }

    #[test]
    fn rejects_small_dimension_and_asymmetry() {
        let i = DMatrix::identity(2, 2);
        assert!(matches!(
            reciprocal_moment(&i, &[0.0, 0.0], &settings()),
            Err(Error::TooFewArms { .. })
        ));
        let mut a = DMatrix::identity(3, 3);
        a[(0, 1)] = 1.0;
        assert!(ratio_moment(&a, &DMatrix::identity(3, 3), &[0.0; 3], &settings()).is_err());
        let moment = QuadFormMoment {
            numerator: None,
            denominator: DMatrix::identity(3, 3),
            mean: vec![0.0; 3],
            power: 2,
        };
        assert!(moment.evaluate(&settings()).is_err());
    }
}
