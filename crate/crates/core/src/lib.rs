//! Shrinkage estimation of multiple treatment effects against a shared
//! control, and experimental designs that minimize the risk of the
//! shrinkage estimator instead of the variance of difference-in-means.
//!
//! The contrast estimator `tau_hat_k = Ybar_k - Ybar_0` has covariance
//! `Sigma = diag(V_k / n_k) + (V_0 / n_0) 11ᵀ`. The crate provides:
//!
//! - [`covmodel`]: that covariance with closed-form spectral quantities.
//! - [`estimators`]: the Bock, SURE-minimizing and Dimmery shrinkers and
//!   their unbiased risk estimates.
//! - [`quadform`] and [`risk`]: exact risk through one-dimensional integral
//!   representations of Gaussian quadratic-form ratio moments, plus a
//!   Monte Carlo reference.
//! - [`design`]: Neyman allocation and greedy risk-minimizing allocations.
//! - [`trial`]: a sequential engine that assigns each arrival to the arm
//!   that most lowers the estimated risk.
//! - [`simkit`]: the data-generating process and simulation harness.
//!
//! ```
//! use adashrink::{risk_exact, ArmCounts, ArmVariances, EffectVector, EstimatorKind, QuadratureSettings, RiskQuery};
//!
//! let q = RiskQuery::new(
//!     EstimatorKind::Bock,
//!     ArmCounts::new(vec![100, 20, 20, 20, 20])?,
//!     ArmVariances::new(vec![1.0; 5])?,
//!     EffectVector::zeros(4),
//! )?;
//! let shrunk = risk_exact(&q, &QuadratureSettings::default())?;
//! let unshrunk = q.covariance()?.trace();
//! assert!(shrunk < unshrunk);
//! # Ok::<(), adashrink::Error>(())
//! ```

pub mod covmodel;
pub mod design;
pub mod error;
pub mod estimators;
pub mod quadform;
pub mod quadrature;
pub mod risk;
pub mod simkit;
pub mod trial;

pub use covmodel::{ArmCounts, ArmVariances, DominanceChecks, EffectVector, StructuredCovariance};
pub use design::{
    greedy_minimize, neyman_allocation, round_allocation, DesignProblem, GreedyResult, StartPoint,
};
pub use error::{Error, Result};
pub use estimators::{ContrastEstimate, EstimatorKind};
pub use quadrature::QuadratureSettings;
pub use risk::{risk_exact, risk_mc, RiskQuery};
pub use trial::{Event, TargetKind, TrialConfig, TrialState};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../README.md")]
    pub struct Readme;
    #[doc = include_str!("../../../book/src/covariance.md")]
    pub struct Covariance;
    #[doc = include_str!("../../../book/src/estimators.md")]
    pub struct Estimators;
    #[doc = include_str!("../../../book/src/risk.md")]
    pub struct Risk;
    #[doc = include_str!("../../../book/src/design.md")]
    pub struct Design;
    #[doc = include_str!("../../../book/src/trials.md")]
    pub struct Trials;
    #[doc = include_str!("../../../book/src/simulation.md")]
    pub struct Simulation;
}
