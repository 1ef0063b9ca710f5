//! Simulation harness: data-generating process, adaptive-trial iterations
//! with compound-MSE trajectories, and oracle design tables.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{LogNormal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covmodel::{ArmVariances, EffectVector, StructuredCovariance};
use crate::design::{
    greedy_minimize, neyman_allocation, round_allocation, DesignProblem, StartPoint,
};
use crate::error::{Error, Result};
use crate::estimators::{factors, EstimatorKind, ShrinkOptions};
use crate::quadrature::QuadratureSettings;
use crate::trial::{BurnInMode, TargetKind, TrialConfig, TrialState};

/// Unit (1-based) at which the single-unit metric is read.
pub const METRIC_UNIT: usize = 1000;

/// Median of the active-arm variance distribution.
pub const VARIANCE_LOCATION: f64 = 350.0;
/// Log-scale standard deviation of the active-arm variances.
pub const VARIANCE_LOG_SD: f64 = 0.6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum V0Regime {
    /// `V_0` is half the mean active-arm variance.
    Low,
    /// `V_0` is four times the mean active-arm variance.
    High,
}

impl V0Regime {
    pub fn multiplier(self) -> f64 {
        match self {
            Self::Low => 0.5,
            Self::High => 4.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum TauShape {
    /// Unscaled effects i.i.d. uniform on `[1, 2]`.
    Dense,
    /// Only the first (lowest-variance) arm has an effect.
    Sparse,
    Zero,
}

macro_rules! lower_enum_text {
    ($t:ty { $($v:ident => $s:literal),* }) => {
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $(Self::$v => $s),* })
            }
        }
        impl FromStr for $t {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s.to_ascii_lowercase().as_str() {
                    $($s => Ok(Self::$v),)*
                    _ => Err(Error::InvalidInput(format!("unknown {} '{s}'", stringify!($t)))),
                }
            }
        }
    };
}

lower_enum_text!(V0Regime { Low => "low", High => "high" });
lower_enum_text!(TauShape { Dense => "dense", Sparse => "sparse", Zero => "zero" });

/// One grid point of the data-generating process.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Regime {
    #[serde(rename = "K")]
    pub k: usize,
    pub v0_regime: V0Regime,
    pub tau_shape: TauShape,
    pub kappa: f64,
}

impl Regime {
    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(Error::InvalidInput("K must be at least 1".into()));
        }
        if !(self.kappa >= 0.0 && self.kappa.is_finite()) {
            return Err(Error::InvalidInput(
                "kappa must be finite and non-negative".into(),
            ));
        }
        if (self.kappa == 0.0) != (self.tau_shape == TauShape::Zero) {
            return Err(Error::InvalidInput(
                "kappa = 0 requires tauShape = zero, and kappa > 0 requires dense or sparse".into(),
            ));
        }
        Ok(())
    }
}

/// Draws arm variances and effects. Variances are drawn first, so for a
/// fixed generator state they do not depend on the shape or `kappa`.
pub fn draw_dgp<R: Rng>(
    r: &Regime,
    budget: usize,
    rng: &mut R,
) -> Result<(ArmVariances, EffectVector)> {
    r.validate()?;
    let dist = LogNormal::new(VARIANCE_LOCATION.ln(), VARIANCE_LOG_SD)
        .map_err(|e| Error::InvalidInput(e.to_string()))?;
    let mut active: Vec<f64> = (0..r.k).map(|_| rng.sample(dist)).collect();
    active.sort_by(f64::total_cmp);
    let mean = active.iter().sum::<f64>() / r.k as f64;
    let mut v = Vec::with_capacity(r.k + 1);
    v.push(r.v0_regime.multiplier() * mean);
    v.extend(active);
    let v = ArmVariances::new(v)?;
    let raw: Vec<f64> = match r.tau_shape {
        TauShape::Zero => return Ok((v, EffectVector::zeros(r.k))),
        TauShape::Dense => (0..r.k).map(|_| rng.random_range(1.0..=2.0)).collect(),
        TauShape::Sparse => (0..r.k).map(|j| if j == 0 { 1.0 } else { 0.0 }).collect(),
    };
    let sigma = StructuredCovariance::from_allocation(&neyman_allocation(budget as f64, &v), &v)?;
    let scale = (r.kappa / sigma.inv_quad_form(&raw)).sqrt();
    Ok((
        v,
        EffectVector::new(raw.iter().map(|t| scale * t).collect())?,
    ))
}

/// A labelled assignment rule in a simulation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct AllocatorSpec {
    pub label: String,
    pub target: TargetKind,
    #[serde(default)]
    pub burn_in: BurnInMode,
}

impl AllocatorSpec {
    pub fn new(target: TargetKind) -> Self {
        Self {
            label: target.as_str().to_string(),
            target,
            burn_in: BurnInMode::RoundRobin,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SimConfig {
    #[serde(flatten)]
    pub regime: Regime,
    #[serde(rename = "N", default = "default_n")]
    pub n: usize,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub mu0: f64,
    #[serde(default = "default_allocators")]
    pub allocators: Vec<AllocatorSpec>,
    #[serde(default = "default_scored")]
    pub estimators_to_score: Vec<EstimatorKind>,
    #[serde(default = "default_burn_in")]
    pub burn_in_per_arm: usize,
    /// Also score the positive-part version of each scored shrinker.
    #[serde(default)]
    pub positive_part_variants: bool,
    #[serde(default)]
    pub quadrature: QuadratureSettings,
}

fn default_n() -> usize {
    2000
}
fn default_iterations() -> usize {
    200
}
fn default_burn_in() -> usize {
    10
}
fn default_allocators() -> Vec<AllocatorSpec> {
    [
        TargetKind::CompleteRandomization,
        TargetKind::Neyman,
        TargetKind::Bock,
        TargetKind::SureMin,
        TargetKind::Dimmery,
    ]
    .into_iter()
    .map(AllocatorSpec::new)
    .collect()
}
fn default_scored() -> Vec<EstimatorKind> {
    EstimatorKind::ALL.to_vec()
}

impl SimConfig {
    pub fn new(regime: Regime) -> Self {
        Self {
            regime,
            n: default_n(),
            iterations: default_iterations(),
            seed: 0,
            mu0: 0.0,
            allocators: default_allocators(),
            estimators_to_score: default_scored(),
            burn_in_per_arm: default_burn_in(),
            positive_part_variants: false,
            quadrature: QuadratureSettings::default(),
        }
    }

    /// Scored estimators as `(kind, positive_part)`: every configured kind
    /// in raw form, then the positive-part shrinkers when enabled.
    pub fn scorers(&self) -> Vec<(EstimatorKind, bool)> {
        let mut out: Vec<_> = self
            .estimators_to_score
            .iter()
            .map(|&k| (k, false))
            .collect();
        if self.positive_part_variants {
            out.extend(
                self.estimators_to_score
                    .iter()
                    .filter(|k| k.is_shrinker())
                    .map(|&k| (k, true)),
            );
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.regime.validate()?;
        if self.iterations == 0 {
            return Err(Error::InvalidInput("iterations must be at least 1".into()));
        }
        if self.allocators.is_empty() || self.estimators_to_score.is_empty() {
            return Err(Error::InvalidInput(
                "need at least one allocator and one estimator".into(),
            ));
        }
        for (i, a) in self.allocators.iter().enumerate() {
            if self.allocators[..i].iter().any(|b| b.label == a.label) {
                return Err(Error::InvalidInput(format!(
                    "duplicate allocator label '{}'",
                    a.label
                )));
            }
            self.trial_config(a).validate()?;
        }
        for e in &self.estimators_to_score {
            e.check_dim(self.regime.k)?;
        }
        Ok(())
    }

    pub fn trial_config(&self, a: &AllocatorSpec) -> TrialConfig {
        TrialConfig {
            k: self.regime.k,
            target: a.target,
            burn_in_per_arm: self.burn_in_per_arm,
            planned_n: Some(self.n),
            variance_floor: 1e-8,
            quadrature: self.quadrature,
            burn_in: a.burn_in,
        }
    }

    fn dgp_rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(0);
        rng
    }

    fn iteration_rng(&self, iteration: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(1 + iteration as u64);
        rng
    }
}

/// One allocator's run within an iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct AllocatorRun {
    pub label: String,
    pub assignments: Vec<usize>,
    pub final_counts: Vec<usize>,
    /// Compound MSE after each unit, per scorer in [`SimConfig::scorers`]
    /// order. NaN until every arm has two observations.
    pub mse: Vec<Vec<f64>>,
}

/// Runs every allocator on one shared draw of potential outcomes.
pub fn run_iteration<R: Rng>(
    config: &SimConfig,
    v: &ArmVariances,
    tau: &EffectVector,
    rng: &mut R,
) -> Result<Vec<AllocatorRun>> {
    let arms = config.regime.k + 1;
    let sd: Vec<f64> = v.as_slice().iter().map(|x| x.sqrt()).collect();
    let mu: Vec<f64> = std::iter::once(config.mu0)
        .chain(tau.as_slice().iter().map(|t| config.mu0 + t))
        .collect();
    let outcomes: Vec<f64> = (0..config.n * arms)
        .map(|idx| {
            let k = idx % arms;
            mu[k] + sd[k] * rng.sample::<f64, _>(StandardNormal)
        })
        .collect();
    config
        .allocators
        .iter()
        .map(|a| {
            let mut state = TrialState::new(config.trial_config(a))?;
            let mut assignments = Vec::with_capacity(config.n);
            let scorers = config.scorers();
            let mut mse = vec![Vec::with_capacity(config.n); scorers.len()];
            for i in 0..config.n {
                let arm = state.next_assignment()?;
                state.record_outcome(arm, outcomes[i * arms + arm], false)?;
                assignments.push(arm);
                let sigma = state.sigma().ok();
                let tau_hat = state.tau_hat();
                for (&(kind, positive_part), path) in scorers.iter().zip(mse.iter_mut()) {
                    path.push(match &sigma {
                        Some(s) => compound_mse(
                            kind,
                            ShrinkOptions { positive_part },
                            s,
                            &tau_hat,
                            tau.as_slice(),
                        ),
                        None => f64::NAN,
                    });
                }
            }
            Ok(AllocatorRun {
                label: a.label.clone(),
                final_counts: state.counts(),
                assignments,
                mse,
            })
        })
        .collect()
}

/// `sum_k (delta_k - tau_k)^2`; an undefined shrinker (zero contrast) falls
/// back to `tau_hat`.
pub fn compound_mse(
    kind: EstimatorKind,
    opts: ShrinkOptions,
    sigma: &StructuredCovariance,
    tau_hat: &[f64],
    tau: &[f64],
) -> f64 {
    let mut f = factors(kind, sigma, tau_hat).unwrap_or_else(|_| vec![1.0; tau_hat.len()]);
    if opts.positive_part {
        f.iter_mut().for_each(|x| *x = x.max(0.0));
    }
    tau_hat
        .iter()
        .zip(&f)
        .zip(tau)
        .map(|((x, f), t)| (f * x - t).powi(2))
        .sum()
}

/// Mean and standard error across iterations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanSe {
    pub mean: f64,
    pub se: f64,
}

impl MeanSe {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let se = if xs.len() > 1 {
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt()
        } else {
            f64::NAN
        };
        Self { mean, se }
    }
}

/// Mean compound-MSE trajectory for one (allocator, estimator) pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Series {
    pub allocator: String,
    pub estimator: EstimatorKind,
    #[serde(default)]
    pub positive_part: bool,
    /// Entry `i` is the mean after unit `i + 1`.
    pub trajectory: Vec<f64>,
    /// Mean MSE right after unit 1000 (absent when `N < 1000`).
    pub mse_at_1000: Option<MeanSe>,
    /// Mean over units `1000..=N` of the MSE, averaged across iterations.
    pub mean_mse_from_1000: Option<MeanSe>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TrajectoryResult {
    pub config: SimConfig,
    #[serde(rename = "V")]
    pub v: ArmVariances,
    pub tau: EffectVector,
    pub series: Vec<Series>,
    /// Mean final arm shares per allocator label.
    pub final_shares: Vec<(String, Vec<f64>)>,
}

impl TrajectoryResult {
    /// The raw-estimator series.
    pub fn series(&self, allocator: &str, estimator: EstimatorKind) -> Option<&Series> {
        self.find(allocator, estimator, false)
    }

    pub fn positive_part_series(
        &self,
        allocator: &str,
        estimator: EstimatorKind,
    ) -> Option<&Series> {
        self.find(allocator, estimator, true)
    }

    fn find(
        &self,
        allocator: &str,
        estimator: EstimatorKind,
        positive_part: bool,
    ) -> Option<&Series> {
        self.series.iter().find(|s| {
            s.allocator == allocator && s.estimator == estimator && s.positive_part == positive_part
        })
    }
}

/// Runs all iterations and averages the trajectories. Iterations run in
/// parallel; accumulation is in iteration order, so the result does not
/// depend on the schedule.
pub fn run_experiment(config: &SimConfig) -> Result<TrajectoryResult> {
    config.validate()?;
    let (v, tau) = draw_dgp(&config.regime, config.n, &mut config.dgp_rng())?;
    let n_alloc = config.allocators.len();
    let scorers = config.scorers();
    let n_est = scorers.len();
    let mut sums = vec![vec![vec![0.0; config.n]; n_est]; n_alloc];
    let mut at_unit = vec![vec![Vec::with_capacity(config.iterations); n_est]; n_alloc];
    let mut from_unit = vec![vec![Vec::with_capacity(config.iterations); n_est]; n_alloc];
    let mut shares = vec![vec![0.0; config.regime.k + 1]; n_alloc];
    let batch = 4 * rayon::current_num_threads().max(1);
    let mut start = 0;
    while start < config.iterations {
        let end = (start + batch).min(config.iterations);
        let runs: Vec<Result<Vec<AllocatorRun>>> = (start..end)
            .into_par_iter()
            .map(|it| run_iteration(config, &v, &tau, &mut config.iteration_rng(it)))
            .collect();
        for run in runs {
            for (a, r) in run?.into_iter().enumerate() {
                for (e, path) in r.mse.iter().enumerate() {
                    for (acc, x) in sums[a][e].iter_mut().zip(path) {
                        *acc += x;
                    }
                    if config.n >= METRIC_UNIT {
                        at_unit[a][e].push(path[METRIC_UNIT - 1]);
                        let tail = &path[METRIC_UNIT - 1..];
                        from_unit[a][e].push(tail.iter().sum::<f64>() / tail.len() as f64);
                    }
                }
                for (s, c) in shares[a].iter_mut().zip(&r.final_counts) {
                    *s += *c as f64 / config.n as f64;
                }
            }
        }
        start = end;
    }
    let iters = config.iterations as f64;
    let mut series = Vec::with_capacity(n_alloc * n_est);
    for (a, spec) in config.allocators.iter().enumerate() {
        for (e, &(kind, positive_part)) in scorers.iter().enumerate() {
            let have = config.n >= METRIC_UNIT;
            series.push(Series {
                allocator: spec.label.clone(),
                estimator: kind,
                positive_part,
                trajectory: sums[a][e].iter().map(|s| s / iters).collect(),
                mse_at_1000: have.then(|| MeanSe::of(&at_unit[a][e])),
                mean_mse_from_1000: have.then(|| MeanSe::of(&from_unit[a][e])),
            });
        }
    }
    let final_shares = config
        .allocators
        .iter()
        .zip(shares)
        .map(|(a, s)| (a.label.clone(), s.iter().map(|x| x / iters).collect()))
        .collect();
    Ok(TrajectoryResult {
        config: config.clone(),
        v,
        tau,
        series,
        final_shares,
    })
}

/// Oracle-design comparison for one grid point, averaged over DGP draws.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct OracleTable {
    pub regime: Regime,
    #[serde(rename = "N")]
    pub n: usize,
    pub draws: usize,
    /// Mean continuous Neyman control share `n_0* / N`.
    pub neyman_share0: f64,
    pub rows: Vec<OracleRow>,
    pub per_draw: Vec<OracleDraw>,
}

/// Across-draw mean share changes of the greedy optimum relative to the
/// rounded Neyman allocation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct OracleRow {
    pub kind: EstimatorKind,
    pub delta_n0: f64,
    pub delta_n1: f64,
    pub delta_nk: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct OracleDraw {
    pub draw: usize,
    #[serde(rename = "V")]
    pub v: ArmVariances,
    pub tau: EffectVector,
    pub neyman: Vec<usize>,
    /// Greedy allocation for each kind, in `rows` order.
    pub allocations: Vec<(EstimatorKind, Vec<usize>)>,
}

impl OracleTable {
    pub fn row(&self, kind: EstimatorKind) -> Option<&OracleRow> {
        self.rows.iter().find(|r| r.kind == kind)
    }

    /// Share of draws in which `kind` moved units toward the control arm
    /// (`Δn_0 >= 0`).
    pub fn control_gain_frequency(&self, kind: EstimatorKind) -> f64 {
        let hits = self
            .per_draw
            .iter()
            .filter(|d| {
                d.allocations
                    .iter()
                    .find(|(k, _)| *k == kind)
                    .is_some_and(|(_, a)| a[0] >= d.neyman[0])
            })
            .count();
        hits as f64 / self.per_draw.len() as f64
    }
}

/// Runs the greedy optimizer for each kind on `draws` independent DGP draws.
/// Draw `d` uses generator stream `d` of `seed`, so cells that differ only in
/// shape or `kappa` share their variance draws.
pub fn oracle_table(
    regime: &Regime,
    budget: usize,
    draws: usize,
    seed: u64,
    kinds: &[EstimatorKind],
    settings: &QuadratureSettings,
) -> Result<OracleTable> {
    regime.validate()?;
    if draws == 0 {
        return Err(Error::InvalidInput("draws must be at least 1".into()));
    }
    let per_draw: Vec<Result<(f64, OracleDraw)>> = (0..draws)
        .into_par_iter()
        .map(|d| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(d as u64);
            let (v, tau) = draw_dgp(regime, budget, &mut rng)?;
            let cont = neyman_allocation(budget as f64, &v);
            let share0 = cont[0] / budget as f64;
            let neyman = round_allocation(&cont, budget, 2)?;
            let mut allocations = Vec::with_capacity(kinds.len());
            for &kind in kinds {
                let p = DesignProblem {
                    budget,
                    v: v.clone(),
                    tau: tau.clone(),
                    kind,
                    min_per_arm: 2,
                    start: StartPoint::Neyman,
                };
                let r = greedy_minimize(&p, settings)?;
                allocations.push((kind, r.alloc.as_slice().to_vec()));
            }
            Ok((
                share0,
                OracleDraw {
                    draw: d,
                    v,
                    tau,
                    neyman: neyman.as_slice().to_vec(),
                    allocations,
                },
            ))
        })
        .collect();
    let mut share_sum = 0.0;
    let mut draws_out = Vec::with_capacity(draws);
    for r in per_draw {
        let (s, d) = r?;
        share_sum += s;
        draws_out.push(d);
    }
    let k = regime.k;
    let nf = budget as f64;
    let rows = kinds
        .iter()
        .enumerate()
        .map(|(idx, &kind)| {
            let mut acc = [0.0; 3];
            for d in &draws_out {
                let a = &d.allocations[idx].1;
                for (slot, arm) in [0, 1, k].into_iter().enumerate() {
                    acc[slot] += (a[arm] as f64 - d.neyman[arm] as f64) / nf;
                }
            }
            let m = draws as f64;
            OracleRow {
                kind,
                delta_n0: acc[0] / m,
                delta_n1: acc[1] / m,
                delta_nk: acc[2] / m,
            }
        })
        .collect();
    Ok(OracleTable {
        regime: *regime,
        n: budget,
        draws,
        neyman_share0: share_sum / draws as f64,
        rows,
        per_draw: draws_out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn regime(shape: TauShape, kappa: f64) -> Regime {
        Regime {
            k: 4,
            v0_regime: V0Regime::High,
            tau_shape: shape,
            kappa,
        }
    }

    #[test]
    fn zero_kappa_gives_zero_tau() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (_, tau) = draw_dgp(&regime(TauShape::Zero, 0.0), 1000, &mut rng).unwrap();
        assert!(tau.as_slice().iter().all(|&t| t == 0.0));
        assert!(regime(TauShape::Dense, 0.0).validate().is_err());
        assert!(regime(TauShape::Zero, 3.0).validate().is_err());
    }

    #[test]
    fn kappa_is_met_at_neyman() {
        for shape in [TauShape::Dense, TauShape::Sparse] {
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            let (v, tau) = draw_dgp(&regime(shape, 9.0), 1000, &mut rng).unwrap();
            let s =
                StructuredCovariance::from_allocation(&neyman_allocation(1000.0, &v), &v).unwrap();
            assert!((s.inv_quad_form(tau.as_slice()) - 9.0).abs() < 1e-9 * 9.0);
            if shape == TauShape::Sparse {
                assert!(tau.as_slice()[1..].iter().all(|&t| t == 0.0));
            }
        }
    }

    #[test]
    fn control_variance_regimes() {
        for (reg, m) in [(V0Regime::Low, 0.5), (V0Regime::High, 4.0)] {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let r = Regime {
                v0_regime: reg,
                ..regime(TauShape::Zero, 0.0)
            };
            let (v, _) = draw_dgp(&r, 1000, &mut rng).unwrap();
            let active = v.active();
            assert!(active.windows(2).all(|w| w[0] <= w[1]));
            let mean = active.iter().sum::<f64>() / active.len() as f64;
            assert_eq!(v.control(), m * mean);
        }
    }

    #[test]
    fn variances_do_not_depend_on_shape() {
        let a = draw_dgp(
            &regime(TauShape::Zero, 0.0),
            500,
            &mut ChaCha8Rng::seed_from_u64(4),
        )
        .unwrap();
        let b = draw_dgp(
            &regime(TauShape::Dense, 3.0),
            500,
            &mut ChaCha8Rng::seed_from_u64(4),
        )
        .unwrap();
        assert_eq!(a.0, b.0);
    }

    fn small_config() -> SimConfig {
        SimConfig {
            n: 300,
            iterations: 3,
            seed: 11,
            burn_in_per_arm: 5,
            ..SimConfig::new(regime(TauShape::Sparse, 3.0))
        }
    }

    #[test]
    fn experiment_is_reproducible() {
        let c = small_config();
        let a = run_experiment(&c).unwrap();
        let b = run_experiment(&c).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
        assert_eq!(a.series.len(), 5 * 4);
        assert!(a.series.iter().all(|s| s.mse_at_1000.is_none()));
        let s = a.series("sureMin", EstimatorKind::SureMin).unwrap();
        // Every arm has two observations from unit 2(K+1) on.
        assert!(s.trajectory[2 * 5 - 2].is_nan());
        assert!(s.trajectory[2 * 5 - 1..]
            .iter()
            .all(|x| x.is_finite() && *x >= 0.0));
    }

    #[test]
    fn single_iteration_mean_is_that_iteration() {
        let c = SimConfig {
            iterations: 1,
            ..small_config()
        };
        let result = run_experiment(&c).unwrap();
        let runs = run_iteration(&c, &result.v, &result.tau, &mut c.iteration_rng(0)).unwrap();
        for (a, run) in runs.iter().enumerate() {
            for (e, path) in run.mse.iter().enumerate() {
                let s = &result.series[a * c.scorers().len() + e];
                for (x, y) in s.trajectory.iter().zip(path) {
                    assert!(x == y || (x.is_nan() && y.is_nan()));
                }
            }
        }
    }

    #[test]
    fn constant_outcomes_give_zero_mse() {
        let mut c = small_config();
        c.regime = regime(TauShape::Zero, 0.0);
        c.estimators_to_score = vec![EstimatorKind::DiffInMeans];
        let v = ArmVariances::new(vec![1e-300; 5]).unwrap();
        let runs = run_iteration(
            &c,
            &v,
            &EffectVector::zeros(4),
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        for r in runs {
            assert!(r.mse[0]
                .iter()
                .filter(|x| x.is_finite())
                .all(|&x| x < 1e-250));
        }
    }

    #[test]
    fn complete_randomization_is_balanced() {
        let mut c = small_config();
        c.n = 5000;
        c.allocators = vec![AllocatorSpec::new(TargetKind::CompleteRandomization)];
        c.estimators_to_score = vec![EstimatorKind::DiffInMeans];
        let (v, tau) = draw_dgp(&c.regime, c.n, &mut c.dgp_rng()).unwrap();
        let r = run_iteration(&c, &v, &tau, &mut c.iteration_rng(0)).unwrap();
        for &count in &r[0].final_counts {
            assert!((count as f64 / 5000.0 - 0.2).abs() < 0.01);
        }
    }

    #[test]
    fn metrics_use_unit_1000() {
        let mut c = small_config();
        c.n = 1010;
        c.iterations = 2;
        c.allocators = vec![AllocatorSpec::new(TargetKind::Neyman)];
        c.estimators_to_score = vec![EstimatorKind::DiffInMeans];
        let r = run_experiment(&c).unwrap();
        let s = &r.series[0];
        let at = s.mse_at_1000.unwrap().mean;
        assert!((at - s.trajectory[999]).abs() < 1e-12 * at);
        let from = s.mean_mse_from_1000.unwrap().mean;
        let direct = s.trajectory[999..].iter().sum::<f64>() / 11.0;
        assert!((from - direct).abs() < 1e-12 * from);
    }

    #[test]
    fn positive_part_never_hurts_at_zero_effects() {
        let mut c = small_config();
        c.regime = regime(TauShape::Zero, 0.0);
        c.allocators = vec![AllocatorSpec::new(TargetKind::Neyman)];
        c.estimators_to_score = vec![EstimatorKind::DiffInMeans, EstimatorKind::SureMin];
        c.positive_part_variants = true;
        assert_eq!(
            c.scorers(),
            vec![
                (EstimatorKind::DiffInMeans, false),
                (EstimatorKind::SureMin, false),
                (EstimatorKind::SureMin, true)
            ]
        );
        let r = run_experiment(&c).unwrap();
        let raw = r.series("neyman", EstimatorKind::SureMin).unwrap();
        let pp = r
            .positive_part_series("neyman", EstimatorKind::SureMin)
            .unwrap();
        // With tau = 0, clamping a negative multiplier at zero can only help.
        for (a, b) in raw
            .trajectory
            .iter()
            .zip(&pp.trajectory)
            .filter(|(a, _)| a.is_finite())
        {
            assert!(b <= a);
        }
    }

    #[test]
    fn invalid_configs() {
        let mut c = small_config();
        c.allocators.push(AllocatorSpec::new(TargetKind::Bock));
        assert!(c.validate().is_err());
        let mut c = small_config();
        c.iterations = 0;
        assert!(c.validate().is_err());
        let mut c = small_config();
        c.n = 10;
        assert!(c.validate().is_err());
    }

    #[test]
    fn oracle_diff_in_means_is_neyman() {
        let t = oracle_table(
            &regime(TauShape::Zero, 0.0),
            200,
            2,
            5,
            &[EstimatorKind::DiffInMeans, EstimatorKind::Bock],
            &QuadratureSettings::default(),
        )
        .unwrap();
        let dim = t.row(EstimatorKind::DiffInMeans).unwrap();
        assert_eq!((dim.delta_n0, dim.delta_n1, dim.delta_nk), (0.0, 0.0, 0.0));
        assert!(t.row(EstimatorKind::Bock).unwrap().delta_n0 > 0.0);
        assert_eq!(t.control_gain_frequency(EstimatorKind::Bock), 1.0);
    }

    #[test]
    fn config_json_defaults() {
        let c: SimConfig =
            serde_json::from_str(r#"{"K":6,"v0Regime":"high","tauShape":"zero","kappa":0}"#)
                .unwrap();
        assert_eq!((c.n, c.iterations, c.burn_in_per_arm), (2000, 200, 10));
        assert_eq!(c.allocators.len(), 5);
        assert!(c.validate().is_ok());
        assert_eq!("HIGH".parse::<V0Regime>().unwrap(), V0Regime::High);
        assert_eq!(TauShape::Sparse.to_string(), "sparse");
    }
}
