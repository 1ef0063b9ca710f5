//! Sequential adaptive assignment: burn-in, running arm statistics, greedy
//! per-arrival risk minimization, and an append-only event log.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::covmodel::{
    ArmCounts, ArmVariances, DominanceChecks, EffectVector, StructuredCovariance,
};
use crate::design::{neyman_allocation, TIE_TOL};
use crate::error::{Error, Result};
use crate::estimators::{diff_in_means, factors, sure, EstimatorKind};
use crate::quadrature::QuadratureSettings;
use crate::risk::{risk_exact, RiskQuery};

/// What the assignment rule optimizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum TargetKind {
    DiffInMeans,
    Bock,
    SureMin,
    Dimmery,
    /// Track the Neyman proportions computed from the running variances.
    Neyman,
    /// Keep cycling through the arms.
    CompleteRandomization,
}

impl TargetKind {
    /// The estimator whose risk drives assignment, if any.
    pub fn estimator(self) -> Option<EstimatorKind> {
        match self {
            Self::DiffInMeans => Some(EstimatorKind::DiffInMeans),
            Self::Bock => Some(EstimatorKind::Bock),
            Self::SureMin => Some(EstimatorKind::SureMin),
            Self::Dimmery => Some(EstimatorKind::Dimmery),
            Self::Neyman | Self::CompleteRandomization => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Neyman => "neyman",
            Self::CompleteRandomization => "completeRandomization",
            other => other.estimator().expect("estimator target").as_str(),
        }
    }
}

impl From<EstimatorKind> for TargetKind {
    fn from(k: EstimatorKind) -> Self {
        match k {
            EstimatorKind::DiffInMeans => Self::DiffInMeans,
            EstimatorKind::Bock => Self::Bock,
            EstimatorKind::SureMin => Self::SureMin,
            EstimatorKind::Dimmery => Self::Dimmery,
        }
    }
}

impl fmt::Display for TargetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for TargetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "neyman" => Ok(Self::Neyman),
            "completerandomization" | "cr" => Ok(Self::CompleteRandomization),
            other => other.parse::<EstimatorKind>().map(Self::from),
        }
    }
}

/// How burn-in arrivals are assigned. Both give every arm exactly
/// `burn_in_per_arm` units.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", tag = "mode")]
pub enum BurnInMode {
    /// `0, 1, ..., K, 0, 1, ...`.
    #[default]
    RoundRobin,
    /// A seeded random permutation of the balanced burn-in schedule.
    UniformRandom { seed: u64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TrialConfig {
    /// Number of active arms.
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(alias = "kind")]
    pub target: TargetKind,
    #[serde(default = "default_burn_in")]
    pub burn_in_per_arm: usize,
    /// Planned total; the engine also runs open-ended.
    #[serde(rename = "N", default, skip_serializing_if = "Option::is_none")]
    pub planned_n: Option<usize>,
    #[serde(default = "default_floor")]
    pub variance_floor: f64,
    #[serde(default)]
    pub quadrature: QuadratureSettings,
    #[serde(default)]
    pub burn_in: BurnInMode,
}

fn default_burn_in() -> usize {
    10
}

fn default_floor() -> f64 {
    1e-8
}

impl TrialConfig {
    pub fn new(k: usize, target: TargetKind) -> Self {
        Self {
            k,
            target,
            burn_in_per_arm: default_burn_in(),
            planned_n: None,
            variance_floor: default_floor(),
            quadrature: QuadratureSettings::default(),
            burn_in: BurnInMode::RoundRobin,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(Error::InvalidInput("K must be at least 1".into()));
        }
        if let Some(kind) = self.target.estimator() {
            kind.check_dim(self.k)?;
        }
        if self.burn_in_per_arm < 2 {
            return Err(Error::InvalidInput(
                "burnInPerArm must be at least 2".into(),
            ));
        }
        if !(self.variance_floor > 0.0 && self.variance_floor.is_finite()) {
            return Err(Error::InvalidInput("varianceFloor must be positive".into()));
        }
        if let Some(n) = self.planned_n {
            if n < self.burn_in_len() {
                return Err(Error::InvalidInput(format!(
                    "planned N = {n} is shorter than the burn-in ({})",
                    self.burn_in_len()
                )));
            }
        }
        self.quadrature.validate()
    }

    pub fn arms(&self) -> usize {
        self.k + 1
    }

    /// `(K + 1) * burn_in_per_arm`.
    pub fn burn_in_len(&self) -> usize {
        self.arms() * self.burn_in_per_arm
    }

    /// The full burn-in assignment sequence.
    pub fn burn_in_schedule(&self) -> Vec<usize> {
        let mut s: Vec<usize> = (0..self.burn_in_len()).map(|i| i % self.arms()).collect();
        if let BurnInMode::UniformRandom { seed } = self.burn_in {
            s.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        }
        s
    }
}

/// Running count, mean and sum of squared deviations (Welford).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ArmStats {
    pub count: usize,
    pub mean: f64,
    pub m2: f64,
}

impl ArmStats {
    pub fn push(&mut self, y: f64) {
        self.count += 1;
        let delta = y - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (y - self.mean);
    }

    /// Sample variance, or `None` with fewer than two observations.
    pub fn variance(&self) -> Option<f64> {
        (self.count >= 2).then(|| self.m2 / (self.count - 1) as f64)
    }

    /// Sample variance floored at `floor` (also used below two observations).
    pub fn variance_or(&self, floor: f64) -> f64 {
        self.variance().map_or(floor, |v| v.max(floor))
    }
}

/// One logged arrival.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Event {
    /// Zero-based arrival index.
    pub i: usize,
    pub arm: usize,
    pub y: f64,
    /// Set when the unit went to an arm other than the recommendation.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub deviation: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    BurnIn,
    Adaptive,
}

/// Covariance diagnostics exposed with a snapshot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CovarianceSummary {
    pub diag: Vec<f64>,
    pub off: f64,
    pub trace: f64,
    pub trace_square: f64,
    pub lambda_max: f64,
    pub effective_dim: f64,
    pub condition_bound: f64,
}

impl From<&StructuredCovariance> for CovarianceSummary {
    fn from(s: &StructuredCovariance) -> Self {
        Self {
            diag: s.diag_part().to_vec(),
            off: s.off(),
            trace: s.trace(),
            trace_square: s.trace_square(),
            lambda_max: s.lambda_max(),
            effective_dim: s.effective_dim(),
            condition_bound: s.condition_bound(),
        }
    }
}

/// Current estimates and the decision surface.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Snapshot {
    pub phase: Phase,
    pub arrivals: usize,
    pub counts: Vec<usize>,
    pub means: Vec<f64>,
    #[serde(rename = "Vhat")]
    pub vhat: Vec<f64>,
    pub tau_hat: Vec<f64>,
    /// Point estimates by estimator name; shrinkers are omitted when undefined.
    pub estimates: BTreeMap<String, Vec<f64>>,
    pub sigma: Option<CovarianceSummary>,
    pub dominance: Option<DominanceChecks>,
    /// Risk after assigning the next unit to each arm (adaptive phase only).
    pub candidate_risks: Option<Vec<f64>>,
    pub recommended: Option<usize>,
}

/// The engine: configuration, per-arm statistics and the event history.
#[derive(Clone, Debug)]
pub struct TrialState {
    config: TrialConfig,
    schedule: Vec<usize>,
    arms: Vec<ArmStats>,
    events: Vec<Event>,
    sure_path: Vec<(usize, f64)>,
}

impl TrialState {
    pub fn new(config: TrialConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            schedule: config.burn_in_schedule(),
            arms: vec![ArmStats::default(); config.arms()],
            events: Vec::new(),
            sure_path: Vec::new(),
            config,
        })
    }

    /// Rebuilds a state by re-recording `events` in order.
    pub fn replay(config: TrialConfig, events: &[Event]) -> Result<Self> {
        let mut s = Self::new(config)?;
        for (idx, e) in events.iter().enumerate() {
            if e.i != idx {
                return Err(Error::Trial(format!(
                    "event log gap: expected i = {idx}, found {}",
                    e.i
                )));
            }
            s.record_outcome(e.arm, e.y, e.deviation)?;
        }
        Ok(s)
    }

    pub fn config(&self) -> &TrialConfig {
        &self.config
    }

    pub fn arm_stats(&self) -> &[ArmStats] {
        &self.arms
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    /// `(arrival index, compound SURE of the target estimator)` after each
    /// arrival at which every arm had two observations.
    pub fn sure_path(&self) -> &[(usize, f64)] {
        &self.sure_path
    }

    pub fn arrivals(&self) -> usize {
        self.events.len()
    }

    pub fn counts(&self) -> Vec<usize> {
        self.arms.iter().map(|a| a.count).collect()
    }

    pub fn means(&self) -> Vec<f64> {
        self.arms.iter().map(|a| a.mean).collect()
    }

    /// Floored sample variances.
    pub fn vhat(&self) -> Vec<f64> {
        self.arms
            .iter()
            .map(|a| a.variance_or(self.config.variance_floor))
            .collect()
    }

    pub fn tau_hat(&self) -> Vec<f64> {
        diff_in_means(&self.means())
    }

    pub fn phase(&self) -> Phase {
        if self.arrivals() < self.config.burn_in_len() {
            Phase::BurnIn
        } else {
            Phase::Adaptive
        }
    }

    fn ready(&self) -> bool {
        self.arms.iter().all(|a| a.count >= 2)
    }

    /// Estimated contrast covariance at the current counts.
    pub fn sigma(&self) -> Result<StructuredCovariance> {
        self.require_ready()?;
        let n: Vec<f64> = self.arms.iter().map(|a| a.count as f64).collect();
        StructuredCovariance::from_allocation(&n, &ArmVariances::new(self.vhat())?)
    }

    fn require_ready(&self) -> Result<()> {
        if !self.ready() {
            return Err(Error::Trial(format!(
                "every arm needs at least 2 observations (counts {:?})",
                self.counts()
            )));
        }
        Ok(())
    }

    /// Risk of the target after one more unit in each arm. Baseline targets
    /// report `tr Sigma(n + e_k)`.
    pub fn candidate_risks(&self) -> Result<Vec<f64>> {
        self.require_ready()?;
        let kind = self
            .config
            .target
            .estimator()
            .unwrap_or(EstimatorKind::DiffInMeans);
        let n = ArmCounts::new(self.counts())?;
        let v = ArmVariances::new(self.vhat())?;
        let tau = EffectVector::new(self.tau_hat())?;
        (0..self.config.arms())
            .map(|arm| {
                let q = RiskQuery {
                    kind,
                    n: n.with_added(arm),
                    v: v.clone(),
                    tau: tau.clone(),
                };
                risk_exact(&q, &self.config.quadrature)
            })
            .collect()
    }

    /// The arm for the next arrival.
    pub fn next_assignment(&self) -> Result<usize> {
        let i = self.arrivals();
        if i < self.schedule.len() {
            return Ok(self.schedule[i]);
        }
        if !self.ready() {
            // Possible only after burn-in deviations: fill the thinnest arm.
            return Ok(argmin_lowest(self.arms.iter().map(|a| a.count as f64)));
        }
        match self.config.target {
            TargetKind::CompleteRandomization => Ok(i % self.config.arms()),
            TargetKind::Neyman => {
                self.require_ready()?;
                let v = ArmVariances::new(self.vhat())?;
                let target = neyman_allocation((i + 1) as f64, &v);
                let counts = self.counts();
                Ok(argmax_lowest(
                    target.iter().zip(&counts).map(|(t, &c)| t - c as f64),
                ))
            }
            _ => Ok(argmin_lowest(self.candidate_risks()?.into_iter())),
        }
    }

    /// Appends an outcome for `arm`.
    pub fn record_outcome(&mut self, arm: usize, y: f64, deviation: bool) -> Result<Event> {
        if arm >= self.config.arms() {
            return Err(Error::Trial(format!(
                "arm {arm} out of range 0..={}",
                self.config.k
            )));
        }
        if !y.is_finite() {
            return Err(Error::Trial("outcome must be finite".into()));
        }
        let event = Event {
            i: self.arrivals(),
            arm,
            y,
            deviation,
        };
        self.arms[arm].push(y);
        self.events.push(event);
        if self.ready() {
            if let Some(v) = self.current_sure() {
                self.sure_path.push((event.i, v));
            }
        }
        Ok(event)
    }

    fn current_sure(&self) -> Option<f64> {
        let kind = self
            .config
            .target
            .estimator()
            .unwrap_or(EstimatorKind::DiffInMeans);
        let k = if kind.is_shrinker() && self.config.k < 3 {
            EstimatorKind::DiffInMeans
        } else {
            kind
        };
        let s = self.sigma().ok()?;
        sure(k, &s, &self.tau_hat()).ok()
    }

    /// Estimates and diagnostics; risk evaluation only in the adaptive phase.
    pub fn snapshot(&self) -> Result<Snapshot> {
        let tau_hat = self.tau_hat();
        let mut estimates = BTreeMap::new();
        let mut sigma_summary = None;
        let mut dominance = None;
        if self.ready() {
            let s = self.sigma()?;
            for kind in EstimatorKind::ALL {
                if let Ok(f) = factors(kind, &s, &tau_hat) {
                    estimates.insert(
                        kind.as_str().to_string(),
                        f.iter().zip(&tau_hat).map(|(f, t)| f * t).collect(),
                    );
                }
            }
            sigma_summary = Some(CovarianceSummary::from(&s));
            dominance = Some(s.dominance_checks());
        }
        let (candidate_risks, recommended) = match self.phase() {
            Phase::Adaptive if self.ready() => {
                let r = self.candidate_risks()?;
                (Some(r), Some(self.next_assignment()?))
            }
            _ => (None, self.next_assignment().ok()),
        };
        Ok(Snapshot {
            phase: self.phase(),
            arrivals: self.arrivals(),
            counts: self.counts(),
            means: self.means(),
            vhat: self.vhat(),
            tau_hat,
            estimates,
            sigma: sigma_summary,
            dominance,
            candidate_risks,
            recommended,
        })
    }
}

/// Index of the smallest value; values within a relative `1e-12` of the
/// minimum count as ties and the lowest index wins.
pub(crate) fn argmin_lowest(values: impl Iterator<Item = f64>) -> usize {
    let v: Vec<f64> = values.collect();
    let m = v.iter().copied().fold(f64::INFINITY, f64::min);
    v.iter()
        .position(|&x| x <= m + TIE_TOL * m.abs())
        .unwrap_or(0)
}

fn argmax_lowest(values: impl Iterator<Item = f64>) -> usize {
    let v: Vec<f64> = values.collect();
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    v.iter()
        .position(|&x| x >= m - TIE_TOL * m.abs())
        .unwrap_or(0)
}

/// Writes events as JSON lines.
pub fn write_events<W: Write>(mut w: W, events: &[Event]) -> std::io::Result<()> {
    for e in events {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Reads JSON-line events, skipping blank lines.
pub fn read_events<R: BufRead>(r: R) -> Result<Vec<Event>> {
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line.map_err(|e| Error::Trial(format!("event log read failed: {e}")))?;
        if line.trim().is_empty() {
            continue;
        }
        let e: Event = serde_json::from_str(&line)
            .map_err(|e| Error::Trial(format!("event log line {}: {e}", n + 1)))?;
        out.push(e);
    }
    Ok(out)
}
