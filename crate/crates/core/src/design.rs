//! Static designs: the Neyman allocation, integer rounding, and the greedy
//! single-unit swapping search for shrinker-risk-minimizing allocations.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covmodel::{ArmCounts, ArmVariances, EffectVector};
use crate::error::{check_len, Error, Result};
use crate::estimators::EstimatorKind;
use crate::quadrature::QuadratureSettings;
use crate::risk::{risk_exact, RiskQuery};

/// Relative gap below which two risks are treated as equal.
pub const TIE_TOL: f64 = 1e-12;

/// Where the greedy search starts.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", tag = "kind", content = "counts")]
pub enum StartPoint {
    /// Rounded Neyman allocation.
    #[default]
    Neyman,
    /// Equal shares, rounded.
    Uniform,
    Given(ArmCounts),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct DesignProblem {
    /// Total budget `N`.
    pub budget: usize,
    #[serde(rename = "V")]
    pub v: ArmVariances,
    pub tau: EffectVector,
    pub kind: EstimatorKind,
    #[serde(default = "default_min_per_arm")]
    pub min_per_arm: usize,
    #[serde(default)]
    pub start: StartPoint,
}

fn default_min_per_arm() -> usize {
    2
}

impl DesignProblem {
    pub fn new(
        budget: usize,
        v: ArmVariances,
        tau: EffectVector,
        kind: EstimatorKind,
    ) -> Result<Self> {
        let p = Self {
            budget,
            v,
            tau,
            kind,
            min_per_arm: default_min_per_arm(),
            start: StartPoint::Neyman,
        };
        p.validate()?;
        Ok(p)
    }

    /// Number of active arms.
    pub fn k(&self) -> usize {
        self.v.active_arms()
    }

    pub fn validate(&self) -> Result<()> {
        check_len("effects vs active arms", self.k(), self.tau.len())?;
        self.kind.check_dim(self.k())?;
        if self.min_per_arm == 0 {
            return Err(Error::InvalidInput("minPerArm must be at least 1".into()));
        }
        let floor = (self.k() + 1) * self.min_per_arm;
        if self.budget < floor {
            return Err(Error::InvalidInput(format!(
                "budget {} is below (K+1)*minPerArm = {floor}",
                self.budget
            )));
        }
        Ok(())
    }

    pub fn risk_at(&self, n: &ArmCounts, s: &QuadratureSettings) -> Result<f64> {
        let q = RiskQuery {
            kind: self.kind,
            n: n.clone(),
            v: self.v.clone(),
            tau: self.tau.clone(),
        };
        risk_exact(&q, s)
    }

    fn start_allocation(&self) -> Result<ArmCounts> {
        let arms = self.k() + 1;
        match &self.start {
            StartPoint::Neyman => round_allocation(
                &neyman_allocation(self.budget as f64, &self.v),
                self.budget,
                self.min_per_arm,
            ),
            StartPoint::Uniform => {
                let share = self.budget as f64 / arms as f64;
                round_allocation(&vec![share; arms], self.budget, self.min_per_arm)
            }
            StartPoint::Given(n) => {
                check_len("start allocation", arms, n.as_slice().len())?;
                if n.total() != self.budget || n.as_slice().iter().any(|&c| c < self.min_per_arm) {
                    return Err(Error::InvalidInput(
                        "start allocation must sum to the budget and respect minPerArm".into(),
                    ));
                }
                Ok(n.clone())
            }
        }
    }
}

/// Continuous allocation minimizing `tr(Sigma)` subject to `sum n = N`:
/// `n_0 ∝ sqrt(K V_0)`, `n_k ∝ sqrt(V_k)`.
pub fn neyman_allocation(budget: f64, v: &ArmVariances) -> Vec<f64> {
    let k = v.active_arms() as f64;
    let mut w: Vec<f64> = v.as_slice().iter().map(|x| x.sqrt()).collect();
    w[0] = (k * v.control()).sqrt();
    let d: f64 = w.iter().sum();
    w.iter().map(|x| budget * x / d).collect()
}

/// Largest-remainder rounding to integers summing to `budget`, then raising
/// every arm to `min_per_arm` by taking units from the arm with the most
/// slack (lowest index on ties).
pub fn round_allocation(
    continuous: &[f64],
    budget: usize,
    min_per_arm: usize,
) -> Result<ArmCounts> {
    if continuous.len() < 2 {
        return Err(Error::InvalidInput(
            "allocation needs at least two arms".into(),
        ));
    }
    if continuous.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
        return Err(Error::InvalidInput(
            "continuous allocation must be finite and non-negative".into(),
        ));
    }
    if budget < continuous.len() * min_per_arm.max(1) {
        return Err(Error::InvalidInput(format!(
            "budget {budget} cannot give {} arms at least {} units",
            continuous.len(),
            min_per_arm.max(1)
        )));
    }
    let total: f64 = continuous.iter().sum();
    if !(total > 0.0) {
        return Err(Error::InvalidInput(
            "continuous allocation sums to zero".into(),
        ));
    }
    // Rescale so the target sums to the budget exactly.
    let target: Vec<f64> = continuous
        .iter()
        .map(|x| x * budget as f64 / total)
        .collect();
    let mut counts: Vec<usize> = target.iter().map(|x| x.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = target[a] - target[a].floor();
        let rb = target[b] - target[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(budget.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    let floor = min_per_arm.max(1);
    for i in 0..counts.len() {
        while counts[i] < floor {
            let donor = (0..counts.len())
                .filter(|&j| counts[j] > floor)
                .max_by(|&a, &b| counts[a].cmp(&counts[b]).then(b.cmp(&a)))
                .expect("budget covers the floor");
            counts[donor] -= 1;
            counts[i] += 1;
        }
    }
    ArmCounts::new(counts)
}

/// One accepted move of the greedy search.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GreedyStep {
    pub iteration: usize,
    /// `(from, to)`: one unit moved from arm `from` to arm `to`.
    pub swap: (usize, usize),
    pub risk: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct GreedyResult {
    pub start: ArmCounts,
    pub start_risk: f64,
    pub alloc: ArmCounts,
    pub risk: f64,
    pub steps: Vec<GreedyStep>,
    pub evaluations: usize,
}

/// Greedy swapping: from the start allocation, repeatedly evaluate every
/// ordered single-unit move that keeps each arm at `min_per_arm`, and take
/// the best one while it strictly lowers the risk.
pub fn greedy_minimize(p: &DesignProblem, s: &QuadratureSettings) -> Result<GreedyResult> {
    p.validate()?;
    let start = p.start_allocation()?;
    let start_risk = p.risk_at(&start, s)?;
    let arms = p.k() + 1;
    let moves: Vec<(usize, usize)> = (0..arms)
        .flat_map(|f| (0..arms).filter(move |&t| t != f).map(move |t| (f, t)))
        .collect();
    let mut alloc = start.clone();
    let mut risk = start_risk;
    let mut steps = Vec::new();
    let mut evaluations = 1;
    let max_iterations = p.budget * arms;
    for iteration in 1..=max_iterations {
        let candidates: Vec<Result<Option<(f64, (usize, usize))>>> = moves
            .par_iter()
            .map(|&(f, t)| match alloc.with_swap(f, t, p.min_per_arm) {
                Some(n) => p.risk_at(&n, s).map(|r| Some((r, (f, t)))),
                None => Ok(None),
            })
            .collect();
        let mut evaluated = Vec::with_capacity(candidates.len());
        for c in candidates {
            if let Some(x) = c? {
                evaluated.push(x);
            }
        }
        evaluations += evaluated.len();
        let min = evaluated.iter().map(|x| x.0).fold(f64::INFINITY, f64::min);
        // `moves` is in lexicographic order: the first near-minimal candidate
        // is the smallest (from, to) pair among ties.
        let best = evaluated
            .into_iter()
            .find(|x| x.0 <= min + TIE_TOL * min.abs());
        match best {
            Some((r, (f, t))) if r < risk - TIE_TOL * risk.abs() => {
                alloc = alloc
                    .with_swap(f, t, p.min_per_arm)
                    .expect("candidate was feasible");
                risk = r;
                steps.push(GreedyStep {
                    iteration,
                    swap: (f, t),
                    risk,
                });
            }
            _ => break,
        }
    }
    Ok(GreedyResult {
        start,
        start_risk,
        alloc,
        risk,
        steps,
        evaluations,
    })
}

/// Gradient of `tr(Sigma^2)` in the (continuous) counts.
pub fn trsigsq_gradient(n: &[f64], v: &ArmVariances) -> Result<Vec<f64>> {
    check_len("allocation vs variances", v.as_slice().len(), n.len())?;
    if n.iter().any(|x| !(*x > 0.0)) {
        return Err(Error::InvalidInput(
            "allocation entries must be positive".into(),
        ));
    }
    let vs = v.as_slice();
    let k = v.active_arms() as f64;
    let c = vs[0] / n[0];
    let d: Vec<f64> = (1..n.len()).map(|j| vs[j] / n[j]).collect();
    let mut g = Vec::with_capacity(n.len());
    g.push(-2.0 * vs[0] / (n[0] * n[0]) * (k * k * c + d.iter().sum::<f64>()));
    for j in 1..n.len() {
        g.push(-2.0 * vs[j] / (n[j] * n[j]) * (c + d[j - 1]));
    }
    Ok(g)
}
