use std::time::Instant;

use adashrink::covmodel::{ArmCounts, ArmVariances, EffectVector};
use adashrink::design::{greedy_minimize, DesignProblem};
use adashrink::estimators::EstimatorKind;
use adashrink::quadrature::QuadratureSettings;
use adashrink::risk::{risk_exact, risk_mc, RiskQuery, MIN_MC_DRAWS};
use adashrink::simkit::{oracle_table, run_experiment, OracleTable, SimConfig, TauShape};
use anyhow::anyhow;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{LogNormal, StandardNormal};
use serde::Serialize;
use serde_json::json;

use crate::config::{self, OracleConfig, SCHEMA_VERSION};
use crate::output::Staged;
use crate::{
    BenchArgs, DesignArgs, Failure, FailureExt, OracleArgs, RiskArgs, ServeArgs, SimulateArgs,
};

fn shape_label(t: TauShape) -> &'static str {
    match t {
        TauShape::Zero => "-",
        TauShape::Dense => "dense",
        TauShape::Sparse => "sparse",
    }
}

fn cell_columns(t: &OracleTable) -> Vec<String> {
    vec![
        t.regime.k.to_string(),
        t.regime.v0_regime.to_string(),
        shape_label(t.regime.tau_shape).to_string(),
        t.regime.kappa.to_string(),
    ]
}

pub fn oracle(args: OracleArgs) -> Result<(), Failure> {
    let mut cfg = match &args.config {
        Some(p) => config::load::<OracleConfig>(p).config_err()?,
        None => OracleConfig::default(),
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(d) = args.draws {
        cfg.draws = d;
    }
    let cells = cfg.cells().config_err()?;
    let mut tables = Vec::with_capacity(cells.len());
    for (idx, cell) in cells.iter().enumerate() {
        log::info!("cell {}/{}: {:?}", idx + 1, cells.len(), cell);
        tables.push(
            oracle_table(
                cell,
                cfg.n,
                cfg.draws,
                cfg.seed,
                &cfg.kinds,
                &cfg.quadrature,
            )
            .runtime_err()?,
        );
    }

    let mut header: Vec<String> = [
        "K",
        "v0Regime",
        "tauShape",
        "kappa",
        "N",
        "draws",
        "neymanShare0",
    ]
    .map(String::from)
    .to_vec();
    for k in &cfg.kinds {
        for col in ["dn0", "dn1", "dnK"] {
            header.push(format!("{k}_{col}"));
        }
    }
    let mut summary_rows = Vec::new();
    let mut alloc_rows = Vec::new();
    for t in &tables {
        let mut row = cell_columns(t);
        row.extend([
            t.n.to_string(),
            t.draws.to_string(),
            t.neyman_share0.to_string(),
        ]);
        for r in &t.rows {
            row.extend([r.delta_n0, r.delta_n1, r.delta_nk].map(|x| x.to_string()));
        }
        summary_rows.push(row);
        for d in &t.per_draw {
            let designs = std::iter::once(("neyman".to_string(), &d.neyman))
                .chain(d.allocations.iter().map(|(k, a)| (k.to_string(), a)));
            for (design, alloc) in designs {
                for (arm, &count) in alloc.iter().enumerate() {
                    let mut r = cell_columns(t);
                    r.extend([
                        d.draw.to_string(),
                        design.clone(),
                        arm.to_string(),
                        count.to_string(),
                        ((count as f64 - d.neyman[arm] as f64) / t.n as f64).to_string(),
                    ]);
                    alloc_rows.push(r);
                }
            }
        }
    }
    let alloc_header = [
        "K",
        "v0Regime",
        "tauShape",
        "kappa",
        "draw",
        "design",
        "arm",
        "count",
        "deltaShare",
    ]
    .map(String::from);
    let mut out = Staged::new(&args.out).runtime_err()?;
    out.table("oracle_table.csv", &header, &summary_rows)
        .runtime_err()?;
    out.table("oracle_allocations.csv", &alloc_header, &alloc_rows)
        .runtime_err()?;
    out.json(
        "oracle_summary.json",
        &json!({ "schemaVersion": SCHEMA_VERSION, "config": cfg, "cells": tables }),
    )
    .runtime_err()?;
    report(out.commit().runtime_err()?);
    Ok(())
}

fn report(paths: Vec<std::path::PathBuf>) {
    for p in paths {
        println!("wrote {}", p.display());
    }
}

#[derive(Serialize)]
#[serde(rename_all = "camelCase")]
struct TrajectoryRow<'a> {
    unit: usize,
    allocator: &'a str,
    estimator: EstimatorKind,
    positive_part: bool,
    statistic: &'static str,
    value: Option<f64>,
}

#[derive(Serialize)]
#[serde(rename_all = "camelCase")]
struct MetricRow<'a> {
    allocator: &'a str,
    estimator: EstimatorKind,
    positive_part: bool,
    mse_at_1000: Option<f64>,
    mse_at_1000_se: Option<f64>,
    mean_mse_from_1000: Option<f64>,
    mean_mse_from_1000_se: Option<f64>,
}

pub fn simulate(args: SimulateArgs) -> Result<(), Failure> {
    let mut cfg: SimConfig = config::load(&args.config).config_err()?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(i) = args.iterations {
        cfg.iterations = i;
    }
    cfg.validate().config_err()?;
    log::info!("simulating {} iterations of N = {}", cfg.iterations, cfg.n);
    let result = run_experiment(&cfg).runtime_err()?;
    let trajectories = result.series.iter().flat_map(|s| {
        s.trajectory
            .iter()
            .enumerate()
            .map(move |(i, &v)| TrajectoryRow {
                unit: i + 1,
                allocator: &s.allocator,
                estimator: s.estimator,
                positive_part: s.positive_part,
                statistic: "meanMse",
                value: v.is_finite().then_some(v),
            })
    });
    let metrics: Vec<MetricRow> = result
        .series
        .iter()
        .map(|s| MetricRow {
            allocator: &s.allocator,
            estimator: s.estimator,
            positive_part: s.positive_part,
            mse_at_1000: s.mse_at_1000.map(|m| m.mean),
            mse_at_1000_se: s.mse_at_1000.map(|m| m.se),
            mean_mse_from_1000: s.mean_mse_from_1000.map(|m| m.mean),
            mean_mse_from_1000_se: s.mean_mse_from_1000.map(|m| m.se),
        })
        .collect();
    let summary = json!({
        "schemaVersion": SCHEMA_VERSION,
        "config": cfg,
        "V": result.v,
        "tau": result.tau,
        "finalShares": result.final_shares,
        "metrics": &metrics,
    });
    let mut out = Staged::new(&args.out).runtime_err()?;
    out.csv("trajectories.csv", trajectories).runtime_err()?;
    out.csv("metrics.csv", &metrics).runtime_err()?;
    out.json("summary.json", &summary).runtime_err()?;
    report(out.commit().runtime_err()?);
    Ok(())
}

fn risk_query(args: &RiskArgs) -> anyhow::Result<RiskQuery> {
    if let Some(p) = &args.config {
        let q: RiskQuery = config::load(p)?;
        q.validate()?;
        return Ok(q);
    }
    let kind: EstimatorKind = args
        .kind
        .as_deref()
        .ok_or_else(|| anyhow!("--kind is required without --config"))?
        .parse()?;
    let n = args
        .n
        .clone()
        .ok_or_else(|| anyhow!("--n is required without --config"))?;
    let v = args
        .v
        .clone()
        .ok_or_else(|| anyhow!("--v is required without --config"))?;
    let k = n.len().saturating_sub(1);
    let tau = args.tau.clone().unwrap_or_else(|| vec![0.0; k]);
    Ok(RiskQuery::new(
        kind,
        ArmCounts::new(n)?,
        ArmVariances::new(v)?,
        EffectVector::new(tau)?,
    )?)
}

pub fn risk(args: RiskArgs) -> Result<(), Failure> {
    let q = risk_query(&args).config_err()?;
    if args.draws != 0 && args.draws < MIN_MC_DRAWS {
        return Err(Failure::Config(anyhow!(
            "--draws must be 0 or at least {MIN_MC_DRAWS}"
        )));
    }
    let sigma = q.covariance().runtime_err()?;
    let exact = risk_exact(&q, &QuadratureSettings::default()).runtime_err()?;
    let mut body = json!({
        "kind": q.kind,
        "exact": exact,
        "trace": sigma.trace(),
        "usesQuadrature": q.kind.is_shrinker(),
    });
    if args.draws > 0 {
        let (mean, se) = risk_mc(&q, args.draws, args.seed).runtime_err()?;
        body["monteCarlo"] =
            json!({ "mean": mean, "se": se, "draws": args.draws, "seed": args.seed });
        body["zScore"] = json!(if se > 0.0 { (exact - mean) / se } else { 0.0 });
    }
    println!(
        "{}",
        serde_json::to_string_pretty(&body).expect("risk report serializes")
    );
    Ok(())
}

pub fn design(args: DesignArgs) -> Result<(), Failure> {
    let p: DesignProblem = config::load(&args.config).config_err()?;
    p.validate().config_err()?;
    let r = greedy_minimize(&p, &QuadratureSettings::default()).runtime_err()?;
    for s in &r.steps {
        println!("{}", serde_json::to_string(s).expect("step serializes"));
    }
    let done = json!({
        "start": r.start,
        "startRisk": r.start_risk,
        "alloc": r.alloc,
        "risk": r.risk,
        "evaluations": r.evaluations,
    });
    println!("{done}");
    Ok(())
}

#[derive(Serialize)]
struct BenchRow {
    #[serde(rename = "K")]
    k: usize,
    bock_ms: f64,
    sure_min_ms: f64,
    dimmery_ms: f64,
}

/// A fixed pseudo-random design with moderate signal.
fn bench_query(k: usize, rng: &mut ChaCha8Rng) -> anyhow::Result<RiskQuery> {
    let ln = LogNormal::new(350f64.ln(), 0.6)?;
    let n: Vec<usize> = (0..=k).map(|_| rng.random_range(20..200)).collect();
    let v: Vec<f64> = (0..=k).map(|_| rng.sample(ln)).collect();
    let raw: Vec<f64> = (0..k).map(|_| rng.sample(StandardNormal)).collect();
    let q = RiskQuery::new(
        EstimatorKind::Bock,
        ArmCounts::new(n)?,
        ArmVariances::new(v)?,
        EffectVector::zeros(k),
    )?;
    let scale = (3.0 / q.covariance()?.inv_quad_form(&raw)).sqrt();
    Ok(RiskQuery {
        tau: EffectVector::new(raw.iter().map(|x| x * scale).collect())?,
        ..q
    })
}

pub fn bench(args: BenchArgs) -> Result<(), Failure> {
    if args.reps == 0 || args.ks.is_empty() {
        return Err(Failure::Config(anyhow!(
            "--reps must be positive and --k non-empty"
        )));
    }
    for &k in &args.ks {
        EstimatorKind::Bock.check_dim(k).config_err()?;
    }
    let s = QuadratureSettings::default();
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let mut rows = Vec::new();
    for &k in &args.ks {
        let base = bench_query(k, &mut rng).runtime_err()?;
        let mut ms = [0.0; 3];
        for (slot, kind) in EstimatorKind::SHRINKERS.into_iter().enumerate() {
            let q = RiskQuery {
                kind,
                ..base.clone()
            };
            risk_exact(&q, &s).runtime_err()?;
            let t = Instant::now();
            for _ in 0..args.reps {
                std::hint::black_box(risk_exact(std::hint::black_box(&q), &s).runtime_err()?);
            }
            ms[slot] = t.elapsed().as_secs_f64() * 1e3 / args.reps as f64;
        }
        rows.push(BenchRow {
            k,
            bock_ms: ms[0],
            sure_min_ms: ms[1],
            dimmery_ms: ms[2],
        });
    }
    println!(
        "{:>4}  {:>12}  {:>12}  {:>12}",
        "K", "Bock (ms)", "SURE-min (ms)", "Dimmery (ms)"
    );
    for r in &rows {
        println!(
            "{:>4}  {:>12.4}  {:>12.4}  {:>12.4}",
            r.k, r.bock_ms, r.sure_min_ms, r.dimmery_ms
        );
    }
    if let Some(path) = &args.out {
        let dir = path
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(std::path::Path::new("."));
        let name = path
            .file_name()
            .ok_or_else(|| anyhow!("--out must name a file"))
            .config_err()?
            .to_string_lossy()
            .into_owned();
        let mut out = Staged::new(dir).runtime_err()?;
        out.csv(&name, rows).runtime_err()?;
        out.commit().runtime_err()?;
    }
    Ok(())
}

pub fn serve(args: ServeArgs) -> Result<(), Failure> {
    let rt = tokio::runtime::Runtime::new().runtime_err()?;
    rt.block_on(adashrink_service::serve(adashrink_service::ServeOptions {
        addr: args.addr,
        data_dir: args.data_dir,
        token: args.token,
    }))
    .runtime_err()
}
