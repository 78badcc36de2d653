//! Subcommand configs and runners.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use imc_core::bounds::{self, BoundParams, BoundVariant};
use imc_core::certificates::{
    check_recovery_diagnostics, default_golfing_schedule, golfing_certificate_sampled, golfing_certificate_with,
    DiagnosticParams, GolfingParams, TauChoice,
};
use imc_core::model::{build_problem_instance, multiplicity_stats, sample_observations, NoiseSpec, ObservationSet, ProblemInstance, SideInfoPair};
use imc_core::rng::{mix_seed, seeded};
use imc_core::solvers::{cross_validate_lambda, lambda_from_theory, solve_exact as exact, solve_lagrangian, Solution, SolverOptions};
use imc_core::synthlab::{self, empirical_rademacher, generate_synthetic, run_sweep, summarize, CurveShape, SweepConfig, SWEEP_CSV_HEADER};
use imc_core::{io, linalg, DMatrix};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::output::{parse_value, Failure, OrRuntime, Outputs, RunContext};

fn check(ok: bool, msg: &str) -> Result<(), Failure> {
    if ok {
        Ok(())
    } else {
        Err(Failure::config(format!("invalid config: {msg}")))
    }
}

fn default_one() -> f64 {
    1.0
}

fn default_delta() -> f64 {
    0.01
}

fn default_val_fraction() -> f64 {
    0.2
}

fn default_mc_trials() -> usize {
    200
}

const X_FILE: &str = "X.csv";
const Y_FILE: &str = "Y.csv";
const CORE_FILE: &str = "M_star.csv";

/// Side information, and the core when present, from an instance directory.
struct Loaded {
    side: SideInfoPair,
    instance: Option<ProblemInstance>,
}

impl Loaded {
    fn instance(&self, dir: &Path) -> Result<&ProblemInstance, Failure> {
        self.instance
            .as_ref()
            .ok_or_else(|| Failure::runtime(format!("{} has no {CORE_FILE}", dir.display())))
    }
}

fn load_instance(out: &Outputs, dir: &Path) -> Result<Loaded, Failure> {
    let read = |name: &str| -> Result<DMatrix<f64>, Failure> {
        let p = dir.join(name);
        out.read_input(&p)?;
        io::read_matrix_csv(&p).runtime(&format!("cannot load {}", p.display()))
    };
    let x = read(X_FILE)?;
    let y = read(Y_FILE)?;
    let side = SideInfoPair::new(&x, &y)?;
    let instance = if dir.join(CORE_FILE).exists() {
        Some(build_problem_instance(&x, &y, &read(CORE_FILE)?)?)
    } else {
        None
    };
    Ok(Loaded { side, instance })
}

fn load_observations(out: &Outputs, path: &Path, side: &SideInfoPair) -> Result<ObservationSet, Failure> {
    out.read_input(path)?;
    io::read_observations_csv(path, side.m(), side.n()).runtime(&format!("cannot load {}", path.display()))
}

fn write_instance(out: &Outputs, inst: &ProblemInstance) -> Result<(), Failure> {
    out.write_matrix(X_FILE, inst.side.x())?;
    out.write_matrix(Y_FILE, inst.side.y())?;
    out.write_matrix(CORE_FILE, &inst.side.core_to_original(inst.mstar())?)?;
    out.write_matrix("R.csv", inst.ground_truth())
}

fn instance_summary(inst: &ProblemInstance) -> Value {
    json!({
        "m": inst.m(),
        "n": inst.n(),
        "a": inst.a(),
        "b": inst.b(),
        "rank": inst.rank(),
        "sigma0": inst.side.sigma0(),
        "target_fro_norm": inst.ground_truth().norm(),
        "core_nuclear_norm": inst.mstar_nuclear_norm(),
        "incoherence": inst.incoherence(),
    })
}

fn write_solution(out: &Outputs, side: &SideInfoPair, sol: &Solution, extra: Value, truth: Option<&ProblemInstance>) -> Result<(), Failure> {
    out.write_matrix("M_hat.csv", &side.core_to_original(&sol.mhat)?)?;
    out.write_matrix("R_hat.csv", &sol.rhat)?;
    let mut report = serde_json::to_value(sol).runtime("cannot serialise solution")?;
    let obj = report.as_object_mut().expect("solution serialises to an object");
    obj.insert("nuclear_norm".into(), json!(linalg::nuclear_norm(&sol.mhat)));
    if let Some(inst) = truth {
        let diff = (&sol.rhat - inst.ground_truth()).norm();
        obj.insert("rel_err_fro".into(), json!(diff / inst.ground_truth().norm()));
        obj.insert("rmse_fro".into(), json!(diff / ((inst.m() * inst.n()) as f64).sqrt()));
    }
    if let Value::Object(more) = extra {
        obj.extend(more);
    }
    out.write_json("solution.json", &report)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateConfig {
    pub m: usize,
    pub n: usize,
    pub r: usize,
    pub a: usize,
    pub b: usize,
    #[serde(default = "default_one")]
    pub fro_norm: f64,
    #[serde(default)]
    pub seed: u64,
}

pub fn generate(ctx: &RunContext) -> Result<(), Failure> {
    let mut cfg: GenerateConfig = ctx.parse()?;
    cfg.seed = ctx.seed(cfg.seed);
    check(cfg.r >= 1 && cfg.r <= cfg.a && cfg.a <= cfg.m, "need 1 <= r <= a <= m")?;
    check(cfg.r <= cfg.b && cfg.b <= cfg.n, "need r <= b <= n")?;
    check(cfg.fro_norm > 0.0 && cfg.fro_norm.is_finite(), "fro_norm must be positive")?;
    let out = ctx.outputs()?;
    let inst = generate_synthetic(cfg.m, cfg.n, cfg.r, cfg.a, cfg.b, cfg.fro_norm, cfg.seed)?;
    write_instance(&out, &inst)?;
    out.write_json("instance.json", &instance_summary(&inst))?;
    ctx.finish(&out, &cfg, cfg.seed)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleConfig {
    pub instance: PathBuf,
    pub n_samples: usize,
    #[serde(default)]
    pub noise: NoiseSpec,
    #[serde(default = "default_delta")]
    pub delta5: f64,
    #[serde(default)]
    pub seed: u64,
}

pub fn sample(ctx: &RunContext) -> Result<(), Failure> {
    let mut cfg: SampleConfig = ctx.parse()?;
    cfg.seed = ctx.seed(cfg.seed);
    check(cfg.n_samples >= 1, "n_samples must be at least 1")?;
    check(cfg.noise.sdv() >= 0.0 && cfg.noise.sdv().is_finite(), "noise sdv must be non-negative")?;
    check(cfg.delta5 > 0.0 && cfg.delta5 < 1.0, "delta5 must lie in (0, 1)")?;
    let out = ctx.outputs()?;
    let loaded = load_instance(&out, &cfg.instance)?;
    let inst = loaded.instance(&cfg.instance)?;
    let obs = sample_observations(inst, cfg.n_samples, cfg.noise, cfg.seed)?;
    let path = out.path("observations.csv")?;
    io::write_observations_csv(&path, &obs).runtime("cannot write observations")?;
    out.write_json("multiplicity.json", &multiplicity_stats(&obs, cfg.delta5)?)?;
    ctx.finish(&out, &cfg, cfg.seed)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolveConfig {
    pub instance: PathBuf,
    pub observations: PathBuf,
    /// Fixed λ; cross-validation over `lambda_grid` when absent.
    #[serde(default)]
    pub lambda: Option<f64>,
    #[serde(default = "synthlab::default_lambda_grid")]
    pub lambda_grid: Vec<f64>,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    #[serde(default)]
    pub solver: SolverOptions,
    #[serde(default)]
    pub seed: u64,
}

fn split_observations(obs: &ObservationSet, val_fraction: f64, seed: u64) -> Result<(ObservationSet, ObservationSet), Failure> {
    let n_val = ((obs.len() as f64) * val_fraction).round() as usize;
    if n_val == 0 || n_val >= obs.len() {
        return Err(Failure::runtime(format!("cannot hold out {val_fraction} of {} samples", obs.len())));
    }
    let mut idx: Vec<usize> = (0..obs.len()).collect();
    idx.shuffle(&mut seeded(seed));
    Ok((obs.subset(&idx[n_val..]), obs.subset(&idx[..n_val])))
}

pub fn solve(ctx: &RunContext) -> Result<(), Failure> {
    let mut cfg: SolveConfig = ctx.parse()?;
    cfg.seed = ctx.seed(cfg.seed);
    cfg.solver.validate().map_err(Failure::config)?;
    if let Some(l) = cfg.lambda {
        check(l >= 0.0 && l.is_finite(), "lambda must be non-negative")?;
    } else {
        check(!cfg.lambda_grid.is_empty(), "lambda_grid must be non-empty")?;
        check(cfg.lambda_grid.iter().all(|l| *l >= 0.0), "lambda_grid entries must be non-negative")?;
        check(cfg.lambda_grid.windows(2).all(|w| w[0] <= w[1]), "lambda_grid must be ascending")?;
        check(cfg.val_fraction > 0.0 && cfg.val_fraction <= 0.5, "val_fraction must lie in (0, 0.5]")?;
    }
    let out = ctx.outputs()?;
    let loaded = load_instance(&out, &cfg.instance)?;
    let obs = load_observations(&out, &cfg.observations, &loaded.side)?;
    let (sol, extra) = match cfg.lambda {
        Some(l) => (solve_lagrangian(&loaded.side, &obs, l, &cfg.solver)?, json!({ "mode": "fixed" })),
        None => {
            let (train, val) = split_observations(&obs, cfg.val_fraction, mix_seed(cfg.seed, &[1]))?;
            let cv = cross_validate_lambda(&loaded.side, &train, &val, &cfg.lambda_grid, &cfg.solver)?;
            let extra = json!({
                "mode": "cross_validated",
                "lambda_grid": cfg.lambda_grid,
                "val_errors": cv.val_errors,
                "lambda_selected": cv.lambda_star,
            });
            (cv.solution, extra)
        }
    };
    write_solution(&out, &loaded.side, &sol, extra, loaded.instance.as_ref())?;
    ctx.finish(&out, &cfg, cfg.seed)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolveExactConfig {
    pub instance: PathBuf,
    pub observations: PathBuf,
    #[serde(default)]
    pub solver: SolverOptions,
}

pub fn solve_exact(ctx: &RunContext) -> Result<(), Failure> {
    let cfg: SolveExactConfig = ctx.parse()?;
    cfg.solver.validate().map_err(Failure::config)?;
    let out = ctx.outputs()?;
    let loaded = load_instance(&out, &cfg.instance)?;
    let obs = load_observations(&out, &cfg.observations, &loaded.side)?;
    let sol = exact(&loaded.side, &obs, &cfg.solver)?;
    write_solution(&out, &loaded.side, &sol, json!({ "mode": "exact" }), loaded.instance.as_ref())?;
    ctx.finish(&out, &cfg, ctx.seed(cfg.solver.seed))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CertifyConfig {
    pub instance: PathBuf,
    /// Observation file; batches are drawn fresh when absent.
    #[serde(default)]
    pub observations: Option<PathBuf>,
    #[serde(default)]
    pub q: Option<usize>,
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default = "default_tau")]
    pub tau: TauChoice,
    #[serde(default)]
    pub seed: u64,
}

fn default_tau() -> TauChoice {
    TauChoice::Observed
}

pub fn certify(ctx: &RunContext) -> Result<(), Failure> {
    let mut cfg: CertifyConfig = ctx.parse()?;
    cfg.seed = ctx.seed(cfg.seed);
    check(cfg.delta > 0.0 && cfg.delta < 1.0, "delta must lie in (0, 1)")?;
    check(cfg.q.is_none_or(|q| q >= 1), "q must be at least 1")?;
    check(cfg.batch_size.is_none_or(|t| t >= 1), "batch_size must be at least 1")?;
    match cfg.tau {
        TauChoice::Fixed { tau } => check(tau > 0.0, "fixed tau must be positive")?,
        TauChoice::Tau5 { delta5 } => check(delta5 > 0.0 && delta5 < 1.0, "delta5 must lie in (0, 1)")?,
        TauChoice::Observed => {}
    }
    check(
        cfg.observations.is_some() || matches!(cfg.tau, TauChoice::Observed),
        "tau other than observed needs an observation file",
    )?;
    let out = ctx.outputs()?;
    let loaded = load_instance(&out, &cfg.instance)?;
    let inst = loaded.instance(&cfg.instance)?;
    let schedule = default_golfing_schedule(inst, cfg.delta);
    let report = match &cfg.observations {
        Some(path) => {
            let obs = load_observations(&out, path, &inst.side)?;
            let q = cfg.q.unwrap_or(schedule.q);
            let batch_size = cfg.batch_size.unwrap_or(obs.len() / q);
            let params = GolfingParams { q, batch_size, seed: cfg.seed, tau: cfg.tau };
            golfing_certificate_with(inst, &obs, &params)?
        }
        None => {
            let q = cfg.q.unwrap_or(schedule.q);
            let batch_size = cfg.batch_size.unwrap_or(schedule.batch_size);
            golfing_certificate_sampled(inst, q, batch_size, cfg.seed)?
        }
    };
    out.write_matrix("Y_cert.csv", &report.y_cert)?;
    out.write_json(
        "certificate.json",
        &json!({ "report": report, "default_schedule": schedule, "incoherence": inst.incoherence() }),
    )?;
    ctx.finish(&out, &cfg, cfg.seed)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnoseConfig {
    pub instance: PathBuf,
    pub observations: PathBuf,
    /// Estimated core `M̂` in the basis of `X.csv`, `Y.csv`; solved here
    /// when absent.
    #[serde(default)]
    pub estimate: Option<PathBuf>,
    pub sdv: f64,
    /// Penalty used for the estimate; the middle of the theory window when
    /// absent.
    #[serde(default)]
    pub lambda: Option<f64>,
    #[serde(default = "DiagnosticParams::default")]
    pub params: DiagnosticParams,
    #[serde(default)]
    pub solver: SolverOptions,
}

pub fn diagnose(ctx: &RunContext) -> Result<(), Failure> {
    let cfg: DiagnoseConfig = ctx.parse()?;
    check(cfg.sdv >= 0.0 && cfg.sdv.is_finite(), "sdv must be non-negative")?;
    check(cfg.lambda.is_none_or(|l| l >= 0.0), "lambda must be non-negative")?;
    let p = cfg.params;
    check(p.c >= 1.0, "params.c must be at least 1")?;
    check(p.delta0 > 0.0 && p.delta0 < 1.0 && p.delta5 > 0.0 && p.delta5 < 1.0, "params deltas must lie in (0, 1)")?;
    cfg.solver.validate().map_err(Failure::config)?;
    let out = ctx.outputs()?;
    let loaded = load_instance(&out, &cfg.instance)?;
    let inst = loaded.instance(&cfg.instance)?;
    let obs = load_observations(&out, &cfg.observations, &inst.side)?;
    let lambda = match cfg.lambda {
        Some(l) => l,
        None => lambda_from_theory(cfg.sdv, inst.side.sigma0(), inst.a(), obs.len(), p.c)?.1,
    };
    let sol = match &cfg.estimate {
        Some(path) => {
            out.read_input(path)?;
            let m0 = io::read_matrix_csv(path).runtime(&format!("cannot load {}", path.display()))?;
            let mhat = inst.side.core_from_original(&m0)?;
            let rhat = inst.side.embed(&mhat);
            Solution {
                mhat,
                rhat,
                objective_trace: Vec::new(),
                iters: 0,
                converged: true,
                kkt_residual: f64::NAN,
                feasibility_residual: f64::NAN,
                lambda,
            }
        }
        None => {
            let sol = solve_lagrangian(&inst.side, &obs, lambda, &cfg.solver)?;
            out.write_matrix("M_hat.csv", &inst.side.core_to_original(&sol.mhat)?)?;
            sol
        }
    };
    let rec = check_recovery_diagnostics(&sol, inst, &obs, lambda, cfg.sdv, &p)?;
    out.write_json("diagnostics.json", &rec)?;
    ctx.finish(&out, &cfg, ctx.seed(cfg.solver.seed))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundsConfig {
    pub params: BoundParams,
    #[serde(rename = "N_grid", alias = "n_grid")]
    pub n_grid: Vec<usize>,
}

#[derive(Debug, Clone, Serialize)]
struct BoundsRow {
    #[serde(rename = "N")]
    n_samples: usize,
    above_threshold_explicit: bool,
    above_threshold_surrogate: bool,
    tau5: f64,
    lambda_lo: f64,
    lambda_mid: f64,
    lambda_hi: f64,
    bounded_loss_bound: f64,
    absolute_loss_bound: f64,
}

pub fn bounds(ctx: &RunContext) -> Result<(), Failure> {
    let cfg: BoundsConfig = ctx.parse()?;
    cfg.params.validate().map_err(Failure::config)?;
    check(!cfg.n_grid.is_empty() && cfg.n_grid.iter().all(|&n| n >= 1), "N_grid must hold positive sizes")?;
    let out = ctx.outputs()?;
    let p = &cfg.params;
    let threshold = bounds::exact_recovery_threshold(p)?;
    let delta5 = p.split().delta2;
    let mut rows = Vec::with_capacity(cfg.n_grid.len());
    for &n in &cfg.n_grid {
        let (lo, mid, hi) = bounds::lambda_window(p.sdv, p.sigma0, p.a, n, p.c);
        rows.push(BoundsRow {
            n_samples: n,
            above_threshold_explicit: n as f64 >= threshold.n_star_explicit,
            above_threshold_surrogate: n as f64 >= threshold.n_star_tilde,
            tau5: bounds::tau5(n, p.m, p.n, delta5),
            lambda_lo: lo,
            lambda_mid: mid,
            lambda_hi: hi,
            bounded_loss_bound: bounds::generalization_bound(p, n, BoundVariant::BoundedLoss)?,
            absolute_loss_bound: bounds::generalization_bound(p, n, BoundVariant::AbsoluteLoss)?,
        });
    }
    let mut csv = String::from(
        "N,above_threshold_explicit,above_threshold_surrogate,tau5,lambda_lo,lambda_mid,lambda_hi,bounded_loss_bound,absolute_loss_bound\n",
    );
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.n_samples,
            r.above_threshold_explicit,
            r.above_threshold_surrogate,
            io::fmt_f64(r.tau5),
            io::fmt_f64(r.lambda_lo),
            io::fmt_f64(r.lambda_mid),
            io::fmt_f64(r.lambda_hi),
            io::fmt_f64(r.bounded_loss_bound),
            io::fmt_f64(r.absolute_loss_bound),
        ));
    }
    out.write_text("bounds.csv", &csv)?;
    out.write_json("bounds.json", &json!({ "threshold": threshold, "rows": rows }))?;
    ctx.finish(&out, &cfg, 0)
}

/// A sweep config: either complete, or a preset name plus overrides.
fn resolve_sweep(value: &Value) -> Result<SweepConfig, Failure> {
    let mut obj = value.as_object().cloned().unwrap_or_default();
    let merged = match obj.remove("preset") {
        Some(Value::String(name)) => {
            let base = SweepConfig::preset(&name)
                .ok_or_else(|| Failure::config(format!("unknown preset {name:?} (expected desk or paper-figure)")))?;
            let mut base = serde_json::to_value(base).runtime("cannot serialise preset")?;
            let target = base.as_object_mut().expect("sweep config serialises to an object");
            for (k, v) in obj {
                let key = if k == "n_grid" { "N_grid".to_string() } else { k };
                target.insert(key, v);
            }
            base
        }
        Some(other) => return Err(Failure::config(format!("preset must be a string, got {other}"))),
        None => Value::Object(obj),
    };
    parse_value(merged)
}

pub fn sweep(ctx: &RunContext) -> Result<(), Failure> {
    let mut cfg = resolve_sweep(&ctx.input.value)?;
    cfg.seed = ctx.seed(cfg.seed);
    cfg.validate().map_err(Failure::config)?;
    let out = ctx.outputs()?;
    let path = out.path("sweep.csv")?;
    let mut w = BufWriter::new(File::create(&path).runtime("cannot create sweep.csv")?);
    writeln!(w, "{SWEEP_CSV_HEADER}").runtime("cannot write sweep.csv")?;
    log::info!("sweep: {} cells", cfg.cell_count());
    let result = run_sweep(&cfg, |row| {
        writeln!(w, "{}", row.csv_line())?;
        Ok(())
    })?;
    w.flush().runtime("cannot write sweep.csv")?;
    let summary = summarize(&result.rows);
    let shapes: Vec<Value> = cfg
        .sigma_list
        .iter()
        .map(|&s| {
            let curve: Vec<f64> = summary.iter().filter(|r| r.sigma == s).map(|r| r.rmse_fro_mean).collect();
            json!({ "sigma": s, "rmse_fro_shape": CurveShape::analyze(&curve) })
        })
        .collect();
    let failures: usize = summary.iter().map(|r| r.failures).sum();
    out.write_json(
        "summary.json",
        &json!({ "cells": result.rows.len(), "failures": failures, "summary": summary, "curves": shapes }),
    )?;
    ctx.finish(&out, &cfg, cfg.seed)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RademacherConfig {
    pub instance: PathBuf,
    pub m_norm: f64,
    #[serde(rename = "N_grid", alias = "n_grid")]
    pub n_grid: Vec<usize>,
    #[serde(default = "default_mc_trials")]
    pub mc_trials: usize,
    #[serde(default)]
    pub seed: u64,
}

pub fn rademacher(ctx: &RunContext) -> Result<(), Failure> {
    let mut cfg: RademacherConfig = ctx.parse()?;
    cfg.seed = ctx.seed(cfg.seed);
    check(cfg.m_norm >= 0.0 && cfg.m_norm.is_finite(), "m_norm must be non-negative")?;
    check(!cfg.n_grid.is_empty() && cfg.n_grid.iter().all(|&n| n >= 1), "N_grid must hold positive sizes")?;
    check(cfg.mc_trials >= 1, "mc_trials must be at least 1")?;
    let out = ctx.outputs()?;
    let loaded = load_instance(&out, &cfg.instance)?;
    let mut csv = String::from("N,estimate,bound\n");
    for &n in &cfg.n_grid {
        let est = empirical_rademacher(&loaded.side, cfg.m_norm, n, cfg.mc_trials, mix_seed(cfg.seed, &[n as u64]))?;
        let bound = bounds::rademacher_bound(&loaded.side, cfg.m_norm, n)?;
        csv.push_str(&format!("{n},{},{}\n", io::fmt_f64(est), io::fmt_f64(bound)));
    }
    out.write_text("rademacher.csv", &csv)?;
    ctx.finish(&out, &cfg, cfg.seed)
}
