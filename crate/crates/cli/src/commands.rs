//! The five subcommands. Each returns a JSON report with a fixed field
//! order, an exit code and, for `build` and `simulate`, a CSV payload.

use std::sync::Arc;
use std::time::Instant;

use exactsde_core::catalog::{check_model, error_witness, Outcome as Verdict, PipelineReport, Stage};
use exactsde_core::commutator::CheckReport;
use exactsde_core::diffeo::{flow_straighten, verify_p3, Chart};
use exactsde_core::numerics::sample_interior;
use exactsde_core::representation::{build_representation, validate_representation, CanonicalParams, Representation};
use exactsde_core::simulate::{
    couple_and_compare, euler_maruyama, milstein, moment_stats, precompute_increment_laws, simulate_exact_with_laws,
    MomentStats, PathBundle, Scheme, StrongErrorRow,
};
use exactsde_core::Grid;
use nalgebra::DVector;
use serde::Serialize;

use crate::config::RunConfig;
use crate::{CliError, Outcome};

/// Minimum number of representation intervals between `s` and `t_end`.
const REP_INTERVALS: usize = 60;
const DEFAULT_DT: f64 = 1.0 / 256.0;
const PROBES: usize = 50;
/// Finest coupling grid of the benchmark ladder, as a power of two.
const LADDER_FINEST: u32 = 12;
const LADDER_COARSEST: u32 = 4;

fn exit_code(outcome: Verdict) -> i32 {
    match outcome {
        Verdict::Representable => 0,
        Verdict::NotRepresentable => 2,
        Verdict::Inconclusive => 3,
    }
}

fn report(value: impl Serialize, code: i32, csv: Option<Vec<u8>>) -> Result<Outcome, CliError> {
    Ok(Outcome {
        report: serde_json::to_value(value)?,
        code,
        csv,
    })
}

#[derive(Serialize)]
struct CheckOutput<'a> {
    command: &'static str,
    id: &'a str,
    p: usize,
    d: usize,
    r: usize,
    tolerance: f64,
    points: usize,
    report: PipelineReport,
}

/// Runs the checks. A numeric chart is only straightened once the
/// diffusion and drift conditions hold; a straightening failure is reported
/// at that stage.
fn checked(cfg: &RunConfig) -> (PipelineReport, Option<CanonicalParams>, Option<Arc<dyn Chart>>) {
    if cfg.numeric_chart() {
        let (report, _) = check_model(&cfg.model, None, cfg.points, cfg.tol);
        if report.outcome != Verdict::Representable {
            return (report, None, None);
        }
        if let Err(e) = cfg.chart() {
            let mut report = report;
            report.outcome = Verdict::NotRepresentable;
            report.failed_stage = Some(Stage::Straighten);
            report.error = Some(e.to_string());
            if let CliError::Core(core) = &e {
                report.witness = error_witness(core);
            }
            return (report, None, None);
        }
    }
    let chart = cfg.chart().ok().flatten();
    let (report, params) = check_model(&cfg.model, chart.clone(), cfg.points, cfg.tol);
    (report, params, chart)
}

pub fn check(cfg: &RunConfig) -> Result<Outcome, CliError> {
    let (report, _, _) = checked(cfg);
    let code = exit_code(report.outcome);
    let out = CheckOutput {
        command: "check",
        id: &cfg.id,
        p: cfg.model.p(),
        d: cfg.model.d(),
        r: cfg.model.r(),
        tolerance: cfg.tol,
        points: cfg.points,
        report,
    };
    self::report(out, code, None)
}

#[derive(Serialize)]
struct StraightenOutput<'a> {
    command: &'static str,
    id: &'a str,
    anchor: Vec<f64>,
    anchor_time: f64,
    permutation: Vec<usize>,
    valid_lower: Vec<f64>,
    valid_upper: Vec<f64>,
    p3: CheckReport,
    /// Largest anchored difference from the closed-form chart.
    reference_gap: Option<f64>,
    probes: usize,
    round_trip: f64,
}

/// `max |(Λ(x) − Λ(x̂)) − (Λ_ref(x) − Λ_ref(x̂))|` with the reference's
/// straightened rows reordered to match the numeric chart's permutation.
fn anchored_gap(
    numeric: &dyn Chart,
    reference: &dyn Chart,
    r: usize,
    anchor: &DVector<f64>,
    t: f64,
    probes: &[DVector<f64>],
) -> Result<f64, CliError> {
    let ref_rank = reference.permutation().inverse();
    let order = numeric.permutation().order().to_vec();
    let align = |z: DVector<f64>| {
        let mut out = z.clone();
        for (k, &col) in order.iter().enumerate().take(r) {
            out[k] = z[ref_rank.order()[col]];
        }
        out
    };
    let n0 = numeric.forward(anchor, t)?;
    let r0 = align(reference.forward(anchor, t)?);
    let mut gap: f64 = 0.0;
    for x in probes {
        let dn = numeric.forward(x, t)? - &n0;
        let dr = align(reference.forward(x, t)?) - &r0;
        gap = gap.max((dn - dr).amax());
    }
    Ok(gap)
}

pub fn straighten(cfg: &RunConfig) -> Result<Outcome, CliError> {
    let chart = Arc::new(flow_straighten(&cfg.model, &cfg.anchor, cfg.s)?);
    let p3 = verify_p3(chart.clone(), &cfg.model, cfg.points, cfg.tol)?.report;
    let probes = sample_interior(&chart.valid_box().shrink(0.05), PROBES, 11, 0.0);
    let reference_gap = match &cfg.reference_chart {
        Some(reference) => Some(anchored_gap(
            chart.as_ref(),
            reference.as_ref(),
            cfg.model.r(),
            &cfg.anchor,
            cfg.s,
            &probes,
        )?),
        None => None,
    };
    let mut round_trip: f64 = 0.0;
    for x in &probes {
        let back = chart.inverse(&chart.forward(x, cfg.s)?, cfg.s)?;
        round_trip = round_trip.max((back - x).amax());
    }
    let code = if p3.passed() { 0 } else { 2 };
    let out = StraightenOutput {
        command: "straighten",
        id: &cfg.id,
        anchor: cfg.anchor.iter().copied().collect(),
        anchor_time: cfg.s,
        permutation: chart.permutation().order().to_vec(),
        valid_lower: chart.valid_box().lower().iter().copied().collect(),
        valid_upper: chart.valid_box().upper().iter().copied().collect(),
        p3,
        reference_gap,
        probes: probes.len(),
        round_trip,
    };
    report(out, code, None)
}

/// Checks the model, then builds the representation from the configured
/// start on a grid that refines the output grid.
fn representation(cfg: &RunConfig) -> Result<(PipelineReport, Option<Representation>), CliError> {
    let (report, extracted, chart) = checked(cfg);
    if report.outcome != Verdict::Representable {
        return Ok((report, None));
    }
    let Some(chart) = chart else {
        return Err(CliError::Config("building a representation needs a chart".into()));
    };
    let params: CanonicalParams = match cfg.params.clone().or(extracted) {
        Some(p) => p,
        None => return Err(CliError::Config("no canonical parameters available".into())),
    };
    let output = cfg.output_grid()?;
    let grid = output.refine(REP_INTERVALS.div_ceil(cfg.intervals));
    let rep = build_representation(&params, chart, &cfg.start, cfg.s, &grid)?;
    Ok((report, Some(rep)))
}

fn not_built(cfg: &RunConfig, command: &'static str, report: PipelineReport) -> Result<Outcome, CliError> {
    #[derive(Serialize)]
    struct Rejected<'a> {
        command: &'static str,
        id: &'a str,
        built: bool,
        report: PipelineReport,
    }
    let code = exit_code(report.outcome);
    self::report(
        Rejected {
            command,
            id: &cfg.id,
            built: false,
            report,
        },
        code,
        None,
    )
}

#[derive(Serialize)]
struct BuildOutput<'a> {
    command: &'static str,
    id: &'a str,
    built: bool,
    start: Vec<f64>,
    s: f64,
    valid_until: f64,
    nodes: usize,
    checks: PipelineReport,
    validation: CheckReport,
}

pub fn build(cfg: &RunConfig) -> Result<Outcome, CliError> {
    let (checks, rep) = representation(cfg)?;
    let Some(rep) = rep else {
        return not_built(cfg, "build", checks);
    };
    let validation = validate_representation(&rep, &cfg.model, cfg.points, cfg.tol);
    let code = if validation.passed() { 0 } else { 2 };
    let csv = rep.to_csv().into_bytes();
    let out = BuildOutput {
        command: "build",
        id: &cfg.id,
        built: true,
        start: cfg.start.iter().copied().collect(),
        s: cfg.s,
        valid_until: rep.valid_until(),
        nodes: rep.nodes().len(),
        checks,
        validation,
    };
    report(out, code, Some(csv))
}

/// Steps per output interval for a requested scheme step size.
fn refinement(output: &Grid, dt: f64) -> usize {
    let widest = output.nodes().windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max);
    ((widest / dt).round() as usize).max(1)
}

#[derive(Serialize)]
struct SimulateOutput<'a> {
    command: &'static str,
    id: &'a str,
    scheme: Scheme,
    seed: u64,
    paths: usize,
    nodes: usize,
    dt: Option<f64>,
    precompute_seconds: f64,
    wall_seconds: f64,
    survival: Vec<f64>,
    moments: Vec<MomentStats>,
    oracle_mean: Option<Vec<f64>>,
}

fn survival(bundle: &PathBundle) -> Vec<f64> {
    (0..bundle.grid().len())
        .map(|k| bundle.survivors(k) as f64 / bundle.n_paths() as f64)
        .collect()
}

pub fn simulate(cfg: &RunConfig) -> Result<Outcome, CliError> {
    let output = cfg.output_grid()?;
    let (bundle, precompute, wall, dt) = match cfg.scheme {
        Scheme::Exact => {
            let (checks, rep) = representation(cfg)?;
            let Some(rep) = rep else {
                return not_built(cfg, "simulate", checks);
            };
            let clock = Instant::now();
            let laws = precompute_increment_laws(&rep, &output)?;
            let precompute = clock.elapsed().as_secs_f64();
            let clock = Instant::now();
            let bundle = simulate_exact_with_laws(&rep, &output, &laws, cfg.paths, cfg.seed)?;
            (bundle, precompute, clock.elapsed().as_secs_f64(), None)
        }
        scheme => {
            let k = refinement(&output, cfg.dt.unwrap_or(DEFAULT_DT));
            let fine = output.refine(k);
            let clock = Instant::now();
            let bundle = if scheme == Scheme::Euler {
                euler_maruyama(&cfg.model, &cfg.start, &fine, &output, cfg.paths, cfg.seed)?
            } else {
                milstein(&cfg.model, &cfg.start, &fine, &output, cfg.paths, cfg.seed)?
            };
            let dt = (output.end() - output.start()) / (fine.len() - 1) as f64;
            (bundle, 0.0, clock.elapsed().as_secs_f64(), Some(dt))
        }
    };
    let moments: Vec<MomentStats> = output
        .nodes()
        .iter()
        .filter_map(|&t| moment_stats(&bundle, t).ok())
        .collect();
    let oracle_mean = cfg
        .mean_oracle
        .as_ref()
        .map(|m| m(cfg.t_end - cfg.s).iter().copied().collect());
    let mut csv = Vec::new();
    bundle.write_csv(&mut csv)?;
    let out = SimulateOutput {
        command: "simulate",
        id: &cfg.id,
        scheme: cfg.scheme,
        seed: cfg.seed,
        paths: cfg.paths,
        nodes: output.len(),
        dt,
        precompute_seconds: precompute,
        wall_seconds: wall,
        survival: survival(&bundle),
        moments,
        oracle_mean,
    };
    report(out, 0, Some(csv))
}

#[derive(Serialize)]
struct LadderRow {
    dt: f64,
    /// `max_i |E[X_euler − X_exact]_i|` at `t_end` on coupled paths.
    weak_error: f64,
    weak_std_err: f64,
    /// `max_i |mean(X_euler) − E[X]_i|` against the oracle.
    oracle_error: f64,
    strong_error: f64,
    euler_seconds: f64,
}

#[derive(Serialize)]
struct ExactRow {
    oracle_error: f64,
    oracle_std_err: f64,
    precompute_seconds: f64,
    sample_seconds: f64,
    output_nodes: usize,
}

#[derive(Serialize)]
struct BenchmarkOutput<'a> {
    command: &'static str,
    id: &'a str,
    seed: u64,
    paths: usize,
    t_end: f64,
    target_error: f64,
    oracle_mean: Vec<f64>,
    ladder: Vec<LadderRow>,
    /// Slope of `log weak_error` against `log dt`.
    weak_order: f64,
    exact: ExactRow,
    exact_coarse: ExactRow,
    /// Largest ladder step whose weak error meets the target.
    matched_dt: Option<f64>,
    euler_seconds_at_match: Option<f64>,
    speedup: Option<f64>,
}

fn oracle_gap(bundle: &PathBundle, oracle: &DVector<f64>) -> Result<(f64, f64), CliError> {
    let stats = moment_stats(bundle, bundle.grid().end())?;
    let mut worst = (0.0f64, 0.0f64);
    for i in 0..oracle.len() {
        let e = (stats.mean[i] - oracle[i]).abs();
        if e >= worst.0 {
            worst = (e, stats.std_err[i]);
        }
    }
    Ok(worst)
}

fn fit_slope(rows: &[LadderRow]) -> f64 {
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.weak_error > 0.0)
        .map(|r| (r.dt.ln(), r.weak_error.ln()))
        .collect();
    if pts.len() < 2 {
        return f64::NAN;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

fn timed_exact(rep: &Representation, grid: &Grid, cfg: &RunConfig, oracle: &DVector<f64>) -> Result<ExactRow, CliError> {
    let clock = Instant::now();
    let laws = precompute_increment_laws(rep, grid)?;
    let precompute = clock.elapsed().as_secs_f64();
    let clock = Instant::now();
    let bundle = simulate_exact_with_laws(rep, grid, &laws, cfg.paths, cfg.seed)?;
    let sample = clock.elapsed().as_secs_f64();
    let (err, se) = oracle_gap(&bundle, oracle)?;
    Ok(ExactRow {
        oracle_error: err,
        oracle_std_err: se,
        precompute_seconds: precompute,
        sample_seconds: sample,
        output_nodes: grid.len(),
    })
}

pub fn benchmark(cfg: &RunConfig) -> Result<Outcome, CliError> {
    let Some(mean) = &cfg.mean_oracle else {
        return Err(CliError::Config(format!("model `{}` has no moment oracle", cfg.id)));
    };
    let oracle = mean(cfg.t_end - cfg.s);
    let (checks, rep) = representation(cfg)?;
    let Some(rep) = rep else {
        return not_built(cfg, "benchmark", checks);
    };
    let finest = Grid::uniform(cfg.s, cfg.t_end, 1 << LADDER_FINEST)?;
    let ends = Grid::new(vec![cfg.s, cfg.t_end])?;
    let factors: Vec<usize> = (0..=LADDER_FINEST - LADDER_COARSEST).map(|k| 1usize << k).collect();
    let coupled = couple_and_compare(&rep, &cfg.model, Scheme::Euler, &finest, &ends, &factors, cfg.paths, cfg.seed)?;

    let mut ladder = Vec::with_capacity(factors.len());
    for (row, &f) in coupled.rows.iter().zip(&factors) {
        let StrongErrorRow {
            dt,
            error,
            weak_error,
            weak_std_err,
            ..
        } = *row;
        let fine = Grid::uniform(cfg.s, cfg.t_end, (1 << LADDER_FINEST) / f)?;
        let clock = Instant::now();
        let bundle = euler_maruyama(&cfg.model, &cfg.start, &fine, &ends, cfg.paths, cfg.seed)?;
        let euler_seconds = clock.elapsed().as_secs_f64();
        ladder.push(LadderRow {
            dt,
            weak_error,
            weak_std_err,
            oracle_error: oracle_gap(&bundle, &oracle)?.0,
            strong_error: error,
            euler_seconds,
        });
    }
    let exact = timed_exact(&rep, &cfg.output_grid()?, cfg, &oracle)?;
    let exact_coarse = timed_exact(&rep, &ends, cfg, &oracle)?;
    let matched = ladder
        .iter()
        .filter(|r| r.weak_error <= cfg.target_error)
        .max_by(|a, b| a.dt.total_cmp(&b.dt));
    let out = BenchmarkOutput {
        command: "benchmark",
        id: &cfg.id,
        seed: cfg.seed,
        paths: cfg.paths,
        t_end: cfg.t_end,
        target_error: cfg.target_error,
        oracle_mean: oracle.iter().copied().collect(),
        weak_order: fit_slope(&ladder),
        matched_dt: matched.map(|r| r.dt),
        euler_seconds_at_match: matched.map(|r| r.euler_seconds),
        speedup: matched.map(|r| r.euler_seconds / exact.sample_seconds),
        exact,
        exact_coarse,
        ladder,
    };
    report(out, 0, None)
}
