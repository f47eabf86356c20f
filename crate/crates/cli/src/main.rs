use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};

use pvtrip::experiment::{linspace, mitigation_trajectory, sweep, validate, StatsMode, SweepAxis, TrajectoryOptions, ValidationOptions};
use pvtrip::export::{fmt_num, lambda_table, trace_table, write_json, write_text, Table};
use pvtrip::feeder::{parse_feeder, path_impedances, FeederModel, VoltageBand};
use pvtrip::mitigate::{design_countermeasure, quantify_risk, CountermeasureReport, MitigationConfig, RiskOptions};
use pvtrip::model::{build_params, macro_state, voltage_statistics, ModelDocument, Provenance};
use pvtrip::solver::SolverOptions;
use pvtrip::stats::{estimate_statistics, read_series, read_statistics, write_series, PowerStatistics, StatisticsDocument};
use pvtrip::synth;
use pvtrip::truth::{oracle_enumerate, resolve_config, InconsistencyPolicy, ResolveOptions, TieRule};
use pvtrip::Error;

const EXIT_INPUT: u8 = 2;
const EXIT_INFEASIBLE: u8 = 3;
const EXIT_NONCONVERGENCE: u8 = 4;

/// Voltage-driven PV inverter tripping risk on radial feeders.
#[derive(Parser)]
#[command(name = "pvtrip", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Model ON-probabilities, macro-state and expected PV power for one statistics window.
    Assess {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        input: StatsInput,
    },
    /// Compare model bounds with simulated switching window by window.
    Validate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        series: PathBuf,
    },
    /// Repeat validation along a penetration, power-factor or dead-band axis.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        series: PathBuf,
        #[arg(long, value_enum)]
        axis: Axis,
        /// START:STOP:STEPS
        #[arg(long)]
        grid: String,
        #[arg(long, value_enum, default_value = "analytic")]
        stats_mode: Mode,
    },
    /// Choose the reference voltage that maximizes expected PV power.
    Mitigate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        input: StatsInput,
        /// Current reference setpoint in per-unit squared (default: feeder v0).
        #[arg(long)]
        v0_initial: Option<f64>,
        /// Allowed setpoint change RMIN,RMAX in per-unit squared.
        #[arg(long, default_value = "-0.1,0.1", allow_hyphen_values = true)]
        rate: String,
        #[arg(long, default_value_t = 401)]
        grid_points: usize,
        /// Keep each window's starting setpoint at v0_initial instead of the previous choice.
        #[arg(long)]
        no_chain: bool,
    },
    /// Enumerate every consistent switch configuration per step and check the resolver against it.
    Oracle {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        series: PathBuf,
        /// Only this step index.
        #[arg(long)]
        step: Option<usize>,
    },
    /// Write a synthetic feeder and series.
    Synth {
        #[arg(long, value_enum)]
        fixture: Fixture,
        #[arg(long, default_value_t = 1440)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Node count for random fixtures.
        #[arg(long, default_value_t = 6)]
        nodes: usize,
        /// PV rating multiplier on switched nodes.
        #[arg(long, default_value_t = 1.0)]
        pv_scale: f64,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    feeder: PathBuf,
    #[arg(long, default_value_t = 60)]
    window: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Voltage magnitude limits VMIN,VMAX in per-unit (overrides the feeder band).
    #[arg(long)]
    band: Option<String>,
    #[arg(long, default_value_t = 0.5)]
    damping: f64,
    #[arg(long, default_value_t = 1e-9)]
    tol: f64,
    #[arg(long, default_value_t = 10_000)]
    max_iter: usize,
    #[arg(long, default_value_t = 8)]
    multistart: usize,
    #[arg(long, value_enum, default_value = "error")]
    on_inconsistent: OnInconsistent,
    #[arg(long, value_enum, default_value = "max-on")]
    tie: Tie,
}

#[derive(Args)]
struct StatsInput {
    /// Statistics JSON.
    #[arg(long, conflicts_with = "series")]
    stats: Option<PathBuf>,
    /// Series CSV; statistics come from the window at --start (whole series if omitted).
    #[arg(long)]
    series: Option<PathBuf>,
    /// First step of the statistics window.
    #[arg(long, requires = "series")]
    start: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Axis {
    Penetration,
    Pf,
    Deadband,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Analytic,
    Resample,
}

#[derive(Clone, Copy, ValueEnum)]
enum OnInconsistent {
    Error,
    Latch,
}

#[derive(Clone, Copy, ValueEnum)]
enum Tie {
    MaxOn,
    MinOn,
}

#[derive(Clone, Copy, ValueEnum)]
enum Fixture {
    Benign,
    OverVoltage,
    UnderVoltage,
    Penetration,
    Random,
    RandomLoaded,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>().map(Error::root) {
        Some(Error::EmptyFeasibleSet { .. } | Error::NoConsistentConfiguration { .. }) => EXIT_INFEASIBLE,
        Some(Error::NonConvergence { .. } | Error::NoEquilibrium { .. }) => EXIT_NONCONVERGENCE,
        _ => EXIT_INPUT,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn parse_pair(s: &str, what: &str) -> anyhow::Result<(f64, f64)> {
    let (a, b) = s.split_once(',').with_context(|| format!("{what} must be A,B, got '{s}'"))?;
    let a = a.trim().parse().with_context(|| format!("bad {what} value '{a}'"))?;
    let b = b.trim().parse().with_context(|| format!("bad {what} value '{b}'"))?;
    Ok((a, b))
}

fn parse_grid(s: &str) -> anyhow::Result<Vec<f64>> {
    let parts: Vec<&str> = s.split(':').collect();
    anyhow::ensure!(parts.len() == 3, Error::InvalidArgument(format!("grid must be START:STOP:STEPS, got '{s}'")));
    let num = |p: &str| p.trim().parse::<f64>().map_err(|_| Error::InvalidArgument(format!("bad grid value '{p}'")));
    let steps = parts[2].trim().parse::<usize>().map_err(|_| Error::InvalidArgument(format!("bad grid step count '{}'", parts[2])))?;
    Ok(linspace(num(parts[0])?, num(parts[1])?, steps)?)
}

struct Session {
    feeder: FeederModel,
    sens: pvtrip::SensitivityMatrices,
    out: PathBuf,
    window: usize,
    risk: RiskOptions,
    resolve: ResolveOptions,
}

impl Session {
    fn load(c: &Common) -> anyhow::Result<Self> {
        let mut feeder = parse_feeder(&c.feeder)?;
        if let Some(b) = &c.band {
            let (lo, hi) = parse_pair(b, "band").map_err(|e| Error::InvalidArgument(format!("{e:#}")))?;
            feeder = feeder.with_band(VoltageBand::from_pu(lo, hi)?);
        }
        if c.window == 0 {
            return Err(Error::EmptyWindow.into());
        }
        let solver = SolverOptions { damping: c.damping, tol: c.tol, max_iter: c.max_iter };
        solver.validate()?;
        let resolve = ResolveOptions {
            tie: match c.tie {
                Tie::MaxOn => TieRule::MaxOn,
                Tie::MinOn => TieRule::MinOn,
            },
            on_inconsistent: match c.on_inconsistent {
                OnInconsistent::Error => InconsistencyPolicy::Fail,
                OnInconsistent::Latch => InconsistencyPolicy::Latch,
            },
            ..Default::default()
        };
        std::fs::create_dir_all(&c.out).map_err(|source| Error::Io { path: c.out.clone(), source })?;
        let sens = path_impedances(&feeder);
        Ok(Session {
            feeder,
            sens,
            out: c.out.clone(),
            window: c.window,
            risk: RiskOptions { multistart: c.multistart, seed: c.seed, solver },
            resolve,
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn validation(&self) -> ValidationOptions {
        ValidationOptions { window: self.window, resolve: self.resolve, risk: self.risk, ..Default::default() }
    }

    /// Statistics and a label for the window they describe.
    fn statistics(&self, input: &StatsInput) -> anyhow::Result<(PowerStatistics, String)> {
        let (stats, label) = match (&input.stats, &input.series) {
            (Some(p), None) => (read_statistics(p)?, format!("stats:{}", p.display())),
            (None, Some(p)) => {
                let series = read_series(p, &self.feeder)?;
                match input.start {
                    Some(k) => {
                        let w = series.window(k, self.window)?;
                        (estimate_statistics(&w)?, format!("steps {}..{}", k, k + self.window))
                    }
                    None => (estimate_statistics(&series)?, format!("steps 0..{}", series.len())),
                }
            }
            _ => return Err(Error::InvalidArgument("give exactly one of --stats or --series".into()).into()),
        };
        if stats.node_ids != self.feeder.node_ids() {
            return Err(Error::MismatchedNodes("statistics node ids differ from the feeder's".into()).into());
        }
        Ok((stats, label))
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Assess { common, input } => assess(&Session::load(&common)?, &input),
        Command::Validate { common, series } => cmd_validate(&Session::load(&common)?, &series),
        Command::Sweep { common, series, axis, grid, stats_mode } => {
            let ctx = Session::load(&common)?;
            let axis = match axis {
                Axis::Penetration => SweepAxis::Penetration,
                Axis::Pf => SweepAxis::PowerFactor,
                Axis::Deadband => SweepAxis::Deadband,
            };
            let mode = match stats_mode {
                Mode::Analytic => StatsMode::Analytic,
                Mode::Resample => StatsMode::Resample,
            };
            cmd_sweep(&ctx, &series, axis, &parse_grid(&grid)?, mode)
        }
        Command::Mitigate { common, input, v0_initial, rate, grid_points, no_chain } => {
            let ctx = Session::load(&common)?;
            let (rmin, rmax) = parse_pair(&rate, "rate").map_err(|e| Error::InvalidArgument(format!("{e:#}")))?;
            cmd_mitigate(&ctx, &input, v0_initial.unwrap_or(ctx.feeder.reference_v0()), rmin, rmax, grid_points, !no_chain)
        }
        Command::Oracle { common, series, step } => cmd_oracle(&Session::load(&common)?, &series, step),
        Command::Synth { fixture, steps, seed, nodes, pv_scale, out } => cmd_synth(fixture, steps, seed, nodes, pv_scale, &out),
    }
}

fn assess(ctx: &Session, input: &StatsInput) -> anyhow::Result<()> {
    let (stats, label) = ctx.statistics(input)?;
    let mask = ctx.feeder.switched_mask();
    let v0 = ctx.feeder.reference_v0();
    let params = build_params(&stats, &ctx.sens, &ctx.feeder.band(), v0, &mask)?;
    let risk = quantify_risk(&params, &stats.p_mean, &ctx.risk)?;
    let lambda = risk.state();
    let ms = macro_state(lambda, &mask)?;
    let vs = voltage_statistics(lambda, &stats, &ctx.sens, v0)?;

    let mut t = Table::new(&["node_id", "switched", "p_mean", "lambda_hat", "expected_p", "mu_v", "var_v"]);
    let mut p_total = 0.0;
    for (j, id) in stats.node_ids.iter().enumerate() {
        let expected = if mask[j] { stats.p_mean[j] * lambda.lambda()[j] } else { 0.0 };
        if mask[j] {
            p_total += stats.p_mean[j];
        }
        t.push(vec![
            id.clone(),
            u8::from(mask[j]).to_string(),
            fmt_num(stats.p_mean[j]),
            fmt_num(lambda.lambda()[j]),
            fmt_num(expected),
            fmt_num(vs.mu_v[j]),
            fmt_num(vs.var_v[j]),
        ]);
    }
    t.push(vec![
        "ALL".into(),
        ms.switched.to_string(),
        fmt_num(p_total),
        fmt_num(ms.s_p / 100.0),
        fmt_num(risk.objective()),
        String::new(),
        String::new(),
    ]);
    t.write(ctx.path("assess.csv"))?;

    let doc =
        ModelDocument::new(&params, stats.node_ids.clone(), Provenance { feeder_hash: ctx.feeder.content_hash(), stats_window: label });
    write_json(ctx.path("model.json"), &doc)?;
    println!(
        "S_hat={} S_p={} objective={} equilibria={} converged_starts={}/{}",
        fmt_num(ms.s_hat),
        fmt_num(ms.s_p),
        fmt_num(risk.objective()),
        risk.equilibria.len(),
        risk.converged_starts,
        risk.starts
    );
    Ok(())
}

fn cmd_validate(ctx: &Session, series: &Path) -> anyhow::Result<()> {
    let series = read_series(series, &ctx.feeder)?;
    let report = validate(&ctx.feeder, &ctx.sens, &series, &ctx.validation())?;
    let mut t = Table::new(&[
        "window_start",
        "s_p_empirical",
        "s_p_model",
        "gap",
        "margin",
        "flagged",
        "node_violations",
        "latched_steps",
        "residual",
    ]);
    for w in &report.windows {
        t.push(vec![
            fmt_num(w.start_time),
            fmt_num(w.empirical_macro.s_p),
            fmt_num(w.model_macro.s_p),
            fmt_num(w.gap),
            fmt_num(100.0 * w.margin),
            u8::from(w.flagged).to_string(),
            w.node_violations.len().to_string(),
            w.latched_steps.to_string(),
            fmt_num(w.residual),
        ]);
    }
    t.write(ctx.path("validate.csv"))?;
    trace_table(&report.trace).write(ctx.path("trace.csv"))?;
    let empirical: Vec<_> = report.windows.iter().map(|w| w.empirical.clone()).collect();
    let model: Vec<_> = report.windows.iter().map(|w| w.model.clone()).collect();
    lambda_table(&report.trace, ctx.window, &empirical).write(ctx.path("lambda_empirical.csv"))?;
    lambda_table(&report.trace, ctx.window, &model).write(ctx.path("lambda_model.csv"))?;
    let (lo, mean, hi) = report.gap_summary();
    println!(
        "windows={} flagged={} gap_min={} gap_mean={} gap_max={} empirical_ratio={} model_ratio={}",
        report.windows.len(),
        report.flagged(),
        fmt_num(lo),
        fmt_num(mean),
        fmt_num(hi),
        fmt_num(report.empirical_ratio()),
        fmt_num(report.model_ratio())
    );
    Ok(())
}

fn cmd_sweep(ctx: &Session, series: &Path, axis: SweepAxis, grid: &[f64], mode: StatsMode) -> anyhow::Result<()> {
    let series = read_series(series, &ctx.feeder)?;
    let rows = sweep(&ctx.feeder, &ctx.sens, &series, axis, grid, mode, &ctx.validation())?;
    let mut t = Table::new(&[
        axis.as_str(),
        "penetration",
        "empirical_ratio",
        "model_ratio",
        "gap_min",
        "gap_mean",
        "gap_max",
        "c_offdiag_mean",
        "flagged_windows",
    ]);
    for r in &rows {
        t.push(vec![
            fmt_num(r.value),
            fmt_num(r.penetration),
            fmt_num(r.empirical_ratio),
            fmt_num(r.model_ratio),
            fmt_num(r.gap_min),
            fmt_num(r.gap_mean),
            fmt_num(r.gap_max),
            fmt_num(r.c_offdiag),
            r.flagged.to_string(),
        ]);
    }
    t.write(ctx.path("sweep.csv"))?;
    println!("axis={} points={} flagged_windows={}", axis.as_str(), rows.len(), rows.iter().map(|r| r.flagged).sum::<usize>());
    Ok(())
}

fn countermeasure_text(report: &CountermeasureReport, config: &MitigationConfig) -> String {
    let mut s = String::new();
    let before = report.initial.as_ref();
    s.push_str(&format!("v0_initial {}\n", fmt_num(config.v0_initial)));
    s.push_str(&format!("rate_band {} {}\n", fmt_num(config.rate_min), fmt_num(config.rate_max)));
    s.push_str(&format!("grid_points {}\n", report.points.len()));
    s.push_str(&format!("feasible_points {}\n", report.points.iter().filter(|p| p.feasible).count()));
    s.push_str(&format!("v0_star {}\n", fmt_num(report.v0_star())));
    s.push_str(&format!("objective_before {}\n", before.map_or("NA".into(), |b| fmt_num(b.assessment.objective()))));
    s.push_str(&format!("objective_after {}\n", fmt_num(report.objective())));
    s.push_str(&format!("s_p_before {}\n", before.map_or("NA".into(), |b| fmt_num(b.macro_state.s_p))));
    s.push_str(&format!("s_p_after {}\n", fmt_num(report.chosen.macro_state.s_p)));
    s
}

fn cmd_mitigate(
    ctx: &Session,
    input: &StatsInput,
    v0_initial: f64,
    rate_min: f64,
    rate_max: f64,
    grid_points: usize,
    chain: bool,
) -> anyhow::Result<()> {
    let mask = ctx.feeder.switched_mask();
    if let (Some(series), None) = (&input.series, input.start) {
        let series = read_series(series, &ctx.feeder)?;
        let opts = TrajectoryOptions { window: ctx.window, rate_min, rate_max, grid_points, risk: ctx.risk, resolve: ctx.resolve, chain };
        let feeder = ctx.feeder.with_v0(v0_initial)?;
        let steps = mitigation_trajectory(&feeder, &ctx.sens, &series, &opts)?;
        let mut t = Table::new(&[
            "window_start",
            "v0_initial",
            "v0_star",
            "s_p_before",
            "s_p_after",
            "objective_before",
            "objective_after",
            "s_p_empirical_before",
            "s_p_empirical_after",
        ]);
        for st in &steps {
            let na = || "NA".to_string();
            t.push(vec![
                fmt_num(st.start_time),
                fmt_num(st.v0_initial),
                fmt_num(st.v0_star),
                st.before.map_or_else(na, |b| fmt_num(b.0.s_p)),
                fmt_num(st.after.0.s_p),
                st.before.map_or_else(na, |b| fmt_num(b.1)),
                fmt_num(st.after.1),
                fmt_num(st.empirical_before),
                fmt_num(st.empirical_after),
            ]);
        }
        t.write(ctx.path("trajectory.csv"))?;
        println!("windows={}", steps.len());
        return Ok(());
    }

    let (stats, _) = ctx.statistics(input)?;
    let config = MitigationConfig { v0_initial, rate_min, rate_max, grid_points, band: ctx.feeder.band() };
    let report = design_countermeasure(&stats, &ctx.sens, &config, &mask, &ctx.risk)?;
    let mut t = Table::new(&["v0", "converged", "objective", "worst_violation", "feasible"]);
    for p in &report.points {
        t.push(vec![
            fmt_num(p.v0),
            u8::from(p.converged).to_string(),
            p.objective.map_or("NA".into(), fmt_num),
            fmt_num(p.worst_violation),
            u8::from(p.feasible).to_string(),
        ]);
    }
    t.write(ctx.path("countermeasure.csv"))?;
    let text = countermeasure_text(&report, &config);
    write_text(ctx.path("countermeasure.txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn cmd_oracle(ctx: &Session, series: &Path, step: Option<usize>) -> anyhow::Result<()> {
    let series = read_series(series, &ctx.feeder)?;
    let steps: Vec<usize> = match step {
        Some(k) if k < series.len() => vec![k],
        Some(k) => return Err(Error::InvalidArgument(format!("step {k} beyond series of {} steps", series.len())).into()),
        None => (0..series.len()).collect(),
    };
    let mut t = Table::new(&["t", "config", "on_count", "selected"]);
    let mut mismatches = 0;
    let mut empty = 0;
    for &k in &steps {
        let (p, q) = (series.p(k), series.q(k));
        let configs = oracle_enumerate(p, q, &ctx.feeder, &ctx.sens)?;
        let chosen = resolve_config(p, q, &ctx.feeder, &ctx.sens, &ctx.resolve).ok().map(|r| r.config);
        if chosen.as_ref().is_some_and(|c| !configs.contains(c)) {
            mismatches += 1;
        }
        if configs.is_empty() {
            empty += 1;
            t.push(vec![fmt_num(series.times()[k]), String::new(), String::new(), "0".into()]);
        }
        for c in &configs {
            let selected = chosen.as_ref() == Some(c);
            t.push(vec![fmt_num(series.times()[k]), c.to_string(), c.on_count().to_string(), u8::from(selected).to_string()]);
        }
    }
    t.write(ctx.path("oracle.csv"))?;
    println!("steps={} without_consistent={} resolver_outside_oracle={}", steps.len(), empty, mismatches);
    anyhow::ensure!(mismatches == 0, "resolver returned {mismatches} configurations outside the enumeration");
    Ok(())
}

fn cmd_synth(fixture: Fixture, steps: usize, seed: u64, nodes: usize, pv_scale: f64, out: &Path) -> anyhow::Result<()> {
    let fx = match fixture {
        Fixture::Benign => synth::benign(),
        Fixture::OverVoltage => synth::over_voltage(),
        Fixture::UnderVoltage => synth::under_voltage(),
        Fixture::Penetration => synth::penetration_feeder(),
        Fixture::Random => synth::random(nodes, seed)?,
        Fixture::RandomLoaded => synth::random_loaded(nodes, seed, 0.74)?,
    };
    if pv_scale.is_nan() || pv_scale < 0.0 {
        return Err(Error::InvalidArgument(format!("PV scale must be nonnegative, got {pv_scale}")).into());
    }
    let mut fx = fx.with_pv_scale(pv_scale);
    fx.params.steps = steps;
    std::fs::create_dir_all(out).map_err(|source| Error::Io { path: out.to_path_buf(), source })?;
    let series = fx.series(seed)?;
    write_json(out.join("feeder.json"), &fx.feeder.to_document())?;
    write_series(out.join("series.csv"), &series)?;
    write_json(out.join("stats.json"), &StatisticsDocument::from(&estimate_statistics(&series)?))?;
    println!("fixture={} nodes={} steps={}", fx.name, fx.feeder.n(), series.len());
    Ok(())
}
