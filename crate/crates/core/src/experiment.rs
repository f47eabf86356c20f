//! Window-by-window comparison of the bound model with simulated switching,
//! parameter sweeps, and countermeasure trajectories.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::feeder::{FeederModel, NodeRole, SensitivityMatrices};
use crate::mitigate::{design_countermeasure, quantify_risk, MitigationConfig, RiskOptions};
use crate::model::{build_params, macro_state, MacroState, MicroState};
use crate::stats::{estimate_statistics, PowerStatistics, TimeSeries};
use crate::truth::{empirical_micro_state, simulate, ResolutionMethod, ResolveOptions, SimulationTrace};

/// Hoeffding half-width for a mean of `samples` values in `[0, 1]` at confidence `1 - delta`.
pub fn hoeffding_margin(samples: usize, delta: f64) -> f64 {
    ((2.0 / delta).ln() / (2.0 * samples as f64)).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ValidationOptions {
    pub window: usize,
    pub resolve: ResolveOptions,
    pub risk: RiskOptions,
    /// Miss probability of the Monte-Carlo margin.
    pub delta: f64,
}

impl Default for ValidationOptions {
    fn default() -> Self {
        ValidationOptions { window: 60, resolve: ResolveOptions::default(), risk: RiskOptions::default(), delta: 0.05 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WindowValidation {
    pub index: usize,
    pub start_time: f64,
    pub empirical: MicroState,
    pub model: MicroState,
    pub empirical_macro: MacroState,
    pub model_macro: MacroState,
    /// Empirical minus model ON percentage.
    pub gap: f64,
    pub margin: f64,
    /// Switched nodes with model ON-probability above empirical plus margin.
    pub node_violations: Vec<usize>,
    /// Model ON percentage above empirical by more than the margin.
    pub flagged: bool,
    /// Steps resolved by latching rather than a consistent configuration.
    pub latched_steps: usize,
    pub residual: f64,
    pub available_energy: f64,
    pub realized_energy: f64,
    pub model_energy: f64,
    pub c_offdiag: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ValidationReport {
    pub trace: SimulationTrace,
    pub windows: Vec<WindowValidation>,
}

fn ratio(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        num / den
    } else {
        1.0
    }
}

impl ValidationReport {
    pub fn flagged(&self) -> usize {
        self.windows.iter().filter(|w| w.flagged).count()
    }

    /// Realized over available PV energy in the simulation.
    pub fn empirical_ratio(&self) -> f64 {
        ratio(self.windows.iter().map(|w| w.realized_energy).sum(), self.windows.iter().map(|w| w.available_energy).sum())
    }

    /// Expected over available PV energy under the bound model.
    pub fn model_ratio(&self) -> f64 {
        ratio(self.windows.iter().map(|w| w.model_energy).sum(), self.windows.iter().map(|w| w.available_energy).sum())
    }

    /// `(min, mean, max)` of the per-window gap.
    pub fn gap_summary(&self) -> (f64, f64, f64) {
        let g: Vec<f64> = self.windows.iter().map(|w| w.gap).collect();
        let mean = g.iter().sum::<f64>() / g.len() as f64;
        (g.iter().copied().fold(f64::INFINITY, f64::min), mean, g.iter().copied().fold(f64::NEG_INFINITY, f64::max))
    }
}

/// Simulates the series and compares each full window's empirical ON
/// fractions with the model equilibrium built from that window's statistics.
pub fn validate(
    feeder: &FeederModel,
    sens: &SensitivityMatrices,
    series: &TimeSeries,
    opts: &ValidationOptions,
) -> Result<ValidationReport> {
    validate_with(feeder, sens, series, opts, |_, w| estimate_statistics(w))
}

/// As [`validate`] with caller-supplied statistics for window `k` of `series`.
pub fn validate_with<F>(
    feeder: &FeederModel,
    sens: &SensitivityMatrices,
    series: &TimeSeries,
    opts: &ValidationOptions,
    stats_for: F,
) -> Result<ValidationReport>
where
    F: Fn(usize, &TimeSeries) -> Result<PowerStatistics> + Sync,
{
    if !(opts.delta > 0.0 && opts.delta < 1.0) {
        return Err(Error::InvalidArgument(format!("delta must be in (0, 1), got {}", opts.delta)));
    }
    let trace = simulate(series, feeder, sens, &opts.resolve)?;
    let empirical = empirical_micro_state(&trace, opts.window)?;
    let mask = feeder.switched_mask();
    let margin = hoeffding_margin(opts.window, opts.delta);
    let windows = empirical
        .into_par_iter()
        .enumerate()
        .map(|(k, emp)| {
            let start = k * opts.window;
            let win = series.window(start, opts.window)?;
            let stats = stats_for(k, &win)?;
            let params = build_params(&stats, sens, &feeder.band(), feeder.reference_v0(), &mask)?;
            let risk = quantify_risk(&params, &stats.p_mean, &opts.risk)?;
            let model = risk.state().clone();
            let empirical_macro = macro_state(&emp, &mask)?;
            let model_macro = macro_state(&model, &mask)?;
            let node_violations: Vec<usize> =
                (0..mask.len()).filter(|&i| mask[i] && model.lambda()[i] > emp.lambda()[i] + margin).collect();
            let flagged = model_macro.s_p > empirical_macro.s_p + 100.0 * margin;
            let steps = &trace.steps[start..start + opts.window];
            let switched_sum = |f: &dyn Fn(usize, usize) -> f64| -> f64 {
                (0..steps.len()).map(|t| (0..mask.len()).filter(|&j| mask[j]).map(|j| f(t, j)).sum::<f64>()).sum()
            };
            Ok(WindowValidation {
                index: k,
                start_time: steps[0].time,
                gap: empirical_macro.s_p - model_macro.s_p,
                empirical: emp,
                model,
                empirical_macro,
                model_macro,
                margin,
                node_violations,
                flagged,
                latched_steps: steps.iter().filter(|s| s.method == ResolutionMethod::Latched).count(),
                residual: risk.best.solution.residual,
                available_energy: switched_sum(&|t, j| steps[t].p[j]),
                realized_energy: switched_sum(&|t, j| steps[t].p_inj[j]),
                model_energy: opts.window as f64 * risk.objective(),
                c_offdiag: params.mean_abs_offdiag_c(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ValidationReport { trace, windows })
}

/// Mean peak switched generation over mean peak demand of fixed loads.
pub fn penetration(feeder: &FeederModel, series: &TimeSeries) -> f64 {
    let peak = |j: usize, sign: f64| (0..series.len()).map(|t| sign * series.p(t)[j]).fold(0.0, f64::max);
    let mean = |v: Vec<f64>| if v.is_empty() { f64::NAN } else { v.iter().sum::<f64>() / v.len() as f64 };
    let nodes = feeder.nodes();
    let pv = mean((0..nodes.len()).filter(|&j| nodes[j].role == NodeRole::SwitchedPv).map(|j| peak(j, 1.0)).collect());
    let load = mean((0..nodes.len()).filter(|&j| nodes[j].role == NodeRole::FixedLoad).map(|j| peak(j, -1.0)).collect());
    pv / load
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    /// PV scale factor on switched nodes.
    Penetration,
    /// Power-factor setpoint of switched nodes.
    PowerFactor,
    /// Band width multiplier around the band center.
    Deadband,
}

impl SweepAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::Penetration => "penetration",
            SweepAxis::PowerFactor => "pf",
            SweepAxis::Deadband => "deadband",
        }
    }
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "penetration" => Ok(SweepAxis::Penetration),
            "pf" => Ok(SweepAxis::PowerFactor),
            "deadband" => Ok(SweepAxis::Deadband),
            other => Err(Error::InvalidArgument(format!("unknown sweep axis '{other}'"))),
        }
    }
}

/// How window statistics follow a perturbation of the inputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StatsMode {
    /// Transform the base window statistics in closed form.
    Analytic,
    /// Re-estimate from the perturbed series.
    Resample,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub value: f64,
    pub penetration: f64,
    pub empirical_ratio: f64,
    pub model_ratio: f64,
    pub gap_min: f64,
    pub gap_mean: f64,
    pub gap_max: f64,
    pub c_offdiag: f64,
    pub flagged: usize,
}

type StatsTransform = Box<dyn Fn(&PowerStatistics) -> Result<PowerStatistics> + Sync>;

/// Perturbed inputs for one sweep point: (feeder, series, analytic statistics transform).
fn perturb(feeder: &FeederModel, series: &TimeSeries, axis: SweepAxis, value: f64) -> Result<(FeederModel, TimeSeries, StatsTransform)> {
    let mask = feeder.switched_mask();
    Ok(match axis {
        SweepAxis::Penetration => {
            if !(value >= 0.0) {
                return Err(Error::InvalidArgument(format!("PV scale must be nonnegative, got {value}")));
            }
            let m = mask.clone();
            (feeder.clone(), series.scaled(&mask, value), Box::new(move |s: &PowerStatistics| s.scaled(&m, value)))
        }
        SweepAxis::PowerFactor => {
            let m = mask.clone();
            (feeder.clone(), series.with_power_factor(&mask, value)?, Box::new(move |s: &PowerStatistics| s.with_power_factor(&m, value)))
        }
        SweepAxis::Deadband => {
            let band = feeder.band().scaled_width(value)?;
            (feeder.with_band(band), series.clone(), Box::new(|s: &PowerStatistics| Ok(s.clone())))
        }
    })
}

/// Runs [`validate`] at every grid value of `axis`; rows follow grid order.
pub fn sweep(
    feeder: &FeederModel,
    sens: &SensitivityMatrices,
    series: &TimeSeries,
    axis: SweepAxis,
    grid: &[f64],
    mode: StatsMode,
    opts: &ValidationOptions,
) -> Result<Vec<SweepRow>> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("sweep grid is empty".into()));
    }
    grid.par_iter()
        .map(|&value| {
            let (f, s, transform) = perturb(feeder, series, axis, value)?;
            let report = match mode {
                StatsMode::Resample => validate(&f, sens, &s, opts)?,
                StatsMode::Analytic => validate_with(&f, sens, &s, opts, |k, _| {
                    transform(&estimate_statistics(&series.window(k * opts.window, opts.window)?)?)
                })?,
            };
            let (gap_min, gap_mean, gap_max) = report.gap_summary();
            let c = report.windows.iter().map(|w| w.c_offdiag).sum::<f64>() / report.windows.len() as f64;
            Ok(SweepRow {
                value,
                penetration: penetration(&f, &s),
                empirical_ratio: report.empirical_ratio(),
                model_ratio: report.model_ratio(),
                gap_min,
                gap_mean,
                gap_max,
                c_offdiag: c,
                flagged: report.flagged(),
            })
        })
        .collect()
}

/// Grid points from `start` to `stop` inclusive.
pub fn linspace(start: f64, stop: f64, steps: usize) -> Result<Vec<f64>> {
    match steps {
        0 => Err(Error::InvalidArgument("grid needs at least one step".into())),
        1 => Ok(vec![start]),
        n => Ok((0..n).map(|k| if k + 1 == n { stop } else { start + (stop - start) * k as f64 / (n - 1) as f64 }).collect()),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrajectoryOptions {
    pub window: usize,
    pub rate_min: f64,
    pub rate_max: f64,
    pub grid_points: usize,
    pub risk: RiskOptions,
    pub resolve: ResolveOptions,
    /// Start each window from the previous window's setpoint.
    pub chain: bool,
}

impl Default for TrajectoryOptions {
    fn default() -> Self {
        TrajectoryOptions {
            window: 60,
            rate_min: -0.1,
            rate_max: 0.1,
            grid_points: 401,
            risk: RiskOptions::default(),
            resolve: ResolveOptions::default(),
            chain: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryStep {
    pub index: usize,
    pub start_time: f64,
    pub v0_initial: f64,
    pub v0_star: f64,
    /// Model outcome at `v0_initial`; `None` when it has no equilibrium.
    pub before: Option<(MacroState, f64)>,
    pub after: (MacroState, f64),
    /// Simulated ON percentage at `v0_initial` and at `v0_star`.
    pub empirical_before: f64,
    pub empirical_after: f64,
}

/// Per-window countermeasure design along a series.
pub fn mitigation_trajectory(
    feeder: &FeederModel,
    sens: &SensitivityMatrices,
    series: &TimeSeries,
    opts: &TrajectoryOptions,
) -> Result<Vec<TrajectoryStep>> {
    if opts.window == 0 {
        return Err(Error::EmptyWindow);
    }
    let windows = series.len() / opts.window;
    if windows == 0 {
        return Err(Error::InvalidArgument(format!("series of {} steps is shorter than one window", series.len())));
    }
    let mask = feeder.switched_mask();
    let mut v0 = feeder.reference_v0();
    let mut out = Vec::with_capacity(windows);
    for k in 0..windows {
        let win = series.window(k * opts.window, opts.window)?;
        let stats = estimate_statistics(&win)?;
        let config = MitigationConfig {
            v0_initial: v0,
            rate_min: opts.rate_min,
            rate_max: opts.rate_max,
            grid_points: opts.grid_points,
            band: feeder.band(),
        };
        let report = design_countermeasure(&stats, sens, &config, &mask, &opts.risk)
            .map_err(|e| Error::AtTime { time: win.times()[0], source: Box::new(e) })?;
        let empirical = |v0: f64| -> Result<f64> {
            let trace = simulate(&win, &feeder.with_v0(v0)?, sens, &opts.resolve)?;
            let lambda = empirical_micro_state(&trace, opts.window)?;
            Ok(macro_state(&lambda[0], &mask)?.s_p)
        };
        out.push(TrajectoryStep {
            index: k,
            start_time: win.times()[0],
            v0_initial: v0,
            v0_star: report.v0_star(),
            before: report.initial.as_ref().map(|o| (o.macro_state, o.assessment.objective())),
            after: (report.chosen.macro_state, report.objective()),
            empirical_before: empirical(v0)?,
            empirical_after: empirical(report.v0_star())?,
        });
        if opts.chain {
            v0 = report.v0_star();
        }
    }
    Ok(out)
}
