//! Curtailment risk quantification and reference-voltage countermeasures.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::export::fmt_num;
use crate::feeder::{SensitivityMatrices, VoltageBand};
use crate::model::{build_params, macro_state, voltage_mean, MacroState, MicroState, TrippingModelParams};
use crate::solver::{multistart_inits, solve_fixed_point, FixedPointSolution, SolverOptions};
use crate::stats::PowerStatistics;

/// Equilibria closer than this (max-norm) are reported once.
const EQUILIBRIUM_DEDUP: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RiskOptions {
    pub multistart: usize,
    pub seed: u64,
    pub solver: SolverOptions,
}

impl Default for RiskOptions {
    fn default() -> Self {
        RiskOptions { multistart: 8, seed: 0, solver: SolverOptions::default() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Equilibrium {
    pub solution: FixedPointSolution,
    pub objective: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RiskAssessment {
    /// Equilibrium with the largest expected PV power.
    pub best: Equilibrium,
    /// Distinct converged equilibria in discovery order.
    pub equilibria: Vec<Equilibrium>,
    pub converged_starts: usize,
    pub starts: usize,
}

impl RiskAssessment {
    pub fn state(&self) -> &MicroState {
        &self.best.solution.state
    }

    pub fn objective(&self) -> f64 {
        self.best.objective
    }
}

/// Expected realized PV power `sum_j P_j lambda_j` over switched nodes.
pub fn expected_pv_power(p_mean: &DVector<f64>, lambda: &DVector<f64>, switched_mask: &[bool]) -> f64 {
    switched_mask.iter().enumerate().filter(|(_, &m)| m).map(|(j, _)| p_mean[j] * lambda[j]).sum()
}

/// Most optimistic equilibrium of the bound model over seeded multi-start.
pub fn quantify_risk(params: &TrippingModelParams, p_mean: &DVector<f64>, opts: &RiskOptions) -> Result<RiskAssessment> {
    if opts.multistart == 0 {
        return Err(Error::InvalidArgument("multistart must be at least 1".into()));
    }
    if p_mean.len() != params.n() {
        return Err(Error::DimensionMismatch { what: "mean power", expected: params.n(), found: p_mean.len() });
    }
    let mut equilibria: Vec<Equilibrium> = Vec::new();
    let mut converged = 0;
    for init in multistart_inits(params, opts.multistart, opts.seed) {
        let solution = match solve_fixed_point(params, &init, &opts.solver) {
            Ok(s) => s,
            Err(Error::NonConvergence { .. }) => continue,
            Err(e) => return Err(e),
        };
        converged += 1;
        let objective = expected_pv_power(p_mean, solution.state.lambda(), &params.switched_mask);
        let eq = Equilibrium { solution, objective };
        // near-identical solutions keep the better representative
        match equilibria.iter_mut().find(|e| (e.solution.state.lambda() - eq.solution.state.lambda()).amax() < EQUILIBRIUM_DEDUP) {
            Some(e) if eq.objective > e.objective => *e = eq,
            Some(_) => {}
            None => equilibria.push(eq),
        }
    }
    let best = equilibria
        .iter()
        .fold(None::<&Equilibrium>, |b, e| if b.is_none_or(|b| e.objective > b.objective) { Some(e) } else { b })
        .cloned()
        .ok_or(Error::NoEquilibrium { starts: opts.multistart })?;
    Ok(RiskAssessment { best, equilibria, converged_starts: converged, starts: opts.multistart })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MitigationConfig {
    /// Current reference setpoint (per-unit²).
    pub v0_initial: f64,
    /// Allowed `v0 - v0_initial` range, `rate_min <= 0 <= rate_max`.
    pub rate_min: f64,
    pub rate_max: f64,
    pub grid_points: usize,
    pub band: VoltageBand,
}

impl MitigationConfig {
    pub fn new(v0_initial: f64, rate_min: f64, rate_max: f64, band: VoltageBand) -> Result<Self> {
        let c = MitigationConfig { v0_initial, rate_min, rate_max, grid_points: 401, band };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rate_min <= 0.0 && 0.0 <= self.rate_max) {
            return Err(Error::InvalidArgument(format!("rate band [{}, {}] must contain 0", self.rate_min, self.rate_max)));
        }
        if self.grid_points == 0 {
            return Err(Error::InvalidArgument("grid resolution must be positive".into()));
        }
        if !(self.v0_initial > 0.0) {
            return Err(Error::InvalidArgument(format!("v0_initial must be positive, got {}", self.v0_initial)));
        }
        Ok(())
    }

    /// Candidate setpoints: an even grid over the admissible interval plus
    /// `v0_initial` itself when admissible. Ascending.
    pub fn candidates(&self) -> Result<Vec<f64>> {
        self.validate()?;
        let lo = self.band.v_min().max(self.v0_initial + self.rate_min);
        let hi = self.band.v_max().min(self.v0_initial + self.rate_max);
        if lo > hi {
            return Err(Error::EmptyFeasibleSet {
                summary: format!(
                    "band [{}, {}] and rate window [{}, {}] do not intersect",
                    fmt_num(self.band.v_min()),
                    fmt_num(self.band.v_max()),
                    fmt_num(self.v0_initial + self.rate_min),
                    fmt_num(self.v0_initial + self.rate_max)
                ),
            });
        }
        let n = self.grid_points;
        let mut grid: Vec<f64> = if n == 1 {
            vec![lo]
        } else {
            (0..n).map(|k| if k + 1 == n { hi } else { lo + (hi - lo) * k as f64 / (n - 1) as f64 }).collect()
        };
        if (lo..=hi).contains(&self.v0_initial) && !grid.contains(&self.v0_initial) {
            grid.push(self.v0_initial);
            grid.sort_by(f64::total_cmp);
        }
        Ok(grid)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GridPoint {
    pub v0: f64,
    pub converged: bool,
    pub objective: Option<f64>,
    /// Largest distance of any expected nodal voltage outside the band (0 when inside).
    pub worst_violation: f64,
    pub feasible: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SetpointOutcome {
    pub v0: f64,
    pub assessment: RiskAssessment,
    pub mu_v: DVector<f64>,
    pub macro_state: MacroState,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CountermeasureReport {
    pub points: Vec<GridPoint>,
    pub chosen: SetpointOutcome,
    /// Outcome at `v0_initial`, when it converged.
    pub initial: Option<SetpointOutcome>,
}

impl CountermeasureReport {
    pub fn v0_star(&self) -> f64 {
        self.chosen.v0
    }

    pub fn objective(&self) -> f64 {
        self.chosen.assessment.objective()
    }
}

/// Model outcome at one reference setpoint.
pub fn evaluate_setpoint(
    stats: &PowerStatistics,
    sens: &SensitivityMatrices,
    band: &VoltageBand,
    v0: f64,
    switched_mask: &[bool],
    opts: &RiskOptions,
) -> Result<SetpointOutcome> {
    let params = build_params(stats, sens, band, v0, switched_mask)?;
    let assessment = quantify_risk(&params, &stats.p_mean, opts)?;
    let mu_v = voltage_mean(assessment.state(), stats, sens, v0)?;
    let macro_state = macro_state(assessment.state(), switched_mask)?;
    Ok(SetpointOutcome { v0, assessment, mu_v, macro_state })
}

fn violation(mu_v: &DVector<f64>, band: &VoltageBand) -> f64 {
    mu_v.iter().map(|&m| (band.v_min() - m).max(m - band.v_max()).max(0.0)).fold(0.0, f64::max)
}

/// Grid search over reference setpoints maximizing expected PV power,
/// subject to every expected nodal voltage staying in the band. Equal
/// objectives (e.g. no sun) fall back to the larger expected ON count, then
/// the smaller setpoint.
pub fn design_countermeasure(
    stats: &PowerStatistics,
    sens: &SensitivityMatrices,
    config: &MitigationConfig,
    switched_mask: &[bool],
    opts: &RiskOptions,
) -> Result<CountermeasureReport> {
    let grid = config.candidates()?;
    let outcomes: Vec<Result<SetpointOutcome>> =
        grid.par_iter().map(|&v0| evaluate_setpoint(stats, sens, &config.band, v0, switched_mask, opts)).collect();

    let mut points = Vec::with_capacity(grid.len());
    let mut chosen: Option<SetpointOutcome> = None;
    let mut initial = None;
    for (&v0, outcome) in grid.iter().zip(outcomes) {
        let outcome = match outcome {
            Ok(o) => o,
            Err(Error::NoEquilibrium { .. }) => {
                points.push(GridPoint { v0, converged: false, objective: None, worst_violation: f64::NAN, feasible: false });
                continue;
            }
            Err(e) => return Err(e),
        };
        let worst = violation(&outcome.mu_v, &config.band);
        let feasible = worst == 0.0;
        points.push(GridPoint { v0, converged: true, objective: Some(outcome.assessment.objective()), worst_violation: worst, feasible });
        if v0 == config.v0_initial {
            initial = Some(outcome.clone());
        }
        // ascending grid: strict improvement keeps the smallest v0 on full ties
        let key = (outcome.assessment.objective(), outcome.macro_state.s_hat);
        if feasible && chosen.as_ref().is_none_or(|c| key > (c.assessment.objective(), c.macro_state.s_hat)) {
            chosen = Some(outcome);
        }
    }
    let chosen = chosen.ok_or_else(|| {
        let unconverged = points.iter().filter(|p| !p.converged).count();
        let least = points.iter().filter(|p| p.converged).map(|p| p.worst_violation).fold(f64::INFINITY, f64::min);
        Error::EmptyFeasibleSet {
            summary: format!("{} grid points: {unconverged} did not converge, smallest mean-voltage violation {least}", points.len()),
        }
    })?;
    Ok(CountermeasureReport { points, chosen, initial })
}

/// Slack bounds for the relaxed equality.
#[derive(Clone, Debug, PartialEq)]
pub struct Slacks {
    pub plus: DVector<f64>,
    pub minus: DVector<f64>,
}

impl Slacks {
    pub fn uniform(n: usize, eps: f64) -> Self {
        Slacks { plus: DVector::from_element(n, eps.abs()), minus: DVector::from_element(n, -eps.abs()) }
    }

    /// Smallest slacks that absorb the map residual `F(lambda) - lambda`.
    pub fn from_residual(params: &TrippingModelParams, lambda: &DVector<f64>) -> Self {
        let r = params.evaluate(lambda) - lambda;
        Slacks { plus: r.map(|x| x.max(0.0)), minus: r.map(|x| x.min(0.0)) }
    }
}

impl Default for Slacks {
    fn default() -> Self {
        Slacks { plus: DVector::zeros(0), minus: DVector::zeros(0) }
    }
}

/// Default slack magnitude.
pub const DEFAULT_SLACK: f64 = 1e-6;
/// Residuals up to this count as satisfied.
pub const CERTIFICATE_TOL: f64 = 1e-10;

/// Signed residuals of the relaxed constraints; each is satisfied when `<= CERTIFICATE_TOL`.
#[derive(Clone, Debug, PartialEq)]
pub struct RelaxationCertificate {
    pub lift: DMatrix<f64>,
    pub eps_plus: DVector<f64>,
    pub eps_minus: DVector<f64>,
    /// `a0 + (B - I) lambda + C_i . Lift - eps+`, switched rows only.
    pub upper: Vec<(usize, f64)>,
    /// `-a0 - (B - I) lambda - C_i . Lift + eps-`, switched rows only.
    pub lower: Vec<(usize, f64)>,
    /// `(l_i - l_j)^2 - (L_ii + L_jj - 2 L_ij)` for every ordered pair.
    pub parabolic_minus: Vec<((usize, usize), f64)>,
    /// `(l_i + l_j)^2 - (L_ii + L_jj + 2 L_ij)` for every ordered pair.
    pub parabolic_plus: Vec<((usize, usize), f64)>,
    pub feasible: bool,
}

impl RelaxationCertificate {
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        for &(i, r) in &self.upper {
            if r > CERTIFICATE_TOL {
                out.push(format!("upper[{i}]"));
            }
        }
        for &(i, r) in &self.lower {
            if r > CERTIFICATE_TOL {
                out.push(format!("lower[{i}]"));
            }
        }
        for &((i, j), r) in &self.parabolic_minus {
            if r > CERTIFICATE_TOL {
                out.push(format!("parabolic-[{i},{j}]"));
            }
        }
        for &((i, j), r) in &self.parabolic_plus {
            if r > CERTIFICATE_TOL {
                out.push(format!("parabolic+[{i},{j}]"));
            }
        }
        out
    }
}

/// Evaluates the parabolic relaxation of the micro-state equality at a
/// candidate `(lambda, Lift)`.
pub fn certify_relaxation(
    params: &TrippingModelParams,
    lambda: &DVector<f64>,
    lift: &DMatrix<f64>,
    slacks: &Slacks,
) -> Result<RelaxationCertificate> {
    let n = params.n();
    let dims = [
        ("lambda", lambda.len()),
        ("lift rows", lift.nrows()),
        ("lift cols", lift.ncols()),
        ("eps+", slacks.plus.len()),
        ("eps-", slacks.minus.len()),
    ];
    for (what, found) in dims {
        if found != n {
            return Err(Error::DimensionMismatch { what, expected: n, found });
        }
    }
    if slacks.plus.iter().any(|&e| e < 0.0) || slacks.minus.iter().any(|&e| e > 0.0) {
        return Err(Error::InvalidArgument("slacks must satisfy eps+ >= 0 >= eps-".into()));
    }
    let linear = &params.a0 + &params.b * lambda - lambda;
    let mut upper = Vec::new();
    let mut lower = Vec::new();
    for i in (0..n).filter(|&i| params.switched_mask[i]) {
        let contraction = params.c[i].component_mul(lift).sum();
        let g = linear[i] + contraction;
        upper.push((i, g - slacks.plus[i]));
        lower.push((i, -g + slacks.minus[i]));
    }
    let mut parabolic_minus = Vec::with_capacity(n * n);
    let mut parabolic_plus = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let diag = lift[(i, i)] + lift[(j, j)];
            parabolic_minus.push(((i, j), (lambda[i] - lambda[j]).powi(2) - (diag - 2.0 * lift[(i, j)])));
            parabolic_plus.push(((i, j), (lambda[i] + lambda[j]).powi(2) - (diag + 2.0 * lift[(i, j)])));
        }
    }
    let feasible = upper.iter().chain(&lower).all(|&(_, r)| r <= CERTIFICATE_TOL)
        && parabolic_minus.iter().chain(&parabolic_plus).all(|&(_, r)| r <= CERTIFICATE_TOL);
    Ok(RelaxationCertificate {
        lift: lift.clone(),
        eps_plus: slacks.plus.clone(),
        eps_minus: slacks.minus.clone(),
        upper,
        lower,
        parabolic_minus,
        parabolic_plus,
        feasible,
    })
}
