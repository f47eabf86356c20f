//! Ground-truth switching: binary ON/OFF states that are self-consistent
//! with the linearized voltages they produce.
//!
//! A configuration `s` is consistent when, for every switched node,
//! `s_i = 1` exactly when `v_min <= v_i(s) <= v_max`, where `v(s)` is
//! computed from injections gated by `s` itself.

use std::collections::HashSet;
use std::fmt;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::feeder::{FeederModel, SensitivityMatrices, VoltageBand};
use crate::model::{MicroState, MicroStateKind};
use crate::stats::TimeSeries;

/// Largest switched population [`oracle_enumerate`] accepts.
pub const ORACLE_LIMIT: usize = 20;

/// ON (`true`) / OFF state per node; non-switched nodes are always ON.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SwitchConfig(Vec<bool>);

impl SwitchConfig {
    pub fn all_on(n: usize) -> Self {
        SwitchConfig(vec![true; n])
    }

    /// Checks that pinned entries are ON.
    pub fn new(s: Vec<bool>, switched_mask: &[bool]) -> Result<Self> {
        if s.len() != switched_mask.len() {
            return Err(Error::DimensionMismatch { what: "switch config", expected: switched_mask.len(), found: s.len() });
        }
        if let Some(i) = s.iter().zip(switched_mask).position(|(&on, &m)| !m && !on) {
            return Err(Error::InvalidArgument(format!("non-switched node {i} must stay ON")));
        }
        Ok(SwitchConfig(s))
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.0
    }

    pub fn is_on(&self, i: usize) -> bool {
        self.0[i]
    }

    pub fn on_count(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl fmt::Display for SwitchConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &b in &self.0 {
            f.write_str(if b { "1" } else { "0" })?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum TieRule {
    /// Most ON switches, ties to the lexicographically largest config.
    #[default]
    MaxOn,
    /// Fewest ON switches, ties to the lexicographically smallest config.
    MinOn,
}

/// What to do when no consistent configuration exists (or the search is too large).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum InconsistencyPolicy {
    #[default]
    Fail,
    /// Trip-and-stay-off: starting all-ON, switch off the ON node furthest
    /// outside the band, one at a time, until every ON node is inside.
    /// OFF nodes may end up inside the band.
    Latch,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ResolveOptions {
    pub tie: TieRule,
    pub exhaustive_limit: usize,
    pub on_inconsistent: InconsistencyPolicy,
}

impl Default for ResolveOptions {
    fn default() -> Self {
        ResolveOptions { tie: TieRule::MaxOn, exhaustive_limit: ORACLE_LIMIT, on_inconsistent: InconsistencyPolicy::Fail }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResolutionMethod {
    Iterative,
    ExhaustiveFallback,
    Latched,
}

impl ResolutionMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            ResolutionMethod::Iterative => "iterative",
            ResolutionMethod::ExhaustiveFallback => "exhaustive-fallback",
            ResolutionMethod::Latched => "latched",
        }
    }
}

impl fmt::Display for ResolutionMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Resolution {
    pub config: SwitchConfig,
    pub v: DVector<f64>,
    pub iterations: usize,
    pub method: ResolutionMethod,
}

/// Per-step voltage kernel: `v(s) = base + sum over ON switched j of d[:, j]`.
struct Snapshot {
    base: DVector<f64>,
    d: DMatrix<f64>,
    switched: Vec<usize>,
    band: VoltageBand,
}

impl Snapshot {
    fn new(p: &[f64], q: &[f64], feeder: &FeederModel, sens: &SensitivityMatrices) -> Result<Self> {
        let n = feeder.n();
        for (what, len) in [("p", p.len()), ("q", q.len()), ("sensitivity", sens.n())] {
            if len != n {
                return Err(Error::DimensionMismatch { what, expected: n, found: len });
            }
        }
        if p.iter().chain(q).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite injection".into()));
        }
        let mask = feeder.switched_mask();
        let d = DMatrix::from_fn(n, n, |i, j| sens.r[(i, j)] * p[j] + sens.x[(i, j)] * q[j]);
        let base = DVector::from_fn(n, |i, _| feeder.reference_v0() + (0..n).filter(|&j| !mask[j]).map(|j| d[(i, j)]).sum::<f64>());
        Ok(Snapshot { base, d, switched: (0..n).filter(|&j| mask[j]).collect(), band: feeder.band() })
    }

    fn voltages(&self, s: &SwitchConfig) -> DVector<f64> {
        let mut v = self.base.clone();
        for &j in self.switched.iter().filter(|&&j| s.is_on(j)) {
            v += self.d.column(j);
        }
        v
    }

    fn update(&self, s: &SwitchConfig, v: &DVector<f64>) -> SwitchConfig {
        let mut out = s.clone();
        for &i in &self.switched {
            out.0[i] = self.band.contains(v[i]);
        }
        out
    }

    fn is_consistent(&self, s: &SwitchConfig, v: &DVector<f64>) -> bool {
        self.switched.iter().all(|&i| s.is_on(i) == self.band.contains(v[i]))
    }

    fn config_from_bits(&self, n: usize, bits: u64) -> SwitchConfig {
        let mut s = SwitchConfig::all_on(n);
        for (b, &j) in self.switched.iter().enumerate() {
            s.0[j] = bits >> b & 1 == 1;
        }
        s
    }

    fn enumerate(&self, n: usize, limit: usize) -> Result<Vec<SwitchConfig>> {
        if self.switched.len() > limit {
            return Err(Error::ExhaustiveLimitExceeded { switched: self.switched.len(), limit });
        }
        let total = 1u64 << self.switched.len();
        let mut found: Vec<SwitchConfig> = (0..total)
            .into_par_iter()
            .filter_map(|bits| {
                let s = self.config_from_bits(n, bits);
                let v = self.voltages(&s);
                self.is_consistent(&s, &v).then_some(s)
            })
            .collect();
        found.sort();
        Ok(found)
    }

    /// Trips the ON node with the largest band excursion, one at a time,
    /// until every ON node is inside the band. Ties go to the lowest index.
    fn latch(&self, n: usize) -> (SwitchConfig, DVector<f64>, usize) {
        let mut s = SwitchConfig::all_on(n);
        let mut trips = 0;
        loop {
            let v = self.voltages(&s);
            let worst = self
                .switched
                .iter()
                .filter(|&&i| s.0[i])
                .map(|&i| (i, (self.band.v_min() - v[i]).max(v[i] - self.band.v_max())))
                .filter(|&(_, e)| e > 0.0)
                .fold(None, |acc: Option<(usize, f64)>, (i, e)| match acc {
                    Some((_, best)) if best >= e => acc,
                    _ => Some((i, e)),
                });
            match worst {
                Some((i, _)) => {
                    s.0[i] = false;
                    trips += 1;
                }
                None => return (s, v, trips + 1),
            }
        }
    }
}

fn pick(configs: Vec<SwitchConfig>, tie: TieRule) -> Option<SwitchConfig> {
    match tie {
        TieRule::MaxOn => configs.into_iter().max_by(|a, b| a.on_count().cmp(&b.on_count()).then(a.cmp(b))),
        TieRule::MinOn => configs.into_iter().min_by(|a, b| a.on_count().cmp(&b.on_count()).then(a.cmp(b))),
    }
}

/// Finds a consistent configuration for one snapshot of available power.
///
/// Synchronous best-response sweeps start from all-ON and stop at the first
/// repeated configuration. A cycle, or `2 * N_switched` sweeps without
/// settling, hands over to exhaustive search with the configured tie rule.
pub fn resolve_config(p: &[f64], q: &[f64], feeder: &FeederModel, sens: &SensitivityMatrices, opts: &ResolveOptions) -> Result<Resolution> {
    let snap = Snapshot::new(p, q, feeder, sens)?;
    let n = feeder.n();
    let cap = (2 * snap.switched.len()).max(1);

    let mut s = SwitchConfig::all_on(n);
    let mut order = vec![s.clone()];
    let mut visited: HashSet<SwitchConfig> = HashSet::from([s.clone()]);
    for k in 1..=cap {
        let v = snap.voltages(&s);
        let next = snap.update(&s, &v);
        if next == s {
            return Ok(Resolution { config: s, v, iterations: k, method: ResolutionMethod::Iterative });
        }
        if !visited.insert(next.clone()) {
            break;
        }
        order.push(next.clone());
        s = next;
    }
    let iterations = order.len();

    let latched = |extra: usize| {
        let (config, v, sweeps) = snap.latch(n);
        Resolution { config, v, iterations: extra + sweeps, method: ResolutionMethod::Latched }
    };
    let candidates = match snap.enumerate(n, opts.exhaustive_limit) {
        Ok(c) => c,
        Err(e) => {
            return match opts.on_inconsistent {
                InconsistencyPolicy::Latch => Ok(latched(iterations)),
                InconsistencyPolicy::Fail => Err(e),
            }
        }
    };
    match pick(candidates, opts.tie) {
        Some(config) => {
            let v = snap.voltages(&config);
            Ok(Resolution { config, v, iterations, method: ResolutionMethod::ExhaustiveFallback })
        }
        None => match opts.on_inconsistent {
            InconsistencyPolicy::Latch => Ok(latched(iterations)),
            InconsistencyPolicy::Fail => Err(Error::NoConsistentConfiguration { cycle: order }),
        },
    }
}

/// Every consistent configuration, sorted ascending. An empty list is a
/// valid answer.
pub fn oracle_enumerate(p: &[f64], q: &[f64], feeder: &FeederModel, sens: &SensitivityMatrices) -> Result<Vec<SwitchConfig>> {
    Snapshot::new(p, q, feeder, sens)?.enumerate(feeder.n(), ORACLE_LIMIT)
}

/// Voltages for an explicit configuration.
pub fn voltages_for(p: &[f64], q: &[f64], config: &SwitchConfig, feeder: &FeederModel, sens: &SensitivityMatrices) -> Result<DVector<f64>> {
    Ok(Snapshot::new(p, q, feeder, sens)?.voltages(config))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceStep {
    pub time: f64,
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    pub p_inj: Vec<f64>,
    pub q_inj: Vec<f64>,
    pub v: Vec<f64>,
    pub config: SwitchConfig,
    pub iterations: usize,
    pub method: ResolutionMethod,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimulationTrace {
    pub node_ids: Vec<String>,
    pub switched_mask: Vec<bool>,
    pub steps: Vec<TraceStep>,
}

impl SimulationTrace {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Resolves every step independently; steps carry no memory of each other.
pub fn simulate(series: &TimeSeries, feeder: &FeederModel, sens: &SensitivityMatrices, opts: &ResolveOptions) -> Result<SimulationTrace> {
    if series.node_ids() != feeder.node_ids().as_slice() {
        return Err(Error::MismatchedNodes("series node order differs from feeder".into()));
    }
    let steps = (0..series.len())
        .into_par_iter()
        .map(|t| {
            let (p, q) = (series.p(t), series.q(t));
            let time = series.times()[t];
            let res = resolve_config(p, q, feeder, sens, opts).map_err(|e| Error::AtTime { time, source: Box::new(e) })?;
            let gate = |x: &[f64]| -> Vec<f64> { x.iter().enumerate().map(|(j, &v)| if res.config.is_on(j) { v } else { 0.0 }).collect() };
            Ok(TraceStep {
                time,
                p: p.to_vec(),
                q: q.to_vec(),
                p_inj: gate(p),
                q_inj: gate(q),
                v: res.v.iter().copied().collect(),
                iterations: res.iterations,
                method: res.method,
                config: res.config,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SimulationTrace { node_ids: feeder.node_ids(), switched_mask: feeder.switched_mask(), steps })
}

/// ON fraction per node over consecutive windows of `window` steps. A
/// trailing partial window is dropped.
pub fn empirical_micro_state(trace: &SimulationTrace, window: usize) -> Result<Vec<MicroState>> {
    if window == 0 {
        return Err(Error::EmptyWindow);
    }
    if window > trace.len() {
        return Err(Error::InvalidArgument(format!("window {window} exceeds trace length {}", trace.len())));
    }
    let n = trace.node_ids.len();
    trace
        .steps
        .chunks_exact(window)
        .map(|chunk| {
            let l = DVector::from_fn(n, |i, _| chunk.iter().filter(|s| s.config.is_on(i)).count() as f64 / window as f64);
            MicroState::new(l, MicroStateKind::Empirical)
        })
        .collect()
}
