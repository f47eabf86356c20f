//! Nodal power time series and the statistics the tripping model consumes.
//!
//! Sign convention: `p > 0` is generation, loads carry negative `p`.
//! All moments use the population (`1/T`) convention.

use std::collections::HashMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feeder::{FeederModel, VoltageBand};

/// Available active/reactive power per node and time step.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeSeries {
    node_ids: Vec<String>,
    times: Vec<f64>,
    // [t][node]
    p: Vec<Vec<f64>>,
    q: Vec<Vec<f64>>,
}

impl TimeSeries {
    pub fn new(node_ids: Vec<String>, times: Vec<f64>, p: Vec<Vec<f64>>, q: Vec<Vec<f64>>) -> Result<Self> {
        let n = node_ids.len();
        if p.len() != times.len() || q.len() != times.len() {
            return Err(Error::DimensionMismatch { what: "time series rows", expected: times.len(), found: p.len().min(q.len()) });
        }
        for (t, (pr, qr)) in p.iter().zip(&q).enumerate() {
            if pr.len() != n || qr.len() != n {
                return Err(Error::MismatchedNodes(format!("row {t} has {} values for {n} nodes", pr.len().min(qr.len()))));
            }
            if pr.iter().chain(qr).any(|v| !v.is_finite()) {
                return Err(Error::parse(format!("time series row {t}"), "non-finite power"));
            }
        }
        if let Some(w) = times.windows(2).find(|w| !(w[0] < w[1])) {
            return Err(Error::parse("time series", format!("timestamps not increasing at {}", w[1])));
        }
        Ok(TimeSeries { node_ids, times, p, q })
    }

    pub fn node_ids(&self) -> &[String] {
        &self.node_ids
    }

    pub fn n(&self) -> usize {
        self.node_ids.len()
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn p(&self, t: usize) -> &[f64] {
        &self.p[t]
    }

    pub fn q(&self, t: usize) -> &[f64] {
        &self.q[t]
    }

    /// Copy of steps `start..start + len`.
    pub fn window(&self, start: usize, len: usize) -> Result<TimeSeries> {
        let end = start
            .checked_add(len)
            .filter(|&e| e <= self.len())
            .ok_or_else(|| Error::InvalidArgument(format!("window {start}+{len} exceeds {} steps", self.len())))?;
        Ok(TimeSeries {
            node_ids: self.node_ids.clone(),
            times: self.times[start..end].to_vec(),
            p: self.p[start..end].to_vec(),
            q: self.q[start..end].to_vec(),
        })
    }

    /// Multiplies `p` and `q` of every masked node by `alpha`.
    pub fn scaled(&self, mask: &[bool], alpha: f64) -> TimeSeries {
        let scale = |rows: &[Vec<f64>]| -> Vec<Vec<f64>> {
            rows.iter().map(|r| r.iter().zip(mask).map(|(&v, &m)| if m { v * alpha } else { v }).collect()).collect()
        };
        TimeSeries { node_ids: self.node_ids.clone(), times: self.times.clone(), p: scale(&self.p), q: scale(&self.q) }
    }

    /// Constant power-factor operation for masked nodes: `q = -p * tan(acos(pf))`
    /// (reactive absorption when generating).
    pub fn with_power_factor(&self, mask: &[bool], pf: f64) -> Result<TimeSeries> {
        let t = pf_ratio(pf)?;
        let q = self
            .p
            .iter()
            .zip(&self.q)
            .map(|(pr, qr)| pr.iter().zip(qr).zip(mask).map(|((&p, &q), &m)| if m { -t * p } else { q }).collect())
            .collect();
        Ok(TimeSeries { node_ids: self.node_ids.clone(), times: self.times.clone(), p: self.p.clone(), q })
    }
}

pub(crate) fn pf_ratio(pf: f64) -> Result<f64> {
    if !(pf > 0.0 && pf <= 1.0) {
        return Err(Error::InvalidArgument(format!("power factor must be in (0, 1], got {pf}")));
    }
    Ok(pf.acos().tan())
}

#[derive(Debug, Deserialize, Serialize)]
struct SeriesRow {
    time: f64,
    node_id: String,
    p_pu: f64,
    q_pu: f64,
}

const SERIES_HEADER: [&str; 4] = ["time", "node_id", "p_pu", "q_pu"];

/// Parses `time,node_id,p_pu,q_pu` rows and aligns them with the feeder's
/// node order. Every node must have exactly one row per timestamp.
pub fn read_series(path: impl AsRef<Path>, feeder: &FeederModel) -> Result<TimeSeries> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
    parse_series(&text, feeder, &path.display().to_string())
}

pub fn parse_series(text: &str, feeder: &FeederModel, context: &str) -> Result<TimeSeries> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let header = reader.headers().map_err(|e| Error::parse(context, e.to_string()))?;
    if header.iter().ne(SERIES_HEADER) {
        return Err(Error::parse(
            format!("{context}: header"),
            format!("expected {}, found {}", SERIES_HEADER.join(","), header.iter().collect::<Vec<_>>().join(",")),
        ));
    }
    let n = feeder.n();
    let mut last: Vec<Option<f64>> = vec![None; n];
    let mut rows: Vec<(f64, usize, f64, f64)> = Vec::new();
    for (k, rec) in reader.deserialize::<SeriesRow>().enumerate() {
        let line = k + 2;
        let row = rec.map_err(|e| Error::parse(format!("{context}: line {line}"), e.to_string()))?;
        let j = feeder
            .index_of(&row.node_id)
            .ok_or_else(|| Error::parse(format!("{context}: line {line}"), format!("unknown node id {}", row.node_id)))?;
        if !(row.time.is_finite() && row.p_pu.is_finite() && row.q_pu.is_finite()) {
            return Err(Error::parse(format!("{context}: line {line}"), "non-finite value"));
        }
        if let Some(prev) = last[j] {
            if !(row.time > prev) {
                return Err(Error::parse(
                    format!("{context}: line {line}"),
                    format!("timestamp {} not after {prev} for node {}", row.time, row.node_id),
                ));
            }
        }
        last[j] = Some(row.time);
        rows.push((row.time, j, row.p_pu, row.q_pu));
    }
    rows.sort_by(|a, b| a.0.total_cmp(&b.0));

    let ids = feeder.node_ids();
    let mut times = Vec::new();
    let (mut p, mut q) = (Vec::new(), Vec::new());
    let mut i = 0;
    while i < rows.len() {
        let t = rows[i].0;
        let mut pr = vec![f64::NAN; n];
        let mut qr = vec![f64::NAN; n];
        while i < rows.len() && rows[i].0 == t {
            let (_, j, pv, qv) = rows[i];
            pr[j] = pv;
            qr[j] = qv;
            i += 1;
        }
        if let Some(j) = pr.iter().position(|v| v.is_nan()) {
            return Err(Error::MismatchedNodes(format!("{context}: node {} missing at time {t}", ids[j])));
        }
        times.push(t);
        p.push(pr);
        q.push(qr);
    }
    TimeSeries::new(ids, times, p, q)
}

pub fn write_series(path: impl AsRef<Path>, series: &TimeSeries) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("time,node_id,p_pu,q_pu\n");
    for t in 0..series.len() {
        for (j, id) in series.node_ids.iter().enumerate() {
            out.push_str(&format!(
                "{},{},{},{}\n",
                crate::export::fmt_num(series.times[t]),
                id,
                crate::export::fmt_num(series.p[t][j]),
                crate::export::fmt_num(series.q[t][j])
            ));
        }
    }
    std::fs::write(path, out).map_err(|source| Error::Io { path: path.to_path_buf(), source })
}

/// Per-node and cross-node moments of available power.
///
/// `p_plus` is `E{p^2 | p >= 0} * Pr{p >= 0}`, `p_minus` the `p < 0`
/// counterpart, so `p_plus + p_minus = var_p + p_mean^2`.
#[derive(Clone, Debug, PartialEq)]
pub struct PowerStatistics {
    pub node_ids: Vec<String>,
    pub samples: usize,
    pub p_mean: DVector<f64>,
    pub q_mean: DVector<f64>,
    pub var_p: DVector<f64>,
    pub var_q: DVector<f64>,
    pub p_plus: DVector<f64>,
    pub p_minus: DVector<f64>,
    pub q_plus: DVector<f64>,
    pub q_minus: DVector<f64>,
    pub cov_pq_self: DVector<f64>,
    pub cov_pp: DMatrix<f64>,
    pub cov_pq: DMatrix<f64>,
    pub cov_qp: DMatrix<f64>,
    pub cov_qq: DMatrix<f64>,
}

impl PowerStatistics {
    pub fn n(&self) -> usize {
        self.p_mean.len()
    }

    /// `E{p^2}` per node.
    pub fn p_second_moment(&self, j: usize) -> f64 {
        self.p_plus[j] + self.p_minus[j]
    }

    pub fn q_second_moment(&self, j: usize) -> f64 {
        self.q_plus[j] + self.q_minus[j]
    }

    /// Checks the structural invariants; `tol` is relative.
    pub fn check(&self, tol: f64) -> Result<()> {
        let n = self.n();
        let dims = [
            self.q_mean.len(),
            self.var_p.len(),
            self.var_q.len(),
            self.p_plus.len(),
            self.p_minus.len(),
            self.q_plus.len(),
            self.q_minus.len(),
            self.cov_pq_self.len(),
            self.node_ids.len(),
        ];
        if let Some(&d) = dims.iter().find(|&&d| d != n) {
            return Err(Error::DimensionMismatch { what: "statistics vector", expected: n, found: d });
        }
        for m in [&self.cov_pp, &self.cov_pq, &self.cov_qp, &self.cov_qq] {
            if m.shape() != (n, n) {
                return Err(Error::DimensionMismatch { what: "covariance matrix", expected: n, found: m.nrows() });
            }
        }
        let close = |a: f64, b: f64| (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-300) || a == b;
        let bad = |what: &str, j: usize| Err(Error::InvalidArgument(format!("statistics invariant violated: {what} at node {j}")));
        for j in 0..n {
            if self.var_p[j] < 0.0 || self.var_q[j] < 0.0 {
                return bad("negative variance", j);
            }
            if !close(self.p_second_moment(j), self.var_p[j] + self.p_mean[j].powi(2))
                || !close(self.q_second_moment(j), self.var_q[j] + self.q_mean[j].powi(2))
            {
                return bad("second-moment split", j);
            }
            let det = self.var_p[j] * self.var_q[j] - self.cov_pq_self[j].powi(2);
            if det < -tol * (self.var_p[j] * self.var_q[j]).max(1e-300) {
                return bad("self covariance not PSD", j);
            }
            for k in 0..n {
                if !close(self.cov_pp[(j, k)], self.cov_pp[(k, j)]) || !close(self.cov_qp[(j, k)], self.cov_pq[(k, j)]) {
                    return bad("covariance symmetry", j);
                }
            }
        }
        Ok(())
    }

    /// Analytic counterpart of [`TimeSeries::scaled`]: masked nodes have
    /// means scaled by `alpha` and second moments by `alpha^2`.
    pub fn scaled(&self, mask: &[bool], alpha: f64) -> Result<PowerStatistics> {
        if !(alpha >= 0.0 && alpha.is_finite()) {
            return Err(Error::InvalidArgument(format!("scale factor must be >= 0, got {alpha}")));
        }
        let a: Vec<f64> = mask.iter().map(|&m| if m { alpha } else { 1.0 }).collect();
        let mut s = self.clone();
        for (j, &a1) in a.iter().enumerate() {
            let a2 = a1 * a1;
            s.p_mean[j] *= a1;
            s.q_mean[j] *= a1;
            s.var_p[j] *= a2;
            s.var_q[j] *= a2;
            s.cov_pq_self[j] *= a2;
            if a1 == 0.0 {
                // every sample collapses to 0, which counts as non-negative
                s.p_plus[j] = 0.0;
                s.p_minus[j] = 0.0;
                s.q_plus[j] = 0.0;
                s.q_minus[j] = 0.0;
            } else {
                s.p_plus[j] *= a2;
                s.p_minus[j] *= a2;
                s.q_plus[j] *= a2;
                s.q_minus[j] *= a2;
            }
        }
        for m in [&mut s.cov_pp, &mut s.cov_pq, &mut s.cov_qp, &mut s.cov_qq] {
            for j in 0..self.n() {
                for k in 0..self.n() {
                    m[(j, k)] *= a[j] * a[k];
                }
            }
        }
        Ok(s)
    }

    /// Analytic counterpart of [`TimeSeries::with_power_factor`].
    pub fn with_power_factor(&self, mask: &[bool], pf: f64) -> Result<PowerStatistics> {
        let t = pf_ratio(pf)?;
        let n = self.n();
        let mut s = self.clone();
        for j in 0..n {
            for k in 0..n {
                let (mj, mk) = (mask[j], mask[k]);
                s.cov_pq[(j, k)] = if mk { -t * self.cov_pp[(j, k)] } else { self.cov_pq[(j, k)] };
                s.cov_qp[(j, k)] = if mj { -t * self.cov_pp[(j, k)] } else { self.cov_qp[(j, k)] };
                s.cov_qq[(j, k)] = match (mj, mk) {
                    (true, true) => t * t * self.cov_pp[(j, k)],
                    (true, false) => -t * self.cov_pq[(j, k)],
                    (false, true) => -t * self.cov_qp[(j, k)],
                    (false, false) => self.cov_qq[(j, k)],
                };
            }
        }
        for j in (0..n).filter(|&j| mask[j]) {
            s.q_mean[j] = -t * self.p_mean[j];
            s.var_q[j] = t * t * self.var_p[j];
            s.cov_pq_self[j] = s.cov_pq[(j, j)];
            // q >= 0 exactly when p <= 0
            s.q_plus[j] = t * t * self.p_minus[j];
            s.q_minus[j] = t * t * self.p_plus[j];
        }
        Ok(s)
    }
}

/// Sample statistics over every step of `series`.
pub fn estimate_statistics(series: &TimeSeries) -> Result<PowerStatistics> {
    let t_len = series.len();
    if t_len < 2 {
        return Err(Error::InsufficientSamples(t_len));
    }
    let n = series.n();
    let inv_t = 1.0 / t_len as f64;

    let mut p_mean = DVector::zeros(n);
    let mut q_mean = DVector::zeros(n);
    for t in 0..t_len {
        for j in 0..n {
            p_mean[j] += series.p[t][j];
            q_mean[j] += series.q[t][j];
        }
    }
    p_mean *= inv_t;
    q_mean *= inv_t;

    let mut p_plus = DVector::zeros(n);
    let mut p_minus = DVector::zeros(n);
    let mut q_plus = DVector::zeros(n);
    let mut q_minus = DVector::zeros(n);
    let mut cov_pp = DMatrix::zeros(n, n);
    let mut cov_pq = DMatrix::zeros(n, n);
    let mut cov_qq = DMatrix::zeros(n, n);
    let mut dp = vec![0.0; n];
    let mut dq = vec![0.0; n];
    for t in 0..t_len {
        for j in 0..n {
            let (p, q) = (series.p[t][j], series.q[t][j]);
            if p >= 0.0 {
                p_plus[j] += p * p;
            } else {
                p_minus[j] += p * p;
            }
            if q >= 0.0 {
                q_plus[j] += q * q;
            } else {
                q_minus[j] += q * q;
            }
            dp[j] = p - p_mean[j];
            dq[j] = q - q_mean[j];
        }
        for j in 0..n {
            for k in 0..n {
                cov_pp[(j, k)] += dp[j] * dp[k];
                cov_pq[(j, k)] += dp[j] * dq[k];
                cov_qq[(j, k)] += dq[j] * dq[k];
            }
        }
    }
    for v in [&mut p_plus, &mut p_minus, &mut q_plus, &mut q_minus] {
        *v *= inv_t;
    }
    for m in [&mut cov_pp, &mut cov_pq, &mut cov_qq] {
        *m *= inv_t;
    }
    let cov_qp = cov_pq.transpose();

    Ok(PowerStatistics {
        node_ids: series.node_ids.clone(),
        samples: t_len,
        var_p: cov_pp.diagonal(),
        var_q: cov_qq.diagonal(),
        cov_pq_self: cov_pq.diagonal(),
        p_mean,
        q_mean,
        p_plus,
        p_minus,
        q_plus,
        q_minus,
        cov_pp,
        cov_pq,
        cov_qp,
        cov_qq,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ResourceKind {
    /// ZIP load with constant-current share `b` and constant-impedance share `c`.
    ZipLoad { b: f64, c: f64 },
    /// Volt-var droop `dq/dv = k`, `k < 0`.
    DroopInverter { k: f64 },
}

/// Node whose injection depends on its own voltage, linearized around `v_nominal`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VoltageDependentResource {
    pub node: String,
    pub kind: ResourceKind,
    pub v_nominal: f64,
    /// Conservative evaluation voltage (per-unit²).
    pub v_eval: f64,
}

impl VoltageDependentResource {
    pub fn new(node: impl Into<String>, kind: ResourceKind, v_nominal: f64, v_eval: f64, band: &VoltageBand) -> Result<Self> {
        let r = VoltageDependentResource { node: node.into(), kind, v_nominal, v_eval };
        r.validate(band)?;
        Ok(r)
    }

    pub fn validate(&self, band: &VoltageBand) -> Result<()> {
        if let ResourceKind::DroopInverter { k } = self.kind {
            if !(k < 0.0) {
                return Err(Error::InvalidArgument(format!("droop coefficient must be negative, got {k}")));
            }
        }
        if !(self.v_nominal > 0.0) {
            return Err(Error::InvalidArgument(format!("nominal voltage must be positive, got {}", self.v_nominal)));
        }
        if !band.contains(self.v_eval) {
            return Err(Error::InvalidArgument(format!("evaluation voltage {} outside band", self.v_eval)));
        }
        Ok(())
    }

    /// `(dp, dq)` given the node's mean active power.
    pub fn shift(&self, p_mean: f64) -> (f64, f64) {
        let dv = self.v_eval - self.v_nominal;
        match self.kind {
            ResourceKind::ZipLoad { b, c } => ((b + 2.0 * c) / (2.0 * self.v_nominal) * dv * p_mean, 0.0),
            ResourceKind::DroopInverter { k } => (0.0, k * dv),
        }
    }
}

// Moves the mean by `delta` keeping the variance; the +/- split of the
// second moment is rescaled proportionally.
fn shift_moments(mean: &mut f64, var: f64, plus: &mut f64, minus: &mut f64, delta: f64) {
    if delta == 0.0 {
        return;
    }
    *mean += delta;
    let total = *plus + *minus;
    let target = var + *mean * *mean;
    if total > 0.0 {
        let f = target / total;
        *plus *= f;
        *minus *= f;
    } else if *mean >= 0.0 {
        *plus = target;
    } else {
        *minus = target;
    }
}

/// Adds surrogate injections of voltage-dependent resources as deterministic mean shifts.
pub fn surrogate_injections(resources: &[VoltageDependentResource], stats: &PowerStatistics) -> Result<PowerStatistics> {
    let index: HashMap<&str, usize> = stats.node_ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let mut out = stats.clone();
    for r in resources {
        let j = *index.get(r.node.as_str()).ok_or_else(|| Error::UnknownNode(r.node.clone()))?;
        // ZIP sensitivity is evaluated at the original mean power
        let (dp, dq) = r.shift(stats.p_mean[j]);
        shift_moments(&mut out.p_mean[j], out.var_p[j], &mut out.p_plus[j], &mut out.p_minus[j], dp);
        shift_moments(&mut out.q_mean[j], out.var_q[j], &mut out.q_plus[j], &mut out.q_minus[j], dq);
    }
    Ok(out)
}

/// JSON mirror of [`PowerStatistics`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StatisticsDocument {
    pub node_ids: Vec<String>,
    pub samples: usize,
    pub p_mean: Vec<f64>,
    pub q_mean: Vec<f64>,
    pub var_p: Vec<f64>,
    pub var_q: Vec<f64>,
    pub p_plus: Vec<f64>,
    pub p_minus: Vec<f64>,
    pub q_plus: Vec<f64>,
    pub q_minus: Vec<f64>,
    pub cov_pq_self: Vec<f64>,
    pub cov_pp: Vec<Vec<f64>>,
    pub cov_pq: Vec<Vec<f64>>,
    pub cov_qp: Vec<Vec<f64>>,
    pub cov_qq: Vec<Vec<f64>>,
}

pub(crate) fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

pub(crate) fn matrix_from_rows(rows: &[Vec<f64>], n: usize, what: &'static str) -> Result<DMatrix<f64>> {
    if rows.len() != n || rows.iter().any(|r| r.len() != n) {
        return Err(Error::DimensionMismatch { what, expected: n, found: rows.len() });
    }
    Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
}

impl From<&PowerStatistics> for StatisticsDocument {
    fn from(s: &PowerStatistics) -> Self {
        let v = |x: &DVector<f64>| x.iter().copied().collect::<Vec<_>>();
        StatisticsDocument {
            node_ids: s.node_ids.clone(),
            samples: s.samples,
            p_mean: v(&s.p_mean),
            q_mean: v(&s.q_mean),
            var_p: v(&s.var_p),
            var_q: v(&s.var_q),
            p_plus: v(&s.p_plus),
            p_minus: v(&s.p_minus),
            q_plus: v(&s.q_plus),
            q_minus: v(&s.q_minus),
            cov_pq_self: v(&s.cov_pq_self),
            cov_pp: rows_of(&s.cov_pp),
            cov_pq: rows_of(&s.cov_pq),
            cov_qp: rows_of(&s.cov_qp),
            cov_qq: rows_of(&s.cov_qq),
        }
    }
}

impl TryFrom<StatisticsDocument> for PowerStatistics {
    type Error = Error;

    fn try_from(d: StatisticsDocument) -> Result<Self> {
        let n = d.node_ids.len();
        let v = |x: Vec<f64>| -> Result<DVector<f64>> {
            if x.len() != n {
                return Err(Error::DimensionMismatch { what: "statistics vector", expected: n, found: x.len() });
            }
            Ok(DVector::from_vec(x))
        };
        let s = PowerStatistics {
            samples: d.samples,
            p_mean: v(d.p_mean)?,
            q_mean: v(d.q_mean)?,
            var_p: v(d.var_p)?,
            var_q: v(d.var_q)?,
            p_plus: v(d.p_plus)?,
            p_minus: v(d.p_minus)?,
            q_plus: v(d.q_plus)?,
            q_minus: v(d.q_minus)?,
            cov_pq_self: v(d.cov_pq_self)?,
            cov_pp: matrix_from_rows(&d.cov_pp, n, "cov_pp")?,
            cov_pq: matrix_from_rows(&d.cov_pq, n, "cov_pq")?,
            cov_qp: matrix_from_rows(&d.cov_qp, n, "cov_qp")?,
            cov_qq: matrix_from_rows(&d.cov_qq, n, "cov_qq")?,
            node_ids: d.node_ids,
        };
        s.check(1e-9)?;
        Ok(s)
    }
}

pub fn read_statistics(path: impl AsRef<Path>) -> Result<PowerStatistics> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
    let doc: StatisticsDocument = serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
    PowerStatistics::try_from(doc)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series(cols: &[&[f64]]) -> TimeSeries {
        let n = cols.len();
        let t = cols[0].len();
        let p: Vec<Vec<f64>> = (0..t).map(|s| (0..n).map(|j| cols[j][s]).collect()).collect();
        let q = vec![vec![0.0; n]; t];
        let ids = (1..=n).map(|j| j.to_string()).collect();
        TimeSeries::new(ids, (0..t).map(|s| s as f64).collect(), p, q).unwrap()
    }

    #[test]
    fn constant_series() {
        let s = estimate_statistics(&series(&[&[0.5; 8]])).unwrap();
        assert!((s.p_mean[0] - 0.5).abs() < 1e-15);
        assert_eq!(s.var_p[0], 0.0);
        assert!((s.p_plus[0] - 0.25).abs() < 1e-15);
        assert_eq!(s.p_minus[0], 0.0);
    }

    #[test]
    fn symmetric_two_point_series() {
        let s = estimate_statistics(&series(&[&[1.0, -1.0]])).unwrap();
        assert_eq!(s.p_mean[0], 0.0);
        assert_eq!(s.var_p[0], 1.0);
        assert_eq!(s.p_plus[0], 0.5);
        assert_eq!(s.p_minus[0], 0.5);
    }

    #[test]
    fn perfectly_correlated_nodes() {
        let a = [0.8, 1.2, 0.8, 1.2];
        let s = estimate_statistics(&series(&[&a, &a])).unwrap();
        assert!((s.cov_pp[(0, 1)] - 0.04).abs() < 1e-14);
        let rho = s.cov_pp[(0, 1)] / (s.var_p[0] * s.var_p[1]).sqrt();
        assert!((rho - 1.0).abs() < 1e-12);
    }

    #[test]
    fn too_few_samples() {
        let err = estimate_statistics(&series(&[&[1.0]])).unwrap_err();
        assert!(matches!(err, Error::InsufficientSamples(1)));
    }

    #[test]
    fn ragged_rows_rejected() {
        let err = TimeSeries::new(vec!["1".into(), "2".into()], vec![0.0], vec![vec![1.0]], vec![vec![0.0]]).unwrap_err();
        assert!(matches!(err, Error::MismatchedNodes(_)));
    }

    fn stats_with(p_mean: f64, q_mean: f64) -> PowerStatistics {
        let s = series(&[&[p_mean - 0.1, p_mean + 0.1]]);
        let q: Vec<Vec<f64>> = vec![vec![q_mean - 0.05], vec![q_mean + 0.05]];
        let s = TimeSeries::new(s.node_ids.clone(), s.times.clone(), s.p.clone(), q).unwrap();
        estimate_statistics(&s).unwrap()
    }

    #[test]
    fn zero_deviation_surrogate_is_identity() {
        let band = VoltageBand::default();
        let stats = stats_with(0.4, 0.1);
        let r = VoltageDependentResource::new("1", ResourceKind::DroopInverter { k: -2.0 }, 1.0, 1.0, &band).unwrap();
        assert_eq!(surrogate_injections(&[r], &stats).unwrap(), stats);
    }

    #[test]
    fn droop_shift() {
        let band = VoltageBand::default();
        let stats = stats_with(0.4, 0.1);
        let r = VoltageDependentResource::new("1", ResourceKind::DroopInverter { k: -2.0 }, 1.0, 1.05, &band).unwrap();
        let out = surrogate_injections(&[r], &stats).unwrap();
        assert!((out.q_mean[0] - (0.1 - 0.1)).abs() < 1e-14);
        assert_eq!(out.var_q[0], stats.var_q[0]);
        out.check(1e-10).unwrap();
    }

    #[test]
    fn zip_shift() {
        let band = VoltageBand::default();
        let stats = stats_with(0.4, 0.0);
        let r = VoltageDependentResource::new("1", ResourceKind::ZipLoad { b: 0.5, c: 0.25 }, 1.0, 1.1, &band).unwrap();
        let out = surrogate_injections(&[r], &stats).unwrap();
        assert!((out.p_mean[0] - 0.42).abs() < 1e-14);
        out.check(1e-10).unwrap();
    }

    #[test]
    fn resource_validation() {
        let band = VoltageBand::default();
        assert!(VoltageDependentResource::new("1", ResourceKind::DroopInverter { k: 0.5 }, 1.0, 1.0, &band).is_err());
        assert!(VoltageDependentResource::new("1", ResourceKind::DroopInverter { k: -0.5 }, 1.0, 1.3, &band).is_err());
        let r = VoltageDependentResource::new("9", ResourceKind::DroopInverter { k: -0.5 }, 1.0, 1.0, &band).unwrap();
        assert!(matches!(surrogate_injections(&[r], &stats_with(0.1, 0.1)), Err(Error::UnknownNode(_))));
    }
}
