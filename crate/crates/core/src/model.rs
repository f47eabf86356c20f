//! Conservative probabilistic tripping model.
//!
//! Each switch is a Bernoulli variable with ON-probability `lambda_j`,
//! independent of the available power at its node. The first two moments of
//! the squared voltage follow from the power statistics, and Chebyshev's
//! inequality turns them into a lower bound on `Pr{v_min <= v_i <= v_max}`:
//!
//! ```text
//! lambda_i >= 1 - (var_v_i + (mu_v_i - c)^2) / h^2
//! ```
//!
//! with `c`/`h` the band center/half-width. Expanding the right-hand side in
//! `lambda` gives the bilinear map `a0 + B lambda + [lambda' C_i lambda]`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feeder::{SensitivityMatrices, VoltageBand};
use crate::stats::{rows_of, PowerStatistics};

/// Negative variances above this are rounding noise and clamp to zero.
pub const VARIANCE_CLAMP: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MicroStateKind {
    /// Fixed point of the Chebyshev model.
    ModelBound,
    /// Time fraction ON from simulation.
    Empirical,
}

/// Per-node ON-probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct MicroState {
    lambda: DVector<f64>,
    kind: MicroStateKind,
}

impl MicroState {
    pub fn new(lambda: DVector<f64>, kind: MicroStateKind) -> Result<Self> {
        if let Some(i) = lambda.iter().position(|l| !(0.0..=1.0).contains(l)) {
            return Err(Error::InvalidArgument(format!("micro-state entry {i} = {} outside [0, 1]", lambda[i])));
        }
        Ok(MicroState { lambda, kind })
    }

    pub fn ones(n: usize, kind: MicroStateKind) -> Self {
        MicroState { lambda: DVector::from_element(n, 1.0), kind }
    }

    pub fn lambda(&self) -> &DVector<f64> {
        &self.lambda
    }

    pub fn kind(&self) -> MicroStateKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.lambda.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lambda.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VoltageStatistics {
    pub mu_v: DVector<f64>,
    pub var_v: DVector<f64>,
}

/// Expected ON count over switched nodes, and as a percentage.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MacroState {
    pub s_hat: f64,
    pub s_p: f64,
    pub switched: usize,
}

fn check_dims(what: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::DimensionMismatch { what, expected, found });
    }
    Ok(())
}

/// Moment kernels built from the statistics and path impedances.
pub(crate) struct Kernel<'a> {
    stats: &'a PowerStatistics,
    sens: &'a SensitivityMatrices,
}

impl<'a> Kernel<'a> {
    pub(crate) fn new(stats: &'a PowerStatistics, sens: &'a SensitivityMatrices) -> Result<Self> {
        check_dims("sensitivity vs statistics", sens.n(), stats.n())?;
        check_dims("sensitivity X", sens.n(), sens.x.nrows())?;
        Ok(Kernel { stats, sens })
    }

    /// Mean voltage contribution of node `j` at `i` when ON.
    #[inline]
    pub(crate) fn m(&self, i: usize, j: usize) -> f64 {
        self.sens.r[(i, j)] * self.stats.p_mean[j] + self.sens.x[(i, j)] * self.stats.q_mean[j]
    }

    /// `E{(R_ij p_j + X_ij q_j)^2}`.
    #[inline]
    pub(crate) fn gamma1(&self, i: usize, j: usize) -> f64 {
        let (r, x, s) = (self.sens.r[(i, j)], self.sens.x[(i, j)], self.stats);
        r * r * s.p_second_moment(j) + x * x * s.q_second_moment(j) + 2.0 * r * x * (s.p_mean[j] * s.q_mean[j] + s.cov_pq_self[j])
    }

    #[inline]
    pub(crate) fn gamma2(&self, i: usize, j: usize) -> f64 {
        self.m(i, j).powi(2)
    }

    /// `E{(R_ij p_j + X_ij q_j)(R_ik p_k + X_ik q_k)}` for `j != k`.
    #[inline]
    pub(crate) fn gamma1_pair(&self, i: usize, j: usize, k: usize) -> f64 {
        let (s, r, x) = (self.stats, &self.sens.r, &self.sens.x);
        let (pj, qj, pk, qk) = (s.p_mean[j], s.q_mean[j], s.p_mean[k], s.q_mean[k]);
        r[(i, j)] * r[(i, k)] * (s.cov_pp[(j, k)] + pj * pk)
            + r[(i, j)] * x[(i, k)] * (s.cov_pq[(j, k)] + pj * qk)
            + x[(i, j)] * r[(i, k)] * (s.cov_qp[(j, k)] + qj * pk)
            + x[(i, j)] * x[(i, k)] * (s.cov_qq[(j, k)] + qj * qk)
    }

    #[inline]
    pub(crate) fn gamma2_pair(&self, i: usize, j: usize, k: usize) -> f64 {
        self.m(i, j) * self.m(i, k)
    }
}

/// `mu_v_i = v0 + sum_j lambda_j (R_ij P_j + X_ij Q_j)`.
pub fn voltage_mean(lambda: &MicroState, stats: &PowerStatistics, sens: &SensitivityMatrices, v0: f64) -> Result<DVector<f64>> {
    let k = Kernel::new(stats, sens)?;
    let n = stats.n();
    check_dims("micro-state", n, lambda.len())?;
    let l = lambda.lambda();
    Ok(DVector::from_fn(n, |i, _| v0 + (0..n).map(|j| l[j] * k.m(i, j)).sum::<f64>()))
}

/// Variance of squared voltage under independent Bernoulli switching.
pub fn voltage_variance(lambda: &MicroState, stats: &PowerStatistics, sens: &SensitivityMatrices) -> Result<DVector<f64>> {
    let k = Kernel::new(stats, sens)?;
    let n = stats.n();
    check_dims("micro-state", n, lambda.len())?;
    let l = lambda.lambda();
    let mut out = DVector::zeros(n);
    for i in 0..n {
        let mut var = 0.0;
        for j in 0..n {
            var += l[j] * k.gamma1(i, j) - l[j] * l[j] * k.gamma2(i, j);
            for kk in 0..j {
                var += 2.0 * l[j] * l[kk] * (k.gamma1_pair(i, j, kk) - k.gamma2_pair(i, j, kk));
            }
        }
        if var < 0.0 {
            if var < -VARIANCE_CLAMP {
                return Err(Error::NegativeVariance { node: i, value: var });
            }
            var = 0.0;
        }
        out[i] = var;
    }
    Ok(out)
}

pub fn voltage_statistics(lambda: &MicroState, stats: &PowerStatistics, sens: &SensitivityMatrices, v0: f64) -> Result<VoltageStatistics> {
    Ok(VoltageStatistics { mu_v: voltage_mean(lambda, stats, sens, v0)?, var_v: voltage_variance(lambda, stats, sens)? })
}

/// Unclipped Chebyshev expression `1 - (var + (mu - c)^2) / h^2`; may be negative.
pub fn chebyshev_raw(mu: f64, var: f64, band: &VoltageBand) -> f64 {
    let h = band.half_width();
    1.0 - (var + (mu - band.center()).powi(2)) / (h * h)
}

/// Distribution-free lower bound on `Pr{v in band}`, clipped to `[0, 1]`.
pub fn chebyshev_bound(mu: f64, var: f64, band: &VoltageBand) -> Result<f64> {
    if !(var >= 0.0) {
        return Err(Error::NegativeVariance { node: 0, value: var });
    }
    Ok(chebyshev_raw(mu, var, band).clamp(0.0, 1.0))
}

/// Coefficients of the bilinear micro-state map.
#[derive(Clone, Debug, PartialEq)]
pub struct TrippingModelParams {
    pub a0: DVector<f64>,
    pub b: DMatrix<f64>,
    /// `c[i]` is symmetric with a zero diagonal.
    pub c: Vec<DMatrix<f64>>,
    pub switched_mask: Vec<bool>,
    pub v0: f64,
    pub band: VoltageBand,
}

impl TrippingModelParams {
    pub fn n(&self) -> usize {
        self.a0.len()
    }

    pub fn switched_count(&self) -> usize {
        self.switched_mask.iter().filter(|&&m| m).count()
    }

    /// `a0 + B lambda + [lambda' C_i lambda]`, unclipped.
    pub fn evaluate(&self, lambda: &DVector<f64>) -> DVector<f64> {
        let mut out = &self.a0 + &self.b * lambda;
        for (i, ci) in self.c.iter().enumerate() {
            out[i] += lambda.dot(&(ci * lambda));
        }
        out
    }

    /// The map with non-switched entries pinned to 1 and switched entries clipped.
    pub fn evaluate_clipped(&self, lambda: &DVector<f64>) -> DVector<f64> {
        let mut f = self.evaluate(lambda);
        for (i, &m) in self.switched_mask.iter().enumerate() {
            f[i] = if m { f[i].clamp(0.0, 1.0) } else { 1.0 };
        }
        f
    }

    /// Mean of the off-diagonal `|C_i(j,k)|`.
    pub fn mean_abs_offdiag_c(&self) -> f64 {
        let n = self.n();
        if n < 2 {
            return 0.0;
        }
        let sum: f64 = self
            .c
            .iter()
            .map(|ci| (0..n).flat_map(|j| (0..n).filter(move |&k| k != j).map(move |k| (j, k))).map(|(j, k)| ci[(j, k)].abs()).sum::<f64>())
            .sum();
        sum / (n * n * (n - 1)) as f64
    }
}

/// Assembles `a0`, `B` and `C_i` for reference voltage `v0`.
pub fn build_params(
    stats: &PowerStatistics,
    sens: &SensitivityMatrices,
    band: &VoltageBand,
    v0: f64,
    switched_mask: &[bool],
) -> Result<TrippingModelParams> {
    let kernel = Kernel::new(stats, sens)?;
    let n = stats.n();
    check_dims("switched mask", n, switched_mask.len())?;
    let (vmin, vmax) = (band.v_min(), band.v_max());
    let h2 = band.half_width().powi(2);
    let offset = 2.0 * v0 - vmax - vmin;

    let a0 = DVector::from_element(n, 1.0 - (offset / (vmax - vmin)).powi(2));
    let b = DMatrix::from_fn(n, n, |i, j| -kernel.gamma1(i, j) / h2 - offset / h2 * kernel.m(i, j));
    let c: Vec<DMatrix<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut ci = DMatrix::zeros(n, n);
            for j in 0..n {
                for k in 0..j {
                    let v = -kernel.gamma1_pair(i, j, k) / h2;
                    ci[(j, k)] = v;
                    ci[(k, j)] = v;
                }
            }
            ci
        })
        .collect();
    let params = TrippingModelParams { a0, b, c, switched_mask: switched_mask.to_vec(), v0, band: *band };
    if params.b.iter().chain(params.c.iter().flat_map(|m| m.iter())).any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("non-finite model coefficient".into()));
    }
    Ok(params)
}

pub fn macro_state(lambda: &MicroState, switched_mask: &[bool]) -> Result<MacroState> {
    check_dims("switched mask", lambda.len(), switched_mask.len())?;
    let switched = switched_mask.iter().filter(|&&m| m).count();
    if switched == 0 {
        return Err(Error::NoSwitchedNodes);
    }
    let s_hat: f64 = lambda.lambda().iter().zip(switched_mask).filter(|(_, &m)| m).map(|(l, _)| l).sum();
    Ok(MacroState { s_hat, s_p: 100.0 * s_hat / switched as f64, switched })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub feeder_hash: String,
    pub stats_window: String,
}

/// JSON export of a parameterized model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelDocument {
    pub node_ids: Vec<String>,
    pub switched_mask: Vec<bool>,
    pub v0: f64,
    pub v_min: f64,
    pub v_max: f64,
    pub a0: Vec<f64>,
    pub b: Vec<Vec<f64>>,
    pub c: Vec<Vec<Vec<f64>>>,
    pub provenance: Provenance,
}

impl ModelDocument {
    pub fn new(params: &TrippingModelParams, node_ids: Vec<String>, provenance: Provenance) -> Self {
        ModelDocument {
            node_ids,
            switched_mask: params.switched_mask.clone(),
            v0: params.v0,
            v_min: params.band.v_min(),
            v_max: params.band.v_max(),
            a0: params.a0.iter().copied().collect(),
            b: rows_of(&params.b),
            c: params.c.iter().map(rows_of).collect(),
            provenance,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feeder::SensitivityMatrices;

    fn one_node(p: f64, var_p: f64, r: f64) -> (PowerStatistics, SensitivityMatrices) {
        let v = |x: f64| DVector::from_element(1, x);
        let m = |x: f64| DMatrix::from_element(1, 1, x);
        let stats = PowerStatistics {
            node_ids: vec!["1".into()],
            samples: 2,
            p_mean: v(p),
            q_mean: v(0.0),
            var_p: v(var_p),
            var_q: v(0.0),
            p_plus: v(var_p + p * p),
            p_minus: v(0.0),
            q_plus: v(0.0),
            q_minus: v(0.0),
            cov_pq_self: v(0.0),
            cov_pp: m(var_p),
            cov_pq: m(0.0),
            cov_qp: m(0.0),
            cov_qq: m(0.0),
        };
        (stats, SensitivityMatrices { r: m(r), x: m(0.0) })
    }

    fn ms(v: &[f64]) -> MicroState {
        MicroState::new(DVector::from_column_slice(v), MicroStateKind::ModelBound).unwrap()
    }

    #[test]
    fn mean_with_everything_off_is_v0() {
        let (stats, sens) = one_node(0.5, 0.01, 0.2);
        let mu = voltage_mean(&ms(&[0.0]), &stats, &sens, 1.02).unwrap();
        assert_eq!(mu[0], 1.02);
    }

    #[test]
    fn single_node_mean() {
        let (stats, sens) = one_node(0.5, 0.0, 0.2);
        let mu = voltage_mean(&ms(&[1.0]), &stats, &sens, 1.0).unwrap();
        assert!((mu[0] - 1.1).abs() < 1e-15);
    }

    #[test]
    fn single_node_variance_reduces_to_linear_flow() {
        let (stats, sens) = one_node(1.0, 0.04, 0.2);
        let k = Kernel::new(&stats, &sens).unwrap();
        assert!((k.gamma1(0, 0) - 0.0416).abs() < 1e-15);
        assert!((k.gamma2(0, 0) - 0.04).abs() < 1e-15);
        let var = voltage_variance(&ms(&[1.0]), &stats, &sens).unwrap();
        assert!((var[0] - 0.0016).abs() < 1e-15);
        assert_eq!(voltage_variance(&ms(&[0.0]), &stats, &sens).unwrap()[0], 0.0);
    }

    #[test]
    fn chebyshev_examples() {
        let band = VoltageBand::new(0.81, 1.21).unwrap();
        assert_eq!(chebyshev_bound(1.01, 0.0, &band).unwrap(), 1.0);
        assert!(chebyshev_bound(1.01, 0.04, &band).unwrap().abs() < 1e-12);
        assert!((chebyshev_raw(1.21, 0.01, &band) + 0.25).abs() < 1e-12);
        assert_eq!(chebyshev_bound(1.21, 0.01, &band).unwrap(), 0.0);
        assert!(chebyshev_bound(1.0, -0.1, &band).is_err());
    }

    #[test]
    fn a0_values() {
        let (stats, sens) = one_node(0.5, 0.0, 0.2);
        let band = VoltageBand::new(0.81, 1.21).unwrap();
        let centered = build_params(&stats, &sens, &band, band.center(), &[true]).unwrap();
        assert_eq!(centered.a0[0], 1.0);
        let p = build_params(&stats, &sens, &band, 1.0, &[true]).unwrap();
        assert!((p.a0[0] - 0.9975).abs() < 1e-12);
    }

    #[test]
    fn macro_state_examples() {
        let mask = [true; 4];
        let m = macro_state(&ms(&[1.0; 4]), &mask).unwrap();
        assert_eq!((m.s_hat, m.s_p), (4.0, 100.0));
        let m = macro_state(&ms(&[1.0, 0.5, 0.5, 0.0]), &mask).unwrap();
        assert_eq!((m.s_hat, m.s_p), (2.0, 50.0));
        assert!(matches!(macro_state(&ms(&[1.0]), &[false]), Err(Error::NoSwitchedNodes)));
    }

    #[test]
    fn micro_state_range_enforced() {
        assert!(MicroState::new(DVector::from_column_slice(&[1.2]), MicroStateKind::Empirical).is_err());
        assert!(MicroState::new(DVector::from_column_slice(&[-0.01]), MicroStateKind::Empirical).is_err());
    }

    #[test]
    fn dimension_mismatch_reported() {
        let (stats, sens) = one_node(0.5, 0.0, 0.2);
        assert!(matches!(voltage_mean(&ms(&[1.0, 1.0]), &stats, &sens, 1.0), Err(Error::DimensionMismatch { .. })));
    }
}
