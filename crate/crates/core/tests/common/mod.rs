//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

use std::collections::{HashMap, HashSet};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use pvtrip::feeder::{FeederModel, NodeRole, VoltageBand};
use pvtrip::stats::{estimate_statistics, PowerStatistics, TimeSeries};
use pvtrip::synth;

/// Path impedances from the raw branch list: walk each node up to the
/// reference bus, collect the traversed branches, intersect.
pub fn oracle_paths(feeder: &FeederModel) -> (DMatrix<f64>, DMatrix<f64>) {
    let mut up: HashMap<&str, (&str, f64, f64)> = HashMap::new();
    let mut adj: HashMap<&str, Vec<(&str, f64, f64)>> = HashMap::new();
    for b in feeder.branches() {
        adj.entry(&b.from).or_default().push((&b.to, b.r, b.x));
        adj.entry(&b.to).or_default().push((&b.from, b.r, b.x));
    }
    let mut stack = vec![feeder.reference()];
    let mut seen: HashSet<&str> = HashSet::from([feeder.reference()]);
    while let Some(u) = stack.pop() {
        for &(w, r, x) in adj.get(u).map(|v| v.as_slice()).unwrap_or(&[]) {
            if seen.insert(w) {
                up.insert(w, (u, r, x));
                stack.push(w);
            }
        }
    }
    let path = |id: &str| -> HashMap<String, (f64, f64)> {
        let mut out = HashMap::new();
        let mut cur = id.to_string();
        while let Some(&(p, r, x)) = up.get(cur.as_str()) {
            out.insert(format!("{p}->{cur}"), (r, x));
            cur = p.to_string();
        }
        out
    };
    let ids = feeder.node_ids();
    let paths: Vec<_> = ids.iter().map(|id| path(id)).collect();
    let n = ids.len();
    let mut r = DMatrix::zeros(n, n);
    let mut x = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            for (k, &(br, bx)) in &paths[i] {
                if paths[j].contains_key(k) {
                    r[(i, j)] += 2.0 * br;
                    x[(i, j)] += 2.0 * bx;
                }
            }
        }
    }
    (r, x)
}

/// Mean and variance of `v_i = v0 + sum_j s_j (R_ij p_j + X_ij q_j)` with
/// independent Bernoulli `s_j`, written in covariance form.
pub fn direct_moments(lambda: &[f64], stats: &PowerStatistics, r: &DMatrix<f64>, x: &DMatrix<f64>, v0: f64) -> (Vec<f64>, Vec<f64>) {
    let n = lambda.len();
    let mut mu = vec![v0; n];
    let mut var = vec![0.0; n];
    for i in 0..n {
        for j in 0..n {
            let ed = r[(i, j)] * stats.p_mean[j] + x[(i, j)] * stats.q_mean[j];
            mu[i] += lambda[j] * ed;
            let epp = stats.var_p[j] + stats.p_mean[j].powi(2);
            let eqq = stats.var_q[j] + stats.q_mean[j].powi(2);
            let epq = stats.cov_pq_self[j] + stats.p_mean[j] * stats.q_mean[j];
            let ed2 = r[(i, j)].powi(2) * epp + 2.0 * r[(i, j)] * x[(i, j)] * epq + x[(i, j)].powi(2) * eqq;
            var[i] += lambda[j] * ed2 - (lambda[j] * ed).powi(2);
            for k in 0..n {
                if k == j {
                    continue;
                }
                let cov = r[(i, j)] * r[(i, k)] * stats.cov_pp[(j, k)]
                    + r[(i, j)] * x[(i, k)] * stats.cov_pq[(j, k)]
                    + x[(i, j)] * r[(i, k)] * stats.cov_qp[(j, k)]
                    + x[(i, j)] * x[(i, k)] * stats.cov_qq[(j, k)];
                var[i] += lambda[j] * lambda[k] * cov;
            }
        }
    }
    (mu, var)
}

/// Unclipped Chebyshev lower bound on `Pr{v in band}` about the band center.
pub fn direct_bound(mu: f64, var: f64, band: &VoltageBand) -> f64 {
    let c = 0.5 * (band.v_min() + band.v_max());
    let h = 0.5 * (band.v_max() - band.v_min());
    1.0 - (var + (mu - c).powi(2)) / (h * h)
}

/// Every switch configuration where each switched node is ON exactly when
/// its own voltage lies in the closed band.
pub fn brute_force_consistent(p: &[f64], q: &[f64], feeder: &FeederModel, r: &DMatrix<f64>, x: &DMatrix<f64>) -> Vec<Vec<bool>> {
    let n = feeder.n();
    let band = feeder.band();
    let switched: Vec<usize> = (0..n).filter(|&j| feeder.nodes()[j].role == NodeRole::SwitchedPv).collect();
    let mut out = Vec::new();
    for bits in 0u64..(1 << switched.len()) {
        let mut s = vec![true; n];
        for (b, &j) in switched.iter().enumerate() {
            s[j] = bits >> b & 1 == 1;
        }
        let v: Vec<f64> = (0..n)
            .map(|i| feeder.reference_v0() + (0..n).filter(|&j| s[j]).map(|j| r[(i, j)] * p[j] + x[(i, j)] * q[j]).sum::<f64>())
            .collect();
        if switched.iter().all(|&i| s[i] == (band.v_min() <= v[i] && v[i] <= band.v_max())) {
            out.push(s);
        }
    }
    out.sort();
    out
}

pub fn random_roles(rng: &mut ChaCha8Rng, n: usize) -> Vec<NodeRole> {
    let mut roles: Vec<NodeRole> = (0..n)
        .map(|_| match rng.random_range(0..6) {
            0..=2 => NodeRole::SwitchedPv,
            3 | 4 => NodeRole::FixedLoad,
            _ => NodeRole::FixedInjection,
        })
        .collect();
    roles[rng.random_range(0..n)] = NodeRole::SwitchedPv;
    roles
}

/// Random radial feeder with `n` nodes and at least one switched node.
pub fn random_feeder(rng: &mut ChaCha8Rng, n: usize, z: f64) -> FeederModel {
    let roles = random_roles(rng, n);
    let parents: Vec<usize> = (0..n).map(|i| rng.random_range(0..=i)).collect();
    let r: Vec<f64> = (0..n).map(|_| z * rng.random_range(0.0..1.0)).collect();
    let x: Vec<f64> = (0..n).map(|_| z * rng.random_range(0.0..1.0)).collect();
    synth::tree(&roles, &parents, &r, &x, rng.random_range(0.9..1.1), VoltageBand::default()).unwrap()
}

/// Correlated Gaussian series with random means and mixing.
pub fn random_series(rng: &mut ChaCha8Rng, feeder: &FeederModel, steps: usize) -> TimeSeries {
    let n = feeder.n();
    let mean: Vec<f64> = (0..2 * n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mix = DMatrix::from_fn(2 * n, 2 * n, |_, _| rng.random_range(-0.3..0.3));
    let mut p = Vec::with_capacity(steps);
    let mut q = Vec::with_capacity(steps);
    for _ in 0..steps {
        let z = DVector::from_fn(2 * n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let w = &mix * z;
        p.push((0..n).map(|j| mean[j] + w[j]).collect());
        q.push((0..n).map(|j| mean[n + j] + w[n + j]).collect());
    }
    TimeSeries::new(feeder.node_ids(), (0..steps).map(|t| t as f64).collect(), p, q).unwrap()
}

pub fn random_stats(rng: &mut ChaCha8Rng, feeder: &FeederModel, steps: usize) -> PowerStatistics {
    estimate_statistics(&random_series(rng, feeder, steps)).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `|a - b| <= tol * max(1, |b|)`.
pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(1.0)
}
