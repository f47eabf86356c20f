//! Seeded synthetic feeders and power series.
//!
//! PV output is a clear-sky bell scaled by a shared AR(1) cloud process with
//! small per-node noise; loads follow a two-peak daily shape with AR(1)
//! multiplicative noise. One step is one minute.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::feeder::{Branch, FeederModel, Node, NodeRole, VoltageBand};
use crate::stats::{pf_ratio, TimeSeries};

use NodeRole::{FixedInjection as Dg, FixedLoad as Load, SwitchedPv as Pv};

pub const STEPS_PER_DAY: usize = 1440;

/// Peak ratings of one node. Generation and demand are both nonnegative.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NodeRating {
    pub pv: f64,
    pub load: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SeriesParams {
    pub steps: usize,
    /// Hour of day at step 0.
    pub start_hour: f64,
    /// AR(1) coefficient of the cloud process per step.
    pub cloud_persistence: f64,
    /// Largest fractional PV reduction from clouds.
    pub cloud_depth: f64,
    pub pv_noise: f64,
    pub load_noise: f64,
    pub load_pf: f64,
}

impl Default for SeriesParams {
    fn default() -> Self {
        SeriesParams {
            steps: STEPS_PER_DAY,
            start_hour: 0.0,
            cloud_persistence: 0.98,
            cloud_depth: 0.6,
            pv_noise: 0.05,
            load_noise: 0.08,
            load_pf: 0.95,
        }
    }
}

pub fn solar_shape(hour: f64) -> f64 {
    let h = hour.rem_euclid(24.0);
    if (6.0..=18.0).contains(&h) {
        (std::f64::consts::PI * (h - 6.0) / 12.0).sin()
    } else {
        0.0
    }
}

pub fn load_shape(hour: f64) -> f64 {
    let h = hour.rem_euclid(24.0);
    let bump = |c: f64, w: f64| (-((h - c) / w).powi(2)).exp();
    0.4 + 0.25 * bump(8.0, 1.5) + 0.6 * bump(19.0, 2.0)
}

struct Ar1 {
    phi: f64,
    x: f64,
}

impl Ar1 {
    fn new(phi: f64, rng: &mut ChaCha8Rng) -> Self {
        Ar1 { phi, x: rng.sample(StandardNormal) }
    }

    fn step(&mut self, rng: &mut ChaCha8Rng) -> f64 {
        let e: f64 = rng.sample(StandardNormal);
        self.x = self.phi * self.x + (1.0 - self.phi * self.phi).sqrt() * e;
        self.x
    }
}

/// Net injection `pv * solar * cloud - load * shape * noise` per node and step.
/// PV runs at unity power factor; loads draw reactive power at `load_pf`.
pub fn series(feeder: &FeederModel, ratings: &[NodeRating], params: &SeriesParams, seed: u64) -> Result<TimeSeries> {
    let n = feeder.n();
    if ratings.len() != n {
        return Err(Error::DimensionMismatch { what: "ratings", expected: n, found: ratings.len() });
    }
    if ratings.iter().any(|r| r.pv < 0.0 || r.load < 0.0) {
        return Err(Error::InvalidArgument("ratings must be nonnegative".into()));
    }
    let tan_load = pf_ratio(params.load_pf)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cloud = Ar1::new(params.cloud_persistence, &mut rng);
    let mut pv_noise: Vec<Ar1> = (0..n).map(|_| Ar1::new(0.9, &mut rng)).collect();
    let mut load_noise: Vec<Ar1> = (0..n).map(|_| Ar1::new(0.95, &mut rng)).collect();

    let mut times = Vec::with_capacity(params.steps);
    let mut p = Vec::with_capacity(params.steps);
    let mut q = Vec::with_capacity(params.steps);
    for t in 0..params.steps {
        let hour = params.start_hour + t as f64 * 24.0 / STEPS_PER_DAY as f64;
        let c = 1.0 - params.cloud_depth / (1.0 + (-2.0 * cloud.step(&mut rng)).exp());
        let (sun, demand) = (solar_shape(hour), load_shape(hour));
        let mut pr = Vec::with_capacity(n);
        let mut qr = Vec::with_capacity(n);
        for (j, r) in ratings.iter().enumerate() {
            let gen = (r.pv * sun * c * (1.0 + params.pv_noise * pv_noise[j].step(&mut rng))).max(0.0);
            let load = (r.load * demand * (1.0 + params.load_noise * load_noise[j].step(&mut rng))).max(0.0);
            pr.push(gen - load);
            qr.push(-load * tan_load);
        }
        times.push(t as f64);
        p.push(pr);
        q.push(qr);
    }
    TimeSeries::new(feeder.node_ids(), times, p, q)
}

/// Feeder with node `i` hanging off `parents[i]` (0 is the reference bus,
/// `k >= 1` is node `k`). Ids are `n1..nN`, the reference bus is `sub`.
pub fn tree(roles: &[NodeRole], parents: &[usize], r: &[f64], x: &[f64], v0: f64, band: VoltageBand) -> Result<FeederModel> {
    let n = roles.len();
    for (what, len) in [("parents", parents.len()), ("r", r.len()), ("x", x.len())] {
        if len != n {
            return Err(Error::DimensionMismatch { what, expected: n, found: len });
        }
    }
    let name = |k: usize| if k == 0 { "sub".to_string() } else { format!("n{k}") };
    let nodes = roles.iter().enumerate().map(|(i, &role)| Node { id: name(i + 1), role, phase: "a".into() }).collect();
    let branches = (0..n).map(|i| Branch { from: name(parents[i]), to: name(i + 1), r: r[i], x: x[i] }).collect();
    FeederModel::new(nodes, branches, "sub", v0, band)
}

/// A feeder together with node ratings and series settings.
#[derive(Clone, Debug)]
pub struct Fixture {
    pub name: &'static str,
    pub feeder: FeederModel,
    pub ratings: Vec<NodeRating>,
    pub params: SeriesParams,
}

impl Fixture {
    pub fn series(&self, seed: u64) -> Result<TimeSeries> {
        series(&self.feeder, &self.ratings, &self.params, seed)
    }

    /// Ratings with PV capacity on switched nodes scaled by `alpha`.
    pub fn with_pv_scale(&self, alpha: f64) -> Fixture {
        let mut f = self.clone();
        let mask = self.feeder.switched_mask();
        for (r, &m) in f.ratings.iter_mut().zip(&mask) {
            if m {
                r.pv *= alpha;
            }
        }
        f
    }

    /// Mean peak PV rating over switched nodes divided by mean peak demand over load nodes.
    pub fn penetration(&self) -> f64 {
        let mask = self.feeder.switched_mask();
        let mean = |it: Vec<f64>| if it.is_empty() { f64::NAN } else { it.iter().sum::<f64>() / it.len() as f64 };
        let pv = mean(self.ratings.iter().zip(&mask).filter(|(_, &m)| m).map(|(r, _)| r.pv).collect());
        let load = mean(self.ratings.iter().filter(|r| r.load > 0.0).map(|r| r.load).collect());
        pv / load
    }
}

fn rating(role: NodeRole, pv: f64, load: f64) -> NodeRating {
    match role {
        Pv | Dg => NodeRating { pv, load: 0.0 },
        Load => NodeRating { pv: 0.0, load },
    }
}

/// Stiff short feeder; voltages stay well inside the band.
pub fn benign() -> Fixture {
    let roles = [Load, Pv, Load, Pv];
    let feeder = tree(&roles, &[0, 1, 1, 3], &[0.005; 4], &[0.005; 4], 1.0, VoltageBand::default()).expect("valid fixture");
    let ratings = roles.iter().map(|&r| rating(r, 1.0, 0.8)).collect();
    Fixture { name: "benign", feeder, ratings, params: SeriesParams::default() }
}

/// Long chain with an unswitched generator near the end; midday PV pushes
/// downstream voltages above the band.
pub fn over_voltage() -> Fixture {
    let roles = [Load, Pv, Load, Pv, Dg, Pv];
    let feeder = tree(&roles, &[0, 1, 2, 3, 4, 5], &[0.01; 6], &[0.01; 6], 1.0, VoltageBand::default()).expect("valid fixture");
    let ratings = roles.iter().map(|&r| rating(r, 1.0, 0.3)).collect();
    Fixture { name: "over-voltage", feeder, ratings, params: SeriesParams::default() }
}

/// Weak chain with heavy evening demand; tail voltages sag below the band.
pub fn under_voltage() -> Fixture {
    let roles = [Load, Pv, Load, Pv, Load, Pv];
    let feeder = tree(&roles, &[0, 1, 2, 3, 4, 5], &[0.02; 6], &[0.02; 6], 1.0, VoltageBand::default()).expect("valid fixture");
    let ratings = roles.iter().map(|&r| rating(r, 0.3, 0.5)).collect();
    Fixture { name: "under-voltage", feeder, ratings, params: SeriesParams::default() }
}

/// Ten-node feeder (trunk with two laterals) for penetration sweeps; PV
/// ratings equal load ratings at scale 1.
pub fn penetration_feeder() -> Fixture {
    let roles = [Load, Pv, Load, Pv, Pv, Load, Pv, Pv, Load, Pv];
    let parents = [0, 1, 2, 3, 4, 2, 6, 4, 8, 9];
    let feeder = tree(&roles, &parents, &[0.008; 10], &[0.008; 10], 1.0, VoltageBand::default()).expect("valid fixture");
    let ratings = roles.iter().map(|&r| rating(r, 0.25, 0.25)).collect();
    Fixture { name: "penetration", feeder, ratings, params: SeriesParams::default() }
}

/// Random radial feeder with `n` nodes, at least one switched PV node.
pub fn random(n: usize, seed: u64) -> Result<Fixture> {
    random_stressed(n, seed, 1.0)
}

/// As [`random`] with branch impedances multiplied by `stress`.
pub fn random_stressed(n: usize, seed: u64, stress: f64) -> Result<Fixture> {
    if n == 0 {
        return Err(Error::InvalidArgument("feeder needs at least one node".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut roles: Vec<NodeRole> = (0..n)
        .map(|_| match rng.random_range(0..10) {
            0..=5 => Pv,
            6..=8 => Load,
            _ => Dg,
        })
        .collect();
    if !roles.contains(&Pv) {
        roles[n - 1] = Pv;
    }
    let parents: Vec<usize> = (0..n).map(|i| rng.random_range(0..=i)).collect();
    let r: Vec<f64> = (0..n).map(|_| stress * rng.random_range(0.004..0.02)).collect();
    let x: Vec<f64> = r.iter().map(|&r| r * rng.random_range(0.5..2.0)).collect();
    let feeder = tree(&roles, &parents, &r, &x, 1.0, VoltageBand::default())?;
    let ratings = roles.iter().map(|&role| rating(role, rng.random_range(0.3..1.2), rng.random_range(0.2..0.8))).collect();
    Ok(Fixture { name: "random", feeder, ratings, params: SeriesParams::default() })
}

/// Random load-dominated feeder. Impedances are scaled so that nominal
/// evening peak demand (with PV off) sags the weakest node to `v_sag`.
pub fn random_loaded(n: usize, seed: u64, v_sag: f64) -> Result<Fixture> {
    if n == 0 {
        return Err(Error::InvalidArgument("feeder needs at least one node".into()));
    }
    let band = VoltageBand::default();
    if !(v_sag > 0.0 && v_sag < 1.0) {
        return Err(Error::InvalidArgument(format!("sag target must be in (0, 1), got {v_sag}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut roles: Vec<NodeRole> = (0..n).map(|i| if i % 2 == 0 { Load } else { Pv }).collect();
    if n == 1 {
        roles[0] = Pv;
    }
    let parents: Vec<usize> = (0..n).map(|i| rng.random_range(i.saturating_sub(2)..=i)).collect();
    let r: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..1.5)).collect();
    let x: Vec<f64> = r.iter().map(|&r| r * rng.random_range(0.5..1.5)).collect();
    let ratings: Vec<NodeRating> =
        roles.iter().map(|&role| rating(role, rng.random_range(0.05..0.3), rng.random_range(0.5..1.2))).collect();
    let params = SeriesParams::default();
    let unit = tree(&roles, &parents, &r, &x, 1.0, band)?;
    let sens = crate::feeder::path_impedances(&unit);
    let tan_load = pf_ratio(params.load_pf)?;
    let peak = load_shape(19.0);
    let drop = (0..n)
        .map(|i| (0..n).map(|j| ratings[j].load * peak * (sens.r[(i, j)] + sens.x[(i, j)] * tan_load)).sum::<f64>())
        .fold(0.0, f64::max);
    if drop <= 0.0 {
        return Err(Error::InvalidArgument("feeder has no load to calibrate against".into()));
    }
    let k = (1.0 - v_sag) / drop;
    let scale = |v: &[f64]| v.iter().map(|z| z * k).collect::<Vec<_>>();
    let feeder = tree(&roles, &parents, &scale(&r), &scale(&x), 1.0, band)?;
    Ok(Fixture { name: "random-loaded", feeder, ratings, params })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes() {
        assert_eq!(solar_shape(3.0), 0.0);
        assert!((solar_shape(12.0) - 1.0).abs() < 1e-12);
        assert!(load_shape(19.0) > load_shape(12.0));
    }

    #[test]
    fn series_is_seeded() {
        let f = over_voltage();
        let a = f.series(3).unwrap();
        let b = f.series(3).unwrap();
        let c = f.series(4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.len(), STEPS_PER_DAY);
    }

    #[test]
    fn signs_follow_roles() {
        let f = under_voltage();
        let s = f.series(1).unwrap();
        for t in 0..s.len() {
            for (j, node) in f.feeder.nodes().iter().enumerate() {
                match node.role {
                    NodeRole::FixedLoad => assert!(s.p(t)[j] <= 0.0),
                    _ => assert!(s.p(t)[j] >= 0.0 && s.q(t)[j] == 0.0),
                }
            }
        }
    }

    #[test]
    fn penetration_scales_with_pv() {
        let f = penetration_feeder();
        assert!((f.penetration() - 1.0).abs() < 1e-12);
        assert!((f.with_pv_scale(2.0).penetration() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn random_feeders_valid() {
        for seed in 0..20 {
            let f = random(1 + seed as usize % 10, seed).unwrap();
            assert!(f.feeder.switched_mask().iter().any(|&m| m));
        }
    }
}
