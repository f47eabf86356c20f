//! Damped fixed-point iteration for the micro-state map.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{MicroState, MicroStateKind, TrippingModelParams};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolverOptions {
    /// Weight of the new map value, in `(0, 1]`.
    pub damping: f64,
    /// Max-norm tolerance on `lambda - clip(F(lambda))`.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions { damping: 0.5, tol: 1e-9, max_iter: 10_000 }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(Error::InvalidArgument(format!("damping must be in (0, 1], got {}", self.damping)));
        }
        if !(self.tol > 0.0) {
            return Err(Error::InvalidArgument(format!("tolerance must be positive, got {}", self.tol)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FixedPointSolution {
    pub state: MicroState,
    /// Max-norm of `lambda - clip(F(lambda))` over switched nodes.
    pub residual: f64,
    /// Same without clipping.
    pub raw_residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn residuals(params: &TrippingModelParams, lambda: &DVector<f64>) -> (DVector<f64>, f64, f64) {
    let raw = params.evaluate(lambda);
    let mut clipped = raw.clone();
    let (mut res, mut raw_res) = (0.0f64, 0.0f64);
    for (i, &m) in params.switched_mask.iter().enumerate() {
        if m {
            clipped[i] = raw[i].clamp(0.0, 1.0);
            res = res.max((lambda[i] - clipped[i]).abs());
            raw_res = raw_res.max((lambda[i] - raw[i]).abs());
        } else {
            clipped[i] = 1.0;
        }
    }
    (clipped, res, raw_res)
}

/// Iterates `lambda <- (1-d) lambda + d clip(F(lambda))` with non-switched
/// nodes pinned to 1, until the clipped residual drops to `tol`.
///
/// On failure the best iterate seen is returned inside
/// [`Error::NonConvergence`].
pub fn solve_fixed_point(params: &TrippingModelParams, init: &MicroState, opts: &SolverOptions) -> Result<FixedPointSolution> {
    opts.validate()?;
    let n = params.n();
    if init.len() != n {
        return Err(Error::DimensionMismatch { what: "initial micro-state", expected: n, found: init.len() });
    }
    let mut lambda = init.lambda().clone();
    for (i, &m) in params.switched_mask.iter().enumerate() {
        if !m {
            lambda[i] = 1.0;
        }
    }
    let d = opts.damping;
    let mut best: Option<FixedPointSolution> = None;
    for it in 0..=opts.max_iter {
        let (f, res, raw_res) = residuals(params, &lambda);
        let done = res <= opts.tol;
        if done || best.as_ref().is_none_or(|b| res < b.residual) {
            let sol = FixedPointSolution {
                state: MicroState::new(lambda.clone(), MicroStateKind::ModelBound)?,
                residual: res,
                raw_residual: raw_res,
                iterations: it,
                converged: done,
            };
            if done {
                return Ok(sol);
            }
            best = Some(sol);
        }
        if it == opts.max_iter {
            break;
        }
        lambda = lambda * (1.0 - d) + f * d;
        // keep rounding from leaving [0, 1]
        lambda.apply(|l| *l = l.clamp(0.0, 1.0));
    }
    let mut best = best.expect("at least one iterate");
    best.iterations = opts.max_iter;
    Err(Error::NonConvergence { best: Box::new(best) })
}

/// Initial states: all-ON first, then `count - 1` seeded uniform draws on
/// the switched coordinates.
pub fn multistart_inits(params: &TrippingModelParams, count: usize, seed: u64) -> Vec<MicroState> {
    let n = params.n();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![MicroState::ones(n, MicroStateKind::ModelBound)];
    for _ in 1..count {
        let l = DVector::from_fn(n, |i, _| if params.switched_mask[i] { rng.random::<f64>() } else { 1.0 });
        out.push(MicroState::new(l, MicroStateKind::ModelBound).expect("draws lie in [0, 1)"));
    }
    out
}
