//! Conservative risk assessment of voltage-driven PV inverter tripping on
//! radial distribution feeders.

// `!(x > 0.0)` also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod experiment;
pub mod export;
pub mod feeder;
pub mod mitigate;
pub mod model;
pub mod solver;
pub mod stats;
pub mod synth;
pub mod truth;

pub use error::{Error, Result};
pub use feeder::{path_impedances, FeederModel, NodeRole, SensitivityMatrices, VoltageBand};
pub use mitigate::{certify_relaxation, design_countermeasure, quantify_risk, MitigationConfig, RiskOptions};
pub use model::{build_params, MacroState, MicroState, TrippingModelParams};
pub use solver::{solve_fixed_point, SolverOptions};
pub use stats::{estimate_statistics, PowerStatistics, TimeSeries};
pub use truth::{oracle_enumerate, resolve_config, simulate, ResolveOptions, SwitchConfig};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub mod introduction {}
    #[doc = include_str!("../../../book/src/feeder.md")]
    pub mod feeder {}
    #[doc = include_str!("../../../book/src/statistics.md")]
    pub mod statistics {}
    #[doc = include_str!("../../../book/src/model.md")]
    pub mod model {}
    #[doc = include_str!("../../../book/src/solver.md")]
    pub mod solver {}
    #[doc = include_str!("../../../book/src/ground-truth.md")]
    pub mod ground_truth {}
    #[doc = include_str!("../../../book/src/validation.md")]
    pub mod validation {}
    #[doc = include_str!("../../../book/src/countermeasure.md")]
    pub mod countermeasure {}
    #[doc = include_str!("../../../book/src/cli.md")]
    pub mod cli {}
    #[doc = include_str!("../../../README.md")]
    pub mod readme {}
}
