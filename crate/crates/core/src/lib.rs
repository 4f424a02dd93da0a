//! Unscented reservoir smoother.
//!
//! An echo-state network supplies the nonlinear state evolution of a
//! state-space model whose measurements are Black-Scholes call prices of the
//! reservoir's volatility readout. Beliefs are propagated with the unscented
//! transform (filtering and RTS smoothing); parameters are learned offline by
//! generalized EM with a Lasso penalty, or online by a joint UKF over the
//! augmented state.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;
pub mod eval;
pub mod gaussian;
pub mod gem;
pub mod io;
pub mod linalg;
pub mod market;
pub mod online;
pub mod par;
pub mod pipeline;
pub mod pricing;
pub mod reservoir;
pub mod series;
pub mod ssm;
pub mod synthetic;
pub mod unscented;

pub use error::{Error, Result};
pub use gaussian::{condition, Gaussian, JointGaussian};
pub use par::Exec;
pub use pricing::{batch_price, bs_call_price, implied_vol, ObservationBatch, OptionSpec};
pub use reservoir::{init_reservoir, readout, readout_gaussian, spectral_radius, InitConfig, ReservoirParams};
pub use ssm::{forward_filter, k_step_predict, predict, rts_smooth, update, FilterState, SmoothedTrajectory};
pub use unscented::{
    augmented_transform, joint_gaussian_from_two_stage, sigma_points, unscented_transform, SigmaPointSet, UtConfig,
};
