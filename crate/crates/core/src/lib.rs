//! Goal-conditioned embedding pre-training from offline trajectories, with planning,
//! offline RL and smoothness analysis on top of the learned embedding.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod gradcore;
pub mod encoder;
pub mod worlds;
pub mod trajstore;
pub mod objectives;
pub mod control;
pub mod analysis;
pub mod experiments;
pub mod repro;
