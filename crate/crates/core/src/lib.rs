//! Degeneracy-aware sliding-window LiDAR-inertial odometry.

// `!(x > 0.0)` guards double as NaN rejection.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod manifold;
pub mod plane_map;
pub mod propagation;
pub mod state;
pub mod measurement;
pub mod dade;
pub mod daaskf;
pub mod evaluation;
pub mod simulator;
pub mod harness;
