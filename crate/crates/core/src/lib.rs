//! Real-time nonlinear MPC trajectory planning for urban driving.

// `!(x > 0.0)` style checks are used on purpose so that NaN is rejected
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod constraints;
pub mod error;
pub mod ocp;
pub mod planner;
pub mod qp;
pub mod riccati;
pub mod rti;
pub mod road;
pub mod sim;
pub mod vehicle;

pub use error::{Error, Result};
