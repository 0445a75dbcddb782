// `!(x > 0.0)` is used on purpose so that NaN fails validation
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod control;
pub mod dynamics;
pub mod error;
pub mod harness;
pub mod identification;
pub mod kinematics;
pub mod modal;
pub mod observer;
pub mod params;
pub mod quadrature;
pub mod state;

pub use error::{Error, Result};
