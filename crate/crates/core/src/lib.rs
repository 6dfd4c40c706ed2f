//! Dynamics and projected adaptive control of two tendon-driven continuum
//! robots co-manipulating a flexible rod in a closed kinematic chain.
//!
//! The rods are Cosserat rods discretised with a variable-strain basis; the
//! loop closures are Pfaffian constraints handled with Lagrange multipliers
//! in the plant and with an orthogonal projector in the controller.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod constraints;
pub mod control;
pub mod dynamics;
pub mod error;
pub mod kinematics;
pub mod liegroup;
pub mod model;
pub mod quadrature;
pub mod regressor;
pub mod report;
pub mod sim;
pub mod verify;

pub use error::{Error, Result};
