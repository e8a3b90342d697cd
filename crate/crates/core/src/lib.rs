//! Learning-based Kazantzis-Kravaris/Luenberger (KKL) observers.
//!
//! A KKL observer runs the linear filter `z' = A z + B y` on the measured
//! output of a nonlinear plant and recovers the plant state through a learned
//! inverse transformation `x = F^-1(z)`. This crate provides the simulation
//! substrate, a reverse-mode autodiff tape with higher-order gradients, the
//! network approximators, four training algorithms (including meta-learning
//! with output-driven adaptation), online adaptation, and the experiment suite.

pub mod adapt;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod nn;
pub mod observer;
pub mod sim;
pub mod train;

pub use error::{Error, Result};
