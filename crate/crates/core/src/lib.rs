//! Exact Pfaffian moment formulas for flat ASEP and their numerical cross-checks.
//!
//! Modules are layered bottom-up: [`qcalc`] and [`quad`] supply special
//! functions and quadrature, [`skewlin`] and [`fredholm`] the Pfaffian
//! machinery, and [`flatmoments`], [`genfunc`], [`goe`] and [`bosegas`] the
//! formulas themselves. [`asepsim`] is the Monte Carlo oracle and [`cli`]
//! the command-line surface.

pub mod asepsim;
pub mod bosegas;
pub mod cli;
pub mod error;
pub mod flatmoments;
pub mod fredholm;
pub mod genfunc;
pub mod goe;
pub mod qcalc;
pub mod quad;
pub mod skewlin;

pub use error::{Error, Result};
pub use num_complex::Complex64;

/// A value together with an estimate of its absolute numerical error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub value: Complex64,
    pub err: f64,
}

impl Estimate {
    pub fn new(value: Complex64, err: f64) -> Self {
        Self { value, err }
    }
}
