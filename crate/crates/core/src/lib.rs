//! Modified extended Toda hierarchy on a truncated difference-operator algebra.

pub mod addsym;
pub mod dressing;
pub mod error;
pub mod hamiltonian;
pub mod fields;
pub mod hierarchy;
pub mod hp;
pub mod opalg;
pub mod report;

#[cfg(test)]
mod properties;

pub use error::{MethError, Result};
pub use fields::{CoeffFn, Grid, GridSpec, Ledger};
pub use opalg::{DiffOp, MixedOp, Span};
