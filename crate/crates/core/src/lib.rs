//! Conditional measure flows of jump-diffusions driven by common noise.
//!
//! The crate simulates particle systems that share a common noise
//! realisation, evaluates cylindrical functionals of their empirical laws
//! together with exact linear derivatives, and checks Itô-type identities for
//! the resulting measure flow term by term.

pub mod control;
pub mod copies;
pub mod cylindrical;
pub mod diagnostics;
pub mod error;
pub mod flow;
pub mod grid;
pub mod ito;
pub mod model;
pub mod noise;
pub mod path;
pub mod seed;
pub mod stats;

pub use error::{Error, Result};
