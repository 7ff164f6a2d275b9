//! Dynamic-line-rating aware, chance-constrained market clearing.

// Index loops mirror the matrix notation of the models.
#![allow(clippy::needless_range_loop)]

pub mod analysis;
pub mod error;
pub mod grid;
pub mod market_multi;
pub mod market_single;
pub mod socp;
pub mod thermal;
pub mod uncertainty;

pub use error::{Error, Result};
