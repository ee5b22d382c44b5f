//! Static/dynamic appearance disentanglement for video clips by learned
//! per-pixel temporal projection, with joint multi-objective training of the
//! projector and a small recognizer.

// `!(x > 0.0)` style checks are meant to reject NaN too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod datagen;
pub mod error;
pub mod io;
pub mod numeric;
pub mod objectives;
pub mod pwtp;
pub mod recognizer;
pub mod train;

pub use error::{Error, Result};
