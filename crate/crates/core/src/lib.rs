//! Sound event localization and detection (SELD) with divided
//! spectro-temporal attention.

pub mod augment;
pub mod data;
pub mod dsp;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod model;
pub mod numeric;
pub mod spatial;
pub mod targets;

pub use error::{Result, SeldError};
pub use numeric::{SeldRng, Tape, Tensor, Var};
