//! Raw-waveform conditional flow matching at desk scale.

pub mod error;
pub mod audio;
pub mod numerics;
pub mod patch;
pub mod flow;
pub mod conditioning;
pub mod model;
pub mod dsp;
pub mod train;
pub mod generate;
pub mod eval;
pub mod curate;
pub mod gradcheck;

pub use error::{Error, Result};
