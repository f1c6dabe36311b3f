pub mod analysis;
pub mod bath;
pub mod config;
pub mod coherence;
pub mod error;
pub mod fit;
pub mod io;
pub mod montecarlo;
pub mod nufft;
mod par;
pub mod rng;
pub mod sequence;
pub mod spectra;
pub mod spin;

pub use error::{Error, Result};
