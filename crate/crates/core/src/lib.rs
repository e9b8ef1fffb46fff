//! Temporary build scaffold.
pub mod bands;
pub mod data;
pub mod dsp;
pub mod encoder;
pub mod eval;
pub mod extractor;
pub mod features;
pub mod model;
pub mod par;
pub mod rng;
pub mod tensor;
pub mod train;
