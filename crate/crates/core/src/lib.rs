pub mod artifact;
pub mod bbox;
pub mod blocks;
pub mod config;
pub mod cross_modal;
pub mod encoders;
pub mod error;
pub mod losses;
pub mod lm;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod synth;
pub mod tensor;
pub mod vocab;
pub mod warmstart;
pub mod train;

pub use bbox::BBox;
pub use error::{Error, Result};
