pub mod checkpoint;
pub mod contrastive;
pub mod error;
pub mod image;
pub mod inference;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod par;
pub mod params;
pub mod seq2seq;
pub mod superres;
pub mod synth;
pub mod tensor;
pub mod textproc;
pub mod vq;

pub use error::{Error, Result};
