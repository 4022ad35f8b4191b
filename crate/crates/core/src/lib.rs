pub mod checkpoint;
pub mod config;
pub mod contrastive;
pub mod data;
pub mod diffusion;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod init;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod retriever;
pub mod rng;
pub mod sknn;
pub mod sparse;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use params::{ParamId, ParamStore, Parameter};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
