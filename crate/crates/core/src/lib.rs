//! Three-player adversarial training at desk scale: a classifier, a
//! class-conditional generator and a pair discriminator trained jointly for
//! semi-supervised classification and conditional generation, plus an exact
//! tabular oracle that verifies the game's equilibrium properties on finite
//! probability tables.

pub mod adam;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod game;
pub mod gradcheck;
pub mod gradsuite;
pub mod graph;
pub mod networks;
pub mod oracle;
pub mod rng;
pub mod tensor;
pub mod train;

pub use adam::{AdamConfig, AdamState};
pub use error::{Error, Result};
pub use graph::{Activation, Graph, NodeId};
pub use rng::RngStream;
pub use tensor::{DType, Tensor};
