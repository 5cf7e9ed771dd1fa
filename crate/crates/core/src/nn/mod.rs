//! A small neural-network toolkit with hand-written gradients, and the
//! networks built from it.

pub(crate) mod autoencoder;
pub(crate) mod backbone;
pub(crate) mod boundary;
pub(crate) mod layers;
pub(crate) mod ops;
pub mod optim;
pub mod params;
pub mod readout;

pub use backbone::{format_stages, parse_stages, StageSpec};
pub use boundary::CYCLIC_CLASSES;
pub use layers::FilterBasis;
pub use optim::{Adam, CosineSchedule};
pub use params::{Grads, Param, ParamId, ParamSet};
pub use readout::{circular_readout, identity_penalty, Readout};
