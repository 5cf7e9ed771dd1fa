// Comparisons written as `!(x > limit)` deliberately treat NaN as failing.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod dataset;
pub mod format;
pub mod group;
pub mod image;
pub mod model;
pub mod nn;
pub mod ood;
pub mod pseudolabel;
pub mod seed;
pub mod standardize;
pub mod testbed;
pub mod training;

pub use error::{Error, Result};
pub use group::{Angle, Family, SO2Element, SymmetrySpec};
pub use image::{Image, Interpolation};
pub use model::{Analysis, BoundaryOutput, ModelBundle, ModelConfig};
