//! Whitening, linear gradient flow, second-order optimizers and the
//! information-loss checks that tie them together.

pub mod data_model;
pub mod error;
pub mod info_props;
pub mod iterative_opt;
pub mod linear_flow;
pub mod loss;
pub mod models;
pub mod random;
pub mod whitening;

pub use data_model::{Dataset, LabelEncoding, LabelSet, LabeledData, SplitTag};
pub use error::{Error, Result};
