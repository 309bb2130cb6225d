//! Two-path semantic segmentation with bidirectional gated flow alignment.
//!
//! The crate is self-contained: a small NCHW tensor type with tape-based
//! reverse-mode differentiation ([`autodiff`]), the network operators built on
//! it ([`nn`], [`flow`]), the training objectives ([`losses`], [`edge`]), the
//! model itself ([`model`]), a synthetic dataset ([`data`]) and the
//! training/evaluation harness ([`train`]).

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod edge;
pub mod error;
pub mod flow;
pub mod gradcheck;
pub mod labels;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod visuals;

pub use autodiff::{Gradients, Tape, Var};
pub use edge::{extract_edge_map, EdgeMap};
pub use error::{Error, Result};
pub use flow::{FlowField, WarpMode};
pub use labels::{LabelMap, IGNORE_INDEX};
pub use losses::LossConfig;
pub use model::{Alignment, Model, ModelConfig, ParameterSet};
pub use tensor::{Element, Shape, Tensor};
pub use train::{RunConfig, TrainConfig};
