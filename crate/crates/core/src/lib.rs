//! Continuous sparsification and related ticket-search methods on a small
//! reverse-mode autodiff engine.
//!
//! The crate is organised bottom-up: [`tensor`] and [`tape`] provide the
//! numerics, [`masking`] the gating maths, [`model`] and [`data`] the
//! networks and datasets, [`search`] the round-structured controllers,
//! [`harness`] training and evaluation, and [`persist`] everything on disk.

pub mod data;
pub mod error;
pub mod harness;
pub mod masking;
pub mod model;
pub mod optim;
pub mod param;
pub mod persist;
pub mod search;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Precision, Tensor};
