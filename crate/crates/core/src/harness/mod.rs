//! Training loops, ticket evaluation, selection and sweeps.

pub mod eval;
pub mod plan;
pub mod sweep;
pub mod train;
