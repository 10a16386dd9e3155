//! Forward and backward kernels behind the graph operations.

pub(crate) mod activation;
pub(crate) mod broadcast;
pub(crate) mod conv;
pub(crate) mod norm;
pub(crate) mod pool;
