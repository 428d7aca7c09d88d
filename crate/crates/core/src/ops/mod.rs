//! Forward/backward kernels that the tape records.

pub mod conv;
pub mod norm;
pub mod pool;
