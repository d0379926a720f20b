//! Numerical building blocks: normal distribution routines, adaptive
//! Gauss-Kronrod quadrature, tridiagonal solves, and sample statistics.

pub mod normal;
pub mod quad;
pub mod stats;
pub mod tridiag;
