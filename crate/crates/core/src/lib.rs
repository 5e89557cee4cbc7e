//! Decoupled ADMM solver for separable resource allocation.

pub mod canonical;
pub mod cases;
pub mod engine;
pub mod format;
pub mod model;
pub mod oracle;
pub mod parallel;
pub mod subsolver;
