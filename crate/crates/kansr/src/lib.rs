//! Kolmogorov-Arnold networks with symbolic extraction.
//!
//! Trains small KANs whose edges are univariate spline or RBF curves, then
//! converts the trained network into a closed-form expression via one of
//! three pipelines: per-edge local fitting (AutoSym), greedy in-context
//! symbolic regression (GSR), or gated matching pursuit (GMP). A sweep
//! harness runs one-factor-at-a-time robustness grids and a stats module
//! compares the resulting error distributions.

pub mod autodiff;
pub mod basis;
pub mod data;
pub mod expr;
pub mod extract;
pub mod gates;
pub mod network;
pub mod oplib;
pub mod report;
pub mod seeding;
pub mod stats;
pub mod sweep;
