//! Linear two-time-scale stochastic approximation lab.
//!
//! The crate couples an iteration engine for the coupled fast/slow
//! recursion with the closed-form covariance theory of its Polyak-Ruppert
//! averages, plus a Monte-Carlo harness that checks the distributional
//! predictions empirically. A CLI front end drives system generation,
//! campaigns, schedule comparisons, policy-evaluation instances, and
//! bound computations from flat config files.

pub mod cli;
pub mod dynamics;
pub mod matlib;
pub mod report;
pub mod rng;
pub mod schedule;
pub mod stats;
pub mod system;
pub mod tdc;
pub mod theory;
