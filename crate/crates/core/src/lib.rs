//! Federated-learning simulation testbed for measuring how fragile client
//! contribution scores are.
//!
//! The crate simulates small cross-silo federations (a handful of clients
//! training logistic-regression or one-hidden-layer MLP models), aggregates
//! their updates with one of five server rules (FedAvg, FedProx, FedNova,
//! Krum, Zeno), and scores every client each round with exact Shapley,
//! GTG-Shapley, Leave-One-Out and ADP. Two score-poisoning attacks
//! (self improvement and targeted decrease) can be injected, and a small
//! statistics layer (Anderson-Darling k-sample, paired t-tests, RMSE,
//! loss-divergence monitoring) compares paired runs.
//!
//! Everything is deterministic given the experiment seed.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod aggregation;
pub mod attacks;
pub mod cli;
pub mod config;
pub mod contribution;
pub mod data;
pub mod error;
pub mod harness;
pub mod numerics;
pub mod rng;
pub mod stats;

pub use error::{Error, Result};
