//! Communication-efficient ADMM for federated learning.
//!
//! The crate simulates a server and `m` clients solving
//! `min_x Σ w_i f_i(x)` through consensus ADMM where clients talk to the
//! server only every `k0` iterations. It ships exact (`ceadmm`), inexact
//! (`iceadmm`) and linearized (`liadmm`) ADMM, a FedAvg baseline, and runtime
//! checks of the descent lemmas and `O(k0/k)` rate bounds.

pub mod analysis;
pub mod data;
pub mod error;
pub mod experiment;
pub mod fedcore;
pub mod linalg;
pub mod losses;
pub mod rng;
pub mod solvers;

pub use error::{Error, Result};
pub use linalg::{DenseMatrix, DenseVector};
pub use solvers::{run, Algorithm, HyperParams, SolveResult};
