//! Energy-preference optimization for flow-matching models on analytic
//! energy landscapes.
//!
//! The crate is organized around the refinement pipeline:
//!
//! - [`diffcore`] — dense f64 arrays with tape-based reverse-mode
//!   differentiation and an Adam optimizer.
//! - [`flowmodel`] — interpolant schedules, the MLP velocity field with
//!   low-rank adapters, and flow-matching pretraining.
//! - [`sampler`] — probability-flow ODE and marginal-preserving SDE
//!   integration of a learned velocity field.
//! - [`energy`] — analytic potentials, Boltzmann ground truth on a grid,
//!   a Metropolis-Hastings reference sampler, and energy ranking.
//! - [`preference`] — pairwise and listwise preference losses (DPO-BT,
//!   Plackett-Luce, FlowDPO, and the EPO listwise bound).
//! - [`refine`] — the online refinement loop: sample, rank by energy,
//!   update adapters against a frozen reference model.
//! - [`metrics`] — distributional evaluation (JSD, Wasserstein-2, free
//!   energy surfaces, mode masses, TICA).
//! - [`checkpoint`] — JSON model checkpoints.
//! - [`gradcheck`] — the finite-difference gradient suite for every loss.

pub mod checkpoint;
pub mod diffcore;
pub mod energy;
pub mod flowmodel;
pub mod gradcheck;
pub mod linalg;
pub mod metrics;
pub mod preference;
pub mod refine;
pub mod sampler;
pub mod seed;

pub use diffcore::{AdamParams, AdamState, Array, DiffError, Gradients, Graph, NodeId};
pub use flowmodel::{
    LowRankAdapter, ModelBinding, ModelConfig, ModelPair, Schedule, Trainable, VelocityModel,
};
pub use sampler::{Method, SamplerConfig, Velocity};
