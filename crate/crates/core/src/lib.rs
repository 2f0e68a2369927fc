//! Simulation-based inference of leak and axial conductances in a passive
//! chain of compartments.
//!
//! The pipeline: a noisy numerical chain simulator ([`chain_model`]) produces
//! membrane traces, which are reduced to PSP heights and a spatial decay
//! constant ([`observables`]). A conditional masked autoregressive flow
//! ([`flow`]) is trained on simulated pairs ([`trainer`]) inside a sequential
//! loop that refines a proposal around a target observation ([`snpe`]).
//! [`validation`] holds the posterior diagnostics and a brute-force grid
//! posterior, and [`harness`] the reproducible experiment driver behind the
//! command-line tool.

pub mod chain_model;
pub mod flow;
pub mod harness;
pub mod error;
pub mod observables;
pub mod seed;
pub mod snpe;
pub mod trainer;
pub mod validation;

pub use chain_model::{
    decode_parameters, run_trial, simulate_chain, ChainParameters, DigitalParameterSpace,
    InputKernel, Layout, NoiseModel, StimulusProtocol, TraceSet,
};
pub use error::{Error, Result};
pub use observables::{
    extract_psp_heights, fit_decay_constant, observable_vector, ObservableKind, ObservableVector,
    PspHeightMatrix,
};
