//! Periodic sequence metric learning on CPU.
//!
//! The model encodes absolute frame positions with a learned Fourier basis
//! ([`afpe`]), splits the encoded sequence into trend and seasonal parts
//! ([`decompose`]), aggregates it over time with stacked token cross-attention
//! ([`tam`]), and trains per-part embeddings with a triplet + angular-margin
//! objective ([`losses`]). [`pipeline`] assembles these into a trainable model,
//! [`synth`] generates periodic data with known ground truth, and [`analysis`]
//! measures periodicity in learned features.

pub mod afpe;
pub mod analysis;
pub mod benchmark;
pub mod config;
pub mod container;
pub mod decompose;
pub mod error;
pub mod features;
pub mod gradcheck;
pub mod graph;
pub mod losses;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod run;
pub mod synth;
pub mod tam;

pub use error::{Result, TpaError};
