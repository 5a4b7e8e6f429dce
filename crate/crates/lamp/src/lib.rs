//! Learned adaptive mesh refinement for PDE surrogate rollouts.
//!
//! A graph-network evolution model advances bundled field states on a live
//! mesh while a remeshing policy decides, step by step, which edges to split
//! and which to coarsen. The error/compute tradeoff is steered by a scalar
//! knob `beta` fed to the policy. Everything runs on the CPU in f32 with a
//! small reverse-mode tape; runs are bit-reproducible for a fixed seed.

pub mod datagen;
pub mod error;
pub mod evolution;
pub mod gnn;
pub mod harness;
pub mod interp;
pub mod mesh;
pub mod policy;
pub mod tensor;

pub use error::{Error, Result};
