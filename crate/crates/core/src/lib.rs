//! Joint design of diffusion-MRI encoding directions and reconstruction
//! operators, with the tooling needed to evaluate them: electrostatic
//! baselines, synthetic multi-tensor phantoms, constant-solid-angle ODFs,
//! deterministic streamline tracking and signal- and tract-space scores.

#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0.0)` also rejects NaN

pub mod design;
pub mod error;
pub mod experiment;
pub mod par;
pub mod phantom;
pub mod pipeline;
pub mod score;
pub mod sphere;
pub mod tract;
pub mod volume;

pub use error::{Error, Result};
