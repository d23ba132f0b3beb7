//! Pairwise discrete MRFs, mean field inference under explicit update
//! schedules, and Mean Field Networks: mean field unrolled into a
//! fixed-depth feed-forward network and trained by back-propagation.
//!
//! - [`mrf`]: graphs, potentials, energies, the KL objective and a
//!   brute-force oracle for small models.
//! - [`meanfield`]: site updates, sequential and block-parallel sweeps.
//! - [`crf`]: the binary grid CRF used for denoising and its likelihood training.
//! - [`mfn`]: forward/backward through the unrolled network, losses and trainers.
//! - [`data`]: the synthetic letter-denoising benchmark and its file format.

pub mod crf;
pub mod data;
mod error;
pub mod gradcheck;
pub mod meanfield;
pub mod mfn;
pub mod mrf;
pub mod pgm;

pub use crf::{CrfInstance, CrfParams, InputImage};
pub use error::{Error, Result};
pub use meanfield::{Schedule, ScheduleKind};
pub use mfn::{ForwardTrace, LossSpec, MfnParams};
pub use mrf::{Assignment, FactorialDistribution, GraphTopology, PairwiseMrf};
