//! Language-conditioned cloth folding.
//!
//! A position-based-dynamics cloth simulator, a visible connectivity graph
//! with a learned mesh-edge classifier, a multi-modal transformer policy that
//! maps (instruction, depth image, graph) to pick-and-place heatmaps, scripted
//! oracles for behavioural cloning, staged training and closed-loop evaluation.

pub mod cloth_sim;
pub mod error;
pub mod eval;
pub mod graph;
pub mod lang;
pub mod model;
pub mod nn;
pub mod oracle;
pub mod spatial;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
