//! Workbench for deviation-robust instruction-following navigation.
//!
//! Scenes are navigation connectivity graphs. Perturbations delete a single
//! traversable edge at the moment an agent tries to use it; the
//! [`perturbation`] module decides which ground-truth edges may be deleted and
//! builds the minimal-detour reference path for each. [`training`] grows a
//! pool of perturbed episodes from rollouts that already follow their
//! ground truth and combines imitation, actor-critic and contrastive
//! objectives. [`eval`] scores agents with and without perturbation.

pub mod agent;
pub mod autodiff;
pub mod cli;
pub mod dataset;
pub mod eval;
pub mod graph;
pub mod io;
pub mod perturbation;
pub mod rollout;
pub mod seeds;
pub mod training;
pub mod worldgen;

pub use graph::{Edge, GraphError, NodeId, Path, Position, Scene, SceneView};
