//! Desk-scale laboratory for the Hierarchical Reasoning Model: a two-timescale
//! latent recurrence trained with one-step gradients and ACT Q-learning
//! halting, exercised on Sudoku.
//!
//! - [`tensor`]: reverse-mode autodiff over dense tensors and a
//!   finite-difference gradient checker.
//! - [`model`]: the HRM network, its L-only ablation and checkpoints.
//! - [`act`]: halting decisions, Q targets, the segment loss and the
//!   deep-supervision training step.
//! - [`optim`]: AdamW with linear warmup.
//! - [`sudoku`]: generation, oracle solver, augmentation, CSV and metrics.
//! - [`harness`]: run configs, training, evaluation sweeps, trajectories and
//!   architecture comparison.

pub mod act;
pub mod harness;
pub mod model;
pub mod optim;
pub mod sudoku;
pub mod tensor;

pub use act::{ActConfig, HaltPolicy, HaltStrategy, QTargets};
pub use harness::{RunConfig, SweepReport, TrajectoryRecord};
pub use model::{GradMode, HrmModel, LatentState, ModelConfig, SegmentOutcome};
pub use sudoku::{EncodedExample, PuzzleInstance};
pub use tensor::{Graph, Tensor, Var};
