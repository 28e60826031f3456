//! Experiment orchestration: deterministic per-stage seeding, artifact
//! hashing, per-fold stage execution with leakage guards, cross-validation
//! aggregation, and the retention-fraction sweep.

pub mod cv;
pub mod fold;
pub mod grid;
pub mod hashing;
pub mod seeds;
pub mod sweep;

pub use cv::{run_cv, run_fold, FoldOutcome, RunManifest, RunOptions};
pub use fold::{guard_no_leakage, PreparedFold, SyntheticSample};
pub use grid::write_class_grids;
pub use hashing::ArtifactHasher;
pub use seeds::{stage_rng, stage_seed};
pub use sweep::{sweep_gamma, GammaRow, GammaSweep};
