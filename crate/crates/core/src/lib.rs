//! Task-specific grasp selection with translational tool-action-target
//! embeddings.
//!
//! Observations of a tool grasped at a particular part, actions, and target
//! objects are embedded so that `h + r ≈ t` for compatible triplets. Grasp
//! candidates are then ranked by their distance `‖h + r − t‖₁`.

pub mod cli;
pub mod data;
pub mod embed;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod infer;
pub mod io;
pub mod learn;
pub mod model;

pub use data::{
    enumerate_triplets, generate_world, load_triplets, save_triplets, split, DatasetSplit,
    SplitMode, SyntheticWorld, TaskTriplet, TripletSet, WorldSpec,
};
pub use error::{Error, Result};
pub use eval::{evaluate, EvalConfig, MetricsReport, PredicateOracle};
pub use geometry::{CameraModel, GraspRect, MaskGrid, RobotPose};
pub use infer::{infer_missing, predict_grasp, rank_candidates, Candidate, Prediction, RankedGrasp};
pub use learn::{train, TrainConfig};
pub use model::{score, suitability, ActionId, EmbeddingModel, Observation, TripletScorer};
