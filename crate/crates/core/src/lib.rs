//! Loop-closure and kidnap-recovery backend.
//!
//! The crate is organized around the stages of a place-recognition SLAM
//! backend: whole-image descriptor aggregation ([`netvlad`]), metric-learning
//! losses and a toy trainer ([`loss`], [`train`]), a store-and-compare
//! descriptor database with a loop-acceptance rule ([`placedb`]), kidnap
//! detection with multi-world bookkeeping ([`worlds`]), robust pose-graph
//! optimization with switchable loop constraints ([`posegraph`]), and a
//! deterministic stream simulator that wires everything together ([`sim`]).

pub mod geometry;
pub mod gradcheck;
pub mod loss;
pub mod netvlad;
pub mod placedb;
pub mod posegraph;
pub mod sim;
pub mod train;
pub mod worlds;

pub use geometry::{compose, inverse, relative_world_pose, se3_exp, se3_log, Pose, Twist};
pub use loss::{allpair_loss, triplet_loss, LossConfig, LossKind, TrainingTuple};
pub use netvlad::{describe, FeatureMap, ImageDescriptor, VladParams};
pub use placedb::{Keyframe, LoopCandidate, PlaceDb, PlaceDbConfig};
pub use posegraph::{ate, OptimizeConfig, PoseGraphProblem, SolveReport};
pub use sim::{generate, GroundTruth, SimConfig};
pub use worlds::{DisjointSets, KidnapDetector, WorldGraph, WorldManager};
