//! Reconstruction of simulatable articulated mechanisms from 6-DoF pose
//! trajectories.
//!
//! The pipeline runs from observed body poses to a kinematic forest
//! ([`topology`]), through parameter inference over the built-in simulator
//! ([`dynamics`], [`estimation`]), to closed-loop validation with MPPI
//! ([`control`]).

pub mod control;
pub mod dynamics;
pub mod estimation;
pub mod joint_fit;
pub mod params;
pub mod topology;
pub mod se3;

pub use joint_fit::{JointFitResult, JointModel, JointType, RansacConfig};
pub use se3::{BodyTrajectory, ObservationSet, Pose, Vec3};
