//! Hierarchical SE(3) motion trees.
//!
//! A tree of motion nodes deforms canonical 3D points over time. Each node
//! blends its parent's shared motion bases, global motion follows the
//! kinematic chain, and points are skinned to their nearest leaves with
//! dual-quaternion blending. The crate fits such trees to observed 3D
//! trajectories by gradient descent and provides the initialization,
//! densification, decomposition and evaluation machinery around that fit.

pub mod ad;
pub mod config;
pub mod densify;
pub mod error;
pub mod init;
pub mod io;
pub mod kmeans;
pub mod metrics;
pub mod motion;
pub mod optim;
pub mod se3;
pub mod synth;
pub mod tracks;

pub use error::{Error, Result};
pub use motion::{MotionBasis, MotionNode, MotionTree, NodeId, OrientedPoint};
pub use tracks::{select_canonical_frame, unproject_tracks, PinholeCamera, TrackSet};
pub use se3::{dq_blend, kabsch_se3, DualQuat, Quat, Vec3, SE3};
