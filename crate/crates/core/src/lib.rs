//! Keyframe selection for LiDAR mapping by 2-Wasserstein distance between
//! voxel-Gaussian maps, plus multi-session pose-graph merging.

pub mod bench;
pub mod cli;
pub mod geometry;
pub mod io;
pub mod keyframe;
pub mod pose_graph;
pub mod synth;
pub mod voxel_map;
pub mod wasserstein;

pub use geometry::{Pose, Rotation, Twist};
pub use voxel_map::{build_map, Estimator, GmmMap, StagedUpdate, VoxelKey, VoxelStats};
pub use wasserstein::{map_dissimilarity, w2, AggregationPolicy, DissimilarityReport, GaussianComponent};
