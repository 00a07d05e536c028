//! Mesh graphs, feature construction, normalization and the trajectory container.

mod features;
mod graph;
mod io;
mod normalizer;

pub use features::{
    build_edge_features, build_node_features, edge_features_for, make_target,
    node_features_from_state, EdgeFeatures, FeatureConfig, FeatureLayout, NodeFeatures,
    TargetMode, Trajectory,
};
pub use graph::{MeshGraph, NodeType, NODE_TYPE_COUNT, NODE_TYPE_NAMES};
pub use io::{
    read_trajectory, trajectory_from_bytes, trajectory_to_bytes, write_trajectory,
    TrajectoryHeader, TRAJECTORY_MAGIC, TRAJECTORY_VERSION,
};
pub use normalizer::Normalizer;
