//! Open-vocabulary 3D segmentation without a trained proposal network.
//!
//! A scanned scene is oversegmented into superpoints, each superpoint receives
//! an image embedding lifted from the posed views it is visible in, adjacent
//! superpoints with near-identical embeddings are merged over several rounds,
//! and free-text prompts are answered by cosine similarity against the merged
//! superpoints' features.
//!
//! The stages map onto modules:
//!
//! * [`scene_io`]: loading, validation, voxel downsampling, normals, binary cache
//! * [`superpoint`]: energy-minimizing oversegmentation and adjacency graph
//! * [`visibility`]: projection, depth-based occlusion, top-k view selection
//! * [`feature`]: feature providers, point-prompted masked crops, averaging
//! * [`merge`]: greedy similarity-ordered merging of adjacent superpoints
//! * [`query`]: text scoring, thresholding, density clustering, PLY exports
//! * [`pipeline`]: staged, content-addressed orchestration used by the CLI
//!
//! [`synthetic`] generates a small fully-known scene (colored boxes on a floor
//! in front of a wall, rendered from a ring of cameras) that drives the tests,
//! the demo and the CLI fixture.

pub mod feature;
pub mod merge;
pub mod pipeline;
pub mod query;
pub mod scene_io;
pub mod superpoint;
pub mod synthetic;
pub mod visibility;

mod par;
mod spatial;
mod union_find;

pub use feature::{FeatureProvider, FeatureSet, FeatureVector, SyntheticProvider};
pub use superpoint::{Superpoint, SuperpointGraph};
pub use scene_io::{CameraView, Intrinsics, PointCloud, SceneBundle, TriangleMesh};

pub use union_find::UnionFind;

pub use nalgebra::{Point3, Vector3};
