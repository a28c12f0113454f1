//! Hierarchical multi-label IP region prediction.
//!
//! Landmark hosts with known coordinates are mapped into nested polygonal
//! regions (e.g. district / street / community). Hosts sharing a last-hop
//! router form a cluster; a target host is classified at every granularity
//! by attending over the labelled landmarks of its cluster. Training uses a
//! composite of per-granularity cross-entropy and a path-softmax loss whose
//! partition function runs over root-to-leaf paths of the region tree.
//!
//! Module map:
//!
//! - [`regions`]: polygon sets, point assignment, hierarchy extraction, centroids.
//! - [`hosts`]: host records, last-hop clustering, landmark selection, splits,
//!   standardization and the synthetic dataset generator.
//! - [`numerics`]: dense tensors, the reverse-mode tape, parameter store,
//!   gradient checker and checkpoints.
//! - [`model`]: feature units, attention heads, fusion and decoding.
//! - [`loss`]: hierarchical cross-entropy, path partition function, composite loss.
//! - [`training`]: Adam, the cluster-batch training loop, grid search and sweeps.
//! - [`eval`]: classification metrics, top-k accuracy, geolocation error CDF.
//! - [`analysis`]: haversine DBSCAN and per-batch distribution statistics.
//! - [`config`]: run configuration files shared by the CLI.

pub mod analysis;
pub mod config;
pub mod error;
pub mod eval;
pub mod hosts;
pub mod loss;
pub mod model;
pub mod numerics;
pub mod regions;
pub mod training;

pub use error::{Error, Result};
pub use regions::{Coord, HierarchyTree, LabelVector, RegionSet};
