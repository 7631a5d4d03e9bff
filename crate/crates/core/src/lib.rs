//! Query-time 4D grounding back-end.
//!
//! Noisy per-view 2D mask proposals are filtered by multi-view geometric
//! voting ([`consensus`]) and the surviving evidence is lifted onto a
//! dynamic point-Gaussian scene ([`scene`]) by fitting a temporal identity
//! field ([`field`]). [`synth`] provides analytic ground truth for desk-scale
//! verification, [`eval`] the segmentation metrics, and [`io`] the on-disk
//! formats shared with the command-line driver.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod consensus;
pub mod error;
pub mod eval;
pub mod field;
pub mod geometry;
pub mod io;
pub mod scene;
pub mod synth;

pub use consensus::{run_consensus, ConsensusConfig, ConsensusReport, VoteNormalization};
pub use error::{Error, Result};
pub use eval::{aggregate_by_type, macc, miou, MetricsTable, QueryRecord, QueryType};
pub use field::{
    query_mask, train, FieldConfig, IdentityField, LabeledScene, LossTrace, Supervision,
    TrainConfig,
};
pub use geometry::{BinaryMask, CameraModel, DepthMap, MaskSequence, Point3};
pub use scene::{DynamicPointScene, Gaussian, Trajectory};
pub use synth::{CorruptionSpec, SceneSpec, SyntheticScene};
