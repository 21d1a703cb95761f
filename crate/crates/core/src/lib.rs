//! Referential grounding for outdoor driving scenes.
//!
//! Given an image (optionally a LiDAR sweep plus calibration) and a free-form
//! referring expression, the pipeline extracts candidate categories with an
//! LLM, detects candidate boxes with an open-vocabulary detector, captions
//! each crop with a VLM, serializes the candidates into a textual scene, and
//! asks an LLM to pick the referent by ID. The chosen ID maps back to a 2D
//! bounding box, scored with Acc@0.5 against ground truth.
//!
//! All model roles (chat, caption, detect) are pluggable backends: live HTTP
//! endpoints, precomputed files, or deterministic scripted stand-ins, with a
//! content-addressed disk cache in front. Core geometry is generic over the
//! scalar type; the concrete `f64` aliases below are what the rest of the
//! crate uses.

pub mod backends;
pub mod cli;
pub mod dataset;
pub mod eval;
pub mod geometry;
pub mod pipeline;
pub mod prompting;
pub mod scene;

/// Scalar used by the pipeline for all pixel and metric coordinates.
pub type Real = f64;

pub type BBox2D = scene::Box2<Real>;
pub type Calibration = scene::Calibration<Real>;
pub type PointCloud = scene::Cloud<Real>;
pub type Partial3DBox = geometry::PartialBox3<Real>;
pub type LiftPolicy = geometry::LiftPolicy<Real>;

pub use scene::{Detection, GroundingResult, ObjectRecord, Scene};
