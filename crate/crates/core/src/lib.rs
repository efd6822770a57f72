//! Hand-conditioned active object localization as a sequential decision
//! process over relational box fields.

pub mod boxfield;
pub mod evalkit;
pub mod geometry;
pub mod mdp;
pub mod model;
mod planes;
pub mod scenes;
pub mod training;

pub use boxfield::{AreaMask, Aggregation, RelationalBoxField, VoteError};
pub use geometry::{giou, iou, BBox, PolarOffset};
pub use model::{FeatureMap, FieldPair, PredictorParams};
pub use planes::PlanesError;
