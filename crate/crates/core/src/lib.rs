//! Uncertainty-aware voxel feature fields built from posed RGB-D frames.
//!
//! The pipeline fuses frames into voxel volumes ([`fusion`]), refines them with a
//! small 3D CNN and decodes color, semantic feature and geometry with per-point
//! log-variance ([`field`]), renders them differentiably ([`render`]), trains with
//! heteroscedastic losses ([`training`]), evaluates uncertainty quality and
//! reconstructions ([`eval`]), and uses the result for semantic querying
//! ([`query`]) and active object search ([`explorer`]).

pub mod error;
pub mod eval;
pub mod explorer;
pub mod autodiff;
pub mod field;
pub mod fusion;
pub mod geom;
pub mod io;
pub mod query;
pub mod render;
pub mod scene;
pub mod training;
pub mod volume;

pub use error::{Error, Result};
