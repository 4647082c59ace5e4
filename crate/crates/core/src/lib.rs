//! Length-scale ablation for tile classifiers.

pub mod breakpoint_fit;
pub mod error;
pub mod fsutil;
pub mod predictor;
pub mod raster;
pub mod report;
pub mod scalar;
pub mod scale_transforms;
pub mod seeds;
pub mod slide_io;
pub mod slope_map;
pub mod stain_norm;
pub mod sweep;
pub mod tiling;

pub use error::{Error, Result};
pub use slide_io::{Label, Slide};
pub use tiling::Tile;

/// Two-segment fit on doubles.
pub type PiecewiseFit64 = breakpoint_fit::PiecewiseFit<f64>;
/// Two-segment fit in exact rational arithmetic.
pub type ExactPiecewiseFit = breakpoint_fit::PiecewiseFit<num::BigRational>;
pub type LineFit64 = breakpoint_fit::LineFit<f64>;
pub type LogisticModel64 = predictor::logistic::LogisticModel<f64>;
pub type LogisticModel32 = predictor::logistic::LogisticModel<f32>;

/// Tile side in pixels.
pub const TILE_PX: u32 = 224;
