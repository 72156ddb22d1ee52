//! Desk-scale network inference on the simulated macro.

pub mod dataset;
pub mod infer;
pub mod net;
pub mod saliency;
pub mod tiling;

pub use dataset::Dataset;
pub use infer::{
    boundary_histogram, histogram_csv, infer, reference_infer, CompiledNet, ImageLoss,
    InferenceReport, LayerHistogram,
};
pub use net::{ComputeLayer, InputSpec, Layer, NetDescription};
pub use saliency::{bright_square, saliency_map, SaliencyGrid};
pub use tiling::{map_layer, TilePlan};
