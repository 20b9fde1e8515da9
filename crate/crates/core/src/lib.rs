//! Shared data model, region masking, evaluation protocol and synthetic
//! dataset generation for cross-domain pedestrian detection experiments.

pub mod annotation;
pub mod bbox;
pub mod error;
pub mod eval;
pub mod image;
pub mod manifest;
pub mod region;
pub mod synth;

pub use annotation::{Detection, GTAnnotation};
pub use bbox::{clip_to_image, iou, scale_box, BBox, DomainLabel};
pub use error::{CoreError, Result};
pub use image::ImageBuffer;
pub use manifest::{DatasetManifest, ManifestItem, PredictionRecord};
pub use region::{
    apply_fill, band_weight_map, build_region_mask, default_weight_bands, BinaryMask, FillPolicy,
    RegionSelector, WeightMap,
};
