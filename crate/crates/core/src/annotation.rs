use serde::{Deserialize, Serialize};

use crate::bbox::{BBox, DomainLabel};
use crate::error::{CoreError, Result};

/// Ground-truth pedestrian annotation.
///
/// `occlusion` is the fraction of the instance covered by occluders, in
/// [0, 1]. Annotations flagged `ignore` never count as matched ground truth
/// or as false negatives, and detections landing on them are discarded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GTAnnotation {
    pub bbox: BBox,
    pub occlusion: f64,
    pub ignore: bool,
    pub domain: DomainLabel,
}

impl GTAnnotation {
    pub fn new(bbox: BBox, occlusion: f64, ignore: bool, domain: DomainLabel) -> Result<Self> {
        if !(0.0..=1.0).contains(&occlusion) {
            return Err(CoreError::invalid(format!(
                "occlusion fraction {occlusion} outside [0, 1]"
            )));
        }
        Ok(GTAnnotation {
            bbox,
            occlusion,
            ignore,
            domain,
        })
    }
}

/// A scored detector output box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub score: f64,
}

impl Detection {
    pub fn new(bbox: BBox, score: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&score) {
            return Err(CoreError::invalid(format!("detection score {score} outside [0, 1]")));
        }
        Ok(Detection { bbox, score })
    }
}
