use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::annotation::{Detection, GTAnnotation};
use crate::bbox::{BBox, DomainLabel};
use crate::error::{CoreError, Result};

/// One dataset split: a list of images with their annotations.
///
/// On disk this is a JSON document of the form
/// `{"split": str, "items": [{"image": path, "domain": "source"|"target",
/// "boxes": [[x,y,w,h]...], "occlusion": [f...], "ignore": [bool...],
/// "mask": path|null}]}` with paths relative to the manifest file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub split: String,
    pub items: Vec<ManifestItem>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestItem {
    pub image: PathBuf,
    pub domain: DomainLabel,
    pub boxes: Vec<[f64; 4]>,
    pub occlusion: Vec<f64>,
    pub ignore: Vec<bool>,
    pub mask: Option<PathBuf>,
}

impl ManifestItem {
    pub fn annotations(&self) -> Result<Vec<GTAnnotation>> {
        if self.boxes.len() != self.occlusion.len() || self.boxes.len() != self.ignore.len() {
            return Err(CoreError::invalid(format!(
                "item {}: boxes/occlusion/ignore lengths differ",
                self.image.display()
            )));
        }
        self.boxes
            .iter()
            .zip(&self.occlusion)
            .zip(&self.ignore)
            .map(|((b, occ), ign)| {
                GTAnnotation::new(BBox::new(b[0], b[1], b[2], b[3])?, *occ, *ign, self.domain)
            })
            .collect()
    }
}

impl DatasetManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|source| CoreError::Io {
                path: parent.to_path_buf(),
                source,
            })?;
        }
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json).map_err(|source| CoreError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| CoreError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let manifest: DatasetManifest = serde_json::from_str(&text)?;
        manifest.validate_against(path)?;
        Ok(manifest)
    }

    /// Check that every referenced file exists relative to the manifest
    /// location and that the parallel annotation arrays line up.
    pub fn validate_against(&self, manifest_path: &Path) -> Result<()> {
        let base = manifest_path.parent().unwrap_or(Path::new("."));
        for item in &self.items {
            let img = base.join(&item.image);
            if !img.exists() {
                return Err(CoreError::MissingFile(img));
            }
            if let Some(mask) = &item.mask {
                let mask = base.join(mask);
                if !mask.exists() {
                    return Err(CoreError::MissingFile(mask));
                }
            }
            item.annotations()?;
        }
        Ok(())
    }

    /// Resolve an item path relative to the manifest file location.
    pub fn resolve(manifest_path: &Path, item_path: &Path) -> PathBuf {
        if item_path.is_absolute() {
            item_path.to_path_buf()
        } else {
            manifest_path.parent().unwrap_or(Path::new(".")).join(item_path)
        }
    }
}

/// Per-image predictions, serialized as
/// `[{"image": str, "boxes": [[x,y,w,h]...], "scores": [...]}]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub image: String,
    pub boxes: Vec<[f64; 4]>,
    pub scores: Vec<f64>,
}

impl PredictionRecord {
    pub fn from_detections(image: impl Into<String>, dets: &[Detection]) -> Self {
        PredictionRecord {
            image: image.into(),
            boxes: dets.iter().map(|d| [d.bbox.x, d.bbox.y, d.bbox.w, d.bbox.h]).collect(),
            scores: dets.iter().map(|d| d.score).collect(),
        }
    }

    pub fn detections(&self) -> Result<Vec<Detection>> {
        if self.boxes.len() != self.scores.len() {
            return Err(CoreError::invalid(format!(
                "prediction for {}: boxes/scores lengths differ",
                self.image
            )));
        }
        self.boxes
            .iter()
            .zip(&self.scores)
            .map(|(b, s)| Detection::new(BBox::new(b[0], b[1], b[2], b[3])?, *s))
            .collect()
    }
}

pub fn save_predictions(records: &[PredictionRecord], path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|source| CoreError::Io {
            path: parent.to_path_buf(),
            source,
        })?;
    }
    let json = serde_json::to_string_pretty(records)?;
    std::fs::write(path, json).map_err(|source| CoreError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    let text = std::fs::read_to_string(path).map_err(|source| CoreError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::ImageBuffer;

    #[test]
    fn manifest_roundtrip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let img_path = dir.path().join("img0.png");
        ImageBuffer::filled(8, 8, [0.5; 3]).unwrap().save_png(&img_path).unwrap();

        let manifest = DatasetManifest {
            split: "source_train".into(),
            items: vec![ManifestItem {
                image: "img0.png".into(),
                domain: DomainLabel::Source,
                boxes: vec![[1.0, 1.0, 3.0, 5.0]],
                occlusion: vec![0.25],
                ignore: vec![false],
                mask: None,
            }],
        };
        let mpath = dir.path().join("manifest.json");
        manifest.save(&mpath).unwrap();
        let loaded = DatasetManifest::load(&mpath).unwrap();
        assert_eq!(loaded, manifest);

        let json: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&mpath).unwrap()).unwrap();
        assert_eq!(json["items"][0]["domain"], "source");
        assert_eq!(json["items"][0]["mask"], serde_json::Value::Null);
    }

    #[test]
    fn missing_image_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = DatasetManifest {
            split: "x".into(),
            items: vec![ManifestItem {
                image: "absent.png".into(),
                domain: DomainLabel::Target,
                boxes: vec![],
                occlusion: vec![],
                ignore: vec![],
                mask: None,
            }],
        };
        let mpath = dir.path().join("manifest.json");
        manifest.save(&mpath).unwrap();
        assert!(matches!(DatasetManifest::load(&mpath), Err(CoreError::MissingFile(_))));
    }

    #[test]
    fn prediction_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("preds.json");
        let recs = vec![PredictionRecord {
            image: "img0.png".into(),
            boxes: vec![[0.0, 1.0, 2.0, 3.0]],
            scores: vec![0.75],
        }];
        save_predictions(&recs, &path).unwrap();
        assert_eq!(load_predictions(&path).unwrap(), recs);
        assert_eq!(recs[0].detections().unwrap().len(), 1);
    }
}
