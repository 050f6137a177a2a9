//! Region, caption and QA inputs in Visual Genome / COCO layouts.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{InstructError, RegionAnnotation};
use crate::geometry::BoundingBox;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VgRegion {
    pub x: f64,
    pub y: f64,
    pub width: f64,
    pub height: f64,
    pub phrase: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VgImage {
    #[serde(alias = "image_id")]
    pub id: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coco_id: Option<u64>,
    pub regions: Vec<VgRegion>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaPair {
    pub question: String,
    pub answer: String,
}

/// Valid regions of `image` in file order. Degenerate boxes and empty
/// phrases are skipped.
pub fn annotations_from_vg(image: &VgImage) -> Vec<RegionAnnotation> {
    let mut out = Vec::with_capacity(image.regions.len());
    for (i, r) in image.regions.iter().enumerate() {
        let phrase = r.phrase.trim();
        match BoundingBox::from_xywh(r.x, r.y, r.width, r.height) {
            Ok(b) if !phrase.is_empty() && b.area() > 0.0 => out.push(RegionAnnotation::new(b, phrase)),
            _ => log::debug!("image {}: region {i} skipped", image.id),
        }
    }
    out
}

/// A list of images with regions, as in `region_descriptions.json`.
pub fn load_vg_images(path: &Path) -> Result<Vec<VgImage>, InstructError> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

#[derive(Deserialize)]
struct CaptionFile {
    annotations: Vec<CaptionAnnotation>,
}

#[derive(Deserialize)]
struct CaptionAnnotation {
    image_id: u64,
    caption: String,
}

/// COCO caption annotations grouped by image id, in file order.
pub fn load_coco_captions(path: &Path) -> Result<BTreeMap<u64, Vec<String>>, InstructError> {
    let file: CaptionFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    let mut out: BTreeMap<u64, Vec<String>> = BTreeMap::new();
    for a in file.annotations {
        out.entry(a.image_id).or_default().push(a.caption.trim().to_string());
    }
    Ok(out)
}

#[derive(Deserialize)]
struct QaImage {
    #[serde(alias = "image_id")]
    id: u64,
    qas: Vec<QaPair>,
}

/// QA pairs grouped by image id, as in `question_answers.json`.
pub fn load_vg_qa(path: &Path) -> Result<BTreeMap<u64, Vec<QaPair>>, InstructError> {
    let images: Vec<QaImage> = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    let mut out: BTreeMap<u64, Vec<QaPair>> = BTreeMap::new();
    for img in images {
        out.entry(img.id).or_default().extend(img.qas);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn loads_vg_layouts() {
        let dir = tempfile::tempdir().unwrap();
        let regions = dir.path().join("regions.json");
        std::fs::File::create(&regions)
            .unwrap()
            .write_all(
                br#"[{"id": 4, "coco_id": 9, "regions": [
                    {"region_id": 1, "x": 0, "y": 0, "width": 10, "height": 5, "phrase": " a cup ", "image_id": 4},
                    {"x": 3, "y": 3, "width": 0, "height": 5, "phrase": "flat"},
                    {"x": 3, "y": 3, "width": 2, "height": 5, "phrase": ""}
                ]}, {"image_id": 5, "regions": []}]"#,
            )
            .unwrap();
        let images = load_vg_images(&regions).unwrap();
        assert_eq!(images.len(), 2);
        assert_eq!(images[0].coco_id, Some(9));
        let ann = annotations_from_vg(&images[0]);
        assert_eq!(ann.len(), 1);
        assert_eq!(ann[0].description, "a cup");
        assert_eq!(ann[0].bbox, BoundingBox::new(0., 0., 10., 5.).unwrap());

        let caps = dir.path().join("caps.json");
        std::fs::write(&caps, r#"{"images": [], "annotations": [{"id": 1, "image_id": 9, "caption": "A cup. "}, {"image_id": 9, "caption": "Mug"}]}"#).unwrap();
        assert_eq!(load_coco_captions(&caps).unwrap()[&9], vec!["A cup.".to_string(), "Mug".to_string()]);

        let qa = dir.path().join("qa.json");
        std::fs::write(&qa, r#"[{"id": 4, "qas": [{"qa_id": 1, "question": "What?", "answer": "A cup.", "image_id": 4}]}]"#).unwrap();
        assert_eq!(load_vg_qa(&qa).unwrap()[&4][0].answer, "A cup.");
    }
}
