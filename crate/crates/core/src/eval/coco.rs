//! COCO-style annotations and JSON-Lines predictions.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BenchmarkFile, EvalError, GroundingItem, PredictionSet};
use crate::geometry::{BoundingBox, ScoredBox};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoImage {
    pub id: u64,
    #[serde(default)]
    pub width: Option<u32>,
    #[serde(default)]
    pub height: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file_name: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoAnnotation {
    #[serde(default)]
    pub id: Option<u64>,
    pub image_id: u64,
    pub category_id: u64,
    /// `[x, y, width, height]`
    pub bbox: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoCategory {
    pub id: u64,
    pub name: String,
}

/// The subset of a COCO/LVIS annotation file used here; unknown fields are
/// ignored.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CocoDataset {
    #[serde(default)]
    pub images: Vec<CocoImage>,
    pub annotations: Vec<CocoAnnotation>,
    pub categories: Vec<CocoCategory>,
}

impl CocoDataset {
    pub fn load(path: &Path) -> Result<Self, EvalError> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn category_names(&self) -> HashMap<u64, &str> {
        self.categories.iter().map(|c| (c.id, c.name.as_str())).collect()
    }

    /// Corner-form boxes grouped by `(category_id, image_id)`, both sorted.
    pub fn boxes_by_category_image(&self) -> Result<BTreeMap<(u64, u64), Vec<BoundingBox>>, EvalError> {
        let mut out: BTreeMap<(u64, u64), Vec<BoundingBox>> = BTreeMap::new();
        for (i, a) in self.annotations.iter().enumerate() {
            let [x, y, w, h] = a.bbox;
            let b = BoundingBox::from_xywh(x, y, w, h)
                .map_err(|e| EvalError::Annotations(format!("annotation {i}: {e}")))?;
            out.entry((a.category_id, a.image_id)).or_default().push(b);
        }
        Ok(out)
    }
}

/// One item per `(image, category)` pair that has annotations, ordered by
/// image id then category id; the query is the category name.
pub fn items_from_dataset(ds: &CocoDataset) -> Result<Vec<GroundingItem>, EvalError> {
    let names = ds.category_names();
    let mut items: Vec<GroundingItem> = Vec::new();
    for ((cat, image_id), gt_boxes) in ds.boxes_by_category_image()? {
        let name = names
            .get(&cat)
            .ok_or_else(|| EvalError::Annotations(format!("annotation references unknown category {cat}")))?;
        items.push(GroundingItem { image_id, query: name.to_string(), category_id: Some(cat), gt_boxes });
    }
    items.sort_by(|a, b| (a.image_id, a.category_id).cmp(&(b.image_id, b.category_id)));
    Ok(items)
}

/// Load evaluation items from either a benchmark file (top-level `items`)
/// or a COCO-style annotation file.
pub fn load_items(path: &Path) -> Result<Vec<GroundingItem>, EvalError> {
    let text = std::fs::read_to_string(path)?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    if value.get("items").is_some() {
        let bench: BenchmarkFile = serde_json::from_value(value)?;
        Ok(bench.items)
    } else {
        items_from_dataset(&serde_json::from_value(value)?)
    }
}

/// One line of a predictions file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub image_id: u64,
    pub query: String,
    pub boxes: Vec<[f64; 4]>,
    pub scores: Vec<f64>,
}

/// Parse JSON-Lines predictions; errors carry the 1-based line number.
/// Blank lines are skipped.
pub fn parse_predictions(text: &str) -> Result<PredictionSet, EvalError> {
    let mut set = PredictionSet::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let schema = |message: String| EvalError::Schema { line: line_no, message };
        let rec: PredictionRecord = serde_json::from_str(line).map_err(|e| schema(e.to_string()))?;
        if rec.boxes.len() != rec.scores.len() {
            return Err(schema(format!("{} boxes but {} scores", rec.boxes.len(), rec.scores.len())));
        }
        let mut preds = Vec::with_capacity(rec.boxes.len());
        for (b, &s) in rec.boxes.iter().zip(&rec.scores) {
            if !s.is_finite() {
                return Err(schema(format!("non-finite score {s}")));
            }
            let bbox = BoundingBox::try_from(*b).map_err(|e| schema(e.to_string()))?;
            preds.push(ScoredBox { bbox, score: s });
        }
        set.insert(rec.image_id, rec.query, preds);
    }
    Ok(set)
}

pub fn predictions_to_jsonl(records: &[PredictionRecord]) -> String {
    records
        .iter()
        .map(|r| serde_json::to_string(r).expect("prediction records serialize") + "\n")
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const COCO: &str = r#"{
        "images": [{"id": 1, "width": 100, "height": 100, "extra": true}, {"id": 2}],
        "annotations": [
            {"id": 1, "image_id": 1, "category_id": 7, "bbox": [0, 0, 10, 20]},
            {"id": 2, "image_id": 1, "category_id": 7, "bbox": [30, 30, 5, 5]},
            {"id": 3, "image_id": 2, "category_id": 3, "bbox": [1, 1, 2, 2]}
        ],
        "categories": [{"id": 7, "name": "cat"}, {"id": 3, "name": "mug"}]
    }"#;

    #[test]
    fn coco_items_group_by_image_and_category() {
        let ds: CocoDataset = serde_json::from_str(COCO).unwrap();
        let items = items_from_dataset(&ds).unwrap();
        assert_eq!(items.len(), 2);
        assert_eq!(items[0].query, "cat");
        assert_eq!(items[0].gt_boxes[0], BoundingBox::new(0., 0., 10., 20.).unwrap());
        assert_eq!(items[0].gt_boxes.len(), 2);
        assert_eq!(items[1].image_id, 2);
    }

    #[test]
    fn predictions_parse_with_line_numbers() {
        let ok = "{\"image_id\":1,\"query\":\"cat\",\"boxes\":[[0,0,1,1]],\"scores\":[0.5]}\n\n";
        assert_eq!(parse_predictions(ok).unwrap().len(), 1);
        let bad = format!("{ok}{{\"image_id\":1,\"query\":\"cat\",\"boxes\":[[0,0,1,1]],\"scores\":[]}}\n");
        match parse_predictions(&bad) {
            Err(EvalError::Schema { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        let inverted = "{\"image_id\":1,\"query\":\"cat\",\"boxes\":[[5,0,1,1]],\"scores\":[0.5]}";
        assert!(matches!(parse_predictions(inverted), Err(EvalError::Schema { line: 1, .. })));
        assert!(matches!(parse_predictions("not json"), Err(EvalError::Schema { line: 1, .. })));
    }
}
