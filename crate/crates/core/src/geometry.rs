//! Axis-aligned box arithmetic.
//!
//! Boxes are in corner form with absolute, continuous pixel coordinates.
//! On the wire a box is the JSON array `[x_min, y_min, x_max, y_max]`.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("invalid box [{0}, {1}, {2}, {3}]: coordinates must be finite with min <= max")]
    InvalidBox(f64, f64, f64, f64),
    #[error("score {0} outside [0, 1]")]
    InvalidScore(f64),
    #[error("empty box set")]
    EmptyBoxSet,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoundingBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BoundingBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self, GeometryError> {
        let finite = [x_min, y_min, x_max, y_max].iter().all(|v| v.is_finite());
        if !finite || x_min > x_max || y_min > y_max {
            return Err(GeometryError::InvalidBox(x_min, y_min, x_max, y_max));
        }
        Ok(Self { x_min, y_min, x_max, y_max })
    }

    /// From COCO `[x, y, width, height]`.
    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Result<Self, GeometryError> {
        Self::new(x, y, x + w, y + h)
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0)
    }

    pub fn contains(&self, other: &BoundingBox) -> bool {
        self.x_min <= other.x_min
            && self.y_min <= other.y_min
            && self.x_max >= other.x_max
            && self.y_max >= other.y_max
    }

    /// Clamp into `[0, width] × [0, height]`. Returns the clamped box and
    /// whether any coordinate moved.
    pub fn clamp_to(&self, width: f64, height: f64) -> (BoundingBox, bool) {
        let c = BoundingBox {
            x_min: self.x_min.clamp(0.0, width),
            y_min: self.y_min.clamp(0.0, height),
            x_max: self.x_max.clamp(0.0, width),
            y_max: self.y_max.clamp(0.0, height),
        };
        (c, c != *self)
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }
}

impl TryFrom<[f64; 4]> for BoundingBox {
    type Error = GeometryError;

    fn try_from(v: [f64; 4]) -> Result<Self, Self::Error> {
        Self::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        b.to_array()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub score: f64,
}

impl ScoredBox {
    pub fn new(bbox: BoundingBox, score: f64) -> Result<Self, GeometryError> {
        if !(0.0..=1.0).contains(&score) {
            return Err(GeometryError::InvalidScore(score));
        }
        Ok(Self { bbox, score })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SizeBucket {
    Small,
    Medium,
    Large,
}

/// Area below which a box is small (32² px).
pub const SMALL_AREA_MAX: f64 = 32.0 * 32.0;
/// Area above which a box is large (96² px).
pub const LARGE_AREA_MIN: f64 = 96.0 * 96.0;

pub fn size_bucket(b: &BoundingBox) -> SizeBucket {
    let a = b.area();
    if a < SMALL_AREA_MAX {
        SizeBucket::Small
    } else if a > LARGE_AREA_MIN {
        SizeBucket::Large
    } else {
        SizeBucket::Medium
    }
}

pub fn intersection_area(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let w = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let h = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    w * h
}

/// Intersection over union; 0 when the union has zero area.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = intersection_area(a, b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Smallest box containing every input box.
pub fn enclosing_box(boxes: &[BoundingBox]) -> Result<BoundingBox, GeometryError> {
    let (first, rest) = boxes.split_first().ok_or(GeometryError::EmptyBoxSet)?;
    Ok(rest.iter().fold(*first, |acc, b| BoundingBox {
        x_min: acc.x_min.min(b.x_min),
        y_min: acc.y_min.min(b.y_min),
        x_max: acc.x_max.max(b.x_max),
        y_max: acc.y_max.max(b.y_max),
    }))
}

/// Indices of `scores` ordered by descending score; equal scores keep
/// input order.
pub fn descending_order(scores: impl Iterator<Item = f64>) -> Vec<usize> {
    let scores: Vec<f64> = scores.collect();
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal));
    order
}

/// Greedy non-maximum suppression.
///
/// Candidates are visited by descending score (ties: lower index first); a
/// candidate survives iff its IoU with every survivor so far is at most
/// `iou_threshold`. Returns surviving indices in visit order.
pub fn nms(candidates: &[ScoredBox], iou_threshold: f64) -> Vec<usize> {
    let mut kept: Vec<usize> = Vec::new();
    for i in descending_order(candidates.iter().map(|c| c.score)) {
        let b = &candidates[i].bbox;
        if kept.iter().all(|&k| iou(&candidates[k].bbox, b) <= iou_threshold) {
            kept.push(i);
        }
    }
    kept
}
