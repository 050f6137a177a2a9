//! Seeded synthetic inputs: images with known boxes, detection datasets,
//! grounding benchmarks with predictions, and region-annotated images for
//! conversation generation. Everything here is a pure function of its
//! arguments.

use std::collections::BTreeMap;

use crate::eval::{
    CocoAnnotation, CocoCategory, CocoDataset, CocoImage, GroundingItem, PredictionRecord, PredictionSet,
};
use crate::geometry::{BoundingBox, ScoredBox};
use crate::instruct::{QaPair, VgImage, VgRegion};
use crate::region::ImageSize;
use crate::rng::DetRng;
use crate::vision::ImageArray;

const NOUNS: [&str; 24] = [
    "dog", "cat", "person", "car", "bicycle", "bottle", "cup", "chair", "umbrella", "kite", "bench", "bird",
    "horse", "sheep", "clock", "vase", "book", "laptop", "banana", "apple", "boat", "train", "teddy bear", "frisbee",
];
const ADJECTIVES: [&str; 8] = ["red", "small", "wooden", "striped", "old", "white", "shiny", "large"];

fn bx(x0: f64, y0: f64, x1: f64, y1: f64) -> BoundingBox {
    BoundingBox::new(x0, y0, x1, y1).expect("fixture boxes are ordered")
}

/// A box inside `(h, w)` with sides in `[min_frac, max_frac]` of the image.
fn random_box(rng: &mut DetRng, image_size: ImageSize, min_frac: f64, max_frac: f64) -> BoundingBox {
    let (h, w) = (image_size.0 as f64, image_size.1 as f64);
    let bw = rng.uniform(min_frac, max_frac) * w;
    let bh = rng.uniform(min_frac, max_frac) * h;
    let x = rng.uniform(0.0, w - bw);
    let y = rng.uniform(0.0, h - bh);
    bx(x, y, x + bw, y + bh)
}

pub fn random_boxes(n: usize, image_size: ImageSize, seed: u64) -> Vec<BoundingBox> {
    let mut rng = DetRng::scoped(seed, "fixtures/boxes");
    (0..n).map(|_| random_box(&mut rng, image_size, 0.05, 0.4)).collect()
}

/// `n` pairwise disjoint boxes on a square grid, each inset from its cell.
pub fn disjoint_boxes(n: usize, image_size: ImageSize) -> Vec<BoundingBox> {
    let side = (n as f64).sqrt().ceil().max(1.0) as usize;
    let (ch, cw) = (image_size.0 as f64 / side as f64, image_size.1 as f64 / side as f64);
    (0..n)
        .map(|i| {
            let (r, c) = ((i / side) as f64, (i % side) as f64);
            bx(c * cw + 0.1 * cw, r * ch + 0.1 * ch, c * cw + 0.9 * cw, r * ch + 0.9 * ch)
        })
        .collect()
}

/// Three-channel image in `[0, 1]`: low-amplitude noise with each box
/// painted in its own flat colour.
pub fn synthetic_image(image_size: ImageSize, boxes: &[BoundingBox], seed: u64) -> ImageArray {
    let (h, w) = image_size;
    let mut rng = DetRng::scoped(seed, "fixtures/image");
    let mut data: Vec<f64> = (0..h * w * 3).map(|_| 0.2 * rng.next_f64()).collect();
    for b in boxes {
        let colour = [rng.uniform(0.3, 1.0), rng.uniform(0.3, 1.0), rng.uniform(0.3, 1.0)];
        let (x0, y0) = (b.x_min.max(0.0) as usize, b.y_min.max(0.0) as usize);
        let (x1, y1) = ((b.x_max.ceil() as usize).min(w), (b.y_max.ceil() as usize).min(h));
        for y in y0..y1 {
            for x in x0..x1 {
                data[(y * w + x) * 3..(y * w + x) * 3 + 3].copy_from_slice(&colour);
            }
        }
    }
    ImageArray::new(h, w, 3, data).expect("shape matches")
}

/// Named image fixtures for the pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageFixture {
    pub name: &'static str,
    pub image_size: ImageSize,
    pub gt_boxes: Vec<BoundingBox>,
}

pub const IMAGE_FIXTURES: [&str; 4] = ["three-boxes", "empty", "crowded", "random"];

impl ImageFixture {
    /// `three-boxes`: 3 objects; `empty`: none; `crowded`: 120 disjoint
    /// objects, more than the proposal cap; `random`: 12 random boxes.
    pub fn named(name: &str, image_size: ImageSize, seed: u64) -> Option<Self> {
        let (h, w) = (image_size.0 as f64, image_size.1 as f64);
        let (name, gt_boxes) = match name {
            "three-boxes" => (
                "three-boxes",
                vec![
                    bx(0.05 * w, 0.1 * h, 0.4 * w, 0.6 * h),
                    bx(0.5 * w, 0.2 * h, 0.9 * w, 0.5 * h),
                    bx(0.3 * w, 0.65 * h, 0.7 * w, 0.95 * h),
                ],
            ),
            "empty" => ("empty", Vec::new()),
            "crowded" => ("crowded", disjoint_boxes(120, image_size)),
            "random" => ("random", random_boxes(12, image_size, seed)),
            _ => return None,
        };
        Some(Self { name, image_size, gt_boxes })
    }

    pub fn image(&self, seed: u64) -> ImageArray {
        synthetic_image(self.image_size, &self.gt_boxes, seed)
    }
}

/// Detection annotations over `categories` classes where class `c` appears
/// in between `min_images` and `max_images` images (both bounds are hit
/// when there are at least two classes). Images are 640×480.
pub fn synthetic_detection_dataset(categories: usize, min_images: usize, max_images: usize, seed: u64) -> CocoDataset {
    let mut rng = DetRng::scoped(seed, "fixtures/detection");
    let size = (480, 640);
    let mut ds = CocoDataset::default();
    let mut next_image = 1u64;
    let mut next_ann = 1u64;
    for c in 0..categories {
        let id = c as u64 + 1;
        let name = NOUNS.get(c).map_or_else(|| format!("object{id}"), |n| n.to_string());
        ds.categories.push(CocoCategory { id, name });
        let count = match c {
            0 => min_images,
            1 => max_images,
            _ => min_images + rng.below(max_images - min_images + 1),
        };
        for _ in 0..count {
            let image_id = next_image;
            next_image += 1;
            ds.images.push(CocoImage { id: image_id, width: Some(640), height: Some(480), file_name: None });
            for _ in 0..1 + rng.below(3) {
                let b = random_box(&mut rng, size, 0.02, 0.5);
                ds.annotations.push(CocoAnnotation {
                    id: Some(next_ann),
                    image_id,
                    category_id: id,
                    bbox: [b.x_min, b.y_min, b.width(), b.height()],
                });
                next_ann += 1;
            }
        }
    }
    ds
}

/// Predictions for `gt`: each GT box jittered by up to `jitter` of its size
/// (and kept with probability `recall`), plus `distractors` random boxes.
/// Scores are random with hits biased upward.
fn predict(rng: &mut DetRng, gt: &[BoundingBox], image_size: ImageSize, jitter: f64, recall: f64, distractors: usize) -> Vec<ScoredBox> {
    let (h, w) = (image_size.0 as f64, image_size.1 as f64);
    let mut out = Vec::new();
    for g in gt {
        if rng.next_f64() >= recall {
            continue;
        }
        let (bw, bh) = (g.width(), g.height());
        let mut j = |side: f64| rng.uniform(-jitter, jitter) * side;
        let x0 = (g.x_min + j(bw)).clamp(0.0, w - 1.0);
        let y0 = (g.y_min + j(bh)).clamp(0.0, h - 1.0);
        let x1 = (g.x_max + j(bw)).clamp(x0 + 1.0, w);
        let y1 = (g.y_max + j(bh)).clamp(y0 + 1.0, h);
        out.push(ScoredBox { bbox: bx(x0, y0, x1, y1), score: rng.uniform(0.4, 1.0) });
    }
    for _ in 0..distractors {
        let b = random_box(rng, image_size, 0.05, 0.4);
        out.push(ScoredBox { bbox: b, score: rng.uniform(0.0, 0.7) });
    }
    out
}

/// `n` grounding items (1 to 6 GT boxes each, 640×480 images) with
/// imperfect predictions.
pub fn synthetic_benchmark(n: usize, seed: u64) -> (Vec<GroundingItem>, Vec<PredictionRecord>) {
    let mut rng = DetRng::scoped(seed, "fixtures/benchmark");
    let size = (480, 640);
    let mut items = Vec::with_capacity(n);
    let mut preds = Vec::with_capacity(n);
    for i in 0..n {
        let k = 1 + rng.below(6);
        let gt: Vec<BoundingBox> = (0..k).map(|_| random_box(&mut rng, size, 0.01, 0.5)).collect();
        let query = NOUNS[rng.below(NOUNS.len())].to_string();
        let image_id = i as u64 + 1;
        let distractors = rng.below(4);
        let p = predict(&mut rng, &gt, size, 0.2, 0.8, distractors);
        preds.push(PredictionRecord {
            image_id,
            query: query.clone(),
            boxes: p.iter().map(|s| s.bbox.to_array()).collect(),
            scores: p.iter().map(|s| s.score).collect(),
        });
        items.push(GroundingItem { image_id, query, category_id: None, gt_boxes: gt });
    }
    (items, preds)
}

/// Predictions equal to the GT boxes, score 1.
pub fn perfect_predictions(items: &[GroundingItem]) -> Vec<PredictionRecord> {
    items
        .iter()
        .map(|it| PredictionRecord {
            image_id: it.image_id,
            query: it.query.clone(),
            boxes: it.gt_boxes.iter().map(BoundingBox::to_array).collect(),
            scores: vec![1.0; it.gt_boxes.len()],
        })
        .collect()
}

pub fn prediction_set(records: &[PredictionRecord]) -> PredictionSet {
    let mut set = PredictionSet::new();
    for r in records {
        let preds = r
            .boxes
            .iter()
            .zip(&r.scores)
            .map(|(b, &score)| ScoredBox { bbox: BoundingBox::try_from(*b).expect("valid box"), score })
            .collect();
        set.insert(r.image_id, r.query.clone(), preds);
    }
    set
}

/// Five disjoint GT boxes; of the top five predictions three hit GT 0-2
/// exactly and two miss; a sixth, lower-ranked prediction would hit GT 3.
pub fn three_of_five() -> (GroundingItem, PredictionRecord) {
    let gts: Vec<BoundingBox> = (0..5).map(|i| bx(i as f64 * 20.0, 0.0, i as f64 * 20.0 + 10.0, 10.0)).collect();
    let boxes = vec![
        gts[0].to_array(),
        [200., 200., 210., 210.],
        gts[1].to_array(),
        [300., 300., 310., 310.],
        gts[2].to_array(),
        gts[3].to_array(),
    ];
    let item = GroundingItem { image_id: 1, query: "block".into(), category_id: None, gt_boxes: gts };
    let preds = PredictionRecord {
        image_id: 1,
        query: "block".into(),
        boxes,
        scores: vec![0.9, 0.85, 0.8, 0.75, 0.7, 0.1],
    };
    (item, preds)
}

/// Two GT boxes in opposite corners of a 10×10 area; the top-1 prediction
/// covers only the first, so its IoU with the enclosing box is 0.01.
pub fn two_clusters() -> (GroundingItem, PredictionRecord) {
    let item = GroundingItem {
        image_id: 2,
        query: "pair".into(),
        category_id: None,
        gt_boxes: vec![bx(0., 0., 1., 1.), bx(9., 9., 10., 10.)],
    };
    let preds = PredictionRecord {
        image_id: 2,
        query: "pair".into(),
        boxes: vec![[0., 0., 1., 1.], [9., 9., 10., 10.]],
        scores: vec![0.9, 0.8],
    };
    (item, preds)
}

/// A single GT box and one prediction at IoU exactly 0.7.
pub fn iou_070() -> (GroundingItem, PredictionRecord) {
    let item = GroundingItem { image_id: 3, query: "box".into(), category_id: None, gt_boxes: vec![bx(0., 0., 10., 10.)] };
    let preds = PredictionRecord { image_id: 3, query: "box".into(), boxes: vec![[0., 0., 10., 7.]], scores: vec![0.9] };
    (item, preds)
}

/// A single GT box and a top-1 prediction at IoU exactly 0.5.
pub fn rec_boundary() -> (GroundingItem, PredictionRecord) {
    let item = GroundingItem { image_id: 4, query: "half".into(), category_id: None, gt_boxes: vec![bx(0., 0., 2., 1.)] };
    let preds = PredictionRecord { image_id: 4, query: "half".into(), boxes: vec![[0., 0., 1., 1.]], scores: vec![0.9] };
    (item, preds)
}

/// Region-annotated images for conversation generation, with COCO-style
/// captions (keyed by COCO id) and QA pairs (keyed by image id).
///
/// Each image has 1 to 16 regions; about a quarter are near-copies of an
/// earlier region so de-overlap has work to do.
pub struct InstructFixture {
    pub images: Vec<VgImage>,
    pub captions: BTreeMap<u64, Vec<String>>,
    pub qas: BTreeMap<u64, Vec<QaPair>>,
}

pub fn synthetic_vg(n: usize, seed: u64) -> InstructFixture {
    let mut rng = DetRng::scoped(seed, "fixtures/vg");
    let size = (480, 640);
    let mut images = Vec::with_capacity(n);
    let mut captions = BTreeMap::new();
    let mut qas = BTreeMap::new();
    for i in 0..n {
        let id = 1000 + i as u64;
        let count = 1 + rng.below(16);
        let mut regions: Vec<VgRegion> = Vec::with_capacity(count);
        for _ in 0..count {
            let b = if !regions.is_empty() && rng.below(4) == 0 {
                let src = &regions[rng.below(regions.len())];
                let d = rng.uniform(0.0, 0.1) * src.width;
                bx(src.x + d, src.y, src.x + src.width + d, src.y + src.height)
            } else {
                random_box(&mut rng, size, 0.05, 0.35)
            };
            let phrase = format!(
                "a {} {}",
                ADJECTIVES[rng.below(ADJECTIVES.len())],
                NOUNS[rng.below(NOUNS.len())]
            );
            regions.push(VgRegion { x: b.x_min, y: b.y_min, width: b.width(), height: b.height(), phrase });
        }
        let coco_id = (i % 2 == 0).then_some(500_000 + i as u64);
        if let Some(c) = coco_id {
            captions.insert(c, vec![format!("A scene with {}.", regions[0].phrase)]);
        }
        if i % 3 == 0 {
            qas.insert(
                id,
                vec![QaPair { question: "What is in the picture?".into(), answer: format!("{}.", regions[0].phrase) }],
            );
        }
        images.push(VgImage { id, coco_id, regions });
    }
    InstructFixture { images, captions, qas }
}
