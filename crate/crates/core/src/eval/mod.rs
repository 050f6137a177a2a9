//! Grounding evaluation: REC accuracy and multi-box recall protocols.
//!
//! Three recall rules for a query with several ground-truth boxes:
//!
//! - **any**: hit if any prediction reaches the IoU threshold with any GT.
//! - **merged**: the GT boxes collapse to their enclosing box, which the
//!   top-1 prediction must hit.
//! - **as-many**: with `k` GT boxes, the top-`k` predictions are matched
//!   one-to-one against the GT and recall is `matched / k`.
//!
//! Average recall (AR) is the mean over IoU thresholds 0.50, 0.55, …, 0.95
//! of the mean per-item recall. Per-item results are independent, and
//! aggregation sorts values before summing, so reports are bitwise stable
//! under item permutation and any degree of parallelism.

use std::collections::HashMap;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{descending_order, enclosing_box, iou, size_bucket, BoundingBox, ScoredBox, SizeBucket};

mod bench;
mod coco;

pub use bench::{build_benchmark, BenchmarkFile, BenchmarkSpec, BenchmarkStats};
pub use coco::{
    items_from_dataset, load_items, parse_predictions, predictions_to_jsonl, CocoAnnotation, CocoCategory,
    CocoDataset, CocoImage, PredictionRecord,
};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("not a REC item: image {image_id} query {query:?} has {count} ground-truth boxes")]
    NotRecItem { image_id: u64, query: String, count: usize },
    #[error("line {line}: {message}")]
    Schema { line: usize, message: String },
    #[error("invalid annotations: {0}")]
    Annotations(String),
    #[error("thread pool: {0}")]
    Pool(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundingItem {
    pub image_id: u64,
    pub query: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category_id: Option<u64>,
    pub gt_boxes: Vec<BoundingBox>,
}

/// Predictions keyed by `(image_id, query)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PredictionSet {
    by_item: HashMap<(u64, String), Vec<ScoredBox>>,
}

impl PredictionSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, image_id: u64, query: impl Into<String>, preds: Vec<ScoredBox>) {
        self.by_item.entry((image_id, query.into())).or_default().extend(preds);
    }

    /// Predictions for `item`; empty when none were submitted.
    pub fn for_item(&self, item: &GroundingItem) -> &[ScoredBox] {
        self.by_item.get(&(item.image_id, item.query.clone())).map_or(&[], Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.by_item.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_item.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    Any,
    Merged,
    AsMany,
}

impl Protocol {
    pub fn name(self) -> &'static str {
        match self {
            Protocol::Any => "any",
            Protocol::Merged => "merged",
            Protocol::AsMany => "as_many",
        }
    }
}

impl FromStr for Protocol {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "any" => Ok(Protocol::Any),
            "merged" | "merged_boxes" => Ok(Protocol::Merged),
            "as_many" => Ok(Protocol::AsMany),
            other => Err(format!("unknown protocol {other:?} (expected any, merged, as-many)")),
        }
    }
}

/// How an IoU is compared with a threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IouRule {
    /// `iou >= t`
    #[default]
    Inclusive,
    /// `iou > t`
    Exclusive,
}

impl IouRule {
    pub fn hit(self, iou: f64, t: f64) -> bool {
        match self {
            IouRule::Inclusive => iou >= t,
            IouRule::Exclusive => iou > t,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchStrategy {
    /// Score-ordered greedy: each prediction takes its best free GT.
    #[default]
    Greedy,
    /// Maximum bipartite matching.
    Optimal,
}

/// The ten AR thresholds 0.50, 0.55, …, 0.95, each computed as `(50 + 5i) / 100`.
pub fn ar_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

/// Predictions sorted by descending score; ties keep input order.
pub fn sort_by_score(preds: &[ScoredBox]) -> Vec<ScoredBox> {
    descending_order(preds.iter().map(|p| p.score)).into_iter().map(|i| preds[i]).collect()
}

/// The `k` highest-scoring predictions (all of them if fewer), sorted.
pub fn top_k(preds: &[ScoredBox], k: usize) -> Vec<ScoredBox> {
    let mut sorted = sort_by_score(preds);
    sorted.truncate(k);
    sorted
}

/// Greedy one-to-one matching of score-sorted `preds` to `gts`.
///
/// Each prediction in turn takes the unmatched GT with the highest IoU
/// (lowest index on ties) if that IoU passes `t`. Returns the match count.
pub fn greedy_match(preds: &[ScoredBox], gts: &[BoundingBox], t: f64) -> usize {
    greedy_match_with(preds, gts, t, IouRule::Inclusive)
}

pub fn greedy_match_with(preds: &[ScoredBox], gts: &[BoundingBox], t: f64, rule: IouRule) -> usize {
    let mut taken = vec![false; gts.len()];
    let mut matched = 0;
    for p in preds {
        let best = gts
            .iter()
            .enumerate()
            .filter(|(g, _)| !taken[*g])
            .map(|(g, gt)| (g, iou(&p.bbox, gt)))
            .fold(None, |best: Option<(usize, f64)>, (g, v)| match best {
                Some((_, b)) if b >= v => best,
                _ => Some((g, v)),
            });
        if let Some((g, v)) = best {
            if rule.hit(v, t) {
                taken[g] = true;
                matched += 1;
            }
        }
    }
    matched
}

/// Maximum bipartite matching size between `preds` and `gts` using
/// augmenting paths.
pub fn optimal_match(preds: &[ScoredBox], gts: &[BoundingBox], t: f64, rule: IouRule) -> usize {
    let adj: Vec<Vec<usize>> = preds
        .iter()
        .map(|p| (0..gts.len()).filter(|&g| rule.hit(iou(&p.bbox, &gts[g]), t)).collect())
        .collect();
    let mut owner: Vec<Option<usize>> = vec![None; gts.len()];

    fn augment(p: usize, adj: &[Vec<usize>], owner: &mut [Option<usize>], seen: &mut [bool]) -> bool {
        for &g in &adj[p] {
            if seen[g] {
                continue;
            }
            seen[g] = true;
            if owner[g].map_or(true, |q| augment(q, adj, owner, seen)) {
                owner[g] = Some(p);
                return true;
            }
        }
        false
    }

    (0..preds.len())
        .filter(|&p| augment(p, &adj, &mut owner, &mut vec![false; gts.len()]))
        .count()
}

/// Matching and comparison settings shared by the recall functions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Matcher {
    pub rule: IouRule,
    pub strategy: MatchStrategy,
}

impl Matcher {
    pub fn count(&self, sorted_preds: &[ScoredBox], gts: &[BoundingBox], t: f64) -> usize {
        match self.strategy {
            MatchStrategy::Greedy => greedy_match_with(sorted_preds, gts, t, self.rule),
            MatchStrategy::Optimal => optimal_match(sorted_preds, gts, t, self.rule),
        }
    }

    pub fn recall_any(&self, item: &GroundingItem, preds: &[ScoredBox], t: f64) -> f64 {
        let hit = preds
            .iter()
            .any(|p| item.gt_boxes.iter().any(|g| self.rule.hit(iou(&p.bbox, g), t)));
        if hit {
            1.0
        } else {
            0.0
        }
    }

    pub fn recall_merged(&self, item: &GroundingItem, preds: &[ScoredBox], t: f64) -> f64 {
        let (Some(top), Ok(merged)) = (top_k(preds, 1).first().copied(), enclosing_box(&item.gt_boxes)) else {
            return 0.0;
        };
        if self.rule.hit(iou(&top.bbox, &merged), t) {
            1.0
        } else {
            0.0
        }
    }

    pub fn recall_as_many(&self, item: &GroundingItem, preds: &[ScoredBox], t: f64) -> f64 {
        self.as_many_over(&item.gt_boxes, preds, t).unwrap_or(0.0)
    }

    /// AS-MANY recall against an arbitrary GT subset; `None` if it is empty.
    fn as_many_over(&self, gts: &[BoundingBox], preds: &[ScoredBox], t: f64) -> Option<f64> {
        if gts.is_empty() {
            return None;
        }
        let k = gts.len();
        Some(self.count(&top_k(preds, k), gts, t) as f64 / k as f64)
    }

    pub fn recall(&self, protocol: Protocol, item: &GroundingItem, preds: &[ScoredBox], t: f64) -> f64 {
        match protocol {
            Protocol::Any => self.recall_any(item, preds, t),
            Protocol::Merged => self.recall_merged(item, preds, t),
            Protocol::AsMany => self.recall_as_many(item, preds, t),
        }
    }
}

pub fn recall_any(item: &GroundingItem, preds: &[ScoredBox], t: f64) -> f64 {
    Matcher::default().recall_any(item, preds, t)
}

pub fn recall_merged(item: &GroundingItem, preds: &[ScoredBox], t: f64) -> f64 {
    Matcher::default().recall_merged(item, preds, t)
}

pub fn recall_as_many(item: &GroundingItem, preds: &[ScoredBox], t: f64) -> f64 {
    Matcher::default().recall_as_many(item, preds, t)
}

/// Fraction of items whose top-1 prediction reaches IoU 0.5 with the single
/// GT box.
pub fn rec_accuracy(items: &[GroundingItem], preds: &PredictionSet) -> Result<f64, EvalError> {
    rec_accuracy_with(items, preds, IouRule::Inclusive)
}

pub fn rec_accuracy_with(items: &[GroundingItem], preds: &PredictionSet, rule: IouRule) -> Result<f64, EvalError> {
    let mut hits = 0usize;
    for item in items {
        if item.gt_boxes.len() != 1 {
            return Err(EvalError::NotRecItem {
                image_id: item.image_id,
                query: item.query.clone(),
                count: item.gt_boxes.len(),
            });
        }
        if let Some(top) = top_k(preds.for_item(item), 1).first() {
            if rule.hit(iou(&top.bbox, &item.gt_boxes[0]), 0.5) {
                hits += 1;
            }
        }
    }
    Ok(if items.is_empty() { 0.0 } else { hits as f64 / items.len() as f64 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub protocol: Protocol,
    pub matcher: Matcher,
    /// Compute Acc@0.5; every item must then have exactly one GT box.
    pub rec: bool,
    pub jobs: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { protocol: Protocol::AsMany, matcher: Matcher::default(), rec: false, jobs: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemRecord {
    pub image_id: u64,
    pub query: String,
    pub num_gt: usize,
    pub num_pred: usize,
    /// Recall at each threshold of the report.
    pub recall: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: Protocol,
    pub iou_rule: IouRule,
    pub matching: MatchStrategy,
    pub thresholds: Vec<f64>,
    pub items: usize,
    pub ar: f64,
    pub ar_at_50: f64,
    pub ar_at_75: f64,
    /// Size-bucket AR (as-many only); `None` when no GT falls in the bucket.
    pub ar_small: Option<f64>,
    pub ar_medium: Option<f64>,
    pub ar_large: Option<f64>,
    pub acc_at_50: Option<f64>,
    pub per_item: Vec<ItemRecord>,
}

impl EvalReport {
    /// Flat `key value` lines for diffing in CI.
    pub fn metrics_block(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.6}"));
        let mut lines = vec![
            format!("protocol {}", self.protocol.name()),
            format!("items {}", self.items),
            format!("AR {:.6}", self.ar),
            format!("AR@0.5 {:.6}", self.ar_at_50),
            format!("AR@0.75 {:.6}", self.ar_at_75),
            format!("AR@s {}", opt(self.ar_small)),
            format!("AR@m {}", opt(self.ar_medium)),
            format!("AR@l {}", opt(self.ar_large)),
        ];
        if let Some(acc) = self.acc_at_50 {
            lines.push(format!("Acc@0.5 {acc:.6}"));
        }
        lines.join("\n") + "\n"
    }
}

/// Order-independent mean: values are sorted before summation.
fn stable_mean(mut values: Vec<f64>) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len() as f64;
    values.into_iter().sum::<f64>() / n
}

struct ItemResult {
    record: ItemRecord,
    /// Per bucket: recall at each threshold, if the item has GT in it.
    buckets: [Option<Vec<f64>>; 3],
}

fn evaluate_item(item: &GroundingItem, preds: &PredictionSet, cfg: &EvalConfig, thresholds: &[f64]) -> ItemResult {
    let p = preds.for_item(item);
    let recall = thresholds.iter().map(|&t| cfg.matcher.recall(cfg.protocol, item, p, t)).collect();
    let mut buckets: [Option<Vec<f64>>; 3] = [None, None, None];
    if cfg.protocol == Protocol::AsMany {
        for (slot, bucket) in buckets.iter_mut().zip([SizeBucket::Small, SizeBucket::Medium, SizeBucket::Large]) {
            let gts: Vec<BoundingBox> = item.gt_boxes.iter().copied().filter(|g| size_bucket(g) == bucket).collect();
            if !gts.is_empty() {
                *slot = Some(
                    thresholds.iter().map(|&t| cfg.matcher.as_many_over(&gts, p, t).unwrap_or(0.0)).collect(),
                );
            }
        }
    }
    ItemResult {
        record: ItemRecord {
            image_id: item.image_id,
            query: item.query.clone(),
            num_gt: item.gt_boxes.len(),
            num_pred: p.len(),
            recall,
        },
        buckets,
    }
}

/// Mean over thresholds of the mean over items. `per_threshold[i]` holds
/// every item's recall at threshold `i`.
fn average_recall(rows: &[&Vec<f64>], n_thresholds: usize) -> f64 {
    stable_mean((0..n_thresholds).map(|t| stable_mean(rows.iter().map(|r| r[t]).collect())).collect())
}

/// Evaluate `items` under `cfg`. Uses `cfg.jobs` worker threads; output is
/// identical for any worker count.
pub fn compute_report(items: &[GroundingItem], preds: &PredictionSet, cfg: &EvalConfig) -> Result<EvalReport, EvalError> {
    let thresholds = ar_thresholds();
    let acc_at_50 = if cfg.rec { Some(rec_accuracy_with(items, preds, cfg.matcher.rule)?) } else { None };

    let results: Vec<ItemResult> = if cfg.jobs <= 1 {
        items.iter().map(|it| evaluate_item(it, preds, cfg, &thresholds)).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.jobs)
            .build()
            .map_err(|e| EvalError::Pool(e.to_string()))?;
        pool.install(|| items.par_iter().map(|it| evaluate_item(it, preds, cfg, &thresholds)).collect())
    };

    let nt = thresholds.len();
    let all: Vec<&Vec<f64>> = results.iter().map(|r| &r.record.recall).collect();
    let at = |t: usize| stable_mean(all.iter().map(|r| r[t]).collect());
    let bucket = |b: usize| -> Option<f64> {
        let rows: Vec<&Vec<f64>> = results.iter().filter_map(|r| r.buckets[b].as_ref()).collect();
        (!rows.is_empty()).then(|| average_recall(&rows, nt))
    };

    Ok(EvalReport {
        protocol: cfg.protocol,
        iou_rule: cfg.matcher.rule,
        matching: cfg.matcher.strategy,
        items: items.len(),
        ar: average_recall(&all, nt),
        ar_at_50: at(0),
        ar_at_75: at(5),
        ar_small: bucket(0),
        ar_medium: bucket(1),
        ar_large: bucket(2),
        acc_at_50,
        per_item: results.into_iter().map(|r| r.record).collect(),
        thresholds,
    })
}
