//! Grounding benchmark construction from detection annotations: one object
//! class per query, at most `max_images_per_category` images per class.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{CocoDataset, EvalError, GroundingItem};
use crate::rng::{DetRng, GENERATOR_ID};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSpec {
    /// Restrict to these category ids; `None` means every category.
    pub categories: Option<Vec<u64>>,
    pub max_images_per_category: usize,
    pub seed: u64,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        Self { categories: None, max_images_per_category: 5, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkFile {
    pub generator: String,
    pub seed: u64,
    pub max_images_per_category: usize,
    pub items: Vec<GroundingItem>,
}

impl BenchmarkFile {
    pub fn new(spec: &BenchmarkSpec, items: Vec<GroundingItem>) -> Self {
        Self {
            generator: GENERATOR_ID.to_string(),
            seed: spec.seed,
            max_images_per_category: spec.max_images_per_category,
            items,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("benchmark serializes") + "\n"
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkStats {
    pub items: usize,
    pub images: usize,
    pub categories: usize,
    pub mean_gt_per_item: f64,
}

impl BenchmarkStats {
    pub fn of(items: &[GroundingItem]) -> Self {
        let images: BTreeSet<u64> = items.iter().map(|i| i.image_id).collect();
        let categories: BTreeSet<&str> = items.iter().map(|i| i.query.as_str()).collect();
        let gt: usize = items.iter().map(|i| i.gt_boxes.len()).sum();
        Self {
            items: items.len(),
            images: images.len(),
            categories: categories.len(),
            mean_gt_per_item: if items.is_empty() { 0.0 } else { gt as f64 / items.len() as f64 },
        }
    }
}

/// Sample up to `spec.max_images_per_category` images per category and emit
/// one item per sampled `(category, image)` with all of that category's
/// boxes in the image.
///
/// Each category draws from its own stream (`bench/category{id}` under the
/// spec seed), so per-category counts never depend on the seed. Items are
/// ordered by category id, then image id.
pub fn build_benchmark(ds: &CocoDataset, spec: &BenchmarkSpec) -> Result<Vec<GroundingItem>, EvalError> {
    let grouped = ds.boxes_by_category_image()?;
    let mut by_category: BTreeMap<u64, Vec<u64>> = BTreeMap::new();
    for (cat, image) in grouped.keys() {
        by_category.entry(*cat).or_default().push(*image);
    }
    let names = ds.category_names();
    let mut wanted: Vec<u64> = match &spec.categories {
        Some(c) => c.clone(),
        None => ds.categories.iter().map(|c| c.id).collect(),
    };
    wanted.sort_unstable();
    wanted.dedup();

    let mut items = Vec::new();
    for cat in wanted {
        let Some(name) = names.get(&cat) else {
            return Err(EvalError::Annotations(format!("unknown category id {cat}")));
        };
        let images = match by_category.get(&cat) {
            Some(v) if !v.is_empty() => v,
            _ => {
                log::info!("category {cat} ({name}) has no annotated images; skipped");
                continue;
            }
        };
        let mut rng = DetRng::scoped(spec.seed, &format!("bench/category{cat}"));
        let mut chosen: Vec<u64> = rng
            .sample_indices(images.len(), spec.max_images_per_category)
            .into_iter()
            .map(|i| images[i])
            .collect();
        chosen.sort_unstable();
        for image_id in chosen {
            items.push(GroundingItem {
                image_id,
                query: name.to_string(),
                category_id: Some(cat),
                gt_boxes: grouped[&(cat, image_id)].clone(),
            });
        }
    }
    Ok(items)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{CocoAnnotation, CocoCategory, CocoImage};

    fn dataset(counts: &[usize]) -> CocoDataset {
        let mut ds = CocoDataset::default();
        for (c, &n) in counts.iter().enumerate() {
            let cat = c as u64 + 1;
            ds.categories.push(CocoCategory { id: cat, name: format!("class{cat}") });
            for i in 0..n {
                let image_id = cat * 100 + i as u64;
                ds.images.push(CocoImage { id: image_id, width: None, height: None, file_name: None });
                ds.annotations.push(CocoAnnotation { id: None, image_id, category_id: cat, bbox: [1., 2., 3., 4.] });
            }
        }
        ds
    }

    #[test]
    fn caps_at_five_and_keeps_small_categories() {
        let ds = dataset(&[12, 3, 0, 5]);
        let items = build_benchmark(&ds, &BenchmarkSpec::default()).unwrap();
        let count = |q: &str| items.iter().filter(|i| i.query == q).count();
        assert_eq!(count("class1"), 5);
        assert_eq!(count("class2"), 3);
        assert_eq!(count("class3"), 0);
        assert_eq!(count("class4"), 5);
    }

    #[test]
    fn seed_changes_selection_not_counts() {
        let ds = dataset(&[12, 9, 7]);
        let a = build_benchmark(&ds, &BenchmarkSpec { seed: 1, ..Default::default() }).unwrap();
        let b = build_benchmark(&ds, &BenchmarkSpec { seed: 2, ..Default::default() }).unwrap();
        assert_eq!(a, build_benchmark(&ds, &BenchmarkSpec { seed: 1, ..Default::default() }).unwrap());
        assert_eq!(a.len(), b.len());
        assert_ne!(a, b);
    }

    #[test]
    fn stats_summarise_items() {
        let ds = dataset(&[2, 1]);
        let s = BenchmarkStats::of(&build_benchmark(&ds, &BenchmarkSpec::default()).unwrap());
        assert_eq!((s.items, s.images, s.categories), (3, 3, 2));
        assert_eq!(s.mean_gt_per_item, 1.0);
    }
}
