//! Region proposals, multi-level ROIAlign region encoding and the proxy
//! registry that binds region tokens to `<rN>` indices.

use std::fs::File;
use std::io::{self, BufReader, BufWriter};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{iou, nms, BoundingBox, GeometryError, ScoredBox};
use crate::rng::{DetRng, GENERATOR_ID};
use crate::vision::{read_grid, write_grid, FeaturePyramid, TokenGrid, VisionError};

#[derive(Debug, Error)]
pub enum RegionError {
    #[error("proposal count must be at least 1")]
    NoProposals,
    #[error("degenerate region {0:?}: box has zero area")]
    DegenerateRegion([f64; 4]),
    #[error("region encoder needs exactly {expected} pyramid levels, got {got}")]
    PyramidLevels { expected: usize, got: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("{got} proposals exceed max_keep {max}")]
    TooManyProposals { got: usize, max: usize },
    #[error("registry file: {0}")]
    RegistryFormat(String),
    #[error(transparent)]
    Vision(#[from] VisionError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Image size as `(height, width)` in pixels.
pub type ImageSize = (usize, usize);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionProposal {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub objectness: f64,
    /// Set when the box was clamped to the image bounds.
    #[serde(default)]
    pub clamped: bool,
}

impl RegionProposal {
    /// Proposal clamped to `image_size`; rejects objectness outside [0, 1].
    pub fn new(bbox: BoundingBox, objectness: f64, image_size: ImageSize) -> Result<Self, RegionError> {
        if !(0.0..=1.0).contains(&objectness) {
            return Err(GeometryError::InvalidScore(objectness).into());
        }
        let (bbox, clamped) = bbox.clamp_to(image_size.1 as f64, image_size.0 as f64);
        Ok(Self { bbox, objectness, clamped })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProposerConfig {
    pub num_proposals: usize,
    pub score_threshold: f64,
    pub nms_threshold: f64,
    pub max_keep: usize,
}

impl Default for ProposerConfig {
    fn default() -> Self {
        Self { num_proposals: 300, score_threshold: 0.15, nms_threshold: 0.6, max_keep: 100 }
    }
}

impl ProposerConfig {
    pub fn validate(&self) -> Result<(), RegionError> {
        for (name, v) in [("score_threshold", self.score_threshold), ("nms_threshold", self.nms_threshold)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(RegionError::InvalidConfig(format!("{name} = {v} is outside [0, 1]")));
            }
        }
        if self.max_keep > self.num_proposals {
            return Err(RegionError::InvalidConfig(format!(
                "max_keep {} exceeds num_proposals {}",
                self.max_keep, self.num_proposals
            )));
        }
        Ok(())
    }
}

/// Objectness ceiling (exclusive) of synthetic distractor proposals.
pub const DISTRACTOR_MAX_OBJECTNESS: f64 = 0.1;

/// Synthetic stand-in for a trained proposal head.
///
/// Emits `num` proposals. The first `min(num, gt_boxes.len())` are the GT
/// boxes with each coordinate shifted by `u * jitter * side` (`u` uniform in
/// `[-1, 1]`), scored `0.3 + 0.7 * IoU(perturbed, gt)`. The rest are random
/// distractor boxes scored uniformly in `[0, 0.1)`. All boxes are clamped to
/// the image.
pub fn synthetic_propose(
    gt_boxes: &[BoundingBox],
    image_size: ImageSize,
    jitter: f64,
    num: usize,
    seed: u64,
) -> Result<Vec<RegionProposal>, RegionError> {
    if num < 1 {
        return Err(RegionError::NoProposals);
    }
    if !(jitter >= 0.0 && jitter.is_finite()) {
        return Err(RegionError::InvalidConfig(format!("jitter {jitter} must be finite and >= 0")));
    }
    let (h, w) = (image_size.0 as f64, image_size.1 as f64);
    let mut rng = DetRng::scoped(seed, "region/synthetic_proposer");
    let mut out = Vec::with_capacity(num);
    for gt in gt_boxes.iter().take(num) {
        let (gt, _) = gt.clamp_to(w, h);
        let perturbed = if jitter == 0.0 {
            gt
        } else {
            let (bw, bh) = (gt.width(), gt.height());
            let mut shift = |side: f64| rng.uniform(-1.0, 1.0) * jitter * side;
            let x0 = gt.x_min + shift(bw);
            let y0 = gt.y_min + shift(bh);
            let x1 = gt.x_max + shift(bw);
            let y1 = gt.y_max + shift(bh);
            BoundingBox::new(x0.min(x1), y0.min(y1), x0.max(x1), y0.max(y1))?
        };
        let (clamped_box, _) = perturbed.clamp_to(w, h);
        let objectness = if jitter == 0.0 { 1.0 } else { 0.3 + 0.7 * iou(&clamped_box, &gt) };
        out.push(RegionProposal::new(perturbed, objectness, image_size)?);
    }
    while out.len() < num {
        let bw = rng.uniform(0.05, 0.5) * w;
        let bh = rng.uniform(0.05, 0.5) * h;
        let x = rng.uniform(0.0, w - bw);
        let y = rng.uniform(0.0, h - bh);
        let objectness = rng.uniform(0.0, DISTRACTOR_MAX_OBJECTNESS);
        out.push(RegionProposal::new(BoundingBox::new(x, y, x + bw, y + bh)?, objectness, image_size)?);
    }
    Ok(out)
}

/// Score filter, NMS, then top-`max_keep` by objectness (descending).
pub fn postprocess(proposals: &[RegionProposal], cfg: &ProposerConfig) -> Result<Vec<RegionProposal>, RegionError> {
    cfg.validate()?;
    let survivors: Vec<&RegionProposal> =
        proposals.iter().filter(|p| p.objectness >= cfg.score_threshold).collect();
    let scored: Vec<ScoredBox> =
        survivors.iter().map(|p| ScoredBox { bbox: p.bbox, score: p.objectness }).collect();
    Ok(nms(&scored, cfg.nms_threshold)
        .into_iter()
        .take(cfg.max_keep)
        .map(|i| *survivors[i])
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoiAlignConfig {
    pub bins: (usize, usize),
    pub samples: (usize, usize),
}

impl Default for RoiAlignConfig {
    fn default() -> Self {
        Self { bins: (7, 7), samples: (2, 2) }
    }
}

/// Pool `grid` over `roi` (image pixels) into a `bins.0 × bins.1 × dim` grid.
///
/// The box is scaled into grid-cell units without quantisation. Each bin
/// averages `samples.0 × samples.1` bilinear reads placed at the centres of
/// an even sub-division of the bin.
pub fn roi_align_level(
    grid: &TokenGrid,
    roi: &BoundingBox,
    image_size: ImageSize,
    bins: (usize, usize),
    samples: (usize, usize),
) -> Result<TokenGrid, RegionError> {
    if roi.area() <= 0.0 {
        return Err(RegionError::DegenerateRegion(roi.to_array()));
    }
    if bins.0 == 0 || bins.1 == 0 || samples.0 == 0 || samples.1 == 0 {
        return Err(RegionError::InvalidConfig("bins and samples must be at least 1".into()));
    }
    let sy = grid.rows as f64 / image_size.0 as f64;
    let sx = grid.cols as f64 / image_size.1 as f64;
    let (y0, y1) = (roi.y_min * sy, roi.y_max * sy);
    let (x0, x1) = (roi.x_min * sx, roi.x_max * sx);
    let bin_h = (y1 - y0) / bins.0 as f64;
    let bin_w = (x1 - x0) / bins.1 as f64;
    let count = (samples.0 * samples.1) as f64;

    let mut out = TokenGrid::zeros(bins.0, bins.1, grid.dim);
    for by in 0..bins.0 {
        for bx in 0..bins.1 {
            let cell = out.token_mut(by, bx);
            for iy in 0..samples.0 {
                let y = y0 + bin_h * (by as f64 + (iy as f64 + 0.5) / samples.0 as f64);
                for ix in 0..samples.1 {
                    let x = x0 + bin_w * (bx as f64 + (ix as f64 + 0.5) / samples.1 as f64);
                    grid.sample_add(y, x, cell);
                }
            }
            cell.iter_mut().for_each(|v| *v /= count);
        }
    }
    Ok(out)
}

/// Number of pyramid levels the region encoder consumes.
pub const REGION_LEVELS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
struct Affine {
    in_dim: usize,
    out_dim: usize,
    weight: Vec<f64>,
    bias: Vec<f64>,
}

impl Affine {
    fn apply_add(&self, x: &[f64], out: &mut [f64]) {
        for (k, o) in out.iter_mut().enumerate() {
            let row = &self.weight[k * self.in_dim..(k + 1) * self.in_dim];
            *o += self.bias[k] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
        }
    }
}

/// Fuses three pyramid levels into one region embedding: ROIAlign per level,
/// a per-level affine map of every pooled cell to `width`, element-wise sum
/// across levels, then the mean over the pooled cells.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionEncoder {
    pub width: usize,
    pub roi: RoiAlignConfig,
    maps: Vec<Affine>,
}

impl RegionEncoder {
    pub fn new(level_dim: usize, width: usize, roi: RoiAlignConfig, seed: u64) -> Self {
        let maps = (0..REGION_LEVELS)
            .map(|l| {
                let mut rng = DetRng::scoped(seed, &format!("region/encoder_level{l}"));
                Affine {
                    in_dim: level_dim,
                    out_dim: width,
                    weight: rng.weights(width * level_dim, 1.0 / (level_dim.max(1) as f64).sqrt()),
                    bias: rng.weights(width, 0.1),
                }
            })
            .collect();
        Self { width, roi, maps }
    }

    /// Identity maps with zero bias on every level.
    pub fn identity(dim: usize, roi: RoiAlignConfig) -> Self {
        let eye = |_| {
            let mut weight = vec![0.0; dim * dim];
            (0..dim).for_each(|i| weight[i * dim + i] = 1.0);
            Affine { in_dim: dim, out_dim: dim, weight, bias: vec![0.0; dim] }
        };
        Self { width: dim, roi, maps: (0..REGION_LEVELS).map(eye).collect() }
    }

    pub fn encode(
        &self,
        pyramid: &FeaturePyramid,
        roi: &BoundingBox,
        image_size: ImageSize,
    ) -> Result<Vec<f64>, RegionError> {
        if pyramid.levels.len() != REGION_LEVELS {
            return Err(RegionError::PyramidLevels { expected: REGION_LEVELS, got: pyramid.levels.len() });
        }
        let cells = self.roi.bins.0 * self.roi.bins.1;
        let mut fused = vec![0.0; cells * self.width];
        for (level, map) in pyramid.levels.iter().zip(&self.maps) {
            if level.grid.dim != map.in_dim {
                return Err(VisionError::WidthMismatch { expected: map.in_dim, got: level.grid.dim }.into());
            }
            let pooled = roi_align_level(&level.grid, roi, image_size, self.roi.bins, self.roi.samples)?;
            for c in 0..cells {
                map.apply_add(pooled.nth(c), &mut fused[c * self.width..(c + 1) * self.width]);
            }
        }
        let mut embedding = vec![0.0; self.width];
        for c in 0..cells {
            for (e, v) in embedding.iter_mut().zip(&fused[c * self.width..(c + 1) * self.width]) {
                *e += v;
            }
        }
        embedding.iter_mut().for_each(|e| *e /= cells as f64);
        Ok(embedding)
    }
}

/// Encode one region with a seeded encoder whose width equals the level dim.
pub fn encode_region(
    pyramid: &FeaturePyramid,
    roi: &BoundingBox,
    image_size: ImageSize,
    roi_cfg: RoiAlignConfig,
    seed: u64,
) -> Result<Vec<f64>, RegionError> {
    let dim = pyramid.levels.first().map_or(0, |l| l.grid.dim);
    RegionEncoder::new(dim, dim, roi_cfg, seed).encode(pyramid, roi, image_size)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegionOrigin {
    Proposed,
    User,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionToken {
    pub embedding: Vec<f64>,
    pub source_box: BoundingBox,
    pub proxy_index: usize,
    pub origin: RegionOrigin,
    pub clamped: bool,
}

/// Region tokens of one image, with proxy indices `1..=n` in registration
/// order. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct ProxyRegistry {
    pub image_id: String,
    pub embedding_dim: usize,
    entries: Vec<RegionToken>,
}

impl ProxyRegistry {
    pub fn empty(image_id: impl Into<String>, embedding_dim: usize) -> Self {
        Self { image_id: image_id.into(), embedding_dim, entries: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[RegionToken] {
        &self.entries
    }

    /// Entry for proxy `<r{index}>`.
    pub fn get(&self, index: usize) -> Option<&RegionToken> {
        index.checked_sub(1).and_then(|i| self.entries.get(i))
    }

    pub fn embeddings(&self) -> TokenGrid {
        let data = self.entries.iter().flat_map(|e| e.embedding.iter().copied()).collect();
        TokenGrid { rows: self.entries.len(), cols: 1, dim: self.embedding_dim, data }
    }

    /// Write `<json_path>` and the embedding container next to it
    /// (`<json_path>` with extension `bin`).
    pub fn save(&self, json_path: &Path) -> Result<(), RegionError> {
        let bin_path = json_path.with_extension("bin");
        let bin_name = bin_path
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| RegionError::RegistryFormat("non-UTF-8 path".into()))?
            .to_string();
        write_grid(&self.embeddings(), BufWriter::new(File::create(&bin_path)?))?;
        let file = RegistryFile {
            image_id: self.image_id.clone(),
            generator: GENERATOR_ID.to_string(),
            embedding_dim: self.embedding_dim,
            embeddings: bin_name,
            entries: self
                .entries
                .iter()
                .enumerate()
                .map(|(i, e)| RegistryEntry {
                    proxy: e.proxy_index,
                    bbox: e.source_box,
                    origin: e.origin,
                    clamped: e.clamped,
                    embedding_ref: i,
                })
                .collect(),
        };
        let mut w = BufWriter::new(File::create(json_path)?);
        serde_json::to_writer_pretty(&mut w, &file)?;
        io::Write::write_all(&mut w, b"\n")?;
        Ok(())
    }

    pub fn load(json_path: &Path) -> Result<Self, RegionError> {
        let file: RegistryFile = serde_json::from_reader(BufReader::new(File::open(json_path)?))?;
        let bin_path: PathBuf = json_path.parent().unwrap_or(Path::new(".")).join(&file.embeddings);
        let (grid, _) = read_grid(BufReader::new(File::open(bin_path)?))?;
        if grid.dim != file.embedding_dim {
            return Err(RegionError::RegistryFormat(format!(
                "embedding width {} != declared {}",
                grid.dim, file.embedding_dim
            )));
        }
        let mut entries = Vec::with_capacity(file.entries.len());
        for (i, e) in file.entries.iter().enumerate() {
            if e.proxy != i + 1 {
                return Err(RegionError::RegistryFormat(format!("entry {i} has proxy {}, expected {}", e.proxy, i + 1)));
            }
            if e.embedding_ref >= grid.token_count() {
                return Err(RegionError::RegistryFormat(format!("embedding_ref {} out of range", e.embedding_ref)));
            }
            entries.push(RegionToken {
                embedding: grid.nth(e.embedding_ref).to_vec(),
                source_box: e.bbox,
                proxy_index: e.proxy,
                origin: e.origin,
                clamped: e.clamped,
            });
        }
        Ok(Self { image_id: file.image_id, embedding_dim: file.embedding_dim, entries })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct RegistryFile {
    image_id: String,
    generator: String,
    embedding_dim: usize,
    embeddings: String,
    entries: Vec<RegistryEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RegistryEntry {
    proxy: usize,
    #[serde(rename = "box")]
    bbox: BoundingBox,
    origin: RegionOrigin,
    #[serde(default)]
    clamped: bool,
    embedding_ref: usize,
}

/// Encode post-processed proposals (in the given order, i.e. descending
/// objectness) and then user boxes (input order), assigning proxies `1..=n`.
pub fn register(
    image_id: impl Into<String>,
    proposals: &[RegionProposal],
    user_boxes: &[BoundingBox],
    pyramid: &FeaturePyramid,
    encoder: &RegionEncoder,
    image_size: ImageSize,
    max_keep: usize,
) -> Result<ProxyRegistry, RegionError> {
    if proposals.len() > max_keep {
        return Err(RegionError::TooManyProposals { got: proposals.len(), max: max_keep });
    }
    let mut registry = ProxyRegistry::empty(image_id, encoder.width);
    let user = user_boxes.iter().map(|b| {
        let (c, clamped) = b.clamp_to(image_size.1 as f64, image_size.0 as f64);
        (c, clamped, RegionOrigin::User)
    });
    let proposed = proposals.iter().map(|p| (p.bbox, p.clamped, RegionOrigin::Proposed));
    for (bbox, clamped, origin) in proposed.chain(user) {
        let embedding = encoder.encode(pyramid, &bbox, image_size)?;
        registry.entries.push(RegionToken {
            embedding,
            source_box: bbox,
            proxy_index: registry.entries.len() + 1,
            origin,
            clamped,
        });
    }
    Ok(registry)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vision::{build_pyramid, PyramidLevel, ENCODER_SCALES};

    fn bx(v: [f64; 4]) -> BoundingBox {
        BoundingBox::try_from(v).unwrap()
    }

    fn prop(v: [f64; 4], s: f64) -> RegionProposal {
        RegionProposal::new(bx(v), s, (448, 448)).unwrap()
    }

    fn const_pyramid(c: f64, dim: usize) -> FeaturePyramid {
        let grids: Vec<TokenGrid> = [32, 16, 8].iter().map(|&n| TokenGrid::filled(n, n, dim, c)).collect();
        FeaturePyramid {
            levels: grids.into_iter().zip(ENCODER_SCALES).map(|(grid, scale)| PyramidLevel { scale, grid }).collect(),
        }
    }

    #[test]
    fn zero_jitter_keeps_gt_on_top() {
        let gts = [bx([10., 10., 50., 60.]), bx([100., 100., 200., 220.]), bx([300., 20., 400., 90.])];
        let ps = synthetic_propose(&gts, (448, 448), 0.0, 300, 1).unwrap();
        assert_eq!(ps.len(), 300);
        let worst_gt = ps[..3].iter().map(|p| p.objectness).fold(f64::INFINITY, f64::min);
        for (p, g) in ps.iter().zip(&gts) {
            assert_eq!(p.bbox, *g);
        }
        assert!(ps[3..].iter().all(|p| p.objectness <= worst_gt));
        assert_eq!(ps, synthetic_propose(&gts, (448, 448), 0.0, 300, 1).unwrap());
    }

    #[test]
    fn distractors_fall_below_default_threshold() {
        let ps = synthetic_propose(&[], (448, 448), 0.1, 300, 5).unwrap();
        assert_eq!(ps.len(), 300);
        assert!(ps.iter().all(|p| p.objectness < ProposerConfig::default().score_threshold));
        assert!(postprocess(&ps, &ProposerConfig::default()).unwrap().is_empty());
        assert!(matches!(synthetic_propose(&[], (448, 448), 0.0, 0, 5), Err(RegionError::NoProposals)));
    }

    #[test]
    fn postprocess_nms_example() {
        let ps = [prop([0., 0., 10., 10.], 0.9), prop([1., 1., 11., 11.], 0.8), prop([20., 20., 30., 30.], 0.7)];
        let kept = postprocess(&ps, &ProposerConfig::default()).unwrap();
        assert_eq!(kept, vec![ps[0], ps[2]]);
    }

    #[test]
    fn postprocess_low_scores_and_cap() {
        let low: Vec<RegionProposal> = (0..20).map(|i| prop([i as f64 * 20., 0., i as f64 * 20. + 10., 10.], 0.1)).collect();
        assert!(postprocess(&low, &ProposerConfig::default()).unwrap().is_empty());

        // 150 disjoint high-scoring boxes survive NMS; 100 are kept
        let many: Vec<RegionProposal> = (0..150)
            .map(|i| {
                let (r, c) = ((i / 15) as f64, (i % 15) as f64);
                prop([c * 29., r * 29., c * 29. + 20., r * 29. + 20.], 0.2 + 0.005 * i as f64)
            })
            .collect();
        let kept = postprocess(&many, &ProposerConfig::default()).unwrap();
        assert_eq!(kept.len(), 100);
        assert!(kept.windows(2).all(|w| w[0].objectness >= w[1].objectness));
        assert_eq!(kept[0].objectness, many[149].objectness);
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = ProposerConfig { max_keep: 400, ..Default::default() };
        assert!(postprocess(&[], &cfg).is_err());
        let cfg = ProposerConfig { nms_threshold: 1.5, ..Default::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn roi_align_hand_values() {
        let g = TokenGrid::new(2, 2, 1, vec![1., 2., 3., 4.]).unwrap();
        let out = roi_align_level(&g, &bx([0., 0., 2., 2.]), (2, 2), (1, 1), (1, 1)).unwrap();
        assert_eq!(out.data, vec![2.5]);
        let c = TokenGrid::filled(8, 8, 3, 5.0);
        let out = roi_align_level(&c, &bx([13., 7., 300., 401.]), (448, 448), (7, 7), (2, 2)).unwrap();
        assert!(out.data.iter().all(|&v| v == 5.0));
    }

    #[test]
    fn roi_align_rejects_degenerate() {
        let g = TokenGrid::filled(4, 4, 1, 1.0);
        let err = roi_align_level(&g, &bx([3., 3., 3., 9.]), (4, 4), (2, 2), (1, 1)).unwrap_err();
        assert!(err.to_string().starts_with("degenerate region"));
    }

    #[test]
    fn encode_constant_levels_sum() {
        let p = const_pyramid(1.5, 4);
        let enc = RegionEncoder::identity(4, RoiAlignConfig::default());
        let e = enc.encode(&p, &bx([20., 30., 200., 300.]), (448, 448)).unwrap();
        assert_eq!(e, vec![4.5; 4]);
    }

    #[test]
    fn encode_requires_three_levels() {
        let mut p = const_pyramid(1.0, 2);
        p.levels.push(p.levels[2].clone());
        let enc = RegionEncoder::new(2, 2, RoiAlignConfig::default(), 0);
        assert!(matches!(
            enc.encode(&p, &bx([0., 0., 10., 10.]), (448, 448)),
            Err(RegionError::PyramidLevels { expected: 3, got: 4 })
        ));
    }

    #[test]
    fn encode_three_identical_levels_is_triple_single() {
        let mut rng = DetRng::new(4);
        let g = TokenGrid::new(16, 16, 3, rng.weights(16 * 16 * 3, 1.0)).unwrap();
        let p = build_pyramid(&[g.clone(), g.clone(), g.clone()], &[1.0, 0.99, 0.98]).unwrap();
        // 0.99 and 0.98 round back to 16x16, so every level is the same grid
        assert!(p.levels.iter().all(|l| l.grid == g));
        let enc = RegionEncoder::identity(3, RoiAlignConfig::default());
        let roi = bx([40., 50., 300., 260.]);
        let fused = enc.encode(&p, &roi, (448, 448)).unwrap();
        let single = roi_align_level(&g, &roi, (448, 448), (7, 7), (2, 2)).unwrap();
        for d in 0..3 {
            let mean = (0..49).map(|c| single.nth(c)[d]).sum::<f64>() / 49.0;
            assert!((fused[d] - 3.0 * mean).abs() < 1e-12);
        }
    }

    #[test]
    fn register_orders_and_origins() {
        let p = const_pyramid(1.0, 2);
        let enc = RegionEncoder::new(2, 2, RoiAlignConfig::default(), 3);
        let props = [prop([0., 0., 50., 50.], 0.9), prop([60., 60., 90., 90.], 0.5)];
        let reg = register("img", &props, &[bx([5., 5., 30., 30.])], &p, &enc, (448, 448), 100).unwrap();
        let idx: Vec<(usize, RegionOrigin)> = reg.entries().iter().map(|e| (e.proxy_index, e.origin)).collect();
        assert_eq!(idx, vec![(1, RegionOrigin::Proposed), (2, RegionOrigin::Proposed), (3, RegionOrigin::User)]);

        let reg = register("img", &[], &[bx([5., 5., 30., 30.])], &p, &enc, (448, 448), 100).unwrap();
        assert_eq!(reg.len(), 1);
        assert_eq!(reg.get(1).unwrap().origin, RegionOrigin::User);
        assert!(reg.get(0).is_none());

        let err = register("img", &[], &[bx([5., 5., 5., 30.])], &p, &enc, (448, 448), 100).unwrap_err();
        assert!(matches!(err, RegionError::DegenerateRegion(_)));
    }

    #[test]
    fn registry_save_load_bitwise() {
        let mut rng = DetRng::new(12);
        let grids: Vec<TokenGrid> = [32, 16, 8].iter().map(|&n| TokenGrid::new(n, n, 3, rng.weights(n * n * 3, 1.0)).unwrap()).collect();
        let p = FeaturePyramid {
            levels: grids.into_iter().zip(ENCODER_SCALES).map(|(grid, scale)| PyramidLevel { scale, grid }).collect(),
        };
        let enc = RegionEncoder::new(3, 3, RoiAlignConfig::default(), 1);
        let props = [prop([0.1, 0.3, 50.7, 51.2], 0.9), prop([-3., 60., 90., 500.], 0.5)];
        let reg = register("42", &props, &[bx([1. / 3., 5., 30., 30.])], &p, &enc, (448, 448), 100).unwrap();
        assert!(reg.get(2).unwrap().clamped);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("registry.json");
        reg.save(&path).unwrap();
        assert_eq!(ProxyRegistry::load(&path).unwrap(), reg);
    }
}
