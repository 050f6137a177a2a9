//! End-to-end tokenization of one image: encode, build pyramids, propose
//! and post-process regions, register region tokens, render the prompt and
//! assemble the multimodal sequence.

use serde::{Deserialize, Serialize};

use crate::geometry::BoundingBox;
use crate::grammar::{assemble_sequence, render_prompt, GrammarError, MultimodalSequence};
use crate::region::{
    postprocess, register, synthetic_propose, ImageSize, ProposerConfig, ProxyRegistry, RegionEncoder, RegionError,
    RegionProposal, RoiAlignConfig,
};
use crate::rng::derive_seed;
use crate::vision::{
    merge_2x2, pyramid_from_layers, toy_encode, EncoderConfig, ImageArray, Projector, TokenGrid, VisionError,
    ENCODER_SCALES, PROPOSER_SCALES,
};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("image is {got_h}x{got_w}, pipeline expects {want_h}x{want_w}")]
    ImageSize { got_h: usize, got_w: usize, want_h: usize, want_w: usize },
    #[error(transparent)]
    Vision(#[from] VisionError),
    #[error(transparent)]
    Region(#[from] RegionError),
    #[error(transparent)]
    Grammar(#[from] GrammarError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// `(height, width)` in pixels.
    pub image_size: ImageSize,
    pub encoder: EncoderConfig,
    pub merge: bool,
    pub proposer: ProposerConfig,
    pub roi: RoiAlignConfig,
    /// Relative perturbation of synthetic proposals around the GT boxes.
    pub jitter: f64,
    /// Width of projected image and region tokens.
    pub llm_dim: usize,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            image_size: (448, 448),
            encoder: EncoderConfig::default(),
            merge: true,
            proposer: ProposerConfig::default(),
            roi: RoiAlignConfig::default(),
            jitter: 0.0,
            llm_dim: 64,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineSummary {
    pub image_tokens: usize,
    pub image_grid: (usize, usize),
    pub region_tokens: usize,
    pub proposed_regions: usize,
    pub user_regions: usize,
    pub raw_proposals: usize,
    pub visual_tokens: usize,
    pub over_budget: bool,
    pub merge: bool,
    /// `(rows, cols)` of each proposer pyramid level.
    pub proposer_levels: Vec<(usize, usize)>,
    pub encoder_levels: Vec<(usize, usize)>,
}

/// Where region proposals come from.
#[derive(Debug, Clone, Copy)]
pub enum Proposals<'a> {
    /// The synthetic proposer, centred on these ground-truth boxes.
    Synthetic(&'a [BoundingBox]),
    /// Externally produced proposals, post-processed as usual.
    Given(&'a [RegionProposal]),
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub registry: ProxyRegistry,
    /// Projected image tokens, `llm_dim` wide.
    pub image_tokens: TokenGrid,
    /// Region embeddings projected to `llm_dim`.
    pub region_tokens: TokenGrid,
    pub prompt: String,
    pub sequence: MultimodalSequence,
    pub summary: PipelineSummary,
}

/// Run the full chain; `user_boxes` are appended to the registry after the
/// kept proposals. Sub-seeds derive from `cfg.seed` and a stage name.
pub fn run_pipeline(
    image_id: &str,
    image: &ImageArray,
    proposals: Proposals<'_>,
    user_boxes: &[BoundingBox],
    instruction: &str,
    grounding: bool,
    cfg: &PipelineConfig,
) -> Result<PipelineOutput, PipelineError> {
    let (h, w) = cfg.image_size;
    if (image.height, image.width) != (h, w) {
        return Err(PipelineError::ImageSize { got_h: image.height, got_w: image.width, want_h: h, want_w: w });
    }
    cfg.proposer.validate()?;
    let enc_cfg = EncoderConfig { seed: derive_seed(cfg.seed, "encoder"), ..cfg.encoder.clone() };
    let layers = toy_encode(image, &enc_cfg)?;
    let last = layers.last().expect("encoder returns at least four layers");

    let image_grid = if cfg.merge { merge_2x2(last)? } else { last.clone() };
    let image_tokens = Projector::new(image_grid.dim, cfg.llm_dim, derive_seed(cfg.seed, "image_projector"))
        .project(&image_grid)?;

    let proposer_pyramid = pyramid_from_layers(&layers, &PROPOSER_SCALES)?;
    let encoder_pyramid = pyramid_from_layers(&layers, &ENCODER_SCALES)?;

    let raw = match proposals {
        Proposals::Synthetic(gt_boxes) => synthetic_propose(
            gt_boxes,
            cfg.image_size,
            cfg.jitter,
            cfg.proposer.num_proposals.max(gt_boxes.len()),
            derive_seed(cfg.seed, "proposer"),
        )?,
        Proposals::Given(p) => p.to_vec(),
    };
    let kept = postprocess(&raw, &cfg.proposer)?;

    let encoder = RegionEncoder::new(enc_cfg.dim, enc_cfg.dim, cfg.roi, derive_seed(cfg.seed, "region_encoder"));
    let registry = register(image_id, &kept, user_boxes, &encoder_pyramid, &encoder, cfg.image_size, cfg.proposer.max_keep)?;
    let region_tokens = if registry.is_empty() {
        TokenGrid::zeros(0, 1, cfg.llm_dim)
    } else {
        Projector::new(enc_cfg.dim, cfg.llm_dim, derive_seed(cfg.seed, "region_projector")).project(&registry.embeddings())?
    };

    let prompt = render_prompt(&registry, instruction, grounding)?;
    let sequence = assemble_sequence(&prompt, image_tokens.token_count(), &registry)?;

    let shapes = |p: &crate::vision::FeaturePyramid| p.levels.iter().map(|l| (l.grid.rows, l.grid.cols)).collect();
    let summary = PipelineSummary {
        image_tokens: image_tokens.token_count(),
        image_grid: (image_tokens.rows, image_tokens.cols),
        region_tokens: registry.len(),
        proposed_regions: kept.len(),
        user_regions: user_boxes.len(),
        raw_proposals: raw.len(),
        visual_tokens: sequence.visual_tokens,
        over_budget: sequence.over_budget,
        merge: cfg.merge,
        proposer_levels: shapes(&proposer_pyramid),
        encoder_levels: shapes(&encoder_pyramid),
    };
    Ok(PipelineOutput { registry, image_tokens, region_tokens, prompt, sequence, summary })
}
