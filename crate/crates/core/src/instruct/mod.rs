//! Grounded conversation generation: region de-overlap, numeric marker
//! prompting, request assembly for an external vision-language model, and
//! format post-filtering of its replies.
//!
//! Conversations are exchanged as plain text, one turn per line group:
//!
//! ```text
//! User: <text>
//! Assistant: <text with <p>phrase</p> <roi><rK></roi> spans>
//! ```
//!
//! where `K` is a marker label. Continuation lines belong to the preceding
//! turn.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{iou, BoundingBox};
use crate::grammar::{parse_with_mode, serialize, GrammarError, ParseMode, ReferentScope};
use crate::rng::DetRng;

mod data;
mod raster;
mod vlm;

pub use data::{
    annotations_from_vg, load_coco_captions, load_vg_images, load_vg_qa, QaPair, VgImage, VgRegion,
};
pub use raster::{encode_png, rasterize_markers, MarkerStyle};
pub use vlm::{run_requests, MockVlmClient, VlmClient, VlmError};

/// Upper bound on markers per image.
pub const MAX_MARKERS: usize = 10;
/// Images keeping fewer regions than this are flagged sparse.
pub const SPARSE_BELOW: usize = 3;

#[derive(Debug, Error)]
pub enum InstructError {
    #[error("iou threshold {0} must lie strictly between 0 and 1")]
    Threshold(f64),
    #[error("max_regions must be between 1 and {MAX_MARKERS}, got {0}")]
    MaxRegions(usize),
    #[error("region {index} has an empty description")]
    EmptyDescription { index: usize },
    #[error("cannot place {0} markers: need 1..={MAX_MARKERS}")]
    MarkerCount(usize),
    #[error("uncovered marker {0}: no region description")]
    UncoveredMarker(usize),
    #[error("description keyed by {0}, which is not a marker label")]
    UnknownMarker(usize),
    #[error("{0} responses for {1} marked images")]
    LengthMismatch(usize, usize),
    #[error("malformed conversation: {0}")]
    Conversation(String),
    #[error(transparent)]
    Grammar(#[from] GrammarError),
    #[error("input: {0}")]
    Input(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("image encoding: {0}")]
    Image(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionAnnotation {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub description: String,
}

impl RegionAnnotation {
    pub fn new(bbox: BoundingBox, description: impl Into<String>) -> Self {
        Self { bbox, description: description.into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    pub iou_threshold: f64,
    pub max_regions: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self { iou_threshold: 0.5, max_regions: MAX_MARKERS }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<(), InstructError> {
        if !(self.iou_threshold > 0.0 && self.iou_threshold < 1.0) {
            return Err(InstructError::Threshold(self.iou_threshold));
        }
        if self.max_regions == 0 || self.max_regions > MAX_MARKERS {
            return Err(InstructError::MaxRegions(self.max_regions));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterOutcome {
    pub kept: Vec<RegionAnnotation>,
    pub input_count: usize,
    /// Regions surviving de-overlap before the `max_regions` cut.
    pub survivors: usize,
    pub truncated: bool,
    pub sparse: bool,
}

/// Greedy keep-first de-overlap in input order: a region is dropped when its
/// IoU with any kept region exceeds the threshold. At most `max_regions`
/// survivors are kept.
pub fn filter_overlaps(regions: &[RegionAnnotation], cfg: &FilterConfig) -> Result<FilterOutcome, InstructError> {
    cfg.validate()?;
    if let Some(index) = regions.iter().position(|r| r.description.trim().is_empty()) {
        return Err(InstructError::EmptyDescription { index });
    }
    let mut kept: Vec<RegionAnnotation> = Vec::new();
    for r in regions {
        if kept.iter().all(|k| iou(&k.bbox, &r.bbox) <= cfg.iou_threshold) {
            kept.push(r.clone());
        }
    }
    let survivors = kept.len();
    kept.truncate(cfg.max_regions);
    Ok(FilterOutcome {
        sparse: kept.len() < SPARSE_BELOW,
        truncated: survivors > kept.len(),
        kept,
        input_count: regions.len(),
        survivors,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Marker {
    pub label: usize,
    pub center: (f64, f64),
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkedImageSpec {
    pub image_id: u64,
    pub markers: Vec<Marker>,
    /// Two or more markers share a center.
    pub ambiguous_markers: bool,
}

impl ReferentScope for MarkedImageSpec {
    fn referent_count(&self) -> usize {
        self.markers.len()
    }
}

/// Label `i` goes to the `i`-th region, centred on its box.
pub fn place_markers(image_id: u64, regions: &[RegionAnnotation]) -> Result<MarkedImageSpec, InstructError> {
    if regions.is_empty() || regions.len() > MAX_MARKERS {
        return Err(InstructError::MarkerCount(regions.len()));
    }
    let markers: Vec<Marker> = regions
        .iter()
        .enumerate()
        .map(|(i, r)| Marker { label: i + 1, center: r.bbox.center(), bbox: r.bbox })
        .collect();
    let ambiguous_markers = markers
        .iter()
        .enumerate()
        .any(|(i, a)| markers[i + 1..].iter().any(|b| a.center == b.center));
    if ambiguous_markers {
        log::debug!("image {image_id}: coincident marker centers");
    }
    Ok(MarkedImageSpec { image_id, markers, ambiguous_markers })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    Assistant,
}

impl Role {
    pub fn prefix(self) -> &'static str {
        match self {
            Role::User => "User: ",
            Role::Assistant => "Assistant: ",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub role: Role,
    pub text: String,
}

/// Render turns in the exchange format, one trailing newline.
pub fn format_conversation(turns: &[Turn]) -> String {
    turns.iter().map(|t| format!("{}{}\n", t.role.prefix(), t.text)).collect()
}

/// Split raw text into turns. Turns must start with the user and alternate,
/// and the conversation must end on an assistant turn.
pub fn parse_conversation(raw: &str) -> Result<Vec<Turn>, InstructError> {
    let mut turns: Vec<Turn> = Vec::new();
    for line in raw.lines() {
        let started = [Role::User, Role::Assistant]
            .into_iter()
            .find_map(|role| line.strip_prefix(role.prefix().trim_end()).map(|rest| (role, rest)));
        match (started, turns.last_mut()) {
            (Some((role, rest)), _) => {
                let text = rest.strip_prefix(' ').unwrap_or(rest);
                turns.push(Turn { role, text: text.to_string() });
            }
            (None, Some(turn)) => {
                turn.text.push('\n');
                turn.text.push_str(line);
            }
            (None, None) if line.trim().is_empty() => {}
            (None, None) => return Err(InstructError::Conversation("text before the first turn".into())),
        }
    }
    if turns.is_empty() {
        return Err(InstructError::Conversation("no turns".into()));
    }
    for (i, t) in turns.iter_mut().enumerate() {
        t.text.truncate(t.text.trim_end().len());
        let expected = if i % 2 == 0 { Role::User } else { Role::Assistant };
        if t.role != expected {
            return Err(InstructError::Conversation(format!("turn {} should be {expected:?}", i + 1)));
        }
        if t.text.trim().is_empty() {
            return Err(InstructError::Conversation(format!("turn {} is empty", i + 1)));
        }
    }
    if turns.len() % 2 == 1 {
        return Err(InstructError::Conversation("ends without an assistant reply".into()));
    }
    Ok(turns)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VlmContext {
    /// Keyed by marker label.
    pub region_descriptions: BTreeMap<usize, String>,
    pub image_descriptions: Vec<String>,
    pub qa_pairs: Vec<QaPair>,
}

impl VlmContext {
    /// Region descriptions in marker order.
    pub fn from_regions(regions: &[RegionAnnotation]) -> Self {
        Self {
            region_descriptions: regions.iter().enumerate().map(|(i, r)| (i + 1, r.description.clone())).collect(),
            ..Default::default()
        }
    }
}

pub const SYSTEM_INSTRUCTION: &str = "You are looking at an image overlaid with bright numeric markers; \
marker K sits at the center of region K. Write a multi-turn conversation about the image between a user \
and an assistant. Put each turn on its own line starting with \"User: \" or \"Assistant: \", begin with \
the user and alternate. Whenever a turn mentions a marked region, wrap the phrase as <p>phrase</p> and \
follow it with a space and <roi><rK></roi>, where K is the marker number; several regions share one \
block, as in <roi><r1><r3></roi>. Use only markers present in the image. Never mention the markers or \
the descriptions themselves.";

pub const DEFAULT_INSTRUCTION: &str =
    "Write a grounded conversation about this image in the format above, using the context provided.";

const FEWSHOT: &[&str] = &[
    "User: What is happening in this picture?\n\
     Assistant: <p>A man</p> <roi><r1></roi> is throwing <p>a red frisbee</p> <roi><r2></roi> for \
     <p>his dog</p> <roi><r3></roi> in a park.\n\
     User: Is the dog going to catch it?\n\
     Assistant: Very likely. <p>The dog</p> <roi><r3></roi> is already jumping toward \
     <p>the frisbee</p> <roi><r2></roi>.\n",
    "User: Describe the table.\n\
     Assistant: <p>The table</p> <roi><r1></roi> holds <p>two cups</p> <roi><r2><r3></roi> and \
     <p>a plate of cake</p> <roi><r4></roi>.\n\
     User: Which cup is closer to the cake?\n\
     Assistant: <p>The left cup</p> <roi><r2></roi> is right next to <p>the plate</p> <roi><r4></roi>.\n",
];

/// Hand-written exemplar conversations shipped with the pipeline.
pub fn default_fewshot() -> Vec<Vec<Turn>> {
    FEWSHOT.iter().map(|c| parse_conversation(c).expect("built-in exemplars parse")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VlmRequest {
    pub marked_image: MarkedImageSpec,
    pub context: VlmContext,
    pub fewshot: Vec<Vec<Turn>>,
    pub system: String,
    pub instruction: String,
    /// PNG with the markers drawn, when rasterized.
    #[serde(skip)]
    pub image_png: Option<Vec<u8>>,
}

impl VlmRequest {
    pub fn image_id(&self) -> u64 {
        self.marked_image.image_id
    }

    /// Textual request body. Sections with nothing to show are omitted.
    pub fn document(&self) -> String {
        let mut out = format!("# System\n{}\n", self.system);
        if !self.fewshot.is_empty() {
            out.push_str("\n# Examples\n");
            for (i, turns) in self.fewshot.iter().enumerate() {
                if i > 0 {
                    out.push('\n');
                }
                out.push_str(&format!("## Example {}\n{}", i + 1, format_conversation(turns)));
            }
        }
        let spec = &self.marked_image;
        out.push_str(&format!("\n# Marked image\nimage {}, {} markers\n", spec.image_id, spec.markers.len()));
        for m in &spec.markers {
            let [x0, y0, x1, y1] = m.bbox.to_array();
            out.push_str(&format!(
                "marker {} at ({}, {}), box [{x0}, {y0}, {x1}, {y1}]\n",
                m.label, m.center.0, m.center.1
            ));
        }
        out.push_str("\n# Region descriptions\n");
        for (label, d) in &self.context.region_descriptions {
            out.push_str(&format!("{label}: {}\n", one_line(d)));
        }
        if !self.context.image_descriptions.is_empty() {
            out.push_str("\n# Image descriptions\n");
            for d in &self.context.image_descriptions {
                out.push_str(&format!("- {}\n", one_line(d)));
            }
        }
        if !self.context.qa_pairs.is_empty() {
            out.push_str("\n# Questions and answers\n");
            for qa in &self.context.qa_pairs {
                out.push_str(&format!("Q: {}\nA: {}\n", one_line(&qa.question), one_line(&qa.answer)));
            }
        }
        out.push_str(&format!("\n# Task\n{}\n", self.instruction));
        out
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Build the request for one marked image. Exemplar order is shuffled by a
/// stream derived from `seed` and the image id.
pub fn assemble_request(
    spec: &MarkedImageSpec,
    context: &VlmContext,
    fewshot: &[Vec<Turn>],
    seed: u64,
) -> Result<VlmRequest, InstructError> {
    let m = spec.markers.len();
    if let Some(label) = (1..=m).find(|l| !context.region_descriptions.contains_key(l)) {
        return Err(InstructError::UncoveredMarker(label));
    }
    if let Some(&label) = context.region_descriptions.keys().find(|&&l| l == 0 || l > m) {
        return Err(InstructError::UnknownMarker(label));
    }
    let mut fewshot = fewshot.to_vec();
    DetRng::scoped(seed, &format!("instruct/fewshot/{}", spec.image_id)).shuffle(&mut fewshot);
    Ok(VlmRequest {
        marked_image: spec.clone(),
        context: context.clone(),
        fewshot,
        system: SYSTEM_INSTRUCTION.to_string(),
        instruction: DEFAULT_INSTRUCTION.to_string(),
        image_png: None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConversationRecord {
    pub image_id: u64,
    pub turns: Vec<Turn>,
    pub referenced_labels: BTreeSet<usize>,
    pub valid: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub filter: Option<FilterConfig>,
}

impl ConversationRecord {
    pub fn rejected(image_id: u64, error: impl Into<String>) -> Self {
        Self {
            image_id,
            turns: Vec::new(),
            referenced_labels: BTreeSet::new(),
            valid: false,
            error: Some(error.into()),
            filter: None,
        }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("records serialize") + "\n"
    }
}

/// Check one reply against its marked image. Every turn must parse
/// (lenient mode, referents are marker labels) and at least one grounded
/// span must appear. Accepted turns are stored in canonical form.
pub fn postfilter_one(raw: &str, spec: &MarkedImageSpec) -> ConversationRecord {
    let turns = match parse_conversation(raw) {
        Ok(t) => t,
        Err(e) => return ConversationRecord::rejected(spec.image_id, e.to_string()),
    };
    let mut canonical = Vec::with_capacity(turns.len());
    let mut labels = BTreeSet::new();
    let mut spans = 0;
    for t in &turns {
        let response = match parse_with_mode(&t.text, spec, ParseMode::Lenient) {
            Ok(r) => r,
            Err(e) => return ConversationRecord::rejected(spec.image_id, e.to_string()),
        };
        spans += response.spans().count();
        labels.extend(response.referents());
        let text = match serialize(&response) {
            Ok(s) => s,
            Err(e) => return ConversationRecord::rejected(spec.image_id, e.to_string()),
        };
        canonical.push(Turn { role: t.role, text });
    }
    if spans == 0 {
        return ConversationRecord::rejected(spec.image_id, "no grounding");
    }
    ConversationRecord {
        image_id: spec.image_id,
        turns: canonical,
        referenced_labels: labels,
        valid: true,
        error: None,
        filter: None,
    }
}

pub fn postfilter(raw: &[impl AsRef<str>], specs: &[MarkedImageSpec]) -> Result<Vec<ConversationRecord>, InstructError> {
    if raw.len() != specs.len() {
        return Err(InstructError::LengthMismatch(raw.len(), specs.len()));
    }
    Ok(raw.iter().zip(specs).map(|(r, s)| postfilter_one(r.as_ref(), s)).collect())
}

/// Rewrite marker-label referents as proxy indices. `label_to_proxy[k]`
/// is the proxy for label `k` (index 0 unused); a label without a proxy is
/// an error.
pub fn to_proxy_form(record: &ConversationRecord, label_to_proxy: &BTreeMap<usize, usize>) -> Result<ConversationRecord, InstructError> {
    let scope = record.referenced_labels.iter().copied().max().unwrap_or(0);
    let mut turns = Vec::with_capacity(record.turns.len());
    for t in &record.turns {
        let parsed = parse_with_mode(&t.text, &scope, ParseMode::Strict)?;
        let mapped = parsed
            .map_referents(|l| label_to_proxy.get(&l).copied())
            .ok_or_else(|| InstructError::Input(format!("record {}: label without a proxy", record.image_id)))?;
        turns.push(Turn { role: t.role, text: serialize(&mapped)? });
    }
    let referenced_labels = record.referenced_labels.iter().map(|l| label_to_proxy[l]).collect();
    Ok(ConversationRecord { turns, referenced_labels, ..record.clone() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstructConfig {
    pub filter: FilterConfig,
    /// Send sparse images (fewer than three regions) to the model as well.
    pub include_sparse: bool,
    pub seed: u64,
}

impl Default for InstructConfig {
    fn default() -> Self {
        Self { filter: FilterConfig::default(), include_sparse: false, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreparedImage {
    pub image_id: u64,
    pub outcome: FilterOutcome,
    /// `None` when the image was excluded (sparse or no regions).
    pub request: Option<VlmRequest>,
}

/// De-overlap, place markers and assemble a request for each image.
/// Captions are looked up by the image's COCO id when it has one, QA pairs
/// by its own id.
pub fn prepare_requests(
    images: &[VgImage],
    captions: &BTreeMap<u64, Vec<String>>,
    qas: &BTreeMap<u64, Vec<QaPair>>,
    fewshot: &[Vec<Turn>],
    cfg: &InstructConfig,
) -> Result<Vec<PreparedImage>, InstructError> {
    let mut out = Vec::with_capacity(images.len());
    for img in images {
        let regions = annotations_from_vg(img);
        let outcome = filter_overlaps(&regions, &cfg.filter)?;
        let excluded = outcome.kept.is_empty() || (outcome.sparse && !cfg.include_sparse);
        let request = if excluded {
            log::info!("image {}: {} regions kept, excluded", img.id, outcome.kept.len());
            None
        } else {
            let spec = place_markers(img.id, &outcome.kept)?;
            let mut context = VlmContext::from_regions(&outcome.kept);
            context.image_descriptions = captions.get(&img.coco_id.unwrap_or(img.id)).cloned().unwrap_or_default();
            context.qa_pairs = qas.get(&img.id).cloned().unwrap_or_default();
            Some(assemble_request(&spec, &context, fewshot, cfg.seed)?)
        };
        out.push(PreparedImage { image_id: img.id, outcome, request });
    }
    Ok(out)
}

/// Send every prepared request and post-filter the replies, in input
/// order. Failed calls become rejected records.
pub fn generate(
    client: &dyn VlmClient,
    prepared: &[PreparedImage],
    max_in_flight: usize,
    filter: &FilterConfig,
) -> Vec<ConversationRecord> {
    let requests: Vec<&VlmRequest> = prepared.iter().filter_map(|p| p.request.as_ref()).collect();
    let replies = run_requests(client, &requests, max_in_flight);
    requests
        .iter()
        .zip(replies)
        .map(|(req, reply)| {
            let mut rec = match reply {
                Ok(text) => postfilter_one(&text, &req.marked_image),
                Err(e) => ConversationRecord::rejected(req.image_id(), format!("vlm: {e}")),
            };
            rec.filter = Some(*filter);
            rec
        })
        .collect()
}
