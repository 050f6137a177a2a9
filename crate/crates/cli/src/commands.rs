//! Argument definitions and subcommand bodies.
//!
//! Every command returns `Ok(true)` on success, `Ok(false)` when it ran but
//! found failures to report (selftest, validate), and `Err` on I/O, parse
//! or configuration errors.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{anyhow, bail, Context};
use clap::{ArgGroup, Args, Parser, Subcommand};
use regiontok_core::eval::{
    build_benchmark, compute_report, load_items, parse_predictions, predictions_to_jsonl, BenchmarkFile,
    BenchmarkSpec, BenchmarkStats, CocoDataset, EvalConfig, MatchStrategy, Matcher, Protocol,
};
use regiontok_core::fixtures::{synthetic_benchmark, synthetic_detection_dataset, synthetic_vg, ImageFixture, IMAGE_FIXTURES};
use regiontok_core::geometry::BoundingBox;
use regiontok_core::grammar::{
    apply_template, apply_template_variant, parse, parse_with_mode, render_prompt, serialize, template_variants,
    GroundedResponse, ParseMode, TemplateTask,
};
use regiontok_core::instruct::{
    default_fewshot, encode_png, format_conversation, generate, load_coco_captions, load_vg_images, load_vg_qa,
    postfilter_one, prepare_requests, rasterize_markers, ConversationRecord, InstructConfig, MarkedImageSpec,
    MarkerStyle, MockVlmClient, PreparedImage, QaPair, Turn, VlmClient,
};
use regiontok_core::pipeline::{run_pipeline, Proposals};
use regiontok_core::region::{ProxyRegistry, RegionProposal};
use regiontok_core::vision::ImageArray;
use serde::Deserialize;
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::http::HttpVlmClient;
use crate::manifest::{manifest_path, RunManifest};
use crate::selftest::{self, Corruption};

#[derive(Debug, Parser)]
#[command(name = "regiontok", version, about = "Localized visual tokenization, grounded markup and grounding evaluation")]
pub struct Cli {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override one configuration key; repeatable. Applied after --config.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Master seed; every stage derives its own seed from it.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Tokenize one image: image tokens, region tokens, prompt and budget.
    Pipeline(PipelineArgs),
    /// Parse grounded markup into JSON (or its canonical form).
    Parse(ParseArgs),
    /// Render a prompt, or serialize a JSON response back to markup.
    Render(RenderArgs),
    /// Fill a task instruction template.
    Template(TemplateArgs),
    /// Score predictions against grounding annotations.
    Eval(EvalArgs),
    /// Build a per-category grounding benchmark from detection annotations.
    BenchBuild(BenchArgs),
    /// Region-grounded conversation data generation.
    #[command(subcommand)]
    Instruct(InstructCommand),
    /// Run the oracle suites.
    Selftest(SelftestArgs),
    /// Write synthetic input files.
    #[command(subcommand)]
    Fixture(FixtureCommand),
    /// Print the effective configuration.
    Config,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("source").required(true).args(["fixture", "image"])))]
pub struct PipelineArgs {
    /// Built-in synthetic image (three-boxes, empty, crowded, random).
    #[arg(long)]
    pub fixture: Option<String>,
    /// Image file; resized to the configured square size.
    #[arg(long)]
    pub image: Option<PathBuf>,
    #[arg(long)]
    pub image_id: Option<String>,
    /// Ground-truth box `x0,y0,x1,y1` (input image pixels) for the synthetic proposer; repeatable.
    #[arg(long = "gt-box", value_name = "BOX")]
    pub gt_boxes: Vec<String>,
    /// JSON list of `{"box": [..], "objectness": s}` proposals (input image pixels).
    #[arg(long, conflicts_with = "gt_boxes")]
    pub proposals: Option<PathBuf>,
    /// User region `x0,y0,x1,y1` (input image pixels), appended after proposals; repeatable.
    #[arg(long = "user-box", value_name = "BOX")]
    pub user_boxes: Vec<String>,
    #[arg(long, default_value = "Please briefly describe the image content.")]
    pub instruction: String,
    #[arg(long)]
    pub no_grounding: bool,
    /// Keep all 1024 patch tokens instead of merging 2×2 neighbours.
    #[arg(long)]
    pub no_merge: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("scope").required(true).args(["registry_size", "registry"])))]
pub struct ScopeArgs {
    /// Number of registered regions.
    #[arg(long)]
    pub registry_size: Option<usize>,
    /// Registry JSON written by `pipeline`.
    #[arg(long)]
    pub registry: Option<PathBuf>,
}

impl ScopeArgs {
    fn size(&self, cfg: &RunConfig) -> anyhow::Result<usize> {
        match (&self.registry, self.registry_size) {
            (Some(p), _) => {
                let p = resolve(cfg, p);
                Ok(ProxyRegistry::load(&p).with_context(|| format!("loading {}", p.display()))?.len())
            }
            (None, Some(n)) => Ok(n),
            (None, None) => bail!("--registry or --registry-size is required"),
        }
    }
}

#[derive(Debug, Args)]
pub struct ParseArgs {
    /// Markup file; stdin when absent or `-`.
    pub input: Option<PathBuf>,
    #[command(flatten)]
    pub scope: ScopeArgs,
    /// Tolerate whitespace variation.
    #[arg(long)]
    pub lenient: bool,
    /// Print the canonical markup instead of JSON.
    #[arg(long)]
    pub canonical: bool,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[command(flatten)]
    pub scope: ScopeArgs,
    #[arg(long, required_unless_present = "response")]
    pub instruction: Option<String>,
    #[arg(long)]
    pub no_grounding: bool,
    /// Serialize this JSON response instead of rendering a prompt.
    #[arg(long, conflicts_with = "instruction")]
    pub response: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TemplateArgs {
    /// image_caption, region_caption, rec, multi_ground, grounded_caption, grounded_chat
    #[arg(required_unless_present = "list")]
    pub task: Option<TemplateTask>,
    /// Placeholder value; repeatable.
    #[arg(long = "arg", value_name = "NAME=VALUE")]
    pub args: Vec<String>,
    /// Use this variant instead of a seeded choice.
    #[arg(long)]
    pub variant: Option<usize>,
    /// List every task's variants.
    #[arg(long)]
    pub list: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Benchmark file or COCO-style annotations.
    #[arg(long)]
    pub annotations: PathBuf,
    /// JSON-Lines predictions.
    #[arg(long)]
    pub predictions: PathBuf,
    /// any, merged or as-many.
    #[arg(long, default_value = "as-many")]
    pub protocol: Protocol,
    /// Also compute Acc@0.5 (one GT box per item).
    #[arg(long)]
    pub rec: bool,
    /// Maximum one-to-one matching instead of score-ordered greedy.
    #[arg(long)]
    pub optimal: bool,
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Report JSON path.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// COCO/LVIS-style detection annotations.
    #[arg(long)]
    pub annotations: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub max_per_category: Option<usize>,
    /// Comma-separated category ids; all categories when absent.
    #[arg(long, value_delimiter = ',')]
    pub categories: Vec<u64>,
}

#[derive(Debug, Args)]
pub struct RegionInputs {
    /// Images with region descriptions (Visual Genome layout).
    #[arg(long)]
    pub regions: PathBuf,
    /// COCO caption annotations.
    #[arg(long)]
    pub captions: Option<PathBuf>,
    /// Question/answer pairs (Visual Genome layout).
    #[arg(long)]
    pub qa: Option<PathBuf>,
    /// Also use images with fewer than three regions after de-overlap.
    #[arg(long)]
    pub include_sparse: bool,
    #[arg(long)]
    pub iou_thresh: Option<f64>,
    #[arg(long)]
    pub max_regions: Option<usize>,
}

#[derive(Debug, Args)]
pub struct RasterArgs {
    /// Draw markers and attach the PNG to each request.
    #[arg(long)]
    pub png: bool,
    /// Base images named `<image id>.png` or `<image id>.jpg`; grey canvas otherwise.
    #[arg(long)]
    pub images_dir: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum InstructCommand {
    /// De-overlap regions; one JSON line per image.
    Filter {
        #[command(flatten)]
        inputs: RegionInputs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Assemble model requests without sending them.
    Prompt {
        #[command(flatten)]
        inputs: RegionInputs,
        #[command(flatten)]
        raster: RasterArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Send requests and keep the conversations that pass the post-filter.
    Generate {
        #[command(flatten)]
        inputs: RegionInputs,
        #[command(flatten)]
        raster: RasterArgs,
        /// Use the offline deterministic model instead of VLM_ENDPOINT.
        #[arg(long)]
        mock: bool,
        #[arg(long, default_value_t = 4)]
        max_in_flight: usize,
        #[arg(long, default_value_t = 120)]
        timeout_secs: u64,
        #[arg(long, default_value_t = 2)]
        retries: u32,
        #[arg(long)]
        out: PathBuf,
        /// Where to write rejected records.
        #[arg(long)]
        rejected: Option<PathBuf>,
    },
    /// Re-check conversation records or raw replies against their images.
    Validate {
        #[command(flatten)]
        inputs: RegionInputs,
        /// JSON lines: conversation records or `{"image_id", "response"}`.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct SelftestArgs {
    /// Deliberately break one kernel to show the suites catch it.
    #[arg(long, value_enum)]
    pub corrupt: Option<Corruption>,
}

#[derive(Debug, Subcommand)]
pub enum FixtureCommand {
    /// Grounding items (`annotations.json`) and predictions (`predictions.jsonl`).
    Benchmark {
        #[arg(long, default_value_t = 500)]
        items: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// COCO-style detection annotations.
    Detection {
        #[arg(long, default_value_t = 20)]
        categories: usize,
        #[arg(long, default_value_t = 1)]
        min_images: usize,
        #[arg(long, default_value_t = 12)]
        max_images: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Region descriptions, captions and QA pairs.
    Vg {
        #[arg(long, default_value_t = 50)]
        images: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Defaults, then `--config`, then `--set`, then the named flags.
fn resolve_config(cli: &Cli, flags: &[(&str, String)]) -> anyhow::Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(p) = &cli.config {
        cfg.apply_file(p)?;
    }
    cfg.apply_overrides(cli.set.iter().map(String::as_str))?;
    if let Some(s) = cli.seed {
        cfg.set("seed", &s.to_string())?;
    }
    for (k, v) in flags {
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn resolve(cfg: &RunConfig, p: &Path) -> PathBuf {
    match &cfg.data_dir {
        Some(dir) if p.is_relative() && !p.exists() => dir.join(p),
        _ => p.to_path_buf(),
    }
}

fn read_text(p: &Path) -> anyhow::Result<String> {
    fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))
}

fn write_file(p: &Path, data: impl AsRef<[u8]>) -> anyhow::Result<()> {
    fs::write(p, data).with_context(|| format!("writing {}", p.display()))
}

/// Write through a temporary sibling so a partial file never appears.
fn write_atomic(p: &Path, data: impl AsRef<[u8]>) -> anyhow::Result<()> {
    let mut tmp = p.as_os_str().to_os_string();
    tmp.push(".partial");
    let tmp = PathBuf::from(tmp);
    write_file(&tmp, data)?;
    fs::rename(&tmp, p).with_context(|| format!("renaming {} into place", tmp.display()))
}

fn ensure_dir(p: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))
}

fn pretty(v: &impl serde::Serialize) -> String {
    serde_json::to_string_pretty(v).expect("values serialize") + "\n"
}

pub fn parse_box(s: &str) -> anyhow::Result<BoundingBox> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .with_context(|| format!("box {s:?}: expected x0,y0,x1,y1"))?;
    let arr: [f64; 4] = v.try_into().map_err(|_| anyhow!("box {s:?}: expected four numbers"))?;
    Ok(BoundingBox::try_from(arr)?)
}

fn scale_box(b: &BoundingBox, sx: f64, sy: f64) -> anyhow::Result<BoundingBox> {
    Ok(BoundingBox::new(b.x_min * sx, b.y_min * sy, b.x_max * sx, b.y_max * sy)?)
}

pub fn run(cli: Cli) -> anyhow::Result<bool> {
    match &cli.command {
        Command::Pipeline(a) => {
            let mut flags = Vec::new();
            if a.no_merge {
                flags.push(("merge", "false".to_string()));
            }
            cmd_pipeline(&resolve_config(&cli, &flags)?, a, &cli)
        }
        Command::Parse(a) => cmd_parse(&resolve_config(&cli, &[])?, a),
        Command::Render(a) => cmd_render(&resolve_config(&cli, &[])?, a),
        Command::Template(a) => cmd_template(&resolve_config(&cli, &[])?, a),
        Command::Eval(a) => {
            let flags: Vec<_> = a.jobs.map(|j| ("jobs", j.to_string())).into_iter().collect();
            cmd_eval(&resolve_config(&cli, &flags)?, a, &cli)
        }
        Command::BenchBuild(a) => {
            let flags: Vec<_> = a.max_per_category.map(|n| ("max_images_per_category", n.to_string())).into_iter().collect();
            cmd_bench_build(&resolve_config(&cli, &flags)?, a, &cli)
        }
        Command::Instruct(c) => {
            let inputs = match c {
                InstructCommand::Filter { inputs, .. }
                | InstructCommand::Prompt { inputs, .. }
                | InstructCommand::Generate { inputs, .. }
                | InstructCommand::Validate { inputs, .. } => inputs,
            };
            let mut flags = Vec::new();
            if let Some(t) = inputs.iou_thresh {
                flags.push(("iou_thresh", t.to_string()));
            }
            if let Some(m) = inputs.max_regions {
                flags.push(("max_regions", m.to_string()));
            }
            cmd_instruct(&resolve_config(&cli, &flags)?, c, &cli)
        }
        Command::Selftest(a) => Ok(cmd_selftest(a)),
        Command::Fixture(c) => cmd_fixture(&resolve_config(&cli, &[])?, c),
        Command::Config => {
            print!("{}", resolve_config(&cli, &[])?.to_text());
            Ok(true)
        }
    }
}

fn start_manifest(cfg: &RunConfig, cli: &Cli, name: &str) -> anyhow::Result<RunManifest> {
    let mut m = RunManifest::start(name, cfg);
    if let Some(p) = &cli.config {
        m.input(p)?;
    }
    Ok(m)
}

fn load_image(path: &Path, size: usize) -> anyhow::Result<(ImageArray, (f64, f64))> {
    let img = image::open(path).with_context(|| format!("reading image {}", path.display()))?.to_rgb8();
    let (w, h) = img.dimensions();
    let scale = (size as f64 / w as f64, size as f64 / h as f64);
    let img = if (w, h) == (size as u32, size as u32) {
        img
    } else {
        image::imageops::resize(&img, size as u32, size as u32, image::imageops::FilterType::Triangle)
    };
    let data = img.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
    Ok((ImageArray::new(size, size, 3, data)?, scale))
}

#[derive(Deserialize)]
struct ProposalLine {
    #[serde(rename = "box")]
    bbox: BoundingBox,
    objectness: f64,
}

fn cmd_pipeline(cfg: &RunConfig, a: &PipelineArgs, cli: &Cli) -> anyhow::Result<bool> {
    let pcfg = cfg.pipeline();
    let mut manifest = start_manifest(cfg, cli, "pipeline")?;
    let (image, (sx, sy), default_id, fixture_gt) = if let Some(name) = &a.fixture {
        let f = ImageFixture::named(name, pcfg.image_size, cfg.seed)
            .ok_or_else(|| anyhow!("unknown fixture {name:?} (expected one of {})", IMAGE_FIXTURES.join(", ")))?;
        (f.image(cfg.seed), (1.0, 1.0), name.clone(), f.gt_boxes)
    } else {
        let path = resolve(cfg, a.image.as_ref().expect("clap requires a source"));
        manifest.input(&path)?;
        let (img, scale) = load_image(&path, cfg.image_size)?;
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "image".into());
        (img, scale, stem, Vec::new())
    };
    let image_id = a.image_id.clone().unwrap_or(default_id);
    let scaled = |specs: &[String]| -> anyhow::Result<Vec<BoundingBox>> {
        specs.iter().map(|s| scale_box(&parse_box(s)?, sx, sy)).collect()
    };
    let mut gt = fixture_gt;
    gt.extend(scaled(&a.gt_boxes)?);
    let user = scaled(&a.user_boxes)?;

    let given: Option<Vec<RegionProposal>> = match &a.proposals {
        Some(p) => {
            let p = resolve(cfg, p);
            manifest.input(&p)?;
            let lines: Vec<ProposalLine> =
                serde_json::from_str(&read_text(&p)?).with_context(|| format!("parsing {}", p.display()))?;
            Some(
                lines
                    .iter()
                    .map(|l| Ok(RegionProposal::new(scale_box(&l.bbox, sx, sy)?, l.objectness, pcfg.image_size)?))
                    .collect::<anyhow::Result<_>>()?,
            )
        }
        None => None,
    };
    let proposals = match &given {
        Some(g) => Proposals::Given(g),
        None => Proposals::Synthetic(&gt),
    };
    let out = run_pipeline(&image_id, &image, proposals, &user, &a.instruction, !a.no_grounding, &pcfg)?;

    ensure_dir(&a.out)?;
    let registry = a.out.join("registry.json");
    out.registry.save(&registry)?;
    let prompt = a.out.join("prompt.txt");
    write_file(&prompt, format!("{}\n", out.prompt))?;
    let mut summary = serde_json::to_value(&out.summary)?;
    summary["image_id"] = json!(image_id);
    summary["manifest"] = json!("manifest.json");
    summary["kept_proposals"] = json!(out
        .registry
        .entries()
        .iter()
        .take(out.summary.proposed_regions)
        .map(|e| e.source_box)
        .collect::<Vec<_>>());
    let summary_path = a.out.join("summary.json");
    let text = pretty(&summary);
    write_file(&summary_path, &text)?;
    manifest.finish(&[registry.clone(), registry.with_extension("bin"), prompt, summary_path], &a.out.join("manifest.json"))?;
    print!("{text}");
    Ok(true)
}

fn read_input(p: Option<&Path>) -> anyhow::Result<String> {
    match p {
        Some(p) if p != Path::new("-") => read_text(p),
        _ => {
            let mut s = String::new();
            std::io::stdin().read_to_string(&mut s).context("reading stdin")?;
            Ok(s)
        }
    }
}

fn cmd_parse(cfg: &RunConfig, a: &ParseArgs) -> anyhow::Result<bool> {
    let n = a.scope.size(cfg)?;
    let text = read_input(a.input.as_deref())?;
    // a single trailing newline is file framing, not content
    let text = text.strip_suffix('\n').unwrap_or(&text);
    let mode = if a.lenient { ParseMode::Lenient } else { ParseMode::Strict };
    let r = parse_with_mode(text, &n, mode)?;
    if a.canonical {
        println!("{}", serialize(&r)?);
    } else {
        print!("{}", pretty(&r));
    }
    Ok(true)
}

fn cmd_render(cfg: &RunConfig, a: &RenderArgs) -> anyhow::Result<bool> {
    let n = a.scope.size(cfg)?;
    let text = match (&a.response, &a.instruction) {
        (Some(p), _) => {
            let r: GroundedResponse = serde_json::from_str(&read_text(&resolve(cfg, p))?)?;
            let text = serialize(&r)?;
            parse(&text, &n)?;
            text
        }
        (None, Some(ins)) => render_prompt(&n, ins, !a.no_grounding)?,
        (None, None) => bail!("--instruction or --response is required"),
    };
    println!("{text}");
    Ok(true)
}

fn key_values(pairs: &[String]) -> anyhow::Result<BTreeMap<String, String>> {
    pairs
        .iter()
        .map(|p| {
            p.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| anyhow!("{p:?}: expected NAME=VALUE"))
        })
        .collect()
}

fn cmd_template(cfg: &RunConfig, a: &TemplateArgs) -> anyhow::Result<bool> {
    if a.list {
        for task in TemplateTask::ALL {
            for (i, v) in template_variants(task).iter().enumerate() {
                println!("{}\t{i}\t{v}", task.name());
            }
        }
        return Ok(true);
    }
    let task = a.task.ok_or_else(|| anyhow!("a task is required"))?;
    let args = key_values(&a.args)?;
    let text = match a.variant {
        Some(v) => {
            let count = template_variants(task).len();
            if v >= count {
                bail!("{} has {count} variants, got --variant {v}", task.name());
            }
            apply_template_variant(task, v, &args)?
        }
        None => apply_template(task, &args, cfg.seed)?,
    };
    println!("{text}");
    Ok(true)
}

fn cmd_eval(cfg: &RunConfig, a: &EvalArgs, cli: &Cli) -> anyhow::Result<bool> {
    let mut manifest = start_manifest(cfg, cli, "eval")?;
    let ann = resolve(cfg, &a.annotations);
    let pred = resolve(cfg, &a.predictions);
    manifest.input(&ann)?;
    manifest.input(&pred)?;
    let items = load_items(&ann).with_context(|| format!("loading {}", ann.display()))?;
    let preds = parse_predictions(&read_text(&pred)?).with_context(|| format!("parsing {}", pred.display()))?;
    let strategy = if a.optimal { MatchStrategy::Optimal } else { MatchStrategy::Greedy };
    let ecfg = EvalConfig {
        protocol: a.protocol,
        matcher: Matcher { strategy, ..Matcher::default() },
        rec: a.rec,
        jobs: cfg.jobs,
    };
    let report = compute_report(&items, &preds, &ecfg)?;
    if let Some(out) = &a.out {
        if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
            ensure_dir(dir)?;
        }
        write_atomic(out, pretty(&report))?;
        manifest.finish(&[out.clone()], &manifest_path(out))?;
    }
    print!("{}", report.metrics_block());
    Ok(true)
}

fn cmd_bench_build(cfg: &RunConfig, a: &BenchArgs, cli: &Cli) -> anyhow::Result<bool> {
    let mut manifest = start_manifest(cfg, cli, "bench-build")?;
    let ann = resolve(cfg, &a.annotations);
    manifest.input(&ann)?;
    let ds = CocoDataset::load(&ann).with_context(|| format!("loading {}", ann.display()))?;
    let spec = BenchmarkSpec {
        categories: (!a.categories.is_empty()).then(|| a.categories.clone()),
        max_images_per_category: cfg.max_images_per_category,
        seed: cfg.seed,
    };
    let items = build_benchmark(&ds, &spec)?;
    let stats = BenchmarkStats::of(&items);
    write_atomic(&a.out, BenchmarkFile::new(&spec, items).to_json())?;
    manifest.finish(&[a.out.clone()], &manifest_path(&a.out))?;
    let mut report = serde_json::to_value(&stats)?;
    report["dataset_categories"] = json!(ds.categories.len());
    report["dataset_images"] = json!(ds.images.len());
    print!("{}", pretty(&report));
    Ok(true)
}

struct InstructInputs {
    images: Vec<regiontok_core::instruct::VgImage>,
    captions: BTreeMap<u64, Vec<String>>,
    qas: BTreeMap<u64, Vec<QaPair>>,
}

fn load_instruct_inputs(cfg: &RunConfig, i: &RegionInputs, manifest: &mut RunManifest) -> anyhow::Result<InstructInputs> {
    let regions = resolve(cfg, &i.regions);
    manifest.input(&regions)?;
    let images = load_vg_images(&regions).with_context(|| format!("loading {}", regions.display()))?;
    let captions = match &i.captions {
        Some(p) => {
            let p = resolve(cfg, p);
            manifest.input(&p)?;
            load_coco_captions(&p).with_context(|| format!("loading {}", p.display()))?
        }
        None => BTreeMap::new(),
    };
    let qas = match &i.qa {
        Some(p) => {
            let p = resolve(cfg, p);
            manifest.input(&p)?;
            load_vg_qa(&p).with_context(|| format!("loading {}", p.display()))?
        }
        None => BTreeMap::new(),
    };
    Ok(InstructInputs { images, captions, qas })
}

fn instruct_config(cfg: &RunConfig, i: &RegionInputs) -> InstructConfig {
    InstructConfig { filter: cfg.filter(), include_sparse: i.include_sparse, seed: cfg.seed }
}

fn base_image(dir: Option<&Path>, id: u64) -> anyhow::Result<Option<image::RgbImage>> {
    let Some(dir) = dir else { return Ok(None) };
    for ext in ["png", "jpg", "jpeg"] {
        let p = dir.join(format!("{id}.{ext}"));
        if p.exists() {
            return Ok(Some(image::open(&p).with_context(|| format!("reading {}", p.display()))?.to_rgb8()));
        }
    }
    Ok(None)
}

fn marker_png(spec: &MarkedImageSpec, dir: Option<&Path>) -> anyhow::Result<Vec<u8>> {
    let base = base_image(dir, spec.image_id)?;
    let extent = |f: fn(&BoundingBox) -> f64| spec.markers.iter().map(|m| f(&m.bbox)).fold(64.0, f64::max).ceil() as u32;
    let (w, h) = (extent(|b| b.x_max), extent(|b| b.y_max));
    Ok(encode_png(&rasterize_markers(spec, base, w, h, &MarkerStyle::default()))?)
}

fn attach_pngs(prepared: &mut [PreparedImage], dir: Option<&Path>) -> anyhow::Result<()> {
    for p in prepared.iter_mut() {
        if let Some(req) = p.request.as_mut() {
            req.image_png = Some(marker_png(&req.marked_image, dir)?);
        }
    }
    Ok(())
}

fn write_lines(path: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match path {
        Some(p) => write_atomic(p, text),
        None => {
            std::io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn cmd_instruct(cfg: &RunConfig, c: &InstructCommand, cli: &Cli) -> anyhow::Result<bool> {
    match c {
        InstructCommand::Filter { inputs, out } => {
            let mut manifest = start_manifest(cfg, cli, "instruct filter")?;
            let data = load_instruct_inputs(cfg, inputs, &mut manifest)?;
            let prepared = prepare_requests(&data.images, &data.captions, &data.qas, &[], &instruct_config(cfg, inputs))?;
            let mut text = String::new();
            for p in &prepared {
                let mut v = serde_json::to_value(&p.outcome)?;
                v["image_id"] = json!(p.image_id);
                v["filter"] = serde_json::to_value(cfg.filter())?;
                v["excluded"] = json!(p.request.is_none());
                text.push_str(&(v.to_string() + "\n"));
            }
            write_lines(out.as_deref(), &text)?;
            if let Some(o) = out {
                manifest.finish(&[o.clone()], &manifest_path(o))?;
            }
            Ok(true)
        }
        InstructCommand::Prompt { inputs, raster, out } => {
            let mut manifest = start_manifest(cfg, cli, "instruct prompt")?;
            let data = load_instruct_inputs(cfg, inputs, &mut manifest)?;
            let mut prepared =
                prepare_requests(&data.images, &data.captions, &data.qas, &default_fewshot(), &instruct_config(cfg, inputs))?;
            if raster.png {
                attach_pngs(&mut prepared, raster.images_dir.as_deref())?;
            }
            ensure_dir(out)?;
            let mut outputs = Vec::new();
            let mut lines = String::new();
            for req in prepared.iter().filter_map(|p| p.request.as_ref()) {
                lines.push_str(&(serde_json::to_string(req)? + "\n"));
                let doc = out.join(format!("request_{}.txt", req.image_id()));
                write_file(&doc, req.document())?;
                outputs.push(doc);
                if let Some(png) = &req.image_png {
                    let p = out.join(format!("markers_{}.png", req.image_id()));
                    write_file(&p, png)?;
                    outputs.push(p);
                }
            }
            let jsonl = out.join("requests.jsonl");
            write_file(&jsonl, &lines)?;
            outputs.insert(0, jsonl);
            manifest.finish(&outputs, &out.join("manifest.json"))?;
            let sent = prepared.iter().filter(|p| p.request.is_some()).count();
            println!("{sent} requests, {} images excluded", prepared.len() - sent);
            Ok(true)
        }
        InstructCommand::Generate { inputs, raster, mock, max_in_flight, timeout_secs, retries, out, rejected } => {
            let mut manifest = start_manifest(cfg, cli, "instruct generate")?;
            let data = load_instruct_inputs(cfg, inputs, &mut manifest)?;
            let mut prepared =
                prepare_requests(&data.images, &data.captions, &data.qas, &default_fewshot(), &instruct_config(cfg, inputs))?;
            let client: Box<dyn VlmClient> = if *mock {
                Box::new(MockVlmClient)
            } else {
                Box::new(HttpVlmClient::from_env(Duration::from_secs(*timeout_secs), *retries)?)
            };
            if raster.png || !*mock {
                attach_pngs(&mut prepared, raster.images_dir.as_deref())?;
            }
            let records = generate(client.as_ref(), &prepared, (*max_in_flight).max(1), &cfg.filter());
            let (valid, bad): (Vec<&ConversationRecord>, Vec<&ConversationRecord>) = records.iter().partition(|r| r.valid);
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                ensure_dir(dir)?;
            }
            write_atomic(out, valid.iter().map(|r| r.to_json_line()).collect::<String>())?;
            let mut outputs = vec![out.clone()];
            if let Some(p) = rejected {
                write_atomic(p, bad.iter().map(|r| r.to_json_line()).collect::<String>())?;
                outputs.push(p.clone());
            }
            manifest.finish(&outputs, &manifest_path(out))?;
            for r in &bad {
                log::warn!("image {}: rejected: {}", r.image_id, r.error.as_deref().unwrap_or("?"));
            }
            print!(
                "{}",
                pretty(&json!({
                    "images": prepared.len(),
                    "requests": records.len(),
                    "excluded": prepared.len() - records.len(),
                    "valid": valid.len(),
                    "rejected": bad.len(),
                }))
            );
            Ok(true)
        }
        InstructCommand::Validate { inputs, input, out } => {
            let mut manifest = start_manifest(cfg, cli, "instruct validate")?;
            let data = load_instruct_inputs(cfg, inputs, &mut manifest)?;
            let input = resolve(cfg, input);
            manifest.input(&input)?;
            // include sparse images: a record for one is still checkable
            let icfg = InstructConfig { include_sparse: true, ..instruct_config(cfg, inputs) };
            let prepared = prepare_requests(&data.images, &data.captions, &data.qas, &[], &icfg)?;
            let specs: BTreeMap<u64, &MarkedImageSpec> = prepared
                .iter()
                .filter_map(|p| p.request.as_ref().map(|r| (p.image_id, &r.marked_image)))
                .collect();
            let (mut checked, mut valid, mut mismatched) = (0, 0, 0);
            let mut lines = String::new();
            for (i, line) in read_text(&input)?.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let v: Value = serde_json::from_str(line).with_context(|| format!("{}:{}", input.display(), i + 1))?;
                let image_id = v["image_id"]
                    .as_u64()
                    .ok_or_else(|| anyhow!("{}:{}: missing image_id", input.display(), i + 1))?;
                let raw = match (v.get("response").and_then(Value::as_str), v.get("turns")) {
                    (Some(r), _) => r.to_string(),
                    (None, Some(t)) => format_conversation(&serde_json::from_value::<Vec<Turn>>(t.clone())?),
                    _ => bail!("{}:{}: expected `response` or `turns`", input.display(), i + 1),
                };
                let mut rec = match specs.get(&image_id) {
                    Some(spec) => postfilter_one(&raw, spec),
                    None => ConversationRecord::rejected(image_id, "no marked image for this id"),
                };
                rec.filter = Some(cfg.filter());
                if let Ok(claimed) = serde_json::from_value::<ConversationRecord>(v.clone()) {
                    if claimed.valid != rec.valid || (claimed.valid && claimed.turns != rec.turns) {
                        mismatched += 1;
                    }
                }
                checked += 1;
                valid += usize::from(rec.valid);
                lines.push_str(&rec.to_json_line());
            }
            if let Some(o) = out {
                write_atomic(o, &lines)?;
                manifest.finish(&[o.clone()], &manifest_path(o))?;
            }
            print!(
                "{}",
                pretty(&json!({"checked": checked, "valid": valid, "rejected": checked - valid, "mismatched": mismatched}))
            );
            Ok(valid == checked && mismatched == 0)
        }
    }
}

fn cmd_selftest(a: &SelftestArgs) -> bool {
    let start = std::time::Instant::now();
    let results = selftest::run(a.corrupt);
    for r in &results {
        println!("{}", r.line());
    }
    let failed = results.iter().filter(|r| r.failure.is_some()).count();
    println!(
        "selftest: {} of {} suites passed in {:.2}s",
        results.len() - failed,
        results.len(),
        start.elapsed().as_secs_f64()
    );
    failed == 0
}

fn cmd_fixture(cfg: &RunConfig, c: &FixtureCommand) -> anyhow::Result<bool> {
    match c {
        FixtureCommand::Benchmark { items, out } => {
            ensure_dir(out)?;
            let (items, preds) = synthetic_benchmark(*items, cfg.seed);
            let spec = BenchmarkSpec { seed: cfg.seed, ..Default::default() };
            write_file(&out.join("annotations.json"), BenchmarkFile::new(&spec, items).to_json())?;
            write_file(&out.join("predictions.jsonl"), predictions_to_jsonl(&preds))?;
        }
        FixtureCommand::Detection { categories, min_images, max_images, out } => {
            if min_images > max_images {
                bail!("--min-images {min_images} exceeds --max-images {max_images}");
            }
            write_file(out, pretty(&synthetic_detection_dataset(*categories, *min_images, *max_images, cfg.seed)))?;
        }
        FixtureCommand::Vg { images, out } => {
            ensure_dir(out)?;
            let fx = synthetic_vg(*images, cfg.seed);
            write_file(&out.join("regions.json"), pretty(&fx.images))?;
            let captions: Vec<Value> = fx
                .captions
                .iter()
                .flat_map(|(id, caps)| caps.iter().map(move |c| json!({"image_id": id, "caption": c})))
                .collect();
            write_file(&out.join("captions.json"), pretty(&json!({"annotations": captions})))?;
            let qa: Vec<Value> = fx.qas.iter().map(|(id, qas)| json!({"id": id, "qas": qas})).collect();
            write_file(&out.join("qa.json"), pretty(&qa))?;
        }
    }
    Ok(true)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn boxes_parse() {
        assert_eq!(parse_box("1, 2,3,4").unwrap(), BoundingBox::new(1., 2., 3., 4.).unwrap());
        assert!(parse_box("1,2,3").is_err());
        assert!(parse_box("3,2,1,4").is_err());
        assert!(parse_box("a,b,c,d").is_err());
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
