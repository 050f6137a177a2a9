//! Flat `key = value` run configuration. Later sources override earlier
//! ones: defaults, then the config file, then command-line flags.

use std::path::{Path, PathBuf};

use regiontok_core::instruct::FilterConfig;
use regiontok_core::pipeline::PipelineConfig;
use regiontok_core::region::{ProposerConfig, RoiAlignConfig};
use regiontok_core::vision::EncoderConfig;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}:{line}: {message}")]
    Syntax { path: String, line: usize, message: String },
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("bad value {value:?} for {key}: {message}")]
    BadValue { key: String, value: String, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Square input side in pixels.
    pub image_size: usize,
    pub patch_size: usize,
    pub encoder_depth: usize,
    pub encoder_dim: usize,
    pub llm_dim: usize,
    pub merge: bool,
    pub num_proposals: usize,
    pub score_threshold: f64,
    pub nms_threshold: f64,
    pub max_keep: usize,
    pub roi_bins: (usize, usize),
    pub roi_samples: (usize, usize),
    pub jitter: f64,
    pub seed: u64,
    pub iou_thresh: f64,
    pub max_regions: usize,
    pub max_images_per_category: usize,
    pub jobs: usize,
    pub data_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let p = PipelineConfig::default();
        let f = FilterConfig::default();
        Self {
            image_size: p.image_size.0,
            patch_size: p.encoder.patch_size,
            encoder_depth: p.encoder.depth,
            encoder_dim: p.encoder.dim,
            llm_dim: p.llm_dim,
            merge: p.merge,
            num_proposals: p.proposer.num_proposals,
            score_threshold: p.proposer.score_threshold,
            nms_threshold: p.proposer.nms_threshold,
            max_keep: p.proposer.max_keep,
            roi_bins: p.roi.bins,
            roi_samples: p.roi.samples,
            jitter: p.jitter,
            seed: 0,
            iou_thresh: f.iou_threshold,
            max_regions: f.max_regions,
            max_images_per_category: 5,
            jobs: 1,
            data_dir: None,
        }
    }
}

pub const KEYS: [&str; 19] = [
    "image_size",
    "patch_size",
    "encoder_depth",
    "encoder_dim",
    "llm_dim",
    "merge",
    "num_proposals",
    "score_threshold",
    "nms_threshold",
    "max_keep",
    "roi_bins",
    "roi_samples",
    "jitter",
    "seed",
    "iou_thresh",
    "max_regions",
    "max_images_per_category",
    "jobs",
    "data_dir",
];

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::BadValue {
        key: key.into(),
        value: value.into(),
        message: e.to_string(),
    })
}

fn parse_bool(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(ConfigError::BadValue { key: key.into(), value: value.into(), message: "expected true or false".into() }),
    }
}

/// `7` or `7x5` (rows × cols).
fn parse_pair(key: &str, value: &str) -> Result<(usize, usize), ConfigError> {
    match value.split_once(['x', 'X']) {
        Some((a, b)) => Ok((parse_num(key, a.trim())?, parse_num(key, b.trim())?)),
        None => {
            let n = parse_num(key, value)?;
            Ok((n, n))
        }
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value.trim();
        match key.trim() {
            "image_size" => self.image_size = parse_num(key, v)?,
            "patch_size" => self.patch_size = parse_num(key, v)?,
            "encoder_depth" => self.encoder_depth = parse_num(key, v)?,
            "encoder_dim" => self.encoder_dim = parse_num(key, v)?,
            "llm_dim" => self.llm_dim = parse_num(key, v)?,
            "merge" => self.merge = parse_bool(key, v)?,
            "num_proposals" => self.num_proposals = parse_num(key, v)?,
            "score_threshold" => self.score_threshold = parse_num(key, v)?,
            "nms_threshold" => self.nms_threshold = parse_num(key, v)?,
            "max_keep" => self.max_keep = parse_num(key, v)?,
            "roi_bins" => self.roi_bins = parse_pair(key, v)?,
            "roi_samples" => self.roi_samples = parse_pair(key, v)?,
            "jitter" => self.jitter = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "iou_thresh" => self.iou_thresh = parse_num(key, v)?,
            "max_regions" => self.max_regions = parse_num(key, v)?,
            "max_images_per_category" => self.max_images_per_category = parse_num(key, v)?,
            "jobs" => self.jobs = parse_num(key, v)?,
            "data_dir" => self.data_dir = (!v.is_empty()).then(|| PathBuf::from(v)),
            other => return Err(ConfigError::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    /// Apply `key = value` lines. `#` starts a comment; blank lines are
    /// ignored.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let syntax = |message: String| ConfigError::Syntax { path: origin.into(), line: i + 1, message };
            let (k, v) = line.split_once('=').ok_or_else(|| syntax("expected key = value".into()))?;
            self.set(k, v).map_err(|e| syntax(e.to_string()))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        self.apply_text(&text, &path.display().to_string())
    }

    /// Apply `key=value` overrides, as given to `--set`.
    pub fn apply_overrides<'a>(&mut self, pairs: impl IntoIterator<Item = &'a str>) -> Result<(), ConfigError> {
        for p in pairs {
            let (k, v) = p
                .split_once('=')
                .ok_or_else(|| ConfigError::BadValue { key: p.into(), value: String::new(), message: "expected key=value".into() })?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let pair = |p: (usize, usize)| format!("{}x{}", p.0, p.1);
        Some(match key {
            "image_size" => self.image_size.to_string(),
            "patch_size" => self.patch_size.to_string(),
            "encoder_depth" => self.encoder_depth.to_string(),
            "encoder_dim" => self.encoder_dim.to_string(),
            "llm_dim" => self.llm_dim.to_string(),
            "merge" => self.merge.to_string(),
            "num_proposals" => self.num_proposals.to_string(),
            "score_threshold" => self.score_threshold.to_string(),
            "nms_threshold" => self.nms_threshold.to_string(),
            "max_keep" => self.max_keep.to_string(),
            "roi_bins" => pair(self.roi_bins),
            "roi_samples" => pair(self.roi_samples),
            "jitter" => self.jitter.to_string(),
            "seed" => self.seed.to_string(),
            "iou_thresh" => self.iou_thresh.to_string(),
            "max_regions" => self.max_regions.to_string(),
            "max_images_per_category" => self.max_images_per_category.to_string(),
            "jobs" => self.jobs.to_string(),
            "data_dir" => self.data_dir.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            _ => return None,
        })
    }

    /// Every key in declaration order; reading it back reproduces `self`.
    pub fn to_text(&self) -> String {
        KEYS.iter().map(|k| format!("{k} = {}\n", self.get(k).unwrap_or_default())).collect()
    }

    pub fn snapshot(&self) -> Vec<(String, String)> {
        KEYS.iter().map(|k| (k.to_string(), self.get(k).unwrap_or_default())).collect()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return bad(format!("image_size {} is not a multiple of patch_size {}", self.image_size, self.patch_size));
        }
        if self.merge && (self.image_size / self.patch_size) % 2 != 0 {
            return bad(format!("merge needs an even patch grid, got {}", self.image_size / self.patch_size));
        }
        if self.encoder_depth < 4 {
            return bad(format!("encoder_depth {} is below 4", self.encoder_depth));
        }
        if self.encoder_dim == 0 || self.llm_dim == 0 {
            return bad("encoder_dim and llm_dim must be positive".into());
        }
        if self.roi_bins.0 == 0 || self.roi_bins.1 == 0 || self.roi_samples.0 == 0 || self.roi_samples.1 == 0 {
            return bad("roi_bins and roi_samples must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.iou_thresh) {
            return bad(format!("iou_thresh {} is outside [0, 1]", self.iou_thresh));
        }
        if !(self.jitter >= 0.0 && self.jitter.is_finite()) {
            return bad(format!("jitter {} must be finite and non-negative", self.jitter));
        }
        if self.jobs == 0 {
            return bad("jobs must be at least 1".into());
        }
        self.proposer().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.filter().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    pub fn proposer(&self) -> ProposerConfig {
        ProposerConfig {
            num_proposals: self.num_proposals,
            score_threshold: self.score_threshold,
            nms_threshold: self.nms_threshold,
            max_keep: self.max_keep,
        }
    }

    pub fn filter(&self) -> FilterConfig {
        FilterConfig { iou_threshold: self.iou_thresh, max_regions: self.max_regions }
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            image_size: (self.image_size, self.image_size),
            encoder: EncoderConfig {
                patch_size: self.patch_size,
                depth: self.encoder_depth,
                dim: self.encoder_dim,
                seed: 0,
            },
            merge: self.merge,
            proposer: self.proposer(),
            roi: RoiAlignConfig { bins: self.roi_bins, samples: self.roi_samples },
            jitter: self.jitter,
            llm_dim: self.llm_dim,
            seed: self.seed,
        }
    }
}
