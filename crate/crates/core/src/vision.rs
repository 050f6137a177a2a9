//! Toy image encoder, feature pyramid, 2×2 token merge and projection.
//!
//! The encoder carries no learned weights: every matrix is drawn from a
//! [`DetRng`](crate::rng::DetRng) stream keyed by the config seed, so equal
//! inputs give bitwise-equal outputs. Only the geometry matters here: patch
//! grid shape, per-layer outputs, pyramid scales and merged token counts.

use std::io::{self, Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{DetRng, GENERATOR_ID};

#[derive(Debug, Error)]
pub enum VisionError {
    #[error("patch mismatch: {height}x{width} image is not divisible by patch size {patch}")]
    PatchMismatch { height: usize, width: usize, patch: usize },
    #[error("encoder depth {0} is below the minimum of 4")]
    TooShallow(usize),
    #[error("grid not mergeable: {rows}x{cols} has an odd side")]
    NotMergeable { rows: usize, cols: usize },
    #[error("cannot unmerge: token width {0} is not a multiple of 4")]
    NotUnmergeable(usize),
    #[error("invalid pyramid scale {0}: scales must be positive and strictly decreasing")]
    BadScale(f64),
    #[error("got {grids} grids for {scales} scales")]
    ScaleCount { grids: usize, scales: usize },
    #[error("data length {got} does not match shape (expected {expected})")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("input width {got} does not match projector input width {expected}")]
    WidthMismatch { expected: usize, got: usize },
    #[error("bad grid container: {0}")]
    Container(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Row-major `height × width × channels` image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageArray {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl ImageArray {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self, VisionError> {
        let expected = height * width * channels;
        if data.len() != expected {
            return Err(VisionError::ShapeMismatch { expected, got: data.len() });
        }
        Ok(Self { height, width, channels, data })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self { height, width, channels, data: vec![value; height * width * channels] }
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let o = (y * self.width + x) * self.channels;
        &self.data[o..o + self.channels]
    }
}

/// Row-major `rows × cols × dim` grid of token vectors. Also used as a flat
/// `N × dim` token sequence with `cols == 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenGrid {
    pub rows: usize,
    pub cols: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl TokenGrid {
    pub fn new(rows: usize, cols: usize, dim: usize, data: Vec<f64>) -> Result<Self, VisionError> {
        let expected = rows * cols * dim;
        if data.len() != expected {
            return Err(VisionError::ShapeMismatch { expected, got: data.len() });
        }
        Ok(Self { rows, cols, dim, data })
    }

    pub fn zeros(rows: usize, cols: usize, dim: usize) -> Self {
        Self { rows, cols, dim, data: vec![0.0; rows * cols * dim] }
    }

    pub fn filled(rows: usize, cols: usize, dim: usize, value: f64) -> Self {
        Self { rows, cols, dim, data: vec![value; rows * cols * dim] }
    }

    /// Flat sequence of `tokens.len()` tokens, each of width `dim`.
    pub fn from_tokens(tokens: &[Vec<f64>], dim: usize) -> Result<Self, VisionError> {
        let mut data = Vec::with_capacity(tokens.len() * dim);
        for t in tokens {
            if t.len() != dim {
                return Err(VisionError::WidthMismatch { expected: dim, got: t.len() });
            }
            data.extend_from_slice(t);
        }
        Ok(Self { rows: tokens.len(), cols: 1, dim, data })
    }

    pub fn token_count(&self) -> usize {
        self.rows * self.cols
    }

    pub fn token(&self, r: usize, c: usize) -> &[f64] {
        let o = (r * self.cols + c) * self.dim;
        &self.data[o..o + self.dim]
    }

    pub fn token_mut(&mut self, r: usize, c: usize) -> &mut [f64] {
        let o = (r * self.cols + c) * self.dim;
        &mut self.data[o..o + self.dim]
    }

    /// Token by flat row-major index.
    pub fn nth(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Bilinear read at continuous coordinates `(y, x)` in grid-cell units,
    /// added into `out`. Cell `(r, c)` is centred at `(r + 0.5, c + 0.5)`;
    /// reads beyond the outermost centres clamp to the border. Uses the
    /// separable lerp form, which reproduces constant grids exactly.
    pub fn sample_add(&self, y: f64, x: f64, out: &mut [f64]) {
        let gy = (y - 0.5).clamp(0.0, (self.rows - 1) as f64);
        let gx = (x - 0.5).clamp(0.0, (self.cols - 1) as f64);
        let r0 = gy.floor() as usize;
        let c0 = gx.floor() as usize;
        let r1 = (r0 + 1).min(self.rows - 1);
        let c1 = (c0 + 1).min(self.cols - 1);
        let wy = gy - r0 as f64;
        let wx = gx - c0 as f64;
        let (t00, t01, t10, t11) = (self.token(r0, c0), self.token(r0, c1), self.token(r1, c0), self.token(r1, c1));
        for d in 0..self.dim {
            let top = t00[d] + wx * (t01[d] - t00[d]);
            let bottom = t10[d] + wx * (t11[d] - t10[d]);
            out[d] += top + wy * (bottom - top);
        }
    }

    /// Resample to `out_rows × out_cols` with half-pixel-centred bilinear
    /// interpolation.
    pub fn resample(&self, out_rows: usize, out_cols: usize) -> TokenGrid {
        let mut out = TokenGrid::zeros(out_rows, out_cols, self.dim);
        let ry = self.rows as f64 / out_rows as f64;
        let rx = self.cols as f64 / out_cols as f64;
        let mut buf = vec![0.0; self.dim];
        for r in 0..out_rows {
            for c in 0..out_cols {
                buf.iter_mut().for_each(|v| *v = 0.0);
                self.sample_add((r as f64 + 0.5) * ry, (c as f64 + 0.5) * rx, &mut buf);
                out.token_mut(r, c).copy_from_slice(&buf);
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub patch_size: usize,
    pub depth: usize,
    pub dim: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { patch_size: 14, depth: 6, dim: 32, seed: 0 }
    }
}

/// Patchify and run `cfg.depth` mixing layers; returns the grid after each
/// layer (index 0 is the first layer's output).
///
/// Layer `l` computes, per token `t` with 4-neighbourhood mean `m_t`:
/// `x'_t = 0.5 x_t + 0.5 m_t + tanh(W_l x_t + b_l)`.
pub fn toy_encode(image: &ImageArray, cfg: &EncoderConfig) -> Result<Vec<TokenGrid>, VisionError> {
    let p = cfg.patch_size;
    if p == 0 || image.height % p != 0 || image.width % p != 0 {
        return Err(VisionError::PatchMismatch { height: image.height, width: image.width, patch: p });
    }
    if cfg.depth < 4 {
        return Err(VisionError::TooShallow(cfg.depth));
    }
    let rows = image.height / p;
    let cols = image.width / p;
    let patch_len = p * p * image.channels;
    let dim = cfg.dim;

    let mut rng = DetRng::scoped(cfg.seed, "vision/patch_embed");
    let w_embed = rng.weights(dim * patch_len, 1.0 / (patch_len as f64).sqrt());
    let b_embed = rng.weights(dim, 0.1);

    let mut x = TokenGrid::zeros(rows, cols, dim);
    let mut patch = vec![0.0; patch_len];
    for r in 0..rows {
        for c in 0..cols {
            let mut k = 0;
            for py in 0..p {
                for px in 0..p {
                    for v in image.pixel(r * p + py, c * p + px) {
                        patch[k] = *v;
                        k += 1;
                    }
                }
            }
            let tok = x.token_mut(r, c);
            for (d, t) in tok.iter_mut().enumerate() {
                let row = &w_embed[d * patch_len..(d + 1) * patch_len];
                *t = b_embed[d] + row.iter().zip(&patch).map(|(w, v)| w * v).sum::<f64>();
            }
        }
    }

    let mut layers = Vec::with_capacity(cfg.depth);
    for l in 0..cfg.depth {
        let mut rng = DetRng::scoped(cfg.seed, &format!("vision/layer{l}"));
        let w = rng.weights(dim * dim, 1.0 / (dim as f64).sqrt());
        let b = rng.weights(dim, 0.1);
        let mut next = TokenGrid::zeros(rows, cols, dim);
        let mut mean = vec![0.0; dim];
        for r in 0..rows {
            for c in 0..cols {
                mean.iter_mut().for_each(|v| *v = 0.0);
                let mut n = 0.0;
                let neighbours = [
                    (r.wrapping_sub(1), c),
                    (r + 1, c),
                    (r, c.wrapping_sub(1)),
                    (r, c + 1),
                ];
                for (nr, nc) in neighbours {
                    if nr < rows && nc < cols {
                        for (m, v) in mean.iter_mut().zip(x.token(nr, nc)) {
                            *m += v;
                        }
                        n += 1.0;
                    }
                }
                let cur = x.token(r, c);
                let out = next.token_mut(r, c);
                for d in 0..dim {
                    let row = &w[d * dim..(d + 1) * dim];
                    let act = (b[d] + row.iter().zip(cur).map(|(a, v)| a * v).sum::<f64>()).tanh();
                    out[d] = 0.5 * cur[d] + 0.5 * mean[d] / n + act;
                }
            }
        }
        layers.push(next.clone());
        x = next;
    }
    Ok(layers)
}

/// Proposer pyramid scales, applied to the last four encoder layers.
pub const PROPOSER_SCALES: [f64; 4] = [2.0, 1.0, 0.5, 0.25];
/// Region-encoder pyramid scales, applied to the last three encoder layers.
pub const ENCODER_SCALES: [f64; 3] = [1.0, 0.5, 0.25];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PyramidLevel {
    pub scale: f64,
    pub grid: TokenGrid,
}

/// Levels ordered from highest to lowest spatial resolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeaturePyramid {
    pub levels: Vec<PyramidLevel>,
}

/// Rescale `grids[i]` by `scales[i]`. A scale of exactly 1 copies the grid.
pub fn build_pyramid(grids: &[TokenGrid], scales: &[f64]) -> Result<FeaturePyramid, VisionError> {
    if grids.len() != scales.len() {
        return Err(VisionError::ScaleCount { grids: grids.len(), scales: scales.len() });
    }
    for (i, &s) in scales.iter().enumerate() {
        if !(s > 0.0 && s.is_finite()) || (i > 0 && s >= scales[i - 1]) {
            return Err(VisionError::BadScale(s));
        }
    }
    let levels = grids
        .iter()
        .zip(scales)
        .map(|(g, &s)| {
            let out_rows = ((g.rows as f64 * s).round() as usize).max(1);
            let out_cols = ((g.cols as f64 * s).round() as usize).max(1);
            let grid = if out_rows == g.rows && out_cols == g.cols {
                g.clone()
            } else {
                g.resample(out_rows, out_cols)
            };
            PyramidLevel { scale: s, grid }
        })
        .collect();
    Ok(FeaturePyramid { levels })
}

/// Pyramid over the last `scales.len()` layers of an encoder output.
pub fn pyramid_from_layers(layers: &[TokenGrid], scales: &[f64]) -> Result<FeaturePyramid, VisionError> {
    if layers.len() < scales.len() {
        return Err(VisionError::ScaleCount { grids: layers.len(), scales: scales.len() });
    }
    build_pyramid(&layers[layers.len() - scales.len()..], scales)
}

/// Position of each 2×2 block member in the concatenated output token:
/// top-left, top-right, bottom-left, bottom-right.
pub const MERGE_ORDER: [(usize, usize); 4] = [(0, 0), (0, 1), (1, 0), (1, 1)];

/// Concatenate every 2×2 block of tokens into one token of width `4 * dim`.
pub fn merge_2x2(grid: &TokenGrid) -> Result<TokenGrid, VisionError> {
    merge_2x2_ordered(grid, &MERGE_ORDER)
}

/// [`merge_2x2`] with an explicit block order; exposed so self-checks can
/// exercise a corrupted order.
pub fn merge_2x2_ordered(grid: &TokenGrid, order: &[(usize, usize); 4]) -> Result<TokenGrid, VisionError> {
    if grid.rows % 2 != 0 || grid.cols % 2 != 0 {
        return Err(VisionError::NotMergeable { rows: grid.rows, cols: grid.cols });
    }
    let (rows, cols, d) = (grid.rows / 2, grid.cols / 2, grid.dim);
    let mut out = TokenGrid::zeros(rows, cols, 4 * d);
    for r in 0..rows {
        for c in 0..cols {
            let tok = out.token_mut(r, c);
            for (k, (dr, dc)) in order.iter().enumerate() {
                tok[k * d..(k + 1) * d].copy_from_slice(grid.token(2 * r + dr, 2 * c + dc));
            }
        }
    }
    Ok(out)
}

/// Inverse of [`merge_2x2`].
pub fn unmerge_2x2(grid: &TokenGrid) -> Result<TokenGrid, VisionError> {
    if grid.dim % 4 != 0 {
        return Err(VisionError::NotUnmergeable(grid.dim));
    }
    let d = grid.dim / 4;
    let mut out = TokenGrid::zeros(grid.rows * 2, grid.cols * 2, d);
    for r in 0..grid.rows {
        for c in 0..grid.cols {
            let tok = grid.token(r, c);
            for (k, (dr, dc)) in MERGE_ORDER.iter().enumerate() {
                out.token_mut(2 * r + dr, 2 * c + dc).copy_from_slice(&tok[k * d..(k + 1) * d]);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    /// tanh-approximated GELU.
    Gelu,
    /// No nonlinearity; makes the projector a single affine map.
    Identity,
}

/// Two-layer MLP `out = W2 act(W1 x + b1) + b2` with seeded weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Projector {
    pub in_dim: usize,
    pub hidden_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
}

impl Projector {
    pub fn new(in_dim: usize, out_dim: usize, seed: u64) -> Self {
        Self::with_options(in_dim, out_dim, out_dim, Activation::Gelu, false, seed)
    }

    pub fn with_options(
        in_dim: usize,
        hidden_dim: usize,
        out_dim: usize,
        activation: Activation,
        zero_bias: bool,
        seed: u64,
    ) -> Self {
        assert!(out_dim >= 1 && hidden_dim >= 1, "projector widths must be positive");
        let mut rng = DetRng::scoped(seed, "vision/projector");
        let w1 = rng.weights(hidden_dim * in_dim, 1.0 / (in_dim.max(1) as f64).sqrt());
        let b1 = rng.weights(hidden_dim, 0.1);
        let w2 = rng.weights(out_dim * hidden_dim, 1.0 / (hidden_dim as f64).sqrt());
        let b2 = rng.weights(out_dim, 0.1);
        let (b1, b2) = if zero_bias {
            (vec![0.0; hidden_dim], vec![0.0; out_dim])
        } else {
            (b1, b2)
        };
        Self { in_dim, hidden_dim, out_dim, activation, w1, b1, w2, b2 }
    }

    fn act(&self, v: f64) -> f64 {
        match self.activation {
            Activation::Identity => v,
            Activation::Gelu => {
                let c = (2.0 / std::f64::consts::PI).sqrt();
                0.5 * v * (1.0 + (c * (v + 0.044715 * v * v * v)).tanh())
            }
        }
    }

    pub fn project_token(&self, x: &[f64]) -> Vec<f64> {
        let h: Vec<f64> = (0..self.hidden_dim)
            .map(|j| {
                let row = &self.w1[j * self.in_dim..(j + 1) * self.in_dim];
                self.act(self.b1[j] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
            })
            .collect();
        (0..self.out_dim)
            .map(|k| {
                let row = &self.w2[k * self.hidden_dim..(k + 1) * self.hidden_dim];
                self.b2[k] + row.iter().zip(&h).map(|(w, v)| w * v).sum::<f64>()
            })
            .collect()
    }

    /// Project every token; output keeps the grid shape with width `out_dim`.
    pub fn project(&self, tokens: &TokenGrid) -> Result<TokenGrid, VisionError> {
        if tokens.dim != self.in_dim {
            return Err(VisionError::WidthMismatch { expected: self.in_dim, got: tokens.dim });
        }
        let mut data = Vec::with_capacity(tokens.token_count() * self.out_dim);
        for i in 0..tokens.token_count() {
            data.extend(self.project_token(tokens.nth(i)));
        }
        TokenGrid::new(tokens.rows, tokens.cols, self.out_dim, data)
    }
}

/// Project `tokens` to width `out_dim` with a default projector for `seed`.
pub fn project(tokens: &TokenGrid, out_dim: usize, seed: u64) -> Result<TokenGrid, VisionError> {
    Projector::new(tokens.dim, out_dim, seed).project(tokens)
}

/// Magic bytes of the binary grid container.
pub const GRID_MAGIC: &[u8; 4] = b"RTKG";
pub const GRID_FORMAT_VERSION: u32 = 1;

/// Write `grid` as: magic `RTKG`, then little-endian u32 fields
/// `version, rows, cols, dim, generator_len`, the generator id (UTF-8), and
/// `rows*cols*dim` little-endian IEEE-754 doubles in row-major order.
pub fn write_grid<W: Write>(grid: &TokenGrid, mut w: W) -> Result<(), VisionError> {
    w.write_all(GRID_MAGIC)?;
    let gen = GENERATOR_ID.as_bytes();
    for v in [GRID_FORMAT_VERSION, grid.rows as u32, grid.cols as u32, grid.dim as u32, gen.len() as u32] {
        w.write_all(&v.to_le_bytes())?;
    }
    w.write_all(gen)?;
    for v in &grid.data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Read a container written by [`write_grid`]; returns the grid and the
/// recorded generator id.
pub fn read_grid<R: Read>(mut r: R) -> Result<(TokenGrid, String), VisionError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != GRID_MAGIC {
        return Err(VisionError::Container(format!("bad magic {magic:?}")));
    }
    let mut u32s = [0u32; 5];
    for v in u32s.iter_mut() {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)?;
        *v = u32::from_le_bytes(b);
    }
    let [version, rows, cols, dim, gen_len] = u32s;
    if version != GRID_FORMAT_VERSION {
        return Err(VisionError::Container(format!("unsupported version {version}")));
    }
    let mut gen = vec![0u8; gen_len as usize];
    r.read_exact(&mut gen)?;
    let gen = String::from_utf8(gen).map_err(|e| VisionError::Container(e.to_string()))?;
    let n = rows as usize * cols as usize * dim as usize;
    let mut data = Vec::with_capacity(n);
    let mut b = [0u8; 8];
    for _ in 0..n {
        r.read_exact(&mut b)?;
        data.push(f64::from_le_bytes(b));
    }
    Ok((TokenGrid::new(rows as usize, cols as usize, dim as usize, data)?, gen))
}

/// JSON debug form of a grid, tagged with the generator id.
pub fn grid_to_debug_json(grid: &TokenGrid) -> serde_json::Value {
    serde_json::json!({
        "generator": GENERATOR_ID,
        "rows": grid.rows,
        "cols": grid.cols,
        "dim": grid.dim,
        "data": grid.data,
    })
}
