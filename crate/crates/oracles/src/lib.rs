//! Slow, obviously-correct reference implementations.
//!
//! Nothing here depends on `regiontok-core`: boxes are plain `[x_min, y_min,
//! x_max, y_max]` arrays and grids are row-major `Vec<f64>` slices, so the
//! oracles cannot share a code path with the kernels they check.

/// Box in corner form `[x_min, y_min, x_max, y_max]`.
pub type Corners = [f64; 4];

fn area(b: &Corners) -> f64 {
    (b[2] - b[0]).max(0.0) * (b[3] - b[1]).max(0.0)
}

/// Intersection over union, 0 when the union is empty.
pub fn iou(a: &Corners, b: &Corners) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Greedy NMS by repeated arg-max selection, O(n²) per step.
///
/// Picks the highest-scoring remaining candidate (lowest index on ties),
/// keeps it when its IoU with all kept boxes is at most `threshold`, and
/// discards it otherwise. Returns kept indices in pick order.
pub fn greedy_nms(boxes: &[Corners], scores: &[f64], threshold: f64) -> Vec<usize> {
    assert_eq!(boxes.len(), scores.len());
    let mut remaining: Vec<bool> = vec![true; boxes.len()];
    let mut kept: Vec<usize> = Vec::new();
    loop {
        let mut best: Option<usize> = None;
        for i in 0..boxes.len() {
            if !remaining[i] {
                continue;
            }
            best = match best {
                None => Some(i),
                Some(j) if scores[i] > scores[j] => Some(i),
                other => other,
            };
        }
        let Some(i) = best else { break };
        remaining[i] = false;
        if kept.iter().all(|&k| iou(&boxes[k], &boxes[i]) <= threshold) {
            kept.push(i);
        }
    }
    kept
}

/// Bilinear read of a row-major `rows × cols × dim` grid at continuous
/// coordinates where cell `(r, c)` is centred on `(r + 0.5, c + 0.5)`.
/// Coordinates outside the centre lattice are clamped to the border.
pub fn bilinear_at(data: &[f64], rows: usize, cols: usize, dim: usize, y: f64, x: f64) -> Vec<f64> {
    let cell = |r: usize, c: usize, d: usize| data[(r * cols + c) * dim + d];
    let gy = (y - 0.5).clamp(0.0, (rows - 1) as f64);
    let gx = (x - 0.5).clamp(0.0, (cols - 1) as f64);
    let r0 = gy.floor() as usize;
    let c0 = gx.floor() as usize;
    let r1 = (r0 + 1).min(rows - 1);
    let c1 = (c0 + 1).min(cols - 1);
    let wy = gy - r0 as f64;
    let wx = gx - c0 as f64;
    (0..dim)
        .map(|d| {
            cell(r0, c0, d) * (1.0 - wy) * (1.0 - wx)
                + cell(r0, c1, d) * (1.0 - wy) * wx
                + cell(r1, c0, d) * wy * (1.0 - wx)
                + cell(r1, c1, d) * wy * wx
        })
        .collect()
}

/// Dense ROIAlign: every sample point of every bin is evaluated on its own
/// and averaged. Output is row-major `bins.0 × bins.1 × dim`.
pub fn dense_roi_align(
    data: &[f64],
    rows: usize,
    cols: usize,
    dim: usize,
    roi: &Corners,
    image_size: (usize, usize),
    bins: (usize, usize),
    samples: (usize, usize),
) -> Vec<f64> {
    let sy = rows as f64 / image_size.0 as f64;
    let sx = cols as f64 / image_size.1 as f64;
    let (y0, y1) = (roi[1] * sy, roi[3] * sy);
    let (x0, x1) = (roi[0] * sx, roi[2] * sx);
    let mut out = Vec::with_capacity(bins.0 * bins.1 * dim);
    for by in 0..bins.0 {
        for bx in 0..bins.1 {
            let mut points = Vec::new();
            for iy in 0..samples.0 {
                for ix in 0..samples.1 {
                    let fy = (by as f64 + (iy as f64 + 0.5) / samples.0 as f64) / bins.0 as f64;
                    let fx = (bx as f64 + (ix as f64 + 0.5) / samples.1 as f64) / bins.1 as f64;
                    points.push((y0 + fy * (y1 - y0), x0 + fx * (x1 - x0)));
                }
            }
            let mut acc = vec![0.0; dim];
            for (y, x) in &points {
                for (a, v) in acc.iter_mut().zip(bilinear_at(data, rows, cols, dim, *y, *x)) {
                    *a += v;
                }
            }
            out.extend(acc.into_iter().map(|a| a / points.len() as f64));
        }
    }
    out
}

/// Maximum one-to-one assignment size between predictions and ground truth
/// (pairs must reach IoU ≥ `threshold`), found by trying every assignment.
///
/// Exponential; intended for inputs of at most about 8 boxes per side.
pub fn exhaustive_max_matching(preds: &[Corners], gts: &[Corners], threshold: f64) -> usize {
    fn go(p: usize, preds: &[Corners], gts: &[Corners], t: f64, used: &mut Vec<bool>) -> usize {
        if p == preds.len() {
            return 0;
        }
        // prediction p left unassigned
        let mut best = go(p + 1, preds, gts, t, used);
        for g in 0..gts.len() {
            if !used[g] && iou(&preds[p], &gts[g]) >= t {
                used[g] = true;
                best = best.max(1 + go(p + 1, preds, gts, t, used));
                used[g] = false;
            }
        }
        best
    }
    let mut used = vec![false; gts.len()];
    go(0, preds, gts, threshold, &mut used)
}

/// Outcome of replaying score-ordered greedy matching by exhaustive search:
/// each prediction, in order, takes the best still-free GT (first index on
/// ties) whose IoU reaches the threshold.
pub fn replay_greedy_matching(preds: &[Corners], gts: &[Corners], threshold: f64) -> usize {
    let mut used = vec![false; gts.len()];
    let mut count = 0;
    for p in preds {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if used[g] {
                continue;
            }
            let v = iou(p, gt);
            if best.map_or(true, |(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        if let Some((g, v)) = best {
            if v >= threshold {
                used[g] = true;
                count += 1;
            }
        }
    }
    count
}

/// Minimal SplitMix64 stream for generating oracle fixtures without pulling
/// the library's generator into test inputs.
#[derive(Debug, Clone)]
pub struct SplitMix64(pub u64);

impl SplitMix64 {
    pub fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in `[0, 1)`.
    pub fn unit(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.unit()
    }

    pub fn below(&mut self, n: usize) -> usize {
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Random box inside `[0, extent]²` with sides at least `min_side`.
    pub fn boxed(&mut self, extent: f64, min_side: f64) -> Corners {
        let w = self.range(min_side, extent / 2.0);
        let h = self.range(min_side, extent / 2.0);
        let x = self.range(0.0, extent - w);
        let y = self.range(0.0, extent - h);
        [x, y, x + w, y + h]
    }
}
