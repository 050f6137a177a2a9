//! Seeded oracle suites behind `regiontok selftest`.
//!
//! The corruption hooks swap in a deliberately wrong variant of one kernel
//! so the suites can be shown to catch it.

use std::time::Instant;

use regiontok_core::eval::{ar_thresholds, greedy_match_with, rec_accuracy_with, IouRule, Matcher};
use regiontok_core::fixtures::{iou_070, prediction_set, rec_boundary, three_of_five};
use regiontok_core::geometry::{iou, nms, BoundingBox, ScoredBox};
use regiontok_core::grammar::{contains_markup, parse, serialize, GroundedResponse, GroundedSpan, Segment};
use regiontok_core::region::roi_align_level;
use regiontok_core::vision::{merge_2x2, merge_2x2_ordered, unmerge_2x2, TokenGrid};
use regiontok_oracles::{self as oracle, SplitMix64};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Corruption {
    /// Merge 2×2 blocks column-major instead of row-major.
    MergeOrder,
    /// Compare IoU with `>` instead of `>=` in recall and REC accuracy.
    IouBoundary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub cases: usize,
    /// The first broken invariant, if any.
    pub failure: Option<String>,
    pub seconds: f64,
}

impl SuiteResult {
    pub fn line(&self) -> String {
        match &self.failure {
            None => format!("PASS {} ({} cases, {:.2}s)", self.name, self.cases, self.seconds),
            Some(f) => format!("FAIL {}: {f}", self.name),
        }
    }
}

type Outcome = Result<usize, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn to_box(c: [f64; 4]) -> BoundingBox {
    BoundingBox::try_from(c).expect("generated boxes are valid")
}

fn nms_suite() -> Outcome {
    let mut cases = 0;
    for seed in 0..100u64 {
        let mut rng = SplitMix64(seed);
        let n = rng.below(201);
        let boxes: Vec<[f64; 4]> = (0..n).map(|_| rng.boxed(200.0, 2.0)).collect();
        // coarse scores force ties
        let scores: Vec<f64> = (0..n).map(|_| rng.below(20) as f64 / 20.0).collect();
        let cands: Vec<ScoredBox> =
            boxes.iter().zip(&scores).map(|(b, &s)| ScoredBox { bbox: to_box(*b), score: s }).collect();
        for t in 1..=9 {
            let t = t as f64 / 10.0;
            let got = nms(&cands, t);
            let want = oracle::greedy_nms(&boxes, &scores, t);
            check(got == want, || format!("nms index set differs from the brute-force oracle (seed {seed}, t {t})"))?;
            for (i, &a) in got.iter().enumerate() {
                for &b in &got[i + 1..] {
                    check(iou(&cands[a].bbox, &cands[b].bbox) <= t, || {
                        format!("kept boxes {a} and {b} overlap above {t} (seed {seed})")
                    })?;
                }
            }
            cases += 1;
        }
    }
    Ok(cases)
}

fn iou_suite() -> Outcome {
    let fixtures: [([f64; 4], [f64; 4], f64); 10] = [
        ([0., 0., 10., 10.], [0., 0., 10., 10.], 1.0),
        ([0., 0., 1., 1.], [5., 5., 6., 6.], 0.0),
        ([0., 0., 2., 2.], [1., 1., 3., 3.], 1.0 / 7.0),
        ([0., 0., 10., 10.], [1., 1., 11., 11.], 81.0 / 119.0),
        ([0., 0., 2., 1.], [0., 0., 1., 1.], 0.5),
        ([0., 0., 4., 4.], [1., 1., 2., 2.], 1.0 / 16.0),
        ([0., 0., 2., 2.], [1., 0., 3., 2.], 1.0 / 3.0),
        ([0., 0., 1., 1.], [1., 0., 2., 1.], 0.0),
        ([0., 0., 3., 1.], [1., 0., 4., 1.], 0.5),
        ([0., 0., 0., 0.], [0., 0., 0., 0.], 0.0),
    ];
    for (i, (a, b, want)) in fixtures.iter().enumerate() {
        let got = iou(&to_box(*a), &to_box(*b));
        check(got == *want, || format!("iou fixture {i}: {got} != {want}"))?;
        check(got == iou(&to_box(*b), &to_box(*a)), || format!("iou fixture {i} is not symmetric"))?;
    }
    Ok(fixtures.len())
}

fn roi_align_suite() -> Outcome {
    for seed in 0..100u64 {
        let mut rng = SplitMix64(1000 + seed);
        let rows = 1 + rng.below(32);
        let cols = 1 + rng.below(32);
        let dim = 1 + rng.below(4);
        let data: Vec<f64> = (0..rows * cols * dim).map(|_| rng.range(-2.0, 2.0)).collect();
        let image = (14 * rows, 14 * cols);
        let w = rng.range(1.0, image.1 as f64);
        let h = rng.range(1.0, image.0 as f64);
        let x = rng.range(0.0, image.1 as f64 - w);
        let y = rng.range(0.0, image.0 as f64 - h);
        let roi = [x, y, x + w, y + h];
        let bins = (1 + rng.below(7), 1 + rng.below(7));
        let samples = (1 + rng.below(3), 1 + rng.below(3));
        let grid = TokenGrid::new(rows, cols, dim, data.clone()).map_err(|e| e.to_string())?;
        let got = roi_align_level(&grid, &to_box(roi), image, bins, samples).map_err(|e| e.to_string())?;
        let want = oracle::dense_roi_align(&data, rows, cols, dim, &roi, image, bins, samples);
        let worst = got.data.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        check(got.data.len() == want.len() && worst <= 1e-9, || {
            format!("ROIAlign deviates from dense sampling by {worst} (seed {seed})")
        })?;
    }
    let constant = TokenGrid::filled(13, 9, 2, -3.25);
    let out = roi_align_level(&constant, &to_box([3.3, 1.7, 100.9, 170.2]), (182, 126), (7, 7), (2, 2))
        .map_err(|e| e.to_string())?;
    check(out.data.iter().all(|&v| v == -3.25), || "constant map does not pool to itself".into())?;
    Ok(101)
}

fn merge_suite(corrupt: bool) -> Outcome {
    let (rows, cols) = (6, 8);
    let data: Vec<f64> = (0..rows * cols).map(|i| i as f64).collect();
    let grid = TokenGrid::new(rows, cols, 1, data).map_err(|e| e.to_string())?;
    let merged = if corrupt {
        merge_2x2_ordered(&grid, &[(0, 0), (1, 0), (0, 1), (1, 1)])
    } else {
        merge_2x2(&grid)
    }
    .map_err(|e| e.to_string())?;
    check((merged.rows, merged.cols, merged.dim) == (3, 4, 4), || "merge must halve rows and cols, 4x dim".into())?;
    for r in 0..3 {
        for c in 0..4 {
            let v = |y: usize, x: usize| (y * cols + x) as f64;
            let want = [v(2 * r, 2 * c), v(2 * r, 2 * c + 1), v(2 * r + 1, 2 * c), v(2 * r + 1, 2 * c + 1)];
            check(merged.token(r, c) == want, || {
                format!("merge order: token ({r}, {c}) is not the row-major concatenation TL, TR, BL, BR")
            })?;
        }
    }
    check(unmerge_2x2(&merged).map_err(|e| e.to_string())? == grid, || "merge order: unmerge(merge(g)) != g".into())?;
    Ok(12)
}

fn random_text(rng: &mut SplitMix64) -> String {
    const ALPHABET: &[u8] = b"abcdefghijklmnopqrstuvwxyzABC0123 ,.!?'()-<>/";
    loop {
        let len = rng.below(25);
        let s: String = (0..len).map(|_| ALPHABET[rng.below(ALPHABET.len())] as char).collect();
        if !contains_markup(&s) {
            return s;
        }
    }
}

fn grammar_suite() -> Outcome {
    let mut rng = SplitMix64(0x6772_616d);
    for case in 0..1000 {
        let n = 1 + rng.below(100);
        let segs: Vec<Segment> = (0..rng.below(8))
            .map(|_| {
                if rng.below(2) == 0 {
                    Segment::Text(random_text(&mut rng))
                } else {
                    let referents = (0..1 + rng.below(3)).map(|_| 1 + rng.below(n)).collect();
                    Segment::Span(GroundedSpan { phrase: random_text(&mut rng), referents })
                }
            })
            .collect();
        let r = GroundedResponse::from_segments(segs);
        let text = serialize(&r).map_err(|e| e.to_string())?;
        let back = parse(&text, &n).map_err(|e| format!("case {case}: canonical text rejected: {e}"))?;
        check(back == r, || format!("case {case}: parse(serialize(r)) != r"))?;
    }
    let example = "<p>A dog</p> <roi><r4></roi> is jumping to catch <p>a frisbee</p> <roi><r7></roi> over <p>a fallen man</p> <roi><r1></roi>.";
    let r = parse(example, &7usize).map_err(|e| e.to_string())?;
    let refs: Vec<Vec<usize>> = r.spans().map(|s| s.referents.clone()).collect();
    check(refs == vec![vec![4], vec![7], vec![1]], || format!("worked example referents {refs:?}"))?;
    Ok(1001)
}

fn recall_suite(rule: IouRule) -> Outcome {
    let matcher = Matcher { rule, ..Matcher::default() };
    let mut cases = 0;
    for seed in 0..500u64 {
        let mut rng = SplitMix64(seed);
        let np = 1 + rng.below(6);
        let ng = 1 + rng.below(6);
        let p: Vec<[f64; 4]> = (0..np).map(|_| rng.boxed(100.0, 5.0)).collect();
        let g: Vec<[f64; 4]> = (0..ng).map(|_| rng.boxed(100.0, 5.0)).collect();
        let preds: Vec<ScoredBox> = p
            .iter()
            .enumerate()
            .map(|(i, b)| ScoredBox { bbox: to_box(*b), score: 1.0 - i as f64 / 64.0 })
            .collect();
        let gts: Vec<BoundingBox> = g.iter().map(|b| to_box(*b)).collect();
        let item = regiontok_core::eval::GroundingItem { image_id: seed, query: "q".into(), category_id: None, gt_boxes: gts.clone() };
        for t in ar_thresholds() {
            let want = oracle::exhaustive_max_matching(&p, &g, t);
            let got = greedy_match_with(&preds, &gts, t, rule);
            check(got == want, || format!("greedy matching {got} != exhaustive {want} (seed {seed}, t {t})"))?;
            check(matcher.recall_as_many(&item, &preds, t) <= matcher.recall_any(&item, &preds, t), || {
                format!("recall_as_many > recall_any (seed {seed}, t {t})")
            })?;
            cases += 1;
        }
    }
    let (item, rec) = three_of_five();
    let set = prediction_set(std::slice::from_ref(&rec));
    let r = matcher.recall_as_many(&item, set.for_item(&item), 0.5);
    check(r == 0.6, || format!("3-of-5 worked example: as-many recall {r} != 0.6"))?;

    let (item, rec) = iou_070();
    let set = prediction_set(std::slice::from_ref(&rec));
    let per_t: Vec<f64> = ar_thresholds().iter().map(|&t| matcher.recall_as_many(&item, set.for_item(&item), t)).collect();
    let ar = per_t.iter().sum::<f64>() / per_t.len() as f64;
    check(ar == 0.5 && per_t[0] == 1.0 && per_t[5] == 0.0, || format!("IoU-0.70 fixture: AR {ar}, per threshold {per_t:?}"))?;
    Ok(cases + 2)
}

fn rec_boundary_suite(rule: IouRule) -> Outcome {
    let matcher = Matcher { rule, ..Matcher::default() };
    let (item, rec) = rec_boundary();
    let set = prediction_set(std::slice::from_ref(&rec));
    let acc = rec_accuracy_with(std::slice::from_ref(&item), &set, rule).map_err(|e| e.to_string())?;
    check(acc == 1.0, || format!("REC boundary case: a top-1 box at IoU exactly 0.5 must count as correct (accuracy {acc})"))?;
    let r = matcher.recall_any(&item, set.for_item(&item), 0.5);
    check(r == 1.0, || format!("REC boundary case: recall at t=0.5 is {r}, expected 1"))?;
    Ok(2)
}

/// Run every suite; the corruption, if any, is applied where it belongs.
pub fn run(corrupt: Option<Corruption>) -> Vec<SuiteResult> {
    let rule = if corrupt == Some(Corruption::IouBoundary) { IouRule::Exclusive } else { IouRule::Inclusive };
    let merge_corrupt = corrupt == Some(Corruption::MergeOrder);
    let suites: Vec<(&'static str, Box<dyn Fn() -> Outcome>)> = vec![
        ("iou-fixtures", Box::new(iou_suite)),
        ("nms-oracle", Box::new(nms_suite)),
        ("roi-align-oracle", Box::new(roi_align_suite)),
        ("merge-order", Box::new(move || merge_suite(merge_corrupt))),
        ("grammar-roundtrip", Box::new(grammar_suite)),
        ("recall-enumeration", Box::new(move || recall_suite(rule))),
        ("rec-boundary", Box::new(move || rec_boundary_suite(rule))),
    ];
    suites
        .into_iter()
        .map(|(name, f)| {
            let start = Instant::now();
            let outcome = f();
            let seconds = start.elapsed().as_secs_f64();
            match outcome {
                Ok(cases) => SuiteResult { name, cases, failure: None, seconds },
                Err(e) => SuiteResult { name, cases: 0, failure: Some(e), seconds },
            }
        })
        .collect()
}
