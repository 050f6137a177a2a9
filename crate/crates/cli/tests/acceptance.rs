//! Acceptance criteria, one PASS/FAIL line each. Runs without the libtest
//! harness so the lines always reach the output.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use regiontok_core::eval::{
    ar_thresholds, compute_report, greedy_match, recall_any, recall_as_many, EvalConfig, GroundingItem, Protocol,
};
use regiontok_core::fixtures::{iou_070, perfect_predictions, prediction_set, three_of_five, two_clusters, IMAGE_FIXTURES};
use regiontok_core::geometry::{iou, nms, BoundingBox, ScoredBox};
use regiontok_core::grammar::{contains_markup, parse, serialize, GrammarError, GroundedResponse, GroundedSpan, Segment};
use regiontok_core::region::roi_align_level;
use regiontok_core::vision::TokenGrid;
use regiontok_oracles::{self as oracle, SplitMix64};
use serde_json::Value;

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_regiontok"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn run_ok(args: &[&str]) -> Result<String, String> {
    let out = run(args);
    ensure!(
        out.status.success(),
        "`regiontok {}` exited {:?}: {}",
        args.join(" "),
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn s(p: &Path) -> &str {
    p.to_str().expect("temp paths are UTF-8")
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

fn json(p: &Path) -> Value {
    serde_json::from_slice(&read(p)).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

fn bx(c: [f64; 4]) -> BoundingBox {
    BoundingBox::try_from(c).unwrap()
}

// 1 ---------------------------------------------------------------------

fn pipeline_run(dir: &Path, args: &[&str]) -> Result<(Value, Duration), String> {
    let mut full = vec!["pipeline", "--out", s(dir)];
    full.extend_from_slice(args);
    let start = Instant::now();
    run_ok(&full)?;
    Ok((json(&dir.join("summary.json")), start.elapsed()))
}

fn token_budget() -> Check {
    let tmp = tempfile::tempdir().unwrap();
    let mut slowest = Duration::ZERO;
    let mut full_budget = 0;
    let png = tmp.path().join("photo.png");
    image::RgbImage::from_fn(300, 200, |x, y| image::Rgb([(x % 256) as u8, (y % 256) as u8, 77])).save(&png).unwrap();

    let mut cases: Vec<(String, Vec<String>)> =
        IMAGE_FIXTURES.iter().map(|f| (f.to_string(), vec!["--fixture".to_string(), f.to_string()])).collect();
    cases.push((
        "photo.png".into(),
        ["--image", s(&png), "--gt-box", "10,10,120,90", "--gt-box", "150,40,290,190", "--user-box", "0,0,300,200"]
            .map(String::from)
            .to_vec(),
    ));
    for (i, (name, args)) in cases.iter().enumerate() {
        let dir = tmp.path().join(format!("run{i}"));
        let args: Vec<&str> = args.iter().map(String::as_str).collect();
        let (sum, took) = pipeline_run(&dir, &args)?;
        slowest = slowest.max(took);
        let (img, reg, vis) = (sum["image_tokens"].as_u64().unwrap(), sum["region_tokens"].as_u64().unwrap(), sum["visual_tokens"].as_u64().unwrap());
        ensure!(img == 256, "{name}: {img} image tokens");
        ensure!(reg <= 100, "{name}: {reg} region tokens");
        ensure!(vis == img + reg && vis <= 356, "{name}: {vis} visual tokens");
        if reg == 100 {
            ensure!(vis == 356, "{name}: full registry but {vis} visual tokens");
            full_budget += 1;
        }
        ensure!(took < Duration::from_secs(5), "{name}: {took:?}");
    }
    ensure!(full_budget > 0, "no fixture filled the region budget");

    let (sum, took) = pipeline_run(&tmp.path().join("nomerge"), &["--fixture", "three-boxes", "--no-merge"])?;
    ensure!(sum["image_tokens"] == 1024, "--no-merge: {} image tokens", sum["image_tokens"]);
    slowest = slowest.max(took);

    let (a, b) = (tmp.path().join("again0"), tmp.path().join("again1"));
    pipeline_run(&a, &["--fixture", "random", "--seed", "11"])?;
    pipeline_run(&b, &["--fixture", "random", "--seed", "11"])?;
    for f in ["registry.json", "registry.bin", "prompt.txt", "summary.json"] {
        ensure!(read(&a.join(f)) == read(&b.join(f)), "rerun differs in {f}");
    }
    Ok(format!("{} inputs, 256/1024 image tokens, 356 at full budget, slowest {:.2}s", cases.len(), slowest.as_secs_f64()))
}

// 2 ---------------------------------------------------------------------

fn geometry_oracles() -> Check {
    let mut cases = 0;
    for seed in 0..100u64 {
        let mut rng = SplitMix64(0xacce_0000 + seed);
        let n = rng.below(201);
        let boxes: Vec<[f64; 4]> = (0..n).map(|_| rng.boxed(300.0, 1.0)).collect();
        let scores: Vec<f64> = (0..n).map(|_| rng.below(10) as f64 / 10.0).collect();
        let cands: Vec<ScoredBox> = boxes.iter().zip(&scores).map(|(b, &sc)| ScoredBox { bbox: bx(*b), score: sc }).collect();
        for t in 1..=9 {
            let t = t as f64 / 10.0;
            let got = nms(&cands, t);
            ensure!(got == oracle::greedy_nms(&boxes, &scores, t), "nms differs from oracle: seed {seed}, t {t}");
            cases += 1;
        }
    }
    // (a, b, numerator, denominator)
    let rational: [([f64; 4], [f64; 4], f64, f64); 10] = [
        ([0., 0., 10., 10.], [0., 0., 10., 10.], 1., 1.),
        ([0., 0., 1., 1.], [5., 5., 6., 6.], 0., 1.),
        ([0., 0., 2., 2.], [1., 1., 3., 3.], 1., 7.),
        ([0., 0., 10., 10.], [1., 1., 11., 11.], 81., 119.),
        ([0., 0., 2., 1.], [0., 0., 1., 1.], 1., 2.),
        ([0., 0., 4., 4.], [1., 1., 2., 2.], 1., 16.),
        ([0., 0., 2., 2.], [1., 0., 3., 2.], 1., 3.),
        ([0., 0., 3., 3.], [1., 1., 4., 4.], 4., 14.),
        ([0., 0., 4., 2.], [2., 1., 6., 3.], 2., 14.),
        ([0., 0., 1., 1.], [1., 0., 2., 1.], 0., 1.),
    ];
    for (a, b, num, den) in rational {
        let got = iou(&bx(a), &bx(b));
        ensure!(got == num / den, "iou({a:?}, {b:?}) = {got}, expected {num}/{den}");
    }
    let suppression = [
        ScoredBox { bbox: bx([0., 0., 10., 10.]), score: 0.9 },
        ScoredBox { bbox: bx([1., 1., 11., 11.]), score: 0.8 },
        ScoredBox { bbox: bx([20., 20., 30., 30.]), score: 0.7 },
    ];
    ensure!(nms(&suppression, 0.6) == vec![0, 2], "81/119 suppression case kept {:?}", nms(&suppression, 0.6));
    Ok(format!("{cases} nms oracle comparisons, 10 rational IoU fixtures, 81/119 suppression"))
}

// 3 ---------------------------------------------------------------------

fn roi_align() -> Check {
    let mut worst: f64 = 0.0;
    for seed in 0..100u64 {
        let mut rng = SplitMix64(0x0e01_0000 + seed);
        let (rows, cols, dim) = (1 + rng.below(32), 1 + rng.below(32), 1 + rng.below(3));
        let data: Vec<f64> = (0..rows * cols * dim).map(|_| rng.range(-1.0, 1.0)).collect();
        let image = (14 * rows, 14 * cols);
        let w = rng.range(0.5, image.1 as f64);
        let h = rng.range(0.5, image.0 as f64);
        let x = rng.range(0.0, image.1 as f64 - w);
        let y = rng.range(0.0, image.0 as f64 - h);
        let roi = [x, y, x + w, y + h];
        let bins = (1 + rng.below(7), 1 + rng.below(7));
        let samples = (1 + rng.below(3), 1 + rng.below(3));
        let grid = TokenGrid::new(rows, cols, dim, data.clone()).unwrap();
        let got = roi_align_level(&grid, &bx(roi), image, bins, samples).map_err(|e| e.to_string())?;
        let want = oracle::dense_roi_align(&data, rows, cols, dim, &roi, image, bins, samples);
        ensure!(got.data.len() == want.len(), "seed {seed}: shape");
        worst = got.data.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(worst, f64::max);
    }
    ensure!(worst <= 1e-9, "max deviation {worst:e}");
    let constant = TokenGrid::filled(20, 20, 3, 0.7);
    let out = roi_align_level(&constant, &bx([13.1, 2.2, 250.0, 99.9]), (280, 280), (7, 7), (2, 2)).unwrap();
    ensure!(out.data.iter().all(|&v| v == 0.7), "constant map not exact");
    Ok(format!("100 random cases, max deviation {worst:.1e}; constant map exact"))
}

// 4 ---------------------------------------------------------------------

fn text(rng: &mut SplitMix64) -> String {
    const CHARS: &[u8] = b"abcdefghijklmnopqrstuvwxyz ABCXYZ0189.,;:!?'\"()[]{}<>/-_";
    loop {
        let t: String = (0..rng.below(30)).map(|_| CHARS[rng.below(CHARS.len())] as char).collect();
        if !contains_markup(&t) {
            return t;
        }
    }
}

fn grammar() -> Check {
    let mut rng = SplitMix64(0x9a11);
    for case in 0..1000 {
        let n = 1 + rng.below(100);
        let segs: Vec<Segment> = (0..rng.below(10))
            .map(|_| match rng.below(2) {
                0 => Segment::Text(text(&mut rng)),
                _ => Segment::Span(GroundedSpan {
                    phrase: text(&mut rng),
                    referents: (0..1 + rng.below(4)).map(|_| 1 + rng.below(n)).collect(),
                }),
            })
            .collect();
        let r = GroundedResponse::from_segments(segs);
        let t = serialize(&r).map_err(|e| format!("case {case}: {e}"))?;
        ensure!(parse(&t, &n).as_ref() == Ok(&r), "case {case}: round trip failed for {t:?}");
    }

    let example = "<p>A dog</p> <roi><r4></roi> is jumping to catch <p>a frisbee</p> <roi><r7></roi> over <p>a fallen man</p> <roi><r1></roi>.";
    let r = parse(example, &7usize).map_err(|e| e.to_string())?;
    let spans: Vec<(String, Vec<usize>)> = r.spans().map(|s| (s.phrase.clone(), s.referents.clone())).collect();
    ensure!(
        spans == vec![("A dog".into(), vec![4]), ("a frisbee".into(), vec![7]), ("a fallen man".into(), vec![1])],
        "worked example parsed to {spans:?}"
    );

    #[derive(Debug, PartialEq)]
    enum Class {
        Malformed,
        Stray,
        Unknown,
    }
    let malformed: [(&str, Class); 10] = [
        ("<p>dog</p>", Class::Malformed),
        ("<p>dog <roi><r1></roi>", Class::Malformed),
        ("<p>a <p>b</p></p> <roi><r1></roi>", Class::Malformed),
        ("hello <r3> world", Class::Stray),
        ("<p>dog</p> <roi><r9></roi>", Class::Unknown),
        ("<p>dog</p> <roi></roi>", Class::Malformed),
        ("</p> stray close", Class::Malformed),
        ("<p>dog</p> <roi><r1>", Class::Malformed),
        ("<p>dog</p>  <roi><r1></roi>", Class::Malformed),
        ("<roi><r1></roi> alone", Class::Malformed),
    ];
    for (input, want) in &malformed {
        let got = match parse(input, &7usize) {
            Err(GrammarError::MalformedMarkup { .. }) => Class::Malformed,
            Err(GrammarError::StrayProxy { .. }) => Class::Stray,
            Err(GrammarError::UnknownReferent { index: 9, registry_size: 7 }) => Class::Unknown,
            other => return Err(format!("{input:?}: unexpected {other:?}")),
        };
        ensure!(&got == want, "{input:?}: {got:?}, expected {want:?}");
    }
    Ok("1000 round trips, worked example (4, 7, 1), 10 malformed inputs rejected".into())
}

// 5 ---------------------------------------------------------------------

fn item(gts: &[[f64; 4]]) -> GroundingItem {
    GroundingItem { image_id: 1, query: "q".into(), category_id: None, gt_boxes: gts.iter().map(|b| bx(*b)).collect() }
}

fn scored(boxes: &[[f64; 4]]) -> Vec<ScoredBox> {
    boxes.iter().enumerate().map(|(i, b)| ScoredBox { bbox: bx(*b), score: 1.0 - i as f64 / 100.0 }).collect()
}

fn protocols() -> Check {
    let (it, pr) = three_of_five();
    let set = prediction_set(std::slice::from_ref(&pr));
    let r = recall_as_many(&it, set.for_item(&it), 0.5);
    ensure!(r == 0.6, "3-of-5 example: as-many recall {r}");

    let (it, pr) = iou_070();
    let report = compute_report(std::slice::from_ref(&it), &prediction_set(std::slice::from_ref(&pr)), &EvalConfig::default())
        .map_err(|e| e.to_string())?;
    ensure!(
        (report.ar, report.ar_at_50, report.ar_at_75) == (0.5, 1.0, 0.0),
        "IoU-0.70 fixture: AR {} AR@0.5 {} AR@0.75 {}",
        report.ar,
        report.ar_at_50,
        report.ar_at_75
    );

    let (it, pr) = two_clusters();
    let merged = compute_report(
        std::slice::from_ref(&it),
        &prediction_set(std::slice::from_ref(&pr)),
        &EvalConfig { protocol: Protocol::Merged, ..Default::default() },
    )
    .map_err(|e| e.to_string())?;
    ensure!(merged.ar_at_50 == 0.0, "two-cluster merged recall {}", merged.ar_at_50);

    let mut rng = SplitMix64(0x5ca1e);
    for case in 0..1000 {
        let g: Vec<[f64; 4]> = (0..1 + rng.below(8)).map(|_| rng.boxed(80.0, 4.0)).collect();
        let p: Vec<[f64; 4]> = (0..rng.below(12)).map(|_| rng.boxed(80.0, 4.0)).collect();
        let (it, preds) = (item(&g), scored(&p));
        for t in ar_thresholds() {
            let (m, a) = (recall_as_many(&it, &preds, t), recall_any(&it, &preds, t));
            ensure!(m <= a, "case {case}, t {t}: as-many {m} > any {a}");
        }
    }

    let mut compared = 0;
    for seed in 0..2000u64 {
        let mut rng = SplitMix64(0xe4a0_0000 + seed);
        let p: Vec<[f64; 4]> = (0..1 + rng.below(6)).map(|_| rng.boxed(100.0, 5.0)).collect();
        let g: Vec<[f64; 4]> = (0..1 + rng.below(6)).map(|_| rng.boxed(100.0, 5.0)).collect();
        let gts: Vec<BoundingBox> = g.iter().map(|b| bx(*b)).collect();
        for t in ar_thresholds() {
            let (got, want) = (greedy_match(&scored(&p), &gts, t), oracle::exhaustive_max_matching(&p, &g, t));
            ensure!(got == want, "seed {seed}, t {t}: greedy {got}, exhaustive {want}");
            compared += 1;
        }
    }
    Ok(format!("3-of-5 = 0.60, IoU-0.70 AR 0.5/1.0/0.0, merged two-cluster 0, 1000 recall orderings, {compared} greedy/exhaustive matches"))
}

// 6 ---------------------------------------------------------------------

fn benchmark_builder() -> Check {
    let tmp = tempfile::tempdir().unwrap();
    let det = tmp.path().join("det.json");
    run_ok(&["fixture", "detection", "--categories", "20", "--min-images", "1", "--max-images", "12", "--out", s(&det)])?;
    let ds = json(&det);
    let mut available: BTreeMap<u64, BTreeSet<u64>> = BTreeMap::new();
    for a in ds["annotations"].as_array().unwrap() {
        available.entry(a["category_id"].as_u64().unwrap()).or_default().insert(a["image_id"].as_u64().unwrap());
    }
    let names: BTreeMap<String, u64> = ds["categories"]
        .as_array()
        .unwrap()
        .iter()
        .map(|c| (c["name"].as_str().unwrap().to_string(), c["id"].as_u64().unwrap()))
        .collect();
    ensure!(available.len() == 20, "{} categories with images", available.len());
    let sizes: BTreeSet<usize> = available.values().map(BTreeSet::len).collect();
    ensure!(sizes.first() == Some(&1) && sizes.last() == Some(&12), "availability range {sizes:?}");

    let (a, b) = (tmp.path().join("a.json"), tmp.path().join("b.json"));
    run_ok(&["bench-build", "--annotations", s(&det), "--out", s(&a), "--seed", "5"])?;
    run_ok(&["bench-build", "--annotations", s(&det), "--out", s(&b), "--seed", "5"])?;
    ensure!(read(&a) == read(&b), "same seed, different benchmark bytes");

    let mut per_cat: BTreeMap<u64, usize> = BTreeMap::new();
    for it in json(&a)["items"].as_array().unwrap() {
        *per_cat.entry(names[it["query"].as_str().unwrap()]).or_default() += 1;
    }
    for (cat, imgs) in &available {
        let got = per_cat.get(cat).copied().unwrap_or(0);
        ensure!(got == imgs.len().min(5), "category {cat}: {got} items from {} images", imgs.len());
    }

    let lvis = match std::env::var("LVIS_VAL_JSON") {
        Ok(path) if Path::new(&path).exists() => {
            let out = tmp.path().join("lvis.json");
            let stats: Value = serde_json::from_str(&run_ok(&["bench-build", "--annotations", &path, "--out", s(&out)])?)
                .map_err(|e| e.to_string())?;
            ensure!(
                stats["categories"] == 1203 && stats["images"] == 4299,
                "LVIS build reports {} categories, {} images",
                stats["categories"],
                stats["images"]
            );
            "LVIS 1203/4299 confirmed"
        }
        _ => "LVIS check skipped (LVIS_VAL_JSON not set)",
    };
    Ok(format!("20 categories, counts = min(5, available), bitwise stable; {lvis}"))
}

// 7 ---------------------------------------------------------------------

fn instruct_offline() -> Check {
    let start = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let vg = tmp.path().join("vg");
    run_ok(&["fixture", "vg", "--images", "50", "--out", s(&vg)])?;
    let inputs = |p: &str| vg.join(p).to_str().unwrap().to_string();
    let (regions, captions, qa) = (inputs("regions.json"), inputs("captions.json"), inputs("qa.json"));
    let generate = |out: &PathBuf| {
        run_ok(&["instruct", "generate", "--mock", "--regions", &regions, "--captions", &captions, "--qa", &qa, "--out", s(out)])
    };
    let (c1, c2) = (tmp.path().join("c1.jsonl"), tmp.path().join("c2.jsonl"));
    let summary: Value = serde_json::from_str(&generate(&c1)?).map_err(|e| e.to_string())?;
    generate(&c2)?;
    ensure!(read(&c1) == read(&c2), "rerun is not byte-identical");

    let records = String::from_utf8(read(&c1)).unwrap();
    let lines: Vec<Value> = records.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    ensure!(!lines.is_empty(), "no records");
    ensure!(lines.iter().all(|r| r["valid"] == true), "a written record is not valid");
    ensure!(summary["valid"].as_u64() == Some(lines.len() as u64), "summary {summary}");
    let check = run(&["instruct", "validate", "--regions", &regions, "--input", s(&c1)]);
    ensure!(check.status.success(), "validate rejects generated records: {}", String::from_utf8_lossy(&check.stdout));

    let filtered = run_ok(&["instruct", "filter", "--regions", &regions])?;
    let mut images = 0;
    for l in filtered.lines() {
        let v: Value = serde_json::from_str(l).unwrap();
        let kept: Vec<[f64; 4]> =
            v["kept"].as_array().unwrap().iter().map(|k| serde_json::from_value(k["box"].clone()).unwrap()).collect();
        ensure!((1..=10).contains(&kept.len()), "image {}: {} kept", v["image_id"], kept.len());
        for (i, a) in kept.iter().enumerate() {
            for b in &kept[i + 1..] {
                ensure!(oracle::iou(a, b) <= 0.5, "image {}: kept pair IoU {}", v["image_id"], oracle::iou(a, b));
            }
        }
        images += 1;
    }
    ensure!(images == 50, "{images} filter lines");
    let took = start.elapsed();
    ensure!(took < Duration::from_secs(30), "took {took:?}");
    Ok(format!("{} valid conversations from 50 images, de-overlap within [1, 10] and IoU <= 0.5, {:.2}s", lines.len(), took.as_secs_f64()))
}

// 8 ---------------------------------------------------------------------

fn parallel_determinism() -> Check {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("bench");
    run_ok(&["fixture", "benchmark", "--items", "500", "--out", s(&dir)])?;
    let ann = dir.join("annotations.json");
    let pred = dir.join("predictions.jsonl");
    ensure!(json(&ann)["items"].as_array().map(Vec::len) == Some(500), "fixture size");
    for protocol in ["any", "merged", "as-many"] {
        let mut reports = Vec::new();
        for jobs in ["1", "8"] {
            let out = tmp.path().join(format!("{protocol}-{jobs}.json"));
            run_ok(&["eval", "--protocol", protocol, "--annotations", s(&ann), "--predictions", s(&pred), "--jobs", jobs, "--out", s(&out)])?;
            reports.push(read(&out));
        }
        ensure!(reports[0] == reports[1], "{protocol}: --jobs 1 and --jobs 8 reports differ");
    }
    // self-evaluation is perfect
    let items: Vec<GroundingItem> = serde_json::from_value(json(&ann)["items"].clone()).unwrap();
    let perfect = tmp.path().join("perfect.jsonl");
    std::fs::write(&perfect, regiontok_core::eval::predictions_to_jsonl(&perfect_predictions(&items))).unwrap();
    let block = run_ok(&["eval", "--annotations", s(&ann), "--predictions", s(&perfect), "--jobs", "8"])?;
    ensure!(block.lines().any(|l| l == "AR 1.000000"), "self-eval block:\n{block}");
    Ok("500 items, 3 protocols, --jobs 1 == --jobs 8 byte for byte".into())
}

// 9 ---------------------------------------------------------------------

fn selftest() -> Check {
    let start = Instant::now();
    let clean = run(&["selftest"]);
    let took = start.elapsed();
    ensure!(clean.status.success(), "clean selftest failed:\n{}", String::from_utf8_lossy(&clean.stdout));
    ensure!(took < Duration::from_secs(60), "selftest took {took:?}");
    for (corruption, suite) in [("merge-order", "FAIL merge-order"), ("iou-boundary", "FAIL rec-boundary")] {
        let out = run(&["selftest", "--corrupt", corruption]);
        let stdout = String::from_utf8_lossy(&out.stdout);
        ensure!(!out.status.success(), "--corrupt {corruption} still passes");
        ensure!(stdout.contains(suite), "--corrupt {corruption} did not report `{suite}`:\n{stdout}");
    }
    Ok(format!("clean run {:.2}s; both corruptions detected", took.as_secs_f64()))
}

fn main() {
    let criteria: [(&str, fn() -> Check); 9] = [
        ("token budget", token_budget),
        ("geometry oracles", geometry_oracles),
        ("ROIAlign oracle", roi_align),
        ("grammar round trip", grammar),
        ("protocol correctness", protocols),
        ("benchmark builder", benchmark_builder),
        ("instruct pipeline (offline)", instruct_offline),
        ("determinism under parallelism", parallel_determinism),
        ("selftest", selftest),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        match outcome {
            Ok(detail) => println!("PASS [{}] {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL [{}] {name}: {why}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
