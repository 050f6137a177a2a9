use regiontok_core::geometry::BoundingBox;
use regiontok_core::region::roi_align_level;
use regiontok_core::vision::TokenGrid;
use regiontok_oracles as oracle;

#[test]
fn roi_align_matches_dense_sampling() {
    let mut worst: f64 = 0.0;
    for seed in 0..100u64 {
        let mut rng = oracle::SplitMix64(1000 + seed);
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

        let grid = TokenGrid::new(rows, cols, dim, data.clone()).unwrap();
        let got = roi_align_level(&grid, &BoundingBox::try_from(roi).unwrap(), image, bins, samples).unwrap();
        let want = oracle::dense_roi_align(&data, rows, cols, dim, &roi, image, bins, samples);
        assert_eq!(got.data.len(), want.len());
        for (a, b) in got.data.iter().zip(&want) {
            worst = worst.max((a - b).abs());
        }
    }
    assert!(worst <= 1e-9, "max deviation {worst}");
}

#[test]
fn constant_map_is_exact() {
    for v in [0.0, 1.0, -3.25, 0.1, 1e6 + 0.3] {
        let grid = TokenGrid::filled(13, 9, 2, v);
        let roi = BoundingBox::new(3.3, 1.7, 100.9, 170.2).unwrap();
        let out = roi_align_level(&grid, &roi, (182, 126), (7, 7), (2, 2)).unwrap();
        assert!(out.data.iter().all(|&x| x == v), "value {v}");
    }
}
