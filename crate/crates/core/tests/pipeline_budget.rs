use regiontok_core::fixtures::{ImageFixture, IMAGE_FIXTURES};
use regiontok_core::geometry::BoundingBox;
use regiontok_core::pipeline::{run_pipeline, PipelineConfig, Proposals};
use regiontok_core::region::{ProxyRegistry, RegionOrigin};

fn run(name: &str, cfg: &PipelineConfig, user: &[BoundingBox]) -> regiontok_core::pipeline::PipelineOutput {
    let f = ImageFixture::named(name, cfg.image_size, cfg.seed).unwrap();
    run_pipeline(name, &f.image(cfg.seed), Proposals::Synthetic(&f.gt_boxes), user, "Describe the image.", true, cfg).unwrap()
}

#[test]
fn every_fixture_respects_the_budget() {
    for name in IMAGE_FIXTURES {
        for jitter in [0.0, 0.1] {
            let cfg = PipelineConfig { jitter, seed: 3, ..Default::default() };
            let s = run(name, &cfg, &[]).summary;
            assert_eq!(s.image_tokens, 256, "{name}");
            assert!(s.region_tokens <= 100);
            assert_eq!(s.visual_tokens, s.image_tokens + s.region_tokens);
            assert!(s.visual_tokens <= 356);
            if s.proposed_regions == 100 {
                assert_eq!(s.visual_tokens, 356);
            }
        }
    }
}

#[test]
fn user_boxes_follow_proposals() {
    let user = [BoundingBox::new(-5.0, 10.0, 40.0, 500.0).unwrap()];
    let out = run("three-boxes", &PipelineConfig::default(), &user);
    let last = out.registry.get(4).unwrap();
    assert_eq!(last.origin, RegionOrigin::User);
    assert!(last.clamped);
    assert_eq!(last.source_box, BoundingBox::new(0.0, 10.0, 40.0, 448.0).unwrap());
    assert!(out.prompt.contains("<r4><region>. [grounding] Describe the image."));
}

#[test]
fn reruns_and_registry_files_are_bitwise_stable() {
    let cfg = PipelineConfig { jitter: 0.05, seed: 9, ..Default::default() };
    let a = run("random", &cfg, &[]);
    let b = run("random", &cfg, &[]);
    assert_eq!(a.prompt, b.prompt);
    assert_eq!(a.image_tokens, b.image_tokens);
    let (da, db) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (pa, pb) = (da.path().join("registry.json"), db.path().join("registry.json"));
    a.registry.save(&pa).unwrap();
    b.registry.save(&pb).unwrap();
    assert!(std::fs::read(&pa).unwrap() == std::fs::read(&pb).unwrap());
    assert!(std::fs::read(pa.with_extension("bin")).unwrap() == std::fs::read(pb.with_extension("bin")).unwrap());
    let back = ProxyRegistry::load(&pa).unwrap();
    assert_eq!(back, a.registry);
}
