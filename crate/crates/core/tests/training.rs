use forgeloc::config::Config;
use forgeloc::experiment::Bench;
use forgeloc::metrics::{auc, ScoredSample};
use forgeloc::nets::Model;
use forgeloc::synth::Label;
use forgeloc::train::detector_scores;

fn config(overrides: &[(&str, &str)]) -> Config {
    overrides.iter().fold(Config::default(), |c, (k, v)| c.with(k, v).unwrap())
}

#[test]
fn detector_separates_its_training_split() {
    let cfg = config(&[
        ("data.train_real", "200"),
        ("data.train_fake", "200"),
        ("data.test_real", "8"),
        ("data.test_fake", "8"),
        ("train.stage0.epochs", "4"),
    ]);
    let bench = Bench::generate(&cfg, 11).unwrap();
    let (params, record) = bench.stage0(&cfg).unwrap();
    let losses = record.losses();
    assert!(losses.last().unwrap() < &losses[0]);
    let model = Model::new(cfg.model.clone()).unwrap();
    let scores = detector_scores(&model, &params, &bench.train.images, 64).unwrap();
    let scored: Vec<ScoredSample> = scores
        .iter()
        .enumerate()
        .map(|(i, &score)| ScoredSample { id: i, group_id: bench.train.group_ids[i], label: bench.train.labels[i], score })
        .collect();
    assert!(auc(&scored, false).unwrap() > 0.5);
}

#[test]
fn stages_chain_and_keep_frozen_modules() {
    let cfg = config(&[
        ("data.train_real", "16"),
        ("data.train_fake", "16"),
        ("data.test_real", "8"),
        ("data.test_fake", "8"),
        ("train.stage0.epochs", "1"),
        ("train.stage1.epochs", "3"),
        ("train.stage2.epochs", "1"),
        ("diffusion.T", "10"),
    ]);
    let bench = Bench::generate(&cfg, 5).unwrap();
    let (det, _) = bench.stage0(&cfg).unwrap();
    let (gen, rec) = bench.stage1(&cfg, det.clone()).unwrap();
    assert!(rec.losses().iter().all(|l| l.is_finite()));
    assert_eq!(det.digest(&["detector."]), gen.digest(&["detector."]));
    let (full, _) = bench.stage2(&cfg, gen.clone()).unwrap();
    assert_eq!(gen.digest(&["detector.", "proj.", "unet."]), full.digest(&["detector.", "proj.", "unet."]));

    let e = bench.evaluate(&cfg, &full, 5).unwrap();
    assert_eq!(e.fused.len(), 16);
    assert!(e.fused.iter().all(|s| (0.0..=1.0).contains(&s.score)));
    assert!(e.maps.iter().all(|m| m.data().iter().all(|v| (0.0..=1.0).contains(v))));
    assert!(e.mean_map_intensity(Label::Fake).is_finite());

    let again = bench.evaluate(&cfg, &full, 5).unwrap();
    assert_eq!(e.maps, again.maps);
    assert_ne!(bench.evaluate(&cfg, &full, 6).unwrap().maps, e.maps);
}
