use super::data::epoch_batches;
use super::*;
use crate::diffusion::{make_schedule, NoiseSchedule};
use crate::metrics::{auc, ScoredSample};
use crate::nets::{DetectorConfig, Model, ModelConfig, UNetConfig};
use crate::params::ParamSet;
use crate::synth::{generate_samples, DataConfig};
use crate::tensor::Tensor;

fn tiny_model() -> Model {
    Model::new(ModelConfig {
        image_size: 32,
        detector: DetectorConfig { in_ch: 3, channels: [4, 6, 6, 8] },
        unet: UNetConfig { channels: [4, 4, 6, 8, 6, 4, 4], time_dim: 8, time_hidden: 8, max_t: 10 },
        ..ModelConfig::default()
    })
    .unwrap()
}

fn tiny_data(n: usize) -> (TrainData<f32>, TrainData<f32>) {
    let cfg = DataConfig { size: 32, train_real: n, train_fake: n, test_real: 4, test_fake: 4, ..DataConfig::default() };
    let (train, test) = generate_samples(&cfg, 3).unwrap();
    (TrainData::new(&train).unwrap(), TrainData::new(&test).unwrap())
}

fn sched() -> NoiseSchedule {
    make_schedule(10, 0.02, 0.4).unwrap()
}

fn stage(id: StageId, epochs: usize, lr: f64) -> StageConfig {
    let mut s = StageConfig::defaults(id).with_seed(5);
    s.epochs = epochs;
    s.batch_size = 8;
    s.optim.lr = lr;
    s
}

fn changed(a: &ParamSet<f32>, b: &ParamSet<f32>, prefix: &str) -> Vec<String> {
    a.iter().filter(|(k, v)| k.starts_with(prefix) && b.get(k).unwrap() != *v).map(|(k, _)| k.to_string()).collect()
}

fn unchanged(a: &ParamSet<f32>, b: &ParamSet<f32>, prefix: &str) -> Vec<String> {
    a.iter().filter(|(k, v)| k.starts_with(prefix) && b.get(k).unwrap() == *v).map(|(k, _)| k.to_string()).collect()
}

#[test]
fn stage_metadata_is_consistent() {
    for s in StageId::ALL {
        assert_eq!(s.name().parse::<StageId>().unwrap(), s);
        for t in s.trainable() {
            assert!(!s.frozen().contains(t));
        }
        assert_eq!(s.trainable().len() + s.frozen().len(), 4, "{s}");
        StageConfig::defaults(s).validate().unwrap();
    }
    let d = StageConfig::defaults(StageId::Detector);
    assert_eq!((d.epochs, d.batch_size, d.optim.lr, d.schedule), (10, 32, 1e-3, LrSchedule::Cosine));
    let f = StageConfig::defaults(StageId::Fusion);
    assert_eq!((f.epochs, f.optim.lr, f.schedule), (5, 5e-5, LrSchedule::Constant));
    assert_eq!(f.lr_at(7, 10).unwrap(), 5e-5);
    let mut bad = d;
    bad.epochs = 0;
    assert!(bad.validate().is_err());
    assert!("stage3".parse::<StageId>().is_err());
}

#[test]
fn epoch_batches_cover_every_sample_once() {
    let b = epoch_batches(21, 8, 4, "s", 2);
    assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![8, 8, 5]);
    let mut all: Vec<usize> = b.concat();
    all.sort();
    assert_eq!(all, (0..21).collect::<Vec<_>>());
    assert_eq!(b, epoch_batches(21, 8, 4, "s", 2));
    assert_ne!(b, epoch_batches(21, 8, 4, "s", 3));
}

#[test]
fn detector_training_learns_and_is_deterministic() {
    let model = tiny_model();
    let (train, _) = tiny_data(24);
    let sc = stage(StageId::Detector, 6, 3e-3);
    let init = model.init_params::<f32>(1);
    let (p, rec) = train_detector(&model, init.clone(), &train, &sc, "h").unwrap();
    let losses = rec.losses();
    assert_eq!(losses.len(), 6);
    assert!(losses[5] < losses[0], "{losses:?}");
    // Only conv biases feeding a group norm (which cancels them) may stay put.
    for name in unchanged(&init, &p, "detector.") {
        assert!(name.contains(".conv") && name.ends_with(".bias"), "{name}");
    }
    assert_eq!(changed(&init, &p, "detector.head.").len(), 2);
    assert!(changed(&init, &p, "unet.").is_empty() && changed(&init, &p, "fusion.").is_empty());
    let scores = detector_scores(&model, &p, &train.images, 16).unwrap();
    let scored: Vec<ScoredSample> = (0..train.len())
        .map(|i| ScoredSample { id: train.ids[i], group_id: train.group_ids[i], label: train.labels[i], score: scores[i] })
        .collect();
    assert!(auc(&scored, false).unwrap() > 0.5);
    let (p2, rec2) = train_detector(&model, init, &train, &sc, "h").unwrap();
    assert_eq!(p, p2);
    assert_eq!(rec.curves, rec2.curves);
}

#[test]
fn diffusion_training_freezes_detector_and_reduces_loss() {
    let model = tiny_model();
    let (train, _) = tiny_data(16);
    let init = model.init_params::<f32>(2);
    let (p, rec) = train_diffusion(&model, init.clone(), &train, &stage(StageId::Diffusion, 5, 3e-3), &sched(), "h").unwrap();
    assert!(rec.losses()[4] < rec.losses()[0], "{:?}", rec.losses());
    assert_eq!(p.digest(&["detector."]), init.digest(&["detector."]));
    assert!(changed(&init, &p, "detector.").is_empty());
    assert!(!changed(&init, &p, "unet.").is_empty());
    assert!(!changed(&init, &p, "proj.").is_empty());
    assert!(changed(&init, &p, "fusion.").is_empty());
}

#[test]
fn trainers_reject_mismatched_configs() {
    let model = tiny_model();
    let (train, _) = tiny_data(4);
    let init = model.init_params::<f32>(2);
    assert!(train_diffusion(&model, init.clone(), &train, &stage(StageId::Detector, 1, 1e-3), &sched(), "h").is_err());
    let big = Model::new(ModelConfig { image_size: 64, ..ModelConfig::default() }).unwrap();
    assert!(train_detector(&big, big.init_params(1), &train, &stage(StageId::Detector, 1, 1e-3), "h").is_err());
    let no_unet = init.filter_prefixes(&["detector."]);
    assert!(matches!(
        train_diffusion(&model, no_unet, &train, &stage(StageId::Diffusion, 1, 1e-3), &sched(), "h"),
        Err(crate::Error::MissingParam(_))
    ));
}

#[test]
fn non_finite_values_abort_training() {
    let model = tiny_model();
    let (mut train, _) = tiny_data(4);
    train.images[0].data_mut()[0] = f32::NAN;
    let err = train_detector(&model, model.init_params(1), &train, &stage(StageId::Detector, 1, 1e-3), "h").unwrap_err();
    assert!(matches!(err, crate::Error::NonFinite(_)), "{err}");

    let mut params = model.init_params::<f32>(1);
    let sc = stage(StageId::Detector, 3, 1e-3);
    let err = optimize(&sc, 16, &mut params, &["loss"], "h", |epoch, _, _, _| {
        Ok((vec![if epoch == 1 { f64::INFINITY } else { 1.0 }], ParamSet::new()))
    })
    .unwrap_err();
    assert!(matches!(err, crate::Error::Divergence { epoch: 2, step: 2, .. }), "{err}");
}

#[test]
fn regression_baseline_is_single_pass_and_clamped() {
    let model = tiny_model();
    let (train, test) = tiny_data(16);
    let init = model.init_params::<f32>(3);
    let (p, rec) = train_regression(&model, init.clone(), &train, &stage(StageId::Regression, 5, 3e-3), &sched(), "h").unwrap();
    assert!(rec.losses()[4] < rec.losses()[0], "{:?}", rec.losses());
    assert!(changed(&init, &p, "detector.").is_empty());
    let pyr = detector_features(&model, &p, &test.images, 8).unwrap();
    let maps = regression_maps(&model, &p, &pyr, &sched(), 8).unwrap();
    assert_eq!(maps.len(), test.len());
    for m in &maps {
        assert_eq!(m.shape(), &[1, 1, 32, 32]);
        assert!(m.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
    // One forward pass: the maps equal a direct U-Net call at t = T.
    let conds = model.projectors.infer(&pyr[0], &p).unwrap();
    let direct = model.unet.infer(&Tensor::zeros(&[1, 1, 32, 32]), &[10.0], &conds, &p).unwrap();
    assert_eq!(maps[0], crate::diffusion::from_diffusion_range(&direct));
}

#[test]
fn fusion_training_touches_only_the_fusion_head() {
    let model = tiny_model();
    let (train, _) = tiny_data(8);
    let init = model.init_params::<f32>(4);
    let opts = FusionOptions { sample_batch: 8, ..FusionOptions::default() };
    let sc = stage(StageId::Fusion, 2, 1e-3);
    let (p, rec) = train_fusion(&model, init.clone(), &train, &sc, &sched(), &opts, "h").unwrap();
    assert_eq!(rec.losses().len(), 2);
    let frozen = ["detector.", "proj.", "unet."];
    assert_eq!(p.digest(&frozen), init.digest(&frozen));
    assert!(unchanged(&init, &p, "fusion.").is_empty());
    // Warm start: the classifier began from the detector head.
    let gt = FusionOptions { map_source: MapSource::GroundTruth, ..opts };
    let (pg, _) = train_fusion(&model, init.clone(), &train, &sc, &sched(), &gt, "h").unwrap();
    assert_ne!(pg.digest(&["fusion."]), p.digest(&["fusion."]));
    let resample = FusionOptions { resample_each_epoch: true, ..opts };
    let (pr, _) = train_fusion(&model, init.clone(), &train, &sc, &sched(), &resample, "h").unwrap();
    assert_ne!(pr.digest(&["fusion."]), p.digest(&["fusion."]));
    let (p_again, _) = train_fusion(&model, init, &train, &sc, &sched(), &opts, "h").unwrap();
    assert_eq!(p, p_again);
}

#[test]
fn sampled_maps_follow_per_sample_seeds() {
    let model = tiny_model();
    let (train, _) = tiny_data(4);
    let p = model.init_params::<f32>(4);
    let pyr = detector_features(&model, &p, &train.images, 8).unwrap();
    let seeds: Vec<u64> = train.ids.iter().map(|&id| map_seed(1, id, 0)).collect();
    let cfg = crate::diffusion::SamplerConfig::default();
    let all = generate_maps(&model, &p, &pyr, &seeds, &sched(), cfg, 3).unwrap();
    // Batch composition does not change a sample's map.
    let one = generate_maps(&model, &p, &pyr[2..3], &seeds[2..3], &sched(), cfg, 1).unwrap();
    assert_eq!(all[2], one[0]);
    assert_ne!(map_seed(1, 5, 0), map_seed(1, 5, 1));
    assert_ne!(map_seed(1, 5, 0), map_seed(1, 6, 0));
}

#[test]
fn single_stage_updates_every_non_detector_tensor() {
    let model = tiny_model();
    let (train, _) = tiny_data(8);
    let init = model.init_params::<f32>(6);
    let (p, rec) =
        train_single_stage(&model, init.clone(), &train, &stage(StageId::SingleStage, 2, 1e-3), &sched(), 1.0, "h").unwrap();
    for name in ["loss", "noise_mse", "ce"] {
        assert_eq!(rec.curve(name).unwrap().len(), 2);
    }
    let total = rec.curve("loss").unwrap();
    let (mse, ce) = (rec.curve("noise_mse").unwrap(), rec.curve("ce").unwrap());
    assert!((total[0] - mse[0] - ce[0]).abs() < 1e-9);
    assert!(changed(&init, &p, "detector.").is_empty());
    for prefix in ["proj.", "unet.", "fusion."] {
        assert_eq!(unchanged(&init, &p, prefix), Vec::<String>::new(), "{prefix}");
    }
    assert!(train_single_stage(&model, init, &train, &stage(StageId::SingleStage, 1, 1e-3), &sched(), -1.0, "h").is_err());
}

#[test]
fn run_record_csv_excludes_timing() {
    let rec = RunRecord {
        stage: StageId::Diffusion,
        curves: vec![("loss".into(), vec![0.5, 0.25])],
        checkpoint: None,
        config_hash: "abc".into(),
        wall_clock_secs: 1.5,
    };
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("r.csv");
    rec.write_csv(&p).unwrap();
    let text = std::fs::read_to_string(&p).unwrap();
    assert_eq!(text, "stage,epoch,metric,value,config_hash\ndiffusion,1,loss,0.5,abc\ndiffusion,2,loss,0.25,abc\n");
    rec.write_timing(&dir.path().join("t.csv")).unwrap();
}

