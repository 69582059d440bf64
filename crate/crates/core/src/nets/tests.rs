use rand::Rng;
use rand_distr::StandardNormal;

use super::*;
use crate::gradcheck::{max_rel_err, numeric_grad};
use crate::rng::child_rng;

fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = child_rng(seed, "nets-test", 0);
    Tensor::from_fn(shape, |_| rng.sample(StandardNormal))
}

fn default_model() -> Model {
    Model::new(ModelConfig::default()).unwrap()
}

#[test]
fn detector_stage_shapes_follow_the_channel_plan() {
    let m = default_model();
    let p = m.init_params::<f32>(1);
    let img = randn(&[2, 3, 32, 32], 1).cast::<f32>();
    let (out, _) = m.detector.forward(&img, &p).unwrap();
    let shapes: Vec<&[usize]> = out.pyramid.iter().map(|t| t.shape()).collect();
    assert_eq!(shapes, vec![&[2, 16, 16, 16][..], &[2, 32, 8, 8], &[2, 64, 4, 4], &[2, 128, 2, 2]]);
    assert_eq!(out.logits.shape(), &[2, 2]);
    let again = m.detector.infer(&img, &p).unwrap();
    assert_eq!(again.logits, out.logits);
    assert_eq!(again.pyramid, out.pyramid);
}

#[test]
fn projector_outputs_match_target_stage_shapes() {
    let m = default_model();
    let p = m.init_params::<f32>(2);
    let img = randn(&[1, 3, 32, 32], 2).cast::<f32>();
    let pyr = m.detector.infer(&img, &p).unwrap().pyramid;
    let unet_shapes = m.unet.stage_shapes(32);
    for placement in Placement::ALL {
        let proj = Projectors::new(placement, &m.detector.stage_shapes(32), &unet_shapes).unwrap();
        let mut pp = ParamSet::new();
        proj.init_params(&mut child_rng(0, "p", 0), &mut pp);
        let conds = proj.infer(&pyr, &pp).unwrap();
        let present: Vec<usize> = (0..7).filter(|&i| conds[i].is_some()).collect();
        let expected: Vec<usize> = match placement {
            Placement::EncoderAll => vec![0, 1, 2, 3],
            Placement::FinalStageOnly => vec![3],
            Placement::Decoder => vec![3, 4, 5, 6],
        };
        assert_eq!(present, expected, "{placement}");
        for i in present {
            let [c, h, w] = unet_shapes[i];
            assert_eq!(conds[i].as_ref().unwrap().shape(), &[1, c, h, w]);
        }
    }
}

#[test]
fn zero_projectors_make_every_placement_a_no_op() {
    let img = randn(&[1, 3, 32, 32], 3).cast::<f32>();
    let x = randn(&[1, 1, 32, 32], 4).cast::<f32>();
    let mut outputs = Vec::new();
    for placement in Placement::ALL {
        let m = Model::new(ModelConfig { placement, ..ModelConfig::default() }).unwrap();
        let mut p = m.init_params::<f32>(5);
        for (name, t) in p.iter_mut() {
            if name.starts_with(PROJ_PREFIX) {
                *t = Tensor::zeros(t.shape());
            }
        }
        let pyr = m.detector.infer(&img, &p).unwrap().pyramid;
        let conds = m.projectors.infer(&pyr, &p).unwrap();
        assert!(conds.iter().flatten().all(|c| c.data().iter().all(|&v| v == 0.0)));
        let with = m.unet.infer(&x, &[7.0], &conds, &p).unwrap();
        let without = m.unet.infer(&x, &[7.0], &vec![None; 7], &p).unwrap();
        assert_eq!(with, without);
        outputs.push(with);
    }
    assert!(outputs.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn unet_preserves_shape_and_separates_timesteps() {
    for size in [32, 64] {
        let m = Model::new(ModelConfig { image_size: size, ..ModelConfig::default() }).unwrap();
        let p = m.init_params::<f32>(6);
        let x = randn(&[2, 1, size, size], 7).cast::<f32>();
        let y = m.unet.infer(&x, &[1.0, 50.0], &vec![None; 7], &p).unwrap();
        assert_eq!(y.shape(), x.shape());
    }
    let m = default_model();
    let p = m.init_params::<f32>(8);
    let x = randn(&[1, 1, 32, 32], 9).cast::<f32>();
    let outs: Vec<Tensor<f32>> =
        (1..=50).map(|t| m.unet.infer(&x, &[t as f64], &vec![None; 7], &p).unwrap()).collect();
    for i in 0..outs.len() {
        for j in i + 1..outs.len() {
            assert_ne!(outs[i], outs[j], "t={} and t={} collide", i + 1, j + 1);
        }
    }
    assert!(m.unet.infer(&x, &[0.0], &vec![None; 7], &p).is_err());
    assert!(m.unet.infer(&x, &[51.0], &vec![None; 7], &p).is_err());
}

#[test]
fn unet_rejects_misshapen_conditions() {
    let m = default_model();
    let p = m.init_params::<f32>(10);
    let x = Tensor::zeros(&[1, 1, 32, 32]);
    let mut conds = vec![None; 7];
    conds[0] = Some(Tensor::zeros(&[1, 16, 16, 16]));
    assert!(m.unet.infer(&x, &[3.0], &conds, &p).is_err());
}

fn gate_params(c: usize, bias: f64) -> ParamSet<f64> {
    let mut p = ParamSet::new();
    p.insert("fusion.gate.conv.weight", randn(&[c, 2 * c, 1, 1], 11));
    p.insert("fusion.gate.conv.bias", Tensor::full(&[c], bias));
    p
}

#[test]
fn gate_saturates_towards_either_input() {
    let (fa, fd) = (randn(&[2, 4, 3, 3], 12), randn(&[2, 4, 3, 3], 13));
    let hi = gate_fuse(&fa, &fd, FusionMode::Gating, &gate_params(4, 40.0)).unwrap();
    assert!(hi.max_abs_diff(&fd).unwrap() < 1e-9);
    let lo = gate_fuse(&fa, &fd, FusionMode::Gating, &gate_params(4, -40.0)).unwrap();
    assert!(lo.max_abs_diff(&fa).unwrap() < 1e-9);
    let zero = Tensor::zeros(fd.shape());
    assert_eq!(gate_fuse(&zero, &fd, FusionMode::Addition, &ParamSet::new()).unwrap(), fd);
    assert!(gate_fuse(&fa, &randn(&[2, 4, 2, 2], 1), FusionMode::Addition, &ParamSet::new()).is_err());
}

#[test]
fn gated_values_lie_between_inputs() {
    for seed in 0..20 {
        let (fa, fd) = (randn(&[1, 4, 2, 2], 100 + seed), randn(&[1, 4, 2, 2], 200 + seed));
        let fused = gate_fuse(&fa, &fd, FusionMode::Gating, &gate_params(4, 0.3)).unwrap();
        for i in 0..fused.len() {
            let (a, d, f) = (fa.data()[i], fd.data()[i], fused.data()[i]);
            assert!(f >= a.min(d) - 1e-12 && f <= a.max(d) + 1e-12);
        }
    }
}

#[test]
fn classifier_is_gap_then_linear() {
    let head = FusionHead::new(FusionMode::Gating, [2, 2, 2, 3]);
    let mut p = ParamSet::new();
    p.insert("fusion.head.fc.weight", Tensor::new(vec![2, 3], vec![1.0, -2.0, 0.5, 0.0, 3.0, 1.0]).unwrap());
    p.insert("fusion.head.fc.bias", Tensor::new(vec![2], vec![0.1, -0.2]).unwrap());
    let c: f64 = 1.5;
    let logits = head.classify(&Tensor::full(&[1, 3, 2, 2], c), &p).unwrap();
    let expect = [c * (1.0 - 2.0 + 0.5) + 0.1, c * (0.0 + 3.0 + 1.0) - 0.2];
    for (l, e) in logits.data().iter().zip(expect) {
        assert!((l - e).abs() < 1e-12);
    }

    // dyadic values sum exactly in any order, so invariance is bit-exact
    let x = Tensor::from_fn(&[1, 3, 2, 2], |i| ((i * 7) % 5) as f64 / 8.0 - 0.25);
    let perm = [3, 0, 2, 1];
    let shuffled = Tensor::from_fn(x.shape(), |i| x.data()[(i / 4) * 4 + perm[i % 4]]);
    assert_eq!(head.classify(&x, &p).unwrap().data(), head.classify(&shuffled, &p).unwrap().data());
    let x = randn(&[1, 3, 2, 2], 14);
    let shuffled = Tensor::from_fn(x.shape(), |i| x.data()[(i / 4) * 4 + perm[i % 4]]);
    let (a, b) = (head.classify(&x, &p).unwrap(), head.classify(&shuffled, &p).unwrap());
    assert!(a.max_abs_diff(&b).unwrap() < 1e-12);

    p.insert("fusion.head.fc.weight", Tensor::zeros(&[2, 3]));
    assert_eq!(head.classify(&x, &p).unwrap().data(), &[0.1, -0.2]);
}

#[test]
fn warm_start_copies_detector_head() {
    let m = default_model();
    let mut p = m.init_params::<f32>(15);
    m.warm_start_fusion(&mut p).unwrap();
    assert_eq!(p.get("fusion.head.fc.weight").unwrap(), p.get("detector.head.fc.weight").unwrap());
    assert!(p.get("fusion.gate.conv.bias").unwrap().data().iter().all(|&b| b == 3.0));
}

fn tiny_model(fusion: FusionMode, placement: Placement) -> Model {
    Model::new(ModelConfig {
        image_size: 32,
        detector: DetectorConfig { in_ch: 3, channels: [2, 2, 3, 2] },
        unet: UNetConfig { channels: [2, 2, 2, 3, 2, 2, 2], time_dim: 4, time_hidden: 3, max_t: 10 },
        placement,
        fusion,
    })
    .unwrap()
}

struct Probe {
    r_eps: Tensor<f64>,
    r_fused: Tensor<f64>,
    r_det: Tensor<f64>,
}

/// `Σ R·eps + Σ R·fusion_logits + Σ R·detector_logits`, with the predicted noise feeding the fusion head.
fn joint_loss(m: &Model, p: &ParamSet<f64>, img: &Tensor<f64>, x: &Tensor<f64>, t: &[f64], r: &Probe) -> Result<f64> {
    let det = m.detector.infer(img, p)?;
    let conds = m.projectors.infer(&det.pyramid, p)?;
    let eps = m.unet.infer(x, t, &conds, p)?;
    let fused = m.fusion.infer(&eps, &det.pyramid[3], p)?;
    let dot = |a: &Tensor<f64>, b: &Tensor<f64>| a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum::<f64>();
    Ok(dot(&eps, &r.r_eps) + dot(&fused, &r.r_fused) + dot(&det.logits, &r.r_det))
}

fn joint_grads(m: &Model, p: &ParamSet<f64>, img: &Tensor<f64>, x: &Tensor<f64>, t: &[f64], r: &Probe) -> (ParamSet<f64>, Tensor<f64>, Tensor<f64>) {
    let mut g = ParamSet::new();
    let (det, dcache) = m.detector.forward(img, p).unwrap();
    let (conds, pcache) = m.projectors.forward(&det.pyramid, p).unwrap();
    let (eps, ucache) = m.unet.forward(x, t, &conds, p).unwrap();
    let (_, fcache) = m.fusion.forward(&eps, &det.pyramid[3], p).unwrap();
    let (g_map, g_f4) = m.fusion.backward(&fcache, p, &r.r_fused, &mut g).unwrap();
    let (g_x, g_conds) = m.unet.backward(&ucache, p, &r.r_eps.add(&g_map).unwrap(), &mut g).unwrap();
    let mut g_pyr = m.projectors.backward(&pcache, p, &g_conds, &mut g).unwrap();
    match &mut g_pyr[3] {
        Some(t) => t.add_assign(&g_f4).unwrap(),
        slot => *slot = Some(g_f4),
    }
    let g_img = m.detector.backward(&dcache, p, Some(&r.r_det), &g_pyr, &mut g).unwrap();
    (g, g_x, g_img)
}

#[test]
fn end_to_end_gradients_match_finite_differences() {
    for (k, (mode, placement)) in [
        (FusionMode::Gating, Placement::EncoderAll),
        (FusionMode::Concat, Placement::Decoder),
        (FusionMode::Hadamard, Placement::FinalStageOnly),
    ]
    .into_iter()
    .enumerate()
    {
        let m = tiny_model(mode, placement);
        let mut p = m.init_params::<f64>(20 + k as u64);
        let mut rng = child_rng(30 + k as u64, "perturb", 0);
        for (_, t) in p.iter_mut() {
            for v in t.data_mut() {
                *v += 0.2 * rng.sample::<f64, _>(StandardNormal);
            }
        }
        let img = randn(&[1, 3, 32, 32], 40 + k as u64);
        let x = randn(&[1, 1, 32, 32], 50 + k as u64);
        let t = [3.0];
        let probe = Probe { r_eps: randn(&[1, 1, 32, 32], 60), r_fused: randn(&[1, 2], 61), r_det: randn(&[1, 2], 62) };
        let (grads, g_x, g_img) = joint_grads(&m, &p, &img, &x, &t, &probe);

        let mut worst = 0.0f64;
        for (name, g) in grads.iter() {
            let num = numeric_grad(p.get(name).unwrap(), |pp| {
                let mut q = p.clone();
                q.insert(name, pp.clone());
                joint_loss(&m, &q, &img, &x, &t, &probe)
            })
            .unwrap();
            // Biases feeding a group norm have exactly zero gradient; there the
            // finite difference is pure round-off and only its size is checked.
            if g.data().iter().all(|v| v.abs() < 1e-12) {
                let noise = num.data().iter().fold(0.0f64, |a, v| a.max(v.abs()));
                assert!(noise < 1e-7, "{mode}/{placement}: {name} analytic zero, numeric {noise}");
                continue;
            }
            let e = max_rel_err(g, &num);
            assert!(e < 1e-3, "{mode}/{placement}: {name} rel err {e}");
            worst = worst.max(e);
        }
        let num_x = numeric_grad(&x, |xp| joint_loss(&m, &p, &img, xp, &t, &probe)).unwrap();
        assert!(max_rel_err(&g_x, &num_x) < 1e-3);
        let num_img = numeric_grad(&img, |ip| joint_loss(&m, &p, ip, &x, &t, &probe)).unwrap();
        assert!(max_rel_err(&g_img, &num_img) < 1e-3);
        // every trainable tensor received a gradient
        assert_eq!(grads.len(), p.len(), "{mode}/{placement}");
        assert!(worst.is_finite());
    }
}
