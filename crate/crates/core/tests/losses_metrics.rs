//! Training-loss fixed points and gradients; metric oracles.

mod common;

use common::{perturb_zeros, rand_video};
use proptest::prelude::*;
use stvsr_core::autodiff::Graph;
use stvsr_core::datagen::{generate_clip, RandomSceneConfig, SceneSpec, ShapeKind, ShapeSpec};
use stvsr_core::degrade::DegradationConfig;
use stvsr_core::flow::{backward_warp, FlowEstimatorConfig};
use stvsr_core::losses::{temporal_consistency_loss, FeatureNet, LossWeights};
use stvsr_core::metrics::{evaluate_clip, ssim, t_of, MetricConfig, MetricReport};
use stvsr_core::pipeline::{prepare, trainable, ArchConfig, Model, Settings};
use stvsr_core::rng::stream;
use stvsr_core::{FlowField, ScaleFactors, VideoTensor};

#[test]
fn zero_weight_drops_the_consistency_gradient() {
    let scales = ScaleFactors::new(2, 3).unwrap();
    let settings = Settings { scales, weights: LossWeights { gamma_consis: 0.0 }, ..Settings::default() };
    let mut model = Model::<f64>::new(ArchConfig::tiny(3), 4).unwrap();
    perturb_zeros(&mut model.params, 4);
    let cfg = RandomSceneConfig { texture: 0.3, ..RandomSceneConfig::default() };
    let clip = generate_clip(&SceneSpec::random(2, 4, 16, 16, 3, &cfg)).unwrap();
    let ex = prepare(&clip, &DegradationConfig::default(), &settings).unwrap();
    let feat = FeatureNet::new(0, 3);
    let (parts, total, grads) = model.loss_and_grads(&ex, &settings, &feat, trainable).unwrap();
    assert!(parts.consis > 0.0);
    assert_eq!(total, parts.latent + parts.rec + parts.perc);
    // gradient of the three remaining terms alone
    let mut g = Graph::new();
    let p = model.params.bind(&mut g, trainable);
    let (_, [l, r, pc, _]) = model.loss_graph(&mut g, &p, &ex, &settings, &feat).unwrap();
    let a = g.add(l, r);
    let rest = g.add(a, pc);
    let mut gr = g.backward(rest);
    let want = p.collect(&mut gr);
    for (x, y) in grads.iter().zip(&want) {
        match (x, y) {
            (Some(x), Some(y)) => {
                for (a, b) in x.data().iter().zip(y.data()) {
                    assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
                }
            }
            (None, None) => {}
            _ => panic!("gradient presence differs"),
        }
    }
    // and a finite-difference spot check of the zero-weight total
    let loss = |m: &Model<f64>| {
        let mut g = Graph::new();
        let p = m.params.bind(&mut g, |_| false);
        let (t, _) = m.loss_graph(&mut g, &p, &ex, &settings, &feat).unwrap();
        g.scalar(t)
    };
    let i = model.params.entries().iter().position(|e| e.name.starts_with("fusion")).unwrap();
    let gi = grads[i].as_ref().unwrap();
    let k = (0..gi.len()).max_by(|&a, &b| gi.data()[a].abs().total_cmp(&gi.data()[b].abs())).unwrap();
    let h = 1e-4;
    let mut m = model.clone();
    let x0 = m.params.entries()[i].value.data()[k];
    m.params.value_mut(i).data_mut()[k] = x0 + h;
    let up = loss(&m);
    m.params.value_mut(i).data_mut()[k] = x0 - h;
    let num = (up - loss(&m)) / (2.0 * h);
    assert!((num - gi.data()[k]).abs() / num.abs() < 1e-4);
}

#[test]
fn motion_along_constant_direction_is_a_fixed_point() {
    // every frame is the same image whose columns are identical, so any
    // horizontal flow maps each frame exactly onto its neighbour
    let mut r = stream(1, "test/rows");
    let (t, h, w) = (3, 6, 7);
    let rows: Vec<f64> = (0..h).map(|_| rand::Rng::random_range(&mut r, 0.0..1.0)).collect();
    let v = VideoTensor::new(t, h, w, 1, (0..t * h * w).map(|i| rows[(i / w) % h]).collect()).unwrap();
    let f = |s: f64| FlowField::new(h, w, (0..h * w).flat_map(|i| [s * (i % 5) as f64 - 0.7, 0.0]).collect()).unwrap();
    let fwd = vec![f(0.9), f(-0.4)];
    let bwd = vec![f(-1.3), f(0.6)];
    assert!(temporal_consistency_loss(&v, &fwd, &bwd).unwrap() < 1e-15);
    let vertical = vec![FlowField::constant(h, w, 0.0, 1.0); 2];
    assert!(temporal_consistency_loss(&v, &vertical, &vertical).unwrap() > 0.0);
}

#[test]
fn consistency_matches_brute_force_on_a_generated_clip() {
    let cfg = RandomSceneConfig { texture: 0.4, ..RandomSceneConfig::default() };
    let clip = generate_clip(&SceneSpec::random(8, 4, 12, 12, 2, &cfg)).unwrap();
    let (fwd, bwd) = (&clip.true_flow_fwd, &clip.true_flow_bwd);
    let v = &clip.video;
    let mut a = 0.0;
    let mut b = 0.0;
    for n in 0..3 {
        let wf = backward_warp(&v.frame(n + 1), &fwd[n]).unwrap();
        let wb = backward_warp(&v.frame(n), &bwd[n]).unwrap();
        a += wf.data.iter().zip(&v.frame(n).data).map(|(x, y)| (x - y).abs()).sum::<f64>();
        b += wb.data.iter().zip(&v.frame(n + 1).data).map(|(x, y)| (x - y).abs()).sum::<f64>();
    }
    let n = (3 * 12 * 12 * 2) as f64;
    let got = temporal_consistency_loss(v, fwd, bwd).unwrap();
    assert!((got - (a / n + b / n)).abs() < 1e-12);
}

fn quantised(t: usize, h: usize, w: usize, seed: u64) -> VideoTensor {
    let v = rand_video(t, h, w, 1, seed);
    VideoTensor::new(t, h, w, 1, v.data().iter().map(|x| (x * 192.0).floor() / 256.0).collect()).unwrap()
}

#[test]
fn translating_shape_against_static_truth() {
    let (h, w) = (24, 32);
    let mut s = SceneSpec::empty(3, 4, h, w, 1, 0.3);
    s.shapes.push(ShapeSpec { kind: ShapeKind::Rectangle { w: 12.0, h: 10.0 }, pos: (8.0, 7.0), velocity: (1.0, 0.0), intensity: vec![0.7], texture: 0.5 });
    let moving = generate_clip(&s).unwrap().video;
    let still = moving.select(&[0, 0, 0, 0]).unwrap();
    let cfg = FlowEstimatorConfig { levels: 1, ..FlowEstimatorConfig::default() };
    let got = t_of(&moving, &still, &cfg).unwrap();
    // unit displacements on the shape, spread at most over the blocks that
    // touch it in either frame of a pair
    let area = 12.0 * 10.0 / (h * w) as f64;
    let support = (12 + 1 + cfg.block - 1) as f64 * (10 + cfg.block - 1) as f64 / (h * w) as f64;
    assert!(got >= area && got <= support, "{got} not in [{area}, {support}]");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn temporal_flow_metric_ignores_a_common_offset_and_is_symmetric(a in 0u64..1000, b in 0u64..1000) {
        let (x, y) = (quantised(3, 10, 10, a), quantised(3, 10, 10, b));
        let lift = |v: &VideoTensor| VideoTensor::new(3, 10, 10, 1, v.data().iter().map(|p| p + 0.125).collect()).unwrap();
        let cfg = FlowEstimatorConfig::default();
        prop_assert_eq!(t_of(&x, &y, &cfg).unwrap(), t_of(&lift(&x), &lift(&y), &cfg).unwrap());
        prop_assert_eq!(t_of(&x, &y, &cfg).unwrap(), t_of(&y, &x, &cfg).unwrap());
    }
}

#[test]
fn inverted_binary_image_has_negative_ssim() {
    let a = VideoTensor::new(1, 11, 11, 1, (0..121).map(|i| ((i * 7 + i / 11) % 2) as f64).collect()).unwrap();
    let b = VideoTensor::new(1, 11, 11, 1, a.data().iter().map(|x| 1.0 - x).collect()).unwrap();
    assert!(ssim(&a, &b).unwrap() < 0.0);
    assert_eq!(ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
}

#[test]
fn corpus_mean_is_the_plain_mean() {
    let cfg = MetricConfig::default();
    let feat = FeatureNet::new(cfg.feature_seed, 1);
    let clips: Vec<_> = (0..5)
        .map(|i| evaluate_clip(&format!("c{i}"), &rand_video(3, 12, 12, 1, i), &rand_video(3, 12, 12, 1, 100 + i), &cfg, &feat).unwrap())
        .collect();
    let r = MetricReport::from_clips(cfg.fingerprint(), clips.clone()).unwrap();
    let mean = |f: fn(&stvsr_core::metrics::Metrics) -> f64| clips.iter().map(|c| f(&c.metrics)).sum::<f64>() / 5.0;
    assert_eq!(r.mean.psnr, mean(|m| m.psnr));
    assert_eq!(r.mean.ssim, mean(|m| m.ssim));
    assert_eq!(r.mean.tof, mean(|m| m.tof));
    assert_eq!(r.mean.tlp, mean(|m| m.tlp));
}
