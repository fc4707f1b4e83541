//! Acceptance suite. Runs every criterion at its stated tolerance and prints
//! one PASS/FAIL line per criterion; exits non-zero if any fails.
//!
//! `STVSR_ACCEPT=1,3` runs a subset.

use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use rand::Rng as _;
use stvsr_core::autodiff::Graph;
use stvsr_core::cfca::{predict_intermediate, propagate, KeyFlows};
use stvsr_core::datagen::{generate_clip, RandomSceneConfig, SceneSpec, ShapeKind, ShapeSpec};
use stvsr_core::degrade::DegradationConfig;
use stvsr_core::flow::{backward_warp, consistency_mask, estimate_flow, FlowEstimatorConfig, InjectedTruth};
use stvsr_core::latent::{one_step_sample, BoundVelocity, NoiseSchedule, VelocityField};
use stvsr_core::losses::FeatureNet;
use stvsr_core::metrics::{psnr, ssim, t_lp, t_of, MetricConfig, PSNR_CAP};
use stvsr_core::optim::AdamWConfig;
use stvsr_core::params::{Group, Params};
use stvsr_core::pipeline::{
    evaluate_corpus, heldout_corpus, prepare, pretrain_vae, ArchConfig, Arm, Model, Settings, SyntheticCorpus, TrainConfig,
    Trainer, VaePretrain,
};
use stvsr_core::rng::stream;
use stvsr_core::{ScaleFactors, Tensor, VideoTensor};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---- 1. sampler algebra

struct Affine {
    a: f64,
    b: f64,
}

impl VelocityField<f64> for Affine {
    fn velocity(&self, z: &Tensor<f64>, _t: u32, _c: &Tensor<f64>) -> stvsr_core::Result<Tensor<f64>> {
        Ok(z.map(|v| self.a * v + self.b))
    }
}

fn sampler_algebra() -> Outcome {
    let sched = NoiseSchedule { t_max: 1000 };
    let sigma = sched.sigma(799).map_err(|e| e.to_string())?;
    let mut r = stream(1, "accept/sampler");
    let z = Tensor::from_fn(&[3, 4, 4, 8], |_| r.random_range(-2.0..2.0));
    let c = Tensor::zeros(&[8, 64]);
    let mut worst: f64 = 0.0;
    for (a, b) in [(0.0, 1.0), (0.0, -0.37), (1.5, 0.0), (-0.25, 0.6)] {
        let f = Affine { a, b };
        let out = one_step_sample(&f, &sched, &z, 799, &c).map_err(|e| e.to_string())?;
        for (o, zi) in out.data().iter().zip(z.data()) {
            worst = worst.max((o - (zi - 0.799 * (a * zi + b))).abs());
        }
    }
    // the real network at initialisation has zero output
    let model = Model::<f64>::new(ArchConfig::tiny(3), 2).map_err(|e| e.to_string())?;
    let bound = BoundVelocity { net: &model.velocity, params: &model.params };
    let zl = Tensor::from_fn(&[2, 4, 4, 4], |i| (i % 5) as f64 * 0.1);
    let cl = Tensor::zeros(&[4, 16]);
    let same = one_step_sample(&bound, &sched, &zl, 799, &cl).map_err(|e| e.to_string())?;
    let init_ok = same == zl;
    check(
        sigma == 0.799 && worst <= 1e-15 && init_ok,
        format!("sigma(799)={sigma}, max |z_st - (z - sigma*V)| = {worst:.1e}, zero-init net identity: {init_ok}"),
    )
}

// ---- 2. warp and mask oracles, block matching accuracy

// Integer motions give consistency errors of 0 or >= 1 px, and a unit-speed
// occlusion sits exactly on the default 1 px threshold, so the oracles use a
// threshold strictly between the two.
const ORACLE_EPS: f64 = 0.5;

fn warp_and_flow() -> Outcome {
    let cfg = RandomSceneConfig { texture: 0.4, ..RandomSceneConfig::default() };
    let mut worst: f64 = 0.0;
    let mut valid = 0usize;
    let mut total = 0usize;
    for seed in 0..20 {
        let spec = SceneSpec::random(seed, 6, 32, 32, 3, &cfg);
        let clip = generate_clip(&spec).map_err(|e| e.to_string())?;
        for n in 0..5 {
            let m = consistency_mask(&clip.true_flow_fwd[n], &clip.true_flow_bwd[n], ORACLE_EPS).map_err(|e| e.to_string())?;
            let w = backward_warp(&clip.video.frame(n + 1), &clip.true_flow_fwd[n]).map_err(|e| e.to_string())?;
            let f = clip.video.frame(n);
            for y in 0..32 {
                for x in 0..32 {
                    total += 1;
                    // a shape leaving the frame has no neighbour pixel to reproduce
                    let (dx, dy) = clip.true_flow_fwd[n].at(y, x);
                    let (tx, ty) = (x as f64 + dx, y as f64 + dy);
                    let inside = (0.0..=31.0).contains(&tx) && (0.0..=31.0).contains(&ty);
                    if inside && m.at(y, x) == 1.0 {
                        valid += 1;
                        for c in 0..3 {
                            worst = worst.max((w.at(y, x, c) - f.at(y, x, c)).abs());
                        }
                    }
                }
            }
        }
    }
    // block matching on a textured shape shifted by (+2, 0)
    let mut s = SceneSpec::empty(3, 2, 32, 40, 3, 0.5);
    s.shapes.push(ShapeSpec {
        kind: ShapeKind::Rectangle { w: 34.0, h: 30.0 },
        pos: (1.0, 1.0),
        velocity: (2.0, 0.0),
        intensity: vec![0.5, 0.4, 0.6],
        texture: 0.6,
    });
    let clip = generate_clip(&s).map_err(|e| e.to_string())?;
    let fc = FlowEstimatorConfig::default();
    let est = estimate_flow(&clip.video.frame(0), &clip.video.frame(1), &fc).map_err(|e| e.to_string())?;
    // interior: the matching window plus search range stays on the shape
    let margin = fc.block / 2 + fc.search_radius;
    let (mut epe, mut n) = (0.0, 0usize);
    for y in 1 + margin..31 - margin {
        for x in 1 + margin..33 - margin {
            let (dx, dy) = est.at(y, x);
            let (tx, ty) = clip.true_flow_fwd[0].at(y, x);
            epe += ((dx - tx).powi(2) + (dy - ty).powi(2)).sqrt();
            n += 1;
        }
    }
    let epe = epe / n as f64;
    check(
        worst == 0.0 && valid * 2 > total && epe < 0.25,
        format!("warp max error on {valid}/{total} mask-valid in-frame pixels = {worst:.1e}; block-matching interior EPE = {epe:.4} px"),
    )
}

// ---- 3. propagation and candidate fixed points

fn single_shape(kind: ShapeKind, pos: (f64, f64), velocity: (f64, f64), t: usize) -> SceneSpec {
    let mut s = SceneSpec::empty(7, t, 24, 40, 1, 0.2);
    s.shapes.push(ShapeSpec { kind, pos, velocity, intensity: vec![0.8], texture: 0.0 });
    s
}

fn key_truth(s: &SceneSpec, keys: &[usize]) -> InjectedTruth {
    InjectedTruth {
        fwd: keys.windows(2).map(|w| s.flow_between(w[0], w[1])).collect(),
        bwd: keys.windows(2).map(|w| s.flow_between(w[1], w[0])).collect(),
    }
}

fn fixed_points() -> Outcome {
    // static scenes: every propagated video equals the input
    let mut static_ok = true;
    for seed in 0..10 {
        let cfg = RandomSceneConfig { max_speed: 0, texture: 0.3, ..RandomSceneConfig::default() };
        let spec = SceneSpec::random(seed, 9, 24, 24, 3, &cfg);
        let clip = generate_clip(&spec).map_err(|e| e.to_string())?;
        let keys = clip.video.select(&[0, 4, 8]).map_err(|e| e.to_string())?;
        let flows = KeyFlows::estimate(&keys, &key_truth(&spec, &[0, 4, 8])).map_err(|e| e.to_string())?;
        let p = propagate(&keys, &flows, 1.0).map_err(|e| e.to_string())?;
        static_ok &= p.i_b == keys && p.i_f == keys;
    }
    // constant velocity: candidates against the rendered intermediate frames
    let scenes = [
        single_shape(ShapeKind::Rectangle { w: 7.0, h: 5.0 }, (4.0, 3.0), (1.0, 0.0), 9),
        single_shape(ShapeKind::Rectangle { w: 9.0, h: 6.0 }, (25.0, 12.0), (-1.0, 1.0), 9),
        single_shape(ShapeKind::Disk { r: 5.0 }, (10.0, 11.0), (2.0, 0.0), 9),
        single_shape(ShapeKind::Disk { r: 6.0 }, (28.0, 8.0), (-1.0, 1.0), 5),
    ];
    let mut worst: f64 = 0.0;
    let (mut valid, mut total) = (0usize, 0usize);
    for s in &scenes {
        let clip = generate_clip(s).map_err(|e| e.to_string())?;
        let idx: Vec<usize> = (0..s.t).step_by(4).collect();
        let keys = clip.video.select(&idx).map_err(|e| e.to_string())?;
        let flows = KeyFlows::estimate(&keys, &key_truth(s, &idx)).map_err(|e| e.to_string())?;
        let p = propagate(&keys, &flows, ORACLE_EPS).map_err(|e| e.to_string())?;
        for m in 0..idx.len() - 1 {
            for j in 1..4 {
                let tau = j as f64 / 4.0;
                let cands = predict_intermediate(&p, m, tau, &flows.fwd[m], &flows.bwd[m]).map_err(|e| e.to_string())?;
                let want = clip.video.frame(idx[m] + j);
                for y in 0..s.h {
                    for x in 0..s.w {
                        total += 1;
                        // interior: one object owns the pixel at both keyframes and in between
                        let o = s.owner(idx[m] + j, x, y);
                        let interior = s.owner(idx[m], x, y) == o && s.owner(idx[m + 1], x, y) == o;
                        if interior && p.masks_b[m].at(y, x) * p.masks_f[m].at(y, x) == 1.0 {
                            valid += 1;
                            for c in &cands {
                                worst = worst.max((c.at(y, x, 0) - want.at(y, x, 0)).abs());
                            }
                        }
                    }
                }
            }
        }
    }
    check(
        static_ok && worst < 1e-6 && valid * 2 > total,
        format!("static I_b == I_f == I_l: {static_ok}; moving scenes max candidate error {worst:.1e} on {valid}/{total} mask-valid interior pixels"),
    )
}

// ---- 4. gradient integrity

fn perturb_zero_tensors(params: &mut Params<f64>, seed: u64) {
    let mut r = stream(seed, "accept/perturb");
    for i in 0..params.len() {
        let t = params.value_mut(i);
        if t.data().iter().all(|&v| v == 0.0) {
            for v in t.data_mut() {
                *v = r.random_range(-0.05..0.05);
            }
        }
    }
}

fn gradient_integrity() -> Outcome {
    let scales = ScaleFactors::new(2, 3).map_err(|e| e.to_string())?;
    let settings = Settings { scales, ..Settings::default() };
    let mut model = Model::<f64>::new(ArchConfig::tiny(3), 11).map_err(|e| e.to_string())?;
    perturb_zero_tensors(&mut model.params, 11);
    let cfg = RandomSceneConfig { texture: 0.3, ..RandomSceneConfig::default() };
    let spec = SceneSpec::random(5, 4, 16, 16, 3, &cfg);
    let clip = generate_clip(&spec).map_err(|e| e.to_string())?;
    let deg = DegradationConfig { seed: 5, ..DegradationConfig::default() };
    let ex = prepare(&clip, &deg, &settings).map_err(|e| e.to_string())?;
    let feat = FeatureNet::new(0, 3);
    let groups = [Group::Fusion, Group::Vrg, Group::Velocity];
    let (parts, _, grads) = model.loss_and_grads(&ex, &settings, &feat, |g| groups.contains(&g)).map_err(|e| e.to_string())?;
    let active = parts.latent > 0.0 && parts.rec > 0.0 && parts.perc > 0.0 && parts.consis > 0.0;
    let loss = |m: &Model<f64>| -> f64 {
        let mut g = Graph::new();
        let p = m.params.bind(&mut g, |_| false);
        let (total, _) = m.loss_graph(&mut g, &p, &ex, &settings, &feat).unwrap();
        g.scalar(total)
    };
    let h = 1e-4;
    let mut r = stream(4, "accept/coords");
    let mut lines = Vec::new();
    let mut ok = active;
    for grp in groups {
        let ids: Vec<usize> = (0..model.params.len()).filter(|&i| model.params.entries()[i].group == grp).collect();
        let mut worst: f64 = 0.0;
        let mut checked = 0;
        let mut tries = 0;
        while checked < 12 && tries < 1000 {
            tries += 1;
            let i = ids[r.random_range(0..ids.len())];
            let g = grads[i].as_ref().ok_or("missing gradient")?;
            let k = r.random_range(0..g.len());
            let a = g.data()[k];
            if a.abs() < 1e-7 {
                continue;
            }
            let mut m = model.clone();
            let x0 = m.params.entries()[i].value.data()[k];
            m.params.value_mut(i).data_mut()[k] = x0 + h;
            let up = loss(&m);
            m.params.value_mut(i).data_mut()[k] = x0 - h;
            let down = loss(&m);
            let n = (up - down) / (2.0 * h);
            worst = worst.max((a - n).abs() / a.abs().max(n.abs()));
            checked += 1;
        }
        ok &= checked == 12 && worst < 1e-4;
        lines.push(format!("{} max rel err {worst:.2e} over {checked} coords", grp.name()));
    }
    check(ok, format!("all four terms active: {active}; {}", lines.join("; ")))
}

// ---- 5. end-to-end toy training

fn toy_corpus() -> SyntheticCorpus {
    SyntheticCorpus { seed: 1, t: 17, h: 64, w: 64, c: 3, scene: RandomSceneConfig::default() }
}

const TOY_LR: f64 = 5e-4;

// shared by the training and ablation criteria
static PRETRAINED: OnceLock<Result<Model<f32>, String>> = OnceLock::new();

fn pretrained(corpus: &SyntheticCorpus, deg: &DegradationConfig) -> Result<Model<f32>, String> {
    PRETRAINED
        .get_or_init(|| {
            let mut model = Model::<f32>::new(ArchConfig::standard(3), 7).map_err(|e| e.to_string())?;
            let mse = pretrain_vae(&mut model, corpus, deg, ScaleFactors::default(), &VaePretrain::default()).map_err(|e| e.to_string())?;
            println!("    autoencoder pretrained, final mse {mse:.5}");
            Ok(model)
        })
        .clone()
}

fn train(model: Model<f32>, arm: Arm, corpus: &SyntheticCorpus, deg: &DegradationConfig, iters: usize, batch: usize) -> Result<Model<f32>, String> {
    let settings = Settings { arm, ..Settings::default() };
    let cfg = TrainConfig { adam: AdamWConfig { lr: TOY_LR, ..AdamWConfig::default() }, batch, iters, seed: 3, degradation: *deg, crop: None };
    let mut t = Trainer::new(model, settings, cfg).map_err(|e| e.to_string())?;
    let t0 = Instant::now();
    for i in 0..iters {
        let log = t.train_step(corpus).map_err(|e| e.to_string())?;
        if (i + 1) % 250 == 0 {
            println!("    [{}] step {} loss {:.5} ({:.0} s)", arm.name(), log.step, log.total, t0.elapsed().as_secs_f64());
        }
    }
    Ok(t.model)
}

fn toy_training() -> Outcome {
    let corpus = toy_corpus();
    let deg = DegradationConfig::default();
    let model = pretrained(&corpus, &deg)?;
    let model = train(model, Arm::Full, &corpus, &deg, 2000, 2)?;
    let held = heldout_corpus(&corpus, 99);
    let (ours, base) = evaluate_corpus(&model, &Settings::default(), &held, 8, &DegradationConfig { seed: 5, ..deg }, &MetricConfig::default())
        .map_err(|e| e.to_string())?;
    let (o, b) = (ours.mean, base.mean);
    check(
        o.psnr - b.psnr >= 1.0 && o.tof < b.tof && o.tlp < b.tlp,
        format!(
            "held-out PSNR {:.3} vs baseline {:.3} (gain {:+.3} dB); tOF {:.4} vs {:.4}; tLP {:.4} vs {:.4}",
            o.psnr,
            b.psnr,
            o.psnr - b.psnr,
            o.tof,
            b.tof,
            o.tlp,
            b.tlp
        ),
    )
}

// ---- 6. ablation ordering

const ABLATION_ITERS: usize = 500;

fn ablation() -> Outcome {
    let corpus = toy_corpus();
    let deg = DegradationConfig::default();
    let start = pretrained(&corpus, &deg)?;
    let held = heldout_corpus(&corpus, 99);
    let mut psnr_of = std::collections::BTreeMap::new();
    // `full` builds the same model as `flow_multi`
    for arm in [Arm::Interp, Arm::Flow2, Arm::FlowMulti, Arm::NoVrg] {
        let m = train(start.clone(), arm, &corpus, &deg, ABLATION_ITERS, 2)?;
        let s = Settings { arm, ..Settings::default() };
        let (r, _) = evaluate_corpus(&m, &s, &held, 8, &DegradationConfig { seed: 5, ..deg }, &MetricConfig::default()).map_err(|e| e.to_string())?;
        println!("    {:<10} psnr {:.4}", arm.name(), r.mean.psnr);
        psnr_of.insert(arm.name(), r.mean.psnr);
    }
    let (i, f2, fm, nv) = (psnr_of["interp"], psnr_of["flow2"], psnr_of["flow_multi"], psnr_of["no_vrg"]);
    check(
        f2 - i >= 0.1 && fm - f2 >= 0.1 && fm >= nv,
        format!("interp {i:.3} / flow2 {f2:.3} / flow_multi {fm:.3} dB (gaps {:+.3}, {:+.3}); full {fm:.3} vs no_vrg {nv:.3}", f2 - i, fm - f2),
    )
}

// ---- 7. metric sanity

fn jitter(v: &VideoTensor, level: usize) -> VideoTensor {
    let idx: Vec<usize> = (0..v.frames_len()).map(|n| n - n % (level + 1)).collect();
    v.select(&idx).unwrap()
}

fn metric_sanity() -> Outcome {
    let cfg = RandomSceneConfig { texture: 0.3, ..RandomSceneConfig::default() };
    let mc = MetricConfig::default();
    let feat = FeatureNet::new(mc.feature_seed, 3);
    let mut ideal = true;
    let mut ladder_ok = true;
    let mut means = [0.0; 3];
    for seed in 0..6 {
        let clip = generate_clip(&SceneSpec::random(100 + seed, 9, 32, 32, 3, &cfg)).map_err(|e| e.to_string())?;
        let v = &clip.video;
        ideal &= psnr(v, v).unwrap() == PSNR_CAP && (ssim(v, v).unwrap() - 1.0).abs() < 1e-12;
        ideal &= t_of(v, v, &mc.flow).unwrap() == 0.0 && t_lp(v, v, &feat).unwrap() == 0.0;
        let l: Vec<f64> = (0..3).map(|j| t_lp(&jitter(v, j), v, &feat).unwrap()).collect();
        ladder_ok &= l[0] <= l[1] && l[1] <= l[2];
        for j in 0..3 {
            means[j] += l[j] / 6.0;
        }
    }
    ladder_ok &= means[1] > 0.0;
    check(
        ideal && ladder_ok,
        format!("ideal values on identical inputs: {ideal}; tLP jitter ladder {:.4} <= {:.4} <= {:.4}", means[0], means[1], means[2]),
    )
}

// ---- 8. determinism of the command-line pipeline

fn run_cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_stvsr")).args(args).output().map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("stvsr {args:?} failed: {}", String::from_utf8_lossy(&out.stderr)));
    }
    Ok(())
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = dir.path();
    let cfg = d.join("toy.toml");
    std::fs::write(
        &cfg,
        "[data]\nclips = 2\nframes = 9\nheight = 32\nwidth = 32\n[train]\niters = 4\nbatch = 2\nlr = 5e-4\nvae_steps = 20\n",
    )
    .map_err(|e| e.to_string())?;
    let c = cfg.to_str().unwrap();
    let p = |name: &str| d.join(name).to_str().unwrap().to_string();
    run_cli(&["--config", c, "--seed", "9", "synth-data", "--out", &p("data")])?;
    std::fs::create_dir_all(d.join("lq")).map_err(|e| e.to_string())?;
    std::fs::create_dir_all(d.join("ref")).map_err(|e| e.to_string())?;
    run_cli(&["--config", c, "--seed", "9", "degrade", "--in", &p("data/clip_0000.rvid"), "--out", &p("lq/clip_0000.rvid")])?;
    std::fs::copy(d.join("data/clip_0000.rvid"), d.join("ref/clip_0000.rvid")).map_err(|e| e.to_string())?;
    for run in ["a", "b"] {
        run_cli(&["--config", c, "--seed", "9", "train", "--data", &p("data"), "--out", &p(&format!("{run}.ckpt"))])?;
        std::fs::create_dir_all(d.join(format!("out_{run}"))).map_err(|e| e.to_string())?;
        run_cli(&[
            "--config",
            c,
            "restore",
            "--in",
            &p("lq/clip_0000.rvid"),
            "--checkpoint",
            &p(&format!("{run}.ckpt")),
            "--out",
            &p(&format!("out_{run}/clip_0000.rvid")),
        ])?;
        run_cli(&["--config", c, "evaluate", "--restored", &p(&format!("out_{run}")), "--reference", &p("ref"), "--out", &p(&format!("{run}.json"))])?;
    }
    let same = |a: &str, b: &str| -> Result<bool, String> {
        Ok(std::fs::read(Path::new(&p(a))).map_err(|e| e.to_string())? == std::fs::read(Path::new(&p(b))).map_err(|e| e.to_string())?)
    };
    let ck = same("a.ckpt", "b.ckpt")?;
    let log = same("a.ckpt.log.jsonl", "b.ckpt.log.jsonl")?;
    let out = same("out_a/clip_0000.rvid", "out_b/clip_0000.rvid")?;
    let rep = same("a.json", "b.json")?;
    check(ck && log && out && rep, format!("identical checkpoints {ck}, logs {log}, restored outputs {out}, reports {rep}"))
}

fn main() {
    let only: Option<Vec<usize>> = std::env::var("STVSR_ACCEPT").ok().map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let criteria: [(usize, &str, fn() -> Outcome); 8] = [
        (1, "sampler algebra", sampler_algebra),
        (2, "warp/mask oracles and block matching", warp_and_flow),
        (3, "propagation and candidate fixed points", fixed_points),
        (4, "gradient integrity", gradient_integrity),
        (5, "end-to-end toy training", toy_training),
        (6, "ablation ordering", ablation),
        (7, "metric sanity", metric_sanity),
        (8, "determinism", determinism),
    ];
    let mut failed = 0;
    for (n, name, f) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let t0 = Instant::now();
        let r = f();
        let secs = t0.elapsed().as_secs_f64();
        match r {
            Ok(d) => println!("criterion {n} [{name}]: PASS ({d}) [{secs:.1} s]"),
            Err(d) => {
                failed += 1;
                println!("criterion {n} [{name}]: FAIL ({d}) [{secs:.1} s]");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
