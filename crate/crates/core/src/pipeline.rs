//! End-to-end model: aggregation, guidance, latent refinement, training.

use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::autodiff::{axis_taps, Graph, Var};
use crate::cfca::{assemble_intermediate_video, candidates, fused_sequence, Aggregation, FusionNet, KeyFlows};
use crate::datagen::{generate_clip, ClipWithTruth, RandomSceneConfig, SceneSpec};
use crate::degrade::{make_pair, DegradationConfig};
use crate::error::{shape_err, validation_err, Error, Result};
use crate::flow::{pairwise_flows, BlockMatcher, FlowEstimatorConfig};
use crate::latent::{NoiseSchedule, Vae, VaeConfig, VelocityConfig, VelocityNet};
use crate::losses::{consistency_var, mse_var, total_loss, FeatureNet, LossParts, LossWeights};
use crate::metrics::{evaluate_clip, MetricConfig, MetricReport};
use crate::optim::{AdamW, AdamWConfig};
use crate::params::{Group, Params};
use crate::real::Real;
use crate::rng::{derive_seed, stream, Rng};
use crate::tensor::Tensor;
use crate::video::{resize_bilinear, FlowField, Frame, ScaleFactors, VideoTensor};
use crate::vrg::{Vrg, VrgConfig};

/// Network sizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ArchConfig {
    pub channels: usize,
    pub vrg: VrgConfig,
    pub vae: VaeConfig,
    pub velocity: VelocityConfig,
}

impl ArchConfig {
    pub fn standard(channels: usize) -> Self {
        Self {
            channels,
            vrg: VrgConfig { channels, ..VrgConfig::default() },
            vae: VaeConfig { channels, ..VaeConfig::default() },
            velocity: VelocityConfig::default(),
        }
    }

    /// Smallest consistent configuration; for tests and gradient checks.
    pub fn tiny(channels: usize) -> Self {
        Self {
            channels,
            vrg: VrgConfig { channels, d: 16, queries: 2, text_tokens: 2, heads: 2, n_k: 3 },
            vae: VaeConfig { channels, latent: 4 },
            velocity: VelocityConfig { latent: 4, width: 8, blocks: 1, heads: 2, cond: 16 },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels;
        if c != 1 && c != 3 {
            return Err(validation_err!("channels must be 1 or 3, got {c}"));
        }
        if self.vrg.channels != c || self.vae.channels != c {
            return Err(validation_err!("sub-network channel counts disagree"));
        }
        if self.vrg.d != self.velocity.cond {
            return Err(validation_err!("condition width {} != velocity cond width {}", self.vrg.d, self.velocity.cond));
        }
        if self.vae.latent != self.velocity.latent {
            return Err(validation_err!("latent width mismatch"));
        }
        if self.vrg.d % self.vrg.heads != 0 || self.velocity.width % self.velocity.heads != 0 {
            return Err(validation_err!("attention heads must divide widths"));
        }
        if self.vrg.d % 4 != 0 || self.vrg.n_k == 0 {
            return Err(validation_err!("guidance width must be a multiple of 4 and n_k >= 1"));
        }
        Ok(())
    }
}

/// Which ablation arm a model runs as.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Arm {
    Interp,
    Flow2,
    FlowMulti,
    NoVrg,
    Full,
}

impl Arm {
    pub const ALL: [Arm; 5] = [Arm::Interp, Arm::Flow2, Arm::FlowMulti, Arm::NoVrg, Arm::Full];

    pub fn name(self) -> &'static str {
        match self {
            Arm::Interp => "interp",
            Arm::Flow2 => "flow2",
            Arm::FlowMulti => "flow_multi",
            Arm::NoVrg => "no_vrg",
            Arm::Full => "full",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.name() == s)
    }

    pub fn aggregation(self) -> Aggregation {
        match self {
            Arm::Interp => Aggregation::Interp,
            Arm::Flow2 => Aggregation::Flow2,
            _ => Aggregation::FlowMulti,
        }
    }

    pub fn uses_vrg(self) -> bool {
        self != Arm::NoVrg
    }
}

/// Flow settings for low-resolution keyframes. Keyframe motion is at most
/// `max_speed·φ_t/φ_s` pixels, within a single-level radius-2 search; coarser
/// pyramid levels of a 16×16 frame only add aliasing.
pub const KEYFRAME_FLOW: FlowEstimatorConfig =
    FlowEstimatorConfig { method: crate::flow::FlowMethod::BlockMatch, block: 5, search_radius: 2, levels: 1 };

/// Runtime settings shared by training and inference.
#[derive(Clone, Debug, PartialEq)]
pub struct Settings {
    pub scales: ScaleFactors,
    pub timestep: u32,
    pub schedule: NoiseSchedule,
    /// Forward-backward consistency threshold, pixels.
    pub mask_eps: f64,
    pub flow: FlowEstimatorConfig,
    pub arm: Arm,
    pub weights: LossWeights,
    pub feature_seed: u64,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            scales: ScaleFactors::default(),
            timestep: 799,
            schedule: NoiseSchedule::default(),
            mask_eps: 1.0,
            flow: KEYFRAME_FLOW,
            arm: Arm::Full,
            weights: LossWeights::default(),
            feature_seed: 0,
        }
    }
}

impl Settings {
    pub fn validate(&self) -> Result<()> {
        self.schedule.check(self.timestep)?;
        self.flow.validate()?;
        self.weights.validate()?;
        if !(self.mask_eps > 0.0) {
            return Err(validation_err!("mask eps must be > 0"));
        }
        if self.scales.phi_s == 0 || self.scales.phi_t == 0 {
            return Err(validation_err!("scale factors must be >= 1"));
        }
        Ok(())
    }
}

/// Low-quality keyframes with their intermediate-frame candidates.
#[derive(Clone, Debug, PartialEq)]
pub struct Inputs {
    pub lq: VideoTensor,
    pub cands: Vec<[Frame; 3]>,
}

impl Inputs {
    /// Candidates from flows estimated on `lq` itself.
    pub fn from_lq(lq: VideoTensor, s: &Settings) -> Result<Self> {
        let flows = KeyFlows::estimate(&lq, &BlockMatcher(s.flow))?;
        Self::with_flows(lq, &flows, s)
    }

    pub fn with_flows(lq: VideoTensor, flows: &KeyFlows, s: &Settings) -> Result<Self> {
        let cands = candidates(&lq, flows, s.scales.phi_t, s.arm.aggregation(), s.mask_eps)?;
        Ok(Self { lq, cands })
    }

    /// `(T, H, W, C)` of the restored video.
    pub fn output_dims(&self, scales: ScaleFactors) -> (usize, usize, usize, usize) {
        let (k, h, w, c) = self.lq.dims();
        ((k - 1) * scales.phi_t + 1, h * scales.phi_s, w * scales.phi_s, c)
    }
}

/// One training example.
#[derive(Clone, Debug, PartialEq)]
pub struct Prepared {
    pub inputs: Inputs,
    pub hq: VideoTensor,
    /// Consecutive-frame flows of `hq` (`i → i+1`, `i+1 → i`).
    pub fwd_h: Vec<FlowField>,
    pub bwd_h: Vec<FlowField>,
}

/// Degrades a clean clip and derives everything the loss needs. Clean-clip
/// flows come from the clip's ground truth when available, otherwise from
/// block matching on the clean frames.
pub fn prepare(clip: &ClipWithTruth, deg: &DegradationConfig, s: &Settings) -> Result<Prepared> {
    let (lq, hq) = make_pair(&clip.video, &DegradationConfig { scales: s.scales, ..*deg })?;
    let inputs = Inputs::from_lq(lq, s)?;
    let (fwd_h, bwd_h) = if clip.true_flow_fwd.len() + 1 == hq.frames_len() {
        (clip.true_flow_fwd.clone(), clip.true_flow_bwd.clone())
    } else {
        pairwise_flows(&hq.frames(), &BlockMatcher(s.flow))?
    };
    Ok(Prepared { inputs, hq, fwd_h, bwd_h })
}

/// Graph handles of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    pub i_m: Var,
    pub z: Var,
    pub c: Var,
    pub z_st: Var,
    pub i_st: Var,
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    pub arch: ArchConfig,
    pub params: Params<T>,
    pub fusion: FusionNet,
    pub vrg: Vrg,
    pub vae: Vae,
    pub velocity: VelocityNet,
}

impl<T: Real> Model<T> {
    pub fn new(arch: ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut params = Params::new();
        let fusion = FusionNet::new(&mut params, &mut stream(seed, "init/fusion"), arch.channels);
        let vrg = Vrg::new(&mut params, &mut stream(seed, "init/vrg"), arch.vrg);
        let vae = Vae::new(&mut params, &mut stream(seed, "init/vae"), arch.vae);
        let velocity = VelocityNet::new(&mut params, &mut stream(seed, "init/velocity"), arch.velocity);
        Ok(Self { arch, params, fusion, vrg, vae, velocity })
    }

    /// Model with externally supplied parameters; names and shapes must
    /// match the architecture exactly.
    pub fn with_params(arch: ArchConfig, params: Params<T>) -> Result<Self> {
        let mut m = Self::new(arch, 0)?;
        let (want, got) = (m.params.entries(), params.entries());
        if want.len() != got.len() {
            return Err(validation_err!("expected {} parameter tensors, got {}", want.len(), got.len()));
        }
        for (a, b) in want.iter().zip(got) {
            if a.name != b.name || a.group != b.group || a.value.shape() != b.value.shape() {
                return Err(validation_err!(
                    "parameter `{}` {:?} does not match `{}` {:?}",
                    b.name,
                    b.value.shape(),
                    a.name,
                    a.value.shape()
                ));
            }
        }
        m.params = params;
        Ok(m)
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            arch: self.arch,
            params: self.params.cast(),
            fusion: self.fusion.clone(),
            vrg: self.vrg.clone(),
            vae: self.vae.clone(),
            velocity: self.velocity.clone(),
        }
    }

    /// Builds the forward graph from keyframes to the restored video.
    pub fn forward(&self, g: &mut Graph<T>, p: &crate::params::Binding, inp: &Inputs, s: &Settings) -> Result<Forward> {
        s.validate()?;
        let (k, h, w, c) = inp.lq.dims();
        if c != self.arch.channels {
            return Err(shape_err!("model expects {} channels, got {c}", self.arch.channels));
        }
        let phi = s.scales;
        if inp.cands.len() != (k - 1) * (phi.phi_t - 1) {
            return Err(shape_err!("expected {} intermediate candidates, got {}", (k - 1) * (phi.phi_t - 1), inp.cands.len()));
        }
        let (hh, ww) = (h * phi.phi_s, w * phi.phi_s);
        if hh % crate::latent::VAE_STRIDE != 0 || ww % crate::latent::VAE_STRIDE != 0 {
            return Err(shape_err!("output {hh}x{ww} not divisible by the autoencoder stride"));
        }
        let seq = fused_sequence(g, p, &self.fusion, &inp.lq, &inp.cands, phi.phi_t);
        let i_m = if phi.phi_s == 1 { seq } else { g.resize(seq, axis_taps(h, hh), axis_taps(w, ww)) };
        let z = self.vae.encode(g, p, i_m);
        let cond = if s.arm.uses_vrg() { self.vrg.build(g, p, &inp.lq)? } else { self.vrg.text_only(g, p) };
        let z_st = self.velocity.one_step(g, p, &s.schedule, z, s.timestep, cond)?;
        let i_st = self.vae.decode(g, p, z_st);
        Ok(Forward { i_m, z, c: cond, z_st, i_st })
    }

    /// Restored video for `inp`.
    pub fn restore(&self, inp: &Inputs, s: &Settings) -> Result<VideoTensor> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, |_| false);
        let f = self.forward(&mut g, &p, inp, s)?;
        let out = g.value(f.i_st);
        if !out.is_finite() {
            return Err(Error::NonFinite("restored video".into()));
        }
        VideoTensor::from_tensor(out)
    }

    /// Loss terms and total on the graph.
    pub fn loss_graph(&self, g: &mut Graph<T>, p: &crate::params::Binding, ex: &Prepared, s: &Settings, feat: &FeatureNet) -> Result<(Var, [Var; 4])> {
        let f = self.forward(g, p, &ex.inputs, s)?;
        if g.shape(f.i_st) != [ex.hq.dims().0, ex.hq.dims().1, ex.hq.dims().2, ex.hq.dims().3] {
            return Err(shape_err!("restored shape {:?} differs from target {:?}", g.shape(f.i_st), ex.hq.dims()));
        }
        let hq = g.constant(ex.hq.to_tensor());
        let z_h = self.vae.encode(g, p, hq);
        let latent = mse_var(g, f.z_st, z_h);
        let rec = mse_var(g, f.i_st, hq);
        let perc = feat.perceptual(g, f.i_st, hq);
        let consis = consistency_var(g, f.i_st, &ex.fwd_h, &ex.bwd_h)?;
        let a = g.add(latent, rec);
        let a = g.add(a, perc);
        let cw = g.scale(consis, T::of(s.weights.gamma_consis));
        let total = g.add(a, cw);
        Ok((total, [latent, rec, perc, consis]))
    }

    /// Loss parts plus gradients for the groups accepted by `trainable`.
    pub fn loss_and_grads(
        &self,
        ex: &Prepared,
        s: &Settings,
        feat: &FeatureNet,
        trainable: impl Fn(Group) -> bool,
    ) -> Result<(LossParts, f64, Vec<Option<Tensor<T>>>)> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, trainable);
        let (total, [l, r, pc, cs]) = self.loss_graph(&mut g, &p, ex, s, feat)?;
        let parts = LossParts { latent: g.scalar(l).f64(), rec: g.scalar(r).f64(), perc: g.scalar(pc).f64(), consis: g.scalar(cs).f64() };
        let value = total_loss(&parts, &s.weights)?;
        let mut grads = g.backward(total);
        let grads = p.collect(&mut grads);
        if grads.iter().flatten().any(|t| !t.is_finite()) {
            return Err(Error::NonFinite("gradients".into()));
        }
        Ok((parts, value, grads))
    }
}

/// Bilinear upsampling of the keyframes plus per-pixel linear blending for
/// the missing frames.
pub fn baseline(lq: &VideoTensor, scales: ScaleFactors) -> Result<VideoTensor> {
    let k = lq.frames_len();
    let mut ints = Vec::with_capacity((k - 1) * (scales.phi_t - 1));
    for m in 0..k - 1 {
        for j in 1..scales.phi_t {
            let tau = j as f64 / scales.phi_t as f64;
            ints.push(lq.frame(m + 1).lerp(&lq.frame(m), tau, 1.0 - tau));
        }
    }
    assemble_intermediate_video(lq, &ints, scales)
}

/// Source of clean training clips by index.
pub trait ClipSource {
    fn clip(&self, index: u64) -> Result<ClipWithTruth>;
}

/// Endless random moving-shape clips.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCorpus {
    pub seed: u64,
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub scene: RandomSceneConfig,
}

impl ClipSource for SyntheticCorpus {
    fn clip(&self, index: u64) -> Result<ClipWithTruth> {
        let spec = SceneSpec::random(derive_seed(self.seed, "clip", index), self.t, self.h, self.w, self.c, &self.scene);
        generate_clip(&spec)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub adam: AdamWConfig,
    pub batch: usize,
    pub iters: usize,
    pub seed: u64,
    /// Degradation applied to every clip; its seed is replaced per clip.
    pub degradation: DegradationConfig,
    /// Random `(t, h, w)` window cut from each clean clip before
    /// degradation; `None` trains on whole clips.
    pub crop: Option<[usize; 3]>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { adam: AdamWConfig::default(), batch: 4, iters: 10_000, seed: 0, degradation: DegradationConfig::default(), crop: None }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.adam.validate()?;
        self.degradation.validate()?;
        if self.batch == 0 {
            return Err(validation_err!("batch must be >= 1"));
        }
        if let Some([t, h, w]) = self.crop {
            let s = self.degradation.scales;
            if t < 2 || (t - 1) % s.phi_t != 0 {
                return Err(validation_err!("crop_t must be 1 + a positive multiple of phi_t, got {t}"));
            }
            if h % (s.phi_s * crate::latent::VAE_STRIDE) != 0 || w % (s.phi_s * crate::latent::VAE_STRIDE) != 0 {
                return Err(validation_err!("crop {h}x{w} must be a multiple of phi_s times the autoencoder stride"));
            }
        }
        Ok(())
    }
}

/// Groups updated during end-to-end training; the autoencoder stays frozen.
pub fn trainable(g: Group) -> bool {
    g != Group::Vae
}

/// Optimisation state over one model.
pub struct Trainer<T> {
    pub model: Model<T>,
    pub opt: AdamW<T>,
    pub settings: Settings,
    pub cfg: TrainConfig,
    pub feat: FeatureNet,
    pub step: usize,
}

/// Per-step record.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub parts: LossParts,
    pub total: f64,
}

impl<T: Real> Trainer<T> {
    /// The degradation scales are taken from `settings`.
    pub fn new(model: Model<T>, settings: Settings, mut cfg: TrainConfig) -> Result<Self> {
        settings.validate()?;
        cfg.degradation.scales = settings.scales;
        cfg.validate()?;
        let opt = AdamW::new(cfg.adam, model.params.len());
        let feat = FeatureNet::new(settings.feature_seed, model.arch.channels);
        Ok(Self { model, opt, settings, cfg, feat, step: 0 })
    }

    /// Training example for batch slot `b` of step `step`.
    pub fn example(&self, source: &dyn ClipSource, step: usize, b: usize) -> Result<Prepared> {
        let idx = (step * self.cfg.batch + b) as u64;
        let mut clip = source.clip(idx)?;
        if let Some([t, h, w]) = self.cfg.crop {
            let (tt, hh, ww, _) = clip.video.dims();
            if t > tt || h > hh || w > ww {
                return Err(shape_err!("crop {t}x{h}x{w} exceeds clip {tt}x{hh}x{ww}"));
            }
            let mut rng: Rng = stream(derive_seed(self.cfg.seed, "crop", idx), "window");
            let t0 = rng.random_range(0..=tt - t);
            let y0 = rng.random_range(0..=hh - h);
            let x0 = rng.random_range(0..=ww - w);
            clip = clip.crop(t0, y0, x0, t, h, w)?;
        }
        let deg = DegradationConfig { seed: derive_seed(self.cfg.seed, "degrade", idx), ..self.cfg.degradation };
        prepare(&clip, &deg, &self.settings)
    }

    /// One AdamW step on the mean loss over `batch`.
    pub fn step_on(&mut self, batch: &[Prepared]) -> Result<StepLog> {
        let n = batch.len();
        if n == 0 {
            return Err(validation_err!("empty batch"));
        }
        let mut parts = LossParts::default();
        let mut total = 0.0;
        let mut acc: Option<Vec<Option<Tensor<T>>>> = None;
        for ex in batch {
            let (p, v, grads) = self.model.loss_and_grads(ex, &self.settings, &self.feat, trainable)?;
            parts.latent += p.latent / n as f64;
            parts.rec += p.rec / n as f64;
            parts.perc += p.perc / n as f64;
            parts.consis += p.consis / n as f64;
            total += v / n as f64;
            acc = Some(match acc {
                None => grads,
                Some(mut a) => {
                    for (x, y) in a.iter_mut().zip(grads) {
                        if let (Some(x), Some(y)) = (x.as_mut(), y) {
                            x.add_assign(&y);
                        }
                    }
                    a
                }
            });
        }
        let mut grads = acc.unwrap();
        if n > 1 {
            let s = T::of(1.0 / n as f64);
            for g in grads.iter_mut().flatten() {
                g.data_mut().iter_mut().for_each(|v| *v *= s);
            }
        }
        self.opt.update(&mut self.model.params, &grads);
        if !self.model.params.is_finite() {
            return Err(Error::NonFinite("parameters after update".into()));
        }
        self.step += 1;
        Ok(StepLog { step: self.step, parts, total })
    }

    pub fn train_step(&mut self, source: &dyn ClipSource) -> Result<StepLog> {
        let batch = (0..self.cfg.batch).map(|b| self.example(source, self.step, b)).collect::<Result<Vec<_>>>()?;
        self.step_on(&batch)
    }
}

/// Reconstruction pretraining recipe for the autoencoder.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VaePretrain {
    pub steps: usize,
    pub frames_per_step: usize,
    pub crop: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for VaePretrain {
    fn default() -> Self {
        Self { steps: 2000, frames_per_step: 8, crop: 32, lr: 2e-3, seed: 0 }
    }
}

fn crop_frame(f: &Frame, y0: usize, x0: usize, size: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(size * size * f.c);
    for y in y0..y0 + size {
        out.extend_from_slice(&f.data[(y * f.w + x0) * f.c..(y * f.w + x0 + size) * f.c]);
    }
    out
}

/// Trains only the autoencoder on random crops of clean frames and of
/// bilinear-upsampled degraded frames. Returns the final-step MSE.
pub fn pretrain_vae<T: Real>(
    model: &mut Model<T>,
    source: &dyn ClipSource,
    deg: &DegradationConfig,
    scales: ScaleFactors,
    recipe: &VaePretrain,
) -> Result<f64> {
    let c = model.arch.channels;
    let size = recipe.crop;
    if size % crate::latent::VAE_STRIDE != 0 {
        return Err(validation_err!("crop must be a multiple of the autoencoder stride"));
    }
    let adam = AdamWConfig { lr: recipe.lr, weight_decay: 0.0, ..AdamWConfig::default() };
    let mut opt = AdamW::new(adam, model.params.len());
    let mut rng: Rng = stream(recipe.seed, "vae/crops");
    let mut last = f64::NAN;
    let mut pool: Vec<Frame> = Vec::new();
    let mut clip_idx = 0u64;
    for step in 0..recipe.steps {
        // refresh the frame pool every few steps from a new clip
        if pool.is_empty() || step % 4 == 0 {
            let clip = source.clip(u64::MAX / 2 + clip_idx)?;
            let d = DegradationConfig { seed: derive_seed(recipe.seed, "vae/degrade", clip_idx), scales, ..*deg };
            clip_idx += 1;
            let (lq, hq) = make_pair(&clip.video, &d)?;
            let (_, h, w, _) = hq.dims();
            let up = resize_bilinear(&lq, h, w)?;
            pool = hq.frames();
            pool.extend(up.frames());
        }
        let (h, w) = (pool[0].h, pool[0].w);
        if h < size || w < size {
            return Err(shape_err!("crop {size} larger than frames {h}x{w}"));
        }
        let mut data = Vec::with_capacity(recipe.frames_per_step * size * size * c);
        for _ in 0..recipe.frames_per_step {
            let f = &pool[rng.random_range(0..pool.len())];
            let y0 = rng.random_range(0..=h - size);
            let x0 = rng.random_range(0..=w - size);
            data.extend(crop_frame(f, y0, x0, size));
        }
        let x = Tensor::from_f64(&[recipe.frames_per_step, size, size, c], &data)?;
        let mut g = Graph::new();
        let p = model.params.bind(&mut g, |grp| grp == Group::Vae);
        let xv = g.constant(x);
        let z = model.vae.encode(&mut g, &p, xv);
        let y = model.vae.decode(&mut g, &p, z);
        let loss = mse_var(&mut g, y, xv);
        last = g.scalar(loss).f64();
        if !last.is_finite() {
            return Err(Error::NonFinite(String::from("autoencoder reconstruction loss")));
        }
        let mut grads = g.backward(loss);
        let grads = p.collect(&mut grads);
        // cosine decay to 5% of the base rate
        let frac = step as f64 / recipe.steps.max(1) as f64;
        opt.cfg.lr = recipe.lr * (0.05 + 0.95 * 0.5 * (1.0 + libm::cos(core::f64::consts::PI * frac)));
        opt.update(&mut model.params, &grads);
    }
    Ok(last)
}

/// Seeded sub-stream for evaluation corpora, disjoint from training clips.
pub fn heldout_corpus(base: &SyntheticCorpus, seed: u64) -> SyntheticCorpus {
    SyntheticCorpus { seed: derive_seed(seed, "heldout", 0), ..base.clone() }
}

/// Held-out evaluation of `model` and of the interpolation baseline on
/// clips `0..n` of `source`. Clip `i` is degraded with seed
/// `derive_seed(deg.seed, "eval", i)`.
pub fn evaluate_corpus<T: Real>(
    model: &Model<T>,
    s: &Settings,
    source: &dyn ClipSource,
    n: usize,
    deg: &DegradationConfig,
    metrics: &MetricConfig,
) -> Result<(MetricReport, MetricReport)> {
    let feat = FeatureNet::new(metrics.feature_seed, model.arch.channels);
    let mut ours = Vec::with_capacity(n);
    let mut base = Vec::with_capacity(n);
    for i in 0..n as u64 {
        let clip = source.clip(i)?;
        let d = DegradationConfig { seed: derive_seed(deg.seed, "eval", i), ..*deg };
        let ex = prepare(&clip, &d, s)?;
        let id = alloc::format!("clip_{i:04}");
        let out = model.restore(&ex.inputs, s)?;
        ours.push(evaluate_clip(&id, &out, &ex.hq, metrics, &feat)?);
        let b = baseline(&ex.inputs.lq, s.scales)?;
        base.push(evaluate_clip(&id, &b, &ex.hq, metrics, &feat)?);
    }
    Ok((MetricReport::from_clips(metrics.fingerprint(), ours)?, MetricReport::from_clips(metrics.fingerprint(), base)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn corpus(t: usize, hw: usize) -> SyntheticCorpus {
        SyntheticCorpus { seed: 4, t, h: hw, w: hw, c: 1, scene: RandomSceneConfig::default() }
    }

    fn trainer(seed: u64) -> Trainer<f32> {
        let model = Model::new(ArchConfig::tiny(1), seed).unwrap();
        let cfg = TrainConfig { batch: 1, seed, adam: AdamWConfig { lr: 1e-3, ..AdamWConfig::default() }, ..TrainConfig::default() };
        Trainer::new(model, Settings::default(), cfg).unwrap()
    }

    #[test]
    fn restored_shape_follows_the_scale_law() {
        let model = Model::<f32>::new(ArchConfig::tiny(1), 1).unwrap();
        let lq = VideoTensor::new(9, 32, 32, 1, (0..9 * 32 * 32).map(|i| (i % 7) as f64 / 7.0).collect()).unwrap();
        let s = Settings::default();
        let inp = Inputs::from_lq(lq, &s).unwrap();
        assert_eq!(inp.output_dims(s.scales), (33, 128, 128, 1));
        let out = model.restore(&inp, &s).unwrap();
        assert_eq!(out.dims(), (33, 128, 128, 1));
        assert_eq!(model.restore(&inp, &s).unwrap(), out);
    }

    #[test]
    fn indivisible_output_is_a_shape_error() {
        let model = Model::<f32>::new(ArchConfig::tiny(1), 1).unwrap();
        let s = Settings { scales: ScaleFactors::new(1, 4).unwrap(), ..Settings::default() };
        let lq = VideoTensor::new(2, 6, 6, 1, vec![0.5; 72]).unwrap();
        let inp = Inputs::from_lq(lq, &s).unwrap();
        assert!(matches!(model.restore(&inp, &s), Err(Error::Shape(_))));
    }

    #[test]
    fn training_is_deterministic_and_keeps_the_autoencoder_frozen() {
        let src = corpus(9, 16);
        let (mut a, mut b) = (trainer(3), trainer(3));
        let before = a.model.params.clone();
        let la: Vec<StepLog> = (0..2).map(|_| a.train_step(&src).unwrap()).collect();
        let lb: Vec<StepLog> = (0..2).map(|_| b.train_step(&src).unwrap()).collect();
        assert_eq!(la, lb);
        assert_eq!(a.model.params, b.model.params);
        for (x, y) in before.entries().iter().zip(a.model.params.entries()) {
            if x.group == Group::Vae {
                assert_eq!(x.value, y.value, "{} moved", x.name);
            }
        }
        let moved = |g: Group| before.entries().iter().zip(a.model.params.entries()).any(|(x, y)| x.group == g && x.value != y.value);
        assert!(moved(Group::Fusion) && moved(Group::Vrg) && moved(Group::Velocity));
        assert!(la.iter().all(|l| l.total.is_finite() && l.parts.latent >= 0.0 && l.parts.consis >= 0.0));
    }

    #[test]
    fn crops_are_deterministic_windows() {
        let src = corpus(17, 32);
        let mut t = trainer(2);
        t.cfg.crop = Some([9, 16, 16]);
        t.cfg.validate().unwrap();
        let a = t.example(&src, 0, 0).unwrap();
        assert_eq!(a.hq.dims(), (9, 16, 16, 1));
        assert_eq!(a.inputs.lq.dims(), (3, 4, 4, 1));
        assert_eq!(a.fwd_h.len(), 8);
        assert_eq!(t.example(&src, 0, 0).unwrap(), a);
        t.cfg.crop = Some([8, 16, 16]);
        assert!(t.cfg.validate().is_err());
    }

    #[test]
    fn arms_map_to_aggregation_and_conditioning() {
        for a in Arm::ALL {
            assert_eq!(Arm::parse(a.name()), Some(a));
        }
        assert_eq!(Arm::Interp.aggregation(), Aggregation::Interp);
        assert_eq!(Arm::Flow2.aggregation(), Aggregation::Flow2);
        assert!(!Arm::NoVrg.uses_vrg() && Arm::Full.uses_vrg());
        assert_eq!(Arm::parse("nope"), None);
    }

    #[test]
    fn baseline_keeps_keyframes_and_blends_between() {
        let lq = VideoTensor::new(2, 1, 1, 1, vec![0.0, 1.0]).unwrap();
        let out = baseline(&lq, ScaleFactors::new(1, 4).unwrap()).unwrap();
        assert_eq!(out.data(), &[0.0, 0.25, 0.5, 0.75, 1.0]);
    }
}
