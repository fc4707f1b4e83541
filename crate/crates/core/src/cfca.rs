//! Cross-frame context aggregation over low-resolution keyframes.
//!
//! Bidirectional flow-guided propagation produces a backward-fused and a
//! forward-fused video; each intermediate frame is then predicted from the
//! input, forward-fused and backward-fused keyframes with linear-motion
//! flow scaling, and the three candidates are merged by a small learned
//! fusion network.

use alloc::vec::Vec;

use crate::autodiff::{Graph, Var};
use crate::error::{domain_err, shape_err, Result};
use crate::flow::{backward_warp, consistency_mask, FlowEstimator};
use crate::nn::Conv;
use crate::params::{Binding, Group, Params};
use crate::real::Real;
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::video::{resize_bilinear, FlowField, Frame, ScaleFactors, ValidityMask, VideoTensor};

/// Input keyframes together with both propagated videos.
#[derive(Clone, Debug, PartialEq)]
pub struct PropagatedVideos {
    pub i_l: VideoTensor,
    pub i_f: VideoTensor,
    pub i_b: VideoTensor,
    /// `masks_b[n]` gates `n+1 → n`; `masks_f[n]` gates `n → n+1`.
    pub masks_b: Vec<ValidityMask>,
    pub masks_f: Vec<ValidityMask>,
}

/// Keyframe flows for every adjacent pair.
#[derive(Clone, Debug, PartialEq)]
pub struct KeyFlows {
    /// `n → n+1`.
    pub fwd: Vec<FlowField>,
    /// `n+1 → n`.
    pub bwd: Vec<FlowField>,
}

impl KeyFlows {
    pub fn estimate(i_l: &VideoTensor, est: &dyn FlowEstimator) -> Result<Self> {
        let (fwd, bwd) = crate::flow::pairwise_flows(&i_l.frames(), est)?;
        Ok(Self { fwd, bwd })
    }
}

fn blend(warped: &Frame, own: &Frame, mask: &ValidityMask) -> Frame {
    let c = own.c;
    let data = own
        .data
        .iter()
        .zip(&warped.data)
        .enumerate()
        .map(|(i, (&o, &w))| {
            let m = mask.data[i / c];
            w * m + o * (1.0 - m)
        })
        .collect();
    Frame { h: own.h, w: own.w, c, data }
}

/// Backward recursion from the last keyframe and its index-reversed twin
/// from the first.
pub fn propagate(i_l: &VideoTensor, flows: &KeyFlows, eps: f64) -> Result<PropagatedVideos> {
    let k = i_l.frames_len();
    if flows.fwd.len() != k - 1 || flows.bwd.len() != k - 1 {
        return Err(shape_err!("{} keyframes need {} flows each way, got {}/{}", k, k - 1, flows.fwd.len(), flows.bwd.len()));
    }
    let frames = i_l.frames();
    let mut masks_b = Vec::with_capacity(k - 1);
    let mut masks_f = Vec::with_capacity(k - 1);
    for n in 0..k - 1 {
        masks_b.push(consistency_mask(&flows.fwd[n], &flows.bwd[n], eps)?);
        masks_f.push(consistency_mask(&flows.bwd[n], &flows.fwd[n], eps)?);
    }
    let mut i_b = frames.clone();
    for n in (0..k - 1).rev() {
        let warped = backward_warp(&i_b[n + 1], &flows.fwd[n])?;
        i_b[n] = blend(&warped, &frames[n], &masks_b[n]);
    }
    let mut i_f = frames.clone();
    for n in 1..k {
        let warped = backward_warp(&i_f[n - 1], &flows.bwd[n - 1])?;
        i_f[n] = blend(&warped, &frames[n], &masks_f[n - 1]);
    }
    Ok(PropagatedVideos {
        i_l: i_l.clone(),
        i_f: VideoTensor::from_frames(&i_f)?,
        i_b: VideoTensor::from_frames(&i_b)?,
        masks_b,
        masks_f,
    })
}

/// Linear-motion flows from an intermediate instant `tau` to its two
/// keyframes: `(to_m, to_m1)`.
pub fn intermediate_flows(fwd: &FlowField, bwd: &FlowField, tau: f64) -> (FlowField, FlowField) {
    (bwd.scaled(tau), fwd.scaled(1.0 - tau))
}

/// One candidate: `τ·W(next, F_k→m+1) + (1−τ)·W(prev, F_k→m)`.
pub fn warp_blend(prev: &Frame, next: &Frame, to_m: &FlowField, to_m1: &FlowField, tau: f64) -> Result<Frame> {
    let s = 1.0 - tau;
    let wn = backward_warp(next, to_m1)?;
    let wp = backward_warp(prev, to_m)?;
    Ok(wn.lerp(&wp, 1.0 - s, s))
}

/// Candidates `[from I_l, from I_f, from I_b]` for the frame at fraction
/// `tau` between keyframes `m` and `m+1`.
pub fn predict_intermediate(v: &PropagatedVideos, m: usize, tau: f64, fwd: &FlowField, bwd: &FlowField) -> Result<[Frame; 3]> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(domain_err!("tau must lie in (0, 1), got {tau}"));
    }
    if m + 1 >= v.i_l.frames_len() {
        return Err(domain_err!("keyframe pair ({m}, {}) out of range", m + 1));
    }
    let (to_m, to_m1) = intermediate_flows(fwd, bwd, tau);
    let one = |vid: &VideoTensor| warp_blend(&vid.frame(m), &vid.frame(m + 1), &to_m, &to_m1, tau);
    Ok([one(&v.i_l)?, one(&v.i_f)?, one(&v.i_b)?])
}

/// How intermediate-frame candidates are formed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Aggregation {
    /// Per-pixel linear blend of the two neighbouring keyframes.
    Interp,
    /// Flow-warped blend of the two neighbouring input keyframes only.
    Flow2,
    /// Candidates from the input and both propagated videos.
    FlowMulti,
}

impl Aggregation {
    pub fn name(self) -> &'static str {
        match self {
            Aggregation::Interp => "interp",
            Aggregation::Flow2 => "flow2",
            Aggregation::FlowMulti => "flow_multi",
        }
    }
}

/// `(m, tau)` for every intermediate frame in temporal order.
pub fn intermediate_plan(k: usize, phi_t: usize) -> Vec<(usize, f64)> {
    let mut out = Vec::with_capacity(k.saturating_sub(1) * phi_t.saturating_sub(1));
    for m in 0..k.saturating_sub(1) {
        for j in 1..phi_t {
            out.push((m, j as f64 / phi_t as f64));
        }
    }
    out
}

/// Candidate triplets for every intermediate frame.
pub fn candidates(
    i_l: &VideoTensor,
    flows: &KeyFlows,
    phi_t: usize,
    mode: Aggregation,
    eps: f64,
) -> Result<Vec<[Frame; 3]>> {
    let k = i_l.frames_len();
    let plan = intermediate_plan(k, phi_t);
    match mode {
        Aggregation::Interp => Ok(plan
            .iter()
            .map(|&(m, tau)| {
                let f = i_l.frame(m + 1).lerp(&i_l.frame(m), tau, 1.0 - tau);
                [f.clone(), f.clone(), f]
            })
            .collect()),
        Aggregation::Flow2 => {
            if flows.fwd.len() != k - 1 || flows.bwd.len() != k - 1 {
                return Err(shape_err!("{} keyframes need {} flows each way", k, k - 1));
            }
            plan.iter()
                .map(|&(m, tau)| {
                    let (a, b) = intermediate_flows(&flows.fwd[m], &flows.bwd[m], tau);
                    let f = warp_blend(&i_l.frame(m), &i_l.frame(m + 1), &a, &b, tau)?;
                    Ok([f.clone(), f.clone(), f])
                })
                .collect()
        }
        Aggregation::FlowMulti => {
            let v = propagate(i_l, flows, eps)?;
            plan.iter().map(|&(m, tau)| predict_intermediate(&v, m, tau, &flows.fwd[m], &flows.bwd[m])).collect()
        }
    }
}

/// Three-layer conv net over the stacked candidates, residual around the
/// candidate warped from the input keyframes. With the zero-initialised
/// output layer the fused frame starts as the two-frame flow prediction.
#[derive(Clone, Debug)]
pub struct FusionNet {
    layers: [Conv; 3],
    channels: usize,
}

pub const FUSION_HIDDEN: usize = 16;

impl FusionNet {
    pub fn new<T: Real>(params: &mut Params<T>, rng: &mut Rng, channels: usize) -> Self {
        let g = Group::Fusion;
        let h = FUSION_HIDDEN;
        Self {
            layers: [
                Conv::new(params, rng, "fusion.0", g, 3, 3 * channels, h, 1, false),
                Conv::new(params, rng, "fusion.1", g, 3, h, h, 1, false),
                Conv::new(params, rng, "fusion.2", g, 3, h, channels, 1, true),
            ],
            channels,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// `[l, f, b]` each `[N,H,W,C]` → `[N,H,W,C]`, unclamped.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Binding, l: Var, f: Var, b: Var) -> Var {
        let x = g.concat_last(&[l, f, b]);
        let mut y = self.layers[0].forward(g, p, x);
        y = g.silu(y);
        y = self.layers[1].forward(g, p, y);
        y = g.silu(y);
        y = self.layers[2].forward(g, p, y);
        g.add(l, y)
    }
}

fn frame_tensor<T: Real>(f: &Frame) -> Tensor<T> {
    Tensor::from_f64(&[1, f.h, f.w, f.c], &f.data).unwrap()
}

/// Fuses one candidate triplet into a frame clamped to `[0, 1]`.
pub fn fuse_triplet<T: Real>(net: &FusionNet, params: &Params<T>, l: &Frame, f: &Frame, b: &Frame) -> Result<Frame> {
    if !(l.same_shape(f) && l.same_shape(b)) {
        return Err(shape_err!("fusion candidates differ in shape"));
    }
    if l.c != net.channels {
        return Err(shape_err!("fusion net expects {} channels, got {}", net.channels, l.c));
    }
    let mut g = Graph::new();
    let p = params.bind(&mut g, |_| false);
    let (vl, vf, vb) = (g.constant(frame_tensor(l)), g.constant(frame_tensor(f)), g.constant(frame_tensor(b)));
    let out = net.forward(&mut g, &p, vl, vf, vb);
    let data = g.value(out).to_f64().into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
    Ok(Frame { h: l.h, w: l.w, c: l.c, data })
}

/// Interleaves keyframes with the intermediates and upsamples by `phi_s`.
pub fn assemble_intermediate_video(i_l: &VideoTensor, intermediates: &[Frame], scales: ScaleFactors) -> Result<VideoTensor> {
    let (k, h, w, _) = i_l.dims();
    let need = (k - 1) * (scales.phi_t - 1);
    if intermediates.len() != need {
        return Err(shape_err!("expected {need} intermediate frames, got {}", intermediates.len()));
    }
    let mut frames = Vec::with_capacity((k - 1) * scales.phi_t + 1);
    let mut it = intermediates.iter();
    for m in 0..k {
        frames.push(i_l.frame(m));
        if m + 1 < k {
            for _ in 1..scales.phi_t {
                frames.push(it.next().unwrap().clone());
            }
        }
    }
    let v = VideoTensor::from_frames(&frames)?;
    resize_bilinear(&v, h * scales.phi_s, w * scales.phi_s)
}

/// Full inference-time aggregation: candidates, fusion, assembly.
pub fn aggregate<T: Real>(
    net: &FusionNet,
    params: &Params<T>,
    i_l: &VideoTensor,
    flows: &KeyFlows,
    scales: ScaleFactors,
    mode: Aggregation,
    eps: f64,
) -> Result<VideoTensor> {
    let cands = candidates(i_l, flows, scales.phi_t, mode, eps)?;
    let fused = cands.iter().map(|[l, f, b]| fuse_triplet(net, params, l, f, b)).collect::<Result<Vec<_>>>()?;
    assemble_intermediate_video(i_l, &fused, scales)
}

/// Stacks the candidate triplets into three `[N,H,W,C]` tensors.
pub fn stack_candidates<T: Real>(cands: &[[Frame; 3]]) -> [Tensor<T>; 3] {
    let first = &cands[0][0];
    let shape = [cands.len(), first.h, first.w, first.c];
    let pick = |a: usize| {
        let mut data = Vec::with_capacity(shape.iter().product());
        for c in cands {
            data.extend(c[a].data.iter().map(|&v| T::of(v)));
        }
        Tensor::new(&shape, data).unwrap()
    };
    [pick(0), pick(1), pick(2)]
}

/// Graph version of fusion plus interleaving; returns `[T,h,w,C]` at
/// keyframe resolution (upsampling is left to the caller).
pub fn fused_sequence<T: Real>(
    g: &mut Graph<T>,
    p: &Binding,
    net: &FusionNet,
    i_l: &VideoTensor,
    cands: &[[Frame; 3]],
    phi_t: usize,
) -> Var {
    let keys = g.constant(i_l.to_tensor());
    if cands.is_empty() {
        return keys;
    }
    let [l, f, b] = stack_candidates::<T>(cands);
    let (l, f, b) = (g.constant(l), g.constant(f), g.constant(b));
    let fused = net.forward(g, p, l, f, b);
    let fused = g.clamp(fused, T::zero(), T::one());
    let k = i_l.frames_len();
    let mut parts = Vec::with_capacity(2 * k);
    for m in 0..k {
        parts.push(g.slice0(keys, m, 1));
        if m + 1 < k {
            parts.push(g.slice0(fused, m * (phi_t - 1), phi_t - 1));
        }
    }
    g.concat0(&parts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use crate::datagen::{generate_clip, SceneSpec, ShapeKind, ShapeSpec};
    use crate::flow::InjectedTruth;
    use crate::rng::stream;

    fn noise_video(k: usize, h: usize, w: usize, seed: u64) -> VideoTensor {
        use rand::Rng as _;
        let mut r = stream(seed, "t");
        VideoTensor::new(k, h, w, 1, (0..k * h * w).map(|_| r.random_range(0.0..1.0)).collect()).unwrap()
    }

    fn zero_flows(k: usize, h: usize, w: usize) -> KeyFlows {
        KeyFlows { fwd: vec![FlowField::zeros(h, w); k - 1], bwd: vec![FlowField::zeros(h, w); k - 1] }
    }

    #[test]
    fn zero_masks_leave_input_untouched() {
        let v = noise_video(4, 5, 6, 1);
        // inconsistent flows everywhere: fwd + bwd = (3, 0)
        let flows = KeyFlows { fwd: vec![FlowField::constant(5, 6, 1.5, 0.0); 3], bwd: vec![FlowField::constant(5, 6, 1.5, 0.0); 3] };
        let p = propagate(&v, &flows, 1.0).unwrap();
        assert_eq!(p.i_b, v);
        assert_eq!(p.i_f, v);
    }

    #[test]
    fn zero_flow_telescopes_to_endpoints() {
        let v = noise_video(4, 3, 3, 2);
        let p = propagate(&v, &zero_flows(4, 3, 3), 1.0).unwrap();
        for n in 0..4 {
            assert_eq!(p.i_b.frame(n), v.frame(3));
            assert_eq!(p.i_f.frame(n), v.frame(0));
        }
    }

    #[test]
    fn flow_count_checked() {
        let v = noise_video(4, 3, 3, 2);
        assert!(propagate(&v, &zero_flows(3, 3, 3), 1.0).is_err());
    }

    #[test]
    fn static_candidates_are_blends() {
        let v = noise_video(2, 4, 4, 3);
        let p = propagate(&v, &zero_flows(2, 4, 4), 1.0).unwrap();
        let z = FlowField::zeros(4, 4);
        let [l, _, _] = predict_intermediate(&p, 0, 0.25, &z, &z).unwrap();
        let want = v.frame(1).lerp(&v.frame(0), 0.25, 0.75);
        for (a, b) in l.data.iter().zip(&want.data) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(predict_intermediate(&p, 0, 1.0, &z, &z).is_err());
        assert!(predict_intermediate(&p, 0, 0.0, &z, &z).is_err());
        let near = predict_intermediate(&p, 0, 1e-6, &z, &z).unwrap();
        assert!(near[0].data.iter().zip(&v.frame(0).data).all(|(a, b)| (a - b).abs() < 1e-3));
    }

    #[test]
    fn moving_rectangle_intermediate_matches_render() {
        let mut s = SceneSpec::empty(0, 9, 12, 32, 1, 0.2);
        s.shapes.push(ShapeSpec {
            kind: ShapeKind::Rectangle { w: 7.0, h: 5.0 },
            pos: (4.0, 3.0),
            velocity: (1.0, 0.0),
            intensity: vec![0.8],
            texture: 0.0,
        });
        let clip = generate_clip(&s).unwrap();
        let keys = clip.video.select(&[0, 4, 8]).unwrap();
        let truth = InjectedTruth { fwd: vec![s.flow_between(0, 4), s.flow_between(4, 8)], bwd: vec![s.flow_between(4, 0), s.flow_between(8, 4)] };
        let flows = KeyFlows::estimate(&keys, &truth).unwrap();
        let p = propagate(&keys, &flows, 1.0).unwrap();
        assert_eq!(p.i_b, keys);
        assert_eq!(p.i_f, keys);
        let cands = predict_intermediate(&p, 0, 0.5, &flows.fwd[0], &flows.bwd[0]).unwrap();
        let want = clip.video.frame(2);
        let mut valid = 0;
        for y in 0..12 {
            for x in 0..32 {
                if p.masks_b[0].at(y, x) * p.masks_f[0].at(y, x) == 1.0 {
                    valid += 1;
                    for c in &cands {
                        assert!((c.at(y, x, 0) - want.at(y, x, 0)).abs() < 1e-6, "({y},{x})");
                    }
                }
            }
        }
        assert!(valid > 12 * 32 / 2);
    }

    #[test]
    fn fusion_identity_at_init() {
        let mut params = Params::<f64>::new();
        let mut rng = stream(0, "init");
        let net = FusionNet::new(&mut params, &mut rng, 3);
        let f = Frame::new(4, 4, 3, (0..48).map(|i| i as f64 / 48.0).collect()).unwrap();
        let out = fuse_triplet(&net, &params, &f, &f, &f).unwrap();
        for (a, b) in out.data.iter().zip(&f.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn assembly_shapes() {
        let v = noise_video(5, 4, 4, 9);
        let ints = vec![Frame::filled(4, 4, 1, 0.5); 12];
        let out = assemble_intermediate_video(&v, &ints, ScaleFactors::new(2, 4).unwrap()).unwrap();
        assert_eq!(out.dims(), (17, 8, 8, 1));
        assert!(assemble_intermediate_video(&v, &ints[..11], ScaleFactors::new(2, 4).unwrap()).is_err());
        let up = assemble_intermediate_video(&v, &[], ScaleFactors::new(3, 1).unwrap()).unwrap();
        assert_eq!(up, resize_bilinear(&v, 12, 12).unwrap());
    }

    #[test]
    fn interp_and_flow2_agree_on_zero_flow() {
        let v = noise_video(3, 4, 4, 4);
        let a = candidates(&v, &zero_flows(3, 4, 4), 4, Aggregation::Interp, 1.0).unwrap();
        let b = candidates(&v, &zero_flows(3, 4, 4), 4, Aggregation::Flow2, 1.0).unwrap();
        assert_eq!(a.len(), 6);
        for (x, y) in a.iter().zip(&b) {
            for (p, q) in x[0].data.iter().zip(&y[0].data) {
                assert!((p - q).abs() < 1e-15);
            }
        }
    }
}
