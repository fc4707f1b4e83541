//! Training objective: latent MSE, pixel MSE, random-feature perceptual
//! distance and bidirectional flow-warped temporal consistency.

use alloc::format;
use alloc::vec::Vec;

use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Graph, Var};
use crate::error::{shape_err, validation_err, Error, Result};
use crate::flow::warp_taps;
use crate::real::Real;
use crate::rng::{stream, Rng};
use crate::tensor::Tensor;
use crate::video::{FlowField, VideoTensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub gamma_consis: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { gamma_consis: 0.1 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !self.gamma_consis.is_finite() || self.gamma_consis < 0.0 {
            return Err(validation_err!("gamma_consis must be finite and >= 0, got {}", self.gamma_consis));
        }
        Ok(())
    }
}

/// Values of the four terms.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub latent: f64,
    pub rec: f64,
    pub perc: f64,
    pub consis: f64,
}

impl LossParts {
    pub fn named(&self) -> [(&'static str, f64); 4] {
        [("latent", self.latent), ("rec", self.rec), ("perc", self.perc), ("consis", self.consis)]
    }
}

/// `latent + rec + perc + γ·consis`; a non-finite term is reported by name.
pub fn total_loss(parts: &LossParts, w: &LossWeights) -> Result<f64> {
    w.validate()?;
    for (name, v) in parts.named() {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("loss term `{name}` = {v}")));
        }
    }
    Ok(parts.latent + parts.rec + parts.perc + w.gamma_consis * parts.consis)
}

/// Mean of squared differences.
pub fn mse_var<T: Real>(g: &mut Graph<T>, a: Var, b: Var) -> Var {
    let d = g.sub(a, b);
    let d = g.square(d);
    g.mean(d)
}

pub fn latent_loss<T: Real>(z_st: &Tensor<T>, z_h: &Tensor<T>) -> Result<f64> {
    if z_st.shape() != z_h.shape() {
        return Err(shape_err!("latent shapes {:?} vs {:?}", z_st.shape(), z_h.shape()));
    }
    let n = z_st.len() as f64;
    Ok(z_st.data().iter().zip(z_h.data()).map(|(&a, &b)| {
        let d = (a - b).f64();
        d * d
    }).sum::<f64>() / n)
}

/// Fixed random multi-scale conv features used as a perceptual distance.
///
/// Three 3×3 conv layers (stride 1, 2, 2) with SiLU; each scale's features
/// are unit-normalised per pixel and compared by squared distance, summed
/// over channels and averaged over pixels, then averaged over scales.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureNet {
    pub seed: u64,
    channels: usize,
    layers: Vec<(Tensor<f64>, Tensor<f64>, usize)>,
}

pub const FEATURE_WIDTHS: [usize; 3] = [8, 16, 32];

impl FeatureNet {
    pub fn new(seed: u64, channels: usize) -> Self {
        let mut rng: Rng = stream(seed, "features");
        let mut ci = channels;
        let mut layers = Vec::new();
        for (i, &co) in FEATURE_WIDTHS.iter().enumerate() {
            let std = libm::sqrt(2.0 / (9 * ci) as f64);
            let w = Tensor::from_fn(&[3, 3, ci, co], |_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * std
            });
            let b = Tensor::from_fn(&[co], |_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                0.1 * z
            });
            layers.push((w, b, if i == 0 { 1 } else { 2 }));
            ci = co;
        }
        Self { seed, channels, layers }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Normalised feature maps of `x: [N,H,W,C]`.
    pub fn features<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Vec<Var> {
        let mut y = x;
        let mut out = Vec::with_capacity(self.layers.len());
        for (w, b, stride) in &self.layers {
            let wv = g.constant(w.map(T::of));
            let bv = g.constant(b.map(T::of));
            y = g.conv2d(y, wv, *stride, 1);
            y = g.add_broadcast(y, bv);
            y = g.silu(y);
            out.push(g.channel_norm(y, T::of(1e-10)));
        }
        out
    }

    /// Scalar distance between two feature stacks.
    pub fn distance<T: Real>(&self, g: &mut Graph<T>, fa: &[Var], fb: &[Var]) -> Var {
        let mut total: Option<Var> = None;
        for (&a, &b) in fa.iter().zip(fb) {
            let c = g.value(a).last_dim();
            let d = mse_var(g, a, b);
            let d = g.scale(d, T::of(c as f64 / fa.len() as f64));
            total = Some(match total {
                Some(t) => g.add(t, d),
                None => d,
            });
        }
        total.unwrap()
    }

    /// `perc(a, b)` on graph values of identical shape `[N,H,W,C]`.
    pub fn perceptual<T: Real>(&self, g: &mut Graph<T>, a: Var, b: Var) -> Var {
        let fa = self.features(g, a);
        let fb = self.features(g, b);
        self.distance(g, &fa, &fb)
    }

    /// Scalar distance between two frames `[H,W,C]` given as flat slices.
    pub fn frame_distance(&self, h: usize, w: usize, a: &[f64], b: &[f64]) -> f64 {
        let c = self.channels;
        let mut g = Graph::<f64>::new();
        let va = g.constant(Tensor::new(&[1, h, w, c], a.to_vec()).unwrap());
        let vb = g.constant(Tensor::new(&[1, h, w, c], b.to_vec()).unwrap());
        let d = self.perceptual(&mut g, va, vb);
        g.scalar(d)
    }
}

/// `(rec, perc)` between two videos.
pub fn pixel_losses(i_st: &VideoTensor, i_h: &VideoTensor, feat: &FeatureNet) -> Result<(f64, f64)> {
    if i_st.dims() != i_h.dims() {
        return Err(shape_err!("pixel loss shapes {:?} vs {:?}", i_st.dims(), i_h.dims()));
    }
    let mut g = Graph::<f64>::new();
    let a = g.constant(i_st.to_tensor());
    let b = g.constant(i_h.to_tensor());
    let rec = mse_var(&mut g, a, b);
    let perc = feat.perceptual(&mut g, a, b);
    Ok((g.scalar(rec), g.scalar(perc)))
}

/// Graph form of the bidirectional consistency term for `x: [T,H,W,C]`.
///
/// `fwd[i]` (frame `i → i+1`) aligns frame `i+1` onto frame `i`;
/// `bwd[i]` (frame `i+1 → i`) aligns frame `i` onto frame `i+1`. Each
/// direction contributes the mean absolute residual over all pairs.
pub fn consistency_var<T: Real>(g: &mut Graph<T>, x: Var, fwd: &[FlowField], bwd: &[FlowField]) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (t, h, w) = (s[0], s[1], s[2]);
    if t < 2 {
        return Err(shape_err!("temporal consistency needs T >= 2"));
    }
    if fwd.len() != t - 1 || bwd.len() != t - 1 {
        return Err(shape_err!("{t} frames need {} flows each way, got {}/{}", t - 1, fwd.len(), bwd.len()));
    }
    if fwd.iter().chain(bwd).any(|f| (f.h, f.w) != (h, w)) {
        return Err(shape_err!("consistency flows must be {h}x{w}"));
    }
    let head = g.slice0(x, 0, t - 1);
    let tail = g.slice0(x, 1, t - 1);
    let fr: Vec<&FlowField> = fwd.iter().collect();
    let br: Vec<&FlowField> = bwd.iter().collect();
    let a = g.gather_bilinear(tail, warp_taps(&fr, h, w));
    let a = g.sub(a, head);
    let a = g.abs(a);
    let a = g.mean(a);
    let b = g.gather_bilinear(head, warp_taps(&br, h, w));
    let b = g.sub(b, tail);
    let b = g.abs(b);
    let b = g.mean(b);
    Ok(g.add(a, b))
}

pub fn temporal_consistency_loss(i_st: &VideoTensor, fwd: &[FlowField], bwd: &[FlowField]) -> Result<f64> {
    let mut g = Graph::<f64>::new();
    let x = g.constant(i_st.to_tensor());
    let l = consistency_var(&mut g, x, fwd, bwd)?;
    Ok(g.scalar(l))
}
