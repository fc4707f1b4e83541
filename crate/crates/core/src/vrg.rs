//! Video representation guidance: a global prompt built from a few
//! uniformly sampled keyframes.
//!
//! Each sampled frame is encoded into `P` tokens by a strided conv encoder,
//! learnable query tokens attend over all frame tokens, and the result is
//! concatenated with fixed learned "text" tokens and mapped per token by an
//! affine projector.

use alloc::vec::Vec;

use crate::autodiff::{Graph, Var};
use crate::error::{domain_err, shape_err, Result};
use crate::nn::{Conv, CrossAttention, Linear};
use crate::params::{Binding, Group, Init, ParamId, Params};
use crate::real::Real;
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::video::VideoTensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VrgConfig {
    pub channels: usize,
    /// Token width.
    pub d: usize,
    pub queries: usize,
    pub text_tokens: usize,
    pub heads: usize,
    /// Keyframes sampled per clip.
    pub n_k: usize,
}

impl Default for VrgConfig {
    fn default() -> Self {
        Self { channels: 3, d: 64, queries: 4, text_tokens: 4, heads: 4, n_k: 5 }
    }
}

/// Uniformly spaced indices; the centre frame when `n = 1`.
pub fn sample_keyframes(t: usize, n: usize) -> Result<Vec<usize>> {
    if n == 0 || n > t {
        return Err(domain_err!("cannot sample {n} keyframes from {t} frames"));
    }
    if n == 1 {
        return Ok(alloc::vec![(t - 1) / 2]);
    }
    let mut idx: Vec<usize> = (0..n).map(|i| libm::round((i * (t - 1)) as f64 / (n - 1) as f64) as usize).collect();
    idx.dedup();
    Ok(idx)
}

#[derive(Clone, Debug)]
pub struct Vrg {
    cfg: VrgConfig,
    enc: [Conv; 3],
    query: ParamId,
    text: ParamId,
    mhca: CrossAttention,
    proj: Linear,
}

impl Vrg {
    pub fn new<T: Real>(params: &mut Params<T>, rng: &mut Rng, cfg: VrgConfig) -> Self {
        let g = Group::Vrg;
        let d = cfg.d;
        let enc = [
            Conv::new(params, rng, "vrg.enc.0", g, 3, cfg.channels, d / 4, 2, false),
            Conv::new(params, rng, "vrg.enc.1", g, 3, d / 4, d / 2, 2, false),
            Conv::new(params, rng, "vrg.enc.2", g, 3, d / 2, d, 1, false),
        ];
        let query = params.add("vrg.query", g, &[cfg.queries, d], Init::Normal(1.0), rng);
        let text = params.add("vrg.text", g, &[cfg.text_tokens, d], Init::Normal(1.0), rng);
        let mhca = CrossAttention::new(params, rng, "vrg.mhca", g, d, d, d, d, cfg.heads, false);
        let proj = Linear::new(params, rng, "vrg.proj", g, d, d, Init::Identity);
        Self { cfg, enc, query, text, mhca, proj }
    }

    pub fn config(&self) -> VrgConfig {
        self.cfg
    }

    pub fn attention(&self) -> &CrossAttention {
        &self.mhca
    }

    pub fn projector(&self) -> &Linear {
        &self.proj
    }

    pub fn query_id(&self) -> ParamId {
        self.query
    }

    /// Frames `[N,h,w,C]` → tokens `[N·P, d]`, frame-major.
    pub fn encode<T: Real>(&self, g: &mut Graph<T>, p: &Binding, frames: Var) -> Var {
        let mut x = self.enc[0].forward(g, p, frames);
        x = g.silu(x);
        x = self.enc[1].forward(g, p, x);
        x = g.silu(x);
        x = self.enc[2].forward(g, p, x);
        let n = g.value(x).len() / self.cfg.d;
        g.reshape(x, &[n, self.cfg.d])
    }

    /// Learnable queries attending over all keyframe tokens.
    pub fn fuse<T: Real>(&self, g: &mut Graph<T>, p: &Binding, tokens: Var) -> Var {
        self.mhca.forward(g, p, p.var(self.query), tokens)
    }

    /// `[e_v; e_t]` through the per-token projector.
    pub fn condition<T: Real>(&self, g: &mut Graph<T>, p: &Binding, e_v: Var) -> Var {
        let both = g.concat0(&[e_v, p.var(self.text)]);
        self.proj.forward(g, p, both)
    }

    /// Condition from the text tokens alone (no video pathway).
    pub fn text_only<T: Real>(&self, g: &mut Graph<T>, p: &Binding) -> Var {
        self.proj.forward(g, p, p.var(self.text))
    }

    /// Whole path: sample keyframes of `i_l`, encode, fuse, project.
    pub fn build<T: Real>(&self, g: &mut Graph<T>, p: &Binding, i_l: &VideoTensor) -> Result<Var> {
        let (t, h, w, c) = i_l.dims();
        if c != self.cfg.channels {
            return Err(shape_err!("guidance encoder expects {} channels, got {c}", self.cfg.channels));
        }
        if h < 4 || w < 4 {
            return Err(shape_err!("guidance encoder needs frames of at least 4x4, got {h}x{w}"));
        }
        let idx = sample_keyframes(t, self.cfg.n_k.min(t))?;
        let sel = i_l.select(&idx)?;
        let x = g.constant(sel.to_tensor());
        let tokens = self.encode(g, p, x);
        let e_v = self.fuse(g, p, tokens);
        Ok(self.condition(g, p, e_v))
    }
}

/// Evaluates the condition tokens `[L_q + L_t, d]` without gradients.
pub fn build_condition<T: Real>(vrg: &Vrg, params: &Params<T>, i_l: &VideoTensor) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let p = params.bind(&mut g, |_| false);
    let c = vrg.build(&mut g, &p, i_l)?;
    Ok(g.value(c).clone())
}
