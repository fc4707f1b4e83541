//! Tiny latent backbone: a deterministic conv autoencoder, a conditional
//! velocity network, the linear noise schedule and the one-step sampler.

use alloc::format;
use alloc::vec::Vec;

use crate::autodiff::{axis_taps, Graph, Var};
use crate::error::{domain_err, shape_err, Result};
use crate::nn::{Conv, CrossAttention, Linear};
use crate::params::{Binding, Group, Init, Params};
use crate::real::Real;
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::video::VideoTensor;

/// `T×(H/r)×(W/r)×C_z` latent.
pub type LatentTensor<T> = Tensor<T>;

/// `σ(t) = t / t_max`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NoiseSchedule {
    pub t_max: u32,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self { t_max: 1000 }
    }
}

impl NoiseSchedule {
    pub fn check(&self, t: u32) -> Result<()> {
        if self.t_max == 0 {
            return Err(domain_err!("t_max must be >= 1"));
        }
        if t > self.t_max {
            return Err(domain_err!("timestep {t} outside [0, {}]", self.t_max));
        }
        Ok(())
    }

    pub fn sigma(&self, t: u32) -> Result<f64> {
        self.check(t)?;
        Ok(t as f64 / self.t_max as f64)
    }
}

/// Spatial stride of the autoencoder.
pub const VAE_STRIDE: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VaeConfig {
    pub channels: usize,
    pub latent: usize,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self { channels: 3, latent: 8 }
    }
}

/// Conv autoencoder with stride 4 and no temporal compression. The decoder
/// adds a bilinear ×4 upsampling of a 1×1 projection of the latent to its
/// conv path, so smooth content is cheap to represent.
#[derive(Clone, Debug)]
pub struct Vae {
    cfg: VaeConfig,
    enc: [Conv; 4],
    dec: [Conv; 4],
    skip: Conv,
}

impl Vae {
    pub fn new<T: Real>(params: &mut Params<T>, rng: &mut Rng, cfg: VaeConfig) -> Self {
        let g = Group::Vae;
        let (c, z) = (cfg.channels, cfg.latent);
        let enc = [
            Conv::new(params, rng, "vae.enc.0", g, 3, c, 24, 2, false),
            Conv::new(params, rng, "vae.enc.1", g, 3, 24, 32, 2, false),
            Conv::new(params, rng, "vae.enc.2", g, 3, 32, 32, 1, false),
            Conv::new(params, rng, "vae.enc.3", g, 1, 32, z, 1, false),
        ];
        let dec = [
            Conv::new(params, rng, "vae.dec.0", g, 3, z, 32, 1, false),
            Conv::new(params, rng, "vae.dec.1", g, 3, 32, 32, 1, false),
            Conv::new(params, rng, "vae.dec.2", g, 3, 32, 16, 1, false),
            Conv::new(params, rng, "vae.dec.3", g, 3, 16, c, 1, false),
        ];
        let skip = Conv::new(params, rng, "vae.skip", g, 1, z, c, 1, false);
        Self { cfg, enc, dec, skip }
    }

    pub fn config(&self) -> VaeConfig {
        self.cfg
    }

    /// `[T,H,W,C]` → `[T,H/4,W/4,C_z]`.
    pub fn encode<T: Real>(&self, g: &mut Graph<T>, p: &Binding, x: Var) -> Var {
        let mut y = x;
        for (i, conv) in self.enc.iter().enumerate() {
            y = conv.forward(g, p, y);
            if i < 3 {
                y = g.silu(y);
            }
        }
        y
    }

    /// `[T,h,w,C_z]` → `[T,4h,4w,C]`, clamped to `[0, 1]`.
    pub fn decode<T: Real>(&self, g: &mut Graph<T>, p: &Binding, z: Var) -> Var {
        let s = g.shape(z).to_vec();
        let (h, w) = (s[1], s[2]);
        let mut y = self.dec[0].forward(g, p, z);
        y = g.silu(y);
        y = self.dec[1].forward(g, p, y);
        y = g.silu(y);
        y = g.upsample2(y);
        y = self.dec[2].forward(g, p, y);
        y = g.silu(y);
        y = g.upsample2(y);
        y = self.dec[3].forward(g, p, y);
        let base = self.skip.forward(g, p, z);
        let base = g.resize(base, axis_taps(h, h * VAE_STRIDE), axis_taps(w, w * VAE_STRIDE));
        let y = g.add(base, y);
        g.clamp(y, T::zero(), T::one())
    }

    fn check(&self, video: &VideoTensor) -> Result<()> {
        let (_, h, w, c) = video.dims();
        if h % VAE_STRIDE != 0 || w % VAE_STRIDE != 0 {
            return Err(shape_err!("frame {h}x{w} not divisible by the autoencoder stride {VAE_STRIDE}"));
        }
        if c != self.cfg.channels {
            return Err(shape_err!("autoencoder expects {} channels, got {c}", self.cfg.channels));
        }
        Ok(())
    }
}

pub fn vae_encode<T: Real>(vae: &Vae, params: &Params<T>, video: &VideoTensor) -> Result<LatentTensor<T>> {
    vae.check(video)?;
    let mut g = Graph::new();
    let p = params.bind(&mut g, |_| false);
    let x = g.constant(video.to_tensor());
    let z = vae.encode(&mut g, &p, x);
    Ok(g.value(z).clone())
}

pub fn vae_decode<T: Real>(vae: &Vae, params: &Params<T>, z: &LatentTensor<T>) -> Result<VideoTensor> {
    if z.shape().len() != 4 || z.shape()[3] != vae.cfg.latent {
        return Err(shape_err!("latent must be [T,h,w,{}], got {:?}", vae.cfg.latent, z.shape()));
    }
    let mut g = Graph::new();
    let p = params.bind(&mut g, |_| false);
    let zv = g.constant(z.clone());
    let x = vae.decode(&mut g, &p, zv);
    VideoTensor::from_tensor(g.value(x))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VelocityConfig {
    pub latent: usize,
    pub width: usize,
    pub blocks: usize,
    pub heads: usize,
    /// Token width of the condition.
    pub cond: usize,
}

impl Default for VelocityConfig {
    fn default() -> Self {
        Self { latent: 8, width: 32, blocks: 4, heads: 4, cond: 64 }
    }
}

#[derive(Clone, Debug)]
struct Block {
    time: Linear,
    conv0: Conv,
    conv1: Conv,
    temporal: Linear,
    attn: CrossAttention,
}

/// Residual conv blocks with timestep injection, temporal mixing with the
/// neighbouring frames, and cross-attention to the condition tokens.
#[derive(Clone, Debug)]
pub struct VelocityNet {
    cfg: VelocityConfig,
    t_mlp: Linear,
    input: Conv,
    blocks: Vec<Block>,
    output: Conv,
}

impl VelocityNet {
    pub fn new<T: Real>(params: &mut Params<T>, rng: &mut Rng, cfg: VelocityConfig) -> Self {
        let g = Group::Velocity;
        let w = cfg.width;
        let t_mlp = Linear::new(params, rng, "vel.t_mlp", g, w, w, Init::He(w));
        let input = Conv::new(params, rng, "vel.in", g, 3, cfg.latent, w, 1, false);
        let blocks = (0..cfg.blocks)
            .map(|i| {
                let n = |s: &str| format!("vel.b{i}.{s}");
                Block {
                    time: Linear::new(params, rng, &n("time"), g, w, w, Init::He(w)),
                    conv0: Conv::new(params, rng, &n("conv0"), g, 3, w, w, 1, false),
                    conv1: Conv::new(params, rng, &n("conv1"), g, 3, w, w, 1, false),
                    temporal: Linear::new(params, rng, &n("temporal"), g, 3 * w, w, Init::Normal(0.1 / libm::sqrt(w as f64))),
                    attn: CrossAttention::new(params, rng, &n("attn"), g, w, cfg.cond, w, w, cfg.heads, true),
                }
            })
            .collect();
        let output = Conv::new(params, rng, "vel.out", g, 3, w, cfg.latent, 1, true);
        Self { cfg, t_mlp, input, blocks, output }
    }

    pub fn config(&self) -> VelocityConfig {
        self.cfg
    }

    /// Sinusoidal embedding of a timestep, `width` values.
    pub fn time_embedding<T: Real>(&self, t: u32) -> Tensor<T> {
        let half = self.cfg.width / 2;
        let mut e = Vec::with_capacity(self.cfg.width);
        for i in 0..half {
            let f = libm::exp(-libm::log(10000.0) * i as f64 / half as f64);
            e.push(T::of(libm::sin(t as f64 * f)));
        }
        for i in 0..self.cfg.width - half {
            let f = libm::exp(-libm::log(10000.0) * i as f64 / half.max(1) as f64);
            e.push(T::of(libm::cos(t as f64 * f)));
        }
        Tensor::new(&[self.cfg.width], e).unwrap()
    }

    /// `z: [T,h,w,C_z]`, `c: [L, cond]` → velocity `[T,h,w,C_z]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Binding, z: Var, t: u32, c: Var) -> Var {
        let s = g.shape(z).to_vec();
        let n = s[0] * s[1] * s[2];
        let w = self.cfg.width;
        let emb = g.constant(self.time_embedding(t));
        let emb = self.t_mlp.forward(g, p, emb);
        let emb = g.silu(emb);
        let mut x = self.input.forward(g, p, z);
        for b in &self.blocks {
            let te = b.time.forward(g, p, emb);
            let h = g.add_broadcast(x, te);
            let h = g.silu(h);
            let h = b.conv0.forward(g, p, h);
            let h = g.silu(h);
            let h = b.conv1.forward(g, p, h);
            x = g.add(x, h);
            let prev = g.time_shift(x, -1);
            let next = g.time_shift(x, 1);
            let stack = g.concat_last(&[prev, x, next]);
            let mix = b.temporal.forward(g, p, stack);
            x = g.add(x, mix);
            let q = g.reshape(x, &[n, w]);
            let a = b.attn.forward(g, p, q, c);
            let a = g.reshape(a, &[s[0], s[1], s[2], w]);
            x = g.add(x, a);
        }
        let x = g.silu(x);
        self.output.forward(g, p, x)
    }

    /// Graph form of `z − σ(t)·V(z, t, c)`.
    pub fn one_step<T: Real>(&self, g: &mut Graph<T>, p: &Binding, sched: &NoiseSchedule, z: Var, t: u32, c: Var) -> Result<Var> {
        let sigma = sched.sigma(t)?;
        let v = self.forward(g, p, z, t, c);
        let v = g.scale(v, T::of(sigma));
        Ok(g.sub(z, v))
    }
}

/// Anything that produces a velocity for `(z, t, c)`.
pub trait VelocityField<T: Real> {
    fn velocity(&self, z: &LatentTensor<T>, t: u32, c: &Tensor<T>) -> Result<LatentTensor<T>>;
}

/// A [`VelocityNet`] together with its parameters.
pub struct BoundVelocity<'a, T> {
    pub net: &'a VelocityNet,
    pub params: &'a Params<T>,
}

impl<T: Real> VelocityField<T> for BoundVelocity<'_, T> {
    fn velocity(&self, z: &LatentTensor<T>, t: u32, c: &Tensor<T>) -> Result<LatentTensor<T>> {
        let cfg = self.net.cfg;
        if z.shape().len() != 4 || z.shape()[3] != cfg.latent {
            return Err(shape_err!("latent must be [T,h,w,{}], got {:?}", cfg.latent, z.shape()));
        }
        if c.shape().len() != 2 || c.shape()[1] != cfg.cond {
            return Err(shape_err!("condition must be [L,{}], got {:?}", cfg.cond, c.shape()));
        }
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, |_| false);
        let (zv, cv) = (g.constant(z.clone()), g.constant(c.clone()));
        let v = self.net.forward(&mut g, &p, zv, t, cv);
        Ok(g.value(v).clone())
    }
}

pub fn velocity_forward<T: Real>(
    field: &dyn VelocityField<T>,
    sched: &NoiseSchedule,
    z: &LatentTensor<T>,
    t: u32,
    c: &Tensor<T>,
) -> Result<LatentTensor<T>> {
    sched.check(t)?;
    let v = field.velocity(z, t, c)?;
    if v.shape() != z.shape() {
        return Err(shape_err!("velocity shape {:?} differs from latent {:?}", v.shape(), z.shape()));
    }
    Ok(v)
}

/// One Euler step `z − σ(t)·V(z, t, c)`.
pub fn one_step_sample<T: Real>(
    field: &dyn VelocityField<T>,
    sched: &NoiseSchedule,
    z: &LatentTensor<T>,
    t: u32,
    c: &Tensor<T>,
) -> Result<LatentTensor<T>> {
    let sigma = T::of(sched.sigma(t)?);
    let v = velocity_forward(field, sched, z, t, c)?;
    let data = z.data().iter().zip(v.data()).map(|(&a, &b)| a - sigma * b).collect();
    Tensor::new(z.shape(), data)
}
