//! Synthetic moving-shape clips with exact ground-truth motion.
//!
//! Shapes translate at constant velocity and are painted in index order
//! (later shapes cover earlier ones). Pixel `(x, y)` is covered by a shape
//! when its integer coordinate lies inside the shape at that frame, so an
//! integer velocity shifts the rendering by exactly that many pixels.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::error::{shape_err, validation_err, Result};
use crate::rng::{stream, Rng};
use crate::video::{FlowField, VideoTensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ShapeKind {
    Rectangle { w: f64, h: f64 },
    Disk { r: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    /// Top-left corner (rectangle) or centre (disk) at frame 0.
    pub pos: (f64, f64),
    /// Pixels per frame.
    pub velocity: (f64, f64),
    /// One intensity per channel.
    pub intensity: Vec<f64>,
    /// Amplitude of a fixed pattern that moves with the shape; 0 = flat.
    pub texture: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub background: f64,
    pub shapes: Vec<ShapeSpec>,
    /// Allow non-integer velocities.
    pub subpixel: bool,
}

/// Knobs for [`SceneSpec::random`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RandomSceneConfig {
    pub min_shapes: usize,
    pub max_shapes: usize,
    /// Largest velocity component, pixels per frame.
    pub max_speed: i32,
    pub texture: f64,
}

impl Default for RandomSceneConfig {
    fn default() -> Self {
        Self { min_shapes: 2, max_shapes: 4, max_speed: 2, texture: 0.0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClipWithTruth {
    pub video: VideoTensor,
    /// `n → n+1` for `n in 0..T-1`.
    pub true_flow_fwd: Vec<FlowField>,
    /// `n+1 → n` for `n in 0..T-1`.
    pub true_flow_bwd: Vec<FlowField>,
}

impl ClipWithTruth {
    /// Window of `t×h×w` starting at frame `t0`, row `y0`, column `x0`.
    /// Flow vectors keep their values; only the window changes.
    pub fn crop(&self, t0: usize, y0: usize, x0: usize, t: usize, h: usize, w: usize) -> Result<Self> {
        let (tt, hh, ww, c) = self.video.dims();
        if t == 0 || h == 0 || w == 0 || t0 + t > tt || y0 + h > hh || x0 + w > ww {
            return Err(shape_err!("crop {t}x{h}x{w} at ({t0},{y0},{x0}) exceeds clip {tt}x{hh}x{ww}"));
        }
        let mut data = Vec::with_capacity(t * h * w * c);
        for n in t0..t0 + t {
            let f = self.video.frame_slice(n);
            for y in y0..y0 + h {
                data.extend_from_slice(&f[(y * ww + x0) * c..(y * ww + x0 + w) * c]);
            }
        }
        let window = |f: &FlowField, from: usize, to: usize| {
            let mut d = Vec::with_capacity(h * w * 2);
            for y in y0..y0 + h {
                d.extend_from_slice(&f.data[(y * ww + x0) * 2..(y * ww + x0 + w) * 2]);
            }
            FlowField { h, w, from, to, data: d }
        };
        let pairs = |v: &[FlowField], fwd: bool| -> Vec<FlowField> {
            if v.len() + 1 != tt {
                return Vec::new();
            }
            (0..t - 1).map(|n| if fwd { window(&v[t0 + n], n, n + 1) } else { window(&v[t0 + n], n + 1, n) }).collect()
        };
        Ok(Self {
            video: VideoTensor::new(t, h, w, c, data)?,
            true_flow_fwd: pairs(&self.true_flow_fwd, true),
            true_flow_bwd: pairs(&self.true_flow_bwd, false),
        })
    }
}

impl ShapeSpec {
    fn origin(&self, n: f64) -> (f64, f64) {
        (self.pos.0 + n * self.velocity.0, self.pos.1 + n * self.velocity.1)
    }

    fn covers(&self, n: usize, x: usize, y: usize) -> bool {
        let (ox, oy) = self.origin(n as f64);
        let (fx, fy) = (x as f64, y as f64);
        match self.kind {
            ShapeKind::Rectangle { w, h } => fx >= ox && fx < ox + w && fy >= oy && fy < oy + h,
            ShapeKind::Disk { r } => (fx - ox) * (fx - ox) + (fy - oy) * (fy - oy) <= r * r,
        }
    }

    fn pattern(&self, n: usize, x: usize, y: usize, salt: u64) -> f64 {
        if self.texture == 0.0 {
            return 0.0;
        }
        let (ox, oy) = self.origin(n as f64);
        let lx = libm::floor(x as f64 - ox) as i64;
        let ly = libm::floor(y as f64 - oy) as i64;
        let mut z = (lx as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (ly as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F) ^ salt;
        z = (z ^ (z >> 29)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z ^= z >> 32;
        self.texture * ((z >> 11) as f64 / (1u64 << 53) as f64 - 0.5)
    }

    fn bounding(&self) -> (f64, f64, f64, f64) {
        match self.kind {
            ShapeKind::Rectangle { w, h } => (self.pos.0, self.pos.1, self.pos.0 + w, self.pos.1 + h),
            ShapeKind::Disk { r } => (self.pos.0 - r, self.pos.1 - r, self.pos.0 + r, self.pos.1 + r),
        }
    }
}

impl SceneSpec {
    /// Empty scene of the given size.
    pub fn empty(seed: u64, t: usize, h: usize, w: usize, c: usize, background: f64) -> Self {
        Self { seed, t, h, w, c, background, shapes: Vec::new(), subpixel: false }
    }

    /// Random scene; a pure function of `(seed, dims, cfg)`.
    pub fn random(seed: u64, t: usize, h: usize, w: usize, c: usize, cfg: &RandomSceneConfig) -> Self {
        let mut rng: Rng = stream(seed, "scene");
        let n = rng.random_range(cfg.min_shapes..=cfg.max_shapes.max(cfg.min_shapes));
        let vmax = cfg.max_speed.min((w / 8) as i32).max(0);
        let background = rng.random_range(0.05..0.95);
        let mut shapes = Vec::with_capacity(n);
        for _ in 0..n {
            let intensity: Vec<f64> = (0..c).map(|_| rng.random_range(0.05..0.95)).collect();
            let limit = (w / 8) as f64;
            let velocity = loop {
                let v = (rng.random_range(-vmax..=vmax) as f64, rng.random_range(-vmax..=vmax) as f64);
                if libm::sqrt(v.0 * v.0 + v.1 * v.1) <= limit {
                    break v;
                }
            };
            let kind = if rng.random_bool(0.5) {
                let sw = rng.random_range((w / 8).max(1)..=(w / 3).max(1)) as f64;
                let sh = rng.random_range((h / 8).max(1)..=(h / 3).max(1)) as f64;
                ShapeKind::Rectangle { w: sw, h: sh }
            } else {
                let lim = (h.min(w) / 6).max(1);
                ShapeKind::Disk { r: rng.random_range((h.min(w) / 16).max(1)..=lim) as f64 }
            };
            let pos = match kind {
                ShapeKind::Rectangle { w: sw, h: sh } => (
                    rng.random_range(0..=(w as f64 - sw) as usize) as f64,
                    rng.random_range(0..=(h as f64 - sh) as usize) as f64,
                ),
                ShapeKind::Disk { r } => (
                    rng.random_range(r as usize..=(w as f64 - 1.0 - r) as usize) as f64,
                    rng.random_range(r as usize..=(h as f64 - 1.0 - r) as usize) as f64,
                ),
            };
            shapes.push(ShapeSpec { kind, pos, velocity, intensity, texture: cfg.texture });
        }
        Self { seed, t, h, w, c, background, shapes, subpixel: false }
    }

    pub fn validate(&self) -> Result<()> {
        if self.t == 0 || self.h == 0 || self.w == 0 || self.c == 0 {
            return Err(validation_err!("scene dimensions must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.background) {
            return Err(validation_err!("background {} outside [0,1]", self.background));
        }
        let vmax = self.w as f64 / 8.0;
        for (i, s) in self.shapes.iter().enumerate() {
            let (vx, vy) = s.velocity;
            if !(vx.is_finite() && vy.is_finite()) || libm::sqrt(vx * vx + vy * vy) > vmax {
                return Err(validation_err!("shape {i}: |velocity| exceeds W/8 = {vmax}"));
            }
            if !self.subpixel && (libm::trunc(vx) != vx || libm::trunc(vy) != vy) {
                return Err(validation_err!("shape {i}: non-integer velocity needs subpixel mode"));
            }
            if s.intensity.len() != self.c || s.intensity.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(validation_err!("shape {i}: need {} intensities in [0,1]", self.c));
            }
            let (x0, y0, x1, y1) = s.bounding();
            if x0 < 0.0 || y0 < 0.0 || x1 > self.w as f64 || y1 > self.h as f64 {
                return Err(validation_err!("shape {i} does not fit inside the frame at t=0"));
            }
        }
        Ok(())
    }

    /// Index of the top-most shape covering `(x, y)` at frame `n`.
    pub fn owner(&self, n: usize, x: usize, y: usize) -> Option<usize> {
        self.shapes.iter().rposition(|s| s.covers(n, x, y))
    }

    /// Exact flow from frame `a` to frame `b` for pixels of frame `a`.
    pub fn flow_between(&self, a: usize, b: usize) -> FlowField {
        let dt = b as f64 - a as f64;
        let mut f = FlowField::zeros(self.h, self.w).between(a, b);
        for y in 0..self.h {
            for x in 0..self.w {
                if let Some(i) = self.owner(a, x, y) {
                    let v = self.shapes[i].velocity;
                    f.set(y, x, (dt * v.0, dt * v.1));
                }
            }
        }
        f
    }

    pub fn render(&self) -> Result<VideoTensor> {
        let (t, h, w, c) = (self.t, self.h, self.w, self.c);
        let mut data = vec![self.background; t * h * w * c];
        for n in 0..t {
            for y in 0..h {
                for x in 0..w {
                    if let Some(i) = self.owner(n, x, y) {
                        let s = &self.shapes[i];
                        let p = s.pattern(n, x, y, self.seed ^ i as u64);
                        let px = &mut data[((n * h + y) * w + x) * c..][..c];
                        for (ch, v) in px.iter_mut().enumerate() {
                            *v = (s.intensity[ch] + p).clamp(0.0, 1.0);
                        }
                    }
                }
            }
        }
        VideoTensor::new(t, h, w, c, data)
    }
}

/// Renders the clip and its consecutive-frame ground-truth flows.
pub fn generate_clip(spec: &SceneSpec) -> Result<ClipWithTruth> {
    spec.validate()?;
    let video = spec.render()?;
    let mut fwd = Vec::with_capacity(spec.t.saturating_sub(1));
    let mut bwd = Vec::with_capacity(spec.t.saturating_sub(1));
    for n in 0..spec.t.saturating_sub(1) {
        fwd.push(spec.flow_between(n, n + 1));
        bwd.push(spec.flow_between(n + 1, n));
    }
    Ok(ClipWithTruth { video, true_flow_fwd: fwd, true_flow_bwd: bwd })
}
