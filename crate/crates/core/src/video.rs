//! Video, flow and mask containers plus bilinear resampling.

use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{axis_taps, resize_forward};
use crate::error::{domain_err, shape_err, validation_err, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// A single `H×W×C` image, channel-last. Values are not range-checked.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<f64>,
}

impl Frame {
    pub fn new(h: usize, w: usize, c: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != h * w * c {
            return Err(shape_err!("frame {h}x{w}x{c} needs {} values, got {}", h * w * c, data.len()));
        }
        Ok(Self { h, w, c, data })
    }

    pub fn filled(h: usize, w: usize, c: usize, v: f64) -> Self {
        Self { h, w, c, data: vec![v; h * w * c] }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, ch: usize) -> f64 {
        self.data[(y * self.w + x) * self.c + ch]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, ch: usize, v: f64) {
        self.data[(y * self.w + x) * self.c + ch] = v;
    }

    pub fn same_shape(&self, other: &Frame) -> bool {
        self.h == other.h && self.w == other.w && self.c == other.c
    }

    /// Element-wise `a·self + b·other`.
    pub fn lerp(&self, other: &Frame, a: f64, b: f64) -> Frame {
        let data = self.data.iter().zip(&other.data).map(|(&x, &y)| a * x + b * y).collect();
        Frame { h: self.h, w: self.w, c: self.c, data }
    }
}

/// `T×H×W×C` video with every value in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoTensor {
    t: usize,
    h: usize,
    w: usize,
    c: usize,
    data: Vec<f64>,
}

impl VideoTensor {
    pub fn new(t: usize, h: usize, w: usize, c: usize, data: Vec<f64>) -> Result<Self> {
        if t == 0 || h == 0 || w == 0 || c == 0 {
            return Err(validation_err!("video dimensions must be >= 1, got {t}x{h}x{w}x{c}"));
        }
        if data.len() != t * h * w * c {
            return Err(shape_err!("video {t}x{h}x{w}x{c} needs {} values, got {}", t * h * w * c, data.len()));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(validation_err!("video value {} at index {i} outside [0,1]", data[i]));
        }
        Ok(Self { t, h, w, c, data })
    }

    /// Like [`VideoTensor::new`] but clamps into `[0, 1]` first. Non-finite
    /// values are still rejected.
    pub fn new_clamped(t: usize, h: usize, w: usize, c: usize, mut data: Vec<f64>) -> Result<Self> {
        for v in &mut data {
            *v = v.clamp(0.0, 1.0);
        }
        Self::new(t, h, w, c, data)
    }

    pub fn from_frames(frames: &[Frame]) -> Result<Self> {
        let first = frames.first().ok_or_else(|| validation_err!("video needs at least one frame"))?;
        let mut data = Vec::with_capacity(frames.len() * first.data.len());
        for f in frames {
            if !f.same_shape(first) {
                return Err(shape_err!("frame {}x{}x{} differs from {}x{}x{}", f.h, f.w, f.c, first.h, first.w, first.c));
            }
            data.extend_from_slice(&f.data);
        }
        Self::new_clamped(frames.len(), first.h, first.w, first.c, data)
    }

    pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Result<Self> {
        let s = t.shape();
        if s.len() != 4 {
            return Err(shape_err!("expected a [T,H,W,C] tensor, got {:?}", s));
        }
        Self::new_clamped(s[0], s[1], s[2], s[3], t.to_f64())
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::from_f64(&[self.t, self.h, self.w, self.c], &self.data).unwrap()
    }

    /// `(T, H, W, C)`.
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (self.t, self.h, self.w, self.c)
    }

    pub fn frames_len(&self) -> usize {
        self.t
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn frame_len(&self) -> usize {
        self.h * self.w * self.c
    }

    pub fn frame(&self, i: usize) -> Frame {
        let n = self.frame_len();
        Frame { h: self.h, w: self.w, c: self.c, data: self.data[i * n..(i + 1) * n].to_vec() }
    }

    pub fn frame_slice(&self, i: usize) -> &[f64] {
        let n = self.frame_len();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn frames(&self) -> Vec<Frame> {
        (0..self.t).map(|i| self.frame(i)).collect()
    }

    /// Frames at the given indices, in order.
    pub fn select(&self, idx: &[usize]) -> Result<Self> {
        let frames: Vec<Frame> = idx.iter().map(|&i| self.frame(i)).collect();
        Self::from_frames(&frames)
    }

    /// Grayscale to RGB by replication; RGB passes through.
    pub fn to_rgb(&self) -> Self {
        if self.c == 3 {
            return self.clone();
        }
        let data = self.data.iter().flat_map(|&v| [v, v, v]).collect();
        Self { t: self.t, h: self.h, w: self.w, c: 3, data }
    }
}

/// Per-pixel displacement `(dx, dy)` from frame `from` into frame `to`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    pub h: usize,
    pub w: usize,
    pub from: usize,
    pub to: usize,
    pub data: Vec<f64>,
}

impl FlowField {
    pub fn zeros(h: usize, w: usize) -> Self {
        Self { h, w, from: 0, to: 0, data: vec![0.0; h * w * 2] }
    }

    pub fn constant(h: usize, w: usize, dx: f64, dy: f64) -> Self {
        let data = (0..h * w).flat_map(|_| [dx, dy]).collect();
        Self { h, w, from: 0, to: 0, data }
    }

    pub fn new(h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != h * w * 2 {
            return Err(shape_err!("flow {h}x{w} needs {} values, got {}", h * w * 2, data.len()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(validation_err!("flow contains non-finite values"));
        }
        Ok(Self { h, w, from: 0, to: 0, data })
    }

    pub fn between(mut self, from: usize, to: usize) -> Self {
        self.from = from;
        self.to = to;
        self
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> (f64, f64) {
        let i = (y * self.w + x) * 2;
        (self.data[i], self.data[i + 1])
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, d: (f64, f64)) {
        let i = (y * self.w + x) * 2;
        self.data[i] = d.0;
        self.data[i + 1] = d.1;
    }

    /// Every vector multiplied by `s`.
    pub fn scaled(&self, s: f64) -> Self {
        Self { h: self.h, w: self.w, from: self.from, to: self.to, data: self.data.iter().map(|v| v * s).collect() }
    }
}

/// Per-pixel weight in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ValidityMask {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl ValidityMask {
    pub fn filled(h: usize, w: usize, v: f64) -> Self {
        Self { h, w, data: vec![v.clamp(0.0, 1.0); h * w] }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.w + x]
    }
}

/// Spatial (`phi_s`) and temporal (`phi_t`) magnification factors.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScaleFactors {
    pub phi_s: usize,
    pub phi_t: usize,
}

impl ScaleFactors {
    pub fn new(phi_s: usize, phi_t: usize) -> Result<Self> {
        if phi_s == 0 || phi_t == 0 {
            return Err(domain_err!("scale factors must be >= 1, got ({phi_s}, {phi_t})"));
        }
        Ok(Self { phi_s, phi_t })
    }
}

impl Default for ScaleFactors {
    fn default() -> Self {
        Self { phi_s: 4, phi_t: 4 }
    }
}

/// Per-frame bilinear resampling with half-pixel-centre alignment.
pub fn resize_bilinear(video: &VideoTensor, new_h: usize, new_w: usize) -> Result<VideoTensor> {
    if new_h == 0 || new_w == 0 {
        return Err(domain_err!("resize target must be >= 1x1, got {new_h}x{new_w}"));
    }
    let (t, h, w, c) = video.dims();
    if (new_h, new_w) == (h, w) {
        return Ok(video.clone());
    }
    let out = resize_forward(&video.data, [t, h, w, c], &axis_taps::<f64>(h, new_h), &axis_taps::<f64>(w, new_w));
    VideoTensor::new_clamped(t, new_h, new_w, c, out)
}

/// Single-frame variant of [`resize_bilinear`].
pub fn resize_frame(frame: &Frame, new_h: usize, new_w: usize) -> Frame {
    let data = resize_forward(&frame.data, [1, frame.h, frame.w, frame.c], &axis_taps::<f64>(frame.h, new_h), &axis_taps::<f64>(frame.w, new_w));
    Frame { h: new_h, w: new_w, c: frame.c, data }
}
