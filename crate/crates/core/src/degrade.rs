//! Low-resolution, low-frame-rate inputs from clean clips.
//!
//! Order is fixed: Gaussian blur, additive Gaussian noise, downsampling by
//! `phi_s`, optional bit quantisation, clamp. Blur and noise strengths are
//! drawn once per clip from the configured ranges.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::error::{shape_err, validation_err, Result};
use crate::rng::{stream, Rng};
use crate::video::{resize_bilinear, ScaleFactors, VideoTensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DownsampleKind {
    Area,
    Bilinear,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DegradationConfig {
    pub blur_sigma_range: [f64; 2],
    pub noise_sigma_range: [f64; 2],
    pub downsample: DownsampleKind,
    pub quantize_bits: Option<u32>,
    pub seed: u64,
    pub scales: ScaleFactors,
}

impl Default for DegradationConfig {
    fn default() -> Self {
        Self {
            blur_sigma_range: [0.2, 2.0],
            noise_sigma_range: [0.0, 10.0 / 255.0],
            downsample: DownsampleKind::Area,
            quantize_bits: None,
            seed: 0,
            scales: ScaleFactors::default(),
        }
    }
}

impl DegradationConfig {
    /// No blur, no noise, no quantisation.
    pub fn null(scales: ScaleFactors) -> Self {
        Self { blur_sigma_range: [0.0, 0.0], noise_sigma_range: [0.0, 0.0], quantize_bits: None, scales, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, [lo, hi]) in [("blur_sigma", self.blur_sigma_range), ("noise_sigma", self.noise_sigma_range)] {
            if !(lo.is_finite() && hi.is_finite()) || lo < 0.0 || lo > hi {
                return Err(validation_err!("{name} range [{lo}, {hi}] must satisfy 0 <= lo <= hi"));
            }
        }
        if let Some(b) = self.quantize_bits {
            if !(1..=8).contains(&b) {
                return Err(validation_err!("quantize_bits must be in 1..=8, got {b}"));
            }
        }
        if self.scales.phi_s == 0 || self.scales.phi_t == 0 {
            return Err(validation_err!("scale factors must be >= 1"));
        }
        Ok(())
    }

    /// The `(blur, noise)` strengths this config draws for a clip.
    pub fn draw_sigmas(&self) -> (f64, f64) {
        let mut rng: Rng = stream(self.seed, "degrade/sigma");
        let pick = |rng: &mut Rng, [lo, hi]: [f64; 2]| if hi > lo { rng.random_range(lo..=hi) } else { lo };
        let blur = pick(&mut rng, self.blur_sigma_range);
        let noise = pick(&mut rng, self.noise_sigma_range);
        (blur, noise)
    }
}

/// Normalised 1-D Gaussian taps, radius `ceil(3σ)`; `[1]` for `σ = 0`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let r = libm::ceil(3.0 * sigma) as i64;
    let mut k: Vec<f64> = (-r..=r).map(|i| libm::exp(-((i * i) as f64) / (2.0 * sigma * sigma))).collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian blur of every frame, replicate border.
pub fn gaussian_blur(data: &mut [f64], t: usize, h: usize, w: usize, c: usize, sigma: f64) {
    let k = gaussian_kernel(sigma);
    if k.len() == 1 {
        return;
    }
    let r = (k.len() / 2) as isize;
    let mut tmp = vec![0.0; h * w * c];
    for n in 0..t {
        let f = &mut data[n * h * w * c..][..h * w * c];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let mut acc = 0.0;
                    for (j, kv) in k.iter().enumerate() {
                        let xx = (x as isize + j as isize - r).clamp(0, w as isize - 1) as usize;
                        acc += kv * f[(y * w + xx) * c + ch];
                    }
                    tmp[(y * w + x) * c + ch] = acc;
                }
            }
        }
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let mut acc = 0.0;
                    for (j, kv) in k.iter().enumerate() {
                        let yy = (y as isize + j as isize - r).clamp(0, h as isize - 1) as usize;
                        acc += kv * tmp[(yy * w + x) * c + ch];
                    }
                    f[(y * w + x) * c + ch] = acc;
                }
            }
        }
    }
}

/// Mean over non-overlapping `f×f` blocks.
pub fn area_downsample(data: &[f64], t: usize, h: usize, w: usize, c: usize, f: usize) -> Vec<f64> {
    let (oh, ow) = (h / f, w / f);
    let norm = 1.0 / (f * f) as f64;
    let mut out = vec![0.0; t * oh * ow * c];
    for n in 0..t {
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let mut acc = 0.0;
                    for dy in 0..f {
                        for dx in 0..f {
                            acc += data[((n * h + oy * f + dy) * w + ox * f + dx) * c + ch];
                        }
                    }
                    out[((n * oh + oy) * ow + ox) * c + ch] = acc * norm;
                }
            }
        }
    }
    out
}

pub fn spatial_degrade(video: &VideoTensor, cfg: &DegradationConfig) -> Result<VideoTensor> {
    cfg.validate()?;
    let (t, h, w, c) = video.dims();
    let f = cfg.scales.phi_s;
    if h % f != 0 || w % f != 0 {
        return Err(shape_err!("frame {h}x{w} not divisible by phi_s = {f}"));
    }
    let (blur, noise) = cfg.draw_sigmas();
    let mut data = video.data().to_vec();
    gaussian_blur(&mut data, t, h, w, c, blur);
    if noise > 0.0 {
        let mut rng: Rng = stream(cfg.seed, "degrade/noise");
        let dist = Normal::new(0.0, noise).map_err(|e| validation_err!("noise sigma: {e}"))?;
        data.iter_mut().for_each(|v| *v += dist.sample(&mut rng));
    }
    let mut data = if f == 1 {
        data
    } else {
        match cfg.downsample {
            DownsampleKind::Area => area_downsample(&data, t, h, w, c, f),
            DownsampleKind::Bilinear => {
                // resize expects [0,1]; clamp first so the bilinear taps never see noise overshoot
                let v = VideoTensor::new_clamped(t, h, w, c, data)?;
                resize_bilinear(&v, h / f, w / f)?.data().to_vec()
            }
        }
    };
    if let Some(bits) = cfg.quantize_bits {
        let levels = ((1u32 << bits) - 1) as f64;
        data.iter_mut().for_each(|v| *v = libm::round(v.clamp(0.0, 1.0) * levels) / levels);
    }
    VideoTensor::new_clamped(t, h / f, w / f, c, data)
}

/// Keeps frames `0, φ_t, 2φ_t, …, T−1`.
pub fn temporal_subsample(video: &VideoTensor, phi_t: usize) -> Result<VideoTensor> {
    let t = video.frames_len();
    if phi_t == 0 || (t - 1) % phi_t != 0 {
        return Err(shape_err!("T-1 = {} not divisible by phi_t = {phi_t}", t - 1));
    }
    let idx: Vec<usize> = (0..t).step_by(phi_t).collect();
    video.select(&idx)
}

/// `(lq, hq)` with `lq = temporal_subsample(spatial_degrade(hq))`.
pub fn make_pair(hq: &VideoTensor, cfg: &DegradationConfig) -> Result<(VideoTensor, VideoTensor)> {
    let t = hq.frames_len();
    if (t - 1) % cfg.scales.phi_t.max(1) != 0 {
        return Err(shape_err!("T-1 = {} not divisible by phi_t = {}", t - 1, cfg.scales.phi_t));
    }
    let lq = temporal_subsample(&spatial_degrade(hq, cfg)?, cfg.scales.phi_t)?;
    Ok((lq, hq.clone()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(t: usize, h: usize, w: usize) -> VideoTensor {
        let data = (0..t * h * w).map(|i| (i % (h * w)) as f64 / (h * w) as f64).collect();
        VideoTensor::new(t, h, w, 1, data).unwrap()
    }

    #[test]
    fn null_degradation_is_identity() {
        let v = ramp(3, 4, 6);
        let out = spatial_degrade(&v, &DegradationConfig::null(ScaleFactors::new(1, 1).unwrap())).unwrap();
        assert_eq!(out, v);
    }

    #[test]
    fn blurred_constant_stays_constant() {
        let v = VideoTensor::new(2, 8, 8, 3, vec![0.5; 2 * 64 * 3]).unwrap();
        let cfg = DegradationConfig { blur_sigma_range: [1.0, 1.0], ..DegradationConfig::null(ScaleFactors::new(2, 1).unwrap()) };
        let out = spatial_degrade(&v, &cfg).unwrap();
        assert_eq!(out.dims(), (2, 4, 4, 3));
        assert!(out.data().iter().all(|&x| (x - 0.5).abs() < 1e-15));
    }

    #[test]
    fn area_downsample_is_block_mean() {
        let v = ramp(1, 4, 4);
        let out = spatial_degrade(&v, &DegradationConfig::null(ScaleFactors::new(2, 1).unwrap())).unwrap();
        let d = v.data();
        for oy in 0..2 {
            for ox in 0..2 {
                let i = |y: usize, x: usize| d[(2 * oy + y) * 4 + 2 * ox + x];
                let want = (i(0, 0) + i(0, 1) + i(1, 0) + i(1, 1)) / 4.0;
                assert!((out.data()[oy * 2 + ox] - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn indivisible_frames_rejected() {
        let v = ramp(1, 5, 4);
        assert!(matches!(spatial_degrade(&v, &DegradationConfig::null(ScaleFactors::new(2, 1).unwrap())), Err(crate::Error::Shape(_))));
        assert!(matches!(temporal_subsample(&ramp(6, 2, 2), 4), Err(crate::Error::Shape(_))));
    }

    #[test]
    fn keyframe_counts() {
        let v = ramp(17, 2, 2);
        assert_eq!(temporal_subsample(&v, 4).unwrap().frames_len(), 5);
        assert_eq!(temporal_subsample(&v, 4).unwrap().frame(2), v.frame(8));
        assert_eq!(temporal_subsample(&v, 1).unwrap(), v);
        assert_eq!(temporal_subsample(&ramp(33, 2, 2), 4).unwrap().frames_len(), 9);
    }

    #[test]
    fn make_pair_deterministic_and_shaped() {
        let v = ramp(9, 8, 8);
        let cfg = DegradationConfig { seed: 5, quantize_bits: Some(8), scales: ScaleFactors::new(4, 4).unwrap(), ..Default::default() };
        let (a, hq) = make_pair(&v, &cfg).unwrap();
        let (b, _) = make_pair(&v, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(hq, v);
        assert_eq!(a.dims(), (3, 2, 2, 1));
        assert!(a.data().iter().all(|x| (x * 255.0 - libm::round(x * 255.0)).abs() < 1e-9));
    }

    #[test]
    fn bad_ranges_rejected() {
        let cfg = DegradationConfig { blur_sigma_range: [2.0, 1.0], ..Default::default() };
        assert!(cfg.validate().is_err());
        let cfg = DegradationConfig { noise_sigma_range: [-1.0, 1.0], ..Default::default() };
        assert!(cfg.validate().is_err());
    }

    proptest! {
        #[test]
        fn output_shape_law(k in 1usize..4, phi_t in 1usize..4, phi_s in 1usize..4, seed in 0u64..100) {
            let t = (k - 1) * phi_t + 1;
            let v = ramp(t, 4 * phi_s, 2 * phi_s);
            let cfg = DegradationConfig { seed, scales: ScaleFactors::new(phi_s, phi_t).unwrap(), ..Default::default() };
            let (lq, _) = make_pair(&v, &cfg).unwrap();
            prop_assert_eq!(lq.dims(), (k, 4, 2, 1));
            prop_assert!(lq.data().iter().all(|x| (0.0..=1.0).contains(x)));
        }
    }
}
