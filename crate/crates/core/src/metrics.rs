//! Fidelity and temporal-quality metrics.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, validation_err, Result};
use crate::flow::{estimate_flow, FlowEstimatorConfig};
use crate::losses::FeatureNet;
use crate::video::VideoTensor;

/// Reported when two videos are identical.
pub const PSNR_CAP: f64 = 99.0;

fn same_dims(a: &VideoTensor, b: &VideoTensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(shape_err!("metric inputs differ: {:?} vs {:?}", a.dims(), b.dims()));
    }
    Ok(())
}

fn psnr_of(a: &[f64], b: &[f64]) -> f64 {
    let mse = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        PSNR_CAP
    } else {
        (10.0 * libm::log10(1.0 / mse)).min(PSNR_CAP)
    }
}

/// Mean over frames of per-frame PSNR for the `[0, 1]` range.
pub fn psnr(a: &VideoTensor, b: &VideoTensor) -> Result<f64> {
    same_dims(a, b)?;
    let t = a.frames_len();
    Ok((0..t).map(|i| psnr_of(a.frame_slice(i), b.frame_slice(i))).sum::<f64>() / t as f64)
}

const SSIM_WIN: usize = 11;

fn gaussian_window() -> [f64; SSIM_WIN] {
    let mut k = [0.0; SSIM_WIN];
    let sigma = 1.5;
    for (i, v) in k.iter_mut().enumerate() {
        let x = i as f64 - 5.0;
        *v = libm::exp(-x * x / (2.0 * sigma * sigma));
    }
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Valid-mode separable filtering of one `h×w` plane.
fn filter_valid(x: &[f64], h: usize, w: usize, k: &[f64; SSIM_WIN]) -> Vec<f64> {
    let (oh, ow) = (h - SSIM_WIN + 1, w - SSIM_WIN + 1);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        for xo in 0..ow {
            tmp[y * ow + xo] = (0..SSIM_WIN).map(|j| k[j] * x[y * w + xo + j]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for yo in 0..oh {
        for xo in 0..ow {
            out[yo * ow + xo] = (0..SSIM_WIN).map(|j| k[j] * tmp[(yo + j) * ow + xo]).sum();
        }
    }
    out
}

/// Mean SSIM over one plane pair.
pub fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    let k = gaussian_window();
    let (c1, c2) = (0.01f64 * 0.01, 0.03f64 * 0.03);
    let prod = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> { a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect() };
    let mu_a = filter_valid(a, h, w, &k);
    let mu_b = filter_valid(b, h, w, &k);
    let aa = filter_valid(&prod(&|x, _| x * x), h, w, &k);
    let bb = filter_valid(&prod(&|_, y| y * y), h, w, &k);
    let ab = filter_valid(&prod(&|x, y| x * y), h, w, &k);
    let n = mu_a.len();
    let mut total = 0.0;
    for i in 0..n {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    total / n as f64
}

/// Single-scale SSIM, 11×11 Gaussian window (σ = 1.5), mean over frames
/// and channels.
pub fn ssim(a: &VideoTensor, b: &VideoTensor) -> Result<f64> {
    same_dims(a, b)?;
    let (t, h, w, c) = a.dims();
    if h < SSIM_WIN || w < SSIM_WIN {
        return Err(shape_err!("SSIM needs frames of at least {SSIM_WIN}x{SSIM_WIN}, got {h}x{w}"));
    }
    let plane = |v: &VideoTensor, n: usize, ch: usize| -> Vec<f64> { v.frame_slice(n).iter().skip(ch).step_by(c).cloned().collect() };
    let mut total = 0.0;
    for n in 0..t {
        for ch in 0..c {
            total += ssim_plane(&plane(a, n, ch), &plane(b, n, ch), h, w);
        }
    }
    Ok(total / (t * c) as f64)
}

fn need_pairs(v: &VideoTensor) -> Result<()> {
    if v.frames_len() < 2 {
        return Err(validation_err!("temporal metrics need at least 2 frames"));
    }
    Ok(())
}

/// Mean over consecutive pairs of the per-pixel `|Δdx| + |Δdy|` between the
/// flows of `gt` and of `out`.
pub fn t_of(out: &VideoTensor, gt: &VideoTensor, cfg: &FlowEstimatorConfig) -> Result<f64> {
    same_dims(out, gt)?;
    need_pairs(gt)?;
    let t = gt.frames_len();
    let mut total = 0.0;
    for n in 1..t {
        let fg = estimate_flow(&gt.frame(n - 1), &gt.frame(n), cfg)?;
        let fo = estimate_flow(&out.frame(n - 1), &out.frame(n), cfg)?;
        let s: f64 = fg.data.iter().zip(&fo.data).map(|(a, b)| (a - b).abs()).sum();
        total += s / (fg.h * fg.w) as f64;
    }
    Ok(total / (t - 1) as f64)
}

/// Mean over consecutive pairs of `|LP(gt pair) − LP(out pair)|` where `LP`
/// is the random-feature perceptual distance.
pub fn t_lp(out: &VideoTensor, gt: &VideoTensor, feat: &FeatureNet) -> Result<f64> {
    same_dims(out, gt)?;
    need_pairs(gt)?;
    let (t, h, w, c) = gt.dims();
    if c != feat.channels() {
        return Err(shape_err!("feature net expects {} channels, got {c}", feat.channels()));
    }
    let mut total = 0.0;
    for n in 1..t {
        let lg = feat.frame_distance(h, w, gt.frame_slice(n - 1), gt.frame_slice(n));
        let lo = feat.frame_distance(h, w, out.frame_slice(n - 1), out.frame_slice(n));
        total += (lg - lo).abs();
    }
    Ok(total / (t - 1) as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Metrics {
    pub psnr: f64,
    pub ssim: f64,
    pub tof: f64,
    pub tlp: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClipMetrics {
    pub id: String,
    pub metrics: Metrics,
}

/// Settings that determine metric values.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricConfig {
    pub flow: FlowEstimatorConfig,
    pub feature_seed: u64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self { flow: FlowEstimatorConfig::default(), feature_seed: 0 }
    }
}

impl MetricConfig {
    pub fn fingerprint(&self) -> String {
        let f = &self.flow;
        format!(
            "psnr(cap={PSNR_CAP});ssim(win=11,sigma=1.5);tof(block_match,block={},radius={},levels={});tlp(random_features,seed={})",
            f.block, f.search_radius, f.levels, self.feature_seed
        )
    }
}

pub fn evaluate_clip(id: &str, out: &VideoTensor, gt: &VideoTensor, cfg: &MetricConfig, feat: &FeatureNet) -> Result<ClipMetrics> {
    Ok(ClipMetrics {
        id: id.into(),
        metrics: Metrics {
            psnr: psnr(out, gt)?,
            ssim: ssim(out, gt)?,
            tof: t_of(out, gt, &cfg.flow)?,
            tlp: t_lp(out, gt, feat)?,
        },
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub fingerprint: String,
    pub clips: Vec<ClipMetrics>,
    pub mean: Metrics,
}

impl MetricReport {
    pub fn from_clips(fingerprint: String, clips: Vec<ClipMetrics>) -> Result<Self> {
        if clips.is_empty() {
            return Err(validation_err!("cannot build a report from an empty corpus"));
        }
        let n = clips.len() as f64;
        let mut mean = Metrics::default();
        for c in &clips {
            mean.psnr += c.metrics.psnr;
            mean.ssim += c.metrics.ssim;
            mean.tof += c.metrics.tof;
            mean.tlp += c.metrics.tlp;
        }
        mean.psnr /= n;
        mean.ssim /= n;
        mean.tof /= n;
        mean.tlp /= n;
        Ok(Self { fingerprint, clips, mean })
    }
}
