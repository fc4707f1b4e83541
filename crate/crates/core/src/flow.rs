//! Optical flow estimation, backward warping and forward–backward
//! consistency masks.

use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::Taps;
use crate::error::{domain_err, shape_err, validation_err, Result};
use crate::real::Real;
use crate::video::{FlowField, Frame, ValidityMask};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FlowMethod {
    /// Coarse-to-fine exhaustive block matching.
    BlockMatch,
    /// Ground-truth flow supplied by the data generator.
    InjectedTruth,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FlowEstimatorConfig {
    pub method: FlowMethod,
    /// Matching window side, pixels.
    pub block: usize,
    /// Per-level search radius (Chebyshev), pixels.
    pub search_radius: usize,
    /// Pyramid depth; 1 means single scale.
    pub levels: usize,
}

impl Default for FlowEstimatorConfig {
    fn default() -> Self {
        Self { method: FlowMethod::BlockMatch, block: 5, search_radius: 2, levels: 3 }
    }
}

impl FlowEstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.block == 0 || self.levels == 0 {
            return Err(validation_err!("flow config needs block >= 1 and levels >= 1"));
        }
        Ok(())
    }
}

/// Source of flow fields for a pair of frames `(from, to)` in one clip.
pub trait FlowEstimator {
    fn estimate(&self, a: &Frame, b: &Frame, from: usize, to: usize) -> Result<FlowField>;
}

/// Block matching per [`FlowEstimatorConfig`].
#[derive(Clone, Copy, Debug, Default)]
pub struct BlockMatcher(pub FlowEstimatorConfig);

impl FlowEstimator for BlockMatcher {
    fn estimate(&self, a: &Frame, b: &Frame, from: usize, to: usize) -> Result<FlowField> {
        Ok(block_match(a, b, &self.0)?.between(from, to))
    }
}

/// Known flows for consecutive frame pairs: `fwd[n]` is `n → n+1`,
/// `bwd[n]` is `n+1 → n`.
#[derive(Clone, Debug)]
pub struct InjectedTruth {
    pub fwd: Vec<FlowField>,
    pub bwd: Vec<FlowField>,
}

impl FlowEstimator for InjectedTruth {
    fn estimate(&self, _a: &Frame, _b: &Frame, from: usize, to: usize) -> Result<FlowField> {
        let f = if to == from + 1 {
            self.fwd.get(from)
        } else if from == to + 1 {
            self.bwd.get(to)
        } else {
            None
        };
        f.cloned().map(|f| f.between(from, to)).ok_or_else(|| domain_err!("no injected flow for pair {from} -> {to}"))
    }
}

/// Estimates the displacement field mapping pixels of `a` to `b`.
pub fn estimate_flow(a: &Frame, b: &Frame, cfg: &FlowEstimatorConfig) -> Result<FlowField> {
    match cfg.method {
        FlowMethod::BlockMatch => block_match(a, b, cfg),
        FlowMethod::InjectedTruth => Err(domain_err!("injected-truth flow must be supplied through InjectedTruth")),
    }
}

/// Forward and backward flows for every consecutive pair of `frames`.
pub fn pairwise_flows(frames: &[Frame], est: &dyn FlowEstimator) -> Result<(Vec<FlowField>, Vec<FlowField>)> {
    let mut fwd = Vec::new();
    let mut bwd = Vec::new();
    for n in 0..frames.len().saturating_sub(1) {
        fwd.push(est.estimate(&frames[n], &frames[n + 1], n, n + 1)?);
        bwd.push(est.estimate(&frames[n + 1], &frames[n], n + 1, n)?);
    }
    Ok((fwd, bwd))
}

fn downsample2(f: &Frame) -> Frame {
    let (h, w) = (f.h / 2, f.w / 2);
    let mut out = Frame::filled(h, w, f.c, 0.0);
    for y in 0..h {
        for x in 0..w {
            for c in 0..f.c {
                let s = f.at(2 * y, 2 * x, c) + f.at(2 * y + 1, 2 * x, c) + f.at(2 * y, 2 * x + 1, c) + f.at(2 * y + 1, 2 * x + 1, c);
                out.set(y, x, c, 0.25 * s);
            }
        }
    }
    out
}

fn block_match(a: &Frame, b: &Frame, cfg: &FlowEstimatorConfig) -> Result<FlowField> {
    cfg.validate()?;
    if !a.same_shape(b) {
        return Err(shape_err!("flow frames differ: {}x{}x{} vs {}x{}x{}", a.h, a.w, a.c, b.h, b.w, b.c));
    }
    let mut pa = vec![a.clone()];
    let mut pb = vec![b.clone()];
    while pa.len() < cfg.levels {
        let last = pa.last().unwrap();
        if last.h < 4 || last.w < 4 {
            break;
        }
        let (na, nb) = (downsample2(last), downsample2(pb.last().unwrap()));
        pa.push(na);
        pb.push(nb);
    }
    let mut flow: Option<Vec<(i32, i32)>> = None;
    for lvl in (0..pa.len()).rev() {
        let (fa, fb) = (&pa[lvl], &pb[lvl]);
        let init: Vec<(i32, i32)> = match &flow {
            None => vec![(0, 0); fa.h * fa.w],
            Some(coarse) => {
                let (ch, cw) = (pa[lvl + 1].h, pa[lvl + 1].w);
                let mut v = Vec::with_capacity(fa.h * fa.w);
                for y in 0..fa.h {
                    for x in 0..fa.w {
                        let (dx, dy) = coarse[(y / 2).min(ch - 1) * cw + (x / 2).min(cw - 1)];
                        v.push((2 * dx, 2 * dy));
                    }
                }
                v
            }
        };
        flow = Some(match_level(fa, fb, &init, cfg.block, cfg.search_radius as i32));
    }
    let flow = flow.unwrap();
    let data = flow.iter().flat_map(|&(dx, dy)| [dx as f64, dy as f64]).collect();
    FlowField::new(a.h, a.w, data)
}

fn match_level(a: &Frame, b: &Frame, init: &[(i32, i32)], block: usize, r: i32) -> Vec<(i32, i32)> {
    let (h, w, c) = (a.h as i32, a.w as i32, a.c);
    let lo = -(block as i32 / 2);
    let hi = lo + block as i32;
    let clampi = |v: i32, n: i32| v.clamp(0, n - 1) as usize;
    let mut out = Vec::with_capacity(init.len());
    for y in 0..h {
        for x in 0..w {
            let (ix, iy) = init[(y * w + x) as usize];
            let mut best: Option<(f64, i32, i32, i32)> = None; // cost, |d|^2, dy, dx
            for sy in -r..=r {
                for sx in -r..=r {
                    let (dx, dy) = (ix + sx, iy + sy);
                    let mut cost = 0.0;
                    for oy in lo..hi {
                        let ay = clampi(y + oy, h);
                        let by = clampi(y + oy + dy, h);
                        for ox in lo..hi {
                            let ax = clampi(x + ox, w);
                            let bx = clampi(x + ox + dx, w);
                            let pa = &a.data[(ay * a.w + ax) * c..][..c];
                            let pb = &b.data[(by * b.w + bx) * c..][..c];
                            for k in 0..c {
                                cost += (pa[k] - pb[k]).abs();
                            }
                        }
                    }
                    let cand = (cost, dx * dx + dy * dy, dy, dx);
                    let better = match best {
                        None => true,
                        Some(bst) => {
                            cand.0 < bst.0 || (cand.0 == bst.0 && (cand.1, cand.2, cand.3) < (bst.1, bst.2, bst.3))
                        }
                    };
                    if better {
                        best = Some(cand);
                    }
                }
            }
            let (_, _, dy, dx) = best.unwrap();
            out.push((dx, dy));
        }
    }
    out
}

/// Bilinear taps at `(px, py)` with positions clamped to the frame.
/// Returns flat pixel indices and weights.
#[inline]
pub fn bilinear_taps(h: usize, w: usize, px: f64, py: f64) -> [(usize, f64); 4] {
    let px = px.clamp(0.0, (w - 1) as f64);
    let py = py.clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (libm::floor(px) as usize, libm::floor(py) as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (px - x0 as f64, py - y0 as f64);
    [
        (y0 * w + x0, (1.0 - fx) * (1.0 - fy)),
        (y0 * w + x1, fx * (1.0 - fy)),
        (y1 * w + x0, (1.0 - fx) * fy),
        (y1 * w + x1, fx * fy),
    ]
}

/// `out(x) = frame(x + flow(x))`, bilinear, border-clamped.
pub fn backward_warp(frame: &Frame, flow: &FlowField) -> Result<Frame> {
    if (frame.h, frame.w) != (flow.h, flow.w) {
        return Err(shape_err!("warp frame {}x{} vs flow {}x{}", frame.h, frame.w, flow.h, flow.w));
    }
    let c = frame.c;
    let mut out = Frame::filled(frame.h, frame.w, c, 0.0);
    for y in 0..frame.h {
        for x in 0..frame.w {
            let (dx, dy) = flow.at(y, x);
            let taps = bilinear_taps(frame.h, frame.w, x as f64 + dx, y as f64 + dy);
            let o = &mut out.data[(y * frame.w + x) * c..][..c];
            for (idx, wt) in taps {
                if wt == 0.0 {
                    continue;
                }
                for k in 0..c {
                    o[k] += wt * frame.data[idx * c + k];
                }
            }
        }
    }
    Ok(out)
}

/// Graph taps warping a stack of `flows.len()` frames of size `h×w`;
/// frame `n` samples only from frame `n` of the stack.
pub fn warp_taps<T: Real>(flows: &[&FlowField], h: usize, w: usize) -> Vec<Taps<T>> {
    let mut taps = Vec::with_capacity(flows.len() * h * w);
    for (n, f) in flows.iter().enumerate() {
        assert_eq!((f.h, f.w), (h, w), "flow shape mismatch");
        let base = n * h * w;
        for y in 0..h {
            for x in 0..w {
                let (dx, dy) = f.at(y, x);
                let t = bilinear_taps(h, w, x as f64 + dx, y as f64 + dy);
                taps.push(t.map(|(i, wt)| ((base + i) as u32, T::of(wt))));
            }
        }
    }
    taps
}

/// Bilinear lookup of a flow field at a real position.
fn sample_flow(f: &FlowField, px: f64, py: f64) -> (f64, f64) {
    let mut s = (0.0, 0.0);
    for (idx, wt) in bilinear_taps(f.h, f.w, px, py) {
        s.0 += wt * f.data[2 * idx];
        s.1 += wt * f.data[2 * idx + 1];
    }
    s
}

/// `M(x) = 1` where `|f_fwd(x) + f_bwd(x + f_fwd(x))| <= eps`, else 0.
pub fn consistency_mask(f_fwd: &FlowField, f_bwd: &FlowField, eps: f64) -> Result<ValidityMask> {
    if (f_fwd.h, f_fwd.w) != (f_bwd.h, f_bwd.w) {
        return Err(shape_err!("mask flows differ in shape"));
    }
    if eps.is_nan() || eps <= 0.0 {
        return Err(domain_err!("consistency eps must be > 0, got {eps}"));
    }
    let (h, w) = (f_fwd.h, f_fwd.w);
    let mut data = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = f_fwd.at(y, x);
            let (bx, by) = sample_flow(f_bwd, x as f64 + dx, y as f64 + dy);
            let (ex, ey) = (dx + bx, dy + by);
            data.push(if libm::sqrt(ex * ex + ey * ey) <= eps { 1.0 } else { 0.0 });
        }
    }
    Ok(ValidityMask { h, w, data })
}
