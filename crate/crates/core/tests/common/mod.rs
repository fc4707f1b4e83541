#![allow(dead_code)]

use rand::Rng as _;
use stvsr_core::autodiff::Graph;
use stvsr_core::params::{Binding, Params};
use stvsr_core::rng::stream;
use stvsr_core::{Frame, Tensor, VideoTensor};

pub fn rand_frame(h: usize, w: usize, c: usize, seed: u64) -> Frame {
    let mut r = stream(seed, "test/frame");
    Frame::new(h, w, c, (0..h * w * c).map(|_| r.random_range(0.0..1.0)).collect()).unwrap()
}

pub fn rand_video(t: usize, h: usize, w: usize, c: usize, seed: u64) -> VideoTensor {
    let mut r = stream(seed, "test/video");
    VideoTensor::new(t, h, w, c, (0..t * h * w * c).map(|_| r.random_range(0.0..1.0)).collect()).unwrap()
}

pub fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut r = stream(seed, "test/tensor");
    Tensor::from_fn(shape, |_| r.random_range(-1.0..1.0))
}

/// Fills every all-zero tensor with small noise so that no gradient path is
/// switched off by a zero initialiser.
pub fn perturb_zeros(params: &mut Params<f64>, seed: u64) {
    let mut r = stream(seed, "test/perturb");
    for i in 0..params.len() {
        let t = params.value_mut(i);
        if t.data().iter().all(|&v| v == 0.0) {
            for v in t.data_mut() {
                *v = r.random_range(-0.05..0.05);
            }
        }
    }
}

/// Largest relative error between reverse-mode and central-difference
/// gradients of the scalar `f` over `n` random parameter coordinates with
/// non-negligible gradient, restricted to parameters accepted by `pick`.
pub fn grad_check(
    params: &Params<f64>,
    pick: impl Fn(usize) -> bool,
    f: impl Fn(&mut Graph<f64>, &Binding) -> stvsr_core::autodiff::Var,
    n: usize,
    h: f64,
    seed: u64,
) -> f64 {
    let mut g = Graph::new();
    let p = params.bind(&mut g, |_| true);
    let out = f(&mut g, &p);
    let mut grads = g.backward(out);
    let grads = p.collect(&mut grads);
    let eval = |ps: &Params<f64>| {
        let mut g = Graph::new();
        let p = ps.bind(&mut g, |_| false);
        let out = f(&mut g, &p);
        g.scalar(out)
    };
    let ids: Vec<usize> = (0..params.len()).filter(|&i| pick(i)).collect();
    assert!(!ids.is_empty());
    let mut r = stream(seed, "test/coords");
    let mut worst: f64 = 0.0;
    let (mut done, mut tries) = (0, 0);
    while done < n {
        tries += 1;
        assert!(tries < 100 * n, "too few coordinates with a usable gradient");
        let i = ids[r.random_range(0..ids.len())];
        let Some(gt) = grads[i].as_ref() else { continue };
        let k = r.random_range(0..gt.len());
        let a = gt.data()[k];
        if a.abs() < 1e-8 {
            continue;
        }
        let mut ps = params.clone();
        let x0 = ps.entries()[i].value.data()[k];
        ps.value_mut(i).data_mut()[k] = x0 + h;
        let up = eval(&ps);
        ps.value_mut(i).data_mut()[k] = x0 - h;
        let down = eval(&ps);
        let num = (up - down) / (2.0 * h);
        worst = worst.max((a - num).abs() / a.abs().max(num.abs()));
        done += 1;
    }
    worst
}
