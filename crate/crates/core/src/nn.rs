//! Small layer building blocks on top of [`Graph`].

use alloc::format;

use crate::autodiff::{Graph, Var};
use crate::params::{Binding, Group, Init, ParamId, Params};
use crate::real::Real;
use crate::rng::Rng;

/// `k×k` convolution with bias, channel-last.
#[derive(Clone, Debug)]
pub struct Conv {
    w: ParamId,
    b: ParamId,
    stride: usize,
    pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        params: &mut Params<T>,
        rng: &mut Rng,
        name: &str,
        group: Group,
        k: usize,
        ci: usize,
        co: usize,
        stride: usize,
        zero: bool,
    ) -> Self {
        let init = if zero { Init::Zeros } else { Init::He(k * k * ci) };
        let w = params.add(&format!("{name}.w"), group, &[k, k, ci, co], init, rng);
        let b = params.add(&format!("{name}.b"), group, &[co], Init::Zeros, rng);
        Self { w, b, stride, pad: k / 2 }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Binding, x: Var) -> Var {
        let y = g.conv2d(x, p.var(self.w), self.stride, self.pad);
        g.add_broadcast(y, p.var(self.b))
    }
}

/// Affine map over the trailing axis.
#[derive(Clone, Debug)]
pub struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    pub fn new<T: Real>(
        params: &mut Params<T>,
        rng: &mut Rng,
        name: &str,
        group: Group,
        din: usize,
        dout: usize,
        init: Init,
    ) -> Self {
        let w = params.add(&format!("{name}.w"), group, &[din, dout], init, rng);
        let b = params.add(&format!("{name}.b"), group, &[dout], Init::Zeros, rng);
        Self { w, b }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Binding, x: Var) -> Var {
        let y = g.matmul(x, p.var(self.w));
        g.add_broadcast(y, p.var(self.b))
    }

    pub fn weight(&self) -> ParamId {
        self.w
    }

    pub fn bias(&self) -> ParamId {
        self.b
    }
}

/// Multi-head cross-attention with separate query/key/value/output maps.
#[derive(Clone, Debug)]
pub struct CrossAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
}

impl CrossAttention {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        params: &mut Params<T>,
        rng: &mut Rng,
        name: &str,
        group: Group,
        dq: usize,
        dkv: usize,
        width: usize,
        dout: usize,
        heads: usize,
        zero_out: bool,
    ) -> Self {
        assert!(width % heads == 0, "heads must divide attention width");
        let q = Linear::new(params, rng, &format!("{name}.q"), group, dq, width, Init::He(dq));
        let k = Linear::new(params, rng, &format!("{name}.k"), group, dkv, width, Init::He(dkv));
        let v = Linear::new(params, rng, &format!("{name}.v"), group, dkv, width, Init::He(dkv));
        let oi = if zero_out { Init::Zeros } else { Init::He(width) };
        let o = Linear::new(params, rng, &format!("{name}.o"), group, width, dout, oi);
        Self { q, k, v, o, heads }
    }

    /// `queries: [Lq, dq]`, `context: [Lk, dkv]` → `[Lq, dout]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Binding, queries: Var, context: Var) -> Var {
        let q = self.q.forward(g, p, queries);
        let k = self.k.forward(g, p, context);
        let v = self.v.forward(g, p, context);
        let a = g.attention(q, k, v, self.heads);
        self.o.forward(g, p, a)
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn projections(&self) -> [&Linear; 4] {
        [&self.q, &self.k, &self.v, &self.o]
    }
}
