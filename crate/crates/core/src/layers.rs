//! Parameterized building blocks: each holds the ids of its tensors in a [`ParamStore`]
//! and records its forward pass into a [`Graph`].

use rand::Rng;

use crate::error::Result;
use crate::graph::{Graph, ParamId, Var};
use crate::ops::LN_EPS;
use crate::params::{ParamKind, ParamStore};
use crate::ss2d::{SsmParams, SsmVars};
use crate::tensor::Tensor;

/// Standard deviation of the truncated-normal weight init.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub cin: usize,
    pub cout: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        cin: usize,
        cout: usize,
        bias: bool,
    ) -> Self {
        let w = store.add(
            format!("{name}.w"),
            ParamKind::Weight,
            Tensor::trunc_normal(&[cin, cout], INIT_STD, rng),
        );
        let b = bias.then(|| store.add(format!("{name}.b"), ParamKind::Bias, Tensor::zeros(&[cout])));
        Self { w, b, cin, cout }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = store.bind(g, self.w);
        let b = self.b.map(|b| store.bind(g, b));
        g.linear(x, w, b)
    }

    pub fn num_params(&self) -> usize {
        self.cin * self.cout + if self.b.is_some() { self.cout } else { 0 }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub channels: usize,
}

impl Norm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add(
                format!("{name}.gamma"),
                ParamKind::Norm,
                Tensor::full(&[channels], 1.0),
            ),
            beta: store.add(
                format!("{name}.beta"),
                ParamKind::Norm,
                Tensor::zeros(&[channels]),
            ),
            channels,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gamma = store.bind(g, self.gamma);
        let beta = store.bind(g, self.beta);
        g.layer_norm(x, gamma, beta, LN_EPS)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let w = store.add(
            format!("{name}.w"),
            ParamKind::Weight,
            Tensor::trunc_normal(&[cout, cin, k, k], INIT_STD, rng),
        );
        let b = Some(store.add(format!("{name}.b"), ParamKind::Bias, Tensor::zeros(&[cout])));
        Self { w, b, stride, pad }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = store.bind(g, self.w);
        let b = self.b.map(|b| store.bind(g, b));
        g.conv2d(x, w, b, self.stride, self.pad)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DwConv {
    pub w: ParamId,
    pub b: ParamId,
}

impl DwConv {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, c: usize, k: usize) -> Self {
        Self {
            w: store.add(
                format!("{name}.w"),
                ParamKind::Weight,
                Tensor::trunc_normal(&[c, k, k], INIT_STD, rng),
            ),
            b: store.add(format!("{name}.b"), ParamKind::Bias, Tensor::zeros(&[c])),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = store.bind(g, self.w);
        let b = store.bind(g, self.b);
        g.dwconv(x, w, Some(b))
    }
}

/// Parameter ids of one scan direction.
#[derive(Clone, Copy, Debug)]
pub struct Ssm {
    pub a_log: ParamId,
    pub d_skip: ParamId,
    pub w_delta: ParamId,
    pub b_delta: ParamId,
    pub w_b: ParamId,
    pub w_c: ParamId,
}

impl Ssm {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, d: usize, n: usize) -> Self {
        let p = SsmParams::init(d, n, rng);
        let mut add = |field: &str, t: Tensor| store.add(format!("{name}.{field}"), ParamKind::Ssm, t);
        Self {
            a_log: add("a_log", p.a_log),
            d_skip: add("d_skip", p.d_skip),
            w_delta: add("w_delta", p.w_delta),
            b_delta: add("b_delta", p.b_delta),
            w_b: add("w_b", p.w_b),
            w_c: add("w_c", p.w_c),
        }
    }

    pub fn bind(&self, g: &mut Graph, store: &ParamStore) -> SsmVars {
        SsmVars {
            a_log: store.bind(g, self.a_log),
            d_skip: store.bind(g, self.d_skip),
            w_delta: store.bind(g, self.w_delta),
            b_delta: store.bind(g, self.b_delta),
            w_b: store.bind(g, self.w_b),
            w_c: store.bind(g, self.w_c),
        }
    }

    /// Current values as a standalone [`SsmParams`].
    pub fn params(&self, store: &ParamStore) -> SsmParams {
        SsmParams {
            a_log: store.get(self.a_log).detached(),
            d_skip: store.get(self.d_skip).detached(),
            w_delta: store.get(self.w_delta).detached(),
            b_delta: store.get(self.b_delta).detached(),
            w_b: store.get(self.w_b).detached(),
            w_c: store.get(self.w_c).detached(),
        }
    }
}
