//! Reverse-mode differentiation over the closed set of primitives the network uses.
//!
//! A [`Graph`] is an append-only tape. Every primitive evaluates eagerly, pushes a node
//! holding its output plus whatever the backward rule needs, and returns a [`Var`]
//! handle. Because nodes are only ever appended, inputs always precede their consumers
//! and a single reverse sweep visits each node exactly once.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom, NormCache, ResizePlan};
use crate::ss2d::{scan_backward, scan_forward};
use crate::tensor::Tensor;

/// Index of a learnable tensor in a [`crate::params::ParamStore`].
pub type ParamId = usize;

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary {
    Silu,
    Softplus,
    Sigmoid,
    /// `-exp(x)`: maps a log-parameterized state matrix to its strictly negative value.
    NegExp,
    Scale(f64),
}

impl Unary {
    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Silu => kernels::silu(x),
            Unary::Softplus => kernels::softplus(x),
            Unary::Sigmoid => kernels::sigmoid(x),
            Unary::NegExp => -x.exp(),
            Unary::Scale(s) => s * x,
        }
    }

    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Silu => kernels::silu_grad(x),
            Unary::Softplus => kernels::sigmoid(x),
            Unary::Sigmoid => y * (1.0 - y),
            Unary::NegExp => y,
            Unary::Scale(s) => s,
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
        rows: usize,
        cin: usize,
        cout: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    DwConv {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        cache: NormCache,
    },
    Unary {
        x: Var,
        f: Unary,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Concat {
        inputs: Vec<Var>,
        outer: usize,
        widths: Vec<usize>,
    },
    Gather {
        x: Var,
        index: Arc<[usize]>,
        block: usize,
    },
    Resize {
        x: Var,
        plan: ResizePlan,
    },
    Scan {
        u: Var,
        delta: Var,
        a: Var,
        b: Var,
        c: Var,
        d: Var,
        states: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Dice {
        p: Var,
        gt: Arc<[f64]>,
        smooth: f64,
    },
    Focal {
        p: Var,
        gt: Arc<[f64]>,
        gamma: f64,
        alpha: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    param: Option<ParamId>,
}

/// Lower clamp applied to `p_t` inside the focal loss before the logarithm.
pub const FOCAL_EPS: f64 = 1e-12;

#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    record: bool,
    macs: u64,
    params: HashMap<ParamId, Var>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// A graph that records everything needed for [`Graph::backward`].
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            record: true,
            macs: 0,
            params: HashMap::new(),
        }
    }

    /// A graph for pure evaluation: nothing requires grad and no intermediates are kept.
    pub fn inference() -> Self {
        Self {
            record: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulate operations executed so far by MAC-bearing primitives.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad
    }

    /// Gradient of the last backward pass with respect to `v`, if it has one.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    /// `(id, gradient)` for every parameter leaf that received one.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &[f64])> + '_ {
        self.params
            .iter()
            .filter_map(|(&id, &v)| self.grad(v).map(|g| (id, g)))
    }

    pub fn param_var(&self, id: ParamId) -> Option<Var> {
        self.params.get(&id).copied()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.grad = None;
        }
    }

    fn push(&mut self, mut value: Tensor, op: Op, requires_grad: bool) -> Var {
        value.requires_grad = requires_grad && self.record;
        value.grad = None;
        self.nodes.push(Node {
            value,
            op,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        self.record && vars.iter().any(|v| self.nodes[v.0].value.requires_grad)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf that receives a gradient (when recording).
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf for a learnable tensor; repeated calls with the same id return the same node.
    pub fn param(&mut self, id: ParamId, t: &Tensor) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(t.detached(), Op::Leaf, true);
        self.nodes[v.0].param = Some(id);
        self.params.insert(id, v);
        v
    }

    // ---------------------------------------------------------------- primitives

    /// `y[..., j] = Σ_i x[..., i] W[i, j] + b[j]` over the last axis of `x`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let cin = *xs.last().expect("rank >= 1");
        if ws.len() != 2 || ws[0] != cin {
            return Err(Error::dim("linear", &xs, &ws));
        }
        let cout = ws[1];
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(Error::dim("linear", &ws, self.shape(b)));
            }
        }
        let rows = self.value(x).len() / cin;
        let mut out = vec![0.0; rows * cout];
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.chunks_mut(cout) {
                row.copy_from_slice(bv);
            }
        }
        kernels::gemm(
            rows,
            cin,
            cout,
            self.value(x).data(),
            false,
            self.value(w).data(),
            false,
            &mut out,
            1.0,
        );
        self.macs += (rows * cin * cout) as u64;
        let mut shape = xs;
        *shape.last_mut().expect("rank >= 1") = cout;
        let rg = self.any_grad(&[x, w]) || b.is_some_and(|b| self.any_grad(&[b]));
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::Linear {
                x,
                w,
                b,
                rows,
                cin,
                cout,
            },
            rg,
        ))
    }

    /// Zero-padded cross-correlation of `[C, H, W]` with `[K, C, kh, kw]` kernels.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(x), self.shape(w), stride, pad)?;
        if let Some(b) = b {
            if self.shape(b) != [geom.k] {
                return Err(Error::dim("conv2d", self.shape(w), self.shape(b)));
            }
        }
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &geom,
        );
        self.macs += geom.macs();
        let rg = self.any_grad(&[x, w]) || b.is_some_and(|b| self.any_grad(&[b]));
        Ok(self.push(
            Tensor::new(&geom.out_shape(), out)?,
            Op::Conv2d { x, w, b, geom },
            rg,
        ))
    }

    /// Per-channel "same" convolution: `[C, H, W]` with `[C, kh, kw]` kernels (odd sizes).
    pub fn dwconv(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 3 || ws.len() != 3 || ws[0] != xs[0] {
            return Err(Error::dim("dwconv", &xs, &ws));
        }
        if ws[1].is_multiple_of(2) || ws[2].is_multiple_of(2) {
            return Err(Error::domain("dwconv", "kernel extents must be odd"));
        }
        if ws[1] > xs[1] + 2 * (ws[1] / 2) || ws[2] > xs[2] + 2 * (ws[2] / 2) {
            return Err(Error::dim("dwconv", &xs, &ws));
        }
        if let Some(b) = b {
            if self.shape(b) != [xs[0]] {
                return Err(Error::dim("dwconv", &xs, self.shape(b)));
            }
        }
        let out = kernels::dwconv_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            xs[0],
            xs[1],
            xs[2],
            ws[1],
            ws[2],
        );
        self.macs += (xs[0] * xs[1] * xs[2] * ws[1] * ws[2]) as u64;
        let rg = self.any_grad(&[x, w]) || b.is_some_and(|b| self.any_grad(&[b]));
        Ok(self.push(Tensor::new(&xs, out)?, Op::DwConv { x, w, b }, rg))
    }

    /// Normalization over the last axis followed by the `gamma`/`beta` affine.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let c = self.value(x).last_dim();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::dim("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let rg = self.any_grad(&[x, gamma, beta]);
        let (out, cache) = kernels::layer_norm_forward(
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            c,
            eps,
            rg,
        );
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                cache,
            },
            rg,
        ))
    }

    pub fn unary(&mut self, x: Var, f: Unary) -> Var {
        let out = self.value(x).map(|v| f.apply(v));
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Unary { x, f }, rg)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Silu)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Softplus)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn neg_exp(&mut self, x: Var) -> Var {
        self.unary(x, Unary::NegExp)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, Unary::Scale(s))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*inputs.first().ok_or_else(|| Error::Usage("empty concat".into()))?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::domain("concat", format!("axis {axis} out of range")));
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut widths = Vec::with_capacity(inputs.len());
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != first.len()
                || s[..axis] != first[..axis]
                || s[axis + 1..] != first[axis + 1..]
            {
                return Err(Error::dim("concat", &first, s));
            }
            widths.push(s[axis] * inner);
            total += s[axis];
        }
        let row: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(outer * row);
        for o in 0..outer {
            for (&v, &wdt) in inputs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(v).data()[o * wdt..(o + 1) * wdt]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = self.any_grad(inputs);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                outer,
                widths,
            },
            rg,
        ))
    }

    /// `out.block(i) = x.block(index[i])` for contiguous blocks of `block` elements.
    ///
    /// Every permutation-style rearrangement (cross-scan, cross-merge, pixel shuffle,
    /// layout transposes) is expressed through this one primitive; its backward is the
    /// scatter-add of the same index map.
    pub fn gather(
        &mut self,
        x: Var,
        index: Arc<[usize]>,
        block: usize,
        shape: &[usize],
    ) -> Result<Var> {
        let src = self.value(x);
        let nblocks = src.len() / block;
        if !src.len().is_multiple_of(block) || index.iter().any(|&i| i >= nblocks) {
            return Err(Error::domain("gather", "index out of range"));
        }
        let mut out = Vec::with_capacity(index.len() * block);
        let data = src.data();
        for &i in index.iter() {
            out.extend_from_slice(&data[i * block..(i + 1) * block]);
        }
        let t = Tensor::new(shape, out)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(t, Op::Gather { x, index, block }, rg))
    }

    /// `[H, W, C]` to `[C, H, W]`.
    pub fn hwc_to_chw(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(Error::dim("hwc_to_chw", &s, &[0, 0, 0]));
        }
        let (h, w, c) = (s[0], s[1], s[2]);
        let index: Vec<usize> = (0..c)
            .flat_map(|ch| (0..h * w).map(move |p| p * c + ch))
            .collect();
        self.gather(x, index.into(), 1, &[c, h, w])
    }

    /// `[C, H, W]` to `[H, W, C]`.
    pub fn chw_to_hwc(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(Error::dim("chw_to_hwc", &s, &[0, 0, 0]));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let index: Vec<usize> = (0..h * w)
            .flat_map(|p| (0..c).map(move |ch| ch * h * w + p))
            .collect();
        self.gather(x, index.into(), 1, &[h, w, c])
    }

    /// Bilinear resampling of `[C, H, W]` with half-pixel centers.
    pub fn resize(&mut self, x: Var, ho: usize, wo: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || ho == 0 || wo == 0 {
            return Err(Error::dim("resize", &s, &[ho, wo]));
        }
        let plan = ResizePlan::new(s[0], s[1], s[2], ho, wo);
        let out = plan.forward(self.value(x).data());
        self.macs += plan.macs();
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::new(&[s[0], ho, wo], out)?,
            Op::Resize { x, plan },
            rg,
        ))
    }

    /// Selective scan over `u: [L, D]` with `delta: [L, D]`, `a: [D, N]`, `b, c: [L, N]`,
    /// skip `d: [D]`; see [`crate::ss2d`] for the recurrence.
    pub fn scan(&mut self, u: Var, delta: Var, a: Var, b: Var, c: Var, d: Var) -> Result<Var> {
        let us = self.shape(u).to_vec();
        let as_ = self.shape(a).to_vec();
        if us.len() != 2 || as_.len() != 2 || as_[0] != us[1] {
            return Err(Error::dim("scan", &us, &as_));
        }
        let (l, dch, n) = (us[0], us[1], as_[1]);
        if self.shape(delta) != us.as_slice() {
            return Err(Error::dim("scan", &us, self.shape(delta)));
        }
        for v in [b, c] {
            if self.shape(v) != [l, n] {
                return Err(Error::dim("scan", &[l, n], self.shape(v)));
            }
        }
        if self.shape(d) != [dch] {
            return Err(Error::dim("scan", &[dch], self.shape(d)));
        }
        let rg = self.any_grad(&[u, delta, a, b, c, d]);
        let mut states = Vec::new();
        let y = scan_forward(
            self.value(u).data(),
            self.value(delta).data(),
            self.value(a).data(),
            self.value(b).data(),
            self.value(c).data(),
            self.value(d).data(),
            l,
            dch,
            n,
            l,
            rg.then_some(&mut states),
        );
        self.macs += crate::ss2d::scan_macs(l, dch, n);
        Ok(self.push(
            Tensor::new(&us, y)?,
            Op::Scan {
                u,
                delta,
                a,
                b,
                c,
                d,
                states,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let m = t.sum() / t.len() as f64;
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(m), Op::Mean(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).detached().reshape(shape)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// `1 - (2 Σ p g + s) / (Σ p + Σ g + s)` against a fixed binary target.
    pub fn dice_loss(&mut self, p: Var, gt: Arc<[f64]>, smooth: f64) -> Result<Var> {
        let pv = self.value(p).data();
        if pv.len() != gt.len() {
            return Err(Error::dim("dice_loss", self.shape(p), &[gt.len()]));
        }
        let (num, den) = dice_terms(pv, &gt, smooth);
        let rg = self.any_grad(&[p]);
        Ok(self.push(
            Tensor::scalar(1.0 - num / den),
            Op::Dice { p, gt, smooth },
            rg,
        ))
    }

    /// Mean over pixels of `-α_t (1 - p_t)^γ ln p_t` against a fixed binary target.
    pub fn focal_loss(&mut self, p: Var, gt: Arc<[f64]>, gamma: f64, alpha: f64) -> Result<Var> {
        let pv = self.value(p).data();
        if pv.len() != gt.len() {
            return Err(Error::dim("focal_loss", self.shape(p), &[gt.len()]));
        }
        let total: f64 = pv
            .iter()
            .zip(gt.iter())
            .map(|(&pi, &gi)| focal_term(pi, gi, gamma, alpha).0)
            .sum();
        let rg = self.any_grad(&[p]);
        Ok(self.push(
            Tensor::scalar(total / pv.len() as f64),
            Op::Focal {
                p,
                gt,
                gamma,
                alpha,
            },
            rg,
        ))
    }

    // ---------------------------------------------------------------- backward

    /// Populates gradients of `loss` with respect to every node that requires one.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.record {
            return Err(Error::Usage("backward on an inference graph".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.requires_grad(loss) {
            return Err(Error::Usage(
                "backward on a value detached from every learnable input".into(),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            if !g.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of node {i}")));
            }
            self.nodes[i].value.grad = Some(g);
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = move |v: Var| nodes[v.0].value.data();
        macro_rules! slot {
            ($v:expr) => {
                grad_slot(nodes, grads, $v)
            };
        }
        macro_rules! opt_slot {
            ($v:expr) => {
                match $v {
                    Some(v) => grad_slot(nodes, grads, v),
                    None => None,
                }
            };
        }
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Linear {
                x,
                w,
                b,
                rows,
                cin,
                cout,
            } => {
                let (rows, cin, cout) = (*rows, *cin, *cout);
                if let Some(gx) = slot!(*x) {
                    kernels::gemm(rows, cout, cin, g, false, val(*w), true, gx, 1.0);
                }
                if let Some(gw) = slot!(*w) {
                    kernels::gemm(cin, rows, cout, val(*x), true, g, false, gw, 1.0);
                }
                if let Some(gb) = opt_slot!(*b) {
                    for row in g.chunks(cout) {
                        for (acc, v) in gb.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                if let Some(gb) = opt_slot!(*b) {
                    kernels::conv2d_backward(val(*x), val(*w), g, geom, None, None, Some(gb));
                }
                if let Some(gw) = slot!(*w) {
                    kernels::conv2d_backward(val(*x), val(*w), g, geom, None, Some(gw), None);
                }
                if let Some(gx) = slot!(*x) {
                    kernels::conv2d_backward(val(*x), val(*w), g, geom, Some(gx), None, None);
                }
            }
            Op::DwConv { x, w, b } => {
                let xs = nodes[x.0].value.shape();
                let ws = nodes[w.0].value.shape();
                let (c, h, wd, kh, kw) = (xs[0], xs[1], xs[2], ws[1], ws[2]);
                if let Some(gb) = opt_slot!(*b) {
                    kernels::dwconv_backward(
                        val(*x),
                        val(*w),
                        g,
                        c,
                        h,
                        wd,
                        kh,
                        kw,
                        None,
                        None,
                        Some(gb),
                    );
                }
                if let Some(gw) = slot!(*w) {
                    kernels::dwconv_backward(
                        val(*x),
                        val(*w),
                        g,
                        c,
                        h,
                        wd,
                        kh,
                        kw,
                        None,
                        Some(gw),
                        None,
                    );
                }
                if let Some(gx) = slot!(*x) {
                    kernels::dwconv_backward(
                        val(*x),
                        val(*w),
                        g,
                        c,
                        h,
                        wd,
                        kh,
                        kw,
                        Some(gx),
                        None,
                        None,
                    );
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                cache,
            } => {
                let c = nodes[gamma.0].value.len();
                let gm = val(*gamma);
                if let Some(gg) = slot!(*gamma) {
                    kernels::layer_norm_backward(g, gm, cache, c, None, Some(gg), None);
                }
                if let Some(gbt) = slot!(*beta) {
                    kernels::layer_norm_backward(g, gm, cache, c, None, None, Some(gbt));
                }
                if let Some(gx) = slot!(*x) {
                    kernels::layer_norm_backward(g, gm, cache, c, Some(gx), None, None);
                }
            }
            Op::Unary { x, f } => {
                let y = nodes[i].value.data();
                let xv = val(*x);
                if let Some(gx) = slot!(*x) {
                    for k in 0..gx.len() {
                        gx[k] += g[k] * f.derivative(xv[k], y[k]);
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(gv) = slot!(v) {
                        for (acc, d) in gv.iter_mut().zip(g) {
                            *acc += d;
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                if let Some(ga) = slot!(*a) {
                    for k in 0..ga.len() {
                        ga[k] += g[k] * bv[k];
                    }
                }
                if let Some(gb) = slot!(*b) {
                    for k in 0..gb.len() {
                        gb[k] += g[k] * av[k];
                    }
                }
            }
            Op::Concat {
                inputs,
                outer,
                widths,
            } => {
                let row: usize = widths.iter().sum();
                let mut offset = 0;
                for (&v, &wdt) in inputs.iter().zip(widths) {
                    if let Some(gv) = slot!(v) {
                        for o in 0..*outer {
                            let src = &g[o * row + offset..o * row + offset + wdt];
                            for (acc, d) in gv[o * wdt..(o + 1) * wdt].iter_mut().zip(src) {
                                *acc += d;
                            }
                        }
                    }
                    offset += wdt;
                }
            }
            Op::Gather { x, index, block } => {
                if let Some(gx) = slot!(*x) {
                    let b = *block;
                    for (k, &src) in index.iter().enumerate() {
                        for (acc, d) in gx[src * b..(src + 1) * b]
                            .iter_mut()
                            .zip(&g[k * b..(k + 1) * b])
                        {
                            *acc += d;
                        }
                    }
                }
            }
            Op::Resize { x, plan } => {
                if let Some(gx) = slot!(*x) {
                    plan.backward(g, gx);
                }
            }
            Op::Scan {
                u,
                delta,
                a,
                b,
                c,
                d,
                states,
            } => {
                let us = nodes[u.0].value.shape();
                let (l, dch) = (us[0], us[1]);
                let n = nodes[a.0].value.shape()[1];
                let sg = scan_backward(
                    g,
                    val(*u),
                    val(*delta),
                    val(*a),
                    val(*b),
                    val(*c),
                    val(*d),
                    states,
                    l,
                    dch,
                    n,
                );
                for (v, gv) in [
                    (*u, &sg.u),
                    (*delta, &sg.delta),
                    (*a, &sg.a),
                    (*b, &sg.b),
                    (*c, &sg.c),
                    (*d, &sg.d),
                ] {
                    if let Some(acc) = slot!(v) {
                        for (s, x) in acc.iter_mut().zip(gv) {
                            *s += x;
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = slot!(*x) {
                    gx.iter_mut().for_each(|v| *v += g[0]);
                }
            }
            Op::Mean(x) => {
                if let Some(gx) = slot!(*x) {
                    let s = g[0] / gx.len() as f64;
                    gx.iter_mut().for_each(|v| *v += s);
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = slot!(*x) {
                    for (acc, d) in gx.iter_mut().zip(g) {
                        *acc += d;
                    }
                }
            }
            Op::Dice { p, gt, smooth } => {
                let pv = val(*p);
                let (num, den) = dice_terms(pv, gt, *smooth);
                if let Some(gp) = slot!(*p) {
                    // d/dp_i [1 - num/den] = -(2 g_i den - num) / den²
                    for k in 0..gp.len() {
                        gp[k] += g[0] * -(2.0 * gt[k] * den - num) / (den * den);
                    }
                }
            }
            Op::Focal {
                p,
                gt,
                gamma,
                alpha,
            } => {
                let pv = val(*p);
                let scale = g[0] / pv.len() as f64;
                if let Some(gp) = slot!(*p) {
                    for k in 0..gp.len() {
                        gp[k] += scale * focal_term(pv[k], gt[k], *gamma, *alpha).1;
                    }
                }
            }
        }
    }
}

fn grad_slot<'a>(
    nodes: &[Node],
    grads: &'a mut [Option<Vec<f64>>],
    v: Var,
) -> Option<&'a mut [f64]> {
    let node = &nodes[v.0];
    if !node.value.requires_grad {
        return None;
    }
    let len = node.value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]).as_mut_slice())
}

fn dice_terms(p: &[f64], gt: &[f64], smooth: f64) -> (f64, f64) {
    let mut inter = 0.0;
    let mut sp = 0.0;
    let mut sg = 0.0;
    for (&pi, &gi) in p.iter().zip(gt) {
        inter += pi * gi;
        sp += pi;
        sg += gi;
    }
    (2.0 * inter + smooth, sp + sg + smooth)
}

/// Focal term for one pixel and its derivative with respect to the probability.
fn focal_term(p: f64, gt: f64, gamma: f64, alpha: f64) -> (f64, f64) {
    let positive = gt >= 0.5;
    let (pt_raw, alpha_t, sign) = if positive {
        (p, alpha, 1.0)
    } else {
        (1.0 - p, 1.0 - alpha, -1.0)
    };
    let clamped = pt_raw < FOCAL_EPS;
    let pt = pt_raw.max(FOCAL_EPS);
    let q = 1.0 - pt;
    let value = -alpha_t * q.powf(gamma) * pt.ln();
    if clamped {
        return (value, 0.0);
    }
    let dq = if gamma == 0.0 {
        0.0
    } else {
        gamma * q.powf(gamma - 1.0)
    };
    let dpt = alpha_t * (dq * pt.ln() - q.powf(gamma) / pt);
    (value, sign * dpt)
}
