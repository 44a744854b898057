//! Finite-difference oracle shared by the integration tests and the acceptance suite.
#![allow(dead_code)]

use forma_core::{Graph, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Reduces a non-scalar output to a scalar with fixed pseudo-random weights, so every
/// output element contributes a distinct sensitivity.
pub fn project(g: &mut Graph, v: Var, seed: u64) -> Result<Var> {
    let mut r = rng(seed);
    let shape = g.shape(v).to_vec();
    let w = g.constant(random(&shape, -1.0, 1.0, &mut r));
    let m = g.mul(v, w)?;
    Ok(g.sum(m))
}

/// Result of one comparison between analytic and numeric gradients.
#[derive(Debug, Clone, Copy)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub checked: usize,
}

/// Compares the graph's reverse-mode gradients against central differences with step
/// `FD_STEP`.
///
/// `build` maps input leaves to a scalar loss. `per_input` caps how many coordinates of
/// each input are perturbed (`None` checks all). The per-element error is
/// `|a − n| / max(|a|, |n|, 1e-4·max|n|, 1e-10)`, the floor keeping coordinates whose
/// true gradient is essentially zero from dominating through round-off.
pub fn check<F>(inputs: &[Tensor], build: F, per_input: Option<usize>, seed: u64) -> FdReport
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = build(&mut g, &vars).expect("forward");
    g.backward(loss).expect("backward");
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map_or(vec![0.0; t.len()], |s| s.to_vec()))
        .collect();

    let eval = |xs: &[Tensor]| -> f64 {
        let mut g = Graph::inference();
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let l = build(&mut g, &vars).expect("forward");
        g.value(l).data()[0]
    };

    let mut r = rng(seed ^ 0x9e37_79b9);
    let mut pairs = Vec::new();
    let mut work = inputs.to_vec();
    for (k, t) in inputs.iter().enumerate() {
        let idx: Vec<usize> = match per_input {
            Some(n) if n < t.len() => (0..n).map(|_| r.random_range(0..t.len())).collect(),
            _ => (0..t.len()).collect(),
        };
        for i in idx {
            let orig = t.data()[i];
            work[k].data_mut()[i] = orig + FD_STEP;
            let fp = eval(&work);
            work[k].data_mut()[i] = orig - FD_STEP;
            let fm = eval(&work);
            work[k].data_mut()[i] = orig;
            pairs.push((analytic[k][i], (fp - fm) / (2.0 * FD_STEP)));
        }
    }
    let scale = pairs.iter().fold(0.0f64, |m, &(_, n)| m.max(n.abs()));
    let max_rel_err = pairs.iter().fold(0.0f64, |m, &(a, n)| {
        let den = a.abs().max(n.abs()).max(1e-4 * scale).max(1e-10);
        m.max((a - n).abs() / den)
    });
    FdReport {
        max_rel_err,
        checked: pairs.len(),
    }
}

pub type Build = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

/// Names of the differentiable primitives exercised by [`primitive_case`].
pub const PRIMITIVES: &[&str] = &[
    "linear", "conv2d", "conv2d_strided", "dwconv", "layer_norm", "silu", "softplus",
    "sigmoid", "neg_exp", "scale", "add", "sub", "mul", "concat", "gather", "resize", "scan",
    "sum", "mean", "reshape", "dice", "focal",
];

/// A random instance of primitive `name`: inputs and a builder producing a scalar.
pub fn primitive_case(name: &str, seed: u64) -> (Vec<Tensor>, Build) {
    let mut r = rng(seed);
    let u = |shape: &[usize], r: &mut ChaCha8Rng| random(shape, -1.0, 1.0, r);
    let p = seed;
    match name {
        "linear" => {
            let (rows, cin, cout) = (r.random_range(1..4), r.random_range(1..5), r.random_range(1..5));
            (
                vec![u(&[rows, cin], &mut r), u(&[cin, cout], &mut r), u(&[cout], &mut r)],
                Box::new(move |g, v| {
                    let y = g.linear(v[0], v[1], Some(v[2]))?;
                    project(g, y, p)
                }),
            )
        }
        "conv2d" | "conv2d_strided" => {
            let strided = name == "conv2d_strided";
            let (c, k) = (r.random_range(1..3), r.random_range(1..3));
            let (h, w) = (r.random_range(3..6), r.random_range(3..6));
            let (kh, stride, pad) = if strided { (2, 2, 0) } else { (3, 1, 1) };
            let (h, w) = if strided { (h * 2, w * 2) } else { (h, w) };
            (
                vec![u(&[c, h, w], &mut r), u(&[k, c, kh, kh], &mut r), u(&[k], &mut r)],
                Box::new(move |g, v| {
                    let y = g.conv2d(v[0], v[1], Some(v[2]), stride, pad)?;
                    project(g, y, p)
                }),
            )
        }
        "dwconv" => {
            let (c, h, w) = (r.random_range(1..4), r.random_range(2..5), r.random_range(2..5));
            (
                vec![u(&[c, h, w], &mut r), u(&[c, 3, 3], &mut r), u(&[c], &mut r)],
                Box::new(move |g, v| {
                    let y = g.dwconv(v[0], v[1], Some(v[2]))?;
                    project(g, y, p)
                }),
            )
        }
        "layer_norm" => {
            let (rows, c) = (r.random_range(1..4), r.random_range(2..6));
            (
                vec![u(&[rows, c], &mut r), u(&[c], &mut r), u(&[c], &mut r)],
                Box::new(move |g, v| {
                    let y = g.layer_norm(v[0], v[1], v[2], 1e-6)?;
                    project(g, y, p)
                }),
            )
        }
        "silu" | "softplus" | "sigmoid" | "neg_exp" | "scale" => {
            let n = r.random_range(1..8);
            let which = name.to_string();
            (
                vec![random(&[n], -3.0, 3.0, &mut r)],
                Box::new(move |g, v| {
                    let y = match which.as_str() {
                        "silu" => g.silu(v[0]),
                        "softplus" => g.softplus(v[0]),
                        "sigmoid" => g.sigmoid(v[0]),
                        "neg_exp" => g.neg_exp(v[0]),
                        _ => g.scale(v[0], -1.7),
                    };
                    project(g, y, p)
                }),
            )
        }
        "add" | "sub" | "mul" => {
            let shape = [r.random_range(1..4), r.random_range(1..4)];
            let which = name.to_string();
            (
                vec![u(&shape, &mut r), u(&shape, &mut r)],
                Box::new(move |g, v| {
                    let y = match which.as_str() {
                        "add" => g.add(v[0], v[1])?,
                        "sub" => g.sub(v[0], v[1])?,
                        _ => g.mul(v[0], v[1])?,
                    };
                    project(g, y, p)
                }),
            )
        }
        "concat" => {
            let (h, a, b) = (r.random_range(1..4), r.random_range(1..4), r.random_range(1..4));
            (
                vec![u(&[h, a], &mut r), u(&[h, b], &mut r)],
                Box::new(move |g, v| {
                    let y = g.concat(&[v[0], v[1]], 1)?;
                    project(g, y, p)
                }),
            )
        }
        "gather" => {
            let n = r.random_range(2..6);
            // with repeats, so the backward must accumulate
            let index: Vec<usize> = (0..n + 2).map(|_| r.random_range(0..n)).collect();
            (
                vec![u(&[n, 2], &mut r)],
                Box::new(move |g, v| {
                    let len = index.len();
                    let y = g.gather(v[0], index.clone().into(), 2, &[len, 2])?;
                    project(g, y, p)
                }),
            )
        }
        "resize" => {
            let (c, h, w) = (r.random_range(1..3), r.random_range(1..5), r.random_range(1..5));
            let (ho, wo) = (r.random_range(1..8), r.random_range(1..8));
            (
                vec![u(&[c, h, w], &mut r)],
                Box::new(move |g, v| {
                    let y = g.resize(v[0], ho, wo)?;
                    project(g, y, p)
                }),
            )
        }
        "scan" => {
            let (l, d, n) = (r.random_range(1..7), r.random_range(1..4), r.random_range(1..4));
            (
                vec![
                    u(&[l, d], &mut r),
                    random(&[l, d], 0.05, 1.0, &mut r),
                    random(&[d, n], -2.0, -0.1, &mut r),
                    u(&[l, n], &mut r),
                    u(&[l, n], &mut r),
                    u(&[d], &mut r),
                ],
                Box::new(move |g, v| {
                    let y = g.scan(v[0], v[1], v[2], v[3], v[4], v[5])?;
                    project(g, y, p)
                }),
            )
        }
        "sum" | "mean" => {
            let which = name.to_string();
            (
                vec![u(&[r.random_range(1..5), 3], &mut r)],
                Box::new(move |g, v| {
                    let sq = g.mul(v[0], v[0])?;
                    Ok(if which == "sum" { g.sum(sq) } else { g.mean(sq) })
                }),
            )
        }
        "reshape" => (
            vec![u(&[2, 3], &mut r)],
            Box::new(move |g, v| {
                let y = g.reshape(v[0], &[3, 2])?;
                project(g, y, p)
            }),
        ),
        "dice" | "focal" => {
            let n = r.random_range(2..10);
            let gt: Vec<f64> = (0..n).map(|_| f64::from(r.random_bool(0.5))).collect();
            let gt: std::sync::Arc<[f64]> = gt.into();
            let dice = name == "dice";
            (
                vec![random(&[n], 0.05, 0.95, &mut r)],
                Box::new(move |g, v| {
                    if dice {
                        g.dice_loss(v[0], gt.clone(), 1.0)
                    } else {
                        g.focal_loss(v[0], gt.clone(), 2.0, 0.5)
                    }
                }),
            )
        }
        other => panic!("unknown primitive {other}"),
    }
}
