//! Functional (non-recorded) versions of the network primitives.
//!
//! Each one evaluates through the same kernels the graph uses, so a value computed
//! here is bit-identical to the one a recorded forward pass produces.

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::kernels::{self, ResizePlan};
use crate::tensor::Tensor;

/// Layer-norm epsilon used throughout the network.
pub const LN_EPS: f64 = 1e-6;

/// `y[..., j] = Σ_i x[..., i] W[i, j] + b[j]`.
pub fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let mut g = Graph::inference();
    let xv = g.constant(x.clone());
    let wv = g.constant(w.clone());
    let bv = b.map(|b| g.constant(b.clone()));
    let y = g.linear(xv, wv, bv)?;
    Ok(g.value(y).clone())
}

/// Zero-padded cross-correlation, `[C, H, W]` → `[K, H', W']`.
pub fn conv2d(
    x: &Tensor,
    kernels: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let mut g = Graph::inference();
    let xv = g.constant(x.clone());
    let wv = g.constant(kernels.clone());
    let bv = bias.map(|b| g.constant(b.clone()));
    let y = g.conv2d(xv, wv, bv, stride, padding)?;
    Ok(g.value(y).clone())
}

/// Per-channel "same" convolution, `[C, H, W]` with `[C, kh, kw]`.
pub fn dwconv(x: &Tensor, kernels: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let mut g = Graph::inference();
    let xv = g.constant(x.clone());
    let wv = g.constant(kernels.clone());
    let bv = bias.map(|b| g.constant(b.clone()));
    let y = g.dwconv(xv, wv, bv)?;
    Ok(g.value(y).clone())
}

pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let c = x.last_dim();
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::dim("layer_norm", x.shape(), gamma.shape()));
    }
    let (out, _) =
        kernels::layer_norm_forward(x.data(), gamma.data(), beta.data(), c, eps, false);
    Tensor::new(x.shape(), out)
}

pub fn silu(x: &Tensor) -> Tensor {
    x.map(kernels::silu)
}

pub fn softplus(x: &Tensor) -> Tensor {
    x.map(kernels::softplus)
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(kernels::sigmoid)
}

/// Bilinear resampling of `[C, H, W]` with half-pixel centers (align-corners = false).
///
/// Output pixel `o` along an axis of input length `n` and output length `m` samples
/// `s = (o + 0.5)·n/m − 0.5`, clamped to `[0, n − 1]`, and blends the two nearest input
/// pixels `⌊s⌋` and `⌊s⌋ + 1` with weights `1 − (s − ⌊s⌋)` and `s − ⌊s⌋`.
pub fn bilinear_resize(x: &Tensor, ho: usize, wo: usize) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 3 || ho == 0 || wo == 0 {
        return Err(Error::dim("bilinear_resize", s, &[ho, wo]));
    }
    let plan = ResizePlan::new(s[0], s[1], s[2], ho, wo);
    Tensor::new(&[s[0], ho, wo], plan.forward(x.data()))
}

/// Nearest-neighbor resampling of `[C, H, W]`, used to map predictions back to native size.
pub fn nearest_resize(x: &Tensor, ho: usize, wo: usize) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 3 || ho == 0 || wo == 0 {
        return Err(Error::dim("nearest_resize", s, &[ho, wo]));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let src = |o: usize, n: usize, m: usize| (((o as f64 + 0.5) * n as f64 / m as f64) as usize).min(n - 1);
    Ok(Tensor::from_fn(&[c, ho, wo], |i| {
        let (ch, rest) = (i / (ho * wo), i % (ho * wo));
        let (oi, oj) = (rest / wo, rest % wo);
        x.data()[(ch * h + src(oi, h, ho)) * w + src(oj, w, wo)]
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    fn identity(n: usize) -> Tensor {
        Tensor::from_fn(&[n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
    }

    #[test]
    fn linear_examples() {
        let x = t(&[3], &[1.0, 2.0, 3.0]);
        let y = linear(&x, &identity(3), Some(&Tensor::zeros(&[3]))).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0, 3.0]);

        let b = t(&[2], &[0.5, -1.5]);
        let w = t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let y = linear(&Tensor::zeros(&[3]), &w, Some(&b)).unwrap();
        assert_eq!(y.data(), b.data());

        let y = linear(
            &t(&[2], &[1.0, 2.0]),
            &t(&[2, 2], &[1.0, 0.0, 0.0, 2.0]),
            Some(&t(&[2], &[1.0, 1.0])),
        )
        .unwrap();
        assert_eq!(y.data(), &[2.0, 5.0]);
    }

    #[test]
    fn linear_reports_both_shapes() {
        let err = linear(&Tensor::zeros(&[4, 3]), &Tensor::zeros(&[2, 5]), None).unwrap_err();
        match err {
            Error::Dimension { lhs, rhs, .. } => {
                assert_eq!(lhs, vec![4, 3]);
                assert_eq!(rhs, vec![2, 5]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn conv2d_examples() {
        let x = Tensor::from_fn(&[2, 3, 3], |i| i as f64);
        let k = Tensor::from_fn(&[2, 2, 1, 1], |i| if i == 0 || i == 3 { 1.0 } else { 0.0 });
        assert_eq!(conv2d(&x, &k, None, 1, 0).unwrap(), x);

        let c = Tensor::full(&[1, 5, 5], 2.5);
        let ones = Tensor::full(&[1, 1, 3, 3], 1.0);
        let y = conv2d(&c, &ones, None, 1, 1).unwrap();
        assert_eq!(y.at(&[0, 2, 2]), 9.0 * 2.5);
        assert_eq!(y.at(&[0, 0, 0]), 4.0 * 2.5);

        let y = conv2d(
            &t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]),
            &t(&[1, 1, 2, 2], &[1.0, 0.0, 0.0, 1.0]),
            None,
            1,
            0,
        )
        .unwrap();
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert_eq!(y.data(), &[5.0]);
    }

    #[test]
    fn conv2d_kernel_too_large() {
        let r = conv2d(&Tensor::zeros(&[1, 2, 2]), &Tensor::zeros(&[1, 1, 5, 5]), None, 1, 1);
        assert!(matches!(r, Err(Error::Dimension { .. })));
    }

    #[test]
    fn dwconv_examples() {
        let x = Tensor::from_fn(&[3, 4, 4], |i| (i as f64).sin());
        let ones = Tensor::full(&[3, 1, 1], 1.0);
        assert_eq!(dwconv(&x, &ones, None).unwrap(), x);

        let mut k = Tensor::from_fn(&[3, 3, 3], |i| (i as f64 * 0.37).cos());
        for v in &mut k.data_mut()[..9] {
            *v = 0.0;
        }
        let bias = t(&[3], &[0.7, 0.0, 0.0]);
        let y = dwconv(&x, &k, Some(&bias)).unwrap();
        assert!(y.data()[..16].iter().all(|&v| v == 0.7));
    }

    #[test]
    fn dwconv_matches_block_diagonal_conv2d() {
        let x = Tensor::from_fn(&[3, 5, 4], |i| ((i * 7 % 11) as f64) - 5.0);
        let k = Tensor::from_fn(&[3, 3, 3], |i| ((i * 5 % 7) as f64) * 0.25 - 0.7);
        let b = t(&[3], &[0.1, -0.2, 0.3]);
        let mut full = Tensor::zeros(&[3, 3, 3, 3]);
        for c in 0..3 {
            for i in 0..3 {
                for j in 0..3 {
                    full.set(&[c, c, i, j], k.at(&[c, i, j]));
                }
            }
        }
        let a = dwconv(&x, &k, Some(&b)).unwrap();
        let r = conv2d(&x, &full, Some(&b), 1, 1).unwrap();
        assert!(a.max_abs_diff(&r) < 1e-12);
    }

    #[test]
    fn layer_norm_examples() {
        let g = Tensor::full(&[4], 1.0);
        let beta = t(&[4], &[0.1, 0.2, 0.3, 0.4]);
        let y = layer_norm(&Tensor::full(&[2, 4], 3.0), &g, &beta, LN_EPS).unwrap();
        assert!(y.data().chunks(4).all(|r| r == beta.data()));

        let y = layer_norm(
            &t(&[2], &[1.0, -1.0]),
            &Tensor::full(&[2], 1.0),
            &Tensor::zeros(&[2]),
            LN_EPS,
        )
        .unwrap();
        let s = 1.0 / (1.0 + LN_EPS).sqrt();
        assert!((y.data()[0] - s).abs() < 1e-15 && (y.data()[1] + s).abs() < 1e-15);
    }

    #[test]
    fn activations_at_zero() {
        let z = Tensor::zeros(&[1]);
        assert_eq!(silu(&z).data(), &[0.0]);
        assert!((softplus(&z).data()[0] - 0.693_147_180_559_945_3).abs() < 1e-15);
        assert_eq!(sigmoid(&z).data(), &[0.5]);
    }

    #[test]
    fn bilinear_examples() {
        let x = Tensor::from_fn(&[2, 3, 5], |i| i as f64 * 0.3);
        assert_eq!(bilinear_resize(&x, 3, 5).unwrap(), x);
        let c = Tensor::full(&[1, 4, 4], 0.25);
        assert!(bilinear_resize(&c, 7, 9)
            .unwrap()
            .data()
            .iter()
            .all(|&v| (v - 0.25).abs() < 1e-15));
        let y = bilinear_resize(&t(&[1, 1, 2], &[0.0, 1.0]), 1, 4).unwrap();
        assert_eq!(y.data(), &[0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn nearest_round_trip_on_integer_factors() {
        let x = Tensor::from_fn(&[1, 2, 3], |i| i as f64);
        let up = nearest_resize(&x, 4, 6).unwrap();
        assert_eq!(up.at(&[0, 3, 5]), 5.0);
        assert_eq!(nearest_resize(&up, 2, 3).unwrap(), x);
    }
}
