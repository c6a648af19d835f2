//! Minimal dense-layer toolkit used by the toy detector: conv and linear
//! layers with explicit forward/backward passes, ReLU, and an SGD optimizer
//! with momentum and weight decay.
//!
//! Convolutions run through im2col plus a matrix product so the f64 training
//! loop stays fast enough for desk-scale experiments. Everything is
//! deterministic: initialization draws from a caller-provided seeded RNG and
//! no parallelism touches parameter updates.

use std::collections::BTreeMap;

use ndarray::{Array2, Array4, ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// A named tensor with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Param {
    pub v: ArrayD<f64>,
    pub g: ArrayD<f64>,
}

impl Param {
    pub fn new(v: ArrayD<f64>) -> Self {
        let g = ArrayD::zeros(v.raw_dim());
        Self { v, g }
    }

    pub fn zero_grad(&mut self) {
        self.g.fill(0.0);
    }
}

/// Kaiming-style normal init for a fan-in of `fan_in`.
pub fn kaiming(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> ArrayD<f64> {
    let std = (2.0 / fan_in as f64).sqrt();
    ArrayD::from_shape_fn(IxDyn(shape), |_| {
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos() * std
    })
}

fn conv_out(side: usize, k: usize, stride: usize, pad: usize) -> usize {
    (side + 2 * pad - k) / stride + 1
}

/// Unfolds `[N, C, H, W]` into `[C*k*k, N*Ho*Wo]` patches.
fn im2col(
    x: &Array4<f64>,
    k: usize,
    stride: usize,
    pad: usize,
) -> (Array2<f64>, usize, usize) {
    let (n, c, h, w) = x.dim();
    let ho = conv_out(h, k, stride, pad);
    let wo = conv_out(w, k, stride, pad);
    let mut cols = Array2::<f64>::zeros((c * k * k, n * ho * wo));
    for ni in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                let col = ni * ho * wo + oy * wo + ox;
                for ci in 0..c {
                    for ky in 0..k {
                        let y = (oy * stride + ky) as isize - pad as isize;
                        if y < 0 || y >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let xc = (ox * stride + kx) as isize - pad as isize;
                            if xc < 0 || xc >= w as isize {
                                continue;
                            }
                            cols[[ci * k * k + ky * k + kx, col]] =
                                x[[ni, ci, y as usize, xc as usize]];
                        }
                    }
                }
            }
        }
    }
    (cols, ho, wo)
}

/// Adjoint of [`im2col`]: folds patch gradients back into the input layout.
fn col2im(
    cols: &Array2<f64>,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Array4<f64> {
    let ho = conv_out(h, k, stride, pad);
    let wo = conv_out(w, k, stride, pad);
    let mut x = Array4::<f64>::zeros((n, c, h, w));
    for ni in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                let col = ni * ho * wo + oy * wo + ox;
                for ci in 0..c {
                    for ky in 0..k {
                        let y = (oy * stride + ky) as isize - pad as isize;
                        if y < 0 || y >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let xc = (ox * stride + kx) as isize - pad as isize;
                            if xc < 0 || xc >= w as isize {
                                continue;
                            }
                            x[[ni, ci, y as usize, xc as usize]] +=
                                cols[[ci * k * k + ky * k + kx, col]];
                        }
                    }
                }
            }
        }
    }
    x
}

/// 2D convolution with square kernel, bias, stride and zero padding.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: Param, // [out, in*k*k]
    pub b: Param, // [out]
    pub in_ch: usize,
    pub out_ch: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

/// Forward cache for the backward pass.
pub struct Conv2dCtx {
    cols: Array2<f64>,
    in_dim: (usize, usize, usize, usize),
    ho: usize,
    wo: usize,
}

impl Conv2d {
    pub fn new(
        rng: &mut ChaCha8Rng,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let fan_in = in_ch * k * k;
        Self {
            w: Param::new(kaiming(rng, &[out_ch, fan_in], fan_in)),
            b: Param::new(ArrayD::zeros(IxDyn(&[out_ch]))),
            in_ch,
            out_ch,
            k,
            stride,
            pad,
        }
    }

    pub fn forward(&self, x: &Array4<f64>) -> (Array4<f64>, Conv2dCtx) {
        let (n, c, h, w) = x.dim();
        debug_assert_eq!(c, self.in_ch);
        let (cols, ho, wo) = im2col(x, self.k, self.stride, self.pad);
        let w2 = self.w.v.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let out2 = w2.dot(&cols); // [out, n*ho*wo]
        let mut out = Array4::<f64>::zeros((n, self.out_ch, ho, wo));
        for ni in 0..n {
            for oc in 0..self.out_ch {
                let bias = self.b.v[[oc]];
                for oy in 0..ho {
                    for ox in 0..wo {
                        out[[ni, oc, oy, ox]] = out2[[oc, ni * ho * wo + oy * wo + ox]] + bias;
                    }
                }
            }
        }
        (
            out,
            Conv2dCtx {
                cols,
                in_dim: (n, c, h, w),
                ho,
                wo,
            },
        )
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, ctx: &Conv2dCtx, grad_out: &Array4<f64>) -> Array4<f64> {
        let (n, c, h, w) = ctx.in_dim;
        let (ho, wo) = (ctx.ho, ctx.wo);
        let mut go2 = Array2::<f64>::zeros((self.out_ch, n * ho * wo));
        for ni in 0..n {
            for oc in 0..self.out_ch {
                for oy in 0..ho {
                    for ox in 0..wo {
                        go2[[oc, ni * ho * wo + oy * wo + ox]] = grad_out[[ni, oc, oy, ox]];
                    }
                }
            }
        }
        let gw = go2.dot(&ctx.cols.t());
        self.w.g += &gw.into_dyn();
        let gb = go2.sum_axis(ndarray::Axis(1));
        self.b.g += &gb.into_dyn();
        let w2 = self.w.v.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let gcols = w2.t().dot(&go2);
        col2im(&gcols, n, c, h, w, self.k, self.stride, self.pad)
    }
}

/// Fully connected layer on `[N, In]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Param, // [out, in]
    pub b: Param, // [out]
}

pub struct LinearCtx {
    x: Array2<f64>,
}

impl Linear {
    pub fn new(rng: &mut ChaCha8Rng, in_dim: usize, out_dim: usize) -> Self {
        Self {
            w: Param::new(kaiming(rng, &[out_dim, in_dim], in_dim)),
            b: Param::new(ArrayD::zeros(IxDyn(&[out_dim]))),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, LinearCtx) {
        let w = self.w.v.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let b = self.b.v.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let out = x.dot(&w.t()) + &b;
        (out, LinearCtx { x: x.clone() })
    }

    pub fn backward(&mut self, ctx: &LinearCtx, grad_out: &Array2<f64>) -> Array2<f64> {
        let gw = grad_out.t().dot(&ctx.x);
        self.w.g += &gw.into_dyn();
        let gb = grad_out.sum_axis(ndarray::Axis(0));
        self.b.g += &gb.into_dyn();
        let w = self.w.v.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        grad_out.dot(&w)
    }
}

/// In-place ReLU returning the activation mask for the backward pass.
pub fn relu4(x: &mut Array4<f64>) -> Array4<f64> {
    let mut mask = Array4::<f64>::zeros(x.dim());
    for (v, m) in x.iter_mut().zip(mask.iter_mut()) {
        if *v > 0.0 {
            *m = 1.0;
        } else {
            *v = 0.0;
        }
    }
    mask
}

pub fn relu2(x: &mut Array2<f64>) -> Array2<f64> {
    let mut mask = Array2::<f64>::zeros(x.dim());
    for (v, m) in x.iter_mut().zip(mask.iter_mut()) {
        if *v > 0.0 {
            *m = 1.0;
        } else {
            *v = 0.0;
        }
    }
    mask
}

/// Visitor over the named parameters of a model.
pub trait ParamSet {
    fn visit(&mut self, f: &mut dyn FnMut(&str, &mut Param));

    fn zero_grads(&mut self) {
        self.visit(&mut |_, p| p.zero_grad());
    }

    /// Named parameter snapshot, in visit order.
    fn snapshot(&mut self) -> Vec<(String, ArrayD<f64>)> {
        let mut out = Vec::new();
        self.visit(&mut |name, p| out.push((name.to_string(), p.v.clone())));
        out
    }

    fn load_snapshot(&mut self, snap: &BTreeMap<String, ArrayD<f64>>) -> Result<(), String> {
        let mut err = None;
        self.visit(&mut |name, p| {
            match snap.get(name) {
                Some(v) if v.shape() == p.v.shape() => p.v.assign(v),
                Some(v) => {
                    err.get_or_insert(format!(
                        "shape mismatch for `{name}`: {:?} vs {:?}",
                        v.shape(),
                        p.v.shape()
                    ));
                }
                None => {
                    err.get_or_insert(format!("missing parameter `{name}`"));
                }
            };
        });
        match err {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm; `max_norm <= 0` disables clipping.
pub fn clip_grad_norm(model: &mut dyn ParamSet, max_norm: f64) -> f64 {
    let mut sq = 0.0;
    model.visit(&mut |_, p| {
        sq += p.g.iter().map(|g| g * g).sum::<f64>();
    });
    let norm = sq.sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let scale = max_norm / norm;
        model.visit(&mut |_, p| {
            p.g.mapv_inplace(|g| g * scale);
        });
    }
    norm
}

/// SGD with momentum and decoupled-from-schedule weight decay.
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: BTreeMap<String, ArrayD<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, model: &mut dyn ParamSet, lr: f64) {
        let momentum = self.momentum;
        let wd = self.weight_decay;
        let velocity = &mut self.velocity;
        model.visit(&mut |name, p| {
            let v = velocity
                .entry(name.to_string())
                .or_insert_with(|| ArrayD::zeros(p.v.raw_dim()));
            for ((vi, gi), pi) in v.iter_mut().zip(p.g.iter()).zip(p.v.iter()) {
                *vi = momentum * *vi + *gi + wd * *pi;
            }
            p.v.scaled_add(-lr, v);
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(1234)
    }

    #[test]
    fn conv_output_shape() {
        let mut r = rng();
        let conv = Conv2d::new(&mut r, 3, 8, 3, 2, 1);
        let x = Array4::<f64>::from_shape_fn((2, 3, 9, 9), |_| 0.5);
        let (y, _) = conv.forward(&x);
        assert_eq!(y.dim(), (2, 8, 5, 5));
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut r = rng();
        let mut conv = Conv2d::new(&mut r, 2, 3, 3, 1, 1);
        let x = Array4::<f64>::from_shape_fn((1, 2, 5, 5), |_| r.gen_range(-1.0..1.0));
        // scalar objective: weighted sum of outputs
        let wsum = Array4::<f64>::from_shape_fn((1, 3, 5, 5), |_| r.gen_range(-1.0..1.0));

        let (y, ctx) = conv.forward(&x);
        let loss0: f64 = (&y * &wsum).sum();
        let gin = conv.backward(&ctx, &wsum);

        let h = 1e-6;
        // input gradient
        for idx in [[0, 0, 0, 0], [0, 1, 2, 3], [0, 0, 4, 4]] {
            let mut xp = x.clone();
            xp[idx] += h;
            let (yp, _) = conv.forward(&xp);
            let fd = ((&yp * &wsum).sum() - loss0) / h;
            assert!((fd - gin[idx]).abs() < 1e-4, "input grad mismatch at {idx:?}");
        }
        // weight gradient
        for widx in [[0usize, 0usize], [2, 17]] {
            let mut c2 = conv.clone();
            c2.w.v[IxDyn(&widx)] += h;
            let (yp, _) = c2.forward(&x);
            let fd = ((&yp * &wsum).sum() - loss0) / h;
            assert!(
                (fd - conv.w.g[IxDyn(&widx)]).abs() < 1e-4,
                "weight grad mismatch at {widx:?}"
            );
        }
    }

    #[test]
    fn linear_gradients_match_finite_differences() {
        let mut r = rng();
        let mut lin = Linear::new(&mut r, 4, 3);
        let x = Array2::<f64>::from_shape_fn((2, 4), |_| r.gen_range(-1.0..1.0));
        let wsum = Array2::<f64>::from_shape_fn((2, 3), |_| r.gen_range(-1.0..1.0));
        let (y, ctx) = lin.forward(&x);
        let loss0 = (&y * &wsum).sum();
        let gin = lin.backward(&ctx, &wsum);
        let h = 1e-6;
        let mut xp = x.clone();
        xp[[1, 2]] += h;
        let (yp, _) = lin.forward(&xp);
        let fd = ((&yp * &wsum).sum() - loss0) / h;
        assert!((fd - gin[[1, 2]]).abs() < 1e-6);
    }

    #[test]
    fn sgd_moves_parameters() {
        struct One(Param);
        impl ParamSet for One {
            fn visit(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
                f("p", &mut self.0);
            }
        }
        let mut m = One(Param::new(ArrayD::zeros(IxDyn(&[2]))));
        m.0.g.fill(1.0);
        let mut opt = Sgd::new(0.9, 0.0);
        opt.step(&mut m, 0.1);
        assert!((m.0.v[[0]] + 0.1).abs() < 1e-12);
    }
}
