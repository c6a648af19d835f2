//! Toy convolutional backbone: a short stack of 3x3 conv + ReLU blocks
//! whose stride product gives the feature stride. Deterministic forward,
//! explicit backward.

use ndarray::{Array3, Array4};
use rand_chacha::ChaCha8Rng;

use crate::nn::{relu4, Conv2d, Conv2dCtx, Param, ParamSet};

pub struct ToyBackbone {
    pub convs: Vec<Conv2d>,
}

pub struct BackboneCtx {
    layers: Vec<(Conv2dCtx, Array4<f64>)>, // conv ctx + relu mask
}

impl ToyBackbone {
    pub fn new(rng: &mut ChaCha8Rng, channels: &[usize], strides: &[usize]) -> Self {
        assert_eq!(channels.len(), strides.len());
        let mut convs = Vec::new();
        let mut in_ch = 3;
        for (&c, &s) in channels.iter().zip(strides) {
            convs.push(Conv2d::new(rng, in_ch, c, 3, s, 1));
            in_ch = c;
        }
        Self { convs }
    }

    pub fn out_channels(&self) -> usize {
        self.convs.last().unwrap().out_ch
    }

    /// `[1, 3, H, W]` image -> `[C_f, H_f, W_f]` feature map.
    pub fn forward(&self, x: &Array4<f64>) -> (Array3<f64>, BackboneCtx) {
        let mut layers = Vec::with_capacity(self.convs.len());
        let mut cur = x.clone();
        for conv in &self.convs {
            let (mut y, ctx) = conv.forward(&cur);
            let mask = relu4(&mut y);
            layers.push((ctx, mask));
            cur = y;
        }
        let (_, c, h, w) = cur.dim();
        let fmap = cur.into_shape_with_order((c, h, w)).unwrap();
        (fmap, BackboneCtx { layers })
    }

    /// Accumulates parameter gradients from the feature-map gradient.
    pub fn backward(&mut self, ctx: &BackboneCtx, grad_fmap: &Array3<f64>) {
        let (c, h, w) = grad_fmap.dim();
        let mut grad = grad_fmap.clone().into_shape_with_order((1, c, h, w)).unwrap();
        for (conv, (cctx, mask)) in self.convs.iter_mut().zip(ctx.layers.iter()).rev() {
            grad = &grad * mask;
            grad = conv.backward(cctx, &grad);
        }
    }
}

impl ParamSet for ToyBackbone {
    fn visit(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        for (i, c) in self.convs.iter_mut().enumerate() {
            f(&format!("backbone.conv{i}.w"), &mut c.w);
            f(&format!("backbone.conv{i}.b"), &mut c.b);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;

    #[test]
    fn spatial_dims_follow_stride_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bb = ToyBackbone::new(&mut rng, &[8, 16, 16], &[2, 2, 2]);
        let x = Array4::<f64>::zeros((1, 3, 96, 96));
        let (fmap, _) = bb.forward(&x);
        assert_eq!(fmap.dim(), (16, 12, 12));
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let bb = ToyBackbone::new(&mut rng, &[4, 8], &[2, 2]);
        let x = Array4::<f64>::from_shape_fn((1, 3, 32, 32), |(_, c, y, xx)| {
            ((c + y + xx) % 7) as f64 / 7.0
        });
        let (a, _) = bb.forward(&x);
        let (b, _) = bb.forward(&x);
        assert_eq!(a, b);
    }
}
