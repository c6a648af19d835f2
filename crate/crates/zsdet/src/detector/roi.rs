//! RoIAlign: bilinear sampling of a feature map into a fixed P x P grid,
//! with 2x2 regularly spaced sample points per bin. Differentiable with
//! respect to the feature map.

use ndarray::{Array3, Array4};

use crate::geometry::Box2D;

/// One bilinear sample: four neighbor indices plus weights.
#[derive(Debug, Clone, Copy)]
struct Tap {
    y0: usize,
    x0: usize,
    y1: usize,
    x1: usize,
    wy: f64,
    wx: f64,
}

pub struct RoiAlignCtx {
    taps: Vec<Tap>, // n * P * P * 4 entries
    p: usize,
    n: usize,
    fmap_dim: (usize, usize, usize),
}

fn make_tap(fy: f64, fx: f64, h: usize, w: usize) -> Tap {
    let fy = fy.clamp(0.0, (h - 1) as f64);
    let fx = fx.clamp(0.0, (w - 1) as f64);
    let y0 = fy.floor() as usize;
    let x0 = fx.floor() as usize;
    Tap {
        y0,
        x0,
        y1: (y0 + 1).min(h - 1),
        x1: (x0 + 1).min(w - 1),
        wy: fy - y0 as f64,
        wx: fx - x0 as f64,
    }
}

/// Pools each box (given in image coordinates, scaled by `spatial_scale`
/// onto the feature map) into `[N, C, P, P]`.
pub fn roi_align(
    fmap: &Array3<f64>,
    boxes: &[Box2D],
    spatial_scale: f64,
    p: usize,
) -> (Array4<f64>, RoiAlignCtx) {
    let (c, h, w) = fmap.dim();
    let n = boxes.len();
    let mut out = Array4::<f64>::zeros((n, c, p, p));
    let mut taps = Vec::with_capacity(n * p * p * 4);
    for (bi, b) in boxes.iter().enumerate() {
        let x1 = b.x1 * spatial_scale;
        let y1 = b.y1 * spatial_scale;
        let bw = (b.width() * spatial_scale).max(1e-6);
        let bh = (b.height() * spatial_scale).max(1e-6);
        let cell_w = bw / p as f64;
        let cell_h = bh / p as f64;
        for py in 0..p {
            for px in 0..p {
                // 2x2 sample points at the quarter positions of the bin
                for sy in 0..2 {
                    for sx in 0..2 {
                        let fy = y1 + (py as f64 + (sy as f64 + 0.5) / 2.0) * cell_h - 0.5;
                        let fx = x1 + (px as f64 + (sx as f64 + 0.5) / 2.0) * cell_w - 0.5;
                        let t = make_tap(fy, fx, h, w);
                        taps.push(t);
                        for ci in 0..c {
                            let v00 = fmap[[ci, t.y0, t.x0]];
                            let v01 = fmap[[ci, t.y0, t.x1]];
                            let v10 = fmap[[ci, t.y1, t.x0]];
                            let v11 = fmap[[ci, t.y1, t.x1]];
                            let top = v00 * (1.0 - t.wx) + v01 * t.wx;
                            let bot = v10 * (1.0 - t.wx) + v11 * t.wx;
                            out[[bi, ci, py, px]] += (top * (1.0 - t.wy) + bot * t.wy) / 4.0;
                        }
                    }
                }
            }
        }
    }
    (
        out,
        RoiAlignCtx {
            taps,
            p,
            n,
            fmap_dim: (c, h, w),
        },
    )
}

/// Scatters pooled-grid gradients back onto the feature map.
pub fn roi_align_backward(ctx: &RoiAlignCtx, grad_out: &Array4<f64>) -> Array3<f64> {
    let (c, h, w) = ctx.fmap_dim;
    let p = ctx.p;
    let mut grad = Array3::<f64>::zeros((c, h, w));
    let mut k = 0;
    for bi in 0..ctx.n {
        for py in 0..p {
            for px in 0..p {
                for _s in 0..4 {
                    let t = ctx.taps[k];
                    k += 1;
                    for ci in 0..c {
                        let g = grad_out[[bi, ci, py, px]] / 4.0;
                        grad[[ci, t.y0, t.x0]] += g * (1.0 - t.wy) * (1.0 - t.wx);
                        grad[[ci, t.y0, t.x1]] += g * (1.0 - t.wy) * t.wx;
                        grad[[ci, t.y1, t.x0]] += g * t.wy * (1.0 - t.wx);
                        grad[[ci, t.y1, t.x1]] += g * t.wy * t.wx;
                    }
                }
            }
        }
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;

    #[test]
    fn output_shape_constant() {
        let fmap = Array3::<f64>::from_shape_fn((4, 12, 12), |(c, y, x)| (c + y + x) as f64);
        let boxes = vec![
            Box2D::new(0.0, 0.0, 40.0, 40.0).unwrap(),
            Box2D::new(10.0, 20.0, 90.0, 50.0).unwrap(),
        ];
        let (out, _) = roi_align(&fmap, &boxes, 1.0 / 8.0, 5);
        assert_eq!(out.dim(), (2, 4, 5, 5));
    }

    #[test]
    fn constant_map_pools_to_constant() {
        let fmap = Array3::<f64>::from_elem((2, 10, 10), 3.5);
        let boxes = vec![Box2D::new(8.0, 8.0, 60.0, 60.0).unwrap()];
        let (out, _) = roi_align(&fmap, &boxes, 1.0 / 8.0, 3);
        for v in out.iter() {
            assert!((v - 3.5).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let fmap = Array3::<f64>::from_shape_fn((2, 8, 8), |_| rng.gen_range(-1.0..1.0));
        let boxes = vec![Box2D::new(5.0, 3.0, 50.0, 40.0).unwrap()];
        let wsum = Array4::<f64>::from_shape_fn((1, 2, 3, 3), |_| rng.gen_range(-1.0..1.0));
        let (out, ctx) = roi_align(&fmap, &boxes, 1.0 / 8.0, 3);
        let loss0 = (&out * &wsum).sum();
        let grad = roi_align_backward(&ctx, &wsum);

        let h = 1e-6;
        for idx in [[0usize, 2, 3], [1, 4, 4], [0, 0, 0]] {
            let mut fp = fmap.clone();
            fp[idx] += h;
            let (op, _) = roi_align(&fp, &boxes, 1.0 / 8.0, 3);
            let fd = ((&op * &wsum).sum() - loss0) / h;
            assert!((fd - grad[idx]).abs() < 1e-5, "mismatch at {idx:?}");
        }
    }
}
