//! Minimal single-scale region proposal network: a shared 3x3 conv, 1x1
//! objectness and delta heads over per-cell anchors, standard IoU-based
//! anchor assignment, and decoded + NMS'd proposals.

use ndarray::{Array3, Array4};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{iou, nms, Box2D};
use crate::nn::{relu4, Conv2d, Conv2dCtx, Param, ParamSet};

use super::boxcodec::{decode_deltas, encode_deltas};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RpnConfig {
    /// Anchor side lengths in image pixels at each feature cell.
    pub sizes: Vec<f64>,
    /// Aspect values h/w.
    pub ratios: Vec<f64>,
    pub fg_iou: f64,
    pub bg_iou: f64,
    /// Anchors sampled per image for the objectness/delta losses.
    pub batch: usize,
    pub nms_iou: f64,
    pub pre_nms_top: usize,
    pub post_nms_top: usize,
}

impl Default for RpnConfig {
    fn default() -> Self {
        Self {
            sizes: vec![64.0, 128.0, 256.0],
            ratios: vec![1.0, 2.0, 0.5],
            fg_iou: 0.5,
            bg_iou: 0.3,
            batch: 256,
            nms_iou: 0.7,
            pre_nms_top: 2000,
            post_nms_top: 1000,
        }
    }
}

impl RpnConfig {
    pub fn toy() -> Self {
        Self {
            sizes: vec![24.0, 36.0, 52.0],
            ratios: vec![1.0],
            batch: 64,
            pre_nms_top: 300,
            post_nms_top: 40,
            ..Default::default()
        }
    }

    pub fn anchors_per_cell(&self) -> usize {
        self.sizes.len() * self.ratios.len()
    }
}

pub struct RpnHead {
    pub conv: Conv2d,
    pub obj: Conv2d,
    pub delta: Conv2d,
    pub cfg: RpnConfig,
}

pub struct RpnCtx {
    conv_ctx: Conv2dCtx,
    mask: Array4<f64>,
    obj_ctx: Conv2dCtx,
    delta_ctx: Conv2dCtx,
    hidden: Array4<f64>,
}

pub struct RpnOutput {
    /// `[1, A, Hf, Wf]` objectness logits.
    pub obj: Array4<f64>,
    /// `[1, 4A, Hf, Wf]` box deltas.
    pub deltas: Array4<f64>,
}

impl RpnHead {
    pub fn new(rng: &mut ChaCha8Rng, in_ch: usize, cfg: RpnConfig) -> Self {
        let a = cfg.anchors_per_cell();
        Self {
            conv: Conv2d::new(rng, in_ch, in_ch, 3, 1, 1),
            obj: Conv2d::new(rng, in_ch, a, 1, 1, 0),
            delta: Conv2d::new(rng, in_ch, 4 * a, 1, 1, 0),
            cfg,
        }
    }

    pub fn forward(&self, fmap: &Array3<f64>) -> (RpnOutput, RpnCtx) {
        let (c, h, w) = fmap.dim();
        let x = fmap.clone().into_shape_with_order((1, c, h, w)).unwrap();
        let (mut hidden, conv_ctx) = self.conv.forward(&x);
        let mask = relu4(&mut hidden);
        let (obj, obj_ctx) = self.obj.forward(&hidden);
        let (deltas, delta_ctx) = self.delta.forward(&hidden);
        (
            RpnOutput { obj, deltas },
            RpnCtx {
                conv_ctx,
                mask,
                obj_ctx,
                delta_ctx,
                hidden,
            },
        )
    }

    /// Accumulates parameter gradients; returns the feature-map gradient.
    pub fn backward(
        &mut self,
        ctx: &RpnCtx,
        grad_obj: &Array4<f64>,
        grad_deltas: &Array4<f64>,
    ) -> Array3<f64> {
        let g1 = self.obj.backward(&ctx.obj_ctx, grad_obj);
        let g2 = self.delta.backward(&ctx.delta_ctx, grad_deltas);
        let mut g = &g1 + &g2;
        // keep the hidden activation cache alive for shape sanity
        debug_assert_eq!(g.dim(), ctx.hidden.dim());
        g = &g * &ctx.mask;
        let gin = self.conv.backward(&ctx.conv_ctx, &g);
        let (_, c, h, w) = gin.dim();
        gin.into_shape_with_order((c, h, w)).unwrap()
    }

    /// Anchor boxes in image coordinates, ordered `(y, x, a)` to match the
    /// head output layout. Not clipped, so delta targets stay well defined.
    pub fn anchors(&self, hf: usize, wf: usize, stride: f64) -> Vec<Box2D> {
        let mut out = Vec::with_capacity(hf * wf * self.cfg.anchors_per_cell());
        for y in 0..hf {
            for x in 0..wf {
                let cx = (x as f64 + 0.5) * stride;
                let cy = (y as f64 + 0.5) * stride;
                for &s in &self.cfg.sizes {
                    for &r in &self.cfg.ratios {
                        let w = s / r.sqrt();
                        let h = s * r.sqrt();
                        out.push(Box2D {
                            x1: cx - w / 2.0,
                            y1: cy - h / 2.0,
                            x2: cx + w / 2.0,
                            y2: cy + h / 2.0,
                        });
                    }
                }
            }
        }
        out
    }

    /// Decodes, clips and NMS-filters the head output into scored proposals.
    pub fn proposals(
        &self,
        out: &RpnOutput,
        stride: f64,
        image_w: f64,
        image_h: f64,
    ) -> Vec<(Box2D, f64)> {
        let (_, a, hf, wf) = out.obj.dim();
        let anchors = self.anchors(hf, wf, stride);
        let mut boxes = Vec::new();
        let mut scores = Vec::new();
        for y in 0..hf {
            for x in 0..wf {
                for ai in 0..a {
                    let idx = (y * wf + x) * a + ai;
                    let d = [
                        out.deltas[[0, 4 * ai, y, x]],
                        out.deltas[[0, 4 * ai + 1, y, x]],
                        out.deltas[[0, 4 * ai + 2, y, x]].clamp(-4.0, 4.0),
                        out.deltas[[0, 4 * ai + 3, y, x]].clamp(-4.0, 4.0),
                    ];
                    let b = decode_deltas(&anchors[idx], &d);
                    let clipped = Box2D {
                        x1: b.x1.clamp(0.0, image_w),
                        y1: b.y1.clamp(0.0, image_h),
                        x2: b.x2.clamp(0.0, image_w),
                        y2: b.y2.clamp(0.0, image_h),
                    };
                    if clipped.is_valid() && clipped.area() >= 4.0 {
                        boxes.push(clipped);
                        let z = out.obj[[0, ai, y, x]];
                        scores.push(1.0 / (1.0 + (-z).exp()));
                    }
                }
            }
        }
        let mut order: Vec<usize> = (0..boxes.len()).collect();
        order.sort_by(|&i, &j| scores[j].partial_cmp(&scores[i]).unwrap());
        order.truncate(self.cfg.pre_nms_top);
        let top_boxes: Vec<Box2D> = order.iter().map(|&i| boxes[i]).collect();
        let top_scores: Vec<f64> = order.iter().map(|&i| scores[i]).collect();
        let kept = nms(&top_boxes, &top_scores, self.cfg.nms_iou).unwrap();
        kept.into_iter()
            .take(self.cfg.post_nms_top)
            .map(|i| (top_boxes[i], top_scores[i]))
            .collect()
    }
}

impl ParamSet for RpnHead {
    fn visit(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        f("rpn.conv.w", &mut self.conv.w);
        f("rpn.conv.b", &mut self.conv.b);
        f("rpn.obj.w", &mut self.obj.w);
        f("rpn.obj.b", &mut self.obj.b);
        f("rpn.delta.w", &mut self.delta.w);
        f("rpn.delta.b", &mut self.delta.b);
    }
}

/// Per-anchor assignment: 1 foreground, 0 background, -1 ignore, plus the
/// delta target toward the best-overlapping GT for foreground anchors.
pub struct RpnTargets {
    pub labels: Vec<i8>,
    pub deltas: Vec<[f64; 4]>,
}

/// Labels each anchor 1 (foreground), 0 (background), -1 (excluded from the
/// objectness loss) or 2 (objectness-positive without a box target). Anchors
/// over an `object_like` box, a region the image encoder rates as confidently
/// object-like, are never pushed toward background: they likely hold
/// unannotated objects, so high overlaps become objectness positives and
/// partial overlaps are excluded. Box deltas stay unsupervised there because
/// the encoder-scored boxes are too loose to regress against.
pub fn rpn_targets(
    anchors: &[Box2D],
    gts: &[Box2D],
    object_like: &[Box2D],
    cfg: &RpnConfig,
) -> RpnTargets {
    let n = anchors.len();
    let extra: Vec<i8> = anchors
        .iter()
        .map(|a| {
            let best = object_like.iter().map(|g| iou(a, g)).fold(0.0f64, f64::max);
            if best >= cfg.fg_iou {
                2
            } else if best >= cfg.bg_iou {
                -1
            } else {
                0
            }
        })
        .collect();
    let mut labels = extra.clone();
    let mut deltas = vec![[0.0; 4]; n];
    if gts.is_empty() {
        return RpnTargets { labels, deltas };
    }
    let mut best_gt = vec![0usize; n];
    let mut best_iou = vec![0.0f64; n];
    for (i, a) in anchors.iter().enumerate() {
        for (j, g) in gts.iter().enumerate() {
            let v = iou(a, g);
            if v > best_iou[i] {
                best_iou[i] = v;
                best_gt[i] = j;
            }
        }
        labels[i] = if best_iou[i] >= cfg.fg_iou {
            1
        } else if best_iou[i] >= cfg.bg_iou {
            -1
        } else {
            extra[i]
        };
    }
    // force-match the best anchor for every GT
    for (j, g) in gts.iter().enumerate() {
        let mut best = 0;
        let mut best_v = -1.0;
        for (i, a) in anchors.iter().enumerate() {
            let v = iou(a, g);
            if v > best_v {
                best_v = v;
                best = i;
            }
        }
        labels[best] = 1;
        best_gt[best] = j;
        best_iou[best] = best_v;
    }
    for i in 0..n {
        if labels[i] == 1 {
            deltas[i] = encode_deltas(&anchors[i], &gts[best_gt[i]]);
        }
    }
    RpnTargets { labels, deltas }
}

/// Samples up to `batch` anchors at roughly 1:1 fg:bg and computes the
/// binary cross-entropy (with logits) and L1 delta losses plus their
/// gradients in head-output layout.
pub struct RpnLoss {
    pub obj_loss: f64,
    pub reg_loss: f64,
    pub grad_obj: Array4<f64>,
    pub grad_deltas: Array4<f64>,
}

pub fn rpn_loss(
    out: &RpnOutput,
    targets: &RpnTargets,
    cfg: &RpnConfig,
    rng: &mut ChaCha8Rng,
) -> RpnLoss {
    let (_, a, _hf, wf) = out.obj.dim();
    // obj_fg drives the objectness loss (labels 1 and 2); only label-1
    // anchors carry box targets for the delta loss.
    let mut obj_fg: Vec<usize> = Vec::new();
    let mut bg: Vec<usize> = Vec::new();
    for (i, &l) in targets.labels.iter().enumerate() {
        match l {
            1 | 2 => obj_fg.push(i),
            0 => bg.push(i),
            _ => {}
        }
    }
    obj_fg.shuffle(rng);
    bg.shuffle(rng);
    obj_fg.truncate(cfg.batch / 2);
    bg.truncate(cfg.batch - obj_fg.len());
    let fg: Vec<usize> = obj_fg
        .iter()
        .copied()
        .filter(|&i| targets.labels[i] == 1)
        .collect();

    let mut grad_obj = Array4::<f64>::zeros(out.obj.raw_dim());
    let mut grad_deltas = Array4::<f64>::zeros(out.deltas.raw_dim());
    let n_sample = (obj_fg.len() + bg.len()).max(1);
    let mut obj_loss = 0.0;
    for (&i, t) in obj_fg.iter().map(|i| (i, 1.0)).chain(bg.iter().map(|i| (i, 0.0))) {
        let ai = i % a;
        let cell = i / a;
        let (y, x) = (cell / wf, cell % wf);
        let z: f64 = out.obj[[0, ai, y, x]];
        obj_loss += z.max(0.0) - z * t + (1.0 + (-z.abs()).exp()).ln();
        let sig = 1.0 / (1.0 + (-z).exp());
        grad_obj[[0, ai, y, x]] = (sig - t) / n_sample as f64;
    }
    obj_loss /= n_sample as f64;

    let mut reg_loss = 0.0;
    let k = fg.len().max(1);
    for &i in &fg {
        let ai = i % a;
        let cell = i / a;
        let (y, x) = (cell / wf, cell % wf);
        for c in 0..4 {
            let pred = out.deltas[[0, 4 * ai + c, y, x]];
            let diff = pred - targets.deltas[i][c];
            reg_loss += diff.abs();
            grad_deltas[[0, 4 * ai + c, y, x]] = super::losses::l1_sign(diff) / k as f64;
        }
    }
    reg_loss /= k as f64;

    RpnLoss {
        obj_loss,
        reg_loss,
        grad_obj,
        grad_deltas,
    }
}
