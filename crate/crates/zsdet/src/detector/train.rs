//! Single-image SGD training loop. One optimizer step per image; the three
//! head losses plus the RPN losses share one backbone backward pass.

use std::path::Path;

use ndarray::{Array1, Array2, Array4};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::{filter_training_images, Dataset, ImageBuf, Role};
use crate::encoder::TextEmbedding;
use crate::error::Error;
use crate::geometry::Box2D;
use crate::nn::{clip_grad_norm, Param, ParamSet, Sgd};
use crate::proposals::{sample_training_subset, ProposalGenConfig, ProposalStore};
use crate::rngutil::stage_rng;

use super::assign::assign_and_sample;
use super::backbone::ToyBackbone;
use super::boxcodec::encode_deltas;
use super::heads::{ConvBranch, SemanticRegressor, TextClassifierState};
use super::losses::{
    classification_loss, distillation_loss, regression_loss, LossBreakdown,
};
use super::roi::{roi_align, roi_align_backward};
use super::rpn::{rpn_loss, rpn_targets, RpnHead};
use super::DetectorConfig;

pub struct DetectorModel {
    pub backbone: ToyBackbone,
    pub rpn: RpnHead,
    /// Classification branch, mapping pooled features into the embedding
    /// space shared with the text dictionary.
    pub conv_c: ConvBranch,
    /// Regression branch feeding the semantic box regressor.
    pub conv_r: ConvBranch,
    pub regressor: SemanticRegressor,
    pub classifier: TextClassifierState,
    pub cfg: DetectorConfig,
}

impl DetectorModel {
    pub fn new(cfg: DetectorConfig, base: Vec<TextEmbedding>) -> Result<Self, Error> {
        if let Some(e) = base.first() {
            if e.values.len() != cfg.embed_dim {
                return Err(Error::DimensionMismatch {
                    expected: cfg.embed_dim,
                    got: e.values.len(),
                });
            }
        }
        let mut rng = stage_rng(cfg.seed, "detector-init", 0);
        let backbone = ToyBackbone::new(&mut rng, &cfg.backbone_channels, &cfg.backbone_strides);
        let feat_ch = backbone.out_channels();
        let rpn = RpnHead::new(&mut rng, feat_ch, cfg.rpn.clone());
        let conv_c = ConvBranch::new(
            &mut rng,
            "conv_c",
            feat_ch,
            cfg.head_channels,
            cfg.roi_pool_size,
            &[cfg.head_hidden, cfg.embed_dim],
        );
        let conv_r = ConvBranch::new(
            &mut rng,
            "conv_r",
            feat_ch,
            cfg.head_channels,
            cfg.roi_pool_size,
            &[cfg.head_hidden, cfg.regressor_dim],
        );
        let regressor = SemanticRegressor::new(&mut rng, cfg.regressor_dim, cfg.embed_dim);
        let tau = cfg.tau;
        let classifier = TextClassifierState::new(&mut rng, base, tau);
        Ok(Self {
            backbone,
            rpn,
            conv_c,
            conv_r,
            regressor,
            classifier,
            cfg,
        })
    }

    pub fn image_tensor(img: &ImageBuf) -> Array4<f64> {
        let (w, h) = (img.width as usize, img.height as usize);
        let mut x = Array4::<f64>::zeros((1, 3, h, w));
        for y in 0..h {
            for xx in 0..w {
                let px = img.get(xx as u32, y as u32);
                for c in 0..3 {
                    x[[0, c, y, xx]] = px[c] as f64 / 255.0;
                }
            }
        }
        x
    }
}

impl ParamSet for DetectorModel {
    fn visit(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        self.backbone.visit(f);
        self.rpn.visit(f);
        self.conv_c.visit(f);
        self.conv_r.visit(f);
        self.regressor.visit(f);
        f("classifier.bg", &mut self.classifier.bg);
    }
}

/// One optimizer step's losses.
#[derive(Debug, Clone, serde::Serialize)]
pub struct IterLog {
    pub iter: usize,
    pub epoch: usize,
    pub image_id: u64,
    pub l_dist: f64,
    pub l_cls: f64,
    pub l_reg: f64,
    pub rpn_obj: f64,
    pub rpn_reg: f64,
    pub l_total: f64,
}

pub fn write_loss_csv(path: &Path, log: &[IterLog]) -> Result<(), Error> {
    let mut out = String::from("iter,epoch,image_id,l_dist,l_cls,l_reg,rpn_obj,rpn_reg,l_total\n");
    for l in log {
        out.push_str(&format!(
            "{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            l.iter, l.epoch, l.image_id, l.l_dist, l.l_cls, l.l_reg, l.rpn_obj, l.rpn_reg,
            l.l_total
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn scheduled_lr(cfg: &DetectorConfig, epoch: usize, iter: usize) -> f64 {
    let opt = &cfg.optimizer;
    let mut lr = opt.learning_rate;
    for &d in &opt.decay_epochs {
        if epoch >= d {
            lr /= 10.0;
        }
    }
    if iter < opt.warmup_iters {
        let t = iter as f64 / opt.warmup_iters as f64;
        lr *= opt.warmup_ratio + (1.0 - opt.warmup_ratio) * t;
    }
    lr
}

/// Trains on every image carrying at least one base annotation. Novel
/// annotations never reach the losses; novel objects are only seen through
/// the cached class-agnostic proposals in `store`.
pub fn train_detector(
    model: &mut DetectorModel,
    dataset: &Dataset,
    store: Option<&ProposalStore>,
    gen_cfg: &ProposalGenConfig,
) -> Result<Vec<IterLog>, Error> {
    if let Some(s) = store {
        s.expect_dim(model.cfg.embed_dim)?;
    }
    let images = filter_training_images(dataset, false);
    if images.is_empty() {
        return Err(Error::Dataset("no training images with base annotations".into()));
    }
    let cfg = model.cfg.clone();
    let mut opt = Sgd::new(cfg.optimizer.momentum, cfg.optimizer.weight_decay);
    let mut log = Vec::new();
    let mut iter = 0usize;
    for epoch in 0..cfg.optimizer.epochs {
        let mut order: Vec<usize> = (0..images.len()).collect();
        let mut erng = stage_rng(cfg.seed, "train-shuffle", epoch as u64);
        order.shuffle(&mut erng);
        for &oi in &order {
            let im = &images[oi];
            let pixels = im.load_pixels()?;
            let mut rng = stage_rng(cfg.seed, "train-step", iter as u64);
            let losses = train_step(model, &pixels, dataset, im.image_id, store, gen_cfg, &mut rng)?;
            let lr = scheduled_lr(&cfg, epoch, iter);
            clip_grad_norm(model, cfg.optimizer.clip_norm);
            opt.step(model, lr);
            log.push(IterLog {
                iter,
                epoch,
                image_id: im.image_id,
                l_dist: losses.dist,
                l_cls: losses.cls,
                l_reg: losses.reg,
                rpn_obj: losses.rpn_obj,
                rpn_reg: losses.rpn_reg,
                l_total: losses.total(),
            });
            iter += 1;
        }
    }
    Ok(log)
}

/// Random shift-and-rescale of a box, clipped to the image. The ranges put
/// most jitters between 0.3 and 0.8 IoU with the original, the regime where
/// first-pass proposals on unannotated categories actually land.
fn jitter_box(b: &Box2D, img_w: f64, img_h: f64, rng: &mut ChaCha8Rng) -> Option<Box2D> {
    let (cx, cy) = b.center();
    let (w, h) = (b.width(), b.height());
    let ncx = cx + rng.gen_range(-0.35..0.35) * w;
    let ncy = cy + rng.gen_range(-0.35..0.35) * h;
    let nw = w * rng.gen_range(0.6..1.6);
    let nh = h * rng.gen_range(0.6..1.6);
    let j = Box2D {
        x1: (ncx - nw / 2.0).clamp(0.0, img_w),
        y1: (ncy - nh / 2.0).clamp(0.0, img_h),
        x2: (ncx + nw / 2.0).clamp(0.0, img_w),
        y2: (ncy + nh / 2.0).clamp(0.0, img_h),
    };
    (j.is_valid() && j.width() >= 2.0 && j.height() >= 2.0).then_some(j)
}

/// Forward, all losses, backward, gradient accumulation. Does not step.
fn train_step(
    model: &mut DetectorModel,
    pixels: &ImageBuf,
    dataset: &Dataset,
    image_id: u64,
    store: Option<&ProposalStore>,
    gen_cfg: &ProposalGenConfig,
    rng: &mut ChaCha8Rng,
) -> Result<LossBreakdown, Error> {
    let cfg = model.cfg.clone();
    let stride = cfg.feature_stride() as f64;
    let scale = 1.0 / stride;
    model.zero_grads();

    let x = DetectorModel::image_tensor(pixels);
    let (fmap, bctx) = model.backbone.forward(&x);
    let (hf, wf) = (fmap.dim().1, fmap.dim().2);
    let mut grad_fmap = ndarray::Array3::<f64>::zeros(fmap.raw_dim());

    // base-category ground truth only
    let mut gt_boxes: Vec<Box2D> = Vec::new();
    let mut gt_labels: Vec<usize> = Vec::new();
    for a in dataset.annotations_for(image_id) {
        if dataset.split.role(&a.category) == Some(Role::Base) {
            let idx = model
                .classifier
                .base
                .iter()
                .position(|e| e.category_name == a.category)
                .ok_or_else(|| Error::Dataset(format!("no base embedding for {}", a.category)))?;
            gt_boxes.push(a.bbox);
            gt_labels.push(idx);
        }
    }

    // Distillation regions the encoder rates as confidently object-like are
    // excluded from both RPN and head background pools; they may cover
    // unannotated objects.
    let ignore_boxes: Vec<Box2D> = store
        .and_then(|s| s.proposals_for(image_id))
        .map(|ps| {
            ps.iter()
                .filter(|p| p.objectness >= cfg.ignore_objectness)
                .map(|p| p.bbox)
                .collect()
        })
        .unwrap_or_default();

    // RPN: objectness + delta losses, plus detached proposals for the heads
    let (rpn_out, rpn_ctx) = model.rpn.forward(&fmap);
    let anchors = model.rpn.anchors(hf, wf, stride);
    let targets = rpn_targets(&anchors, &gt_boxes, &ignore_boxes, &cfg.rpn);
    let rl = rpn_loss(&rpn_out, &targets, &cfg.rpn, rng);
    grad_fmap += &model.rpn.backward(&rpn_ctx, &rl.grad_obj, &rl.grad_deltas);
    let proposals: Vec<Box2D> = model
        .rpn
        .proposals(&rpn_out, stride, pixels.width as f64, pixels.height as f64)
        .into_iter()
        .map(|(b, _)| b)
        .collect();

    // classification over sampled proposals
    let samples = assign_and_sample(
        &proposals,
        &gt_boxes,
        &gt_labels,
        &ignore_boxes,
        model.classifier.base.len(),
        cfg.fg_iou,
        cfg.roi_batch,
        cfg.fg_fraction,
        rng,
    );
    let boxes: Vec<Box2D> = samples.iter().map(|s| s.bbox).collect();
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let (pooled, roi_ctx) = roi_align(&fmap, &boxes, scale, cfg.roi_pool_size);
    let (feats, cls_ctx) = model.conv_c.forward(&pooled);
    let bg = model.classifier.bg_vec();
    let (l_cls, grad_feats, grad_bg) =
        classification_loss(&feats, &model.classifier.base, &bg, cfg.tau, &labels)?;
    for (g, s) in model.classifier.bg.g.iter_mut().zip(grad_bg.iter()) {
        *g += *s;
    }
    let grad_pooled = model.conv_c.backward(&cls_ctx, &grad_feats);
    grad_fmap += &roi_align_backward(&roi_ctx, &grad_pooled);

    // semantic box regression on foreground samples, plus jittered copies
    // of each ground-truth box. RPN proposals on annotated categories are
    // already tight, so they alone teach only tiny corrections; the jitters
    // supply the large-displacement supervision the head needs to snap the
    // loosely localized proposals it sees on categories the RPN was never
    // box-trained on.
    let mut l_reg = 0.0;
    let mut reg_samples: Vec<(Box2D, usize, usize)> = samples
        .iter()
        .filter_map(|s| s.gt_index.map(|g| (s.bbox, s.label, g)))
        .collect();
    for (gi, g) in gt_boxes.iter().enumerate() {
        for _ in 0..cfg.reg_jitters_per_gt {
            if let Some(j) = jitter_box(g, pixels.width as f64, pixels.height as f64, rng) {
                reg_samples.push((j, gt_labels[gi], gi));
            }
        }
    }
    if !reg_samples.is_empty() {
        let fg_boxes: Vec<Box2D> = reg_samples.iter().map(|s| s.0).collect();
        let (pooled_r, roi_ctx_r) = roi_align(&fmap, &fg_boxes, scale, cfg.roi_pool_size);
        let (reg_feats, reg_ctx) = model.conv_r.forward(&pooled_r);
        let embeds: Vec<&Array1<f64>> = reg_samples
            .iter()
            .map(|s| &model.classifier.base[s.1].values)
            .collect();
        let (pred, sctx) = model.regressor.forward(&reg_feats, &embeds)?;
        let mut tgt = Array2::<f64>::zeros((reg_samples.len(), 4));
        for (i, s) in reg_samples.iter().enumerate() {
            let d = encode_deltas(&s.0, &gt_boxes[s.2]);
            for c in 0..4 {
                tgt[[i, c]] = d[c];
            }
        }
        let (lr_, grad_pred) = regression_loss(&pred, &tgt)?;
        l_reg = lr_;
        let grad_reg_feats = model.regressor.backward(&sctx, &grad_pred);
        let grad_pooled_r = model.conv_r.backward(&reg_ctx, &grad_reg_feats);
        grad_fmap += &roi_align_backward(&roi_ctx_r, &grad_pooled_r);
    }

    // objectness-weighted distillation toward cached encoder features
    let mut l_dist = 0.0;
    if cfg.distill {
        if let Some(store) = store {
            if let Some(props) = store.proposals_for(image_id) {
                let subset = sample_training_subset(props, image_id, gen_cfg);
                if !subset.is_empty() {
                    let d_boxes: Vec<Box2D> = subset.iter().map(|p| p.bbox).collect();
                    let weights: Vec<f64> = subset.iter().map(|p| p.objectness).collect();
                    let mut clip = Array2::<f64>::zeros((subset.len(), cfg.embed_dim));
                    for (i, p) in subset.iter().enumerate() {
                        clip.row_mut(i).assign(&p.feature);
                    }
                    let (pooled_d, roi_ctx_d) = roi_align(&fmap, &d_boxes, scale, cfg.roi_pool_size);
                    let (dfeats, dctx) = model.conv_c.forward(&pooled_d);
                    let (ld, grad_d) = if cfg.normalize_distill {
                        normalized_distillation(&dfeats, &clip, &weights)?
                    } else {
                        distillation_loss(&dfeats, &clip, &weights)?
                    };
                    l_dist = ld;
                    let grad_pooled_d = model.conv_c.backward(&dctx, &grad_d);
                    grad_fmap += &roi_align_backward(&roi_ctx_d, &grad_pooled_d);
                }
            }
        }
    }

    model.backbone.backward(&bctx, &grad_fmap);
    Ok(LossBreakdown {
        dist: l_dist,
        cls: l_cls,
        reg: l_reg,
        rpn_obj: rl.obj_loss,
        rpn_reg: rl.reg_loss,
    })
}

/// Distillation with both sides L2-normalized; the gradient projects out
/// the radial component of each row.
fn normalized_distillation(
    model_feats: &Array2<f64>,
    clip_feats: &Array2<f64>,
    weights: &[f64],
) -> Result<(f64, Array2<f64>), Error> {
    let m = model_feats.nrows();
    let mut nm = model_feats.clone();
    let mut nc = clip_feats.clone();
    let mut norms = Vec::with_capacity(m);
    for i in 0..m {
        let rn = nm.row(i).dot(&nm.row(i)).sqrt();
        let cn = nc.row(i).dot(&nc.row(i)).sqrt();
        if rn == 0.0 || cn == 0.0 {
            return Err(Error::ZeroNorm);
        }
        nm.row_mut(i).mapv_inplace(|v| v / rn);
        nc.row_mut(i).mapv_inplace(|v| v / cn);
        norms.push(rn);
    }
    let (loss, grad_n) = distillation_loss(&nm, &nc, weights)?;
    let mut grad = Array2::<f64>::zeros(model_feats.raw_dim());
    for i in 0..m {
        let n = nm.row(i);
        let g = grad_n.row(i);
        let radial = g.dot(&n);
        for j in 0..model_feats.ncols() {
            grad[[i, j]] = (g[j] - radial * n[j]) / norms[i];
        }
    }
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{Encoder, MockEncoder, DEFAULT_PROMPT_TEMPLATE};
    use std::collections::BTreeMap;

    fn tiny_model(embed_dim: usize) -> DetectorModel {
        let enc = MockEncoder::new(7, embed_dim);
        let base = enc
            .encode_text(
                &["red-square".into(), "green-circle".into()],
                DEFAULT_PROMPT_TEMPLATE,
            )
            .unwrap();
        let mut cfg = DetectorConfig::toy(embed_dim, 11);
        cfg.optimizer.epochs = 1;
        DetectorModel::new(cfg, base).unwrap()
    }

    #[test]
    fn model_parameters_have_stable_names() {
        let mut m = tiny_model(16);
        let snap = m.snapshot();
        let names: Vec<&str> = snap.iter().map(|(n, _)| n.as_str()).collect();
        assert!(names.contains(&"backbone.conv0.w"));
        assert!(names.contains(&"rpn.obj.b"));
        assert!(names.contains(&"conv_c.fc1.w"));
        assert!(names.contains(&"regressor.fc.w"));
        assert!(names.contains(&"classifier.bg"));
        // names are unique
        let mut sorted = names.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len());
    }

    #[test]
    fn snapshot_roundtrip_is_exact() {
        let mut m = tiny_model(16);
        let snap: BTreeMap<String, ndarray::ArrayD<f64>> = m.snapshot().into_iter().collect();
        let mut m2 = tiny_model(16);
        m2.visit(&mut |_, p| p.v.mapv_inplace(|v| v + 1.0));
        m2.load_snapshot(&snap).unwrap();
        for ((n1, a), (n2, b)) in m.snapshot().iter().zip(m2.snapshot().iter()) {
            assert_eq!(n1, n2);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn normalized_distillation_gradient_matches_fd() {
        let f = Array2::from_shape_fn((3, 5), |(i, j)| 0.3 + (i * 5 + j) as f64 * 0.07);
        let c = Array2::from_shape_fn((3, 5), |(i, j)| 1.0 - (i * 3 + j) as f64 * 0.05);
        let w = vec![0.5, 0.9, 0.2];
        let (l0, g) = normalized_distillation(&f, &c, &w).unwrap();
        let h = 1e-6;
        for &(i, j) in &[(0, 0), (1, 3), (2, 4)] {
            let mut f2 = f.clone();
            f2[[i, j]] += h;
            let (l1, _) = normalized_distillation(&f2, &c, &w).unwrap();
            let fd = (l1 - l0) / h;
            assert!(
                (fd - g[[i, j]]).abs() < 1e-5,
                "fd {fd} vs analytic {}",
                g[[i, j]]
            );
        }
    }

    #[test]
    fn warmup_and_decay_schedule() {
        let mut cfg = DetectorConfig::toy(16, 0);
        cfg.optimizer.warmup_iters = 10;
        cfg.optimizer.decay_epochs = vec![2];
        let base = cfg.optimizer.learning_rate;
        assert!((scheduled_lr(&cfg, 0, 0) - base * cfg.optimizer.warmup_ratio).abs() < 1e-12);
        assert!(scheduled_lr(&cfg, 0, 5) < base);
        assert!((scheduled_lr(&cfg, 0, 10) - base).abs() < 1e-12);
        assert!((scheduled_lr(&cfg, 2, 100) - base / 10.0).abs() < 1e-12);
    }
}
