//! Detection inference: RPN proposals are classified against the extended
//! dictionary (base, novel, background), regressed with the predicted
//! category's embedding and filtered with class-wise NMS.

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::dataset::ImageBuf;
use crate::encoder::softmax;
use crate::error::Error;
use crate::geometry::{nms, Box2D};

use super::boxcodec::decode_deltas;
use super::losses::{cosine_logits, ClassifierMode};
use super::roi::roi_align;
use super::train::DetectorModel;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: u64,
    pub category: String,
    pub score: f64,
    pub bbox: Box2D,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceConfig {
    /// Softmax score below which a detection is dropped.
    pub score_threshold: f64,
    pub nms_iou: f64,
    /// Detections kept per image after class-wise NMS.
    pub max_dets: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            score_threshold: 0.05,
            nms_iou: 0.5,
            max_dets: 100,
        }
    }
}

/// Runs the full pipeline on one image. Every proposal scores every
/// category; the background slot only competes inside the softmax, so a
/// proposal near an object still surfaces with a usable score even when
/// background edges it out at the argmax.
pub fn detect_image(
    model: &DetectorModel,
    pixels: &ImageBuf,
    image_id: u64,
    icfg: &InferenceConfig,
) -> Result<Vec<Detection>, Error> {
    let cfg = &model.cfg;
    let stride = cfg.feature_stride() as f64;
    let x = DetectorModel::image_tensor(pixels);
    let (fmap, _) = model.backbone.forward(&x);
    let (rpn_out, _) = model.rpn.forward(&fmap);
    let scored = model
        .rpn
        .proposals(&rpn_out, stride, pixels.width as f64, pixels.height as f64);
    if scored.is_empty() {
        return Ok(Vec::new());
    }
    let proposals: Vec<Box2D> = scored.iter().map(|(b, _)| *b).collect();
    let obj_scores: Vec<f64> = scored.iter().map(|(_, s)| *s).collect();

    let (pooled, _) = roi_align(&fmap, &proposals, 1.0 / stride, cfg.roi_pool_size);
    let (feats, _) = model.conv_c.forward(&pooled);
    let (reg_feats, _) = model.conv_r.forward(&pooled);

    let bg = model.classifier.bg_vec();
    let n_base = model.classifier.base.len();
    let n_cat = n_base + model.classifier.novel.len();

    struct Cand {
        bbox: Box2D,
        score: f64,
        cat: usize,
    }
    let mut cands: Vec<Cand> = Vec::new();
    for (i, b) in proposals.iter().enumerate() {
        let f: Array1<f64> = feats.row(i).to_owned();
        if f.iter().all(|v| *v == 0.0) {
            continue;
        }
        let logits = cosine_logits(
            &f,
            &model.classifier.base,
            &model.classifier.novel,
            &bg,
            cfg.tau,
            ClassifierMode::Inference,
        )?;
        // Softmax over real categories only. The learned background row is
        // a training device; at inference the class-agnostic objectness in
        // the combined score handles background rejection, and including the
        // background row would unfairly suppress novel categories it was
        // never calibrated against.
        let scores = softmax(&logits[..n_cat]);
        for cat in 0..n_cat {
            // geometric mean of class-agnostic objectness and the class
            // probability: either one alone ranks background too high
            let score = (obj_scores[i] * scores[cat]).sqrt();
            if score < icfg.score_threshold {
                continue;
            }
            let embed = if cat < n_base {
                &model.classifier.base[cat].values
            } else {
                &model.classifier.novel[cat - n_base].values
            };
            let rf = reg_feats.row(i).to_owned().insert_axis(ndarray::Axis(0));
            let (deltas, _) = model.regressor.forward(&rf, &[embed])?;
            let d = [
                deltas[[0, 0]],
                deltas[[0, 1]],
                deltas[[0, 2]].clamp(-4.0, 4.0),
                deltas[[0, 3]].clamp(-4.0, 4.0),
            ];
            let refined = decode_deltas(b, &d);
            let clipped = Box2D {
                x1: refined.x1.clamp(0.0, pixels.width as f64),
                y1: refined.y1.clamp(0.0, pixels.height as f64),
                x2: refined.x2.clamp(0.0, pixels.width as f64),
                y2: refined.y2.clamp(0.0, pixels.height as f64),
            };
            if !clipped.is_valid() {
                continue;
            }
            cands.push(Cand {
                bbox: clipped,
                score,
                cat,
            });
        }
    }

    // class-wise NMS, then a global top-k by score
    let mut dets: Vec<Detection> = Vec::new();
    for cat in 0..n_cat {
        let group: Vec<&Cand> = cands.iter().filter(|c| c.cat == cat).collect();
        if group.is_empty() {
            continue;
        }
        let boxes: Vec<Box2D> = group.iter().map(|c| c.bbox).collect();
        let scores: Vec<f64> = group.iter().map(|c| c.score).collect();
        let name = if cat < n_base {
            model.classifier.base[cat].category_name.clone()
        } else {
            model.classifier.novel[cat - n_base].category_name.clone()
        };
        for i in nms(&boxes, &scores, icfg.nms_iou)? {
            dets.push(Detection {
                image_id,
                category: name.clone(),
                score: scores[i],
                bbox: boxes[i],
            });
        }
    }
    dets.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
    dets.truncate(icfg.max_dets);
    Ok(dets)
}

pub fn write_detections_json(path: &std::path::Path, dets: &[Detection]) -> Result<(), Error> {
    let mut lines = String::new();
    for d in dets {
        lines.push_str(&serde_json::to_string(d)?);
        lines.push('\n');
    }
    std::fs::write(path, lines).map_err(|e| Error::io(path, e))
}

pub fn read_detections_json(path: &std::path::Path) -> Result<Vec<Detection>, Error> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}
