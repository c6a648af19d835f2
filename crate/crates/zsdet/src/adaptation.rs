//! Domain adaptation of the encoder: finetune only its normalization-style
//! parameters with a cross-entropy objective over base-category instance
//! crops, and evaluate instance classification accuracy by split and size
//! bin.
//!
//! The adaptation loss classifies each 1.2x-enlarged instance crop against
//! the base-category text embeddings by cosine similarity; only the
//! encoder's adaptable partition receives gradient. For the mock encoder
//! that partition is the per-dimension affine on its descriptor, and the
//! gradient is computed in closed form.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array3};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, SizeBin};
use crate::encoder::{
    classify_feature, cosine, crop_and_preprocess, softmax, Encoder, MockEncoder, TextEmbedding,
    MOCK_DESC_DIM,
};
use crate::error::Error;
use crate::geometry::{enlarge, Box2D};
use crate::rngutil::stage_rng;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub grad_norm_clip: f64,
    pub enlarge_factor: f64,
    pub tau: f64,
    pub seed: u64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 4,
            epochs: 12,
            grad_norm_clip: 0.1,
            enlarge_factor: 1.2,
            tau: 0.01,
            seed: 0,
        }
    }
}

/// Which annotations to crop.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Base,
    Novel,
    All,
}

/// One labeled instance crop. The label indexes the category within the
/// chosen side's ordering (base first for `Side::All`).
pub struct InstanceCrop {
    pub crop: Array3<f64>,
    pub label: usize,
    pub category: String,
    pub bin: SizeBin,
}

/// Crops one region per annotation on the chosen side, each box enlarged
/// about its center and clipped to the image.
pub fn collect_instance_crops(
    dataset: &Dataset,
    side: Side,
    enlarge_factor: f64,
    input_side: u32,
) -> Result<Vec<InstanceCrop>, Error> {
    let names: Vec<String> = match side {
        Side::Base => dataset.split.base.clone(),
        Side::Novel => dataset.split.novel.clone(),
        Side::All => dataset.split.all(),
    };
    let mut out = Vec::new();
    for img in &dataset.images {
        let pixels_needed = dataset
            .annotations
            .iter()
            .any(|a| a.image_id == img.image_id && names.iter().any(|n| *n == a.category));
        if !pixels_needed {
            continue;
        }
        let pixels = img.load_pixels()?;
        let bounds = Box2D::new(0.0, 0.0, img.width as f64, img.height as f64)?;
        for ann in dataset.annotations.iter().filter(|a| a.image_id == img.image_id) {
            let Some(label) = names.iter().position(|n| *n == ann.category) else {
                continue;
            };
            let enlarged = enlarge(&ann.bbox, enlarge_factor, Some(&bounds))?;
            let crop = crop_and_preprocess(&pixels, &enlarged, input_side)?;
            out.push(InstanceCrop {
                crop,
                label,
                category: ann.category.clone(),
                bin: ann.size_bin(),
            });
        }
    }
    Ok(out)
}

/// Cross-entropy of one descriptor against the dictionary, plus the gradient
/// with respect to the mock's flattened normalization parameters
/// `[gain, bias]`.
fn mock_ce_and_grad(
    enc: &MockEncoder,
    descriptor: &Array1<f64>,
    label: usize,
    embeddings: &[TextEmbedding],
    tau: f64,
) -> Result<(f64, Vec<f64>), Error> {
    let f = enc.project_with_affine(descriptor);
    let f_norm = f.dot(&f).sqrt();
    if f_norm == 0.0 {
        return Err(Error::ZeroNorm);
    }
    let f_hat = &f / f_norm;

    let mut logits = Vec::with_capacity(embeddings.len());
    let mut t_hats = Vec::with_capacity(embeddings.len());
    for e in embeddings {
        let tn = e.values.dot(&e.values).sqrt();
        if tn == 0.0 {
            return Err(Error::ZeroNorm);
        }
        let t_hat = &e.values / tn;
        logits.push(f.dot(&t_hat) / f_norm / tau);
        t_hats.push(t_hat);
    }
    let probs = softmax(&logits);
    let loss = -probs[label].max(1e-300).ln();

    // dL/df = sum_c (p_c - y_c)/tau * (t_hat_c - cos_c * f_hat) / ||f||
    let mut df = Array1::<f64>::zeros(f.len());
    for (c, t_hat) in t_hats.iter().enumerate() {
        let coeff = (probs[c] - if c == label { 1.0 } else { 0.0 }) / tau;
        let cos_c = logits[c] * tau;
        df = df + coeff / f_norm * (t_hat - &(cos_c * &f_hat));
    }
    // back through f = P (g*d + b)
    let da = enc.projection().t().dot(&df);
    let mut grad = Vec::with_capacity(2 * MOCK_DESC_DIM);
    grad.extend((&da * descriptor).iter());
    grad.extend(da.iter());
    Ok((loss, grad))
}

/// Mean cross-entropy of the crops under the encoder's current parameters.
pub fn adaptation_loss(
    enc: &MockEncoder,
    crops: &[InstanceCrop],
    embeddings: &[TextEmbedding],
    tau: f64,
) -> Result<f64, Error> {
    let mut total = 0.0;
    for c in crops {
        let d = MockEncoder::descriptor(&c.crop);
        let (l, _) = mock_ce_and_grad(enc, &d, c.label, embeddings, tau)?;
        total += l;
    }
    Ok(total / crops.len().max(1) as f64)
}

/// Finetunes only the normalization partition of the mock encoder with
/// AdamW (weight decay 0, constant learning rate), gradient global norm
/// clipped at `cfg.grad_norm_clip`. Every parameter outside the partition is
/// bit-identical on return; training is deterministic under the seed.
pub fn finetune_layernorm(
    enc: &MockEncoder,
    crops: &[InstanceCrop],
    base_text_embeddings: &[TextEmbedding],
    cfg: &AdaptConfig,
) -> Result<MockEncoder, Error> {
    if crops.is_empty() {
        return Err(Error::InvalidArgument("finetune_layernorm: empty crop set".into()));
    }
    let mut adapted = enc.clone();
    let descriptors: Vec<Array1<f64>> =
        crops.iter().map(|c| MockEncoder::descriptor(&c.crop)).collect();

    let n_params = 2 * MOCK_DESC_DIM;
    let mut m = vec![0.0; n_params];
    let mut v = vec![0.0; n_params];
    let (beta1, beta2, eps) = (0.9, 0.999, 1e-8);
    let mut t = 0usize;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..crops.len()).collect();
        let mut rng = stage_rng(cfg.seed, "adapt-shuffle", epoch as u64);
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let mut grad = vec![0.0; n_params];
            for &i in batch {
                let (_, g) = mock_ce_and_grad(
                    &adapted,
                    &descriptors[i],
                    crops[i].label,
                    base_text_embeddings,
                    cfg.tau,
                )?;
                for (acc, gi) in grad.iter_mut().zip(g) {
                    *acc += gi / batch.len() as f64;
                }
            }
            let norm: f64 = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if norm > cfg.grad_norm_clip {
                let s = cfg.grad_norm_clip / norm;
                for g in grad.iter_mut() {
                    *g *= s;
                }
            }
            t += 1;
            let mut params = adapted.norm_params();
            for i in 0..n_params {
                m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
                let m_hat = m[i] / (1.0 - beta1.powi(t as i32));
                let v_hat = v[i] / (1.0 - beta2.powi(t as i32));
                params[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + eps);
            }
            adapted.set_norm_params(&params);
        }
    }
    Ok(adapted)
}

/// Per-bin accuracy for one evaluation setting.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AccCell {
    pub bin: String,
    pub count: usize,
    pub correct: usize,
}

impl AccCell {
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.count as f64
    }
}

/// Instance-classification accuracy for one setting, reported per size bin
/// plus an instance-weighted average. Empty cells are absent, not zero.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AccReport {
    pub setting: String,
    pub cells: Vec<AccCell>,
}

impl AccReport {
    pub fn avg(&self) -> Option<&AccCell> {
        self.cells.iter().find(|c| c.bin == "Avg")
    }
}

/// Classifies instances of the given setting against the side-appropriate
/// dictionary: base instances vs base embeddings, novel vs novel, general
/// (all instances) vs the union in base-first order.
pub fn evaluate_instance_acc(
    enc: &MockEncoder,
    dataset: &Dataset,
    setting: Side,
    enlarge_factor: f64,
    tau: f64,
) -> Result<AccReport, Error> {
    let names: Vec<String> = match setting {
        Side::Base => dataset.split.base.clone(),
        Side::Novel => dataset.split.novel.clone(),
        Side::All => dataset.split.all(),
    };
    if names.is_empty() {
        return Err(Error::InvalidArgument("evaluate_instance_acc: empty dictionary".into()));
    }
    let embeddings = enc.encode_text(&names, crate::encoder::DEFAULT_PROMPT_TEMPLATE)?;
    let crops = collect_instance_crops(dataset, setting, enlarge_factor, enc.input_side())?;

    let mut per_bin: BTreeMap<&'static str, (usize, usize)> = BTreeMap::new();
    let mut total = (0usize, 0usize);
    for c in &crops {
        let feature = enc.encode_crop(&c.crop);
        let (pred, _) = classify_feature(&feature, &embeddings, tau)?;
        let hit = embeddings[pred].category_name == c.category;
        let e = per_bin.entry(c.bin.label()).or_insert((0, 0));
        e.0 += 1;
        total.0 += 1;
        if hit {
            e.1 += 1;
            total.1 += 1;
        }
    }

    let setting_name = match setting {
        Side::Base => "base",
        Side::Novel => "novel",
        Side::All => "general",
    };
    let mut cells = Vec::new();
    for bin in ["L", "M", "S"] {
        if let Some(&(count, correct)) = per_bin.get(bin) {
            cells.push(AccCell {
                bin: bin.to_string(),
                count,
                correct,
            });
        }
    }
    if total.0 > 0 {
        cells.push(AccCell {
            bin: "Avg".to_string(),
            count: total.0,
            correct: total.1,
        });
    }
    Ok(AccReport {
        setting: setting_name.to_string(),
        cells,
    })
}

/// Writes reports as CSV with columns `setting,bin,count,accuracy`.
pub fn write_acc_csv(reports: &[AccReport], path: &Path) -> Result<(), Error> {
    let mut out = String::from("setting,bin,count,accuracy\n");
    for r in reports {
        for c in &r.cells {
            out.push_str(&format!("{},{},{},{:.6}\n", r.setting, c.bin, c.count, c.accuracy()));
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Sanity helper used by tests: mean cosine alignment between image features
/// and the text embedding of their own category.
pub fn mean_alignment(
    enc: &MockEncoder,
    crops: &[InstanceCrop],
    embeddings: &[TextEmbedding],
) -> Result<f64, Error> {
    let mut s = 0.0;
    for c in crops {
        let f = enc.encode_crop(&c.crop);
        s += cosine(&f, &embeddings[c.label].values)?;
    }
    Ok(s / crops.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{make_toy_dataset, parse_shape_name, DatasetSplit, Role, ToyConfig};
    use crate::encoder::DEFAULT_PROMPT_TEMPLATE;
    use tempfile::TempDir;

    fn toy() -> (TempDir, Dataset) {
        let dir = TempDir::new().unwrap();
        let split = DatasetSplit::new(
            vec!["red-square".into(), "green-circle".into()],
            vec!["blue-triangle".into()],
        )
        .unwrap();
        let catalog = vec![
            parse_shape_name("red-square").unwrap(),
            parse_shape_name("green-circle").unwrap(),
            parse_shape_name("blue-triangle").unwrap(),
        ];
        let cfg = ToyConfig {
            seed: 11,
            n_images: 16,
            canvas_size: 96,
            max_shapes_per_image: 2,
        };
        let ann = make_toy_dataset(dir.path(), &cfg, &catalog, &split).unwrap();
        let ds = crate::dataset::load_coco_json(&ann, &split).unwrap();
        (dir, ds)
    }

    #[test]
    fn crop_counting_and_identity_factor() {
        let (_d, ds) = toy();
        let n_base = ds
            .annotations
            .iter()
            .filter(|a| ds.split.role(&a.category) == Some(Role::Base))
            .count();
        let enc = MockEncoder::new(1, 24);
        let crops = collect_instance_crops(&ds, Side::Base, 1.0, enc.input_side()).unwrap();
        assert_eq!(crops.len(), n_base);
        let crops_all = collect_instance_crops(&ds, Side::All, 1.2, enc.input_side()).unwrap();
        assert_eq!(crops_all.len(), ds.annotations.len());
    }

    #[test]
    fn zero_epochs_is_identity() {
        let (_d, ds) = toy();
        let enc = MockEncoder::new(1, 24);
        let crops = collect_instance_crops(&ds, Side::Base, 1.2, enc.input_side()).unwrap();
        let embs = enc.encode_text(&ds.split.base, DEFAULT_PROMPT_TEMPLATE).unwrap();
        let cfg = AdaptConfig {
            epochs: 0,
            ..Default::default()
        };
        let adapted = finetune_layernorm(&enc, &crops, &embs, &cfg).unwrap();
        assert_eq!(adapted.norm_params(), enc.norm_params());
        assert_eq!(adapted.non_norm_params(), enc.non_norm_params());
    }

    #[test]
    fn one_step_touches_only_norm_partition() {
        let (_d, ds) = toy();
        let enc = MockEncoder::new(1, 24);
        let crops = collect_instance_crops(&ds, Side::Base, 1.2, enc.input_side()).unwrap();
        let embs = enc.encode_text(&ds.split.base, DEFAULT_PROMPT_TEMPLATE).unwrap();
        let cfg = AdaptConfig {
            epochs: 1,
            batch_size: crops.len(),
            ..Default::default()
        };
        let adapted = finetune_layernorm(&enc, &crops, &embs, &cfg).unwrap();
        assert_eq!(adapted.non_norm_params(), enc.non_norm_params());
        assert_ne!(adapted.norm_params(), enc.norm_params());
    }

    #[test]
    fn training_reduces_loss_on_miscalibrated_encoder() {
        let (_d, ds) = toy();
        let mut enc = MockEncoder::new(1, 24);
        // crush most of the descriptor so classification starts out poor
        let mut params = enc.norm_params();
        for (i, p) in params.iter_mut().enumerate().take(MOCK_DESC_DIM) {
            if i % 3 != 0 {
                *p = 0.05;
            }
        }
        enc.set_norm_params(&params);

        let crops = collect_instance_crops(&ds, Side::Base, 1.2, enc.input_side()).unwrap();
        let embs = enc.encode_text(&ds.split.base, DEFAULT_PROMPT_TEMPLATE).unwrap();
        let before = adaptation_loss(&enc, &crops, &embs, 0.05).unwrap();
        let cfg = AdaptConfig {
            epochs: 4,
            tau: 0.05,
            learning_rate: 5e-3,
            seed: 3,
            ..Default::default()
        };
        let adapted = finetune_layernorm(&enc, &crops, &embs, &cfg).unwrap();
        let after = adaptation_loss(&adapted, &crops, &embs, 0.05).unwrap();
        assert!(after < before, "loss should drop: before {before} after {after}");
    }

    #[test]
    fn finetune_gradient_matches_finite_differences() {
        let (_d, ds) = toy();
        let enc = MockEncoder::new(5, 16);
        let crops = collect_instance_crops(&ds, Side::Base, 1.2, enc.input_side()).unwrap();
        let embs = enc.encode_text(&ds.split.base, DEFAULT_PROMPT_TEMPLATE).unwrap();
        let d = MockEncoder::descriptor(&crops[0].crop);
        let (_, grad) = mock_ce_and_grad(&enc, &d, crops[0].label, &embs, 0.05).unwrap();

        let h = 1e-6;
        for idx in [0usize, 7, 20, MOCK_DESC_DIM + 3, 2 * MOCK_DESC_DIM - 1] {
            let eval = |delta: f64| {
                let mut e = enc.clone();
                let mut p = e.norm_params();
                p[idx] += delta;
                e.set_norm_params(&p);
                mock_ce_and_grad(&e, &d, crops[0].label, &embs, 0.05).unwrap().0
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            // absolute floor keeps near-zero gradients from inflating the
            // relative error
            let rel = (fd - grad[idx]).abs() / fd.abs().max(grad[idx].abs()).max(1e-6);
            assert!(rel < 1e-4, "param {idx}: fd {fd} vs grad {}", grad[idx]);
        }
    }

    #[test]
    fn determinism_same_seed_same_params() {
        let (_d, ds) = toy();
        let enc = MockEncoder::new(1, 24);
        let crops = collect_instance_crops(&ds, Side::Base, 1.2, enc.input_side()).unwrap();
        let embs = enc.encode_text(&ds.split.base, DEFAULT_PROMPT_TEMPLATE).unwrap();
        let cfg = AdaptConfig {
            epochs: 2,
            seed: 42,
            ..Default::default()
        };
        let a = finetune_layernorm(&enc, &crops, &embs, &cfg).unwrap();
        let b = finetune_layernorm(&enc, &crops, &embs, &cfg).unwrap();
        assert_eq!(a.norm_params(), b.norm_params());
    }

    #[test]
    fn acc_report_shape_and_integer_counts() {
        let (_d, ds) = toy();
        let enc = MockEncoder::new(1, 24);
        let report = evaluate_instance_acc(&enc, &ds, Side::All, 1.2, 0.01).unwrap();
        assert_eq!(report.setting, "general");
        let avg = report.avg().unwrap();
        assert!(avg.count > 0);
        for c in &report.cells {
            assert!(c.correct <= c.count);
        }
        // single-candidate forced prediction
        let base_only = DatasetSplit::new(vec!["red-square".into()], vec![]).unwrap();
        let mut ds2 = ds.clone();
        ds2.annotations.retain(|a| a.category == "red-square");
        ds2.split = base_only;
        if !ds2.annotations.is_empty() {
            let r = evaluate_instance_acc(&enc, &ds2, Side::Base, 1.2, 0.01).unwrap();
            assert_eq!(r.avg().unwrap().accuracy(), 1.0);
        }
    }

    #[test]
    fn acc_csv_written() {
        let (_d, ds) = toy();
        let enc = MockEncoder::new(1, 24);
        let r = evaluate_instance_acc(&enc, &ds, Side::Base, 1.2, 0.01).unwrap();
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("acc.csv");
        write_acc_csv(&[r], &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("setting,bin,count,accuracy\n"));
        assert!(text.lines().count() >= 2);
    }
}
