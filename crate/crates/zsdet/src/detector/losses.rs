//! The three detection-head losses: objectness-weighted L1 distillation,
//! cosine-classifier cross-entropy, and L1 delta regression. Each returns
//! its scalar together with the analytic gradient that the training loop
//! consumes; unit tests pin the closed-form examples and check every
//! gradient against central finite differences.

use ndarray::{Array1, Array2};

use crate::encoder::{softmax, TextEmbedding};
use crate::error::Error;

/// Weighted L1 distillation over one image's proposal subset:
/// `(1/M) * sum_i o_i * |c_i - c'_i|_1`.
///
/// Returns the loss and its gradient with respect to the model features
/// `c'`. An empty batch contributes zero (the caller logs the skip).
/// L1 subgradient with the zero convention (`f64::signum(0.0)` is 1.0).
pub(crate) fn l1_sign(x: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x.signum()
    }
}

pub fn distillation_loss(
    model_feats: &Array2<f64>,
    clip_feats: &Array2<f64>,
    weights: &[f64],
) -> Result<(f64, Array2<f64>), Error> {
    let m = model_feats.nrows();
    if clip_feats.nrows() != m || weights.len() != m {
        return Err(Error::InvalidArgument(format!(
            "distillation_loss: {m} model feats vs {} clip feats vs {} weights",
            clip_feats.nrows(),
            weights.len()
        )));
    }
    if m == 0 {
        return Ok((0.0, Array2::zeros((0, model_feats.ncols()))));
    }
    if model_feats.ncols() != clip_feats.ncols() {
        return Err(Error::DimensionMismatch {
            expected: clip_feats.ncols(),
            got: model_feats.ncols(),
        });
    }
    let mut loss = 0.0;
    let mut grad = Array2::<f64>::zeros(model_feats.raw_dim());
    for i in 0..m {
        let o = weights[i];
        for j in 0..model_feats.ncols() {
            let diff = model_feats[[i, j]] - clip_feats[[i, j]];
            loss += o * diff.abs();
            grad[[i, j]] = o / m as f64 * l1_sign(diff);
        }
    }
    Ok((loss / m as f64, grad))
}

/// Classifier logit layout: base categories, then (inference only) novel
/// categories, then the background slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassifierMode {
    Train,
    Inference,
}

/// Cosine logits of one feature against the classifier dictionary, scaled
/// by `1/tau`. In train mode the vector is `[base..., BG]`; in inference
/// mode `[base..., novel..., BG]`.
pub fn cosine_logits(
    feature: &Array1<f64>,
    base: &[TextEmbedding],
    novel: &[TextEmbedding],
    bg: &Array1<f64>,
    tau: f64,
    mode: ClassifierMode,
) -> Result<Vec<f64>, Error> {
    let fn_ = feature.dot(feature).sqrt();
    if fn_ == 0.0 {
        return Err(Error::ZeroNorm);
    }
    let mut logits = Vec::new();
    let mut push = |v: &Array1<f64>| -> Result<(), Error> {
        let n = v.dot(v).sqrt();
        if n == 0.0 {
            return Err(Error::ZeroNorm);
        }
        logits.push(feature.dot(v) / (fn_ * n) / tau);
        Ok(())
    };
    for e in base {
        push(&e.values)?;
    }
    if mode == ClassifierMode::Inference {
        for e in novel {
            push(&e.values)?;
        }
    }
    push(bg)?;
    Ok(logits)
}

/// Mean cross-entropy of the train-mode cosine logits over a proposal
/// batch. `labels[i]` is a base-category index or `base.len()` for
/// background.
///
/// Returns `(loss, grad wrt features, grad wrt BG)`.
pub fn classification_loss(
    features: &Array2<f64>,
    base: &[TextEmbedding],
    bg: &Array1<f64>,
    tau: f64,
    labels: &[usize],
) -> Result<(f64, Array2<f64>, Array1<f64>), Error> {
    let n = features.nrows();
    if n == 0 || labels.len() != n {
        return Err(Error::InvalidArgument(format!(
            "classification_loss: {n} features vs {} labels",
            labels.len()
        )));
    }
    let n_slots = base.len() + 1;
    for &y in labels {
        if y >= n_slots {
            return Err(Error::InvalidArgument(format!(
                "label {y} out of range for {n_slots} classifier slots"
            )));
        }
    }
    let d = features.ncols();
    // normalized dictionary, BG last
    let mut dirs: Vec<Array1<f64>> = Vec::with_capacity(n_slots);
    for e in base {
        let nn = e.values.dot(&e.values).sqrt();
        if nn == 0.0 {
            return Err(Error::ZeroNorm);
        }
        dirs.push(&e.values / nn);
    }
    let bg_norm = bg.dot(bg).sqrt();
    if bg_norm == 0.0 {
        return Err(Error::ZeroNorm);
    }
    dirs.push(bg / bg_norm);

    let mut loss = 0.0;
    let mut grad_f = Array2::<f64>::zeros((n, d));
    let mut grad_bg = Array1::<f64>::zeros(d);
    for i in 0..n {
        let f = features.row(i).to_owned();
        let f_norm = f.dot(&f).sqrt();
        if f_norm == 0.0 {
            return Err(Error::ZeroNorm);
        }
        let f_hat = &f / f_norm;
        let cosines: Vec<f64> = dirs.iter().map(|t| f_hat.dot(t)).collect();
        let logits: Vec<f64> = cosines.iter().map(|c| c / tau).collect();
        let probs = softmax(&logits);
        loss += -probs[labels[i]].max(1e-300).ln();

        for (c, t_hat) in dirs.iter().enumerate() {
            let coeff = (probs[c] - if c == labels[i] { 1.0 } else { 0.0 }) / (tau * n as f64);
            // d cos_c / d f
            let df = (t_hat - &(cosines[c] * &f_hat)) / f_norm;
            grad_f.row_mut(i).scaled_add(coeff, &df);
            if c == n_slots - 1 {
                // d cos_bg / d bg
                let dbg = (&f_hat - &(cosines[c] * &dirs[c])) / bg_norm;
                grad_bg.scaled_add(coeff, &dbg);
            }
        }
    }
    Ok((loss / n as f64, grad_f, grad_bg))
}

/// Mean L1 between predicted and target deltas over foreground proposals.
/// Returns `(loss, grad wrt predictions)`; an empty batch contributes zero.
pub fn regression_loss(pred: &Array2<f64>, targets: &Array2<f64>) -> Result<(f64, Array2<f64>), Error> {
    let k = pred.nrows();
    if targets.nrows() != k || pred.ncols() != targets.ncols() {
        return Err(Error::InvalidArgument(format!(
            "regression_loss: pred {:?} vs targets {:?}",
            pred.dim(),
            targets.dim()
        )));
    }
    if k == 0 {
        return Ok((0.0, Array2::zeros(pred.raw_dim())));
    }
    let mut loss = 0.0;
    let mut grad = Array2::<f64>::zeros(pred.raw_dim());
    for i in 0..k {
        for j in 0..pred.ncols() {
            let diff = pred[[i, j]] - targets[[i, j]];
            loss += diff.abs();
            grad[[i, j]] = l1_sign(diff) / k as f64;
        }
    }
    Ok((loss / k as f64, grad))
}

/// Per-term loss breakdown for one training step. The overall objective is
/// `dist + cls + reg`; the RPN terms are inherited from the standard
/// two-stage recipe and reported (and optimized) separately.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossBreakdown {
    pub dist: f64,
    pub cls: f64,
    pub reg: f64,
    pub rpn_obj: f64,
    pub rpn_reg: f64,
}

impl LossBreakdown {
    /// The combined head loss.
    pub fn total(&self) -> f64 {
        self.dist + self.cls + self.reg
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn emb(name: &str, v: Vec<f64>) -> TextEmbedding {
        TextEmbedding {
            category_name: name.into(),
            values: Array1::from_vec(v),
        }
    }

    #[test]
    fn distillation_fixed_point_and_hand_example() {
        let c = array![[1.0, 2.0], [3.0, -1.0]];
        let (l, g) = distillation_loss(&c, &c, &[1.0, 0.7]).unwrap();
        assert_eq!(l, 0.0);
        assert_eq!(g.sum(), 0.0);

        // per-proposal L1 distances (2.0, 4.0), weights (1.0, 0.5)
        let model = array![[1.0, 1.0], [2.0, 2.0]];
        let clip = array![[2.0, 2.0], [4.0, 4.0]];
        let (l, _) = distillation_loss(&model, &clip, &[1.0, 0.5]).unwrap();
        assert_abs_diff_eq!(l, 2.0, epsilon = 1e-12);
    }

    #[test]
    fn distillation_linear_in_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Array2::from_shape_fn((4, 6), |_| rng.gen_range(-1.0..1.0));
        let b = Array2::from_shape_fn((4, 6), |_| rng.gen_range(-1.0..1.0));
        let w: Vec<f64> = (0..4).map(|_| rng.gen_range(0.1..1.0)).collect();
        let w3: Vec<f64> = w.iter().map(|x| 3.0 * x).collect();
        let (l1, _) = distillation_loss(&a, &b, &w).unwrap();
        let (l3, _) = distillation_loss(&a, &b, &w3).unwrap();
        assert_abs_diff_eq!(l3, 3.0 * l1, epsilon = 1e-12);
    }

    #[test]
    fn distillation_grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let clip = Array2::from_shape_fn((3, 5), |_| rng.gen_range(-1.0..1.0));
        let model = Array2::from_shape_fn((3, 5), |_| rng.gen_range(-1.0..1.0));
        let w: Vec<f64> = (0..3).map(|_| rng.gen_range(0.1..1.0)).collect();
        let (_, grad) = distillation_loss(&model, &clip, &w).unwrap();
        let h = 1e-5;
        for idx in [[0usize, 0usize], [1, 3], [2, 4]] {
            let mut mp = model.clone();
            mp[idx] += h;
            let mut mm = model.clone();
            mm[idx] -= h;
            let fd = (distillation_loss(&mp, &clip, &w).unwrap().0
                - distillation_loss(&mm, &clip, &w).unwrap().0)
                / (2.0 * h);
            let rel = (fd - grad[idx]).abs() / fd.abs().max(1e-12);
            assert!(rel < 1e-4, "at {idx:?}: fd {fd} vs {g}", g = grad[idx]);
        }
    }

    #[test]
    fn logits_layout_and_exact_match() {
        let base = vec![emb("a", vec![1.0, 0.0, 0.0]), emb("b", vec![0.0, 1.0, 0.0])];
        let novel = vec![emb("n", vec![0.0, 0.0, 1.0])];
        let bg = Array1::from_vec(vec![0.0, -1.0, 0.0]);
        let f = Array1::from_vec(vec![1.0, 0.0, 0.0]);
        let tau = 0.01;
        let train = cosine_logits(&f, &base, &novel, &bg, tau, ClassifierMode::Train).unwrap();
        assert_eq!(train.len(), 3);
        assert_abs_diff_eq!(train[0], 100.0, epsilon = 1e-9);
        let inf = cosine_logits(&f, &base, &novel, &bg, tau, ClassifierMode::Inference).unwrap();
        assert_eq!(inf.len(), base.len() + novel.len() + 1);
        // scale invariance of the feature
        let inf5 = cosine_logits(&(&f * 5.0), &base, &novel, &bg, tau, ClassifierMode::Inference)
            .unwrap();
        for (a, b) in inf.iter().zip(&inf5) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-9);
        }
    }

    #[test]
    fn ce_uniform_logits_is_ln_n() {
        // all dictionary entries identical: softmax uniform over n+1 slots
        let base = vec![emb("a", vec![1.0, 0.0]), emb("b", vec![1.0, 0.0])];
        let bg = Array1::from_vec(vec![1.0, 0.0]);
        let f = Array2::from_shape_vec((1, 2), vec![0.3, 0.4]).unwrap();
        let (l, _, _) = classification_loss(&f, &base, &bg, 0.01, &[0]).unwrap();
        assert_abs_diff_eq!(l, (3.0f64).ln(), epsilon = 1e-12);
    }

    #[test]
    fn ce_saturated_margin_is_near_zero() {
        let base = vec![emb("a", vec![1.0, 0.0])];
        let bg = Array1::from_vec(vec![0.0, 1.0]);
        let f = Array2::from_shape_vec((1, 2), vec![1.0, 0.0]).unwrap();
        let (l, _, _) = classification_loss(&f, &base, &bg, 0.01, &[0]).unwrap();
        assert!(l < 1e-9, "loss {l}");
    }

    #[test]
    fn ce_two_way_monotonicity() {
        let base = vec![emb("a", vec![1.0, 0.0])];
        let bg = Array1::from_vec(vec![0.0, 1.0]);
        // correct logit exceeds BG logit -> loss below ln 2
        let f = Array2::from_shape_vec((1, 2), vec![0.8, 0.2]).unwrap();
        let (l, _, _) = classification_loss(&f, &base, &bg, 1.0, &[0]).unwrap();
        assert!(l < (2.0f64).ln());
        let f2 = Array2::from_shape_vec((1, 2), vec![0.2, 0.8]).unwrap();
        let (l2, _, _) = classification_loss(&f2, &base, &bg, 1.0, &[0]).unwrap();
        assert!(l2 > (2.0f64).ln());
    }

    #[test]
    fn ce_label_out_of_range_rejected() {
        let base = vec![emb("a", vec![1.0, 0.0])];
        let bg = Array1::from_vec(vec![0.0, 1.0]);
        let f = Array2::from_shape_vec((1, 2), vec![0.8, 0.2]).unwrap();
        assert!(classification_loss(&f, &base, &bg, 1.0, &[2]).is_err());
    }

    #[test]
    fn ce_grads_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let base = vec![
            emb("a", (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect()),
            emb("b", (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect()),
        ];
        let bg = Array1::from_shape_fn(6, |_| rng.gen_range(-1.0..1.0));
        let f = Array2::from_shape_fn((3, 6), |_| rng.gen_range(-1.0..1.0));
        let labels = [0usize, 2, 1];
        let tau = 0.1;
        let (_, gf, gbg) = classification_loss(&f, &base, &bg, tau, &labels).unwrap();
        let h = 1e-5;
        for idx in [[0usize, 0usize], [1, 3], [2, 5]] {
            let mut fp = f.clone();
            fp[idx] += h;
            let mut fm = f.clone();
            fm[idx] -= h;
            let fd = (classification_loss(&fp, &base, &bg, tau, &labels).unwrap().0
                - classification_loss(&fm, &base, &bg, tau, &labels).unwrap().0)
                / (2.0 * h);
            let rel = (fd - gf[idx]).abs() / fd.abs().max(gf[idx].abs()).max(1e-10);
            assert!(rel < 1e-4, "feature grad at {idx:?}: fd {fd} vs {}", gf[idx]);
        }
        for j in [0usize, 2, 5] {
            let mut bp = bg.clone();
            bp[j] += h;
            let mut bm = bg.clone();
            bm[j] -= h;
            let fd = (classification_loss(&f, &base, &bp, tau, &labels).unwrap().0
                - classification_loss(&f, &base, &bm, tau, &labels).unwrap().0)
                / (2.0 * h);
            let rel = (fd - gbg[j]).abs() / fd.abs().max(gbg[j].abs()).max(1e-10);
            assert!(rel < 1e-4, "bg grad at {j}: fd {fd} vs {}", gbg[j]);
        }
    }

    #[test]
    fn regression_hand_examples() {
        let p = array![[0.0, 0.0, 0.0, 0.0]];
        let t = array![[0.5, 0.0, 0.0, 0.0]];
        let (l, g) = regression_loss(&p, &t).unwrap();
        assert_abs_diff_eq!(l, 0.5, epsilon = 1e-12);
        assert_eq!(g[[0, 0]], -1.0);
        let (l0, _) = regression_loss(&t, &t).unwrap();
        assert_eq!(l0, 0.0);
    }

    #[test]
    fn breakdown_sums_exactly() {
        let b = LossBreakdown {
            dist: 2.0,
            cls: 0.7,
            reg: 0.3,
            rpn_obj: 0.1,
            rpn_reg: 0.2,
        };
        assert_eq!(b.total(), 3.0);
        let no_dist = LossBreakdown { dist: 0.0, ..b };
        assert_eq!(no_dist.total(), b.cls + b.reg);
    }
}
