//! Proposal-to-ground-truth assignment and foreground-biased sampling for
//! the detection heads.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::geometry::{iou, Box2D};

/// One sampled training proposal: its box, a class label (`n_base` means
/// background), and the index of the matched GT for foreground samples.
#[derive(Debug, Clone)]
pub struct RoiSample {
    pub bbox: Box2D,
    pub label: usize,
    pub gt_index: Option<usize>,
}

/// Assigns each proposal (with GT boxes appended so every object always has
/// at least one foreground sample) to its best-overlapping GT, then samples
/// up to `batch` regions keeping at most `fg_fraction` foreground.
///
/// Proposals that match no GT but sit on an `ignore_boxes` entry (IoU at or
/// above 0.5) are excluded entirely: they cover regions the image encoder
/// rates as object-like, so treating them as background would contradict the
/// distillation target for unannotated objects.
#[allow(clippy::too_many_arguments)]
pub fn assign_and_sample(
    proposals: &[Box2D],
    gt_boxes: &[Box2D],
    gt_labels: &[usize],
    ignore_boxes: &[Box2D],
    n_base: usize,
    fg_iou: f64,
    batch: usize,
    fg_fraction: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<RoiSample> {
    assert_eq!(gt_boxes.len(), gt_labels.len());
    let mut all: Vec<RoiSample> = Vec::new();
    for b in proposals.iter().chain(gt_boxes.iter()) {
        let mut best = 0.0;
        let mut best_j = None;
        for (j, g) in gt_boxes.iter().enumerate() {
            let v = iou(b, g);
            if v > best {
                best = v;
                best_j = Some(j);
            }
        }
        let (label, gt_index) = match best_j {
            Some(j) if best >= fg_iou => (gt_labels[j], Some(j)),
            _ => {
                if ignore_boxes.iter().any(|g| iou(b, g) >= 0.5) {
                    continue;
                }
                (n_base, None)
            }
        };
        all.push(RoiSample {
            bbox: *b,
            label,
            gt_index,
        });
    }

    let mut fg: Vec<usize> = Vec::new();
    let mut bg: Vec<usize> = Vec::new();
    for (i, s) in all.iter().enumerate() {
        if s.gt_index.is_some() {
            fg.push(i);
        } else {
            bg.push(i);
        }
    }
    fg.shuffle(rng);
    bg.shuffle(rng);
    let n_fg = fg.len().min(((batch as f64) * fg_fraction).round() as usize);
    fg.truncate(n_fg.max(1).min(fg.len()));
    bg.truncate(batch - fg.len().min(batch));

    let mut picked: Vec<usize> = fg.into_iter().chain(bg).collect();
    picked.sort_unstable();
    picked.into_iter().map(|i| all[i].clone()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;

    #[test]
    fn gt_boxes_always_foreground() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let gts = vec![Box2D::new(10.0, 10.0, 30.0, 30.0).unwrap()];
        let samples = assign_and_sample(&[], &gts, &[2], &[], 3, 0.5, 16, 0.25, &mut rng);
        assert_eq!(samples.len(), 1);
        assert_eq!(samples[0].label, 2);
        assert_eq!(samples[0].gt_index, Some(0));
    }

    #[test]
    fn far_proposals_become_background() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let gts = vec![Box2D::new(0.0, 0.0, 10.0, 10.0).unwrap()];
        let props = vec![Box2D::new(50.0, 50.0, 70.0, 70.0).unwrap()];
        let samples = assign_and_sample(&props, &gts, &[0], &[], 3, 0.5, 16, 0.25, &mut rng);
        let bgs: Vec<_> = samples.iter().filter(|s| s.gt_index.is_none()).collect();
        assert_eq!(bgs.len(), 1);
        assert_eq!(bgs[0].label, 3);
    }

    #[test]
    fn fg_fraction_caps_foreground() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let gt = Box2D::new(10.0, 10.0, 50.0, 50.0).unwrap();
        // many near-duplicates of the GT plus many far boxes
        let mut props = Vec::new();
        for i in 0..40 {
            let d = i as f64 * 0.1;
            props.push(Box2D::new(10.0 + d, 10.0, 50.0 + d, 50.0).unwrap());
            props.push(Box2D::new(100.0 + d, 100.0, 120.0 + d, 120.0).unwrap());
        }
        let samples = assign_and_sample(&props, &[gt], &[1], &[], 2, 0.5, 32, 0.25, &mut rng);
        assert_eq!(samples.len(), 32);
        let n_fg = samples.iter().filter(|s| s.gt_index.is_some()).count();
        assert_eq!(n_fg, 8);
    }
}
