//! Detection evaluation (101-point interpolated average precision at a
//! fixed IoU threshold) and proposal coverage statistics.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{Annotation, DatasetSplit, Role};
use crate::detector::infer::Detection;
use crate::error::Error;
use crate::geometry::{iogt, iou, Box2D};

/// Per-category evaluation outcome.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CategoryEval {
    pub category: String,
    pub role: Option<Role>,
    pub ap: f64,
    pub n_gt: usize,
    pub n_det: usize,
}

/// Aggregates are unweighted means over the categories that appear in the
/// ground truth; a group absent from the GT reports `None`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalResult {
    pub iou_threshold: f64,
    pub per_category: Vec<CategoryEval>,
    pub base_ap: Option<f64>,
    pub novel_ap: Option<f64>,
    pub overall_ap: f64,
}

/// Greedy matching per image: detections in descending score order claim
/// the unmatched GT with the highest IoU, counting a true positive when
/// that IoU reaches the threshold.
fn category_pr(
    dets: &[&Detection],
    gts: &[&Annotation],
    iou_threshold: f64,
) -> (Vec<bool>, usize) {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| {
        dets[j]
            .score
            .partial_cmp(&dets[i].score)
            .unwrap()
            .then(dets[i].image_id.cmp(&dets[j].image_id))
    });
    let mut claimed = vec![false; gts.len()];
    let mut tp = Vec::with_capacity(dets.len());
    for &di in &order {
        let d = dets[di];
        let mut best = 0.0;
        let mut best_j = None;
        for (j, g) in gts.iter().enumerate() {
            if claimed[j] || g.image_id != d.image_id {
                continue;
            }
            let v = iou(&d.bbox, &g.bbox);
            if v > best {
                best = v;
                best_j = Some(j);
            }
        }
        match best_j {
            Some(j) if best >= iou_threshold => {
                claimed[j] = true;
                tp.push(true);
            }
            _ => tp.push(false),
        }
    }
    (tp, gts.len())
}

/// 101-point interpolated AP from the score-ordered TP flags.
fn interpolated_ap(tp: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut recalls = Vec::with_capacity(tp.len());
    let mut precisions = Vec::with_capacity(tp.len());
    let mut n_tp = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        if t {
            n_tp += 1;
        }
        recalls.push(n_tp as f64 / n_gt as f64);
        precisions.push(n_tp as f64 / (i + 1) as f64);
    }
    let mut sum = 0.0;
    for k in 0..=100 {
        let r = k as f64 / 100.0;
        let p = recalls
            .iter()
            .zip(&precisions)
            .filter(|(rc, _)| **rc >= r - 1e-12)
            .map(|(_, p)| *p)
            .fold(0.0f64, f64::max);
        sum += p;
    }
    sum / 101.0
}

pub fn evaluate_detections(
    dets: &[Detection],
    gts: &[Annotation],
    split: &DatasetSplit,
    iou_threshold: f64,
) -> EvalResult {
    let mut categories: Vec<String> = Vec::new();
    for g in gts {
        if !categories.contains(&g.category) {
            categories.push(g.category.clone());
        }
    }
    categories.sort();

    let mut per_category = Vec::new();
    for cat in &categories {
        let cat_dets: Vec<&Detection> = dets.iter().filter(|d| &d.category == cat).collect();
        let cat_gts: Vec<&Annotation> = gts.iter().filter(|g| &g.category == cat).collect();
        let (tp, n_gt) = category_pr(&cat_dets, &cat_gts, iou_threshold);
        per_category.push(CategoryEval {
            category: cat.clone(),
            role: split.role(cat),
            ap: interpolated_ap(&tp, n_gt),
            n_gt,
            n_det: cat_dets.len(),
        });
    }

    let group_mean = |role: Role| -> Option<f64> {
        let aps: Vec<f64> = per_category
            .iter()
            .filter(|c| c.role == Some(role))
            .map(|c| c.ap)
            .collect();
        if aps.is_empty() {
            None
        } else {
            Some(aps.iter().sum::<f64>() / aps.len() as f64)
        }
    };
    let overall = if per_category.is_empty() {
        0.0
    } else {
        per_category.iter().map(|c| c.ap).sum::<f64>() / per_category.len() as f64
    };
    EvalResult {
        iou_threshold,
        base_ap: group_mean(Role::Base),
        novel_ap: group_mean(Role::Novel),
        overall_ap: overall,
        per_category,
    }
}

/// Coverage of the ground truth by a proposal set, measured with the
/// intersection-over-GT-area ratio.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IoGtReport {
    pub n_proposals: usize,
    pub n_gt: usize,
    /// Best IoGT reached for each GT box.
    pub per_gt_best: Vec<f64>,
    pub mean_best_iogt: f64,
    /// GT boxes whose best IoGT reaches 0.5 / 0.8.
    pub gt_covered_05: usize,
    pub gt_covered_08: usize,
    /// Proposals whose max IoGT over the GT set reaches 0.5 / 0.8.
    pub proposals_ge_05: usize,
    pub proposals_ge_08: usize,
}

pub fn iogt_statistics(proposals: &[Box2D], gts: &[Box2D]) -> IoGtReport {
    let mut per_gt_best = vec![0.0f64; gts.len()];
    let mut prop_max = vec![0.0f64; proposals.len()];
    for (pi, p) in proposals.iter().enumerate() {
        for (gi, g) in gts.iter().enumerate() {
            let v = iogt(p, g);
            per_gt_best[gi] = per_gt_best[gi].max(v);
            prop_max[pi] = prop_max[pi].max(v);
        }
    }
    let mean = if per_gt_best.is_empty() {
        0.0
    } else {
        per_gt_best.iter().sum::<f64>() / per_gt_best.len() as f64
    };
    IoGtReport {
        n_proposals: proposals.len(),
        n_gt: gts.len(),
        mean_best_iogt: mean,
        gt_covered_05: per_gt_best.iter().filter(|v| **v >= 0.5).count(),
        gt_covered_08: per_gt_best.iter().filter(|v| **v >= 0.8).count(),
        proposals_ge_05: prop_max.iter().filter(|v| **v >= 0.5).count(),
        proposals_ge_08: prop_max.iter().filter(|v| **v >= 0.8).count(),
        per_gt_best,
    }
}

/// Per-image IoGT aggregation: proposals and GTs grouped by image id.
pub fn iogt_statistics_by_image(
    proposals: &BTreeMap<u64, Vec<Box2D>>,
    gts: &BTreeMap<u64, Vec<Box2D>>,
) -> IoGtReport {
    let mut all = IoGtReport {
        n_proposals: 0,
        n_gt: 0,
        per_gt_best: Vec::new(),
        mean_best_iogt: 0.0,
        gt_covered_05: 0,
        gt_covered_08: 0,
        proposals_ge_05: 0,
        proposals_ge_08: 0,
    };
    let empty: Vec<Box2D> = Vec::new();
    for (image_id, g) in gts {
        let p = proposals.get(image_id).unwrap_or(&empty);
        let r = iogt_statistics(p, g);
        all.n_proposals += r.n_proposals;
        all.n_gt += r.n_gt;
        all.per_gt_best.extend(r.per_gt_best);
        all.gt_covered_05 += r.gt_covered_05;
        all.gt_covered_08 += r.gt_covered_08;
        all.proposals_ge_05 += r.proposals_ge_05;
        all.proposals_ge_08 += r.proposals_ge_08;
    }
    for (image_id, p) in proposals {
        if !gts.contains_key(image_id) {
            all.n_proposals += p.len();
        }
    }
    all.mean_best_iogt = if all.per_gt_best.is_empty() {
        0.0
    } else {
        all.per_gt_best.iter().sum::<f64>() / all.per_gt_best.len() as f64
    };
    all
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

pub fn emit_eval_report(path: &Path, result: &EvalResult, format: ReportFormat) -> Result<(), Error> {
    let text = match format {
        ReportFormat::Json => {
            let mut s = serde_json::to_string_pretty(result)?;
            s.push('\n');
            s
        }
        ReportFormat::Csv => {
            let mut s = String::from("category,role,ap,n_gt,n_det\n");
            for c in &result.per_category {
                let role = match c.role {
                    Some(Role::Base) => "base",
                    Some(Role::Novel) => "novel",
                    None => "unknown",
                };
                s.push_str(&format!(
                    "{},{},{:.6},{},{}\n",
                    c.category, role, c.ap, c.n_gt, c.n_det
                ));
            }
            if let Some(v) = result.base_ap {
                s.push_str(&format!("__base_mean__,base,{v:.6},,\n"));
            }
            if let Some(v) = result.novel_ap {
                s.push_str(&format!("__novel_mean__,novel,{v:.6},,\n"));
            }
            s.push_str(&format!("__overall_mean__,all,{:.6},,\n", result.overall_ap));
            s
        }
    };
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn emit_iogt_report(path: &Path, report: &IoGtReport, format: ReportFormat) -> Result<(), Error> {
    let text = match format {
        ReportFormat::Json => {
            let mut s = serde_json::to_string_pretty(report)?;
            s.push('\n');
            s
        }
        ReportFormat::Csv => {
            let mut s = String::from("metric,value\n");
            s.push_str(&format!("n_proposals,{}\n", report.n_proposals));
            s.push_str(&format!("n_gt,{}\n", report.n_gt));
            s.push_str(&format!("mean_best_iogt,{:.6}\n", report.mean_best_iogt));
            s.push_str(&format!("gt_covered_05,{}\n", report.gt_covered_05));
            s.push_str(&format!("gt_covered_08,{}\n", report.gt_covered_08));
            s.push_str(&format!("proposals_ge_05,{}\n", report.proposals_ge_05));
            s.push_str(&format!("proposals_ge_08,{}\n", report.proposals_ge_08));
            s
        }
    };
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ann(id: u64, image_id: u64, cat: &str, b: [f64; 4]) -> Annotation {
        Annotation {
            id,
            image_id,
            category: cat.into(),
            bbox: Box2D::new(b[0], b[1], b[2], b[3]).unwrap(),
        }
    }

    fn det(image_id: u64, cat: &str, score: f64, b: [f64; 4]) -> Detection {
        Detection {
            image_id,
            category: cat.into(),
            score,
            bbox: Box2D::new(b[0], b[1], b[2], b[3]).unwrap(),
        }
    }

    fn split() -> DatasetSplit {
        DatasetSplit::new(vec!["red-square".into()], vec!["blue-triangle".into()]).unwrap()
    }

    #[test]
    fn perfect_detections_score_ap_one() {
        let gts = vec![
            ann(1, 0, "red-square", [0.0, 0.0, 10.0, 10.0]),
            ann(2, 1, "red-square", [5.0, 5.0, 20.0, 20.0]),
        ];
        let dets = vec![
            det(0, "red-square", 0.9, [0.0, 0.0, 10.0, 10.0]),
            det(1, "red-square", 0.8, [5.0, 5.0, 20.0, 20.0]),
        ];
        let r = evaluate_detections(&dets, &gts, &split(), 0.5);
        assert_eq!(r.overall_ap, 1.0);
        assert_eq!(r.base_ap, Some(1.0));
        assert_eq!(r.novel_ap, None);
    }

    #[test]
    fn hand_computed_interpolated_ap() {
        // 2 GT, detections ordered TP, FP, TP:
        //   recall 0.5 at precision 1.0, recall 1.0 at precision 2/3.
        // 101-point AP = (51 * 1.0 + 50 * 2/3) / 101.
        let gts = vec![
            ann(1, 0, "red-square", [0.0, 0.0, 10.0, 10.0]),
            ann(2, 0, "red-square", [50.0, 50.0, 60.0, 60.0]),
        ];
        let dets = vec![
            det(0, "red-square", 0.9, [0.0, 0.0, 10.0, 10.0]),
            det(0, "red-square", 0.8, [100.0, 100.0, 110.0, 110.0]),
            det(0, "red-square", 0.7, [50.0, 50.0, 60.0, 60.0]),
        ];
        let r = evaluate_detections(&dets, &gts, &split(), 0.5);
        let expected = (51.0 + 50.0 * (2.0 / 3.0)) / 101.0;
        assert!((r.overall_ap - expected).abs() < 1e-12);
    }

    #[test]
    fn duplicates_never_increase_ap() {
        let gts = vec![ann(1, 0, "red-square", [0.0, 0.0, 10.0, 10.0])];
        let dets = vec![det(0, "red-square", 0.9, [0.0, 0.0, 10.0, 10.0])];
        let base = evaluate_detections(&dets, &gts, &split(), 0.5).overall_ap;
        let mut dup = dets.clone();
        dup.push(det(0, "red-square", 0.5, [0.1, 0.1, 10.1, 10.1]));
        dup.push(det(0, "red-square", 0.4, [0.2, 0.2, 10.2, 10.2]));
        let with_dup = evaluate_detections(&dup, &gts, &split(), 0.5).overall_ap;
        assert!(with_dup <= base + 1e-12);
    }

    #[test]
    fn ap_invariant_under_monotone_score_transform() {
        let gts = vec![
            ann(1, 0, "red-square", [0.0, 0.0, 10.0, 10.0]),
            ann(2, 1, "red-square", [0.0, 0.0, 10.0, 10.0]),
        ];
        let dets = vec![
            det(0, "red-square", 0.9, [0.0, 0.0, 10.0, 10.0]),
            det(1, "red-square", 0.6, [30.0, 30.0, 40.0, 40.0]),
            det(1, "red-square", 0.3, [0.0, 0.0, 10.0, 10.0]),
        ];
        let a = evaluate_detections(&dets, &gts, &split(), 0.5).overall_ap;
        let squashed: Vec<Detection> = dets
            .iter()
            .map(|d| Detection {
                score: d.score * d.score * 0.5 + 0.1,
                ..d.clone()
            })
            .collect();
        let b = evaluate_detections(&squashed, &gts, &split(), 0.5).overall_ap;
        assert_eq!(a, b);
    }

    #[test]
    fn matching_respects_image_boundaries() {
        let gts = vec![ann(1, 0, "red-square", [0.0, 0.0, 10.0, 10.0])];
        // same box but in a different image: never a match
        let dets = vec![det(1, "red-square", 0.9, [0.0, 0.0, 10.0, 10.0])];
        let r = evaluate_detections(&dets, &gts, &split(), 0.5);
        assert_eq!(r.overall_ap, 0.0);
    }

    #[test]
    fn iogt_stats_on_containment() {
        // proposal fully containing the GT has IoGT 1 regardless of its size
        let gt = Box2D::new(10.0, 10.0, 20.0, 20.0).unwrap();
        let big = Box2D::new(0.0, 0.0, 100.0, 100.0).unwrap();
        let half = Box2D::new(10.0, 10.0, 15.0, 20.0).unwrap();
        let r = iogt_statistics(&[big, half], &[gt]);
        assert_eq!(r.per_gt_best, vec![1.0]);
        assert_eq!(r.proposals_ge_05, 2);
        assert_eq!(r.proposals_ge_08, 1);
        assert_eq!(r.gt_covered_08, 1);
    }

    #[test]
    fn reports_write_both_formats() {
        let dir = tempfile::tempdir().unwrap();
        let gts = vec![ann(1, 0, "red-square", [0.0, 0.0, 10.0, 10.0])];
        let dets = vec![det(0, "red-square", 0.9, [0.0, 0.0, 10.0, 10.0])];
        let r = evaluate_detections(&dets, &gts, &split(), 0.5);
        let csv = dir.path().join("eval.csv");
        let json = dir.path().join("eval.json");
        emit_eval_report(&csv, &r, ReportFormat::Csv).unwrap();
        emit_eval_report(&json, &r, ReportFormat::Json).unwrap();
        let text = std::fs::read_to_string(&csv).unwrap();
        assert!(text.starts_with("category,role,ap,n_gt,n_det"));
        assert!(text.contains("red-square,base,1.000000"));
        let parsed: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
        assert_eq!(parsed["overall_ap"], 1.0);
    }
}
