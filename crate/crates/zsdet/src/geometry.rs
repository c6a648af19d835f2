//! Box arithmetic, anchor generation, overlap measures, NMS and the
//! aspect-preserving resize rule.
//!
//! Everything here is pure and deterministic; the rest of the pipeline treats
//! this module as its geometric substrate. Coordinates are continuous pixel
//! values in corner convention; rounding to integer pixels happens only when a
//! region is actually cropped out of an image.

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// Axis-aligned rectangle in pixel coordinates, corner convention.
///
/// Invariant: `x1 < x2` and `y1 < y2`, so the area is strictly positive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box2D {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl Box2D {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, Error> {
        let b = Self { x1, y1, x2, y2 };
        if b.is_valid() {
            Ok(b)
        } else {
            Err(Error::InvalidBox { x1, y1, x2, y2 })
        }
    }

    /// Builds a box from `[x, y, w, h]` as used by COCO-style annotations.
    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Result<Self, Error> {
        Self::new(x, y, x + w, y + h)
    }

    pub fn is_valid(&self) -> bool {
        self.x1.is_finite()
            && self.y1.is_finite()
            && self.x2.is_finite()
            && self.y2.is_finite()
            && self.x1 < self.x2
            && self.y1 < self.y2
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    /// Intersection area with another box; zero when disjoint.
    pub fn intersection_area(&self, other: &Box2D) -> f64 {
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        w * h
    }

    /// Clips the box to `bounds`, which may produce an invalid (empty) box.
    fn clipped_to(&self, bounds: &Box2D) -> Box2D {
        Box2D {
            x1: self.x1.max(bounds.x1).min(bounds.x2),
            y1: self.y1.max(bounds.y1).min(bounds.y2),
            x2: self.x2.min(bounds.x2).max(bounds.x1),
            y2: self.y2.min(bounds.y2).max(bounds.y1),
        }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

/// Anchor grid configuration: one anchor per (cell, size, ratio) triple.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AnchorConfig {
    /// Grid stride in pixels.
    pub stride: f64,
    /// Anchor side lengths in pixels (square at ratio 1).
    pub sizes: Vec<f64>,
    /// Aspect values h/w; area is preserved across ratios.
    pub ratios: Vec<f64>,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        Self {
            stride: 32.0,
            sizes: vec![32.0, 64.0, 128.0, 256.0, 512.0],
            ratios: vec![1.0, 2.0, 0.5],
        }
    }
}

/// Aspect-preserving resize limits: the long edge is capped at
/// `max_long_edge` and the short edge at `max_short_edge`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct ResizeSpec {
    pub max_long_edge: f64,
    pub max_short_edge: f64,
}

impl Default for ResizeSpec {
    fn default() -> Self {
        Self {
            max_long_edge: 1333.0,
            max_short_edge: 800.0,
        }
    }
}

/// Scales a box about its center by `factor`, optionally clipping to `bounds`.
///
/// Errors if the clipped result degenerates to zero area.
///
/// ```
/// use zsdet::geometry::{enlarge, Box2D};
/// let b = Box2D::new(10.0, 10.0, 30.0, 30.0).unwrap();
/// let e = enlarge(&b, 1.2, None).unwrap();
/// assert_eq!(e.as_array(), [8.0, 8.0, 32.0, 32.0]);
/// ```
pub fn enlarge(b: &Box2D, factor: f64, bounds: Option<&Box2D>) -> Result<Box2D, Error> {
    if !(factor > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "enlarge factor must be positive, got {factor}"
        )));
    }
    let (cx, cy) = b.center();
    let hw = b.width() * factor / 2.0;
    let hh = b.height() * factor / 2.0;
    let scaled = Box2D {
        x1: cx - hw,
        y1: cy - hh,
        x2: cx + hw,
        y2: cy + hh,
    };
    let out = match bounds {
        Some(bd) => scaled.clipped_to(bd),
        None => scaled,
    };
    if out.is_valid() {
        Ok(out)
    } else {
        Err(Error::DegenerateCrop {
            x1: out.x1,
            y1: out.y1,
            x2: out.x2,
            y2: out.y2,
        })
    }
}

/// Intersection over union. Symmetric, in `[0, 1]`, zero when disjoint.
pub fn iou(a: &Box2D, b: &Box2D) -> f64 {
    let inter = a.intersection_area(b);
    if inter == 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

/// Intersection over the ground-truth area: how much of `gt` the proposal
/// covers. Asymmetric; 1.0 when `gt` is fully contained in `proposal`.
pub fn iogt(proposal: &Box2D, gt: &Box2D) -> f64 {
    proposal.intersection_area(gt) / gt.area()
}

/// Greedy NMS by descending score; equal scores break toward the lower
/// original index. Returns kept indices in selection order. A box is
/// suppressed when its IoU with an already-kept box exceeds `iou_threshold`.
pub fn nms(boxes: &[Box2D], scores: &[f64], iou_threshold: f64) -> Result<Vec<usize>, Error> {
    if boxes.len() != scores.len() {
        return Err(Error::InvalidArgument(format!(
            "nms: {} boxes vs {} scores",
            boxes.len(),
            scores.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidArgument("nms: non-finite score".into()));
    }
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    // stable sort keeps lower index first among equal scores
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    let mut kept: Vec<usize> = Vec::new();
    for &i in &order {
        if kept.iter().all(|&k| iou(&boxes[i], &boxes[k]) <= iou_threshold) {
            kept.push(i);
        }
    }
    Ok(kept)
}

/// Generates the anchor grid for an `image_w` x `image_h` frame.
///
/// Cell centers sit at `(stride * (i + 0.5), stride * (j + 0.5))` for every
/// cell at least partially inside the image. For each size `s` and ratio
/// `r = h/w` the anchor is `s/sqrt(r)` wide and `s*sqrt(r)` tall, clipped to
/// the image; anchors that degenerate under clipping are dropped.
pub fn generate_anchors(image_w: f64, image_h: f64, cfg: &AnchorConfig) -> Vec<Box2D> {
    let bounds = Box2D {
        x1: 0.0,
        y1: 0.0,
        x2: image_w,
        y2: image_h,
    };
    let nx = (image_w / cfg.stride).ceil() as usize;
    let ny = (image_h / cfg.stride).ceil() as usize;
    let mut out = Vec::with_capacity(nx * ny * cfg.sizes.len() * cfg.ratios.len());
    for j in 0..ny {
        for i in 0..nx {
            let cx = cfg.stride * (i as f64 + 0.5);
            let cy = cfg.stride * (j as f64 + 0.5);
            for &s in &cfg.sizes {
                for &r in &cfg.ratios {
                    let w = s / r.sqrt();
                    let h = s * r.sqrt();
                    let a = Box2D {
                        x1: cx - w / 2.0,
                        y1: cy - h / 2.0,
                        x2: cx + w / 2.0,
                        y2: cy + h / 2.0,
                    }
                    .clipped_to(&bounds);
                    if a.is_valid() {
                        out.push(a);
                    }
                }
            }
        }
    }
    out
}

/// Count of grid anchors before clipping drops degenerate boxes.
pub fn anchor_grid_count(image_w: f64, image_h: f64, cfg: &AnchorConfig) -> usize {
    let nx = (image_w / cfg.stride).ceil() as usize;
    let ny = (image_h / cfg.stride).ceil() as usize;
    nx * ny * cfg.sizes.len() * cfg.ratios.len()
}

/// Aspect-preserving resize: one scale bound by both edge limits, dimensions
/// rounded to the nearest integer.
///
/// ```
/// use zsdet::geometry::{resize_keep_ratio, ResizeSpec};
/// let (w, h, s) = resize_keep_ratio(2666, 1600, &ResizeSpec::default());
/// assert_eq!((w, h), (1333, 800));
/// assert!((s - 0.5).abs() < 1e-12);
/// ```
pub fn resize_keep_ratio(w: u32, h: u32, spec: &ResizeSpec) -> (u32, u32, f64) {
    let (long, short) = if w >= h { (w as f64, h as f64) } else { (h as f64, w as f64) };
    let scale = (spec.max_long_edge / long).min(spec.max_short_edge / short);
    let nw = (w as f64 * scale).round().max(1.0) as u32;
    let nh = (h as f64 * scale).round().max(1.0) as u32;
    (nw, nh, scale)
}
