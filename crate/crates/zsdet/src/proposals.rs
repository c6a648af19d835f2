//! Offline distillation-region generation and the proposal store.
//!
//! For each image: anchor the (aspect-preserving resized) frame, map anchors
//! back to original coordinates, drop anchors overlapping base ground truth,
//! score the remainder with the encoder against the category dictionary
//! (objectness = clamped cosine of the best-matching category), apply NMS,
//! keep the top K, and append 1.2x-enlarged base GT boxes as
//! maximally-trusted regions. Boxes plus cached encoder features persist in
//! a two-file store: a JSON-lines manifest and a little-endian f32 feature
//! blob, checksummed.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array1;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{Annotation, DatasetSplit, ImageBuf, Role};
use crate::encoder::{Encoder, FeatureVector, TextEmbedding};
use crate::error::Error;
use crate::geometry::{
    enlarge, generate_anchors, iou, nms, resize_keep_ratio, AnchorConfig, Box2D, ResizeSpec,
};
use crate::rngutil::stage_rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProposalSource {
    Anchor,
    BaseGt,
}

/// A distillation region with its objectness weight and cached encoder
/// feature.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipProposal {
    pub bbox: Box2D,
    pub objectness: f64,
    /// Dictionary index of the argmax category; `None` for appended GT
    /// boxes, which are not scored.
    pub pred_category: Option<usize>,
    pub source: ProposalSource,
    pub feature: FeatureVector,
}

/// Which names form the scoring dictionary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "novel_names")]
pub enum DictionaryMode {
    /// Base plus novel names, the zero-shot premise.
    AllCategories,
    /// Base names plus an explicit novel subset (partial-dictionary runs).
    BasePlusListedNovel(Vec<String>),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ProposalGenConfig {
    pub anchors: AnchorConfig,
    pub resize: ResizeSpec,
    pub nms_iou: f64,
    pub top_k: usize,
    pub base_gt_filter_iou: f64,
    pub train_subset_size: usize,
    pub dictionary: DictionaryMode,
    pub gt_enlarge_factor: f64,
    pub tau: f64,
    pub seed: u64,
}

impl Default for ProposalGenConfig {
    fn default() -> Self {
        Self {
            anchors: AnchorConfig::default(),
            resize: ResizeSpec::default(),
            nms_iou: 0.5,
            top_k: 1000,
            base_gt_filter_iou: 0.7,
            train_subset_size: 200,
            dictionary: DictionaryMode::AllCategories,
            gt_enlarge_factor: 1.2,
            tau: 0.01,
            seed: 0,
        }
    }
}

/// Resolves the dictionary names for a split under the configured mode.
pub fn dictionary_names(split: &DatasetSplit, mode: &DictionaryMode) -> Vec<String> {
    match mode {
        DictionaryMode::AllCategories => split.all(),
        DictionaryMode::BasePlusListedNovel(listed) => {
            let mut names = split.base.clone();
            names.extend(listed.iter().cloned());
            names
        }
    }
}

/// Runs the full per-image generation pipeline. `annotations` are the
/// image's own annotations; only base-category ones participate (filtering
/// and GT appending).
/// Objectness of a region feature: the cosine against its best-matching
/// dictionary entry, clamped to `[0, 1]`. Background crops have a weak match
/// with every category and score near zero; object crops score near one.
pub fn region_objectness(
    feature: &FeatureVector,
    dictionary: &[TextEmbedding],
) -> Result<(usize, f64), Error> {
    if dictionary.is_empty() {
        return Err(Error::InvalidArgument("region_objectness: no dictionary".into()));
    }
    let mut pred = 0;
    let mut best = f64::NEG_INFINITY;
    for (i, e) in dictionary.iter().enumerate() {
        let c = crate::encoder::cosine(feature, &e.values)?;
        if c > best {
            best = c;
            pred = i;
        }
    }
    Ok((pred, best.clamp(0.0, 1.0)))
}

pub fn generate_clip_proposals(
    pixels: &ImageBuf,
    annotations: &[&Annotation],
    split: &DatasetSplit,
    enc: &dyn Encoder,
    dictionary: &[TextEmbedding],
    cfg: &ProposalGenConfig,
) -> Result<Vec<ClipProposal>, Error> {
    let (w, h) = (pixels.width, pixels.height);
    let image_bounds = Box2D::new(0.0, 0.0, w as f64, h as f64)?;
    let base_gt: Vec<&Box2D> = annotations
        .iter()
        .filter(|a| split.role(&a.category) == Some(Role::Base))
        .map(|a| &a.bbox)
        .collect();

    // anchors laid out on the resized frame, mapped back to original coords
    let (nw, nh, scale) = resize_keep_ratio(w, h, &cfg.resize);
    let mut anchors: Vec<Box2D> = Vec::new();
    for a in generate_anchors(nw as f64, nh as f64, &cfg.anchors) {
        let back = Box2D {
            x1: a.x1 / scale,
            y1: a.y1 / scale,
            x2: a.x2 / scale,
            y2: a.y2 / scale,
        };
        // mapping back can overshoot the right/bottom edge by rounding
        let clipped = Box2D {
            x1: back.x1.min(w as f64),
            y1: back.y1.min(h as f64),
            x2: back.x2.min(w as f64),
            y2: back.y2.min(h as f64),
        };
        if clipped.is_valid() && !base_gt.iter().any(|g| iou(&clipped, g) > cfg.base_gt_filter_iou)
        {
            anchors.push(clipped);
        }
    }

    // score surviving anchors with the encoder
    let mut scored: Vec<(Box2D, usize, f64, FeatureVector)> = Vec::with_capacity(anchors.len());
    for a in anchors {
        let feature = enc.encode_region(pixels, &a)?;
        let (pred, obj) = region_objectness(&feature, dictionary)?;
        scored.push((a, pred, obj, feature));
    }

    let boxes: Vec<Box2D> = scored.iter().map(|s| s.0).collect();
    let objectness: Vec<f64> = scored.iter().map(|s| s.2).collect();
    let kept = nms(&boxes, &objectness, cfg.nms_iou)?;

    let mut out: Vec<ClipProposal> = kept
        .into_iter()
        .take(cfg.top_k)
        .map(|i| ClipProposal {
            bbox: scored[i].0,
            objectness: scored[i].2,
            pred_category: Some(scored[i].1),
            source: ProposalSource::Anchor,
            feature: scored[i].3.clone(),
        })
        .collect();

    for g in base_gt {
        let enlarged = enlarge(g, cfg.gt_enlarge_factor, Some(&image_bounds))?;
        let feature = enc.encode_region(pixels, &enlarged)?;
        out.push(ClipProposal {
            bbox: enlarged,
            objectness: 1.0,
            pred_category: None,
            source: ProposalSource::BaseGt,
            feature,
        });
    }
    Ok(out)
}

/// Uniform sample without replacement of the per-image training subset,
/// seeded by (seed, image_id) so the subset is fixed across epochs.
/// Appended base-GT proposals are always included and count against the
/// budget.
pub fn sample_training_subset(
    proposals: &[ClipProposal],
    image_id: u64,
    cfg: &ProposalGenConfig,
) -> Vec<ClipProposal> {
    let (gt, anchors): (Vec<&ClipProposal>, Vec<&ClipProposal>) = proposals
        .iter()
        .partition(|p| p.source == ProposalSource::BaseGt);
    let budget = cfg.train_subset_size.saturating_sub(gt.len());
    let mut idx: Vec<usize> = (0..anchors.len()).collect();
    let mut rng = stage_rng(cfg.seed, "proposal-subset", image_id);
    idx.shuffle(&mut rng);
    idx.truncate(budget);
    idx.sort_unstable();
    let mut out: Vec<ClipProposal> = gt.into_iter().cloned().collect();
    out.extend(idx.into_iter().map(|i| anchors[i].clone()));
    out
}

// --- on-disk store ---

pub const STORE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct StoreHeader {
    format_version: u32,
    d: usize,
    checksum: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct StoreRecord {
    #[serde(rename = "box")]
    bbox: [f64; 4],
    objectness: f64,
    pred_category: Option<usize>,
    source: ProposalSource,
}

#[derive(Debug, Serialize, Deserialize)]
struct StoreImageLine {
    image_id: u64,
    d: usize,
    count: usize,
    feature_offset: u64,
    records: Vec<StoreRecord>,
}

/// The deserialized proposal store.
#[derive(Debug)]
pub struct ProposalStore {
    pub dim: usize,
    pub images: Vec<(u64, Vec<ClipProposal>)>,
}

impl ProposalStore {
    pub fn expect_dim(&self, expected: usize) -> Result<(), Error> {
        if self.dim != expected {
            return Err(Error::DimensionMismatch {
                expected,
                got: self.dim,
            });
        }
        Ok(())
    }

    pub fn proposals_for(&self, image_id: u64) -> Option<&[ClipProposal]> {
        self.images
            .iter()
            .find(|(id, _)| *id == image_id)
            .map(|(_, p)| p.as_slice())
    }
}

/// Blob path convention: the manifest path with `.bin` appended to its stem.
pub fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

/// Writes the manifest plus feature blob. Features are serialized as
/// little-endian f32 in record order; the manifest header carries a sha256
/// checksum of the blob.
pub fn write_store(
    manifest_path: &Path,
    dim: usize,
    images: &[(u64, Vec<ClipProposal>)],
) -> Result<(), Error> {
    let mut blob: Vec<u8> = Vec::new();
    let mut lines: Vec<String> = Vec::new();
    for (image_id, proposals) in images {
        let feature_offset = blob.len() as u64;
        let mut records = Vec::with_capacity(proposals.len());
        for p in proposals {
            if p.feature.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: p.feature.len(),
                });
            }
            for v in p.feature.iter() {
                blob.extend_from_slice(&(*v as f32).to_le_bytes());
            }
            records.push(StoreRecord {
                bbox: p.bbox.as_array(),
                objectness: p.objectness,
                pred_category: p.pred_category,
                source: p.source,
            });
        }
        lines.push(serde_json::to_string(&StoreImageLine {
            image_id: *image_id,
            d: dim,
            count: proposals.len(),
            feature_offset,
            records,
        })?);
    }
    let checksum = format!("{:x}", Sha256::digest(&blob));
    let header = serde_json::to_string(&StoreHeader {
        format_version: STORE_FORMAT_VERSION,
        d: dim,
        checksum,
    })?;
    let mut manifest = header;
    for l in lines {
        manifest.push('\n');
        manifest.push_str(&l);
    }
    manifest.push('\n');
    fs::write(manifest_path, manifest).map_err(|e| Error::io(manifest_path, e))?;
    let bp = blob_path(manifest_path);
    fs::write(&bp, blob).map_err(|e| Error::io(&bp, e))?;
    Ok(())
}

pub fn read_store(manifest_path: &Path) -> Result<ProposalStore, Error> {
    let text =
        fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let mut it = text.lines();
    let header_line = it
        .next()
        .ok_or_else(|| Error::Store("empty manifest".into()))?;
    let header: StoreHeader = serde_json::from_str(header_line)?;
    if header.format_version != STORE_FORMAT_VERSION {
        return Err(Error::Store(format!(
            "format version {} unsupported (expected {STORE_FORMAT_VERSION})",
            header.format_version
        )));
    }
    let bp = blob_path(manifest_path);
    let blob = fs::read(&bp).map_err(|e| Error::io(&bp, e))?;
    let checksum = format!("{:x}", Sha256::digest(&blob));
    if checksum != header.checksum {
        return Err(Error::Store(format!(
            "feature blob checksum mismatch: manifest {} vs blob {}",
            header.checksum, checksum
        )));
    }

    let mut images = Vec::new();
    for line in it.filter(|l| !l.trim().is_empty()) {
        let rec: StoreImageLine = serde_json::from_str(line)?;
        if rec.d != header.d {
            return Err(Error::Store(format!(
                "image {} dimension {} disagrees with header {}",
                rec.image_id, rec.d, header.d
            )));
        }
        if rec.records.len() != rec.count {
            return Err(Error::Store(format!(
                "image {}: count {} vs {} records",
                rec.image_id,
                rec.count,
                rec.records.len()
            )));
        }
        let need = rec.feature_offset as usize + rec.count * header.d * 4;
        if need > blob.len() {
            return Err(Error::Store(format!(
                "truncated feature blob: image {} needs {} bytes, blob has {}",
                rec.image_id,
                need,
                blob.len()
            )));
        }
        let mut proposals = Vec::with_capacity(rec.count);
        for (i, r) in rec.records.iter().enumerate() {
            let start = rec.feature_offset as usize + i * header.d * 4;
            let mut feature = Array1::<f64>::zeros(header.d);
            for j in 0..header.d {
                let o = start + j * 4;
                let bits = [blob[o], blob[o + 1], blob[o + 2], blob[o + 3]];
                feature[j] = f32::from_le_bytes(bits) as f64;
            }
            proposals.push(ClipProposal {
                bbox: Box2D::new(r.bbox[0], r.bbox[1], r.bbox[2], r.bbox[3])?,
                objectness: r.objectness,
                pred_category: r.pred_category,
                source: r.source,
                feature,
            });
        }
        images.push((rec.image_id, proposals));
    }
    Ok(ProposalStore {
        dim: header.d,
        images,
    })
}
