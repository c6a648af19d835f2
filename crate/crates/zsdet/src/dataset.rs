//! COCO-style annotation ingestion, base/novel split management, image
//! filtering rules, and a synthetic toy-dataset generator.
//!
//! The toy generator draws parametric colored shapes (squares, circles,
//! triangles) on a textured gray background. Category names follow the
//! `"<color>-<shape>"` convention (for example `red-square`), which the mock
//! encoder also understands, so cosine classification on toy data is
//! genuinely informative.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::geometry::Box2D;
use crate::rngutil::stage_rng;

/// COCO size-bin convention on box area.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SizeBin {
    Small,
    Medium,
    Large,
}

impl SizeBin {
    pub fn from_area(area: f64) -> Self {
        if area < 32.0 * 32.0 {
            SizeBin::Small
        } else if area < 96.0 * 96.0 {
            SizeBin::Medium
        } else {
            SizeBin::Large
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            SizeBin::Small => "S",
            SizeBin::Medium => "M",
            SizeBin::Large => "L",
        }
    }
}

/// One object annotation in corner-convention pixel coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Annotation {
    pub id: u64,
    pub image_id: u64,
    pub category: String,
    pub bbox: Box2D,
}

impl Annotation {
    pub fn size_bin(&self) -> SizeBin {
        SizeBin::from_area(self.bbox.area())
    }
}

/// Raw RGB pixel buffer, row-major, 3 bytes per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuf {
    pub width: u32,
    pub height: u32,
    pub data: Vec<u8>,
}

impl ImageBuf {
    pub fn filled(width: u32, height: u32, rgb: [u8; 3]) -> Self {
        let mut data = Vec::with_capacity((width * height * 3) as usize);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Self { width, height, data }
    }

    pub fn get(&self, x: u32, y: u32) -> [u8; 3] {
        let i = ((y * self.width + x) * 3) as usize;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, x: u32, y: u32, rgb: [u8; 3]) {
        let i = ((y * self.width + x) * 3) as usize;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }
}

/// Where an image's pixels live: on disk or embedded (toy/test data).
#[derive(Debug, Clone, PartialEq)]
pub enum PixelSource {
    Path(PathBuf),
    Embedded(ImageBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub image_id: u64,
    pub width: u32,
    pub height: u32,
    pub source: PixelSource,
}

impl ImageRecord {
    pub fn load_pixels(&self) -> Result<ImageBuf, Error> {
        match &self.source {
            PixelSource::Embedded(buf) => Ok(buf.clone()),
            PixelSource::Path(p) => {
                let img = image::open(p)?.into_rgb8();
                Ok(ImageBuf {
                    width: img.width(),
                    height: img.height(),
                    data: img.into_raw(),
                })
            }
        }
    }
}

/// Which side of the zero-shot partition a category is on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Base,
    Novel,
}

/// Base/novel category partition. Categories keep their listed order; the
/// "general" dictionary is base names followed by novel names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub base: Vec<String>,
    pub novel: Vec<String>,
}

impl DatasetSplit {
    pub fn new(base: Vec<String>, novel: Vec<String>) -> Result<Self, Error> {
        for b in &base {
            if novel.iter().any(|n| n == b) {
                return Err(Error::AmbiguousCategory(b.clone()));
            }
        }
        Ok(Self { base, novel })
    }

    pub fn role(&self, category: &str) -> Option<Role> {
        if self.base.iter().any(|c| c == category) {
            Some(Role::Base)
        } else if self.novel.iter().any(|c| c == category) {
            Some(Role::Novel)
        } else {
            None
        }
    }

    /// All category names, base first then novel.
    pub fn all(&self) -> Vec<String> {
        self.base.iter().chain(self.novel.iter()).cloned().collect()
    }

    pub fn load_json(path: &Path) -> Result<Self, Error> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let raw: DatasetSplit = serde_json::from_str(&text)?;
        Self::new(raw.base, raw.novel)
    }

    pub fn save_json(&self, path: &Path) -> Result<(), Error> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// A loaded dataset: immutable after load, shareable across workers.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Vec<ImageRecord>,
    pub annotations: Vec<Annotation>,
    pub split: DatasetSplit,
}

impl Dataset {
    pub fn annotations_for(&self, image_id: u64) -> Vec<&Annotation> {
        self.annotations.iter().filter(|a| a.image_id == image_id).collect()
    }
}

// --- COCO json schema ---

#[derive(Debug, Serialize, Deserialize)]
struct CocoImage {
    id: u64,
    width: u32,
    height: u32,
    file_name: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct CocoAnnotation {
    id: u64,
    image_id: u64,
    category_id: u32,
    bbox: [f64; 4],
    area: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct CocoCategory {
    id: u32,
    name: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct CocoFile {
    images: Vec<CocoImage>,
    annotations: Vec<CocoAnnotation>,
    categories: Vec<CocoCategory>,
}

/// Loads a COCO-style annotation file and partitions its categories per the
/// split. Boxes are converted from `[x, y, w, h]` to corner convention.
/// Every category referenced by the file must appear on exactly one side of
/// the split, and every split name must exist in the file.
pub fn load_coco_json(path: &Path, split: &DatasetSplit) -> Result<Dataset, Error> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let coco: CocoFile = serde_json::from_str(&text)?;
    let dir = path.parent().unwrap_or_else(|| Path::new("."));

    let mut cat_names: BTreeMap<u32, String> = BTreeMap::new();
    for c in &coco.categories {
        cat_names.insert(c.id, c.name.clone());
    }
    for c in cat_names.values() {
        if split.role(c).is_none() {
            return Err(Error::UnknownCategory(c.clone()));
        }
    }
    for name in split.all() {
        if !cat_names.values().any(|c| *c == name) {
            return Err(Error::UnknownCategory(name));
        }
    }

    let mut images = Vec::with_capacity(coco.images.len());
    let mut dims: BTreeMap<u64, (u32, u32)> = BTreeMap::new();
    for im in &coco.images {
        dims.insert(im.id, (im.width, im.height));
        images.push(ImageRecord {
            image_id: im.id,
            width: im.width,
            height: im.height,
            source: PixelSource::Path(dir.join(&im.file_name)),
        });
    }

    let mut annotations = Vec::with_capacity(coco.annotations.len());
    for a in &coco.annotations {
        let name = cat_names
            .get(&a.category_id)
            .ok_or_else(|| Error::Dataset(format!("annotation {} references unknown category id {}", a.id, a.category_id)))?;
        let (w, h) = *dims
            .get(&a.image_id)
            .ok_or_else(|| Error::Dataset(format!("annotation {} references unknown image id {}", a.id, a.image_id)))?;
        let bbox = Box2D::from_xywh(a.bbox[0], a.bbox[1], a.bbox[2], a.bbox[3])?;
        if bbox.x1 < 0.0 || bbox.y1 < 0.0 || bbox.x2 > w as f64 || bbox.y2 > h as f64 {
            return Err(Error::Dataset(format!("annotation {} box exceeds image bounds", a.id)));
        }
        annotations.push(Annotation {
            id: a.id,
            image_id: a.image_id,
            category: name.clone(),
            bbox,
        });
    }

    Ok(Dataset {
        images,
        annotations,
        split: split.clone(),
    })
}

/// Training-set rule: keep only images that carry at least one base-category
/// annotation. With `include_novel` (the validation-set rule) an image also
/// survives on novel annotations alone. Order is preserved.
pub fn filter_training_images(
    dataset: &Dataset,
    include_novel: bool,
) -> Vec<ImageRecord> {
    dataset
        .images
        .iter()
        .filter(|im| {
            dataset.annotations.iter().any(|a| {
                a.image_id == im.image_id
                    && match dataset.split.role(&a.category) {
                        Some(Role::Base) => true,
                        Some(Role::Novel) => include_novel,
                        None => false,
                    }
            })
        })
        .cloned()
        .collect()
}

// --- toy dataset generation ---

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Square,
    Circle,
    Triangle,
}

/// A renderable toy category: a solid color plus a parametric shape.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeSpec {
    pub name: String,
    pub color: [u8; 3],
    pub kind: ShapeKind,
}

/// Parses a `"<color>-<shape>"` category name into its renderable form.
pub fn parse_shape_name(name: &str) -> Result<ShapeSpec, Error> {
    let (color_s, kind_s) = name
        .rsplit_once('-')
        .ok_or_else(|| Error::Dataset(format!("category `{name}` is not of the form <color>-<shape>")))?;
    let color = match color_s {
        "red" => [220, 40, 40],
        "green" => [40, 200, 60],
        "blue" => [50, 70, 220],
        "yellow" => [230, 220, 40],
        "magenta" => [210, 50, 200],
        "cyan" => [50, 210, 210],
        "orange" => [235, 140, 30],
        "purple" => [130, 50, 200],
        "white" => [245, 245, 245],
        other => return Err(Error::Dataset(format!("unknown toy color `{other}`"))),
    };
    let kind = match kind_s {
        "square" => ShapeKind::Square,
        "circle" => ShapeKind::Circle,
        "triangle" => ShapeKind::Triangle,
        other => return Err(Error::Dataset(format!("unknown toy shape `{other}`"))),
    };
    Ok(ShapeSpec {
        name: name.to_string(),
        color,
        kind,
    })
}

/// Fills `spec`'s shape into `img` within the given integer box.
fn draw_shape(img: &mut ImageBuf, spec: &ShapeSpec, x1: u32, y1: u32, x2: u32, y2: u32, shade: f64) {
    let w = (x2 - x1) as f64;
    let h = (y2 - y1) as f64;
    let cx = x1 as f64 + w / 2.0;
    let cy = y1 as f64 + h / 2.0;
    let color = [
        (spec.color[0] as f64 * shade).round() as u8,
        (spec.color[1] as f64 * shade).round() as u8,
        (spec.color[2] as f64 * shade).round() as u8,
    ];
    for y in y1..y2 {
        for x in x1..x2 {
            let px = x as f64 + 0.5;
            let py = y as f64 + 0.5;
            let inside = match spec.kind {
                ShapeKind::Square => true,
                ShapeKind::Circle => {
                    let dx = (px - cx) / (w / 2.0);
                    let dy = (py - cy) / (h / 2.0);
                    dx * dx + dy * dy <= 1.0
                }
                ShapeKind::Triangle => {
                    // upward triangle: apex at top center, base at the bottom
                    let t = (py - y1 as f64) / h;
                    (px - cx).abs() <= t * w / 2.0
                }
            };
            if inside {
                img.set(x, y, color);
            }
        }
    }
}

/// Renders a canonical, centered instance of a category on a neutral gray
/// background. The mock encoder uses this to produce text embeddings from
/// the same descriptor pathway as image crops.
pub fn render_canonical_crop(spec: &ShapeSpec, side: u32) -> ImageBuf {
    let mut img = ImageBuf::filled(side, side, [128, 128, 128]);
    // mirror the margin a 1.2x-enlarged GT crop leaves around the object
    let margin = (side as f64 / 12.0).round() as u32;
    draw_shape(&mut img, spec, margin, margin, side - margin, side - margin, 1.0);
    img
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyConfig {
    pub seed: u64,
    pub n_images: usize,
    pub canvas_size: u32,
    pub max_shapes_per_image: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_images: 200,
            canvas_size: 96,
            max_shapes_per_image: 3,
        }
    }
}

/// Generates a toy dataset on disk: `images/img_*.png` plus
/// `annotations.json` in the flat COCO-style schema. Deterministic under
/// seed; the same seed yields byte-identical annotation and image files.
pub fn make_toy_dataset(
    out_dir: &Path,
    cfg: &ToyConfig,
    catalog: &[ShapeSpec],
    split: &DatasetSplit,
) -> Result<PathBuf, Error> {
    if cfg.canvas_size < 32 {
        return Err(Error::Dataset(format!(
            "canvas size {} too small to place shapes (minimum 32)",
            cfg.canvas_size
        )));
    }
    for name in split.all() {
        if !catalog.iter().any(|s| s.name == name) {
            return Err(Error::UnknownCategory(name));
        }
    }
    let img_dir = out_dir.join("images");
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;

    let mut images = Vec::new();
    let mut annotations = Vec::new();
    let mut ann_id: u64 = 1;
    let c = cfg.canvas_size;

    for idx in 0..cfg.n_images {
        let image_id = idx as u64 + 1;
        let mut rng = stage_rng(cfg.seed, "toy-image", image_id);
        let mut img = ImageBuf::filled(c, c, [0, 0, 0]);
        // textured gray background
        for y in 0..c {
            for x in 0..c {
                let v = 110 + rng.gen_range(0..28) as u8;
                img.set(x, y, [v, v, v]);
            }
        }

        // images mix base and novel shapes freely; novel objects in training
        // images stay unannotated for the detector, and the encoder-scored
        // distillation regions keep them out of the background pools
        let side_catalog: Vec<&ShapeSpec> = catalog
            .iter()
            .filter(|s| split.role(&s.name).is_some())
            .collect();
        let n_shapes = rng.gen_range(1..=cfg.max_shapes_per_image.max(1));
        let mut placed: Vec<Box2D> = Vec::new();
        for _ in 0..n_shapes {
            let spec = side_catalog[rng.gen_range(0..side_catalog.len())];
            let min_side = (c as f64 * 0.22).round();
            let max_side = (c as f64 * 0.48).round();
            let mut ok = None;
            for _attempt in 0..40 {
                let side = rng.gen_range(min_side..=max_side).round();
                let x1 = rng.gen_range(1.0..(c as f64 - side - 1.0)).round();
                let y1 = rng.gen_range(1.0..(c as f64 - side - 1.0)).round();
                let cand = Box2D::new(x1, y1, x1 + side, y1 + side)?;
                if placed.iter().all(|p| crate::geometry::iou(p, &cand) < 0.05) {
                    ok = Some(cand);
                    break;
                }
            }
            let Some(bbox) = ok else { continue };
            let shade = rng.gen_range(0.82..1.0);
            draw_shape(
                &mut img,
                spec,
                bbox.x1 as u32,
                bbox.y1 as u32,
                bbox.x2 as u32,
                bbox.y2 as u32,
                shade,
            );
            placed.push(bbox);
            annotations.push(CocoAnnotation {
                id: ann_id,
                image_id,
                category_id: catalog.iter().position(|s| s.name == spec.name).unwrap() as u32 + 1,
                bbox: [bbox.x1, bbox.y1, bbox.width(), bbox.height()],
                area: bbox.area(),
            });
            ann_id += 1;
        }

        let file_name = format!("images/img_{image_id:06}.png");
        let path = out_dir.join(&file_name);
        image::save_buffer(
            &path,
            &img.data,
            img.width,
            img.height,
            image::ColorType::Rgb8,
        )?;
        images.push(CocoImage {
            id: image_id,
            width: c,
            height: c,
            file_name,
        });
    }

    let categories = catalog
        .iter()
        .enumerate()
        .map(|(i, s)| CocoCategory {
            id: i as u32 + 1,
            name: s.name.clone(),
        })
        .collect();
    let file = CocoFile {
        images,
        annotations,
        categories,
    };
    let ann_path = out_dir.join("annotations.json");
    let text = serde_json::to_string_pretty(&file)?;
    fs::write(&ann_path, text).map_err(|e| Error::io(&ann_path, e))?;
    Ok(ann_path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::TempDir;

    fn toy_split() -> DatasetSplit {
        DatasetSplit::new(vec!["red-square".into()], vec!["blue-circle".into()]).unwrap()
    }

    fn toy_catalog() -> Vec<ShapeSpec> {
        vec![
            parse_shape_name("red-square").unwrap(),
            parse_shape_name("blue-circle").unwrap(),
        ]
    }

    #[test]
    fn size_bins_follow_coco_convention() {
        assert_eq!(SizeBin::from_area(100.0), SizeBin::Small);
        assert_eq!(SizeBin::from_area(32.0 * 32.0), SizeBin::Medium);
        assert_eq!(SizeBin::from_area(96.0 * 96.0), SizeBin::Large);
    }

    #[test]
    fn minimal_coco_file_roundtrip() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("ann.json");
        std::fs::write(
            &path,
            r#"{
              "images": [{"id": 1, "width": 64, "height": 64, "file_name": "a.png"}],
              "annotations": [{"id": 1, "image_id": 1, "category_id": 1, "bbox": [5, 5, 10, 10], "area": 100}],
              "categories": [{"id": 1, "name": "red-square"}]
            }"#,
        )
        .unwrap();
        let split = DatasetSplit::new(vec!["red-square".into()], vec![]).unwrap();
        let ds = load_coco_json(&path, &split).unwrap();
        assert_eq!(ds.images.len(), 1);
        assert_eq!(ds.annotations.len(), 1);
        assert_eq!(ds.annotations[0].bbox.as_array(), [5.0, 5.0, 15.0, 15.0]);
        assert_eq!(ds.split.base.len(), 1);
        assert_eq!(ds.split.novel.len(), 0);
    }

    #[test]
    fn split_naming_unknown_category_errors() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("ann.json");
        std::fs::write(
            &path,
            r#"{"images": [], "annotations": [], "categories": [{"id": 1, "name": "red-square"}]}"#,
        )
        .unwrap();
        let split =
            DatasetSplit::new(vec!["red-square".into()], vec!["green-triangle".into()]).unwrap();
        assert!(matches!(load_coco_json(&path, &split), Err(Error::UnknownCategory(_))));
    }

    #[test]
    fn overlapping_split_rejected() {
        assert!(DatasetSplit::new(vec!["a".into()], vec!["a".into()]).is_err());
    }

    #[test]
    fn training_filter_keeps_base_only() {
        let split = toy_split();
        let img = |id| ImageRecord {
            image_id: id,
            width: 64,
            height: 64,
            source: PixelSource::Embedded(ImageBuf::filled(64, 64, [0, 0, 0])),
        };
        let ann = |id, image_id, cat: &str| Annotation {
            id,
            image_id,
            category: cat.into(),
            bbox: Box2D::new(1.0, 1.0, 10.0, 10.0).unwrap(),
        };
        let ds = Dataset {
            images: vec![img(1), img(2), img(3)],
            annotations: vec![
                ann(1, 1, "blue-circle"),
                ann(2, 2, "red-square"),
                ann(3, 2, "blue-circle"),
            ],
            split,
        };
        let train = filter_training_images(&ds, false);
        assert_eq!(train.iter().map(|i| i.image_id).collect::<Vec<_>>(), vec![2]);
        let val = filter_training_images(&ds, true);
        assert_eq!(val.iter().map(|i| i.image_id).collect::<Vec<_>>(), vec![1, 2]);
    }

    #[test]
    fn empty_annotations_filter_to_empty() {
        let ds = Dataset {
            images: vec![],
            annotations: vec![],
            split: toy_split(),
        };
        assert!(filter_training_images(&ds, false).is_empty());
    }

    #[test]
    fn toy_dataset_is_deterministic_and_loadable() {
        let cfg = ToyConfig {
            seed: 7,
            n_images: 10,
            canvas_size: 96,
            max_shapes_per_image: 3,
        };
        let split = toy_split();
        let catalog = toy_catalog();

        let d1 = TempDir::new().unwrap();
        let d2 = TempDir::new().unwrap();
        let p1 = make_toy_dataset(d1.path(), &cfg, &catalog, &split).unwrap();
        let p2 = make_toy_dataset(d2.path(), &cfg, &catalog, &split).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());

        let ds = load_coco_json(&p1, &split).unwrap();
        assert_eq!(ds.images.len(), 10);
        assert!(!ds.annotations.is_empty());
        // every annotation's pixels are actually loadable
        let buf = ds.images[0].load_pixels().unwrap();
        assert_eq!(buf.width, 96);
    }

    #[test]
    fn toy_empty_dataset_is_valid() {
        let cfg = ToyConfig {
            seed: 1,
            n_images: 0,
            canvas_size: 96,
            max_shapes_per_image: 3,
        };
        let dir = TempDir::new().unwrap();
        let p = make_toy_dataset(dir.path(), &cfg, &toy_catalog(), &toy_split()).unwrap();
        let ds = load_coco_json(&p, &toy_split()).unwrap();
        assert!(ds.images.is_empty());
    }

    #[test]
    fn tiny_canvas_rejected() {
        let cfg = ToyConfig {
            seed: 1,
            n_images: 1,
            canvas_size: 8,
            max_shapes_per_image: 1,
        };
        let dir = TempDir::new().unwrap();
        assert!(make_toy_dataset(dir.path(), &cfg, &toy_catalog(), &toy_split()).is_err());
    }
}
