//! Pluggable vision-language encoder: region cropping and preprocessing,
//! image-feature extraction, text-embedding generation, and cosine
//! classification.
//!
//! Two implementations are intended behind [`Encoder`]: an adapter to a real
//! pretrained contrastive model (an optional plugin, wired via checkpoint
//! locator) and [`MockEncoder`], a fully deterministic stand-in whose
//! features are a seeded linear projection of a color/layout descriptor of
//! the crop. Text embeddings for `"<color>-<shape>"` category names are the
//! projected descriptor of a canonically rendered instance of that category,
//! so cosine classification separates toy categories by construction. The
//! whole test suite runs on the mock alone.

use ndarray::{Array1, Array2, Array3};
use rand::Rng;

use crate::dataset::{parse_shape_name, render_canonical_crop, ImageBuf};
use crate::error::Error;
use crate::geometry::Box2D;
use crate::rngutil::{derive_seed, stage_rng};

/// D-dimensional vector in the shared vision-language space.
pub type FeatureVector = Array1<f64>;

#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbedding {
    pub category_name: String,
    pub values: FeatureVector,
}

/// Extracts the integer-pixel region under `bbox`, zero-pads the shorter
/// side to a square (split evenly, remainder to bottom/right), and resizes
/// bilinearly to `input_side`. Output is `[3, input_side, input_side]` with
/// pixel values in `[0, 1]`; encoder-specific channel normalization is the
/// responsibility of the consuming encoder.
pub fn crop_and_preprocess(
    img: &ImageBuf,
    bbox: &Box2D,
    input_side: u32,
) -> Result<Array3<f64>, Error> {
    let x1 = bbox.x1.floor().max(0.0) as u32;
    let y1 = bbox.y1.floor().max(0.0) as u32;
    let x2 = (bbox.x2.ceil().min(img.width as f64) as u32).min(img.width);
    let y2 = (bbox.y2.ceil().min(img.height as f64) as u32).min(img.height);
    if x2 <= x1 || y2 <= y1 {
        return Err(Error::BoxOutsideImage {
            x1: bbox.x1,
            y1: bbox.y1,
            x2: bbox.x2,
            y2: bbox.y2,
            w: img.width,
            h: img.height,
        });
    }
    let w = (x2 - x1) as usize;
    let h = (y2 - y1) as usize;
    let mut region = Array3::<f64>::zeros((3, h, w));
    for y in 0..h {
        for x in 0..w {
            let p = img.get(x1 + x as u32, y1 + y as u32);
            for c in 0..3 {
                region[[c, y, x]] = p[c] as f64 / 255.0;
            }
        }
    }
    let square = pad_to_square(&region);
    Ok(resize_bilinear(&square, input_side as usize))
}

/// Zero-pads the shorter side to a square; padding is split evenly with the
/// odd pixel going to the bottom/right.
pub fn pad_to_square(region: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = region.dim();
    let side = h.max(w);
    if h == w {
        return region.clone();
    }
    let top = (side - h) / 2;
    let left = (side - w) / 2;
    let mut out = Array3::<f64>::zeros((c, side, side));
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[[ch, top + y, left + x]] = region[[ch, y, x]];
            }
        }
    }
    out
}

fn resize_bilinear(src: &Array3<f64>, side: usize) -> Array3<f64> {
    let (c, h, w) = src.dim();
    let mut out = Array3::<f64>::zeros((c, side, side));
    let sy = h as f64 / side as f64;
    let sx = w as f64 / side as f64;
    for y in 0..side {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = fy - y0 as f64;
        for x in 0..side {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = fx - x0 as f64;
            for ch in 0..c {
                let a = src[[ch, y0, x0]] * (1.0 - wx) + src[[ch, y0, x1]] * wx;
                let b = src[[ch, y1, x0]] * (1.0 - wx) + src[[ch, y1, x1]] * wx;
                out[[ch, y, x]] = a * (1.0 - wy) + b * wy;
            }
        }
    }
    out
}

fn l2_norm(v: &Array1<f64>) -> f64 {
    v.dot(v).sqrt()
}

pub fn cosine(a: &Array1<f64>, b: &Array1<f64>) -> Result<f64, Error> {
    let (na, nb) = (l2_norm(a), l2_norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm);
    }
    Ok(a.dot(b) / (na * nb))
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&x| (x - m).exp()).collect();
    let s: f64 = exps.iter().sum();
    exps.iter().map(|e| e / s).collect()
}

/// Cosine classification: similarities on L2-normalized vectors, scaled by
/// `1/tau`, softmaxed. Ties break toward the lower index.
pub fn classify_feature(
    feature: &FeatureVector,
    embeddings: &[TextEmbedding],
    tau: f64,
) -> Result<(usize, Vec<f64>), Error> {
    if embeddings.is_empty() {
        return Err(Error::InvalidArgument("classify_feature: no embeddings".into()));
    }
    for e in embeddings {
        if e.values.len() != feature.len() {
            return Err(Error::DimensionMismatch {
                expected: feature.len(),
                got: e.values.len(),
            });
        }
    }
    let logits: Vec<f64> = embeddings
        .iter()
        .map(|e| cosine(feature, &e.values).map(|c| c / tau))
        .collect::<Result<_, _>>()?;
    let scores = softmax(&logits);
    let mut best = 0;
    for (i, s) in scores.iter().enumerate() {
        if *s > scores[best] {
            best = i;
        }
    }
    Ok((best, scores))
}

/// Substitutes `{name}` into the prompt template.
pub fn build_prompt(template: &str, name: &str) -> String {
    template.replace("{name}", name)
}

pub const DEFAULT_PROMPT_TEMPLATE: &str = "a photo of a {name}";

/// Vision-language encoder abstraction. Implementations must be
/// deterministic: the same crop (and the same parameter state) always yields
/// the same feature, and `encode_*` calls never mutate state.
pub trait Encoder {
    /// Shared embedding dimension D.
    fn dim(&self) -> usize;
    /// Square input resolution fed to the vision tower.
    fn input_side(&self) -> u32;
    /// Feature for an already preprocessed `[3, S, S]` crop.
    fn encode_crop(&self, crop: &Array3<f64>) -> FeatureVector;
    /// Text embedding for one category name.
    fn encode_text_one(&self, name: &str, template: &str) -> Result<TextEmbedding, Error>;

    fn encode_region(&self, img: &ImageBuf, bbox: &Box2D) -> Result<FeatureVector, Error> {
        let crop = crop_and_preprocess(img, bbox, self.input_side())?;
        Ok(self.encode_crop(&crop))
    }

    fn encode_text(&self, names: &[String], template: &str) -> Result<Vec<TextEmbedding>, Error> {
        names.iter().map(|n| self.encode_text_one(n, template)).collect()
    }
}

/// Number of grid cells per axis in the mock descriptor.
const GRID: usize = 4;
/// Mock descriptor length: per-cell RGB means plus a global RGB mean.
pub const MOCK_DESC_DIM: usize = GRID * GRID * 3 + 3;

/// Deterministic mock encoder.
///
/// An image crop is summarized by a 51-dimensional descriptor (4x4 grid of
/// cell RGB means plus the global mean), passed through a per-dimension
/// affine `gain * d + bias`, and projected by a fixed seeded matrix into the
/// D-dimensional embedding space. The affine is the "normalization layer"
/// partition exposed for adaptation; the projection is frozen. Text
/// embeddings bypass the affine (they are projections of canonically
/// rendered category instances), so adapting the affine realigns image
/// features with a fixed text anchor, mirroring vision-side-only finetuning.
#[derive(Debug, Clone, PartialEq)]
pub struct MockEncoder {
    pub seed: u64,
    dim: usize,
    input_side: u32,
    projection: Array2<f64>,
    pub gain: Array1<f64>,
    pub bias: Array1<f64>,
}

impl MockEncoder {
    pub fn new(seed: u64, dim: usize) -> Self {
        let mut rng = stage_rng(seed, "mock-projection", 0);
        let scale = 1.0 / (MOCK_DESC_DIM as f64).sqrt();
        let projection = Array2::from_shape_fn((dim, MOCK_DESC_DIM), |_| {
            // Box-Muller from two uniforms keeps the stream layout obvious
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos() * scale
        });
        Self {
            seed,
            dim,
            input_side: 64,
            projection,
            gain: Array1::ones(MOCK_DESC_DIM),
            bias: Array1::zeros(MOCK_DESC_DIM),
        }
    }

    /// Grid-of-cell-means descriptor of a preprocessed crop.
    pub fn descriptor(crop: &Array3<f64>) -> Array1<f64> {
        let (c, h, w) = crop.dim();
        debug_assert_eq!(c, 3);
        let mut d = Array1::<f64>::zeros(MOCK_DESC_DIM);
        for gy in 0..GRID {
            let y0 = gy * h / GRID;
            let y1 = ((gy + 1) * h / GRID).max(y0 + 1);
            for gx in 0..GRID {
                let x0 = gx * w / GRID;
                let x1 = ((gx + 1) * w / GRID).max(x0 + 1);
                let n = ((y1 - y0) * (x1 - x0)) as f64;
                for ch in 0..3 {
                    let mut s = 0.0;
                    for y in y0..y1 {
                        for x in x0..x1 {
                            s += crop[[ch, y, x]];
                        }
                    }
                    d[(gy * GRID + gx) * 3 + ch] = s / n;
                }
            }
        }
        let n = (h * w) as f64;
        let mut global = [0.0f64; 3];
        for ch in 0..3 {
            let mut s = 0.0;
            for y in 0..h {
                for x in 0..w {
                    s += crop[[ch, y, x]];
                }
            }
            global[ch] = s / n;
        }
        // Split the descriptor into a spatial occupancy pattern (cell means
        // with the crop's global color removed) and the global color itself,
        // centered around mid-gray. Without the split the shared color
        // component dominates every cell and crops of the same color but
        // different shape land at nearly identical angles; without the
        // centering all descriptors share a large positive common component
        // and collapse into a narrow cosine cone.
        for gy in 0..GRID {
            for gx in 0..GRID {
                for ch in 0..3 {
                    d[(gy * GRID + gx) * 3 + ch] -= global[ch];
                }
            }
        }
        for ch in 0..3 {
            d[GRID * GRID * 3 + ch] = global[ch] - 0.5;
        }
        d
    }

    /// Projects a descriptor through the current affine: `P (g * d + b)`.
    pub fn project_with_affine(&self, d: &Array1<f64>) -> FeatureVector {
        let adjusted = &self.gain * d + &self.bias;
        self.projection.dot(&adjusted)
    }

    /// Projects a descriptor with the identity affine (text pathway).
    pub fn project_identity(&self, d: &Array1<f64>) -> FeatureVector {
        self.projection.dot(d)
    }

    pub fn projection(&self) -> &Array2<f64> {
        &self.projection
    }

    /// The adaptable ("normalization layer") parameters, flattened.
    pub fn norm_params(&self) -> Vec<f64> {
        self.gain.iter().chain(self.bias.iter()).cloned().collect()
    }

    pub fn set_norm_params(&mut self, v: &[f64]) {
        assert_eq!(v.len(), 2 * MOCK_DESC_DIM);
        self.gain = Array1::from_vec(v[..MOCK_DESC_DIM].to_vec());
        self.bias = Array1::from_vec(v[MOCK_DESC_DIM..].to_vec());
    }

    /// The frozen parameters (the projection), flattened. Used by tests to
    /// audit that adaptation never touches them.
    pub fn non_norm_params(&self) -> Vec<f64> {
        self.projection.iter().cloned().collect()
    }
}

impl Encoder for MockEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn input_side(&self) -> u32 {
        self.input_side
    }

    fn encode_crop(&self, crop: &Array3<f64>) -> FeatureVector {
        self.project_with_affine(&Self::descriptor(crop))
    }

    fn encode_text_one(&self, name: &str, template: &str) -> Result<TextEmbedding, Error> {
        if name.is_empty() {
            return Err(Error::InvalidArgument("empty category name".into()));
        }
        let values = match parse_shape_name(name) {
            Ok(spec) => {
                let canon = render_canonical_crop(&spec, self.input_side);
                let crop = crop_and_preprocess(
                    &canon,
                    &Box2D::new(0.0, 0.0, self.input_side as f64, self.input_side as f64)?,
                    self.input_side,
                )?;
                self.project_identity(&Self::descriptor(&crop))
            }
            Err(_) => {
                // non-toy name: stable seeded direction keyed by the prompt
                let prompt = build_prompt(template, name);
                let mut h: u64 = 0;
                for b in prompt.bytes() {
                    h = h.wrapping_mul(0x100000001b3) ^ b as u64;
                }
                let mut rng = stage_rng(self.seed, "mock-text", h);
                Array1::from_shape_fn(self.dim, |_| rng.gen_range(-1.0..1.0))
            }
        };
        Ok(TextEmbedding {
            category_name: name.to_string(),
            values,
        })
    }
}

/// Stable fingerprint of a seed/dim pair, written into checkpoints so later
/// stages can verify they run against the same mock.
/// Serialized mock encoder state. The projection is regenerated from the
/// seed; only the adaptable affine is stored.
#[derive(Debug, serde::Serialize, serde::Deserialize)]
struct MockState {
    seed: u64,
    dim: usize,
    gain: Vec<f64>,
    bias: Vec<f64>,
}

impl MockEncoder {
    pub fn save_json(&self, path: &std::path::Path) -> Result<(), Error> {
        let state = MockState {
            seed: self.seed,
            dim: self.dim,
            gain: self.gain.to_vec(),
            bias: self.bias.to_vec(),
        };
        let mut text = serde_json::to_string(&state)?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: &std::path::Path) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let state: MockState = serde_json::from_str(&text)?;
        if state.gain.len() != MOCK_DESC_DIM || state.bias.len() != MOCK_DESC_DIM {
            return Err(Error::Checkpoint(format!(
                "encoder state has affine length {}/{}, expected {MOCK_DESC_DIM}",
                state.gain.len(),
                state.bias.len()
            )));
        }
        let mut enc = Self::new(state.seed, state.dim);
        enc.gain = Array1::from_vec(state.gain);
        enc.bias = Array1::from_vec(state.bias);
        Ok(enc)
    }
}

pub fn mock_fingerprint(seed: u64, dim: usize) -> u64 {
    derive_seed(seed, "mock-fingerprint", dim as u64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn red_crop(side: u32) -> ImageBuf {
        ImageBuf::filled(side, side, [220, 40, 40])
    }

    fn blue_crop(side: u32) -> ImageBuf {
        ImageBuf::filled(side, side, [50, 70, 220])
    }

    #[test]
    fn preprocess_output_is_square() {
        let img = red_crop(100);
        let b = Box2D::new(0.0, 0.0, 100.0, 50.0).unwrap();
        let crop = crop_and_preprocess(&img, &b, 64).unwrap();
        assert_eq!(crop.dim(), (3, 64, 64));
    }

    #[test]
    fn pad_splits_evenly_remainder_bottom_right() {
        let region = Array3::<f64>::ones((3, 50, 100));
        let padded = pad_to_square(&region);
        assert_eq!(padded.dim(), (3, 100, 100));
        // 25 zero rows top and bottom
        for y in 0..25 {
            assert_eq!(padded[[0, y, 0]], 0.0);
            assert_eq!(padded[[0, 99 - y, 0]], 0.0);
        }
        assert_eq!(padded[[0, 25, 0]], 1.0);
        assert_eq!(padded[[0, 74, 0]], 1.0);

        let odd = Array3::<f64>::ones((3, 3, 4));
        let p = pad_to_square(&odd);
        // one-pixel remainder goes to the bottom
        assert_eq!(p[[0, 0, 0]], 1.0);
        assert_eq!(p[[0, 3, 0]], 0.0);
    }

    #[test]
    fn one_pixel_box_is_legal() {
        let img = red_crop(10);
        let b = Box2D::new(3.0, 3.0, 4.0, 4.0).unwrap();
        let crop = crop_and_preprocess(&img, &b, 64).unwrap();
        assert_eq!(crop.dim(), (3, 64, 64));
        assert_abs_diff_eq!(crop[[0, 32, 32]], 220.0 / 255.0, epsilon = 1e-12);
    }

    #[test]
    fn box_outside_image_errors() {
        let img = red_crop(10);
        let b = Box2D::new(20.0, 20.0, 30.0, 30.0).unwrap();
        assert!(crop_and_preprocess(&img, &b, 64).is_err());
    }

    #[test]
    fn encoding_is_deterministic() {
        let enc = MockEncoder::new(3, 32);
        let img = red_crop(40);
        let b = Box2D::new(5.0, 5.0, 35.0, 35.0).unwrap();
        let f1 = enc.encode_region(&img, &b).unwrap();
        let f2 = enc.encode_region(&img, &b).unwrap();
        assert_eq!(f1, f2);
    }

    #[test]
    fn red_vs_blue_cosine_contract() {
        let enc = MockEncoder::new(3, 32);
        let full = Box2D::new(0.0, 0.0, 64.0, 64.0).unwrap();
        let r1 = enc.encode_region(&red_crop(64), &full).unwrap();
        let r2 = enc.encode_region(&red_crop(64), &full).unwrap();
        let bl = enc.encode_region(&blue_crop(64), &full).unwrap();
        assert!(cosine(&r1, &bl).unwrap() < cosine(&r1, &r2).unwrap());
    }

    #[test]
    fn text_embeddings_stable_and_nonzero() {
        let enc = MockEncoder::new(3, 32);
        let a = enc.encode_text_one("red-square", DEFAULT_PROMPT_TEMPLATE).unwrap();
        let b = enc.encode_text_one("red-square", DEFAULT_PROMPT_TEMPLATE).unwrap();
        assert_eq!(a.values, b.values);
        assert!(a.values.dot(&a.values) > 0.0);
        assert!(enc.encode_text_one("", DEFAULT_PROMPT_TEMPLATE).is_err());
    }

    #[test]
    fn classify_matches_exact_embedding() {
        let e = |name: &str, v: Vec<f64>| TextEmbedding {
            category_name: name.into(),
            values: Array1::from_vec(v),
        };
        let embs = vec![
            e("a", vec![1.0, 0.0, 0.0]),
            e("b", vec![0.0, 1.0, 0.0]),
            e("c", vec![0.0, 0.0, 1.0]),
        ];
        let f = Array1::from_vec(vec![0.0, 0.0, 2.0]);
        let (pred, scores) = classify_feature(&f, &embs, 0.01).unwrap();
        assert_eq!(pred, 2);
        assert!(scores[2] > scores[0] && scores[2] > scores[1]);
    }

    #[test]
    fn classify_uniform_when_embeddings_identical() {
        let v = Array1::from_vec(vec![1.0, 2.0]);
        let embs: Vec<TextEmbedding> = (0..4)
            .map(|i| TextEmbedding {
                category_name: format!("c{i}"),
                values: v.clone(),
            })
            .collect();
        let (pred, scores) = classify_feature(&v, &embs, 0.01).unwrap();
        assert_eq!(pred, 0);
        for s in scores {
            assert_abs_diff_eq!(s, 0.25, epsilon = 1e-12);
        }
    }

    #[test]
    fn classify_closed_form_two_way() {
        let embs = vec![
            TextEmbedding {
                category_name: "x".into(),
                values: Array1::from_vec(vec![1.0, 0.0]),
            },
            TextEmbedding {
                category_name: "y".into(),
                values: Array1::from_vec(vec![0.0, 1.0]),
            },
        ];
        let f = Array1::from_vec(vec![1.0, 0.0]);
        let (_, scores) = classify_feature(&f, &embs, 0.01).unwrap();
        assert_abs_diff_eq!(scores[0], 1.0 / (1.0 + (-100.0f64).exp()), epsilon = 1e-12);
    }

    #[test]
    fn classify_invariant_to_feature_scale() {
        let enc = MockEncoder::new(9, 16);
        let embs = enc
            .encode_text(
                &["red-square".into(), "blue-circle".into()],
                DEFAULT_PROMPT_TEMPLATE,
            )
            .unwrap();
        let full = Box2D::new(0.0, 0.0, 64.0, 64.0).unwrap();
        let f = enc.encode_region(&red_crop(64), &full).unwrap();
        let (p1, _) = classify_feature(&f, &embs, 0.01).unwrap();
        let (p2, _) = classify_feature(&(&f * 17.0), &embs, 0.01).unwrap();
        assert_eq!(p1, p2);
    }

    #[test]
    fn zero_norm_rejected() {
        let embs = vec![TextEmbedding {
            category_name: "x".into(),
            values: Array1::from_vec(vec![1.0, 0.0]),
        }];
        let f = Array1::from_vec(vec![0.0, 0.0]);
        assert!(matches!(classify_feature(&f, &embs, 0.01), Err(Error::ZeroNorm)));
    }
}
