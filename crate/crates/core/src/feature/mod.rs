//! Superpoint features lifted from the posed images.
//!
//! For each of a superpoint's top-k views, a few of its visible points are
//! used as prompts for a class-agnostic segmenter. The resulting mask selects
//! a crop whose unmasked pixels are painted white, the crop is embedded, and
//! the per-view embeddings are averaged and renormalized.
//!
//! All model access goes through [`FeatureProvider`], so the pipeline runs
//! the same against the deterministic [`SyntheticProvider`] or a remote model
//! service speaking the HTTP wire protocol ([`HttpProvider`]).

use std::collections::{BTreeMap, BTreeSet, HashMap};

use image::{Rgb, RgbImage};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::scene_io::{ArtifactKind, CacheCodec, CacheReader, CacheWriter, CameraView, SceneError};
use crate::superpoint::SuperpointGraph;
use crate::visibility::{top_k_views, VisibilityTable, VisiblePoint};

#[cfg(feature = "http")]
mod http;
mod synthetic;
pub mod wire;

#[cfg(feature = "http")]
pub use http::{HttpProvider, HttpProviderConfig};
pub use synthetic::SyntheticProvider;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("no visible points to sample prompts from")]
    NoVisiblePoints,
    #[error("mask has {pixels} pixels, fewer than the required {min}")]
    EmptyMask { pixels: usize, min: usize },
    #[error("feature dimension mismatch: expected {expected}, got {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("zero or non-finite embedding")]
    DegenerateEmbedding,
    #[error("provider unavailable: {0}")]
    ProviderUnavailable(String),
    #[error("provider protocol error: {0}")]
    ProviderProtocol(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// Unit-norm embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVector(Vec<f64>);

impl FeatureVector {
    /// Normalizes `values`; fails on an empty, zero or non-finite vector.
    pub fn new(values: Vec<f64>) -> Result<Self, FeatureError> {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if values.is_empty() || !norm.is_finite() || norm <= 1e-12 {
            return Err(FeatureError::DegenerateEmbedding);
        }
        Ok(Self(values.into_iter().map(|v| v / norm).collect()))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dot(&self, other: &Self) -> Result<f64, FeatureError> {
        if self.dim() != other.dim() {
            return Err(FeatureError::DimMismatch {
                expected: self.dim(),
                found: other.dim(),
            });
        }
        Ok(self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum())
    }

    /// Normalized weighted mean.
    pub fn weighted_mean<'a, I>(items: I) -> Result<Self, FeatureError>
    where
        I: IntoIterator<Item = (&'a FeatureVector, f64)>,
    {
        let mut acc: Vec<f64> = Vec::new();
        for (v, w) in items {
            if acc.is_empty() {
                acc = vec![0.0; v.dim()];
            } else if acc.len() != v.dim() {
                return Err(FeatureError::DimMismatch {
                    expected: acc.len(),
                    found: v.dim(),
                });
            }
            for (a, x) in acc.iter_mut().zip(&v.0) {
                *a += w * x;
            }
        }
        Self::new(acc)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProviderInfo {
    pub name: String,
    pub dim: usize,
    pub image_model: String,
    pub text_model: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    pub width: u32,
    pub height: u32,
    pub data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            data: vec![false; width as usize * height as usize],
        }
    }

    pub fn full(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            data: vec![true; width as usize * height as usize],
        }
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.data[y as usize * self.width as usize + x as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, v: bool) {
        self.data[y as usize * self.width as usize + x as usize] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Inclusive `[x0, y0, x1, y1]` of the set pixels.
    pub fn bbox(&self) -> Option<[u32; 4]> {
        let mut b: Option<[u32; 4]> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    b = Some(match b {
                        None => [x, y, x, y],
                        Some([x0, y0, x1, y1]) => [x0.min(x), y0.min(y), x1.max(x), y1.max(y)],
                    });
                }
            }
        }
        b
    }
}

/// Access to an image encoder, a text encoder in the same space, and a
/// point-promptable segmenter.
pub trait FeatureProvider: Send + Sync {
    fn info(&self) -> &ProviderInfo;
    fn embed_image(&self, image: &RgbImage) -> Result<FeatureVector, FeatureError>;
    fn embed_text(&self, text: &str) -> Result<FeatureVector, FeatureError>;
    /// Mask with the image's dimensions; prompts are `(u, v)` pixel coordinates.
    fn segment(&self, image: &RgbImage, prompts: &[[f64; 2]]) -> Result<BinaryMask, FeatureError>;
    /// Concurrent requests the provider tolerates.
    fn max_in_flight(&self) -> usize {
        usize::MAX
    }
}

impl<P: FeatureProvider + ?Sized> FeatureProvider for Box<P> {
    fn info(&self) -> &ProviderInfo {
        (**self).info()
    }
    fn embed_image(&self, image: &RgbImage) -> Result<FeatureVector, FeatureError> {
        (**self).embed_image(image)
    }
    fn embed_text(&self, text: &str) -> Result<FeatureVector, FeatureError> {
        (**self).embed_text(text)
    }
    fn segment(&self, image: &RgbImage, prompts: &[[f64; 2]]) -> Result<BinaryMask, FeatureError> {
        (**self).segment(image, prompts)
    }
    fn max_in_flight(&self) -> usize {
        (**self).max_in_flight()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    pub prompts_per_view: usize,
    pub crop_padding: f64,
    pub min_mask_pixels: usize,
    /// Set from the master seed by the pipeline; not part of config files.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            prompts_per_view: 5,
            crop_padding: 0.1,
            min_mask_pixels: 16,
            seed: 0,
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<(), FeatureError> {
        if self.prompts_per_view < 1 {
            return Err(FeatureError::InvalidArgument("prompts_per_view must be >= 1".into()));
        }
        if !(self.crop_padding >= 0.0 && self.crop_padding.is_finite()) {
            return Err(FeatureError::InvalidArgument("crop_padding must be >= 0".into()));
        }
        Ok(())
    }
}

/// Features keyed by superpoint id, tagged with the provider that made them.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct FeatureSet {
    pub provider: String,
    pub dim: usize,
    pub features: BTreeMap<u32, FeatureVector>,
}

impl FeatureSet {
    pub fn new(info: &ProviderInfo) -> Self {
        Self {
            provider: info.name.clone(),
            dim: info.dim,
            features: BTreeMap::new(),
        }
    }

    pub fn get(&self, sp: u32) -> Option<&FeatureVector> {
        self.features.get(&sp)
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }
}

impl CacheCodec for FeatureSet {
    const KIND: ArtifactKind = ArtifactKind::Features;

    fn encode(&self, w: &mut CacheWriter) {
        encode_feature_set(self, w);
    }

    fn decode(r: &mut CacheReader<'_>) -> Result<Self, SceneError> {
        decode_feature_set(r)
    }
}

pub(crate) fn encode_feature_set(set: &FeatureSet, w: &mut CacheWriter) {
    w.str(&set.provider);
    w.len(set.dim);
    w.len(set.features.len());
    for (sp, f) in &set.features {
        w.u32(*sp);
        w.f64s(f.as_slice());
    }
}

pub(crate) fn decode_feature_set(r: &mut CacheReader<'_>) -> Result<FeatureSet, SceneError> {
    let provider = r.str()?;
    let dim = r.u64()? as usize;
    let n = r.len(12)?;
    let mut features = BTreeMap::new();
    for _ in 0..n {
        let sp = r.u32()?;
        let v = r.f64s()?;
        if v.len() != dim {
            return Err(SceneError::CorruptCache(format!("feature of superpoint {sp} has dim {}", v.len())));
        }
        // stored vectors are already unit; keep the exact bits
        features.insert(sp, FeatureVector(v));
    }
    Ok(FeatureSet {
        provider,
        dim,
        features,
    })
}

/// Pixel crop plus the mask it was made from.
#[derive(Clone, Debug, PartialEq)]
pub struct CropSpec {
    pub view_id: String,
    /// Inclusive `[x0, y0, x1, y1]`.
    pub bbox: [u32; 4],
    pub mask: BinaryMask,
    pub prompts_used: Vec<[f64; 2]>,
}

/// Seed for the prompt sampler of one (superpoint, view) pair.
pub fn prompt_seed(seed: u64, sp: u32, view_id: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(sp.to_le_bytes());
    h.update(view_id.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// `min(m, |visible|)` pixels drawn uniformly without replacement.
pub fn sample_prompts(visible: &[VisiblePoint], m: usize, seed: u64) -> Result<Vec<[f64; 2]>, FeatureError> {
    if visible.is_empty() {
        return Err(FeatureError::NoVisiblePoints);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = rand::seq::index::sample(&mut rng, visible.len(), m.min(visible.len()));
    Ok(picks.into_iter().map(|i| visible[i].pixel).collect())
}

/// Crops `rgb` to the padded bounding box of `mask` and paints every
/// unmasked pixel white.
pub fn masked_crop(
    rgb: &RgbImage,
    mask: &BinaryMask,
    padding: f64,
    min_mask_pixels: usize,
) -> Result<(RgbImage, [u32; 4]), FeatureError> {
    if (mask.width, mask.height) != rgb.dimensions() {
        return Err(FeatureError::InvalidArgument(format!(
            "mask is {}x{}, image is {}x{}",
            mask.width,
            mask.height,
            rgb.width(),
            rgb.height()
        )));
    }
    let pixels = mask.count();
    let Some([x0, y0, x1, y1]) = mask.bbox().filter(|_| pixels >= min_mask_pixels.max(1)) else {
        return Err(FeatureError::EmptyMask {
            pixels,
            min: min_mask_pixels.max(1),
        });
    };
    let (w, h) = ((x1 - x0 + 1) as f64, (y1 - y0 + 1) as f64);
    let pad = (padding * (w * w + h * h).sqrt()).round() as u32;
    let bbox = [
        x0.saturating_sub(pad),
        y0.saturating_sub(pad),
        (x1 + pad).min(rgb.width() - 1),
        (y1 + pad).min(rgb.height() - 1),
    ];
    let crop = RgbImage::from_fn(bbox[2] - bbox[0] + 1, bbox[3] - bbox[1] + 1, |x, y| {
        let (sx, sy) = (x + bbox[0], y + bbox[1]);
        if mask.get(sx, sy) {
            *rgb.get_pixel(sx, sy)
        } else {
            Rgb([255, 255, 255])
        }
    });
    Ok((crop, bbox))
}

/// Embedding of one view's masked crop, or `None` if the mask is too small.
pub fn view_embedding(
    sp: u32,
    view: &CameraView,
    visible: &[VisiblePoint],
    provider: &dyn FeatureProvider,
    cfg: &FeatureConfig,
) -> Result<Option<(FeatureVector, CropSpec)>, FeatureError> {
    let prompts = sample_prompts(visible, cfg.prompts_per_view, prompt_seed(cfg.seed, sp, &view.view_id))?;
    let mask = provider.segment(&view.rgb, &prompts)?;
    let (crop, bbox) = match masked_crop(&view.rgb, &mask, cfg.crop_padding, cfg.min_mask_pixels) {
        Ok(c) => c,
        Err(FeatureError::EmptyMask { .. }) => return Ok(None),
        Err(e) => return Err(e),
    };
    let embedding = provider.embed_image(&crop)?;
    check_dim(provider, &embedding)?;
    Ok(Some((
        embedding,
        CropSpec {
            view_id: view.view_id.clone(),
            bbox,
            mask,
            prompts_used: prompts,
        },
    )))
}

fn check_dim(provider: &dyn FeatureProvider, v: &FeatureVector) -> Result<(), FeatureError> {
    let expected = provider.info().dim;
    if v.dim() != expected {
        return Err(FeatureError::DimMismatch {
            expected,
            found: v.dim(),
        });
    }
    Ok(())
}

/// Top-k view selection parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ViewSelection {
    pub k: usize,
    pub min_visible: usize,
}

impl Default for ViewSelection {
    fn default() -> Self {
        Self { k: 5, min_visible: 24 }
    }
}

/// Mean embedding over the superpoint's top-k views; `None` when no view
/// yields a usable crop.
pub fn extract_superpoint_feature(
    sp: u32,
    table: &VisibilityTable,
    views: &[CameraView],
    provider: &dyn FeatureProvider,
    cfg: &FeatureConfig,
    selection: ViewSelection,
) -> Result<Option<FeatureVector>, FeatureError> {
    let by_id: HashMap<&str, &CameraView> = views.iter().map(|v| (v.view_id.as_str(), v)).collect();
    extract_with_lookup(sp, table, &by_id, provider, cfg, selection)
}

fn extract_with_lookup(
    sp: u32,
    table: &VisibilityTable,
    by_id: &HashMap<&str, &CameraView>,
    provider: &dyn FeatureProvider,
    cfg: &FeatureConfig,
    selection: ViewSelection,
) -> Result<Option<FeatureVector>, FeatureError> {
    let mut embeddings = Vec::new();
    for view_id in top_k_views(table, sp, selection.k.max(1), selection.min_visible) {
        let Some(view) = by_id.get(view_id.as_str()) else {
            return Err(FeatureError::InvalidArgument(format!("view {view_id} not loaded")));
        };
        if let Some((e, _)) = view_embedding(sp, view, table.visible_points(sp, &view_id), provider, cfg)? {
            embeddings.push(e);
        }
    }
    if embeddings.is_empty() {
        return Ok(None);
    }
    FeatureVector::weighted_mean(embeddings.iter().map(|e| (e, 1.0))).map(Some)
}

/// Features for the superpoints in `only` (all of them if `None`). Jobs run
/// concurrently up to the provider's in-flight limit.
pub fn extract_features(
    graph: &SuperpointGraph,
    table: &VisibilityTable,
    views: &[CameraView],
    provider: &dyn FeatureProvider,
    cfg: &FeatureConfig,
    selection: ViewSelection,
    only: Option<&BTreeSet<u32>>,
) -> Result<FeatureSet, FeatureError> {
    cfg.validate()?;
    let by_id: HashMap<&str, &CameraView> = views.iter().map(|v| (v.view_id.as_str(), v)).collect();
    let ids: Vec<u32> = match only {
        Some(set) => set.iter().copied().filter(|&s| (s as usize) < graph.len()).collect(),
        None => (0..graph.len() as u32).collect(),
    };
    let mut set = FeatureSet::new(provider.info());
    let window = provider.max_in_flight().clamp(1, ids.len().max(1));
    for chunk in ids.chunks(window) {
        let results = crate::par::map(chunk, |&sp| extract_with_lookup(sp, table, &by_id, provider, cfg, selection));
        for (&sp, r) in chunk.iter().zip(results) {
            if let Some(f) = r? {
                set.features.insert(sp, f);
            }
        }
    }
    Ok(set)
}
