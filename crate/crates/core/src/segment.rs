//! Argmax segmentation of precomputed dense features against text prompts.
//!
//! Cosine logits are upsampled bilinearly (align-corners false) to pixel
//! resolution and arg-maxed; pixels won by a contrastive concept then become
//! [`BOTTOM`], the "none of the queries" label. A sigmoid-threshold baseline
//! is provided for comparison.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::{ByteReader, EmbedError, EmbeddingProvider, dot, renormalize};

/// The dummy label for pixels that match no query.
pub const BOTTOM: u16 = u16::MAX;
pub const FEATURE_MAGIC: &[u8; 7] = b"CCFEAT1";
pub const SEGMAP_MAGIC: &[u8; 6] = b"CCSEG1";

#[derive(Debug, Error)]
pub enum SegmentError {
    #[error("dimension mismatch: features have {features}, prompts have {prompts}")]
    DimMismatch { features: usize, prompts: usize },
    #[error("feature map must have h, w, d >= 1, got {h}x{w}x{d}")]
    EmptyFeatures { h: usize, w: usize, d: usize },
    #[error("patch ({y}, {x}) has zero or non-finite norm")]
    ZeroPatch { y: usize, x: usize },
    #[error("duplicate prompt label {0:?}")]
    DuplicateLabel(String),
    #[error("prompt set needs at least one non-contrastive label")]
    NoQuery,
    #[error("too many labels: {0}")]
    TooManyLabels(usize),
    #[error("prompt set is inconsistent: {0}")]
    BadPrompts(String),
    #[error("no embedding for prompt {0:?}")]
    MissingEmbedding(String),
    #[error("output {out_h}x{out_w} is smaller than the patch grid {h}x{w}")]
    Downsample { h: usize, w: usize, out_h: usize, out_w: usize },
    #[error("threshold must lie in (0, 1), got {0}")]
    InvalidThreshold(f64),
    #[error("background label {0:?} is missing or is a contrastive concept")]
    NoBackground(String),
    #[error("{0}")]
    Format(String),
    #[error("i/o error on {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn format_err(e: EmbedError) -> SegmentError {
    SegmentError::Format(e.to_string())
}

fn read_file(path: &Path) -> Result<Vec<u8>, SegmentError> {
    fs::read(path).map_err(|source| SegmentError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// `h x w` grid of unit `d`-vectors, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    h: usize,
    w: usize,
    d: usize,
    data: Vec<f32>,
}

impl FeatureMap {
    /// Normalizes every patch vector.
    pub fn new(h: usize, w: usize, d: usize, mut data: Vec<f32>) -> Result<Self, SegmentError> {
        if h == 0 || w == 0 || d == 0 {
            return Err(SegmentError::EmptyFeatures { h, w, d });
        }
        if data.len() != h * w * d {
            return Err(SegmentError::Format(format!(
                "expected {} values for {h}x{w}x{d}, got {}",
                h * w * d,
                data.len()
            )));
        }
        for (p, v) in data.chunks_mut(d).enumerate() {
            let norm = renormalize(v);
            if norm == 0.0 || !norm.is_finite() {
                return Err(SegmentError::ZeroPatch { y: p / w, x: p % w });
            }
        }
        Ok(Self { h, w, d, data })
    }

    pub fn from_patches(h: usize, w: usize, patches: &[Vec<f32>]) -> Result<Self, SegmentError> {
        let d = patches.first().map_or(0, Vec::len);
        if patches.iter().any(|p| p.len() != d) {
            return Err(SegmentError::Format("patches differ in dimension".into()));
        }
        Self::new(h, w, d, patches.concat())
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn patch(&self, y: usize, x: usize) -> &[f32] {
        let start = (y * self.w + x) * self.d;
        &self.data[start..start + self.d]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(19 + self.data.len() * 4);
        out.extend_from_slice(FEATURE_MAGIC);
        for n in [self.h, self.w, self.d] {
            out.extend_from_slice(&(n as u32).to_le_bytes());
        }
        for x in &self.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, SegmentError> {
        let mut r = ByteReader::new(bytes);
        if r.take(FEATURE_MAGIC.len()).map_err(format_err)? != FEATURE_MAGIC {
            return Err(SegmentError::Format("bad feature-map magic".into()));
        }
        let h = r.u32().map_err(format_err)? as usize;
        let w = r.u32().map_err(format_err)? as usize;
        let d = r.u32().map_err(format_err)? as usize;
        let n = h
            .checked_mul(w)
            .and_then(|n| n.checked_mul(d))
            .ok_or_else(|| SegmentError::Format("feature map too large".into()))?;
        let mut data = Vec::with_capacity(n.min(1 << 24));
        for _ in 0..n {
            data.push(r.f32().map_err(format_err)?);
        }
        if !r.is_done() {
            return Err(SegmentError::Format("trailing bytes in feature map".into()));
        }
        Self::new(h, w, d, data)
    }

    pub fn load(path: &Path) -> Result<Self, SegmentError> {
        Self::from_bytes(&read_file(path)?)
    }
}

/// Queries followed by contrastive concepts, with one unit embedding each.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptSet {
    labels: Vec<String>,
    embeddings: Vec<Vec<f32>>,
    cc_mask: Vec<bool>,
}

impl PromptSet {
    pub fn new(labels: Vec<String>, mut embeddings: Vec<Vec<f32>>, cc_mask: Vec<bool>) -> Result<Self, SegmentError> {
        if labels.len() != embeddings.len() || labels.len() != cc_mask.len() {
            return Err(SegmentError::BadPrompts(format!(
                "{} labels, {} embeddings, {} mask entries",
                labels.len(),
                embeddings.len(),
                cc_mask.len()
            )));
        }
        if labels.len() >= BOTTOM as usize {
            return Err(SegmentError::TooManyLabels(labels.len()));
        }
        if !cc_mask.iter().any(|cc| !cc) {
            return Err(SegmentError::NoQuery);
        }
        let mut seen = HashSet::new();
        if let Some(dup) = labels.iter().find(|l| !seen.insert(l.as_str())) {
            return Err(SegmentError::DuplicateLabel(dup.clone()));
        }
        let d = embeddings[0].len();
        for (label, v) in labels.iter().zip(&mut embeddings) {
            if v.len() != d {
                return Err(SegmentError::DimMismatch {
                    features: d,
                    prompts: v.len(),
                });
            }
            let norm = renormalize(v);
            if norm == 0.0 || !norm.is_finite() {
                return Err(SegmentError::BadPrompts(format!("zero embedding for {label:?}")));
            }
        }
        Ok(Self {
            labels,
            embeddings,
            cc_mask,
        })
    }

    /// `queries` then every concept of `ccs` that is neither a query nor a
    /// repeat, embedded by `provider`.
    pub fn build(queries: &[String], ccs: &[String], provider: &dyn EmbeddingProvider) -> Result<Self, SegmentError> {
        let mut labels: Vec<String> = Vec::new();
        let mut cc_mask = Vec::new();
        let mut seen = HashSet::new();
        for q in queries {
            if !seen.insert(q.as_str()) {
                return Err(SegmentError::DuplicateLabel(q.clone()));
            }
            labels.push(q.clone());
            cc_mask.push(false);
        }
        for c in ccs {
            if seen.insert(c.as_str()) {
                labels.push(c.clone());
                cc_mask.push(true);
            }
        }
        let embeddings = labels
            .iter()
            .map(|l| provider.embed(l).ok_or_else(|| SegmentError::MissingEmbedding(l.clone())))
            .collect::<Result<_, _>>()?;
        Self::new(labels, embeddings, cc_mask)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn embedding(&self, k: usize) -> &[f32] {
        &self.embeddings[k]
    }

    pub fn is_cc(&self, k: usize) -> bool {
        self.cc_mask[k]
    }

    pub fn cc_mask(&self) -> &[bool] {
        &self.cc_mask
    }

    pub fn dim(&self) -> usize {
        self.embeddings[0].len()
    }

    pub fn index(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }
}

/// Per-patch logits, `h x w x k` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitGrid {
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub data: Vec<f64>,
}

impl LogitGrid {
    pub fn new(h: usize, w: usize, k: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), h * w * k, "logit grid size");
        Self { h, w, k, data }
    }

    pub fn get(&self, y: usize, x: usize, k: usize) -> f64 {
        self.data[(y * self.w + x) * self.k + k]
    }

    pub fn patch(&self, y: usize, x: usize) -> &[f64] {
        let start = (y * self.w + x) * self.k;
        &self.data[start..start + self.k]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }
}

pub fn patch_logits(features: &FeatureMap, prompts: &PromptSet) -> Result<LogitGrid, SegmentError> {
    if features.d != prompts.dim() {
        return Err(SegmentError::DimMismatch {
            features: features.d,
            prompts: prompts.dim(),
        });
    }
    let mut data = Vec::with_capacity(features.h * features.w * prompts.len());
    for patch in features.data.chunks(features.d) {
        data.extend(prompts.embeddings.iter().map(|e| dot(patch, e)));
    }
    Ok(LogitGrid::new(features.h, features.w, prompts.len(), data))
}

/// Label map over pixels. Values index `labels`; [`BOTTOM`] marks pixels
/// matching no query.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegMap {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u16>,
    pub labels: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SegSidecar {
    labels: Vec<String>,
    bottom: u16,
}

impl SegMap {
    pub fn get(&self, y: usize, x: usize) -> u16 {
        self.pixels[y * self.width + x]
    }

    pub fn label_of(&self, value: u16) -> Option<&str> {
        self.labels.get(value as usize).map(String::as_str)
    }

    /// Pixels whose value is `label`.
    pub fn mask(&self, label: u16) -> Vec<bool> {
        self.pixels.iter().map(|&p| p == label).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        grid_to_bytes(self.height, self.width, &self.pixels)
    }

    pub fn sidecar_json(&self) -> String {
        let side = SegSidecar {
            labels: self.labels.clone(),
            bottom: BOTTOM,
        };
        let mut s = serde_json::to_string_pretty(&side).expect("sidecar serializes");
        s.push('\n');
        s
    }

    pub fn from_parts(bytes: &[u8], sidecar: &str) -> Result<Self, SegmentError> {
        let (height, width, pixels) = grid_from_bytes(bytes)?;
        let side: SegSidecar = serde_json::from_str(sidecar).map_err(|e| SegmentError::Format(e.to_string()))?;
        if let Some(&bad) = pixels.iter().find(|&&p| p != BOTTOM && p as usize >= side.labels.len()) {
            return Err(SegmentError::Format(format!("pixel value {bad} has no label")));
        }
        Ok(Self {
            height,
            width,
            pixels,
            labels: side.labels,
        })
    }
}

/// Path of the JSON label sidecar written next to a label-map file.
pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".json");
    name.into()
}

/// `CCSEG1` header plus little-endian `u16` pixels.
pub fn grid_to_bytes(height: usize, width: usize, pixels: &[u16]) -> Vec<u8> {
    let mut out = Vec::with_capacity(14 + pixels.len() * 2);
    out.extend_from_slice(SEGMAP_MAGIC);
    out.extend_from_slice(&(height as u32).to_le_bytes());
    out.extend_from_slice(&(width as u32).to_le_bytes());
    for p in pixels {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

pub fn grid_from_bytes(bytes: &[u8]) -> Result<(usize, usize, Vec<u16>), SegmentError> {
    let mut r = ByteReader::new(bytes);
    if r.take(SEGMAP_MAGIC.len()).map_err(format_err)? != SEGMAP_MAGIC {
        return Err(SegmentError::Format("bad label-map magic".into()));
    }
    let height = r.u32().map_err(format_err)? as usize;
    let width = r.u32().map_err(format_err)? as usize;
    let n = height
        .checked_mul(width)
        .ok_or_else(|| SegmentError::Format("label map too large".into()))?;
    let mut pixels = Vec::with_capacity(n.min(1 << 26));
    for _ in 0..n {
        pixels.push(r.u16().map_err(format_err)?);
    }
    if !r.is_done() {
        return Err(SegmentError::Format("trailing bytes in label map".into()));
    }
    Ok((height, width, pixels))
}

pub fn load_segmap(path: &Path) -> Result<SegMap, SegmentError> {
    let bytes = read_file(path)?;
    let side = sidecar_path(path);
    let text = String::from_utf8(read_file(&side)?).map_err(|e| SegmentError::Format(e.to_string()))?;
    SegMap::from_parts(&bytes, &text)
}

/// How patch logits reach pixel resolution.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Upsample {
    /// Bilinear interpolation of logits, then per-pixel argmax.
    #[default]
    BilinearLogits,
    /// Per-patch argmax, then nearest-neighbor upsampling of labels.
    NearestLabels,
}

/// Source sample positions for one axis: `(lo, hi, weight of hi)`.
fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let pos = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

fn nearest_taps(src: usize, dst: usize) -> Vec<usize> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| (((i as f64 + 0.5) * scale).floor() as usize).min(src - 1))
        .collect()
}

fn check_size(h: usize, w: usize, height: usize, width: usize) -> Result<(), SegmentError> {
    if height < h || width < w {
        return Err(SegmentError::Downsample {
            h,
            w,
            out_h: height,
            out_w: width,
        });
    }
    Ok(())
}

/// Calls `f(pixel, values)` with every channel bilinearly interpolated at
/// each output pixel.
fn for_each_interpolated(grid: &LogitGrid, height: usize, width: usize, mut f: impl FnMut(usize, &[f64])) {
    let ys = bilinear_taps(grid.h, height);
    let xs = bilinear_taps(grid.w, width);
    let mut values = vec![0.0; grid.k];
    for (py, &(y0, y1, fy)) in ys.iter().enumerate() {
        for (px, &(x0, x1, fx)) in xs.iter().enumerate() {
            let (a, b, c, d) = (grid.patch(y0, x0), grid.patch(y0, x1), grid.patch(y1, x0), grid.patch(y1, x1));
            for k in 0..grid.k {
                let top = (1.0 - fx) * a[k] + fx * b[k];
                let bottom = (1.0 - fx) * c[k] + fx * d[k];
                values[k] = (1.0 - fy) * top + fy * bottom;
            }
            f(py * width + px, &values);
        }
    }
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = k;
        }
    }
    best
}

/// Closed-world label map: every pixel gets the index of its best label, ties
/// going to the lowest index.
pub fn upsample_and_argmax(
    logits: &LogitGrid,
    labels: &[String],
    height: usize,
    width: usize,
    mode: Upsample,
) -> Result<SegMap, SegmentError> {
    check_size(logits.h, logits.w, height, width)?;
    if labels.len() != logits.k {
        return Err(SegmentError::BadPrompts(format!("{} labels for {} channels", labels.len(), logits.k)));
    }
    let mut pixels = vec![0u16; height * width];
    match mode {
        Upsample::BilinearLogits => {
            for_each_interpolated(logits, height, width, |p, values| pixels[p] = argmax(values) as u16);
        }
        Upsample::NearestLabels => {
            let ys = nearest_taps(logits.h, height);
            let xs = nearest_taps(logits.w, width);
            for (py, &y) in ys.iter().enumerate() {
                for (px, &x) in xs.iter().enumerate() {
                    pixels[py * width + px] = argmax(logits.patch(y, x)) as u16;
                }
            }
        }
    }
    Ok(SegMap {
        height,
        width,
        pixels,
        labels: labels.to_vec(),
    })
}

/// Contrastive-concept pixels become [`BOTTOM`].
pub fn apply_cc_mask(map: &SegMap, prompts: &PromptSet) -> SegMap {
    let pixels = map
        .pixels
        .iter()
        .map(|&p| if p != BOTTOM && prompts.is_cc(p as usize) { BOTTOM } else { p })
        .collect();
    SegMap {
        pixels,
        ..map.clone()
    }
}

/// Contrastive-concept pixels become the `background` label.
pub fn remap_cc_to_background(map: &SegMap, prompts: &PromptSet, background: &str) -> Result<SegMap, SegmentError> {
    let bg = prompts
        .index(background)
        .filter(|&k| !prompts.is_cc(k))
        .ok_or_else(|| SegmentError::NoBackground(background.to_string()))? as u16;
    let pixels = map
        .pixels
        .iter()
        .map(|&p| if p != BOTTOM && prompts.is_cc(p as usize) { bg } else { p })
        .collect();
    Ok(SegMap {
        pixels,
        ..map.clone()
    })
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Sigmoid-threshold baseline. Contrastive concepts are ignored; each pixel
/// takes the query with the highest upsampled sigmoid score if that score
/// exceeds `threshold`, else [`BOTTOM`].
pub fn sigmoid_threshold_segment(
    features: &FeatureMap,
    prompts: &PromptSet,
    threshold: f64,
    height: usize,
    width: usize,
) -> Result<SegMap, SegmentError> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(SegmentError::InvalidThreshold(threshold));
    }
    check_size(features.h, features.w, height, width)?;
    let scores = patch_logits(features, prompts)?.map(sigmoid);
    let mut pixels = vec![BOTTOM; height * width];
    for_each_interpolated(&scores, height, width, |p, values| {
        let mut best: Option<usize> = None;
        for (k, &v) in values.iter().enumerate() {
            if !prompts.is_cc(k) && v > threshold && best.is_none_or(|b| v > values[b]) {
                best = Some(k);
            }
        }
        if let Some(k) = best {
            pixels[p] = k as u16;
        }
    });
    Ok(SegMap {
        height,
        width,
        pixels,
        labels: prompts.labels.clone(),
    })
}

/// Produces an open-world label map for one image.
pub trait Segmenter: Sync {
    fn segment(&self, features: &FeatureMap, prompts: &PromptSet, height: usize, width: usize) -> Result<SegMap, SegmentError>;

    /// Closed-world map before any contrastive-concept handling, used by the
    /// classic protocol. Defaults to [`Segmenter::segment`].
    fn segment_closed(
        &self,
        features: &FeatureMap,
        prompts: &PromptSet,
        height: usize,
        width: usize,
    ) -> Result<SegMap, SegmentError> {
        self.segment(features, prompts, height, width)
    }
}

/// Cosine-argmax segmentation with contrastive pixels sent to [`BOTTOM`].
#[derive(Debug, Clone, Copy, Default)]
pub struct ArgmaxSegmenter {
    pub upsample: Upsample,
}

impl Segmenter for ArgmaxSegmenter {
    fn segment(&self, features: &FeatureMap, prompts: &PromptSet, height: usize, width: usize) -> Result<SegMap, SegmentError> {
        Ok(apply_cc_mask(&self.segment_closed(features, prompts, height, width)?, prompts))
    }

    fn segment_closed(
        &self,
        features: &FeatureMap,
        prompts: &PromptSet,
        height: usize,
        width: usize,
    ) -> Result<SegMap, SegmentError> {
        let logits = patch_logits(features, prompts)?;
        upsample_and_argmax(&logits, prompts.labels(), height, width, self.upsample)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SigmoidSegmenter {
    pub threshold: f64,
}

impl Segmenter for SigmoidSegmenter {
    fn segment(&self, features: &FeatureMap, prompts: &PromptSet, height: usize, width: usize) -> Result<SegMap, SegmentError> {
        sigmoid_threshold_segment(features, prompts, self.threshold, height, width)
    }
}
