//! IoU, IoU-single and classic mIoU.
//!
//! IoU-single segments each ground-truth class of an image on its own, with
//! only that class's query and contrastive concepts as prompts. Classic mIoU
//! prompts every dataset class at once and scores contrastive-concept pixels
//! as background.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ccgen::{CcError, CcSource, NoContrast};
use crate::embed::EmbeddingProvider;
use crate::segment::{
    BOTTOM, FeatureMap, PromptSet, SegMap, SegmentError, Segmenter, SigmoidSegmenter, apply_cc_mask, grid_from_bytes,
    grid_to_bytes, patch_logits, remap_cc_to_background, sidecar_path, sigmoid,
};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("pixel value {0} has no label and is not the ignore id")]
    UnlabeledPixel(u16),
    #[error("no defined score to aggregate")]
    NoScores,
    #[error("class {class:?}")]
    Contrast {
        class: String,
        #[source]
        source: CcError,
    },
    #[error("class {class:?}")]
    Segment {
        class: String,
        #[source]
        source: SegmentError,
    },
    #[error(transparent)]
    Map(#[from] SegmentError),
    #[error("ground-truth sidecar: {0}")]
    Format(String),
}

impl MetricsError {
    /// True when the completion service, not the input, failed.
    pub fn is_remote(&self) -> bool {
        matches!(self, MetricsError::Contrast { source, .. } if source.is_remote())
    }
}

/// Annotated class ids per pixel with their label strings.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroundTruth {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u16>,
    pub labels: BTreeMap<u16, String>,
    pub ignore_id: Option<u16>,
    pub background_id: Option<u16>,
}

#[derive(Debug, Serialize, Deserialize)]
struct GtSidecar {
    labels: BTreeMap<u16, String>,
    ignore_id: Option<u16>,
    #[serde(default)]
    background_id: Option<u16>,
}

impl GroundTruth {
    pub fn new(
        height: usize,
        width: usize,
        pixels: Vec<u16>,
        labels: BTreeMap<u16, String>,
        ignore_id: Option<u16>,
        background_id: Option<u16>,
    ) -> Result<Self, MetricsError> {
        if pixels.len() != height * width {
            return Err(MetricsError::Shape(format!("{} pixels for {height}x{width}", pixels.len())));
        }
        if let Some(&bad) = pixels.iter().find(|&&p| Some(p) != ignore_id && !labels.contains_key(&p)) {
            return Err(MetricsError::UnlabeledPixel(bad));
        }
        Ok(Self {
            height,
            width,
            pixels,
            labels,
            ignore_id,
            background_id,
        })
    }

    pub fn from_parts(bytes: &[u8], sidecar: &str) -> Result<Self, MetricsError> {
        let (height, width, pixels) = grid_from_bytes(bytes)?;
        let side: GtSidecar = serde_json::from_str(sidecar).map_err(|e| MetricsError::Format(e.to_string()))?;
        Self::new(height, width, pixels, side.labels, side.ignore_id, side.background_id)
    }

    pub fn load(path: &Path) -> Result<Self, MetricsError> {
        let read = |p: &Path| {
            fs::read(p).map_err(|source| SegmentError::Io {
                path: p.display().to_string(),
                source,
            })
        };
        let bytes = read(path)?;
        let side = String::from_utf8(read(&sidecar_path(path))?).map_err(|e| MetricsError::Format(e.to_string()))?;
        Self::from_parts(&bytes, &side)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        grid_to_bytes(self.height, self.width, &self.pixels)
    }

    pub fn sidecar_json(&self) -> String {
        let side = GtSidecar {
            labels: self.labels.clone(),
            ignore_id: self.ignore_id,
            background_id: self.background_id,
        };
        let mut s = serde_json::to_string_pretty(&side).expect("sidecar serializes");
        s.push('\n');
        s
    }

    pub fn ignore_mask(&self) -> Vec<bool> {
        self.pixels.iter().map(|&p| Some(p) == self.ignore_id).collect()
    }

    /// Class ids present in the image, ignore id excluded, ascending.
    pub fn present(&self) -> BTreeSet<u16> {
        self.pixels.iter().copied().filter(|&p| Some(p) != self.ignore_id).collect()
    }

    /// Classes scored by IoU-single: present, neither ignore nor background.
    pub fn scored_classes(&self) -> Vec<u16> {
        self.present()
            .into_iter()
            .filter(|&c| Some(c) != self.background_id)
            .collect()
    }
}

/// Intersection and union pixel counts outside the ignore mask.
pub fn overlap(pred: &[bool], gt: &[bool], ignore: Option<&[bool]>) -> Result<(u64, u64), MetricsError> {
    if pred.len() != gt.len() || ignore.is_some_and(|m| m.len() != gt.len()) {
        return Err(MetricsError::Shape(format!("pred {} vs gt {} pixels", pred.len(), gt.len())));
    }
    let (mut inter, mut union) = (0u64, 0u64);
    for (i, (&p, &g)) in pred.iter().zip(gt).enumerate() {
        if ignore.is_some_and(|m| m[i]) {
            continue;
        }
        inter += (p && g) as u64;
        union += (p || g) as u64;
    }
    Ok((inter, union))
}

fn ratio(inter: u64, union: u64) -> Option<f64> {
    (union > 0).then(|| inter as f64 / union as f64)
}

/// `None` when the union is empty.
pub fn iou(pred: &[bool], gt: &[bool], ignore: Option<&[bool]>) -> Result<Option<f64>, MetricsError> {
    let (inter, union) = overlap(pred, gt, ignore)?;
    Ok(ratio(inter, union))
}

fn mean_defined(values: impl IntoIterator<Item = Option<f64>>) -> Option<f64> {
    let (sum, n) = values
        .into_iter()
        .flatten()
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub class_id: u16,
    pub label: String,
    pub intersection: u64,
    pub union: u64,
    pub iou: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageResult {
    pub image: String,
    pub scores: Vec<ClassScore>,
    /// Mean of the defined scores; `None` for images with nothing scored.
    pub mean: Option<f64>,
}

/// One image's IoU-single: every scored class is segmented with prompts
/// `{q} + CC(q)` and its query pixels compared with the class mask.
pub fn iou_single_image(
    image: &str,
    features: &FeatureMap,
    gt: &GroundTruth,
    cc: &dyn CcSource,
    provider: &dyn EmbeddingProvider,
    segmenter: &dyn Segmenter,
) -> Result<ImageResult, MetricsError> {
    let ignore = gt.ignore_mask();
    let mut scores = Vec::new();
    for class_id in gt.scored_classes() {
        let label = gt.labels[&class_id].clone();
        let contrast = cc.contrast_for(&label).map_err(|source| MetricsError::Contrast {
            class: label.clone(),
            source,
        })?;
        let segment_err = |source| MetricsError::Segment {
            class: label.clone(),
            source,
        };
        let prompts = PromptSet::build(std::slice::from_ref(&label), &contrast, provider).map_err(segment_err)?;
        let seg = segmenter
            .segment(features, &prompts, gt.height, gt.width)
            .map_err(segment_err)?;
        let pred = seg.mask(0);
        let truth: Vec<bool> = gt.pixels.iter().map(|&p| p == class_id).collect();
        let (intersection, union) = overlap(&pred, &truth, Some(&ignore))?;
        scores.push(ClassScore {
            class_id,
            label,
            intersection,
            union,
            iou: ratio(intersection, union),
        });
    }
    Ok(ImageResult {
        image: image.to_string(),
        mean: mean_defined(scores.iter().map(|s| s.iou)),
        scores,
    })
}

/// How per-image IoU-single scores become one number.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    /// Mean over images of each image's mean.
    ImageMean,
    /// Dataset-wide intersection and union per class, then mean over classes.
    #[default]
    ClassAccumulate,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassTotals {
    pub intersection: u64,
    pub union: u64,
}

impl ClassTotals {
    pub fn iou(&self) -> Option<f64> {
        ratio(self.intersection, self.union)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub image_mean: f64,
    pub class_accumulate: f64,
    pub per_class: BTreeMap<String, ClassTotals>,
    pub images_scored: usize,
    pub images_skipped: usize,
}

impl Aggregate {
    pub fn value(&self, mode: Aggregation) -> f64 {
        match mode {
            Aggregation::ImageMean => self.image_mean,
            Aggregation::ClassAccumulate => self.class_accumulate,
        }
    }
}

fn accumulate<'a>(scores: impl IntoIterator<Item = &'a ClassScore>) -> BTreeMap<String, ClassTotals> {
    let mut per_class: BTreeMap<String, ClassTotals> = BTreeMap::new();
    for s in scores {
        let t = per_class.entry(s.label.clone()).or_default();
        t.intersection += s.intersection;
        t.union += s.union;
    }
    per_class
}

pub fn iou_single_dataset(results: &[ImageResult]) -> Result<Aggregate, MetricsError> {
    let image_mean = mean_defined(results.iter().map(|r| r.mean)).ok_or(MetricsError::NoScores)?;
    let per_class = accumulate(results.iter().flat_map(|r| &r.scores));
    let class_accumulate = mean_defined(per_class.values().map(ClassTotals::iou)).ok_or(MetricsError::NoScores)?;
    let images_scored = results.iter().filter(|r| r.mean.is_some()).count();
    Ok(Aggregate {
        image_mean,
        class_accumulate,
        per_class,
        images_scored,
        images_skipped: results.len() - images_scored,
    })
}

/// Per-class intersection and union of one multi-query prediction.
///
/// Classes are matched by label string; a predicted label absent from the
/// annotation only adds to its own union.
pub fn classic_overlaps(pred: &SegMap, gt: &GroundTruth) -> Result<BTreeMap<String, ClassTotals>, MetricsError> {
    if pred.height != gt.height || pred.width != gt.width {
        return Err(MetricsError::Shape(format!(
            "prediction {}x{} vs ground truth {}x{}",
            pred.height, pred.width, gt.height, gt.width
        )));
    }
    let mut per_class: BTreeMap<String, ClassTotals> = BTreeMap::new();
    for (&p, &g) in pred.pixels.iter().zip(&gt.pixels) {
        if Some(g) == gt.ignore_id {
            continue;
        }
        let truth = gt.labels[&g].as_str();
        let guess = (p != BOTTOM).then(|| pred.labels[p as usize].as_str());
        if guess == Some(truth) {
            let t = per_class.entry(truth.to_string()).or_default();
            t.intersection += 1;
            t.union += 1;
        } else {
            per_class.entry(truth.to_string()).or_default().union += 1;
            if let Some(guess) = guess {
                per_class.entry(guess.to_string()).or_default().union += 1;
            }
        }
    }
    Ok(per_class)
}

/// One multi-query segmentation of an image with every dataset class and the
/// merged contrastive concepts. Contrastive pixels count as `background` when
/// it is one of the queries and as unlabeled otherwise.
pub fn classic_predict(
    features: &FeatureMap,
    gt: &GroundTruth,
    queries: &[String],
    ccs: &[String],
    background: &str,
    provider: &dyn EmbeddingProvider,
    segmenter: &dyn Segmenter,
) -> Result<SegMap, MetricsError> {
    let prompts = PromptSet::build(queries, ccs, provider)?;
    let closed = segmenter.segment_closed(features, &prompts, gt.height, gt.width)?;
    if !prompts.cc_mask().iter().any(|&c| c) {
        Ok(closed)
    } else if queries.iter().any(|q| q == background) {
        Ok(remap_cc_to_background(&closed, &prompts, background)?)
    } else {
        Ok(apply_cc_mask(&closed, &prompts))
    }
}

pub fn merge_totals(into: &mut BTreeMap<String, ClassTotals>, from: &BTreeMap<String, ClassTotals>) {
    for (label, t) in from {
        let e = into.entry(label.clone()).or_default();
        e.intersection += t.intersection;
        e.union += t.union;
    }
}

/// Mean IoU over classes with a non-empty union.
pub fn miou(per_class: &BTreeMap<String, ClassTotals>) -> Result<f64, MetricsError> {
    mean_defined(per_class.values().map(ClassTotals::iou)).ok_or(MetricsError::NoScores)
}

/// An image ready for evaluation.
#[derive(Debug, Clone)]
pub struct EvalImage {
    pub id: String,
    pub features: FeatureMap,
    pub gt: GroundTruth,
}

/// `err` and its causes, joined with ": ".
pub fn error_chain(err: &dyn std::error::Error) -> String {
    let mut out = err.to_string();
    let mut cause = err.source();
    while let Some(c) = cause {
        out.push_str(": ");
        out.push_str(&c.to_string());
        cause = c.source();
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageFailure {
    pub image: String,
    pub error: String,
    pub remote: bool,
}

/// IoU-single over a batch of images, parallel per image. Results keep input
/// order; failing images are reported and skipped.
pub fn run_iou_single(
    images: &[EvalImage],
    cc: &dyn CcSource,
    provider: &dyn EmbeddingProvider,
    segmenter: &dyn Segmenter,
) -> (Vec<ImageResult>, Vec<ImageFailure>) {
    let outcomes: Vec<_> = images
        .par_iter()
        .map(|img| iou_single_image(&img.id, &img.features, &img.gt, cc, provider, segmenter))
        .collect();
    split(images, outcomes)
}

/// Classic mIoU totals over a batch, parallel per image.
pub fn run_classic(
    images: &[EvalImage],
    queries: &[String],
    ccs: &[String],
    background: &str,
    provider: &dyn EmbeddingProvider,
    segmenter: &dyn Segmenter,
) -> (BTreeMap<String, ClassTotals>, Vec<ImageFailure>) {
    let outcomes: Vec<_> = images
        .par_iter()
        .map(|img| {
            let pred = classic_predict(&img.features, &img.gt, queries, ccs, background, provider, segmenter)?;
            classic_overlaps(&pred, &img.gt)
        })
        .collect();
    let (per_image, failures) = split(images, outcomes);
    let mut totals = BTreeMap::new();
    for t in &per_image {
        merge_totals(&mut totals, t);
    }
    (totals, failures)
}

fn split<T>(images: &[EvalImage], outcomes: Vec<Result<T, MetricsError>>) -> (Vec<T>, Vec<ImageFailure>) {
    let mut ok = Vec::new();
    let mut failures = Vec::new();
    for (img, outcome) in images.iter().zip(outcomes) {
        match outcome {
            Ok(v) => ok.push(v),
            Err(e) => {
                log::warn!("image {}: {}", img.id, error_chain(&e));
                failures.push(ImageFailure {
                    image: img.id.clone(),
                    error: error_chain(&e),
                    remote: e.is_remote(),
                });
            }
        }
    }
    (ok, failures)
}

/// Smallest and largest per-patch sigmoid score between each image's scored
/// classes and its features.
pub fn sigmoid_score_range(images: &[EvalImage], provider: &dyn EmbeddingProvider) -> Result<(f64, f64), MetricsError> {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for img in images {
        for class_id in img.gt.scored_classes() {
            let label = &img.gt.labels[&class_id];
            let prompts = PromptSet::build(std::slice::from_ref(label), &[], provider)?;
            let logits = patch_logits(&img.features, &prompts)?;
            for &v in &logits.data {
                lo = lo.min(sigmoid(v));
                hi = hi.max(sigmoid(v));
            }
        }
    }
    if lo > hi {
        return Err(MetricsError::NoScores);
    }
    Ok((lo, hi))
}

/// `steps` thresholds at the midpoints of `steps` equal slices of `[lo, hi]`.
pub fn sweep_thresholds(lo: f64, hi: f64, steps: usize) -> Vec<f64> {
    (0..steps)
        .map(|i| lo + (hi - lo) * (i as f64 + 0.5) / steps as f64)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub threshold: f64,
    pub image_mean: Option<f64>,
    pub class_accumulate: Option<f64>,
    pub failures: usize,
}

/// IoU-single of the sigmoid baseline (no contrastive concepts) at each
/// threshold.
pub fn sigmoid_sweep(images: &[EvalImage], provider: &dyn EmbeddingProvider, thresholds: &[f64]) -> Vec<SweepPoint> {
    thresholds
        .iter()
        .map(|&threshold| {
            let segmenter = SigmoidSegmenter { threshold };
            let (results, failures) = run_iou_single(images, &NoContrast, provider, &segmenter);
            let agg = iou_single_dataset(&results).ok();
            SweepPoint {
                threshold,
                image_mean: agg.as_ref().map(|a| a.image_mean),
                class_accumulate: agg.as_ref().map(|a| a.class_accumulate),
                failures: failures.len(),
            }
        })
        .collect()
}

/// Evaluation output written as JSON and TSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// `"iou-single"` or `"miou"`.
    pub metric: String,
    pub aggregation: Aggregation,
    pub value: f64,
    pub image_mean: Option<f64>,
    pub class_accumulate: f64,
    pub per_class: BTreeMap<String, ClassTotals>,
    pub per_image: Vec<ImageResult>,
    pub failures: Vec<ImageFailure>,
    pub meta: BTreeMap<String, serde_json::Value>,
}

impl MetricsReport {
    pub fn iou_single(results: Vec<ImageResult>, failures: Vec<ImageFailure>, aggregation: Aggregation) -> Result<Self, MetricsError> {
        let agg = iou_single_dataset(&results)?;
        Ok(Self {
            metric: "iou-single".into(),
            aggregation,
            value: agg.value(aggregation),
            image_mean: Some(agg.image_mean),
            class_accumulate: agg.class_accumulate,
            per_class: agg.per_class,
            per_image: results,
            failures,
            meta: BTreeMap::new(),
        })
    }

    pub fn classic(per_class: BTreeMap<String, ClassTotals>, failures: Vec<ImageFailure>) -> Result<Self, MetricsError> {
        let value = miou(&per_class)?;
        Ok(Self {
            metric: "miou".into(),
            aggregation: Aggregation::ClassAccumulate,
            value,
            image_mean: None,
            class_accumulate: value,
            per_class,
            per_image: Vec::new(),
            failures,
            meta: BTreeMap::new(),
        })
    }

    pub fn to_json(&self) -> String {
        let value = serde_json::to_value(self).expect("report serializes");
        let mut s = serde_json::to_string_pretty(&value).expect("value serializes");
        s.push('\n');
        s
    }

    /// `kind  name  intersection  union  value` rows.
    pub fn to_tsv(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.6}"));
        let mut out = String::from("kind\tname\tintersection\tunion\tvalue\n");
        for (label, t) in &self.per_class {
            let _ = writeln!(out, "class\t{label}\t{}\t{}\t{}", t.intersection, t.union, fmt(t.iou()));
        }
        for r in &self.per_image {
            let _ = writeln!(out, "image\t{}\t\t\t{}", r.image, fmt(r.mean));
        }
        if let Some(m) = self.image_mean {
            let _ = writeln!(out, "aggregate\timage-mean\t\t\t{}", fmt(Some(m)));
        }
        let _ = writeln!(out, "aggregate\tclass-accumulate\t\t\t{}", fmt(Some(self.class_accumulate)));
        out
    }
}
