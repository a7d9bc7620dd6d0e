//! Combining detections from several models into one ensemble prediction.
//!
//! Three strategies share one [`FusionConfig`]:
//!
//! * [`FusionStrategy::UnionNms`]: pool every model's boxes and run
//!   per-class greedy NMS.
//! * [`FusionStrategy::Consensus`]: cluster boxes and keep a cluster's
//!   top-confidence box only if at least `min_votes` distinct models
//!   contributed to it.
//! * [`FusionStrategy::WeightedFusion`]: cluster boxes and replace each
//!   cluster by a confidence- and weight-averaged box.
//!
//! Processing order everywhere is descending confidence, then model id,
//! then the box's index in its model's list. That order is part of the
//! semantics: outputs do not depend on the order models are supplied in.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use thiserror::Error;

use crate::dataset::{DamageClass, Detection};
use crate::geometry::BBox;
use crate::metrics::{evaluate, GroundTruthIndex, MetricsError};

/// `model_id` given to boxes produced by weighted fusion.
pub const FUSED_MODEL_ID: &str = "ensemble";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FusionError {
    #[error("no model detection sets supplied")]
    EmptyEnsemble,
    #[error("model id `{0}` supplied more than once")]
    DuplicateModel(String),
    #[error("inputs span several images (`{0}` and `{1}`)")]
    MixedImageIds(String, String),
    #[error("invalid fusion config: {0}")]
    InvalidConfig(String),
    #[error("config line {line}: {message}")]
    ConfigSyntax { line: usize, message: String },
    #[error("threshold grid is empty")]
    EmptyGrid,
    #[error("grid value {0} outside [0, 1)")]
    InvalidGridValue(f64),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FusionStrategy {
    #[default]
    UnionNms,
    Consensus,
    WeightedFusion,
}

impl FusionStrategy {
    pub fn name(self) -> &'static str {
        match self {
            Self::UnionNms => "union_nms",
            Self::Consensus => "consensus",
            Self::WeightedFusion => "weighted_fusion",
        }
    }
}

impl fmt::Display for FusionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FusionStrategy {
    type Err = FusionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "union_nms" => Ok(Self::UnionNms),
            "consensus" => Ok(Self::Consensus),
            "weighted_fusion" => Ok(Self::WeightedFusion),
            other => Err(FusionError::InvalidConfig(format!(
                "unknown strategy `{other}` (expected union_nms|consensus|weighted_fusion)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionConfig {
    pub strategy: FusionStrategy,
    /// Boxes cluster (or suppress each other) when IoU is strictly above this.
    pub iou_cluster_threshold: f64,
    /// Consensus only: distinct models a cluster needs to survive.
    pub min_votes: usize,
    /// Per-model weights; models not listed weigh 1.0.
    pub model_weights: BTreeMap<String, f64>,
    /// Weighted fusion only: fused boxes below this confidence are dropped.
    pub skip_box_threshold: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            strategy: FusionStrategy::UnionNms,
            iou_cluster_threshold: 0.5,
            min_votes: 1,
            model_weights: BTreeMap::new(),
            skip_box_threshold: 0.0,
        }
    }
}

impl FusionConfig {
    pub fn weight(&self, model_id: &str) -> f64 {
        self.model_weights.get(model_id).copied().unwrap_or(1.0)
    }

    /// Read `key = value` lines on top of the defaults. Recognised keys:
    /// `strategy`, `iou_cluster_threshold`, `min_votes`,
    /// `skip_box_threshold` and `weight.<model_id>`. `#` starts a comment.
    pub fn parse_kv(text: &str) -> Result<Self, FusionError> {
        let mut cfg = Self::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| FusionError::ConfigSyntax {
                    line,
                    message: format!("expected `key = value`, found `{content}`"),
                })?;
            cfg.set(key, value)
                .map_err(|message| FusionError::ConfigSyntax { line, message })?;
        }
        Ok(cfg)
    }

    /// Set one option from its textual key and value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T, String> {
            v.parse()
                .map_err(|_| format!("bad value `{v}` for `{key}`"))
        }
        match key {
            "strategy" => self.strategy = value.parse().map_err(|e: FusionError| e.to_string())?,
            "iou_cluster_threshold" => self.iou_cluster_threshold = num(key, value)?,
            "min_votes" => self.min_votes = num(key, value)?,
            "skip_box_threshold" => self.skip_box_threshold = num(key, value)?,
            _ => match key.strip_prefix("weight.") {
                Some(model) if !model.is_empty() => {
                    self.model_weights
                        .insert(model.to_string(), num(key, value)?);
                }
                _ => return Err(format!("unknown key `{key}`")),
            },
        }
        Ok(())
    }

    /// Check the config against the models taking part.
    pub fn validate<'a>(
        &self,
        model_ids: impl IntoIterator<Item = &'a str>,
    ) -> Result<(), FusionError> {
        let ids: Vec<&str> = model_ids.into_iter().collect();
        let bad = |m: String| Err(FusionError::InvalidConfig(m));
        if ids.is_empty() {
            return Err(FusionError::EmptyEnsemble);
        }
        if !(self.iou_cluster_threshold > 0.0 && self.iou_cluster_threshold < 1.0) {
            return bad(format!(
                "iou_cluster_threshold {} outside (0, 1)",
                self.iou_cluster_threshold
            ));
        }
        if self.min_votes == 0 || self.min_votes > ids.len() {
            return bad(format!(
                "min_votes {} must be in 1..={} (number of models)",
                self.min_votes,
                ids.len()
            ));
        }
        if !(0.0..=1.0).contains(&self.skip_box_threshold) {
            return bad(format!(
                "skip_box_threshold {} outside [0, 1]",
                self.skip_box_threshold
            ));
        }
        for (model, &w) in &self.model_weights {
            if !(w.is_finite() && w >= 0.0) {
                return bad(format!("weight {w} for `{model}` must be finite and >= 0"));
            }
            if !ids.contains(&model.as_str()) {
                return bad(format!("weight given for unknown model `{model}`"));
            }
        }
        if ids.iter().all(|m| self.weight(m) == 0.0) {
            return bad("all model weights are zero".into());
        }
        Ok(())
    }
}

/// One model's detections.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelDetections {
    pub model_id: String,
    pub detections: Vec<Detection>,
}

impl ModelDetections {
    /// Stamps `model_id` onto every detection.
    pub fn new(model_id: impl Into<String>, detections: Vec<Detection>) -> Self {
        let model_id = model_id.into();
        let detections = detections
            .into_iter()
            .map(|d| d.with_model(model_id.clone()))
            .collect();
        Self {
            model_id,
            detections,
        }
    }
}

/// Canonical processing order: confidence descending, then model id, then
/// position in the input.
fn processing_order(dets: &[(usize, &Detection)]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        let (ia, da) = dets[a];
        let (ib, db) = dets[b];
        db.confidence
            .total_cmp(&da.confidence)
            .then_with(|| da.model_id.cmp(&db.model_id))
            .then(ia.cmp(&ib))
    });
    order
}

fn single_image<'a>(dets: impl Iterator<Item = &'a Detection>) -> Result<(), FusionError> {
    let mut first: Option<&str> = None;
    for d in dets {
        match first {
            None => first = Some(&d.image_id),
            Some(f) if f != d.image_id => {
                return Err(FusionError::MixedImageIds(
                    f.to_string(),
                    d.image_id.clone(),
                ))
            }
            _ => {}
        }
    }
    Ok(())
}

/// Greedy per-class non-maximum suppression on one image.
///
/// Repeatedly keeps the highest-confidence remaining box and discards
/// same-class boxes whose IoU with it exceeds `iou_threshold`. The result
/// is sorted by descending confidence.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Result<Vec<Detection>, FusionError> {
    if !(iou_threshold > 0.0 && iou_threshold < 1.0) {
        return Err(FusionError::InvalidConfig(format!(
            "NMS threshold {iou_threshold} outside (0, 1)"
        )));
    }
    single_image(dets.iter())?;
    let indexed: Vec<(usize, &Detection)> = dets.iter().enumerate().collect();
    let mut kept: Vec<&Detection> = Vec::new();
    for i in processing_order(&indexed) {
        let d = indexed[i].1;
        let suppressed = kept
            .iter()
            .any(|k| k.class == d.class && k.bbox.iou(&d.bbox) > iou_threshold);
        if !suppressed {
            kept.push(d);
        }
    }
    Ok(kept.into_iter().cloned().collect())
}

/// Boxes from one or more models believed to cover the same object.
#[derive(Debug, Clone, PartialEq)]
pub struct Cluster {
    pub class: DamageClass,
    pub image_id: String,
    /// In processing order; the first member is the representative.
    pub members: Vec<Detection>,
}

impl Cluster {
    /// Highest-confidence member (the box that seeded the cluster).
    pub fn representative(&self) -> &Detection {
        &self.members[0]
    }

    pub fn distinct_models(&self) -> BTreeSet<&str> {
        self.members.iter().map(|m| m.model_id.as_str()).collect()
    }
}

fn check_models(sets: &[ModelDetections]) -> Result<(), FusionError> {
    if sets.is_empty() {
        return Err(FusionError::EmptyEnsemble);
    }
    let mut seen = BTreeSet::new();
    for s in sets {
        if !seen.insert(s.model_id.as_str()) {
            return Err(FusionError::DuplicateModel(s.model_id.clone()));
        }
    }
    Ok(())
}

/// Greedy clustering of every model's boxes on one image.
///
/// Boxes are visited in processing order; a box joins the first existing
/// same-class cluster whose representative overlaps it with IoU above
/// `cfg.iou_cluster_threshold`, otherwise it seeds a new cluster. Clusters
/// come back in creation order.
pub fn cluster_detections(
    sets: &[ModelDetections],
    cfg: &FusionConfig,
) -> Result<Vec<Cluster>, FusionError> {
    check_models(sets)?;
    let pooled: Vec<(usize, &Detection)> = sets
        .iter()
        .flat_map(|s| s.detections.iter().enumerate())
        .collect();
    single_image(pooled.iter().map(|(_, d)| *d))?;

    let mut clusters: Vec<Cluster> = Vec::new();
    for i in processing_order(&pooled) {
        let d = pooled[i].1;
        let home = clusters.iter_mut().find(|c| {
            c.class == d.class && c.representative().bbox.iou(&d.bbox) > cfg.iou_cluster_threshold
        });
        match home {
            Some(c) => c.members.push(d.clone()),
            None => clusters.push(Cluster {
                class: d.class,
                image_id: d.image_id.clone(),
                members: vec![d.clone()],
            }),
        }
    }
    Ok(clusters)
}

/// One box per cluster: coordinates are the `weight·confidence`-weighted
/// mean of the members' coordinates; confidence is the weight-averaged
/// member confidence scaled by the fraction of models present.
fn weighted_box(cluster: &Cluster, cfg: &FusionConfig, n_models: usize) -> Detection {
    let mut coord_sum = [0.0f64; 4];
    let mut wc_sum = 0.0;
    let mut w_sum = 0.0;
    for m in &cluster.members {
        let w = cfg.weight(&m.model_id);
        let wc = w * m.confidence;
        for (acc, v) in coord_sum.iter_mut().zip(m.bbox.to_array()) {
            *acc += wc * v;
        }
        wc_sum += wc;
        w_sum += w;
    }
    let coords = if wc_sum > 0.0 {
        coord_sum.map(|s| s / wc_sum)
    } else {
        // every member has zero weight or zero confidence: plain mean
        let n = cluster.members.len() as f64;
        let mut mean = [0.0; 4];
        for m in &cluster.members {
            for (acc, v) in mean.iter_mut().zip(m.bbox.to_array()) {
                *acc += v / n;
            }
        }
        mean
    };
    // A weighted mean can land a rounding error outside the members' hull.
    let hull = |k: usize, pick: fn(f64, f64) -> f64| {
        cluster
            .members
            .iter()
            .map(|m| m.bbox.to_array()[k])
            .reduce(pick)
            .unwrap_or(0.0)
    };
    let coords: [f64; 4] =
        std::array::from_fn(|k| coords[k].clamp(hull(k, f64::min), hull(k, f64::max)));
    let bbox = BBox::new(coords[0], coords[1], coords[2], coords[3])
        .unwrap_or(cluster.representative().bbox);

    let mean_conf = if w_sum > 0.0 { wc_sum / w_sum } else { 0.0 };
    let coverage = cluster.distinct_models().len() as f64 / n_models as f64;
    Detection {
        image_id: cluster.image_id.clone(),
        class: cluster.class,
        bbox,
        confidence: (mean_conf * coverage).clamp(0.0, 1.0),
        model_id: FUSED_MODEL_ID.to_string(),
    }
}

fn by_confidence(a: &Detection, b: &Detection) -> Ordering {
    b.confidence.total_cmp(&a.confidence)
}

/// Fuse the detection sets of one image.
pub fn fuse_image(
    sets: &[ModelDetections],
    cfg: &FusionConfig,
) -> Result<Vec<Detection>, FusionError> {
    check_models(sets)?;
    cfg.validate(sets.iter().map(|s| s.model_id.as_str()))?;
    let n_models = sets.len();
    match cfg.strategy {
        FusionStrategy::UnionNms => {
            let mut pooled: Vec<Detection> = Vec::new();
            let mut ordered: Vec<&ModelDetections> = sets.iter().collect();
            ordered.sort_by(|a, b| a.model_id.cmp(&b.model_id));
            for s in ordered {
                pooled.extend(s.detections.iter().cloned());
            }
            nms(&pooled, cfg.iou_cluster_threshold)
        }
        FusionStrategy::Consensus => Ok(cluster_detections(sets, cfg)?
            .into_iter()
            .filter(|c| c.distinct_models().len() >= cfg.min_votes)
            .map(|c| c.members[0].clone())
            .collect()),
        FusionStrategy::WeightedFusion => {
            let mut out: Vec<Detection> = cluster_detections(sets, cfg)?
                .iter()
                .map(|c| weighted_box(c, cfg, n_models))
                .filter(|d| d.confidence >= cfg.skip_box_threshold)
                .collect();
            out.sort_by(by_confidence);
            Ok(out)
        }
    }
}

/// Fuse detection sets spanning many images.
///
/// Images are fused independently (in parallel) and concatenated in image
/// id order. `n_models` for confidence scaling is the full ensemble size,
/// including models with no boxes on a given image.
pub fn fuse(sets: &[ModelDetections], cfg: &FusionConfig) -> Result<Vec<Detection>, FusionError> {
    check_models(sets)?;
    cfg.validate(sets.iter().map(|s| s.model_id.as_str()))?;

    let mut per_image: BTreeMap<&str, Vec<ModelDetections>> = BTreeMap::new();
    for s in sets {
        for d in &s.detections {
            per_image.entry(d.image_id.as_str()).or_default();
        }
    }
    for group in per_image.values_mut() {
        *group = sets
            .iter()
            .map(|s| ModelDetections {
                model_id: s.model_id.clone(),
                detections: Vec::new(),
            })
            .collect();
    }
    for (k, s) in sets.iter().enumerate() {
        for d in &s.detections {
            let mut det = d.clone();
            det.model_id = s.model_id.clone();
            per_image
                .get_mut(d.image_id.as_str())
                .expect("image registered above")[k]
                .detections
                .push(det);
        }
    }

    let fused: Vec<Vec<Detection>> = per_image
        .par_iter()
        .map(|(_, group)| fuse_image(group, cfg))
        .collect::<Result<_, _>>()?;
    Ok(fused.into_iter().flatten().collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sweep {
    pub best_threshold: f64,
    pub best_f1: f64,
    /// One point per grid value, in grid order.
    pub curve: Vec<CurvePoint>,
}

/// Evaluate F1 at every confidence threshold in `grid` and pick the best.
/// Equal F1 values resolve to the lowest threshold.
pub fn sweep_threshold(
    gt_index: &GroundTruthIndex,
    dets: &[Detection],
    grid: &[f64],
    iou_threshold: f64,
) -> Result<Sweep, FusionError> {
    if grid.is_empty() {
        return Err(FusionError::EmptyGrid);
    }
    if let Some(&bad) = grid.iter().find(|t| !(0.0..1.0).contains(*t)) {
        return Err(FusionError::InvalidGridValue(bad));
    }
    let mut curve = Vec::with_capacity(grid.len());
    for &threshold in grid {
        let s = evaluate(gt_index, dets, threshold, iou_threshold)?
            .overall
            .scores;
        curve.push(CurvePoint {
            threshold,
            precision: s.precision,
            recall: s.recall,
            f1: s.f1,
        });
    }
    let best = curve
        .iter()
        .copied()
        .reduce(|best, p| {
            if p.f1 > best.f1 || (p.f1 == best.f1 && p.threshold < best.threshold) {
                p
            } else {
                best
            }
        })
        .expect("grid is non-empty");
    Ok(Sweep {
        best_threshold: best.threshold,
        best_f1: best.f1,
        curve,
    })
}
