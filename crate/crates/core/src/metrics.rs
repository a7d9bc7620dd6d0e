//! Detection scoring: class-matched, IoU-gated, one-to-one greedy matching
//! and the F1 metric.
//!
//! A detection is correct when it has the same class as a ground-truth box
//! and their IoU is strictly greater than the threshold (0.5 by default).
//! Detections claim ground truths in descending confidence order; each
//! ground truth can be claimed once, so duplicates are false positives.

use std::borrow::Borrow;
use std::collections::BTreeMap;
use std::ops::{Add, AddAssign};

use rayon::prelude::*;
use thiserror::Error;

use crate::dataset::{country_of, Country, DamageClass, Detection, GroundTruthBox, VocAnnotation};

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("inputs span several images (`{0}` and `{1}`)")]
    MixedImageIds(String, String),
    #[error("IoU threshold {0} outside (0, 1)")]
    InvalidIouThreshold(f64),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl Counts {
    pub fn new(tp: u64, fp: u64, fn_: u64) -> Self {
        Self { tp, fp, fn_ }
    }
}

impl Add for Counts {
    type Output = Counts;

    fn add(self, rhs: Counts) -> Counts {
        Counts {
            tp: self.tp + rhs.tp,
            fp: self.fp + rhs.fp,
            fn_: self.fn_ + rhs.fn_,
        }
    }
}

impl AddAssign for Counts {
    fn add_assign(&mut self, rhs: Counts) {
        *self = *self + rhs;
    }
}

impl std::iter::Sum for Counts {
    fn sum<I: Iterator<Item = Counts>>(iter: I) -> Counts {
        iter.fold(Counts::default(), Add::add)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Scores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Precision `tp/(tp+fp)`, recall `tp/(tp+fn)` and their harmonic mean.
/// Any 0/0 resolves to 0.
///
/// F1 is evaluated as `2tp / (2tp + fp + fn)`, which equals `2pr/(p+r)`
/// whenever `p + r > 0` and is exact for small counts.
pub fn compute_f1(c: Counts) -> Scores {
    Scores {
        precision: ratio(c.tp, c.tp + c.fp),
        recall: ratio(c.tp, c.tp + c.fn_),
        f1: ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchedPair {
    /// Index into the detection slice passed to the matcher.
    pub detection: usize,
    /// Index into the ground-truth slice.
    pub ground_truth: usize,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchOutcome {
    pub image_id: String,
    pub counts: Counts,
    /// In matching order (descending detection confidence).
    pub pairs: Vec<MatchedPair>,
}

/// Detection indices by descending confidence; equal confidences keep
/// input order.
pub fn confidence_order<D: Borrow<Detection>>(dets: &[D]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .borrow()
            .confidence
            .total_cmp(&dets[a].borrow().confidence)
    });
    order
}

fn common_image_id<'a>(
    ids: impl Iterator<Item = &'a str>,
) -> Result<Option<&'a str>, MetricsError> {
    let mut found: Option<&str> = None;
    for id in ids {
        match found {
            None => found = Some(id),
            Some(f) if f != id => {
                return Err(MetricsError::MixedImageIds(f.to_string(), id.to_string()))
            }
            _ => {}
        }
    }
    Ok(found)
}

fn check_iou_threshold(t: f64) -> Result<(), MetricsError> {
    if t > 0.0 && t < 1.0 {
        Ok(())
    } else {
        Err(MetricsError::InvalidIouThreshold(t))
    }
}

/// Greedy one-to-one matching on a single image.
///
/// Detections are visited by descending confidence (ties by input order).
/// Each takes the still-free ground truth of the same class with the
/// highest IoU, provided that IoU is strictly above `iou_threshold`; IoU
/// ties go to the lower ground-truth index.
pub fn match_image<G, D>(
    gts: &[G],
    dets: &[D],
    iou_threshold: f64,
) -> Result<MatchOutcome, MetricsError>
where
    G: Borrow<GroundTruthBox>,
    D: Borrow<Detection>,
{
    check_iou_threshold(iou_threshold)?;
    let image_id = common_image_id(
        gts.iter()
            .map(|g| g.borrow().image_id.as_str())
            .chain(dets.iter().map(|d| d.borrow().image_id.as_str())),
    )?
    .unwrap_or_default()
    .to_string();

    let mut by_class: [Vec<usize>; 4] = Default::default();
    for (i, g) in gts.iter().enumerate() {
        by_class[class_slot(g.borrow().class)].push(i);
    }
    let mut taken = vec![false; gts.len()];
    let mut pairs = Vec::new();

    for d_idx in confidence_order(dets) {
        let det = dets[d_idx].borrow();
        let mut best: Option<(usize, f64)> = None;
        for &g_idx in &by_class[class_slot(det.class)] {
            if taken[g_idx] {
                continue;
            }
            let v = det.bbox.iou(&gts[g_idx].borrow().bbox);
            if v > iou_threshold && best.is_none_or(|(_, b)| v > b) {
                best = Some((g_idx, v));
            }
        }
        if let Some((g_idx, v)) = best {
            taken[g_idx] = true;
            pairs.push(MatchedPair {
                detection: d_idx,
                ground_truth: g_idx,
                iou: v,
            });
        }
    }

    let tp = pairs.len() as u64;
    Ok(MatchOutcome {
        image_id,
        counts: Counts {
            tp,
            fp: dets.len() as u64 - tp,
            fn_: gts.len() as u64 - tp,
        },
        pairs,
    })
}

fn class_slot(c: DamageClass) -> usize {
    match c {
        DamageClass::D00 => 0,
        DamageClass::D10 => 1,
        DamageClass::D20 => 2,
        DamageClass::D40 => 3,
    }
}

/// Ground truth keyed by image id. Images with no boxes stay in the index
/// so that detections on them count as false positives.
pub type GroundTruthIndex = BTreeMap<String, Vec<GroundTruthBox>>;

pub fn ground_truth_index(annotations: &[VocAnnotation]) -> GroundTruthIndex {
    let mut index = GroundTruthIndex::new();
    for a in annotations {
        index
            .entry(a.image_id.clone())
            .or_default()
            .extend(a.boxes.iter().cloned());
    }
    index
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LevelMetrics {
    pub counts: Counts,
    pub scores: Scores,
}

impl LevelMetrics {
    pub fn from_counts(counts: Counts) -> Self {
        Self {
            counts,
            scores: compute_f1(counts),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    /// Micro-averaged over every box of every image.
    pub overall: LevelMetrics,
    /// Always holds all four classes.
    pub per_class: BTreeMap<DamageClass, LevelMetrics>,
    /// Countries of the images that were scored.
    pub per_country: BTreeMap<Country, LevelMetrics>,
}

impl MetricsReport {
    pub fn precision(&self) -> f64 {
        self.overall.scores.precision
    }

    pub fn recall(&self) -> f64 {
        self.overall.scores.recall
    }

    pub fn f1(&self) -> f64 {
        self.overall.scores.f1
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct ImageTally {
    per_class: [Counts; 4],
}

impl ImageTally {
    fn total(&self) -> Counts {
        self.per_class.iter().copied().sum()
    }
}

fn tally_image(
    gts: &[GroundTruthBox],
    dets: &[&Detection],
    iou_threshold: f64,
) -> Result<ImageTally, MetricsError> {
    let outcome = match_image(gts, dets, iou_threshold)?;
    let mut t = ImageTally::default();
    for g in gts {
        t.per_class[class_slot(g.class)].fn_ += 1;
    }
    for d in dets {
        t.per_class[class_slot(d.class)].fp += 1;
    }
    for p in &outcome.pairs {
        let c = &mut t.per_class[class_slot(dets[p.detection].class)];
        c.tp += 1;
        c.fp -= 1;
        c.fn_ -= 1;
    }
    Ok(t)
}

/// Score a detection set against ground truth.
///
/// Detections below `conf_threshold` are dropped first. Images that have
/// ground truth but no detections contribute false negatives; detections on
/// images missing from `gt_index` are false positives. Counts are pooled
/// before computing precision, recall and F1, globally and per class and
/// country.
///
/// Images are matched in parallel on the current rayon pool. The fold over
/// integer counts makes the report independent of worker count.
pub fn evaluate(
    gt_index: &GroundTruthIndex,
    dets: &[Detection],
    conf_threshold: f64,
    iou_threshold: f64,
) -> Result<MetricsReport, MetricsError> {
    check_iou_threshold(iou_threshold)?;
    let mut by_image: BTreeMap<&str, Vec<&Detection>> =
        gt_index.keys().map(|k| (k.as_str(), Vec::new())).collect();
    for d in dets.iter().filter(|d| d.confidence >= conf_threshold) {
        by_image.entry(d.image_id.as_str()).or_default().push(d);
    }

    let tallies: Vec<(&str, ImageTally)> = by_image
        .par_iter()
        .map(|(&image_id, image_dets)| {
            let gts = gt_index.get(image_id).map(Vec::as_slice).unwrap_or(&[]);
            tally_image(gts, image_dets, iou_threshold).map(|t| (image_id, t))
        })
        .collect::<Result<_, _>>()?;

    let mut class_counts = [Counts::default(); 4];
    let mut country_counts: BTreeMap<Country, Counts> = BTreeMap::new();
    for (image_id, t) in &tallies {
        for (acc, c) in class_counts.iter_mut().zip(t.per_class) {
            *acc += c;
        }
        *country_counts.entry(country_of(image_id)).or_default() += t.total();
    }

    let overall: Counts = class_counts.iter().copied().sum();
    Ok(MetricsReport {
        overall: LevelMetrics::from_counts(overall),
        per_class: DamageClass::ALL
            .iter()
            .map(|&c| (c, LevelMetrics::from_counts(class_counts[class_slot(c)])))
            .collect(),
        per_country: country_counts
            .into_iter()
            .map(|(k, c)| (k, LevelMetrics::from_counts(c)))
            .collect(),
    })
}
