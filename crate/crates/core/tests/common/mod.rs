//! Test support: reference implementations written independently of the
//! library's code paths, random instance generators, and fixture paths.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::PathBuf;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rddeval::dataset::{DamageClass, Detection, GroundTruthBox};
use rddeval::geometry::BBox;
use rddeval::metrics::{Counts, GroundTruthIndex};

pub fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

pub fn golden_dir() -> PathBuf {
    fixtures().join("golden")
}

/// IoU from overlap lengths, without touching the library.
pub fn reference_iou(a: &BBox, b: &BBox) -> f64 {
    let ox = (a.xmax().min(b.xmax()) - a.xmin().max(b.xmin())).max(0.0);
    let oy = (a.ymax().min(b.ymax()) - a.ymin().max(b.ymin())).max(0.0);
    let inter = ox * oy;
    if inter == 0.0 {
        return 0.0;
    }
    let area = |r: &BBox| (r.xmax() - r.xmin()) * (r.ymax() - r.ymin());
    inter / (area(a) + area(b) - inter)
}

/// IoU by counting covered unit cells of the integer grid `[0, side)²`.
pub fn pixel_iou(a: &BBox, b: &BBox, side: u32) -> f64 {
    let (mut inter, mut union) = (0u64, 0u64);
    for x in 0..side {
        for y in 0..side {
            let (cx, cy) = (x as f64 + 0.5, y as f64 + 0.5);
            let inside =
                |r: &BBox| cx > r.xmin() && cx < r.xmax() && cy > r.ymin() && cy < r.ymax();
            let (ia, ib) = (inside(a), inside(b));
            inter += (ia && ib) as u64;
            union += (ia || ib) as u64;
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceMatch {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    /// (detection index, ground-truth index, iou) in matching order.
    pub pairs: Vec<(usize, usize, f64)>,
}

/// The greedy definition, spelled out naively: repeatedly select the
/// unvisited detection with the highest confidence (earliest on ties), then
/// scan every ground truth for the best free same-class one above the gate.
pub fn reference_match(
    gts: &[GroundTruthBox],
    dets: &[Detection],
    iou_threshold: f64,
) -> ReferenceMatch {
    let mut visited = vec![false; dets.len()];
    let mut taken = vec![false; gts.len()];
    let mut pairs = Vec::new();
    for _ in 0..dets.len() {
        let mut pick: Option<usize> = None;
        for (i, d) in dets.iter().enumerate() {
            if visited[i] {
                continue;
            }
            if pick.is_none_or(|p| d.confidence > dets[p].confidence) {
                pick = Some(i);
            }
        }
        let i = pick.unwrap();
        visited[i] = true;
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts.iter().enumerate() {
            if taken[j] || g.class != dets[i].class {
                continue;
            }
            let v = reference_iou(&dets[i].bbox, &g.bbox);
            if v > iou_threshold && best.is_none_or(|(_, bv)| v > bv) {
                best = Some((j, v));
            }
        }
        if let Some((j, v)) = best {
            taken[j] = true;
            pairs.push((i, j, v));
        }
    }
    let tp = pairs.len() as u64;
    ReferenceMatch {
        tp,
        fp: dets.len() as u64 - tp,
        fn_: gts.len() as u64 - tp,
        pairs,
    }
}

/// Whole-corpus reference evaluator: filter, group by image, match, pool.
pub fn reference_counts(gt: &GroundTruthIndex, dets: &[Detection], conf: f64, iou: f64) -> Counts {
    let mut images: BTreeMap<&str, (Vec<GroundTruthBox>, Vec<Detection>)> = BTreeMap::new();
    for (id, boxes) in gt {
        images
            .entry(id)
            .or_default()
            .0
            .extend(boxes.iter().cloned());
    }
    for d in dets {
        if d.confidence >= conf {
            images.entry(&d.image_id).or_default().1.push(d.clone());
        }
    }
    let mut c = Counts::default();
    for (g, d) in images.values() {
        let m = reference_match(g, d, iou);
        c.tp += m.tp;
        c.fp += m.fp;
        c.fn_ += m.fn_;
    }
    c
}

pub fn reference_f1(c: Counts) -> (f64, f64, f64) {
    let p = if c.tp + c.fp == 0 {
        0.0
    } else {
        c.tp as f64 / (c.tp + c.fp) as f64
    };
    let r = if c.tp + c.fn_ == 0 {
        0.0
    } else {
        c.tp as f64 / (c.tp + c.fn_) as f64
    };
    let f = if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    };
    (p, r, f)
}

pub fn bbox(c: [f64; 4]) -> BBox {
    BBox::new(c[0], c[1], c[2], c[3]).unwrap()
}

pub fn random_class(rng: &mut ChaCha8Rng) -> DamageClass {
    DamageClass::ALL[rng.random_range(0..4)]
}

/// Box with corner in `[0, extent)²` and sides in `[min_side, max_side)`.
pub fn random_box(rng: &mut ChaCha8Rng, extent: f64, min_side: f64, max_side: f64) -> BBox {
    let x = rng.random_range(0.0..extent);
    let y = rng.random_range(0.0..extent);
    let w = rng.random_range(min_side..max_side);
    let h = rng.random_range(min_side..max_side);
    bbox([x, y, x + w, y + h])
}

/// Copy of `b` with every edge moved by up to `frac` of its side length.
pub fn jitter(rng: &mut ChaCha8Rng, b: &BBox, frac: f64) -> BBox {
    loop {
        let (w, h) = (b.width(), b.height());
        let mut d = |s: f64| rng.random_range(-frac..=frac) * s;
        let c = [
            (b.xmin() + d(w)).max(0.0),
            (b.ymin() + d(h)).max(0.0),
            b.xmax() + d(w),
            b.ymax() + d(h),
        ];
        if let Ok(j) = BBox::new(c[0], c[1], c[2], c[3]) {
            return j;
        }
    }
}

/// One image with up to `max_gt` ground truths and up to `max_det`
/// detections, many of them perturbed copies of ground truths so that
/// overlaps straddle the 0.5 gate. Confidences are drawn from a coarse grid
/// to exercise ties.
pub fn random_instance(
    rng: &mut ChaCha8Rng,
    max_gt: usize,
    max_det: usize,
) -> (Vec<GroundTruthBox>, Vec<Detection>) {
    let n_gt = rng.random_range(0..=max_gt);
    let n_det = rng.random_range(0..=max_det);
    let gts: Vec<GroundTruthBox> = (0..n_gt)
        .map(|_| GroundTruthBox {
            image_id: "img".into(),
            class: random_class(rng),
            bbox: random_box(rng, 80.0, 5.0, 40.0),
        })
        .collect();
    let dets = (0..n_det)
        .map(|_| {
            let (class, b) = if !gts.is_empty() && rng.random_bool(0.7) {
                let g = &gts[rng.random_range(0..gts.len())];
                let class = if rng.random_bool(0.8) {
                    g.class
                } else {
                    random_class(rng)
                };
                (class, jitter(rng, &g.bbox, 0.3))
            } else {
                (random_class(rng), random_box(rng, 80.0, 5.0, 40.0))
            };
            let conf = rng.random_range(0..=10) as f64 / 10.0;
            Detection::new("img", class, b, conf).unwrap()
        })
        .collect();
    (gts, dets)
}

/// Planted ground truth for a multi-image corpus.
pub fn plant_ground_truth(rng: &mut ChaCha8Rng, images: usize) -> GroundTruthIndex {
    let prefixes = ["Czech", "India", "Japan"];
    let mut idx = GroundTruthIndex::new();
    for i in 0..images {
        let id = format!("{}_{:06}", prefixes[i % 3], i);
        let n = rng.random_range(1..=4);
        let boxes = (0..n)
            .map(|_| GroundTruthBox {
                image_id: id.clone(),
                class: random_class(rng),
                bbox: random_box(rng, 500.0, 30.0, 150.0),
            })
            .collect();
        idx.insert(id, boxes);
    }
    idx
}

/// A noisy detector: misses some objects, jitters and sometimes mislabels
/// the rest, adds random false positives; confidences are noisy.
pub fn simulate_detector(
    rng: &mut ChaCha8Rng,
    gt: &GroundTruthIndex,
    model_id: &str,
) -> Vec<Detection> {
    let mut out = Vec::new();
    for (id, boxes) in gt {
        for g in boxes {
            if rng.random_bool(0.3) {
                continue;
            }
            let class = if rng.random_bool(0.9) {
                g.class
            } else {
                random_class(rng)
            };
            let conf = rng.random_range(0.35..1.0);
            out.push(
                Detection::new(id.clone(), class, jitter(rng, &g.bbox, 0.08), conf)
                    .unwrap()
                    .with_model(model_id),
            );
        }
        for _ in 0..rng.random_range(0..=3) {
            let conf = rng.random_range(0.05..0.8);
            out.push(
                Detection::new(
                    id.clone(),
                    random_class(rng),
                    random_box(rng, 500.0, 20.0, 150.0),
                    conf,
                )
                .unwrap()
                .with_model(model_id),
            );
        }
    }
    out
}
