//! Reference implementations and random instance generators shared by the test targets.
//! The oracles are written from the definitions, without reusing library internals.
#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use tokentrack::codec::{BBox, TrackletAnnotation};
use tokentrack::merge_eval::{Detection, Granularity, GroundTruth};

pub fn random_box(rng: &mut ChaCha8Rng) -> BBox {
    let w = rng.gen_range(0.02..0.4);
    let h = rng.gen_range(0.02..0.4);
    let lx = rng.gen_range(0.0..1.0 - w);
    let ty = rng.gen_range(0.0..1.0 - h);
    BBox::from_ltrb(lx, ty, lx + w, ty + h)
}

/// A box near `b`, so overlaps are common.
pub fn jitter(rng: &mut ChaCha8Rng, b: &BBox, amount: f64) -> BBox {
    let mut d = || rng.gen_range(-amount..amount);
    let (lx, ty, rx, by) = (b.lx + d(), b.ty + d(), b.rx + d(), b.by + d());
    let c = |v: f64| v.clamp(0.0, 1.0);
    BBox::from_ltrb(c(lx.min(rx)), c(ty.min(by)), c(lx.max(rx)), c(ty.max(by)))
}

pub fn random_tracklets(
    rng: &mut ChaCha8Rng,
    n: usize,
    slots: usize,
    classes: usize,
) -> Vec<TrackletAnnotation> {
    (0..n)
        .map(|i| {
            let mut s: Vec<Option<BBox>> = (0..slots)
                .map(|_| rng.gen_bool(0.7).then(|| random_box(rng)))
                .collect();
            if s.iter().all(Option::is_none) {
                let k = rng.gen_range(0..slots);
                s[k] = Some(random_box(rng));
            }
            TrackletAnnotation {
                slots: s,
                class_index: rng.gen_range(0..classes),
                track_id: i as u64,
            }
        })
        .collect()
}

/// Detections clustered around a few anchors, with coarse scores so ties occur.
pub fn random_detections(rng: &mut ChaCha8Rng, n: usize, max_len: usize) -> Vec<Detection> {
    let anchors: Vec<BBox> = (0..rng.gen_range(1..6)).map(|_| random_box(rng)).collect();
    (0..n)
        .map(|_| {
            let len = rng.gen_range(1..=max_len);
            let start = rng.gen_range(1..=3u32);
            let anchor = anchors[rng.gen_range(0..anchors.len())];
            let mut boxes: Vec<Option<BBox>> = (0..len)
                .map(|_| rng.gen_bool(0.8).then(|| jitter(rng, &anchor, 0.05)))
                .collect();
            if boxes.iter().all(Option::is_none) {
                boxes[0] = Some(anchor);
            }
            Detection {
                video_id: format!("v{}", rng.gen_range(0..2)),
                frames: (start..start + len as u32).collect(),
                boxes,
                class_index: rng.gen_range(0..3),
                score: rng.gen_range(0..12) as f64 / 12.0,
                source_window: rng.gen_range(0..4),
            }
        })
        .collect()
}

pub fn random_ground_truth(rng: &mut ChaCha8Rng, n: usize) -> Vec<GroundTruth> {
    random_detections(rng, n, 1)
        .into_iter()
        .map(|d| GroundTruth {
            video_id: d.video_id,
            frames: d.frames,
            boxes: d.boxes,
            class_index: d.class_index,
        })
        .collect()
}

pub fn oracle_iou(a: &BBox, b: &BBox) -> f64 {
    let area = |x: &BBox| (x.rx - x.lx) * (x.by - x.ty);
    let (aa, ab) = (area(a), area(b));
    if aa <= 0.0 || ab <= 0.0 {
        return if a == b { 1.0 } else { 0.0 };
    }
    let iw = (a.rx.min(b.rx) - a.lx.max(b.lx)).max(0.0);
    let ih = (a.by.min(b.by) - a.ty.max(b.ty)).max(0.0);
    let inter = iw * ih;
    inter / (aa + ab - inter)
}

fn box_at(d: &Detection, frame: u32) -> Option<BBox> {
    d.frames
        .iter()
        .position(|&f| f == frame)
        .and_then(|i| d.boxes[i])
}

pub fn oracle_iou_tracklet(a: &Detection, b: &Detection) -> f64 {
    if a.video_id != b.video_id {
        return 0.0;
    }
    let mut frames: Vec<u32> = a
        .frames
        .iter()
        .chain(&b.frames)
        .copied()
        .filter(|&f| box_at(a, f).is_some() || box_at(b, f).is_some())
        .collect();
    frames.sort();
    frames.dedup();
    if frames.is_empty() {
        return 0.0;
    }
    let sum: f64 = frames
        .iter()
        .map(|&f| match (box_at(a, f), box_at(b, f)) {
            (Some(x), Some(y)) => oracle_iou(&x, &y),
            _ => 0.0,
        })
        .sum();
    sum / frames.len() as f64
}

/// Splits detections into one unit per present frame.
pub fn explode(dets: &[Detection]) -> Vec<Detection> {
    let mut out = Vec::new();
    for d in dets {
        for (f, b) in d.frames.iter().zip(&d.boxes) {
            if let Some(b) = b {
                out.push(Detection {
                    frames: vec![*f],
                    boxes: vec![Some(*b)],
                    ..d.clone()
                });
            }
        }
    }
    out
}

/// Position of every item in the canonical order: score desc, source window asc, input order.
fn canonical_order(dets: &[Detection]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..dets.len()).collect();
    idx.sort_by(|&i, &j| {
        dets[j]
            .score
            .partial_cmp(&dets[i].score)
            .unwrap()
            .then(dets[i].source_window.cmp(&dets[j].source_window))
            .then(i.cmp(&j))
    });
    idx
}

fn unit_iou(a: &Detection, b: &Detection, g: Granularity) -> f64 {
    match g {
        Granularity::PerFrame => {
            if a.video_id != b.video_id || a.frames[0] != b.frames[0] {
                0.0
            } else {
                oracle_iou(&a.boxes[0].unwrap(), &b.boxes[0].unwrap())
            }
        }
        Granularity::Tracklet => oracle_iou_tracklet(a, b),
    }
}

/// Quadratic greedy NMS straight from the definition.
pub fn oracle_nms(dets: &[Detection], tau: f64, g: Granularity, agnostic: bool) -> Vec<Detection> {
    let units = match g {
        Granularity::PerFrame => explode(dets),
        Granularity::Tracklet => dets.to_vec(),
    };
    let mut kept: Vec<usize> = Vec::new();
    for i in canonical_order(&units) {
        let suppressed = kept.iter().any(|&k| {
            let same_scope = units[k].video_id == units[i].video_id
                && (g == Granularity::Tracklet || units[k].frames[0] == units[i].frames[0]);
            same_scope
                && (agnostic || units[k].class_index == units[i].class_index)
                && unit_iou(&units[i], &units[k], g) > tau
        });
        if !suppressed {
            kept.push(i);
        }
    }
    kept.into_iter().map(|i| units[i].clone()).collect()
}

/// Number of true positives among detections scoring at least `threshold`, matched from
/// scratch; returns (tp, detections considered).
fn matches_above(
    units: &[Detection],
    gts: &[Detection],
    threshold: f64,
    tau: f64,
    agnostic: bool,
    g: Granularity,
) -> (usize, usize) {
    let mut used = vec![false; gts.len()];
    let (mut tp, mut n) = (0, 0);
    for i in canonical_order(units) {
        let d = &units[i];
        if d.score < threshold {
            continue;
        }
        n += 1;
        let mut best: Option<(usize, f64)> = None;
        for (j, gt) in gts.iter().enumerate() {
            if used[j] || (!agnostic && gt.class_index != d.class_index) {
                continue;
            }
            let iou = unit_iou(d, gt, g);
            if iou > 0.0 && best.is_none_or(|(_, b)| iou > b) {
                best = Some((j, iou));
            }
        }
        if let Some((j, iou)) = best {
            if iou >= tau {
                used[j] = true;
                tp += 1;
            }
        }
    }
    (tp, n)
}

/// RP-AUC by re-matching at every distinct score threshold, then the trapezoid rule over
/// recall starting from (0, first precision).
pub fn oracle_rp_auc(
    dets: &[Detection],
    gts: &[GroundTruth],
    tau: f64,
    agnostic: bool,
    g: Granularity,
) -> Option<f64> {
    let gt_dets: Vec<Detection> = gts
        .iter()
        .map(|gt| Detection {
            video_id: gt.video_id.clone(),
            frames: gt.frames.clone(),
            boxes: gt.boxes.clone(),
            class_index: gt.class_index,
            score: 1.0,
            source_window: 0,
        })
        .collect();
    let (units, gt_units) = match g {
        Granularity::PerFrame => (explode(dets), explode(&gt_dets)),
        Granularity::Tracklet => (dets.to_vec(), gt_dets),
    };
    if gt_units.is_empty() {
        return None;
    }
    let mut thresholds: Vec<f64> = units.iter().map(|d| d.score).collect();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let mut pts = Vec::new();
    for t in thresholds {
        let (tp, n) = matches_above(&units, &gt_units, t, tau, agnostic, g);
        pts.push((tp as f64 / gt_units.len() as f64, tp as f64 / n as f64));
    }
    let Some(&(_, p_first)) = pts.first() else {
        return Some(0.0);
    };
    let (mut r0, mut p0) = (0.0, p_first);
    let mut area = 0.0;
    for (r, p) in pts {
        area += (r - r0) * (p + p0) / 2.0;
        r0 = r;
        p0 = p;
    }
    Some(area)
}

/// Canonical form for comparing detection lists irrespective of order.
pub fn canonical(dets: &[Detection]) -> Vec<String> {
    let mut v: Vec<String> = dets.iter().map(|d| format!("{d:?}")).collect();
    v.sort();
    v
}
