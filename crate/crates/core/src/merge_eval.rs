//! Cross-window merging by non-maximum suppression, detection/ground-truth matching, and the
//! recall-precision metrics (RP-AUC, class-agnostic cRP-AUC, AP).
//!
//! RP-AUC here is: match detections greedily by descending score at IoU `τ`; sweep the score
//! threshold over every distinct detection score; take the trapezoidal area under the
//! (recall, precision) polyline, anchored at recall 0 with the precision of the highest
//! threshold.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::annotations::VideoAnnotations;
use crate::codec::BBox;
use crate::error::{Error, Result};
use crate::windows::{TemporalWindow, WindowSpec};

/// A scored tracklet on absolute (1-based) frame indices; `boxes` is parallel to `frames`.
#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub video_id: String,
    pub frames: Vec<u32>,
    pub boxes: Vec<Option<BBox>>,
    pub class_index: usize,
    pub score: f64,
    pub source_window: usize,
}

impl Detection {
    pub fn single(video_id: &str, frame: u32, bbox: BBox, class_index: usize, score: f64) -> Self {
        Self {
            video_id: video_id.to_string(),
            frames: vec![frame],
            boxes: vec![Some(bbox)],
            class_index,
            score,
            source_window: 0,
        }
    }

    pub fn present(&self) -> impl Iterator<Item = (u32, BBox)> + '_ {
        self.frames
            .iter()
            .zip(&self.boxes)
            .filter_map(|(&f, b)| b.map(|b| (f, b)))
    }

    /// One single-frame detection per present slot.
    pub fn per_frame(&self) -> Vec<Detection> {
        self.present()
            .map(|(f, b)| Detection {
                video_id: self.video_id.clone(),
                frames: vec![f],
                boxes: vec![Some(b)],
                class_index: self.class_index,
                score: self.score,
                source_window: self.source_window,
            })
            .collect()
    }
}

/// Ground-truth object; same layout as a detection without score.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub video_id: String,
    pub frames: Vec<u32>,
    pub boxes: Vec<Option<BBox>>,
    pub class_index: usize,
}

impl GroundTruth {
    fn as_detection(&self) -> Detection {
        Detection {
            video_id: self.video_id.clone(),
            frames: self.frames.clone(),
            boxes: self.boxes.clone(),
            class_index: self.class_index,
            score: 1.0,
            source_window: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Granularity {
    #[default]
    PerFrame,
    Tracklet,
}

impl std::str::FromStr for Granularity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-frame" => Ok(Granularity::PerFrame),
            "tracklet" => Ok(Granularity::Tracklet),
            other => Err(Error::Config(format!("unknown granularity `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatchConfig {
    pub iou_threshold: f64,
    pub class_agnostic: bool,
    pub granularity: Granularity,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            iou_threshold: 0.5,
            class_agnostic: false,
            granularity: Granularity::PerFrame,
        }
    }
}

/// Ground truth of one video, one entry per (frame, track) or per track.
pub fn ground_truth_from_annotations(
    video_id: &str,
    ann: &VideoAnnotations,
    granularity: Granularity,
) -> Vec<GroundTruth> {
    let mut out = Vec::new();
    for track in ann.tracks.values() {
        match granularity {
            Granularity::PerFrame => {
                for (&f, &b) in &track.boxes {
                    out.push(GroundTruth {
                        video_id: video_id.to_string(),
                        frames: vec![f],
                        boxes: vec![Some(b)],
                        class_index: track.class_index,
                    });
                }
            }
            Granularity::Tracklet => out.push(GroundTruth {
                video_id: video_id.to_string(),
                frames: track.boxes.keys().copied().collect(),
                boxes: track.boxes.values().copied().map(Some).collect(),
                class_index: track.class_index,
            }),
        }
    }
    out
}

/// Intersection over union. Degenerate (zero-area) boxes score 1 against an identical box and
/// 0 otherwise.
pub fn iou_2d(a: &BBox, b: &BBox) -> f64 {
    let (area_a, area_b) = (a.area(), b.area());
    if area_a <= 0.0 || area_b <= 0.0 {
        return if a == b { 1.0 } else { 0.0 };
    }
    let iw = (a.rx.min(b.rx) - a.lx.max(b.lx)).max(0.0);
    let ih = (a.by.min(b.by) - a.ty.max(b.ty)).max(0.0);
    let inter = iw * ih;
    let union = area_a + area_b - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Mean per-frame IoU over frames where either tracklet is present; a frame with only one
/// of them present contributes 0.
pub fn iou_tracklet(a: &Detection, b: &Detection) -> f64 {
    if a.video_id != b.video_id {
        return 0.0;
    }
    let mut frames: BTreeMap<u32, (Option<BBox>, Option<BBox>)> = BTreeMap::new();
    for (f, bx) in a.present() {
        frames.entry(f).or_default().0 = Some(bx);
    }
    for (f, bx) in b.present() {
        frames.entry(f).or_default().1 = Some(bx);
    }
    if frames.is_empty() {
        return 0.0;
    }
    let total: f64 = frames
        .values()
        .map(|pair| match pair {
            (Some(x), Some(y)) => iou_2d(x, y),
            _ => 0.0,
        })
        .sum();
    total / frames.len() as f64
}

fn score_order(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.source_window.cmp(&b.source_window))
}

/// Indices sorted by score descending, then source window, then input order.
fn sorted_indices(dets: &[Detection]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..dets.len()).collect();
    idx.sort_by(|&i, &j| score_order(&dets[i], &dets[j]).then(i.cmp(&j)));
    idx
}

/// Greedy non-maximum suppression. Per-frame granularity first splits every detection into
/// single-frame detections and only compares boxes in the same video and frame.
pub fn nms(
    detections: &[Detection],
    iou_threshold: f64,
    granularity: Granularity,
    class_agnostic: bool,
) -> Vec<Detection> {
    let units: Vec<Detection> = match granularity {
        Granularity::PerFrame => detections.iter().flat_map(Detection::per_frame).collect(),
        Granularity::Tracklet => detections.to_vec(),
    };
    let order = sorted_indices(&units);

    // items can only suppress each other inside a bucket
    let bucket_of = |d: &Detection| {
        let frame = match granularity {
            Granularity::PerFrame => d.frames[0],
            Granularity::Tracklet => 0,
        };
        let class = if class_agnostic {
            usize::MAX
        } else {
            d.class_index
        };
        (d.video_id.clone(), frame, class)
    };
    let mut kept_by_bucket: HashMap<(String, u32, usize), Vec<usize>> = HashMap::new();
    let mut survivors = Vec::new();
    for i in order {
        let d = &units[i];
        let kept = kept_by_bucket.entry(bucket_of(d)).or_default();
        let suppressed = kept.iter().any(|&k| {
            let other = &units[k];
            let iou = match granularity {
                Granularity::PerFrame => iou_2d(
                    d.boxes[0].as_ref().expect("present"),
                    other.boxes[0].as_ref().expect("present"),
                ),
                Granularity::Tracklet => iou_tracklet(d, other),
            };
            iou > iou_threshold
        });
        if !suppressed {
            kept.push(i);
            survivors.push(i);
        }
    }
    survivors.into_iter().map(|i| units[i].clone()).collect()
}

/// Pools detections of overlapping windows on the video timeline and suppresses duplicates.
///
/// Detections must already carry absolute frame indices; each must lie inside its window's
/// target frames.
pub fn merge_windows(
    per_window: &[(TemporalWindow, Vec<Detection>)],
    spec: &WindowSpec,
    policy: Granularity,
    iou_threshold: f64,
    class_agnostic: bool,
) -> Result<Vec<Detection>> {
    let mut pooled = Vec::new();
    for (window, dets) in per_window {
        let allowed = window.slot_frames(spec.full_span);
        for d in dets {
            if let Some(f) = d.frames.iter().find(|f| !allowed.contains(f)) {
                return Err(Error::Contract(format!(
                    "detection references frame {f} outside window {} ({:?})",
                    window.index, allowed
                )));
            }
            if d.frames.len() != d.boxes.len() {
                return Err(Error::Contract(
                    "detection frames/boxes length mismatch".into(),
                ));
            }
            pooled.push(d.clone());
        }
    }
    Ok(nms(&pooled, iou_threshold, policy, class_agnostic))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Matching {
    /// Matching units: detections split per frame for per-frame granularity.
    pub detections: Vec<Detection>,
    /// Parallel to `detections`.
    pub is_tp: Vec<bool>,
    pub gt_matched: Vec<bool>,
}

fn match_units(units: &[Detection], gts: &[Detection], config: &MatchConfig) -> Matching {
    let key = |d: &Detection| match config.granularity {
        Granularity::PerFrame => (d.video_id.clone(), d.frames[0]),
        Granularity::Tracklet => (d.video_id.clone(), 0),
    };
    let mut gt_by_key: HashMap<(String, u32), Vec<usize>> = HashMap::new();
    for (j, g) in gts.iter().enumerate() {
        gt_by_key.entry(key(g)).or_default().push(j);
    }
    let mut is_tp = vec![false; units.len()];
    let mut gt_matched = vec![false; gts.len()];
    for i in sorted_indices(units) {
        let d = &units[i];
        let Some(cands) = gt_by_key.get(&key(d)) else {
            continue;
        };
        let mut best: Option<(usize, f64)> = None;
        for &j in cands {
            if gt_matched[j] || (!config.class_agnostic && gts[j].class_index != d.class_index) {
                continue;
            }
            let iou = match config.granularity {
                Granularity::PerFrame => iou_2d(
                    d.boxes[0].as_ref().expect("present"),
                    gts[j].boxes[0].as_ref().expect("present"),
                ),
                Granularity::Tracklet => iou_tracklet(d, &gts[j]),
            };
            if best.is_none_or(|(_, b)| iou > b) {
                best = Some((j, iou));
            }
        }
        if let Some((j, iou)) = best {
            if iou >= config.iou_threshold {
                gt_matched[j] = true;
                is_tp[i] = true;
            }
        }
    }
    Matching {
        detections: units.to_vec(),
        is_tp,
        gt_matched,
    }
}

fn units_of(detections: &[Detection], granularity: Granularity) -> Vec<Detection> {
    match granularity {
        Granularity::PerFrame => detections.iter().flat_map(Detection::per_frame).collect(),
        Granularity::Tracklet => detections.to_vec(),
    }
}

/// Greedy matching by descending score: a detection is a true positive when its best-IoU
/// unmatched ground truth (same class unless class-agnostic) reaches the IoU threshold.
pub fn match_detections(
    detections: &[Detection],
    ground_truth: &[GroundTruth],
    config: &MatchConfig,
) -> Matching {
    let units = units_of(detections, config.granularity);
    let gt_dets: Vec<Detection> = ground_truth.iter().map(GroundTruth::as_detection).collect();
    let gts = units_of(&gt_dets, config.granularity);
    match_units(&units, &gts, config)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurvePoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Points ordered by descending threshold (so recall is non-decreasing along the vector).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PrCurve {
    pub points: Vec<CurvePoint>,
    pub num_gt: usize,
}

impl PrCurve {
    pub fn from_matching(m: &Matching) -> Self {
        let num_gt = m.gt_matched.len();
        let mut order: Vec<usize> = (0..m.detections.len()).collect();
        order.sort_by(|&i, &j| m.detections[j].score.total_cmp(&m.detections[i].score));
        let mut points = Vec::new();
        let (mut tp, mut n) = (0usize, 0usize);
        let mut k = 0;
        while k < order.len() {
            let threshold = m.detections[order[k]].score;
            while k < order.len() && m.detections[order[k]].score == threshold {
                tp += m.is_tp[order[k]] as usize;
                n += 1;
                k += 1;
            }
            points.push(CurvePoint {
                threshold,
                precision: tp as f64 / n as f64,
                recall: if num_gt == 0 {
                    0.0
                } else {
                    tp as f64 / num_gt as f64
                },
            });
        }
        PrCurve { points, num_gt }
    }

    /// Trapezoidal area under precision over recall; `None` when there is no ground truth.
    pub fn area(&self) -> Option<f64> {
        if self.num_gt == 0 {
            return None;
        }
        let Some(first) = self.points.first() else {
            return Some(0.0);
        };
        let (mut r0, mut p0) = (0.0, first.precision);
        let mut area = 0.0;
        for p in &self.points {
            area += (p.recall - r0) * (p.precision + p0) / 2.0;
            r0 = p.recall;
            p0 = p.precision;
        }
        Some(area)
    }

    /// All-point interpolated average precision (precision envelope).
    pub fn average_precision(&self) -> Option<f64> {
        if self.num_gt == 0 {
            return None;
        }
        let mut envelope: Vec<f64> = self.points.iter().map(|p| p.precision).collect();
        for i in (0..envelope.len().saturating_sub(1)).rev() {
            envelope[i] = envelope[i].max(envelope[i + 1]);
        }
        let mut r0 = 0.0;
        let mut ap = 0.0;
        for (p, e) in self.points.iter().zip(envelope) {
            ap += (p.recall - r0) * e;
            r0 = p.recall;
        }
        Some(ap)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "threshold,precision,recall")?;
        for p in &self.points {
            writeln!(w, "{},{},{}", p.threshold, p.precision, p.recall)?;
        }
        Ok(())
    }
}

pub fn pr_curve(
    detections: &[Detection],
    ground_truth: &[GroundTruth],
    config: &MatchConfig,
) -> PrCurve {
    PrCurve::from_matching(&match_detections(detections, ground_truth, config))
}

/// Area under the recall-precision curve; `None` marks "no ground truth".
pub fn rp_auc(
    detections: &[Detection],
    ground_truth: &[GroundTruth],
    config: &MatchConfig,
) -> Option<f64> {
    pr_curve(detections, ground_truth, config).area()
}

/// [`rp_auc`] with class-agnostic matching forced on.
pub fn crp_auc(
    detections: &[Detection],
    ground_truth: &[GroundTruth],
    config: &MatchConfig,
) -> Option<f64> {
    let config = MatchConfig {
        class_agnostic: true,
        ..*config
    };
    rp_auc(detections, ground_truth, &config)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rp_auc: Option<f64>,
    pub crp_auc: Option<f64>,
    #[serde(rename = "ap@0.5")]
    pub ap50: Option<f64>,
    pub counts: Counts,
}

/// Everything in the JSON metric report. AP uses IoU 0.5 regardless of `config`.
pub fn evaluate(
    detections: &[Detection],
    ground_truth: &[GroundTruth],
    config: &MatchConfig,
) -> (MetricReport, PrCurve) {
    let m = match_detections(detections, ground_truth, config);
    let curve = PrCurve::from_matching(&m);
    let tp = m.is_tp.iter().filter(|&&t| t).count();
    let counts = Counts {
        tp,
        fp: m.is_tp.len() - tp,
        fn_: m.gt_matched.len() - m.gt_matched.iter().filter(|&&g| g).count(),
    };
    let ap_config = MatchConfig {
        iou_threshold: 0.5,
        ..*config
    };
    let ap50 = pr_curve(detections, ground_truth, &ap_config).average_precision();
    let report = MetricReport {
        rp_auc: curve.area(),
        crp_auc: crp_auc(detections, ground_truth, config),
        ap50,
        counts,
    };
    (report, curve)
}

/// One line of the detection interchange format.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub video_id: String,
    pub frames: Vec<u32>,
    /// `[lx, ty, rx, by]` or null per frame.
    pub boxes: Vec<Option<[f64; 4]>>,
    pub class: usize,
    pub score: f64,
    pub source_window: usize,
}

impl From<&Detection> for DetectionRecord {
    fn from(d: &Detection) -> Self {
        Self {
            video_id: d.video_id.clone(),
            frames: d.frames.clone(),
            boxes: d.boxes.iter().map(|b| b.map(|b| b.ltrb())).collect(),
            class: d.class_index,
            score: d.score,
            source_window: d.source_window,
        }
    }
}

impl TryFrom<DetectionRecord> for Detection {
    type Error = Error;

    fn try_from(r: DetectionRecord) -> Result<Self> {
        if r.frames.len() != r.boxes.len() {
            return Err(Error::parse(
                "detection record",
                "frames and boxes differ in length",
            ));
        }
        if !r.score.is_finite() {
            return Err(Error::parse("detection record", "score must be finite"));
        }
        let boxes: Vec<Option<BBox>> = r
            .boxes
            .iter()
            .map(|b| b.map(|[lx, ty, rx, by]| BBox::from_ltrb(lx, ty, rx, by)))
            .collect();
        if boxes
            .iter()
            .flatten()
            .any(|b| !b.ltrb().iter().all(|v| v.is_finite()))
        {
            return Err(Error::parse(
                "detection record",
                "box coordinates must be finite",
            ));
        }
        if boxes.iter().all(Option::is_none) {
            return Err(Error::parse("detection record", "no present frame"));
        }
        Ok(Detection {
            video_id: r.video_id,
            frames: r.frames,
            boxes,
            class_index: r.class,
            score: r.score,
            source_window: r.source_window,
        })
    }
}

pub fn write_detections_jsonl<W: Write>(detections: &[Detection], mut w: W) -> Result<()> {
    for d in detections {
        let line = serde_json::to_string(&DetectionRecord::from(d)).expect("record serializes");
        writeln!(w, "{line}").map_err(|e| Error::parse("detection jsonl", e))?;
    }
    Ok(())
}

/// Reads detection JSON-lines; blank lines are skipped, errors name the 1-based line.
pub fn read_detections_jsonl<R: BufRead>(r: R) -> Result<Vec<Detection>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(|e| Error::parse("detection jsonl", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DetectionRecord = serde_json::from_str(&line)
            .map_err(|e| Error::parse("detection jsonl", format!("line {}: {e}", i + 1)))?;
        out.push(
            Detection::try_from(rec)
                .map_err(|e| Error::parse("detection jsonl", format!("line {}: {e}", i + 1)))?,
        );
    }
    Ok(out)
}
