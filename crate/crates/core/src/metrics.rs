//! Object typing by visibility, type-conditional recall and average precision.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BevBox};

pub const DEFAULT_TAU: u32 = 4;

/// Visibility class of a ground-truth object.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ObjectType {
    /// Visible from the ego's own sensor.
    Arsv,
    /// Visible only through collaborators.
    Arcv,
    /// Invisible to everyone.
    Arci,
    /// Invisible now, but was visible through collaboration a moment ago.
    Artc,
}

impl ObjectType {
    pub const ALL: [ObjectType; 4] = [ObjectType::Arsv, ObjectType::Arcv, ObjectType::Arci, ObjectType::Artc];

    pub fn as_str(self) -> &'static str {
        match self {
            ObjectType::Arsv => "ARSV",
            ObjectType::Arcv => "ARCV",
            ObjectType::Arci => "ARCI",
            ObjectType::Artc => "ARTC",
        }
    }
}

impl fmt::Display for ObjectType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtObject {
    #[serde(rename = "box")]
    pub bbox: BevBox,
    pub points_sv: u32,
    pub points_cv: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<ObjectType>,
}

/// Ego view first, then collaborative view, then the manual label, else invisible.
pub fn classify_object(o: &GtObject, tau: u32) -> ObjectType {
    if o.points_sv > tau {
        ObjectType::Arsv
    } else if o.points_cv > tau {
        ObjectType::Arcv
    } else if let Some(label) = o.label {
        label
    } else {
        ObjectType::Arci
    }
}

/// Number of objects per type; types with no objects are omitted.
pub fn population_counts<'a>(objects: impl IntoIterator<Item = &'a GtObject>, tau: u32) -> BTreeMap<ObjectType, usize> {
    let mut out = BTreeMap::new();
    for o in objects {
        *out.entry(classify_object(o, tau)).or_insert(0) += 1;
    }
    out
}

/// For each prediction (input order), the index of the GT it matched.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Assignment {
    pub pred_to_gt: Vec<Option<usize>>,
}

impl Assignment {
    pub fn matched_gts(&self, n_gts: usize) -> Vec<bool> {
        let mut out = vec![false; n_gts];
        for g in self.pred_to_gt.iter().flatten() {
            out[*g] = true;
        }
        out
    }

    pub fn true_positives(&self) -> usize {
        self.pred_to_gt.iter().filter(|m| m.is_some()).count()
    }
}

/// Greedy one-to-one matching in descending score order. Each prediction takes the
/// highest-IoU GT still unmatched, provided the IoU reaches `iou_thr`.
pub fn match_detections(preds: &[(BevBox, f64)], gts: &[BevBox], iou_thr: f64) -> Assignment {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].1.total_cmp(&preds[a].1));
    let mut taken = vec![false; gts.len()];
    let mut pred_to_gt = vec![None; preds.len()];
    for p in order {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if taken[g] {
                continue;
            }
            let v = iou(&preds[p].0, gt);
            if v >= iou_thr && best.is_none_or(|(_, bv)| v > bv) {
                best = Some((g, v));
            }
        }
        if let Some((g, _)) = best {
            taken[g] = true;
            pred_to_gt[p] = Some(g);
        }
    }
    Assignment { pred_to_gt }
}

/// Predictions and typed ground truth for one evaluated frame.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FrameEval {
    pub preds: Vec<(BevBox, f64)>,
    pub gts: Vec<(BevBox, ObjectType)>,
}

impl FrameEval {
    fn assignment(&self, iou_thr: f64) -> Assignment {
        let boxes: Vec<BevBox> = self.gts.iter().map(|(b, _)| *b).collect();
        match_detections(&self.preds, &boxes, iou_thr)
    }
}

/// Matched / total GT per type over all frames. Types without GT are absent.
pub fn recall_by_type(frames: &[FrameEval], iou_thr: f64) -> BTreeMap<ObjectType, f64> {
    let mut counts: BTreeMap<ObjectType, (usize, usize)> = BTreeMap::new();
    for frame in frames {
        let matched = frame.assignment(iou_thr).matched_gts(frame.gts.len());
        for ((_, ty), hit) in frame.gts.iter().zip(matched) {
            let e = counts.entry(*ty).or_insert((0, 0));
            e.1 += 1;
            if hit {
                e.0 += 1;
            }
        }
    }
    counts.into_iter().map(|(ty, (hit, total))| (ty, hit as f64 / total as f64)).collect()
}

/// Area under the monotone-envelope precision/recall curve, all frames pooled.
/// Zero when there is no ground truth.
pub fn average_precision(frames: &[FrameEval], iou_thr: f64) -> f64 {
    let n_gt: usize = frames.iter().map(|f| f.gts.len()).sum();
    if n_gt == 0 {
        return 0.0;
    }
    let mut scored: Vec<(f64, bool)> = Vec::new();
    for frame in frames {
        let a = frame.assignment(iou_thr);
        scored.extend(frame.preds.iter().zip(&a.pred_to_gt).map(|((_, s), m)| (*s, m.is_some())));
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut tp = 0usize;
    let mut points = Vec::with_capacity(scored.len());
    for (i, &(_, hit)) in scored.iter().enumerate() {
        if hit {
            tp += 1;
        }
        points.push((tp as f64 / n_gt as f64, tp as f64 / (i + 1) as f64));
    }
    for i in (0..points.len().saturating_sub(1)).rev() {
        points[i].1 = points[i].1.max(points[i + 1].1);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in points {
        ap += (r - prev_recall) * p;
        prev_recall = r;
    }
    ap
}

/// One line of the ground-truth JSONL. A missing `agent` means agent 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtFrame {
    pub frame: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub agent: Option<u16>,
    pub objects: Vec<GtObject>,
}

/// One line of the detection JSONL: boxes as `[cx, cy, w, h, score]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionFrame {
    pub frame: u64,
    pub agent: u16,
    pub boxes: Vec<[f64; 5]>,
}

impl DetectionFrame {
    pub fn new(frame: u64, agent: u16, decoded: &[(BevBox, f64)]) -> Self {
        DetectionFrame { frame, agent, boxes: decoded.iter().map(|(b, s)| [b.cx, b.cy, b.w, b.h, *s]).collect() }
    }

    pub fn preds(&self) -> Vec<(BevBox, f64)> {
        self.boxes.iter().map(|b| (BevBox { cx: b[0], cy: b[1], w: b[2], h: b[3] }, b[4])).collect()
    }
}

/// Parses JSONL, reporting the 1-based line of the first bad record. Blank lines are skipped.
pub fn parse_jsonl<T: serde::de::DeserializeOwned>(text: &str) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let v = serde_json::from_str(line).map_err(|e| Error::Parse { line: i + 1, message: e.to_string() })?;
        out.push(v);
    }
    Ok(out)
}

pub fn to_jsonl<T: Serialize>(records: &[T]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("records serialize"));
        out.push('\n');
    }
    out
}

/// Joins detections with GT on `(frame, agent)`. GT frames without detections count as empty predictions.
pub fn build_frames(dets: &[DetectionFrame], gts: &[GtFrame], tau: u32) -> Vec<FrameEval> {
    let mut by_key: BTreeMap<(u64, u16), FrameEval> = BTreeMap::new();
    for g in gts {
        let e = by_key.entry((g.frame, g.agent.unwrap_or(0))).or_default();
        e.gts.extend(g.objects.iter().map(|o| (o.bbox, classify_object(o, tau))));
    }
    for d in dets {
        by_key.entry((d.frame, d.agent)).or_default().preds.extend(d.preds());
    }
    by_key.into_values().collect()
}

/// Rows of `metric,iou,value`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub rows: Vec<(String, f64, f64)>,
}

impl MetricsReport {
    pub fn get(&self, metric: &str, iou_thr: f64) -> Option<f64> {
        self.rows.iter().find(|(m, i, _)| m == metric && *i == iou_thr).map(|r| r.2)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,iou,value\n");
        for (m, i, v) in &self.rows {
            out.push_str(&format!("{m},{i},{v}\n"));
        }
        out
    }
}

pub fn evaluate(frames: &[FrameEval], ious: &[f64]) -> MetricsReport {
    let mut rows = Vec::new();
    for &thr in ious {
        rows.push(("AP".to_string(), thr, average_precision(frames, thr)));
        for (ty, r) in recall_by_type(frames, thr) {
            rows.push((ty.to_string(), thr, r));
        }
    }
    MetricsReport { rows }
}
