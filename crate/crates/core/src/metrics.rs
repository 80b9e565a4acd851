//! Multi-object tracking evaluation: CLEAR-MOT counts, MOTA, IDF1, MT/ML,
//! and single-category detection average precision.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::assignment::{hungarian, iou, BBox};
use crate::error::{Error, Result};
use crate::tracker::TrackOutput;

/// One trajectory sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub frame: usize,
    pub bbox: BBox,
    pub category: String,
}

/// A set of identified trajectories, id -> frame-ordered samples.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySet {
    pub trajectories: BTreeMap<u64, Vec<TrajectoryPoint>>,
}

impl TrajectorySet {
    pub fn new(trajectories: BTreeMap<u64, Vec<TrajectoryPoint>>) -> Result<Self> {
        for (id, points) in &trajectories {
            for pair in points.windows(2) {
                if pair[1].frame <= pair[0].frame {
                    return Err(Error::Metrics(format!(
                        "trajectory {}: frames not strictly increasing",
                        id
                    )));
                }
            }
        }
        Ok(Self { trajectories })
    }

    pub fn from_track_outputs(outputs: &[Vec<TrackOutput>]) -> Result<Self> {
        let mut map: BTreeMap<u64, Vec<TrajectoryPoint>> = BTreeMap::new();
        for frame in outputs {
            for o in frame {
                map.entry(o.id).or_default().push(TrajectoryPoint {
                    frame: o.frame,
                    bbox: o.bbox,
                    category: o.category.clone(),
                });
            }
        }
        Self::new(map)
    }

    pub fn push(&mut self, id: u64, point: TrajectoryPoint) {
        self.trajectories.entry(id).or_default().push(point);
    }

    /// `[first, last]` frame touched by any trajectory.
    pub fn frame_range(&self) -> Option<(usize, usize)> {
        let mut range: Option<(usize, usize)> = None;
        for points in self.trajectories.values() {
            for p in points {
                range = Some(match range {
                    None => (p.frame, p.frame),
                    Some((lo, hi)) => (lo.min(p.frame), hi.max(p.frame)),
                });
            }
        }
        range
    }

    pub fn total_points(&self) -> usize {
        self.trajectories.values().map(|p| p.len()).sum()
    }

    /// Keeps only samples of one category, dropping emptied trajectories.
    pub fn filter_category(&self, category: &str) -> Self {
        let mut map = BTreeMap::new();
        for (&id, points) in &self.trajectories {
            let kept: Vec<TrajectoryPoint> = points
                .iter()
                .filter(|p| p.category == category)
                .cloned()
                .collect();
            if !kept.is_empty() {
                map.insert(id, kept);
            }
        }
        Self { trajectories: map }
    }

    /// id -> box for every trajectory present at `frame`.
    fn at_frame(&self, frame: usize) -> BTreeMap<u64, BBox> {
        let mut out = BTreeMap::new();
        for (&id, points) in &self.trajectories {
            if let Some(p) = points.iter().find(|p| p.frame == frame) {
                out.insert(id, p.bbox);
            }
        }
        out
    }
}

/// Frame-level CLEAR-MOT counts plus the per-frame correspondence used by
/// MT/ML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClearMotResult {
    pub fp: usize,
    pub fn_count: usize,
    pub id_switches: usize,
    /// frame -> matched (gt_id, pred_id) pairs.
    pub frame_matches: BTreeMap<usize, Vec<(u64, u64)>>,
    /// Total number of ground-truth boxes.
    pub n_gt: usize,
}

const FORBIDDEN: f64 = 1e12;

/// Frame-by-frame correspondence. Matches from the previous frame are kept
/// while both boxes persist with IoU at or above the threshold; the rest are
/// matched fresh by Hungarian on `1 - IoU`. Unmatched ground truths count as
/// false negatives, unmatched predictions as false positives, and a ground
/// truth re-matched to a different prediction id than it last had counts as
/// an identity switch.
pub fn clear_mot(gt: &TrajectorySet, pred: &TrajectorySet, iou_thr: f64) -> Result<ClearMotResult> {
    if !(iou_thr > 0.0 && iou_thr <= 1.0) {
        return Err(Error::Metrics(format!(
            "iou threshold {} outside (0, 1]",
            iou_thr
        )));
    }
    let mut result = ClearMotResult {
        fp: 0,
        fn_count: 0,
        id_switches: 0,
        frame_matches: BTreeMap::new(),
        n_gt: gt.total_points(),
    };
    let range = match (gt.frame_range(), pred.frame_range()) {
        (None, None) => return Ok(result),
        (Some(r), None) | (None, Some(r)) => r,
        (Some(a), Some(b)) => (a.0.min(b.0), a.1.max(b.1)),
    };

    let mut prev_pairs: Vec<(u64, u64)> = Vec::new();
    let mut last_match: BTreeMap<u64, u64> = BTreeMap::new();
    for frame in range.0..=range.1 {
        let mut gt_here = gt.at_frame(frame);
        let mut pred_here = pred.at_frame(frame);
        let mut pairs: Vec<(u64, u64)> = Vec::new();

        // continuity: keep last frame's pairs that still overlap
        for &(g, p) in &prev_pairs {
            if let (Some(gb), Some(pb)) = (gt_here.get(&g), pred_here.get(&p)) {
                if iou(gb, pb) >= iou_thr {
                    pairs.push((g, p));
                }
            }
        }
        for &(g, p) in &pairs {
            gt_here.remove(&g);
            pred_here.remove(&p);
        }

        // fresh matches among the rest
        let gt_ids: Vec<u64> = gt_here.keys().copied().collect();
        let pred_ids: Vec<u64> = pred_here.keys().copied().collect();
        if !gt_ids.is_empty() && !pred_ids.is_empty() {
            let cost: Vec<Vec<f64>> = gt_ids
                .iter()
                .map(|g| {
                    pred_ids
                        .iter()
                        .map(|p| {
                            let overlap = iou(&gt_here[g], &pred_here[p]);
                            if overlap >= iou_thr {
                                1.0 - overlap
                            } else {
                                FORBIDDEN
                            }
                        })
                        .collect()
                })
                .collect();
            for &(gi, pi, c) in &hungarian(&cost)?.pairs {
                if c < FORBIDDEN {
                    pairs.push((gt_ids[gi], pred_ids[pi]));
                }
            }
        }

        for &(g, p) in &pairs {
            if let Some(&prev) = last_match.get(&g) {
                if prev != p {
                    result.id_switches += 1;
                }
            }
            last_match.insert(g, p);
            gt_here.remove(&g);
            pred_here.remove(&p);
        }
        result.fn_count += gt_here.len();
        result.fp += pred_here.len();
        if !pairs.is_empty() {
            pairs.sort_unstable();
            result.frame_matches.insert(frame, pairs.clone());
        }
        prev_pairs = pairs;
    }
    Ok(result)
}

/// `1 - (FN + FP + IDS) / n_gt`; may be negative.
pub fn mota(fp: usize, fn_count: usize, id_switches: usize, n_gt: usize) -> Result<f64> {
    if n_gt == 0 {
        return Err(Error::Metrics(
            "mota undefined for zero ground truths".into(),
        ));
    }
    Ok(1.0 - (fn_count + fp + id_switches) as f64 / n_gt as f64)
}

/// Identity-level counts from the globally optimal trajectory pairing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdCounts {
    pub idtp: usize,
    pub gt_points: usize,
    pub pred_points: usize,
}

impl IdCounts {
    pub fn idf1(&self) -> f64 {
        let denom = self.gt_points + self.pred_points;
        if denom == 0 {
            1.0
        } else {
            2.0 * self.idtp as f64 / denom as f64
        }
    }
}

/// Sequence-level identity counts: a one-to-one trajectory pairing chosen by
/// Hungarian to maximize per-pair frame overlap (frames where both exist with
/// IoU at or above the threshold).
pub fn idf1_counts(gt: &TrajectorySet, pred: &TrajectorySet, iou_thr: f64) -> Result<IdCounts> {
    if !(iou_thr > 0.0 && iou_thr <= 1.0) {
        return Err(Error::Metrics(format!(
            "iou threshold {} outside (0, 1]",
            iou_thr
        )));
    }
    let gt_ids: Vec<u64> = gt.trajectories.keys().copied().collect();
    let pred_ids: Vec<u64> = pred.trajectories.keys().copied().collect();
    let counts = IdCounts {
        idtp: 0,
        gt_points: gt.total_points(),
        pred_points: pred.total_points(),
    };
    if gt_ids.is_empty() || pred_ids.is_empty() {
        return Ok(counts);
    }

    let overlap = |g: u64, p: u64| -> usize {
        let gp = &gt.trajectories[&g];
        let pp = &pred.trajectories[&p];
        let mut count = 0;
        for a in gp {
            if let Some(b) = pp.iter().find(|b| b.frame == a.frame) {
                if iou(&a.bbox, &b.bbox) >= iou_thr {
                    count += 1;
                }
            }
        }
        count
    };

    let cost: Vec<Vec<f64>> = gt_ids
        .iter()
        .map(|&g| pred_ids.iter().map(|&p| -(overlap(g, p) as f64)).collect())
        .collect();
    let assignment = hungarian(&cost)?;
    let idtp: usize = assignment
        .pairs
        .iter()
        .map(|&(gi, pi, _)| overlap(gt_ids[gi], pred_ids[pi]))
        .sum();
    Ok(IdCounts { idtp, ..counts })
}

/// `2*IDTP / (2*IDTP + IDFP + IDFN)`; 1.0 when both sets are empty.
pub fn idf1(gt: &TrajectorySet, pred: &TrajectorySet, iou_thr: f64) -> Result<f64> {
    Ok(idf1_counts(gt, pred, iou_thr)?.idf1())
}

/// Mostly-tracked / mostly-lost counts: coverage strictly above 80% of a
/// trajectory's span is MT, strictly below 20% is ML.
pub fn mt_ml(
    gt: &TrajectorySet,
    frame_matches: &BTreeMap<usize, Vec<(u64, u64)>>,
) -> (usize, usize) {
    let mut mt = 0;
    let mut ml = 0;
    for (&id, points) in &gt.trajectories {
        if points.is_empty() {
            continue;
        }
        let matched = points
            .iter()
            .filter(|p| {
                frame_matches
                    .get(&p.frame)
                    .is_some_and(|pairs| pairs.iter().any(|&(g, _)| g == id))
            })
            .count();
        let ratio = matched as f64 / points.len() as f64;
        if ratio > 0.8 {
            mt += 1;
        }
        if ratio < 0.2 {
            ml += 1;
        }
    }
    (mt, ml)
}

/// Single-category average precision at one IoU threshold.
///
/// Detections are ranked by score; each greedily claims the best unclaimed
/// ground truth of its frame with IoU at or above the threshold. AP is the
/// area under the precision-recall curve with all-point interpolation.
pub fn average_precision(
    dets: &[Vec<(BBox, f64)>],
    gts: &[Vec<BBox>],
    iou_thr: f64,
) -> Result<f64> {
    if dets.len() != gts.len() {
        return Err(Error::Metrics(format!(
            "{} detection frames vs {} ground-truth frames",
            dets.len(),
            gts.len()
        )));
    }
    if !(iou_thr > 0.0 && iou_thr <= 1.0) {
        return Err(Error::Metrics(format!(
            "iou threshold {} outside (0, 1]",
            iou_thr
        )));
    }
    let total_gt: usize = gts.iter().map(|f| f.len()).sum();
    if total_gt == 0 {
        return Ok(0.0);
    }
    let mut ranked: Vec<(f64, usize, usize)> = Vec::new();
    for (f, frame) in dets.iter().enumerate() {
        for (k, &(_, score)) in frame.iter().enumerate() {
            if !(0.0..=1.0).contains(&score) {
                return Err(Error::Metrics(format!("score {} outside [0, 1]", score)));
            }
            ranked.push((score, f, k));
        }
    }
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    let mut claimed: Vec<Vec<bool>> = gts.iter().map(|f| vec![false; f.len()]).collect();
    let mut tp_flags = Vec::with_capacity(ranked.len());
    for &(_, f, k) in &ranked {
        let det_box = dets[f][k].0;
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt_box) in gts[f].iter().enumerate() {
            if claimed[f][gi] {
                continue;
            }
            let overlap = iou(&det_box, gt_box);
            if overlap >= iou_thr && best.is_none_or(|(_, bo)| overlap > bo) {
                best = Some((gi, overlap));
            }
        }
        match best {
            Some((gi, _)) => {
                claimed[f][gi] = true;
                tp_flags.push(true);
            }
            None => tp_flags.push(false),
        }
    }

    // precision/recall after each detection, then backward-max interpolation
    let mut precisions = Vec::with_capacity(tp_flags.len());
    let mut recalls = Vec::with_capacity(tp_flags.len());
    let mut tp = 0usize;
    for (k, &hit) in tp_flags.iter().enumerate() {
        if hit {
            tp += 1;
        }
        precisions.push(tp as f64 / (k + 1) as f64);
        recalls.push(tp as f64 / total_gt as f64);
    }
    let mut running = 0.0_f64;
    for p in precisions.iter_mut().rev() {
        running = running.max(*p);
        *p = running;
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in recalls.iter().zip(&precisions) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    Ok(ap)
}

/// [`average_precision`] across several IoU thresholds.
pub fn average_precision_sweep(
    dets: &[Vec<(BBox, f64)>],
    gts: &[Vec<BBox>],
    thresholds: &[f64],
) -> Result<Vec<(f64, f64)>> {
    thresholds
        .iter()
        .map(|&t| average_precision(dets, gts, t).map(|ap| (t, ap)))
        .collect()
}

/// Accumulated MOT and detection metrics for one scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mota: f64,
    pub idf1: f64,
    pub mt: usize,
    pub ml: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_count: usize,
    pub ids: usize,
    pub n_gt: usize,
    pub ap: Option<f64>,
}
