//! Box geometry costs, the Hungarian solver, detection/tracking bipartite
//! matching, and the combined training loss.
//!
//! Matching for tracking splits into three rules: identity-forced pairs for
//! objects continuing from the previous frame, background for track queries
//! whose object vanished, and plain detection matching for everything new.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grounding::{
    contrastive_alignment_loss, soft_token_loss, target_distribution, AlignmentBatch, TextPrompt,
    TokenSpanDistribution,
};

/// Axis-aligned box, corner form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        if ![x0, y0, x1, y1].iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("box coordinates must be finite".into()));
        }
        if x0 > x1 || y0 > y1 {
            return Err(Error::InvalidArgument(format!(
                "degenerate box [{}, {}, {}, {}]",
                x0, y0, x1, y1
            )));
        }
        Ok(Self { x0, y0, x1, y1 })
    }

    pub fn area(&self) -> f64 {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }
}

/// Plain intersection over union; zero when the union has zero area.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x1.min(b.x1) - a.x0.max(b.x0)).max(0.0);
    let ih = (a.y1.min(b.y1) - a.y0.max(b.y0)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Generalized IoU: `IoU - |hull \ union| / |hull|`, in `[-1, 1]`.
pub fn giou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x1.min(b.x1) - a.x0.max(b.x0)).max(0.0);
    let ih = (a.y1.min(b.y1) - a.y0.max(b.y0)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    let iou = if union > 0.0 { inter / union } else { 0.0 };
    let hull = (a.x1.max(b.x1) - a.x0.min(b.x0)) * (a.y1.max(b.y1) - a.y0.min(b.y0));
    if hull > 0.0 {
        iou - (hull - union) / hull
    } else {
        iou
    }
}

/// Weights of the two box-regression terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_l1: f64,
    pub lambda_giou: f64,
}

impl LossWeights {
    pub fn new(lambda_l1: f64, lambda_giou: f64) -> Result<Self> {
        if lambda_l1 < 0.0 || lambda_giou < 0.0 {
            return Err(Error::InvalidArgument("loss weights must be >= 0".into()));
        }
        if lambda_l1 == 0.0 && lambda_giou == 0.0 {
            return Err(Error::InvalidArgument(
                "loss weights must not both be zero".into(),
            ));
        }
        Ok(Self {
            lambda_l1,
            lambda_giou,
        })
    }
}

impl Default for LossWeights {
    /// The conventional 5/2 weighting of the DETR family.
    fn default() -> Self {
        Self {
            lambda_l1: 5.0,
            lambda_giou: 2.0,
        }
    }
}

/// `lambda_l1 * ||gt - pred||_1 + lambda_giou * (1 - GIoU(gt, pred))`.
pub fn box_loss(gt: &BBox, pred: &BBox, w: &LossWeights) -> f64 {
    let l1 = (gt.x0 - pred.x0).abs()
        + (gt.y0 - pred.y0).abs()
        + (gt.x1 - pred.x1).abs()
        + (gt.y1 - pred.y1).abs();
    w.lambda_l1 * l1 + w.lambda_giou * (1.0 - giou(gt, pred))
}

/// d(GIoU)/d(pred coords) as `[x0, y0, x1, y1]`, valid away from
/// coordinate-tie and zero-area configurations.
pub fn giou_grad_pred(gt: &BBox, pred: &BBox) -> [f64; 4] {
    let (a, p) = (gt, pred);
    let iw = (a.x1.min(p.x1) - a.x0.max(p.x0)).max(0.0);
    let ih = (a.y1.min(p.y1) - a.y0.max(p.y0)).max(0.0);
    let overlapping = iw > 0.0 && ih > 0.0;
    let inter = if overlapping { iw * ih } else { 0.0 };

    let mut d_inter = [0.0; 4];
    if overlapping {
        if p.x0 > a.x0 {
            d_inter[0] = -ih;
        }
        if p.y0 > a.y0 {
            d_inter[1] = -iw;
        }
        if p.x1 < a.x1 {
            d_inter[2] = ih;
        }
        if p.y1 < a.y1 {
            d_inter[3] = iw;
        }
    }

    let pw = p.x1 - p.x0;
    let ph = p.y1 - p.y0;
    let d_area = [-ph, -pw, ph, pw];

    let union = a.area() + p.area() - inter;
    let d_union: Vec<f64> = (0..4).map(|k| d_area[k] - d_inter[k]).collect();

    let hw = a.x1.max(p.x1) - a.x0.min(p.x0);
    let hh = a.y1.max(p.y1) - a.y0.min(p.y0);
    let hull = hw * hh;
    let mut d_hull = [0.0; 4];
    if p.x0 < a.x0 {
        d_hull[0] = -hh;
    }
    if p.y0 < a.y0 {
        d_hull[1] = -hw;
    }
    if p.x1 > a.x1 {
        d_hull[2] = hh;
    }
    if p.y1 > a.y1 {
        d_hull[3] = hw;
    }

    let mut grad = [0.0; 4];
    for k in 0..4 {
        let d_iou = if union > 0.0 {
            (d_inter[k] * union - inter * d_union[k]) / (union * union)
        } else {
            0.0
        };
        // GIoU = IoU - 1 + union/hull
        let d_penalty = if hull > 0.0 {
            (d_union[k] * hull - union * d_hull[k]) / (hull * hull)
        } else {
            0.0
        };
        grad[k] = d_iou + d_penalty;
    }
    grad
}

/// d(box_loss)/d(pred coords) as `[x0, y0, x1, y1]`.
pub fn box_loss_grad_pred(gt: &BBox, pred: &BBox, w: &LossWeights) -> [f64; 4] {
    let dg = giou_grad_pred(gt, pred);
    let diffs = [
        pred.x0 - gt.x0,
        pred.y0 - gt.y0,
        pred.x1 - gt.x1,
        pred.y1 - gt.y1,
    ];
    let mut grad = [0.0; 4];
    for k in 0..4 {
        grad[k] = w.lambda_l1 * diffs[k].signum() - w.lambda_giou * dg[k];
    }
    grad
}

/// Where a prediction's query came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryOrigin {
    EmptyQuery,
    TrackQuery(u64),
}

/// One proposed object: box, token-span distribution, confidence, query
/// origin, and an optional appearance embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub bbox: BBox,
    pub span_dist: TokenSpanDistribution,
    pub score: f64,
    pub origin: QueryOrigin,
    #[serde(default)]
    pub embed: Vec<f64>,
}

impl Prediction {
    pub fn new(
        bbox: BBox,
        span_dist: TokenSpanDistribution,
        score: f64,
        origin: QueryOrigin,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::InvalidArgument(format!(
                "score {} outside [0, 1]",
                score
            )));
        }
        Ok(Self {
            bbox,
            span_dist,
            score,
            origin,
            embed: Vec::new(),
        })
    }

    pub fn with_embed(mut self, embed: Vec<f64>) -> Self {
        self.embed = embed;
        self
    }
}

/// One annotated object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub bbox: BBox,
    pub category: String,
    pub track_id: Option<u64>,
}

/// Injective mapping from ground-truth objects to predictions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssignmentResult {
    /// `(gt_index, pred_index, cost)` sorted by gt index.
    pub pairs: Vec<(usize, usize, f64)>,
    /// Prediction indices mapped to the no-object label, ascending.
    pub unmatched_preds: Vec<usize>,
    pub total_cost: f64,
}

impl AssignmentResult {
    fn from_pairs(mut pairs: Vec<(usize, usize, f64)>, n_preds: usize) -> Self {
        pairs.sort_by_key(|&(g, p, _)| (g, p));
        let matched: BTreeSet<usize> = pairs.iter().map(|&(_, p, _)| p).collect();
        let unmatched_preds = (0..n_preds).filter(|p| !matched.contains(p)).collect();
        let total_cost = pairs.iter().map(|&(_, _, c)| c).sum();
        Self {
            pairs,
            unmatched_preds,
            total_cost,
        }
    }
}

/// Optimal assignment of `rows` to `cols` (index sets into `cost`), of size
/// `min(rows, cols)`. Shortest-augmenting-path with potentials; requires the
/// referenced costs to be finite.
fn solve_subset(cost: &[Vec<f64>], rows: &[usize], cols: &[usize]) -> Vec<(usize, usize)> {
    let (r, c) = (rows.len(), cols.len());
    if r == 0 || c == 0 {
        return Vec::new();
    }
    if r <= c {
        let assign = jv(&|i, j| cost[rows[i]][cols[j]], r, c);
        assign
            .into_iter()
            .enumerate()
            .map(|(i, j)| (rows[i], cols[j]))
            .collect()
    } else {
        let assign = jv(&|j, i| cost[rows[i]][cols[j]], c, r);
        assign
            .into_iter()
            .enumerate()
            .map(|(j, i)| (rows[i], cols[j]))
            .collect()
    }
}

/// Jonker-Volgenant style min-cost assignment for `r <= c`; returns the
/// column chosen for each row.
fn jv(cost: &dyn Fn(usize, usize) -> f64, r: usize, c: usize) -> Vec<usize> {
    debug_assert!(r <= c);
    let mut u = vec![0.0_f64; r + 1];
    let mut v = vec![0.0_f64; c + 1];
    // row matched to each column, 1-based; slot 0 is the staging column
    let mut matched = vec![0_usize; c + 1];
    let mut way = vec![0_usize; c + 1];

    for i in 1..=r {
        matched[0] = i;
        let mut j0 = 0_usize;
        let mut minv = vec![f64::INFINITY; c + 1];
        let mut used = vec![false; c + 1];
        loop {
            used[j0] = true;
            let i0 = matched[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0_usize;
            for j in 1..=c {
                if !used[j] {
                    let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=c {
                if used[j] {
                    u[matched[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            matched[j0] = matched[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut row_to_col = vec![usize::MAX; r];
    for j in 1..=c {
        if matched[j] != 0 {
            row_to_col[matched[j] - 1] = j - 1;
        }
    }
    row_to_col
}

/// Sum of pair costs in ascending row order, so equal-value assignments
/// compare identically to an oracle summing the same way.
fn canonical_total(cost: &[Vec<f64>], pairs: &[(usize, usize)]) -> f64 {
    let mut sorted: Vec<&(usize, usize)> = pairs.iter().collect();
    sorted.sort();
    sorted.iter().map(|&&(i, j)| cost[i][j]).sum()
}

/// Globally optimal min-cost matching of size `min(M, N)` over a dense cost
/// matrix, with ties broken toward the lexicographically smallest pair list.
///
/// The tie-break fixes rows in order: at each row the solver compares every
/// feasible column (plus leaving the row unmatched) by re-solving the
/// residual problem, keeping the first option that attains the minimum.
pub fn hungarian(cost: &[Vec<f64>]) -> Result<AssignmentResult> {
    let m = cost.len();
    let n = cost.first().map_or(0, |r| r.len());
    for row in cost {
        if row.len() != n {
            return Err(Error::Assignment("ragged cost matrix".into()));
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("cost matrix must be finite".into()));
        }
    }
    if m == 0 || n == 0 {
        return Ok(AssignmentResult::from_pairs(Vec::new(), n));
    }

    let mut fixed: Vec<(usize, usize)> = Vec::new();
    let mut free_cols: Vec<usize> = (0..n).collect();
    for i in 0..m {
        let rows_after: Vec<usize> = (i + 1..m).collect();
        let remaining = (m - i).min(free_cols.len());
        if remaining == 0 {
            break;
        }
        let mut best: Option<(f64, Option<usize>)> = None;
        for (ci, &j) in free_cols.iter().enumerate() {
            let mut cols_rest = free_cols.clone();
            cols_rest.remove(ci);
            let mut pairs = fixed.clone();
            pairs.push((i, j));
            pairs.extend(solve_subset(cost, &rows_after, &cols_rest));
            let total = canonical_total(cost, &pairs);
            if best.as_ref().is_none_or(|&(bt, _)| total < bt) {
                best = Some((total, Some(j)));
            }
        }
        // leaving row i unmatched is feasible only when enough rows remain
        if rows_after.len() >= remaining {
            let mut pairs = fixed.clone();
            pairs.extend(solve_subset(cost, &rows_after, &free_cols));
            let total = canonical_total(cost, &pairs);
            if best.as_ref().is_none_or(|&(bt, _)| total < bt) {
                best = Some((total, None));
            }
        }
        if let Some((_, Some(j))) = best {
            fixed.push((i, j));
            free_cols.retain(|&x| x != j);
        }
    }

    let pairs = fixed.into_iter().map(|(i, j)| (i, j, cost[i][j])).collect();
    Ok(AssignmentResult::from_pairs(pairs, n))
}

/// Matching cost of one (gt, pred) pair: span-mass class cost plus box loss.
pub fn detection_cost(
    gt: &GroundTruth,
    pred: &Prediction,
    prompt: &TextPrompt,
    w: &LossWeights,
    class_weight: f64,
) -> Result<f64> {
    let span = prompt
        .span_of(&gt.category)
        .ok_or_else(|| Error::Assignment(format!("category {:?} not in prompt", gt.category)))?;
    if pred.span_dist.token_count() != prompt.token_count {
        return Err(Error::ShapeMismatch(format!(
            "prediction spans {} tokens, prompt has {}",
            pred.span_dist.token_count(),
            prompt.token_count
        )));
    }
    let mass = pred.span_dist.span_mass(span);
    Ok(class_weight * (1.0 - mass) + box_loss(&gt.bbox, &pred.bbox, w))
}

/// Detection matching: every object is treated as newly appeared and matched
/// to predictions by class-plus-box cost; leftover predictions go to the
/// no-object label.
pub fn match_detection(
    preds: &[Prediction],
    gts: &[GroundTruth],
    prompt: &TextPrompt,
    w: &LossWeights,
    class_weight: f64,
) -> Result<AssignmentResult> {
    let mut cost = vec![vec![0.0; preds.len()]; gts.len()];
    for (i, gt) in gts.iter().enumerate() {
        for (j, pred) in preds.iter().enumerate() {
            cost[i][j] = detection_cost(gt, pred, prompt, w, class_weight)?;
        }
    }
    if gts.is_empty() {
        return Ok(AssignmentResult::from_pairs(Vec::new(), preds.len()));
    }
    hungarian(&cost)
}

/// Tracking matching. Three rules compose the result:
/// (a) a ground truth whose track id matches a track-query prediction is
/// paired with it directly, whatever the cost; (b) track-query predictions
/// whose identity has no ground truth this frame go to the no-object label;
/// (c) the remaining ground truths are matched against the remaining
/// empty-query predictions with detection costs.
pub fn match_tracking(
    preds: &[Prediction],
    gts: &[GroundTruth],
    prev_ids: &BTreeSet<u64>,
    prompt: &TextPrompt,
    w: &LossWeights,
    class_weight: f64,
) -> Result<AssignmentResult> {
    let mut seen_ids = BTreeSet::new();
    for pred in preds {
        if let QueryOrigin::TrackQuery(id) = pred.origin {
            if !seen_ids.insert(id) {
                return Err(Error::Assignment(format!(
                    "duplicate track query id {}",
                    id
                )));
            }
            if !prev_ids.contains(&id) {
                return Err(Error::Assignment(format!(
                    "track query id {} not among previous identities",
                    id
                )));
            }
        }
    }

    let mut pairs: Vec<(usize, usize, f64)> = Vec::new();
    let mut gt_free: Vec<usize> = Vec::new();
    for (i, gt) in gts.iter().enumerate() {
        let forced = gt.track_id.and_then(|tid| {
            preds
                .iter()
                .position(|p| p.origin == QueryOrigin::TrackQuery(tid))
        });
        match forced {
            Some(j) => {
                let c = detection_cost(gt, &preds[j], prompt, w, class_weight)?;
                pairs.push((i, j, c));
            }
            None => gt_free.push(i),
        }
    }

    let empty_preds: Vec<usize> = preds
        .iter()
        .enumerate()
        .filter(|(_, p)| p.origin == QueryOrigin::EmptyQuery)
        .map(|(j, _)| j)
        .collect();

    let mut cost = vec![vec![0.0; empty_preds.len()]; gt_free.len()];
    for (ri, &i) in gt_free.iter().enumerate() {
        for (rj, &j) in empty_preds.iter().enumerate() {
            cost[ri][rj] = detection_cost(&gts[i], &preds[j], prompt, w, class_weight)?;
        }
    }
    let residual = hungarian(&cost)?;
    for &(ri, rj, c) in &residual.pairs {
        pairs.push((gt_free[ri], empty_preds[rj], c));
    }

    Ok(AssignmentResult::from_pairs(pairs, preds.len()))
}

/// The combined loss split into its four terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub soft: f64,
    pub contrast: f64,
    pub box_detect: f64,
    pub box_track: f64,
}

impl LossBreakdown {
    pub fn total(&self) -> f64 {
        self.soft + self.contrast + self.box_detect + self.box_track
    }
}

/// Combined loss `soft + contrast + box_detect + box_track` under a fixed
/// assignment. Matched predictions take their ground truth's span target and
/// contribute box loss to the detect or track term depending on query
/// origin; unmatched predictions only pay soft-token loss toward no-object.
pub fn total_loss(
    assignment: &AssignmentResult,
    preds: &[Prediction],
    gts: &[GroundTruth],
    prompt: &TextPrompt,
    align_batch: Option<&AlignmentBatch>,
    w: &LossWeights,
) -> Result<LossBreakdown> {
    let mut claimed = vec![false; preds.len()];
    let mut target_of: Vec<Option<usize>> = vec![None; preds.len()];
    for &(i, j, _) in &assignment.pairs {
        if i >= gts.len() || j >= preds.len() || claimed[j] {
            return Err(Error::Assignment(
                "assignment inconsistent with inputs".into(),
            ));
        }
        claimed[j] = true;
        target_of[j] = Some(i);
    }
    for &j in &assignment.unmatched_preds {
        if j >= preds.len() || claimed[j] {
            return Err(Error::Assignment(
                "assignment inconsistent with inputs".into(),
            ));
        }
        claimed[j] = true;
    }
    if claimed.iter().any(|&c| !c) {
        return Err(Error::Assignment(
            "assignment does not cover every prediction".into(),
        ));
    }

    let mut targets = Vec::with_capacity(preds.len());
    for (j, pred) in preds.iter().enumerate() {
        let span = match target_of[j] {
            Some(i) => Some(prompt.span_of(&gts[i].category).ok_or_else(|| {
                Error::Assignment(format!("category {:?} not in prompt", gts[i].category))
            })?),
            None => None,
        };
        if pred.span_dist.token_count() != prompt.token_count {
            return Err(Error::ShapeMismatch(
                "prediction token count differs from prompt".into(),
            ));
        }
        targets.push(target_distribution(span, prompt.token_count)?);
    }
    let dists: Vec<TokenSpanDistribution> = preds.iter().map(|p| p.span_dist.clone()).collect();
    let soft = soft_token_loss(&dists, &targets)?;

    let contrast = match align_batch {
        Some(batch) => contrastive_alignment_loss(batch)?,
        None => 0.0,
    };

    let mut box_detect = 0.0;
    let mut box_track = 0.0;
    for &(i, j, _) in &assignment.pairs {
        let loss = box_loss(&gts[i].bbox, &preds[j].bbox, w);
        match preds[j].origin {
            QueryOrigin::EmptyQuery => box_detect += loss,
            QueryOrigin::TrackQuery(_) => box_track += loss,
        }
    }

    Ok(LossBreakdown {
        soft,
        contrast,
        box_detect,
        box_track,
    })
}
