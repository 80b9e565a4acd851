//! Frame-by-frame track lifecycle: association, score filtering, NMS,
//! inactive patience, and attention-free re-identification.
//!
//! The module replays the lifecycle decision rules on externally supplied
//! detections. Detection-to-track binding uses the track-query origin tag
//! when one is present, else embedding similarity; a track remembers the tag
//! that last fed it so tagged continuations bind directly on later frames.

use serde::{Deserialize, Serialize};

use crate::assignment::{iou, BBox, QueryOrigin};
use crate::error::{Error, Result};

/// Lifecycle thresholds. Defaults: deactivate below score 0.4, suppress
/// active overlaps above IoU 0.9, keep inactive tracks for 5 frames,
/// re-identify at score 0.4, gate hinted initialization at IoU 0.5, and cap
/// detections at 500 per frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackerConfig {
    pub sigma_track: f64,
    pub sigma_nms: f64,
    pub n_reid: usize,
    pub sigma_reid: f64,
    pub init_iou: f64,
    pub n_box: usize,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            sigma_track: 0.4,
            sigma_nms: 0.9,
            n_reid: 5,
            sigma_reid: 0.4,
            init_iou: 0.5,
            n_box: 500,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("sigma_track", self.sigma_track),
            ("sigma_nms", self.sigma_nms),
            ("sigma_reid", self.sigma_reid),
            ("init_iou", self.init_iou),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Tracker(format!("{} = {} outside [0, 1]", name, v)));
            }
        }
        if self.n_box == 0 {
            return Err(Error::Tracker("n_box must be >= 1".into()));
        }
        Ok(())
    }
}

/// Minimum cosine similarity for binding an unclaimed detection to an active
/// track when no origin tag resolves it. Identity embeddings are near-unit
/// directions, so anything below this is a different object.
const EMBED_BIND_MIN_COSINE: f64 = 0.5;

/// One detector output as the tracker consumes it: box, confidence, resolved
/// category, appearance embedding, and the query origin tag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackerDetection {
    pub bbox: BBox,
    pub score: f64,
    pub category: String,
    pub embed: Vec<f64>,
    pub origin: QueryOrigin,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrackStatus {
    Active,
    Inactive { frames_inactive: usize },
    Removed,
}

/// A single tracked object. The category is frozen at birth; `assoc_key`
/// carries the origin tag of the detection that last fed the track.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Track {
    pub id: u64,
    pub bbox: BBox,
    pub category: String,
    pub score: f64,
    pub embed: Vec<f64>,
    pub status: TrackStatus,
    pub history: Vec<(usize, BBox)>,
    pub assoc_key: Option<u64>,
}

impl Track {
    pub fn is_active(&self) -> bool {
        self.status == TrackStatus::Active
    }

    pub fn is_inactive(&self) -> bool {
        matches!(self.status, TrackStatus::Inactive { .. })
    }
}

/// Mutable tracker state: single-owner, stepped one frame at a time.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrackState {
    pub frame_index: usize,
    pub tracks: Vec<Track>,
    pub next_id: u64,
}

impl TrackState {
    pub fn new() -> Self {
        Self::default()
    }

    fn active_ids(&self) -> Vec<u64> {
        self.tracks
            .iter()
            .filter(|t| t.is_active())
            .map(|t| t.id)
            .collect()
    }

    fn track_mut(&mut self, id: u64) -> &mut Track {
        self.tracks
            .iter_mut()
            .find(|t| t.id == id)
            .expect("track id issued by this state")
    }

    fn track(&self, id: u64) -> &Track {
        self.tracks
            .iter()
            .find(|t| t.id == id)
            .expect("track id issued by this state")
    }
}

/// Per-frame emission for one active track.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackOutput {
    pub frame: usize,
    pub id: u64,
    pub bbox: BBox,
    pub score: f64,
    pub category: String,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() || a.is_empty() {
        return 0.0;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Greedy re-identification: pairs inactive tracks with candidates scoring at
/// least `sigma_reid`, highest embedding cosine first, ties broken by IoU
/// with the track's last box. Returns `(track_id, candidate_index)` pairs.
pub fn reidentify(
    inactive: &[Track],
    candidates: &[TrackerDetection],
    cfg: &TrackerConfig,
) -> Vec<(u64, usize)> {
    let mut scored: Vec<(f64, f64, u64, usize)> = Vec::new();
    for track in inactive {
        for (k, cand) in candidates.iter().enumerate() {
            if cand.score >= cfg.sigma_reid {
                let sim = cosine(&track.embed, &cand.embed);
                let overlap = iou(&track.bbox, &cand.bbox);
                scored.push((sim, overlap, track.id, k));
            }
        }
    }
    scored.sort_by(|a, b| {
        b.0.total_cmp(&a.0)
            .then(b.1.total_cmp(&a.1))
            .then(a.2.cmp(&b.2))
            .then(a.3.cmp(&b.3))
    });
    let mut used_tracks = std::collections::BTreeSet::new();
    let mut used_cands = std::collections::BTreeSet::new();
    let mut pairs = Vec::new();
    for (_, _, id, k) in scored {
        if used_tracks.insert(id) && used_cands.insert(k) {
            pairs.push((id, k));
        }
    }
    pairs
}

/// Advances the tracker by one frame. Phases, in order: (1) bind detections
/// to active tracks (origin tag first, embedding similarity otherwise) and
/// update them; (2) deactivate active tracks scoring below `sigma_track` or
/// left unseen; (3) NMS among active tracks above `sigma_nms`; (4) attempt
/// re-identification of inactive tracks; (5) initialize new tracks from
/// unclaimed confident detections; (6) advance patience counters and remove
/// tracks past `n_reid`. Returns the active tracks after the frame.
pub fn step(
    state: &mut TrackState,
    detections: &[TrackerDetection],
    cfg: &TrackerConfig,
) -> Result<Vec<TrackOutput>> {
    cfg.validate()?;
    if detections.len() > cfg.n_box {
        return Err(Error::Tracker(format!(
            "{} detections exceed n_box = {}",
            detections.len(),
            cfg.n_box
        )));
    }
    let mut seen_keys = std::collections::BTreeSet::new();
    for det in detections {
        if !(0.0..=1.0).contains(&det.score) {
            return Err(Error::Tracker(format!(
                "score {} outside [0, 1]",
                det.score
            )));
        }
        if let QueryOrigin::TrackQuery(key) = det.origin {
            if !seen_keys.insert(key) {
                return Err(Error::Tracker(format!("duplicate track query id {}", key)));
            }
        }
    }

    let frame = state.frame_index;
    let mut claimed = vec![false; detections.len()];
    let mut updated: Vec<u64> = Vec::new();

    // (1a) tag binding against active tracks
    for (k, det) in detections.iter().enumerate() {
        if let QueryOrigin::TrackQuery(key) = det.origin {
            let hit = state
                .tracks
                .iter()
                .find(|t| t.is_active() && t.assoc_key == Some(key))
                .map(|t| t.id);
            if let Some(id) = hit {
                apply_detection(state.track_mut(id), det, frame);
                claimed[k] = true;
                updated.push(id);
            }
        }
    }

    // (1b) embedding binding for whatever the tags did not resolve
    let mut bind_pool: Vec<(f64, u64, usize)> = Vec::new();
    for (k, det) in detections.iter().enumerate() {
        if claimed[k] {
            continue;
        }
        for track in state.tracks.iter() {
            if track.is_active() && !updated.contains(&track.id) {
                let sim = cosine(&track.embed, &det.embed);
                if sim >= EMBED_BIND_MIN_COSINE {
                    bind_pool.push((sim, track.id, k));
                }
            }
        }
    }
    bind_pool.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    for (_, id, k) in bind_pool {
        if claimed[k] || updated.contains(&id) {
            continue;
        }
        apply_detection(state.track_mut(id), &detections[k], frame);
        claimed[k] = true;
        updated.push(id);
    }

    // (2) deactivate: low score or unseen this frame
    for track in state.tracks.iter_mut() {
        if track.is_active() && (track.score < cfg.sigma_track || !updated.contains(&track.id)) {
            track.status = TrackStatus::Inactive { frames_inactive: 0 };
        }
    }

    // (3) NMS among active tracks, higher score wins, older id wins ties
    let mut order: Vec<u64> = state.active_ids();
    order.sort_by(|&a, &b| {
        let (ta, tb) = (state.track(a), state.track(b));
        tb.score.total_cmp(&ta.score).then(a.cmp(&b))
    });
    let mut kept: Vec<u64> = Vec::new();
    for id in order {
        let candidate = state.track(id);
        let suppressed = kept
            .iter()
            .any(|&kid| iou(&state.track(kid).bbox, &candidate.bbox) > cfg.sigma_nms);
        if suppressed {
            state.track_mut(id).status = TrackStatus::Inactive { frames_inactive: 0 };
        } else {
            kept.push(id);
        }
    }

    // (4) re-identification: direct tag hits first, then greedy embedding;
    // a reactivation landing on an active track past sigma_nms is a
    // duplicate and stays suppressed
    let collides = |state: &TrackState, bbox: &BBox| {
        state
            .tracks
            .iter()
            .any(|t| t.is_active() && iou(&t.bbox, bbox) > cfg.sigma_nms)
    };
    for (k, det) in detections.iter().enumerate() {
        if claimed[k] || det.score < cfg.sigma_reid {
            continue;
        }
        if let QueryOrigin::TrackQuery(key) = det.origin {
            let hit = state
                .tracks
                .iter()
                .find(|t| t.is_inactive() && t.assoc_key == Some(key))
                .map(|t| t.id);
            if let Some(id) = hit {
                if collides(state, &det.bbox) {
                    continue;
                }
                reactivate(state.track_mut(id), det, frame);
                claimed[k] = true;
            }
        }
    }
    let inactive: Vec<Track> = state
        .tracks
        .iter()
        .filter(|t| t.is_inactive())
        .cloned()
        .collect();
    let candidate_idx: Vec<usize> = (0..detections.len()).filter(|&k| !claimed[k]).collect();
    let candidates: Vec<TrackerDetection> = candidate_idx
        .iter()
        .map(|&k| detections[k].clone())
        .collect();
    for (track_id, local) in reidentify(&inactive, &candidates, cfg) {
        let k = candidate_idx[local];
        if !state.track(track_id).is_inactive() || collides(state, &detections[k].bbox) {
            continue;
        }
        reactivate(state.track_mut(track_id), &detections[k], frame);
        claimed[k] = true;
    }

    // (5) initialize new tracks from unclaimed confident detections
    let mut eligible: Vec<usize> = (0..detections.len())
        .filter(|&k| {
            if claimed[k] || detections[k].score < cfg.sigma_track {
                return false;
            }
            if let QueryOrigin::TrackQuery(key) = detections[k].origin {
                // a prior-frame association hint: require overlap with the
                // hinted track's last box when that track is still known
                if let Some(prev) = state.tracks.iter().find(|t| t.assoc_key == Some(key)) {
                    if iou(&prev.bbox, &detections[k].bbox) <= cfg.init_iou {
                        return false;
                    }
                }
            }
            true
        })
        .collect();
    // duplicate suppression at birth, higher score first, so the NMS
    // invariant holds for the tracks this step creates as well
    eligible.sort_by(|&a, &b| {
        detections[b]
            .score
            .total_cmp(&detections[a].score)
            .then(a.cmp(&b))
    });
    let mut active_boxes: Vec<BBox> = state
        .tracks
        .iter()
        .filter(|t| t.is_active())
        .map(|t| t.bbox)
        .collect();
    let mut births: Vec<usize> = Vec::new();
    for k in eligible {
        if active_boxes
            .iter()
            .any(|b| iou(b, &detections[k].bbox) > cfg.sigma_nms)
        {
            continue;
        }
        active_boxes.push(detections[k].bbox);
        births.push(k);
    }
    births.sort_unstable();
    for k in births {
        let det = &detections[k];
        let id = state.next_id;
        state.next_id += 1;
        state.tracks.push(Track {
            id,
            bbox: det.bbox,
            category: det.category.clone(),
            score: det.score,
            embed: det.embed.clone(),
            status: TrackStatus::Active,
            history: vec![(frame, det.bbox)],
            assoc_key: match det.origin {
                QueryOrigin::TrackQuery(key) => Some(key),
                QueryOrigin::EmptyQuery => None,
            },
        });
    }

    // (6) advance patience, removing tracks past n_reid
    for track in state.tracks.iter_mut() {
        if let TrackStatus::Inactive { frames_inactive } = track.status {
            let advanced = frames_inactive + 1;
            if advanced > cfg.n_reid {
                track.status = TrackStatus::Removed;
            } else {
                track.status = TrackStatus::Inactive {
                    frames_inactive: advanced,
                };
            }
        }
    }

    state.frame_index += 1;

    let mut outputs: Vec<TrackOutput> = state
        .tracks
        .iter()
        .filter(|t| t.is_active())
        .map(|t| TrackOutput {
            frame,
            id: t.id,
            bbox: t.bbox,
            score: t.score,
            category: t.category.clone(),
        })
        .collect();
    outputs.sort_by_key(|o| o.id);
    Ok(outputs)
}

fn apply_detection(track: &mut Track, det: &TrackerDetection, frame: usize) {
    track.bbox = det.bbox;
    track.score = det.score;
    if !det.embed.is_empty() {
        track.embed = det.embed.clone();
    }
    if let QueryOrigin::TrackQuery(key) = det.origin {
        track.assoc_key = Some(key);
    }
    track.history.push((frame, det.bbox));
}

fn reactivate(track: &mut Track, det: &TrackerDetection, frame: usize) {
    track.status = TrackStatus::Active;
    apply_detection(track, det, frame);
}

/// Runs [`step`] over a whole sequence, returning the per-frame outputs.
pub fn run_sequence(
    frames: &[Vec<TrackerDetection>],
    cfg: &TrackerConfig,
) -> Result<Vec<Vec<TrackOutput>>> {
    if frames.is_empty() {
        return Err(Error::Tracker("empty frame list".into()));
    }
    let mut state = TrackState::new();
    let mut outputs = Vec::with_capacity(frames.len());
    for detections in frames {
        outputs.push(step(&mut state, detections, cfg)?);
    }
    Ok(outputs)
}

/// CSV header used by [`outputs_to_csv`].
pub const CSV_HEADER: &str = "frame,id,x,y,w,h,score,category";

/// Serializes per-frame outputs as MOT-challenge-style CSV rows
/// `frame,id,x,y,w,h,score,category` under a header line.
pub fn outputs_to_csv(outputs: &[Vec<TrackOutput>]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for frame in outputs {
        for o in frame {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                o.frame,
                o.id,
                o.bbox.x0,
                o.bbox.y0,
                o.bbox.x1 - o.bbox.x0,
                o.bbox.y1 - o.bbox.y0,
                o.score,
                o.category
            ));
        }
    }
    s
}

/// Parses the CSV format written by [`outputs_to_csv`]; a header line is
/// optional.
pub fn outputs_from_csv(text: &str) -> Result<Vec<TrackOutput>> {
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (lineno == 0 && line.starts_with("frame,")) {
            continue;
        }
        let fields: Vec<&str> = line.splitn(8, ',').collect();
        if fields.len() != 8 {
            return Err(Error::Tracker(format!(
                "line {}: expected 8 fields, got {}",
                lineno + 1,
                fields.len()
            )));
        }
        let parse_f = |s: &str, what: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|_| Error::Tracker(format!("line {}: bad {} {:?}", lineno + 1, what, s)))
        };
        let frame = fields[0]
            .parse::<usize>()
            .map_err(|_| Error::Tracker(format!("line {}: bad frame", lineno + 1)))?;
        let id = fields[1]
            .parse::<u64>()
            .map_err(|_| Error::Tracker(format!("line {}: bad id", lineno + 1)))?;
        let x = parse_f(fields[2], "x")?;
        let y = parse_f(fields[3], "y")?;
        let w = parse_f(fields[4], "w")?;
        let h = parse_f(fields[5], "h")?;
        let score = parse_f(fields[6], "score")?;
        rows.push(TrackOutput {
            frame,
            id,
            bbox: BBox::new(x, y, x + w, y + h)?,
            score,
            category: fields[7].to_string(),
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(
        bbox: BBox,
        score: f64,
        category: &str,
        embed: Vec<f64>,
        origin: QueryOrigin,
    ) -> TrackerDetection {
        TrackerDetection {
            bbox,
            score,
            category: category.into(),
            embed,
            origin,
        }
    }

    fn bx(x0: f64, y0: f64, x1: f64, y1: f64) -> BBox {
        BBox::new(x0, y0, x1, y1).unwrap()
    }

    fn unit(dir: usize) -> Vec<f64> {
        let mut v = vec![0.0; 4];
        v[dir] = 1.0;
        v
    }

    #[test]
    fn first_frame_initializes_sequential_ids() {
        let cfg = TrackerConfig::default();
        let frame = vec![
            det(
                bx(0.0, 0.0, 1.0, 1.0),
                0.9,
                "person",
                unit(0),
                QueryOrigin::EmptyQuery,
            ),
            det(
                bx(2.0, 0.0, 3.0, 1.0),
                0.8,
                "person",
                unit(1),
                QueryOrigin::EmptyQuery,
            ),
            det(
                bx(4.0, 0.0, 5.0, 1.0),
                0.7,
                "car",
                unit(2),
                QueryOrigin::EmptyQuery,
            ),
        ];
        let out = run_sequence(&[frame], &cfg).unwrap();
        let ids: Vec<u64> = out[0].iter().map(|o| o.id).collect();
        assert_eq!(ids, vec![0, 1, 2]);
    }

    #[test]
    fn low_score_update_deactivates_track() {
        let cfg = TrackerConfig::default();
        let mut state = TrackState::new();
        let b = bx(0.0, 0.0, 1.0, 1.0);
        step(
            &mut state,
            &[det(b, 0.9, "p", unit(0), QueryOrigin::EmptyQuery)],
            &cfg,
        )
        .unwrap();
        let out = step(
            &mut state,
            &[det(b, 0.39, "p", unit(0), QueryOrigin::TrackQuery(5))],
            &cfg,
        )
        .unwrap();
        assert!(out.is_empty());
        assert!(state.tracks[0].is_inactive());

        // score exactly at the threshold stays active
        let mut state = TrackState::new();
        step(
            &mut state,
            &[det(b, 0.9, "p", unit(0), QueryOrigin::EmptyQuery)],
            &cfg,
        )
        .unwrap();
        let out = step(
            &mut state,
            &[det(b, 0.40, "p", unit(0), QueryOrigin::TrackQuery(5))],
            &cfg,
        )
        .unwrap();
        assert_eq!(out.len(), 1);
    }

    /// Drives two tracks to a given IoU on the second frame; returns the
    /// surviving active ids there.
    fn nms_fixture(target_iou: f64) -> Vec<u64> {
        let cfg = TrackerConfig::default();
        // IoU of [0,0,1,1] with [0,0,1,k] is 1/k
        let overlap = bx(0.0, 0.0, 1.0, 1.0 / target_iou);
        let frames = vec![
            vec![
                det(
                    bx(0.0, 0.0, 1.0, 1.0),
                    0.9,
                    "p",
                    unit(0),
                    QueryOrigin::EmptyQuery,
                ),
                det(
                    bx(5.0, 0.0, 6.0, 1.0),
                    0.8,
                    "p",
                    unit(1),
                    QueryOrigin::EmptyQuery,
                ),
            ],
            vec![
                det(
                    bx(0.0, 0.0, 1.0, 1.0),
                    0.9,
                    "p",
                    unit(0),
                    QueryOrigin::EmptyQuery,
                ),
                det(overlap, 0.8, "p", unit(1), QueryOrigin::EmptyQuery),
            ],
        ];
        let out = run_sequence(&frames, &cfg).unwrap();
        out[1].iter().map(|o| o.id).collect()
    }

    #[test]
    fn nms_suppresses_heavy_overlap_only() {
        // IoU 0.95 > sigma_nms: the lower-scored track goes inactive
        assert_eq!(nms_fixture(0.95), vec![0]);
        // IoU 0.89 < sigma_nms: both stay active
        assert_eq!(nms_fixture(0.89), vec![0, 1]);
    }

    #[test]
    fn init_respects_nms_threshold() {
        let cfg = TrackerConfig::default();
        let near = bx(0.0, 0.0, 1.0, 1.0 / 0.95);
        let frame = vec![
            det(
                bx(0.0, 0.0, 1.0, 1.0),
                0.9,
                "p",
                unit(0),
                QueryOrigin::EmptyQuery,
            ),
            det(near, 0.8, "p", unit(1), QueryOrigin::EmptyQuery),
        ];
        let out = run_sequence(&[frame], &cfg).unwrap();
        assert_eq!(out[0].len(), 1);
        assert_eq!(out[0][0].id, 0);
    }

    #[test]
    fn patience_removal_boundary() {
        let cfg = TrackerConfig::default();
        let b = bx(0.0, 0.0, 1.0, 1.0);
        let seen = vec![det(b, 0.9, "p", unit(0), QueryOrigin::EmptyQuery)];

        // any absence up to n_reid frames keeps the identity
        for gap in 1..=cfg.n_reid {
            let mut frames = vec![seen.clone()];
            frames.extend(std::iter::repeat_n(Vec::new(), gap));
            frames.push(seen.clone());
            let out = run_sequence(&frames, &cfg).unwrap();
            assert_eq!(out.last().unwrap()[0].id, 0, "gap {}", gap);
        }

        // absent n_reid + 1 frames: the track is removed, a new id appears
        let mut frames = vec![seen.clone()];
        frames.extend(std::iter::repeat_n(Vec::new(), cfg.n_reid + 1));
        frames.push(seen);
        let out = run_sequence(&frames, &cfg).unwrap();
        assert_eq!(out.last().unwrap()[0].id, 1);
    }

    #[test]
    fn reid_score_boundary() {
        let cfg = TrackerConfig::default();
        let b = bx(0.0, 0.0, 1.0, 1.0);
        let mut state = TrackState::new();
        step(
            &mut state,
            &[det(b, 0.9, "p", unit(0), QueryOrigin::EmptyQuery)],
            &cfg,
        )
        .unwrap();
        step(&mut state, &[], &cfg).unwrap();

        // 0.39 < sigma_reid: no reactivation (and below sigma_track, no init)
        let mut below = state.clone();
        let out = step(
            &mut below,
            &[det(b, 0.39, "p", unit(0), QueryOrigin::EmptyQuery)],
            &cfg,
        )
        .unwrap();
        assert!(out.is_empty());

        // 0.40 triggers re-identification with the original id
        let out = step(
            &mut state,
            &[det(b, 0.40, "p", unit(0), QueryOrigin::EmptyQuery)],
            &cfg,
        )
        .unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].id, 0);
    }

    #[test]
    fn reid_prefers_higher_similarity() {
        let cfg = TrackerConfig::default();
        let b = bx(0.0, 0.0, 1.0, 1.0);
        let t0 = Track {
            id: 0,
            bbox: b,
            category: "p".into(),
            score: 0.9,
            embed: unit(0),
            status: TrackStatus::Inactive { frames_inactive: 1 },
            history: vec![(0, b)],
            assoc_key: None,
        };
        let mut t1 = t0.clone();
        t1.id = 1;
        t1.embed = unit(1);
        let cand = det(b, 0.9, "p", unit(1), QueryOrigin::EmptyQuery);
        let pairs = reidentify(&[t0, t1], &[cand], &cfg);
        assert_eq!(pairs, vec![(1, 0)]);
    }

    #[test]
    fn category_frozen_across_reid() {
        let cfg = TrackerConfig::default();
        let b = bx(0.0, 0.0, 1.0, 1.0);
        let mut state = TrackState::new();
        step(
            &mut state,
            &[det(b, 0.9, "cat", unit(0), QueryOrigin::EmptyQuery)],
            &cfg,
        )
        .unwrap();
        step(&mut state, &[], &cfg).unwrap();
        let out = step(
            &mut state,
            &[det(b, 0.9, "dog", unit(0), QueryOrigin::EmptyQuery)],
            &cfg,
        )
        .unwrap();
        assert_eq!(out[0].category, "cat");
    }

    #[test]
    fn tag_binding_follows_track_across_frames() {
        let cfg = TrackerConfig::default();
        let mut state = TrackState::new();
        let b0 = bx(0.0, 0.0, 1.0, 1.0);
        let b1 = bx(0.2, 0.0, 1.2, 1.0);
        let b2 = bx(0.4, 0.0, 1.4, 1.0);
        step(
            &mut state,
            &[det(b0, 0.9, "p", unit(0), QueryOrigin::EmptyQuery)],
            &cfg,
        )
        .unwrap();
        // first continuation binds by embedding and learns the tag
        step(
            &mut state,
            &[det(b1, 0.9, "p", unit(0), QueryOrigin::TrackQuery(42))],
            &cfg,
        )
        .unwrap();
        assert_eq!(state.tracks[0].assoc_key, Some(42));
        // later continuations bind directly by tag
        let out = step(
            &mut state,
            &[det(b2, 0.9, "p", unit(0), QueryOrigin::TrackQuery(42))],
            &cfg,
        )
        .unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].id, 0);
        assert_eq!(state.tracks.len(), 1);
    }

    #[test]
    fn duplicate_tags_rejected() {
        let cfg = TrackerConfig::default();
        let mut state = TrackState::new();
        let b = bx(0.0, 0.0, 1.0, 1.0);
        let frame = vec![
            det(b, 0.9, "p", unit(0), QueryOrigin::TrackQuery(1)),
            det(b, 0.8, "p", unit(1), QueryOrigin::TrackQuery(1)),
        ];
        assert!(step(&mut state, &frame, &cfg).is_err());
    }

    #[test]
    fn determinism_same_inputs_same_outputs() {
        let cfg = TrackerConfig::default();
        let frames: Vec<Vec<TrackerDetection>> = (0..6)
            .map(|f| {
                (0..3)
                    .map(|k| {
                        let off = f as f64 * 0.1 + k as f64 * 3.0;
                        det(
                            bx(off, 0.0, off + 1.0, 1.0),
                            0.9 - 0.05 * k as f64,
                            "p",
                            unit(k),
                            QueryOrigin::EmptyQuery,
                        )
                    })
                    .collect()
            })
            .collect();
        let a = run_sequence(&frames, &cfg).unwrap();
        let b = run_sequence(&frames, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn patience_counter_strictly_increases() {
        let cfg = TrackerConfig::default();
        let mut state = TrackState::new();
        let b = bx(0.0, 0.0, 1.0, 1.0);
        step(
            &mut state,
            &[det(b, 0.9, "p", unit(0), QueryOrigin::EmptyQuery)],
            &cfg,
        )
        .unwrap();
        let mut last = 0;
        for _ in 0..cfg.n_reid {
            step(&mut state, &[], &cfg).unwrap();
            match state.tracks[0].status {
                TrackStatus::Inactive { frames_inactive } => {
                    assert!(frames_inactive > last);
                    last = frames_inactive;
                }
                other => panic!("expected inactive, got {:?}", other),
            }
        }
        step(&mut state, &[], &cfg).unwrap();
        assert_eq!(state.tracks[0].status, TrackStatus::Removed);
    }

    /// Random detection streams must never leave the state machine with an
    /// active pair past the NMS threshold, an active track below the score
    /// floor, or a reused id.
    #[test]
    fn lifecycle_invariants_under_random_soak() {
        use rand::{Rng, SeedableRng};
        let cfg = TrackerConfig::default();
        for seed in 0..40u64 {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut state = TrackState::new();
            for _ in 0..12 {
                let count = rng.random_range(0..6);
                let mut frame = Vec::new();
                let mut keys = std::collections::BTreeSet::new();
                for _ in 0..count {
                    let x = rng.random_range(0.0..8.0);
                    let y = rng.random_range(0.0..8.0);
                    let w = rng.random_range(0.5..2.0);
                    let h = rng.random_range(0.5..2.0);
                    let origin = if rng.random_bool(0.3) {
                        let key = rng.random_range(0..4u64);
                        if !keys.insert(key) {
                            continue;
                        }
                        QueryOrigin::TrackQuery(key)
                    } else {
                        QueryOrigin::EmptyQuery
                    };
                    let mut embed = vec![0.0; 4];
                    embed[rng.random_range(0..4)] = 1.0;
                    frame.push(TrackerDetection {
                        bbox: bx(x, y, x + w, y + h),
                        score: rng.random_range(0.0..1.0),
                        category: "p".into(),
                        embed,
                        origin,
                    });
                }
                step(&mut state, &frame, &cfg).unwrap();

                let active: Vec<&Track> = state.tracks.iter().filter(|t| t.is_active()).collect();
                for (i, a) in active.iter().enumerate() {
                    assert!(
                        a.score >= cfg.sigma_track,
                        "seed {}: low-score active",
                        seed
                    );
                    for b in active.iter().skip(i + 1) {
                        assert!(
                            iou(&a.bbox, &b.bbox) <= cfg.sigma_nms,
                            "seed {}: active overlap past sigma_nms",
                            seed
                        );
                    }
                }
                let mut ids: Vec<u64> = state.tracks.iter().map(|t| t.id).collect();
                ids.sort_unstable();
                ids.dedup();
                assert_eq!(ids.len(), state.tracks.len(), "seed {}: id reuse", seed);
                assert!(state.tracks.iter().all(|t| t.id < state.next_id));
            }
        }
    }

    #[test]
    fn csv_round_trip() {
        let cfg = TrackerConfig::default();
        let frame = vec![det(
            bx(1.0, 2.0, 3.0, 5.0),
            0.75,
            "giant panda",
            unit(0),
            QueryOrigin::EmptyQuery,
        )];
        let out = run_sequence(&[frame], &cfg).unwrap();
        let csv = outputs_to_csv(&out);
        assert!(csv.starts_with(CSV_HEADER));
        let rows = outputs_from_csv(&csv).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0], out[0][0]);
    }
}
