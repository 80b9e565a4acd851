//! End-to-end pipeline: prompt-conditioned detection filtering, tracking,
//! and per-category evaluation.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::grounding::build_prompt;
use crate::harness::scenario::Scenario;
use crate::metrics::{
    average_precision, clear_mot, idf1_counts, mota, mt_ml, MetricsReport, TrajectorySet,
};
use crate::tracker::{run_sequence, TrackOutput, TrackerConfig, TrackerDetection};

/// IoU threshold used for evaluation matching.
pub const DEFAULT_IOU_THR: f64 = 0.5;

/// Resolves the active category list: the scenario's full set, or the given
/// subset validated against it (scenario order is kept).
pub fn active_categories(scenario: &Scenario, subset: Option<&[String]>) -> Result<Vec<String>> {
    match subset {
        None => Ok(scenario.config.categories.clone()),
        Some(list) => {
            if list.is_empty() {
                return Err(Error::Scenario("empty prompt".into()));
            }
            for cat in list {
                if !scenario.config.categories.contains(cat) {
                    return Err(Error::Scenario(format!(
                        "category {:?} not in scenario",
                        cat
                    )));
                }
            }
            Ok(scenario
                .config
                .categories
                .iter()
                .filter(|c| list.contains(c))
                .cloned()
                .collect())
        }
    }
}

/// Converts scenario detections into tracker inputs, keeping only detections
/// whose span mass elects one of the active categories over the no-object
/// slot.
pub fn filter_detections(
    scenario: &Scenario,
    active: &[String],
) -> Result<Vec<Vec<TrackerDetection>>> {
    let prompt = build_prompt(&scenario.config.categories)?;
    let spans: Vec<(String, (usize, usize))> = active
        .iter()
        .map(|c| {
            prompt
                .span_of(c)
                .map(|s| (c.clone(), s))
                .ok_or_else(|| Error::Scenario(format!("category {:?} not in prompt", c)))
        })
        .collect::<Result<_>>()?;

    let mut frames = Vec::with_capacity(scenario.detections.len());
    for dets in &scenario.detections {
        let mut kept = Vec::new();
        for det in dets {
            if det.span_dist.token_count() != prompt.token_count {
                return Err(Error::Scenario(
                    "detection token count differs from the scenario prompt".into(),
                ));
            }
            let mut best: Option<(&str, f64)> = None;
            let mut active_mass = 0.0;
            for (name, span) in &spans {
                let mass = det.span_dist.span_mass(*span);
                active_mass += mass;
                if best.is_none_or(|(_, b)| mass > b) {
                    best = Some((name, mass));
                }
            }
            let (name, mass) = best.expect("active category list is nonempty");
            // everything outside the active spans counts as background; for
            // the full prompt this reduces to the no-object mass
            let background = (1.0 - active_mass).max(0.0);
            if background > mass {
                continue;
            }
            kept.push(TrackerDetection {
                bbox: det.bbox,
                score: det.score,
                category: name.to_string(),
                embed: det.embed.clone(),
                origin: det.origin,
            });
        }
        frames.push(kept);
    }
    Ok(frames)
}

/// Per-category evaluation aggregated over the active categories: CLEAR
/// counts, MT/ML and identity counts are summed, MOTA/IDF1 computed from the
/// sums, and AP macro-averaged over categories with ground truth.
pub fn evaluate_outputs(
    gt: &TrajectorySet,
    outputs: &[Vec<TrackOutput>],
    categories: &[String],
    frames: usize,
    iou_thr: f64,
) -> Result<MetricsReport> {
    let pred = TrajectorySet::from_track_outputs(outputs)?;
    let mut fp = 0;
    let mut fn_count = 0;
    let mut ids = 0;
    let mut n_gt = 0;
    let mut mt = 0;
    let mut ml = 0;
    let mut idtp = 0;
    let mut gt_points = 0;
    let mut pred_points = 0;
    let mut aps = Vec::new();

    for category in categories {
        let gt_c = gt.filter_category(category);
        let pred_c = pred.filter_category(category);
        let clear = clear_mot(&gt_c, &pred_c, iou_thr)?;
        let (mt_c, ml_c) = mt_ml(&gt_c, &clear.frame_matches);
        let id_c = idf1_counts(&gt_c, &pred_c, iou_thr)?;
        fp += clear.fp;
        fn_count += clear.fn_count;
        ids += clear.id_switches;
        n_gt += clear.n_gt;
        mt += mt_c;
        ml += ml_c;
        idtp += id_c.idtp;
        gt_points += id_c.gt_points;
        pred_points += id_c.pred_points;

        if clear.n_gt > 0 {
            let mut det_frames: Vec<Vec<(crate::assignment::BBox, f64)>> = vec![Vec::new(); frames];
            for frame_outputs in outputs {
                for o in frame_outputs {
                    if o.category == *category && o.frame < frames {
                        det_frames[o.frame].push((o.bbox, o.score));
                    }
                }
            }
            let mut gt_frames: Vec<Vec<crate::assignment::BBox>> = vec![Vec::new(); frames];
            for points in gt_c.trajectories.values() {
                for p in points {
                    if p.frame < frames {
                        gt_frames[p.frame].push(p.bbox);
                    }
                }
            }
            aps.push(average_precision(&det_frames, &gt_frames, iou_thr)?);
        }
    }

    let mota_value = mota(fp, fn_count, ids, n_gt)?;
    let idf1_value = if gt_points + pred_points == 0 {
        1.0
    } else {
        2.0 * idtp as f64 / (gt_points + pred_points) as f64
    };
    let ap = if aps.is_empty() {
        None
    } else {
        Some(aps.iter().sum::<f64>() / aps.len() as f64)
    };
    Ok(MetricsReport {
        mota: mota_value,
        idf1: idf1_value,
        mt,
        ml,
        fp,
        fn_count,
        ids,
        n_gt,
        ap,
    })
}

/// Ground truth restricted to the given categories.
pub fn project_gt(scenario: &Scenario, categories: &[String]) -> TrajectorySet {
    let mut gt = TrajectorySet {
        trajectories: BTreeMap::new(),
    };
    for category in categories {
        for (id, points) in scenario.gt.filter_category(category).trajectories {
            gt.trajectories.entry(id).or_default().extend(points);
        }
    }
    for points in gt.trajectories.values_mut() {
        points.sort_by_key(|p| p.frame);
    }
    gt
}

/// Runs the whole pipeline on a scenario: filter detections under the
/// (possibly restricted) prompt, track, and evaluate against the ground
/// truth projected onto the same categories.
pub fn run_pipeline(
    scenario: &Scenario,
    tracker_cfg: &TrackerConfig,
    prompt_categories: Option<&[String]>,
) -> Result<(TrajectorySet, MetricsReport)> {
    let active = active_categories(scenario, prompt_categories)?;
    let detections = filter_detections(scenario, &active)?;
    let outputs = run_sequence(&detections, tracker_cfg)?;
    let gt = project_gt(scenario, &active);
    let report = evaluate_outputs(
        &gt,
        &outputs,
        &active,
        scenario.config.frames,
        DEFAULT_IOU_THR,
    )?;
    let tracks = TrajectorySet::from_track_outputs(&outputs)?;
    Ok((tracks, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::scenario::{
        generate_scenario, NoiseConfig, OcclusionWindow, ScenarioConfig,
    };

    fn base_config() -> ScenarioConfig {
        ScenarioConfig {
            seed: 11,
            frames: 20,
            categories: vec!["person".into(), "car".into()],
            objects_per_category: 3,
            image_size: (200.0, 150.0),
            motion: (0.5, 1.5),
            noise: NoiseConfig::default(),
            occlusions: vec![],
            clip_len: 3,
        }
    }

    #[test]
    fn noise_free_pipeline_is_perfect() {
        let scenario = generate_scenario(&base_config()).unwrap();
        let (tracks, report) = run_pipeline(&scenario, &TrackerConfig::default(), None).unwrap();
        assert_eq!(report.mota, 1.0);
        assert_eq!(report.idf1, 1.0);
        assert_eq!(report.ids, 0);
        assert_eq!(report.fp, 0);
        assert_eq!(report.fn_count, 0);
        assert_eq!(report.ap, Some(1.0));
        assert_eq!(tracks.trajectories.len(), 6);
    }

    #[test]
    fn prompt_restriction_yields_single_category_tracks() {
        let scenario = generate_scenario(&base_config()).unwrap();
        let subset = vec!["car".to_string()];
        let (tracks, report) =
            run_pipeline(&scenario, &TrackerConfig::default(), Some(&subset)).unwrap();
        assert!(tracks
            .trajectories
            .values()
            .all(|pts| pts.iter().all(|p| p.category == "car")));
        assert_eq!(report.mota, 1.0);
        assert_eq!(tracks.trajectories.len(), 3);
    }

    #[test]
    fn empty_prompt_is_rejected() {
        let scenario = generate_scenario(&base_config()).unwrap();
        let empty: Vec<String> = vec![];
        assert!(run_pipeline(&scenario, &TrackerConfig::default(), Some(&empty)).is_err());
    }

    #[test]
    fn unknown_prompt_category_is_rejected() {
        let scenario = generate_scenario(&base_config()).unwrap();
        let subset = vec!["zebra".to_string()];
        assert!(run_pipeline(&scenario, &TrackerConfig::default(), Some(&subset)).is_err());
    }

    #[test]
    fn occlusion_within_patience_keeps_identity() {
        let cfg = TrackerConfig::default();
        let mut scenario_cfg = base_config();
        scenario_cfg.occlusions = vec![OcclusionWindow {
            object: 1,
            start: 8,
            end: 8 + cfg.n_reid,
        }];
        let scenario = generate_scenario(&scenario_cfg).unwrap();
        let (_, report) = run_pipeline(&scenario, &cfg, None).unwrap();
        assert_eq!(report.ids, 0);
        assert_eq!(report.idf1, 1.0);

        scenario_cfg.occlusions = vec![OcclusionWindow {
            object: 1,
            start: 8,
            end: 8 + cfg.n_reid + 1,
        }];
        let scenario = generate_scenario(&scenario_cfg).unwrap();
        let (_, report) = run_pipeline(&scenario, &cfg, None).unwrap();
        assert!(report.ids >= 1);
    }

    #[test]
    fn pipeline_is_deterministic() {
        let scenario_cfg = ScenarioConfig {
            noise: NoiseConfig {
                box_jitter: 1.0,
                score_noise: 0.1,
                drop_prob: 0.1,
                false_positive_rate: 0.5,
                embed_noise: 0.05,
            },
            ..base_config()
        };
        let a = generate_scenario(&scenario_cfg).unwrap();
        let b = generate_scenario(&scenario_cfg).unwrap();
        let ra = run_pipeline(&a, &TrackerConfig::default(), None).unwrap();
        let rb = run_pipeline(&b, &TrackerConfig::default(), None).unwrap();
        assert_eq!(ra, rb);
    }

    /// Spot check at three jitter levels: noise never lifts MOTA above the
    /// clean run's value.
    #[test]
    fn jitter_never_improves_mota() {
        let clean = {
            let scenario = generate_scenario(&base_config()).unwrap();
            run_pipeline(&scenario, &TrackerConfig::default(), None)
                .unwrap()
                .1
                .mota
        };
        assert_eq!(clean, 1.0);
        for jitter in [0.5, 2.0, 6.0] {
            let cfg = ScenarioConfig {
                noise: NoiseConfig {
                    box_jitter: jitter,
                    ..NoiseConfig::default()
                },
                ..base_config()
            };
            let scenario = generate_scenario(&cfg).unwrap();
            let (_, report) = run_pipeline(&scenario, &TrackerConfig::default(), None).unwrap();
            assert!(
                report.mota <= clean,
                "jitter {} gave mota {}",
                jitter,
                report.mota
            );
        }
    }

    /// Noisy configurations must evaluate cleanly with metrics in range.
    #[test]
    fn noisy_soak_stays_in_range() {
        for seed in 0..8u64 {
            let cfg = ScenarioConfig {
                seed,
                noise: NoiseConfig {
                    box_jitter: 1.0,
                    score_noise: 0.15,
                    drop_prob: 0.15,
                    false_positive_rate: 0.8,
                    embed_noise: 0.1,
                },
                occlusions: vec![OcclusionWindow {
                    object: (seed % 6) as usize,
                    start: 5,
                    end: 9,
                }],
                ..base_config()
            };
            let scenario = generate_scenario(&cfg).unwrap();
            let (_, report) = run_pipeline(&scenario, &TrackerConfig::default(), None).unwrap();
            assert!(report.mota <= 1.0, "seed {}", seed);
            assert!((0.0..=1.0).contains(&report.idf1), "seed {}", seed);
            assert!(
                report.mt + report.ml <= scenario.gt.trajectories.len(),
                "seed {}",
                seed
            );
            if let Some(ap) = report.ap {
                assert!((0.0..=1.0).contains(&ap), "seed {}", seed);
            }
        }
    }

    #[test]
    fn restriction_commutes_with_projection() {
        let scenario = generate_scenario(&base_config()).unwrap();
        let cfg = TrackerConfig::default();
        let subset = vec!["person".to_string()];
        let (_, restricted) = run_pipeline(&scenario, &cfg, Some(&subset)).unwrap();

        // project the full run instead
        let active = active_categories(&scenario, None).unwrap();
        let detections = filter_detections(&scenario, &active).unwrap();
        let outputs = crate::tracker::run_sequence(&detections, &cfg).unwrap();
        let projected_outputs: Vec<Vec<_>> = outputs
            .iter()
            .map(|frame| {
                frame
                    .iter()
                    .filter(|o| o.category == "person")
                    .cloned()
                    .collect()
            })
            .collect();
        let gt_person = scenario.gt.filter_category("person");
        let projected = evaluate_outputs(
            &gt_person,
            &projected_outputs,
            &subset,
            scenario.config.frames,
            DEFAULT_IOU_THR,
        )
        .unwrap();
        assert_eq!(restricted, projected);
    }
}
