//! Finite-difference verification of every analytic loss gradient in the
//! crate, on randomized small fixtures.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assignment::{
    box_loss, box_loss_grad_pred, match_tracking, total_loss, BBox, GroundTruth, LossWeights,
    Prediction, QueryOrigin,
};
use crate::error::{Error, Result};
use crate::grounding::{
    build_prompt, contrastive_alignment_grad, soft_token_loss_from_logits,
    soft_token_loss_logits_grad, target_distribution, AlignmentBatch, TokenSpanDistribution,
};
use crate::tensor::{check_gradient, Tensor};

/// Tolerance on the max relative error of any loss gradient.
pub const GRAD_TOL: f64 = 1e-3;
/// Step used by the central-difference oracle.
pub const GRAD_EPS: f64 = 1e-5;

/// Keep random fixtures this far away from the kinks of the box losses so
/// central differences never straddle a non-differentiable point.
const KINK_MARGIN: f64 = 1e-3;

/// Worst disagreement between one loss's analytic gradient and the
/// finite-difference oracle over all fixtures.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossGradCheck {
    pub name: String,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    pub fixtures: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradCheckSummary {
    pub checks: Vec<LossGradCheck>,
    pub tolerance: f64,
}

impl GradCheckSummary {
    pub fn passes(&self) -> bool {
        self.checks.iter().all(|c| c.max_rel_err < self.tolerance)
    }
}

struct Accumulator {
    name: &'static str,
    max_abs: f64,
    max_rel: f64,
    fixtures: usize,
}

impl Accumulator {
    fn new(name: &'static str) -> Self {
        Self {
            name,
            max_abs: 0.0,
            max_rel: 0.0,
            fixtures: 0,
        }
    }

    fn feed(&mut self, f: impl Fn(&Tensor) -> f64, x: &Tensor, analytic: &Tensor) -> Result<()> {
        let report = check_gradient(f, x, analytic, GRAD_EPS)?;
        self.max_abs = self.max_abs.max(report.max_abs_err);
        self.max_rel = self.max_rel.max(report.max_rel_err);
        self.fixtures += 1;
        Ok(())
    }

    fn finish(self) -> LossGradCheck {
        LossGradCheck {
            name: self.name.to_string(),
            max_abs_err: self.max_abs,
            max_rel_err: self.max_rel,
            fixtures: self.fixtures,
        }
    }
}

fn random_targets(rng: &mut ChaCha8Rng, n_obj: usize, tokens: usize) -> Vec<TokenSpanDistribution> {
    (0..n_obj)
        .map(|_| {
            if rng.random_bool(0.25) {
                target_distribution(None, tokens).expect("no-object target")
            } else {
                let start = rng.random_range(0..tokens);
                let end = rng.random_range(start + 1..=tokens);
                target_distribution(Some((start, end)), tokens).expect("span target")
            }
        })
        .collect()
}

fn check_soft_token(rng: &mut ChaCha8Rng, fixtures: usize) -> Result<LossGradCheck> {
    let mut acc = Accumulator::new("soft_token_loss");
    for _ in 0..fixtures {
        let n_obj = rng.random_range(2..5);
        let tokens = rng.random_range(3..7);
        let slots = tokens + 1;
        let targets = random_targets(rng, n_obj, tokens);
        let flat: Vec<f64> = (0..n_obj * slots)
            .map(|_| rng.random_range(-2.0..2.0))
            .collect();
        let x = Tensor::new(vec![n_obj, slots], flat)?;

        let rebuild = move |t: &Tensor| -> Vec<Vec<f64>> {
            (0..n_obj)
                .map(|i| t.data()[i * slots..(i + 1) * slots].to_vec())
                .collect()
        };
        let targets_f = targets.clone();
        let f = move |t: &Tensor| {
            soft_token_loss_from_logits(&rebuild(t), &targets_f).expect("fixture is consistent")
        };
        let grad_rows = soft_token_loss_logits_grad(
            &(0..n_obj)
                .map(|i| x.data()[i * slots..(i + 1) * slots].to_vec())
                .collect::<Vec<_>>(),
            &targets,
        )?;
        let analytic = Tensor::new(vec![n_obj, slots], grad_rows.concat())?;
        acc.feed(f, &x, &analytic)?;
    }
    Ok(acc.finish())
}

fn check_contrastive(rng: &mut ChaCha8Rng, fixtures: usize) -> Result<LossGradCheck> {
    let mut acc = Accumulator::new("contrastive_alignment_loss");
    for _ in 0..fixtures {
        let n = rng.random_range(2..4);
        let l = rng.random_range(3..6);
        let d = rng.random_range(2..4);
        let mut positives: Vec<Vec<usize>> = (0..n)
            .map(|_| {
                let set: BTreeSet<usize> = (0..l).filter(|_| rng.random_bool(0.4)).collect();
                set.into_iter().collect()
            })
            .collect();
        if positives.iter().all(|s| s.is_empty()) {
            positives[0] = vec![0];
        }
        let flat: Vec<f64> = (0..(n + l) * d)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let x = Tensor::new(vec![(n + l) * d], flat)?;

        let positives_f = positives.clone();
        let rebuild = move |t: &Tensor| -> AlignmentBatch {
            let obj = Tensor::new(vec![n, d], t.data()[..n * d].to_vec()).expect("finite");
            let tok = Tensor::new(vec![l, d], t.data()[n * d..].to_vec()).expect("finite");
            AlignmentBatch::new(obj, tok, positives_f.clone(), 0.07).expect("valid batch")
        };
        let f = {
            let rebuild = rebuild.clone();
            move |t: &Tensor| {
                crate::grounding::contrastive_alignment_loss(&rebuild(t))
                    .expect("fixture has positives")
            }
        };
        let (d_obj, d_tok) = contrastive_alignment_grad(&rebuild(&x))?;
        let mut grad = d_obj.data().to_vec();
        grad.extend_from_slice(d_tok.data());
        let analytic = Tensor::new(vec![(n + l) * d], grad)?;
        acc.feed(f, &x, &analytic)?;
    }
    Ok(acc.finish())
}

fn random_box(rng: &mut ChaCha8Rng) -> [f64; 4] {
    let x0 = rng.random_range(-2.0..2.0);
    let y0 = rng.random_range(-2.0..2.0);
    let w = rng.random_range(0.5..2.0);
    let h = rng.random_range(0.5..2.0);
    [x0, y0, x0 + w, y0 + h]
}

/// True when every kink of the L1 and GIoU terms is at least
/// [`KINK_MARGIN`] away: coordinate ties and overlap boundaries.
fn away_from_kinks(gt: &[f64; 4], pred: &[f64; 4]) -> bool {
    for k in 0..4 {
        if (gt[k] - pred[k]).abs() < KINK_MARGIN {
            return false;
        }
    }
    let iw = gt[2].min(pred[2]) - gt[0].max(pred[0]);
    let ih = gt[3].min(pred[3]) - gt[1].max(pred[1]);
    iw.abs() >= KINK_MARGIN && ih.abs() >= KINK_MARGIN
}

fn bbox(c: &[f64]) -> BBox {
    BBox::new(c[0], c[1], c[2], c[3]).expect("ordered box")
}

fn check_box_loss(rng: &mut ChaCha8Rng, fixtures: usize) -> Result<LossGradCheck> {
    let mut acc = Accumulator::new("box_loss");
    let w = LossWeights::default();
    for _ in 0..fixtures {
        let (gt, pred) = loop {
            let gt = random_box(rng);
            let pred = random_box(rng);
            if away_from_kinks(&gt, &pred) {
                break (gt, pred);
            }
        };
        let x = Tensor::new(vec![4], pred.to_vec())?;
        let gt_box = bbox(&gt);
        let f = move |t: &Tensor| box_loss(&gt_box, &bbox(t.data()), &w);
        let analytic = Tensor::new(
            vec![4],
            box_loss_grad_pred(&gt_box, &bbox(&pred), &w).to_vec(),
        )?;
        acc.feed(f, &x, &analytic)?;
    }
    Ok(acc.finish())
}

fn check_total_loss(rng: &mut ChaCha8Rng, fixtures: usize) -> Result<LossGradCheck> {
    let mut acc = Accumulator::new("total_loss");
    let w = LossWeights::default();
    let prompt = build_prompt(&["alpha", "beta"])?;
    let slots = prompt.token_count + 1;
    let (n_preds, n_gts) = (3usize, 2usize);
    let (n_obj, n_tok, dim) = (2usize, 3usize, 2usize);
    let positives = vec![vec![0], vec![1, 2]];

    'fixture: for _ in 0..fixtures {
        // rejection-sample a geometry whose matched pairs sit away from kinks
        for _attempt in 0..100 {
            let gt_boxes: Vec<[f64; 4]> = (0..n_gts).map(|_| random_box(rng)).collect();
            let pred_boxes: Vec<[f64; 4]> = (0..n_preds).map(|_| random_box(rng)).collect();
            let logits: Vec<f64> = (0..n_preds * slots)
                .map(|_| rng.random_range(-2.0..2.0))
                .collect();
            let embeds: Vec<f64> = (0..(n_obj + n_tok) * dim)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect();

            let gts: Vec<GroundTruth> = gt_boxes
                .iter()
                .enumerate()
                .map(|(i, b)| GroundTruth {
                    bbox: bbox(b),
                    category: if i % 2 == 0 {
                        "alpha".into()
                    } else {
                        "beta".into()
                    },
                    track_id: if i == 0 { Some(1) } else { None },
                })
                .collect();
            let origins = [
                QueryOrigin::TrackQuery(1),
                QueryOrigin::EmptyQuery,
                QueryOrigin::EmptyQuery,
            ];
            let build_preds = |boxes: &[f64], logit_data: &[f64]| -> Vec<Prediction> {
                (0..n_preds)
                    .map(|j| {
                        let span = TokenSpanDistribution::from_logits(
                            &logit_data[j * slots..(j + 1) * slots],
                        )
                        .expect("finite logits");
                        Prediction::new(
                            BBox::new(
                                boxes[j * 4],
                                boxes[j * 4 + 1],
                                boxes[j * 4 + 2],
                                boxes[j * 4 + 3],
                            )
                            .expect("ordered box"),
                            span,
                            0.9,
                            origins[j],
                        )
                        .expect("valid prediction")
                    })
                    .collect()
            };
            let flat_boxes: Vec<f64> = pred_boxes.iter().flatten().copied().collect();
            let preds = build_preds(&flat_boxes, &logits);
            let prev: BTreeSet<u64> = [1].into();
            let assignment = match_tracking(&preds, &gts, &prev, &prompt, &w, 2.0)?;
            let clean = assignment
                .pairs
                .iter()
                .all(|&(i, j, _)| away_from_kinks(&gt_boxes[i], &pred_boxes[j]));
            if !clean {
                continue;
            }

            // parameter vector: pred boxes | span logits | alignment embeds
            let mut theta = flat_boxes.clone();
            theta.extend_from_slice(&logits);
            theta.extend_from_slice(&embeds);
            let x = Tensor::new(vec![theta.len()], theta)?;

            let gts_f = gts.clone();
            let prompt_f = prompt.clone();
            let assignment_f = assignment.clone();
            let positives_f = positives.clone();
            let f = move |t: &Tensor| {
                let data = t.data();
                let boxes = &data[..n_preds * 4];
                let logit_data = &data[n_preds * 4..n_preds * 4 + n_preds * slots];
                let embed_data = &data[n_preds * 4 + n_preds * slots..];
                let preds = build_preds(boxes, logit_data);
                let batch = AlignmentBatch::new(
                    Tensor::new(vec![n_obj, dim], embed_data[..n_obj * dim].to_vec())
                        .expect("finite"),
                    Tensor::new(vec![n_tok, dim], embed_data[n_obj * dim..].to_vec())
                        .expect("finite"),
                    positives_f.clone(),
                    0.07,
                )
                .expect("valid batch");
                total_loss(&assignment_f, &preds, &gts_f, &prompt_f, Some(&batch), &w)
                    .expect("consistent fixture")
                    .total()
            };

            // analytic gradient, blockwise
            let mut grad = vec![0.0; x.len()];
            for &(i, j, _) in &assignment.pairs {
                let g = box_loss_grad_pred(&bbox(&gt_boxes[i]), &bbox(&pred_boxes[j]), &w);
                grad[j * 4..(j + 1) * 4].copy_from_slice(&g);
            }
            let mut targets = Vec::with_capacity(n_preds);
            for j in 0..n_preds {
                let span = assignment
                    .pairs
                    .iter()
                    .find(|&&(_, pj, _)| pj == j)
                    .map(|&(i, _, _)| prompt.span_of(&gts[i].category).expect("known category"));
                targets.push(target_distribution(span, prompt.token_count)?);
            }
            let logit_rows: Vec<Vec<f64>> = (0..n_preds)
                .map(|j| logits[j * slots..(j + 1) * slots].to_vec())
                .collect();
            let soft_grad = soft_token_loss_logits_grad(&logit_rows, &targets)?;
            grad[n_preds * 4..n_preds * 4 + n_preds * slots].copy_from_slice(&soft_grad.concat());
            let batch = AlignmentBatch::new(
                Tensor::new(vec![n_obj, dim], embeds[..n_obj * dim].to_vec())?,
                Tensor::new(vec![n_tok, dim], embeds[n_obj * dim..].to_vec())?,
                positives.clone(),
                0.07,
            )?;
            let (d_obj, d_tok) = contrastive_alignment_grad(&batch)?;
            let base = n_preds * 4 + n_preds * slots;
            grad[base..base + n_obj * dim].copy_from_slice(d_obj.data());
            grad[base + n_obj * dim..].copy_from_slice(d_tok.data());

            let analytic = Tensor::new(vec![x.len()], grad)?;
            acc.feed(f, &x, &analytic)?;
            continue 'fixture;
        }
        return Err(Error::InvalidArgument(
            "could not sample a kink-free total-loss fixture".into(),
        ));
    }
    Ok(acc.finish())
}

/// Checks the analytic gradient of every differentiable loss against central
/// differences on `fixtures` random fixtures each.
pub fn gradcheck_with(seed: u64, fixtures: usize) -> Result<GradCheckSummary> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let checks = vec![
        check_soft_token(&mut rng, fixtures)?,
        check_contrastive(&mut rng, fixtures)?,
        check_box_loss(&mut rng, fixtures)?,
        check_total_loss(&mut rng, fixtures)?,
    ];
    Ok(GradCheckSummary {
        checks,
        tolerance: GRAD_TOL,
    })
}

/// [`gradcheck_with`] at the standard 50 fixtures per loss.
pub fn gradcheck_all(seed: u64) -> Result<GradCheckSummary> {
    gradcheck_with(seed, 50)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_losses_within_tolerance() {
        let summary = gradcheck_with(123, 10).unwrap();
        assert!(summary.passes(), "summary: {:?}", summary);
        assert_eq!(summary.checks.len(), 4);
        for check in &summary.checks {
            assert_eq!(check.fixtures, 10);
            assert!(check.max_rel_err < GRAD_TOL, "{:?}", check);
        }
    }

    #[test]
    fn constant_loss_has_zero_gradient_both_ways() {
        let x = Tensor::new(vec![3], vec![0.1, 0.2, 0.3]).unwrap();
        let analytic = Tensor::zeros(vec![3]);
        let report = check_gradient(|_| 1.5, &x, &analytic, GRAD_EPS).unwrap();
        assert_eq!(report.max_abs_err, 0.0);
        assert_eq!(report.max_rel_err, 0.0);
    }

    #[test]
    fn broken_analytic_gradient_is_reported() {
        let x = Tensor::new(vec![2], vec![0.4, -0.2]).unwrap();
        let analytic = Tensor::new(vec![2], vec![1.0, 1.0]).unwrap();
        let report = check_gradient(
            |t| t.data().iter().map(|v| v * v).sum(),
            &x,
            &analytic,
            GRAD_EPS,
        )
        .unwrap();
        assert!(report.max_rel_err > GRAD_TOL);
    }
}
