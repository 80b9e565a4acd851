//! Text prompts, token-span distributions, and the region-text alignment
//! losses that replace a fixed-category classifier.
//!
//! A prompt concatenates category names; each category owns a contiguous
//! token span, and a prediction "classifies" by distributing probability
//! mass over token positions plus one trailing no-object slot.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{log_softmax, softmax, Tensor};

/// Maximum number of tokens in a prompt.
pub const MAX_TOKENS: usize = 256;

/// Guard inside logarithms; `log(max(p, EPS))` keeps zero-probability slots
/// from producing -inf while leaving ordinary probabilities untouched.
pub const LOG_EPS: f64 = 1e-12;

/// A tokenized prompt: ordered category names and their `[start, end)` token
/// spans. Tokenization is whitespace splitting, one token per word.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextPrompt {
    pub categories: Vec<String>,
    pub spans: Vec<(usize, usize)>,
    pub token_count: usize,
}

impl TextPrompt {
    /// Span of a category by name.
    pub fn span_of(&self, category: &str) -> Option<(usize, usize)> {
        self.categories
            .iter()
            .position(|c| c == category)
            .map(|i| self.spans[i])
    }
}

/// Concatenates category names into a prompt and records each name's token
/// span in order.
pub fn build_prompt<S: AsRef<str>>(categories: &[S]) -> Result<TextPrompt> {
    if categories.is_empty() {
        return Err(Error::Prompt("no categories given".into()));
    }
    let mut seen = BTreeSet::new();
    let mut spans = Vec::with_capacity(categories.len());
    let mut names = Vec::with_capacity(categories.len());
    let mut cursor = 0usize;
    for cat in categories {
        let name = cat.as_ref().trim().to_string();
        let tokens = name.split_whitespace().count();
        if tokens == 0 {
            return Err(Error::Prompt("empty category name".into()));
        }
        if !seen.insert(name.clone()) {
            return Err(Error::Prompt(format!("duplicate category {:?}", name)));
        }
        spans.push((cursor, cursor + tokens));
        cursor += tokens;
        names.push(name);
    }
    if cursor > MAX_TOKENS {
        return Err(Error::Prompt(format!(
            "prompt needs {} tokens, limit is {}",
            cursor, MAX_TOKENS
        )));
    }
    Ok(TextPrompt {
        categories: names,
        spans,
        token_count: cursor,
    })
}

/// Probability vector over `token_count + 1` slots; the last slot is the
/// no-object label. Serializes as a bare JSON array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSpanDistribution {
    pub probs: Vec<f64>,
}

impl TokenSpanDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidArgument("empty distribution".into()));
        }
        if probs.iter().any(|&p| !p.is_finite() || p < 0.0) {
            return Err(Error::InvalidArgument(
                "distribution entries must be finite and nonnegative".into(),
            ));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidArgument(format!(
                "distribution sums to {}, expected 1",
                sum
            )));
        }
        Ok(Self { probs })
    }

    pub fn from_logits(logits: &[f64]) -> Result<Self> {
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("logits must be finite".into()));
        }
        Self::new(softmax(logits))
    }

    /// Number of real token slots (excludes the no-object slot).
    pub fn token_count(&self) -> usize {
        self.probs.len() - 1
    }

    /// Mass on the trailing no-object slot.
    pub fn no_object_mass(&self) -> f64 {
        *self.probs.last().unwrap()
    }

    /// Summed mass over a `[start, end)` span.
    pub fn span_mass(&self, span: (usize, usize)) -> f64 {
        self.probs[span.0..span.1].iter().sum()
    }
}

/// Uniform target over a span, or a point mass on the no-object slot when
/// `span` is `None`.
pub fn target_distribution(
    span: Option<(usize, usize)>,
    token_count: usize,
) -> Result<TokenSpanDistribution> {
    let mut probs = vec![0.0; token_count + 1];
    match span {
        Some((start, end)) => {
            if start >= end || end > token_count {
                return Err(Error::InvalidArgument(format!(
                    "span [{}, {}) invalid for {} tokens",
                    start, end, token_count
                )));
            }
            let mass = 1.0 / (end - start) as f64;
            for slot in &mut probs[start..end] {
                *slot = mass;
            }
        }
        None => probs[token_count] = 1.0,
    }
    TokenSpanDistribution::new(probs)
}

/// Cross-entropy between predicted and target span distributions, averaged
/// over objects: `mean_i -sum_k target_k * log(max(pred_k, eps))`.
pub fn soft_token_loss(
    preds: &[TokenSpanDistribution],
    targets: &[TokenSpanDistribution],
) -> Result<f64> {
    if preds.len() != targets.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} predictions vs {} targets",
            preds.len(),
            targets.len()
        )));
    }
    if preds.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (pred, target) in preds.iter().zip(targets) {
        if pred.probs.len() != target.probs.len() {
            return Err(Error::ShapeMismatch(format!(
                "prediction over {} slots vs target over {}",
                pred.probs.len(),
                target.probs.len()
            )));
        }
        for (&p, &t) in pred.probs.iter().zip(&target.probs) {
            if t > 0.0 {
                total -= t * p.max(LOG_EPS).ln();
            }
        }
    }
    Ok(total / preds.len() as f64)
}

/// Soft token loss evaluated from raw logits through a stable log-softmax;
/// this is the differentiable route checked by the gradient oracle.
pub fn soft_token_loss_from_logits(
    logits: &[Vec<f64>],
    targets: &[TokenSpanDistribution],
) -> Result<f64> {
    if logits.len() != targets.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} logit rows vs {} targets",
            logits.len(),
            targets.len()
        )));
    }
    if logits.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (row, target) in logits.iter().zip(targets) {
        if row.len() != target.probs.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} logits vs {} target slots",
                row.len(),
                target.probs.len()
            )));
        }
        let lsm = log_softmax(row);
        for (&l, &t) in lsm.iter().zip(&target.probs) {
            if t > 0.0 {
                total -= t * l;
            }
        }
    }
    Ok(total / logits.len() as f64)
}

/// Analytic gradient of [`soft_token_loss_from_logits`] with respect to the
/// logits: `(softmax(z) - target) / n_objects` per row.
pub fn soft_token_loss_logits_grad(
    logits: &[Vec<f64>],
    targets: &[TokenSpanDistribution],
) -> Result<Vec<Vec<f64>>> {
    if logits.len() != targets.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} logit rows vs {} targets",
            logits.len(),
            targets.len()
        )));
    }
    let n = logits.len().max(1) as f64;
    let mut grads = Vec::with_capacity(logits.len());
    for (row, target) in logits.iter().zip(targets) {
        let p = softmax(row);
        grads.push(
            p.iter()
                .zip(&target.probs)
                .map(|(&pi, &ti)| (pi - ti) / n)
                .collect(),
        );
    }
    Ok(grads)
}

/// One side's positive sets for the contrastive loss: `object_positives[i]`
/// is the token set matched with object `i`. The token-side sets are derived
/// so the two directions are consistent by construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentBatch {
    pub object_embeds: Tensor,
    pub token_embeds: Tensor,
    pub object_positives: Vec<Vec<usize>>,
    pub temperature: f64,
}

impl AlignmentBatch {
    pub fn new(
        object_embeds: Tensor,
        token_embeds: Tensor,
        object_positives: Vec<Vec<usize>>,
        temperature: f64,
    ) -> Result<Self> {
        if object_embeds.ndim() != 2 || token_embeds.ndim() != 2 {
            return Err(Error::ShapeMismatch(
                "embeddings must be 2-D [count, dim]".into(),
            ));
        }
        let n = object_embeds.shape()[0];
        let l = token_embeds.shape()[0];
        if n == 0 || l == 0 {
            return Err(Error::InvalidArgument(
                "alignment batch needs at least one object and one token".into(),
            ));
        }
        if object_embeds.shape()[1] != token_embeds.shape()[1] {
            return Err(Error::ShapeMismatch(format!(
                "object dim {} vs token dim {}",
                object_embeds.shape()[1],
                token_embeds.shape()[1]
            )));
        }
        if temperature <= 0.0 {
            return Err(Error::InvalidArgument(
                "temperature must be positive".into(),
            ));
        }
        if object_positives.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "{} positive sets for {} objects",
                object_positives.len(),
                n
            )));
        }
        for set in &object_positives {
            if set.iter().any(|&j| j >= l) {
                return Err(Error::InvalidArgument(
                    "positive token index out of range".into(),
                ));
            }
        }
        Ok(Self {
            object_embeds,
            token_embeds,
            object_positives,
            temperature,
        })
    }

    pub fn object_count(&self) -> usize {
        self.object_embeds.shape()[0]
    }

    pub fn token_count(&self) -> usize {
        self.token_embeds.shape()[0]
    }

    /// Token-side positive sets `O_j+`, derived from the object side.
    pub fn token_positives(&self) -> Vec<Vec<usize>> {
        let mut sets = vec![Vec::new(); self.token_count()];
        for (i, tokens) in self.object_positives.iter().enumerate() {
            for &j in tokens {
                sets[j].push(i);
            }
        }
        sets
    }

    fn dot(&self, i: usize, j: usize) -> f64 {
        self.object_embeds
            .row(i)
            .iter()
            .zip(self.token_embeds.row(j))
            .map(|(a, b)| a * b)
            .sum()
    }
}

/// Symmetric region-text contrastive loss `(L_obj + L_tok) / 2`.
///
/// The object side sums, for every object with positives, the negative
/// log-softmax (over all tokens, at temperature tau) of each positive token,
/// averaged within that object's positive set. The token side is symmetric
/// over objects. Empty positive sets contribute nothing.
pub fn contrastive_alignment_loss(batch: &AlignmentBatch) -> Result<f64> {
    let (l_obj, l_tok) = contrastive_alignment_sides(batch)?;
    Ok(0.5 * (l_obj + l_tok))
}

/// The two directions `(L_obj, L_tok)` before halving, for diagnostics.
pub fn contrastive_alignment_sides(batch: &AlignmentBatch) -> Result<(f64, f64)> {
    let n = batch.object_count();
    let l = batch.token_count();
    let tau = batch.temperature;

    if batch.object_positives.iter().all(|set| set.is_empty()) {
        return Err(Error::InvalidArgument(
            "contrastive loss needs at least one positive pair".into(),
        ));
    }

    let mut l_obj = 0.0;
    for i in 0..n {
        let positives = &batch.object_positives[i];
        if positives.is_empty() {
            continue;
        }
        let logits: Vec<f64> = (0..l).map(|j| batch.dot(i, j) / tau).collect();
        let lsm = log_softmax(&logits);
        let s: f64 = positives.iter().map(|&j| -lsm[j]).sum();
        l_obj += s / positives.len() as f64;
    }

    let mut l_tok = 0.0;
    for (j, positives) in batch.token_positives().iter().enumerate() {
        if positives.is_empty() {
            continue;
        }
        let logits: Vec<f64> = (0..n).map(|i| batch.dot(i, j) / tau).collect();
        let lsm = log_softmax(&logits);
        let s: f64 = positives.iter().map(|&i| -lsm[i]).sum();
        l_tok += s / positives.len() as f64;
    }

    Ok((l_obj, l_tok))
}

/// Analytic gradient of [`contrastive_alignment_loss`] with respect to both
/// embedding matrices, flattened row-major like the inputs.
pub fn contrastive_alignment_grad(batch: &AlignmentBatch) -> Result<(Tensor, Tensor)> {
    let n = batch.object_count();
    let l = batch.token_count();
    let d = batch.object_embeds.shape()[1];
    let tau = batch.temperature;
    let mut d_obj = vec![0.0; n * d];
    let mut d_tok = vec![0.0; l * d];

    // object side: for each object i, coefficient over tokens is
    // softmax_k - 1[k in T_i+]/|T_i+|, scaled by 1/tau.
    for i in 0..n {
        let positives = &batch.object_positives[i];
        if positives.is_empty() {
            continue;
        }
        let logits: Vec<f64> = (0..l).map(|j| batch.dot(i, j) / tau).collect();
        let p = softmax(&logits);
        let inv = 1.0 / positives.len() as f64;
        let mut coeff = p;
        for &j in positives {
            coeff[j] -= inv;
        }
        for (j, &c) in coeff.iter().enumerate() {
            let scale = 0.5 * c / tau;
            for k in 0..d {
                d_obj[i * d + k] += scale * batch.token_embeds.row(j)[k];
                d_tok[j * d + k] += scale * batch.object_embeds.row(i)[k];
            }
        }
    }

    // token side, symmetric.
    let token_positives = batch.token_positives();
    for j in 0..l {
        let positives = &token_positives[j];
        if positives.is_empty() {
            continue;
        }
        let logits: Vec<f64> = (0..n).map(|i| batch.dot(i, j) / tau).collect();
        let p = softmax(&logits);
        let inv = 1.0 / positives.len() as f64;
        let mut coeff = p;
        for &i in positives {
            coeff[i] -= inv;
        }
        for (i, &c) in coeff.iter().enumerate() {
            let scale = 0.5 * c / tau;
            for k in 0..d {
                d_tok[j * d + k] += scale * batch.object_embeds.row(i)[k];
                d_obj[i * d + k] += scale * batch.token_embeds.row(j)[k];
            }
        }
    }

    Ok((
        Tensor::new(vec![n, d], d_obj)?,
        Tensor::new(vec![l, d], d_tok)?,
    ))
}

/// Whether [`classify_by_alignment`] may answer with the no-object label.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassifyMode {
    WithNoObject,
    ExcludeNoObject,
}

/// Span-mass classification: each category scores the summed mass over its
/// span; the winner is the highest-scoring category, or the no-object label
/// when its mass strictly beats every category (unless excluded). Ties
/// between categories break toward the lowest span start.
pub fn classify_by_alignment(
    pred: &TokenSpanDistribution,
    prompt: &TextPrompt,
    mode: ClassifyMode,
) -> Result<(Option<String>, f64)> {
    if pred.token_count() != prompt.token_count {
        return Err(Error::ShapeMismatch(format!(
            "distribution over {} tokens vs prompt with {}",
            pred.token_count(),
            prompt.token_count
        )));
    }
    let mut best: Option<(usize, f64)> = None;
    for (idx, &span) in prompt.spans.iter().enumerate() {
        let mass = pred.span_mass(span);
        let better = match best {
            None => true,
            Some((bidx, bmass)) => {
                mass > bmass || (mass == bmass && prompt.spans[idx].0 < prompt.spans[bidx].0)
            }
        };
        if better {
            best = Some((idx, mass));
        }
    }
    let (idx, mass) = best.expect("prompt has at least one category");
    let no_obj = pred.no_object_mass();
    match mode {
        ClassifyMode::WithNoObject if no_obj > mass => Ok((None, no_obj)),
        _ => Ok((Some(prompt.categories[idx].clone()), mass)),
    }
}
