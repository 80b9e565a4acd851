//! Seeded synthetic scenarios: linear-motion ground truth plus noisy
//! detections with identity-coded appearance embeddings.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::assignment::{BBox, Prediction, QueryOrigin};
use crate::error::{Error, Result};
use crate::grounding::{build_prompt, target_distribution, TextPrompt};
use crate::metrics::{TrajectoryPoint, TrajectorySet};

/// Version tag of the scenario JSON schema.
pub const SCENARIO_SCHEMA: &str = "trivd-scenario/1";

/// Dimension of the synthetic appearance embeddings.
pub const EMBED_DIM: usize = 16;

/// Detection corruption knobs; all zero means detections reproduce the
/// ground truth exactly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseConfig {
    /// Stddev of Gaussian jitter added to each box coordinate.
    pub box_jitter: f64,
    /// Stddev of the score perturbation; scores are `1 - |N(0, s)|`.
    pub score_noise: f64,
    /// Probability of dropping a visible object's detection.
    pub drop_prob: f64,
    /// Expected number of false-positive detections per frame.
    pub false_positive_rate: f64,
    /// Stddev of the per-detection embedding perturbation.
    pub embed_noise: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            box_jitter: 0.0,
            score_noise: 0.0,
            drop_prob: 0.0,
            false_positive_rate: 0.0,
            embed_noise: 0.0,
        }
    }
}

/// An interval `[start, end)` of frames during which one object leaves the
/// scene entirely.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OcclusionWindow {
    pub object: usize,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub frames: usize,
    pub categories: Vec<String>,
    pub objects_per_category: usize,
    pub image_size: (f64, f64),
    /// Per-axis speed magnitude range in image units per frame.
    pub motion: (f64, f64),
    #[serde(default)]
    pub noise: NoiseConfig,
    #[serde(default)]
    pub occlusions: Vec<OcclusionWindow>,
    /// Frames aggregated per clip by the feature-fusion stage.
    #[serde(default = "default_clip_len")]
    pub clip_len: usize,
}

fn default_clip_len() -> usize {
    3
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 {
            return Err(Error::Scenario("frames must be >= 1".into()));
        }
        if self.objects_per_category == 0 {
            return Err(Error::Scenario("objects_per_category must be >= 1".into()));
        }
        if self.clip_len == 0 {
            return Err(Error::Scenario("clip_len must be >= 1".into()));
        }
        if !(self.image_size.0 > 0.0 && self.image_size.1 > 0.0) {
            return Err(Error::Scenario("image_size must be positive".into()));
        }
        if !(self.motion.0 >= 0.0 && self.motion.1 >= self.motion.0) {
            return Err(Error::Scenario(
                "motion range must satisfy 0 <= lo <= hi".into(),
            ));
        }
        let n = &self.noise;
        for (name, v) in [
            ("box_jitter", n.box_jitter),
            ("score_noise", n.score_noise),
            ("false_positive_rate", n.false_positive_rate),
            ("embed_noise", n.embed_noise),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Scenario(format!("{} must be finite and >= 0", name)));
            }
        }
        if !(0.0..=1.0).contains(&n.drop_prob) {
            return Err(Error::Scenario("drop_prob must be in [0, 1]".into()));
        }
        let total_objects = self.categories.len() * self.objects_per_category;
        for w in &self.occlusions {
            if w.object >= total_objects {
                return Err(Error::Scenario(format!(
                    "occlusion references object {} of {}",
                    w.object, total_objects
                )));
            }
            if w.start >= w.end {
                return Err(Error::Scenario(
                    "occlusion window must have start < end".into(),
                ));
            }
        }
        build_prompt(&self.categories)?;
        Ok(())
    }

    pub fn prompt(&self) -> Result<TextPrompt> {
        build_prompt(&self.categories)
    }
}

/// A generated scenario: the config it came from, ground-truth trajectories,
/// and per-frame detections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub schema: String,
    pub config: ScenarioConfig,
    pub gt: TrajectorySet,
    pub detections: Vec<Vec<Prediction>>,
}

impl Scenario {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let scenario: Scenario = serde_json::from_str(text)?;
        if scenario.schema != SCENARIO_SCHEMA {
            return Err(Error::Scenario(format!(
                "unsupported scenario schema {:?}, expected {:?}",
                scenario.schema, SCENARIO_SCHEMA
            )));
        }
        scenario.config.validate()?;
        Ok(scenario)
    }
}

fn normalize(v: &mut [f64]) {
    let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in v.iter_mut() {
            *x /= norm;
        }
    }
}

struct ObjectSpec {
    category: String,
    half_w: f64,
    half_h: f64,
    center: (f64, f64),
    velocity: (f64, f64),
    direction: Vec<f64>,
}

impl ObjectSpec {
    fn box_at(&self, frame: usize, image: (f64, f64)) -> BBox {
        let cx = (self.center.0 + self.velocity.0 * frame as f64)
            .clamp(self.half_w, image.0 - self.half_w);
        let cy = (self.center.1 + self.velocity.1 * frame as f64)
            .clamp(self.half_h, image.1 - self.half_h);
        BBox::new(
            cx - self.half_w,
            cy - self.half_h,
            cx + self.half_w,
            cy + self.half_h,
        )
        .expect("object box inside the image")
    }
}

fn sample_range(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Generates a scenario deterministically from its config: linear-motion
/// trajectories clamped to the image, jittered/dropped detections, uniform
/// false positives, and per-identity unit embedding directions. A detection
/// carries a `track_query` tag when the same object was detected in the
/// previous frame.
pub fn generate_scenario(config: &ScenarioConfig) -> Result<Scenario> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let prompt = config.prompt()?;
    let (img_w, img_h) = config.image_size;

    let mut objects = Vec::new();
    for category in &config.categories {
        for _ in 0..config.objects_per_category {
            let half_w = sample_range(&mut rng, 0.025 * img_w, 0.075 * img_w);
            let half_h = sample_range(&mut rng, 0.025 * img_h, 0.075 * img_h);
            let center = (
                sample_range(&mut rng, half_w, img_w - half_w),
                sample_range(&mut rng, half_h, img_h - half_h),
            );
            let speed = |rng: &mut ChaCha8Rng| {
                let magnitude = sample_range(rng, config.motion.0, config.motion.1);
                if rng.random_bool(0.5) {
                    magnitude
                } else {
                    -magnitude
                }
            };
            let velocity = (speed(&mut rng), speed(&mut rng));
            let mut direction: Vec<f64> = (0..EMBED_DIM)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect();
            normalize(&mut direction);
            objects.push(ObjectSpec {
                category: category.clone(),
                half_w,
                half_h,
                center,
                velocity,
                direction,
            });
        }
    }

    let visible = |object: usize, frame: usize| -> bool {
        !config
            .occlusions
            .iter()
            .any(|w| w.object == object && w.start <= frame && frame < w.end)
    };

    let mut gt = TrajectorySet::default();
    for (id, spec) in objects.iter().enumerate() {
        for frame in 0..config.frames {
            if visible(id, frame) {
                gt.push(
                    id as u64,
                    TrajectoryPoint {
                        frame,
                        bbox: spec.box_at(frame, config.image_size),
                        category: spec.category.clone(),
                    },
                );
            }
        }
    }

    let jitter = Normal::new(0.0, config.noise.box_jitter)
        .map_err(|e| Error::Scenario(format!("box jitter: {}", e)))?;
    let score_noise = Normal::new(0.0, config.noise.score_noise)
        .map_err(|e| Error::Scenario(format!("score noise: {}", e)))?;
    let embed_noise = Normal::new(0.0, config.noise.embed_noise)
        .map_err(|e| Error::Scenario(format!("embed noise: {}", e)))?;

    let mut detections: Vec<Vec<Prediction>> = Vec::with_capacity(config.frames);
    let mut prev_detected = vec![false; objects.len()];
    for frame in 0..config.frames {
        let mut frame_dets = Vec::new();
        let mut now_detected = vec![false; objects.len()];
        for (id, spec) in objects.iter().enumerate() {
            if !visible(id, frame) {
                continue;
            }
            if config.noise.drop_prob > 0.0 && rng.random_bool(config.noise.drop_prob) {
                continue;
            }
            let truth = spec.box_at(frame, config.image_size);
            let bbox = jittered_box(&truth, &jitter, &mut rng);
            let score = (1.0 - score_noise.sample(&mut rng).abs()).clamp(0.0, 1.0);
            let embed = if config.noise.embed_noise > 0.0 {
                let mut e: Vec<f64> = spec
                    .direction
                    .iter()
                    .map(|&d| d + embed_noise.sample(&mut rng))
                    .collect();
                normalize(&mut e);
                e
            } else {
                spec.direction.clone()
            };
            let origin = if prev_detected[id] {
                QueryOrigin::TrackQuery(id as u64)
            } else {
                QueryOrigin::EmptyQuery
            };
            let span = prompt.span_of(&spec.category).expect("category in prompt");
            let span_dist = target_distribution(Some(span), prompt.token_count)?;
            frame_dets.push(Prediction::new(bbox, span_dist, score, origin)?.with_embed(embed));
            now_detected[id] = true;
        }

        let fp_count = if config.noise.false_positive_rate > 0.0 {
            let poisson = Poisson::new(config.noise.false_positive_rate)
                .map_err(|e| Error::Scenario(format!("false positive rate: {}", e)))?;
            poisson.sample(&mut rng) as usize
        } else {
            0
        };
        for _ in 0..fp_count {
            let half_w = sample_range(&mut rng, 0.025 * img_w, 0.075 * img_w);
            let half_h = sample_range(&mut rng, 0.025 * img_h, 0.075 * img_h);
            let cx = sample_range(&mut rng, half_w, img_w - half_w);
            let cy = sample_range(&mut rng, half_h, img_h - half_h);
            let bbox = BBox::new(cx - half_w, cy - half_h, cx + half_w, cy + half_h)?;
            let cat_idx = rng.random_range(0..config.categories.len());
            let span = prompt
                .span_of(&config.categories[cat_idx])
                .expect("category in prompt");
            let span_dist = target_distribution(Some(span), prompt.token_count)?;
            let score = sample_range(&mut rng, 0.4, 1.0);
            let mut embed: Vec<f64> = (0..EMBED_DIM)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect();
            normalize(&mut embed);
            frame_dets.push(
                Prediction::new(bbox, span_dist, score, QueryOrigin::EmptyQuery)?.with_embed(embed),
            );
        }

        detections.push(frame_dets);
        prev_detected = now_detected;
    }

    Ok(Scenario {
        schema: SCENARIO_SCHEMA.to_string(),
        config: config.clone(),
        gt,
        detections,
    })
}

fn jittered_box(truth: &BBox, jitter: &Normal<f64>, rng: &mut ChaCha8Rng) -> BBox {
    let mut x0 = truth.x0 + jitter.sample(rng);
    let mut y0 = truth.y0 + jitter.sample(rng);
    let mut x1 = truth.x1 + jitter.sample(rng);
    let mut y1 = truth.y1 + jitter.sample(rng);
    if x0 > x1 {
        std::mem::swap(&mut x0, &mut x1);
    }
    if y0 > y1 {
        std::mem::swap(&mut y0, &mut y1);
    }
    BBox::new(x0, y0, x1, y1).expect("ordered coordinates")
}
