//! Unified image/video inputs and the temporal-aware sequential attention.
//!
//! Videos are folded into the batch axis for frame-level processing and
//! unfolded back for spatio-temporal fusion. The fusion itself multiplies
//! each feature level by a per-location spatial gate followed by a
//! per-(batch, frame, channel) temporal weight computed on the spatially
//! attended features.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{hard_sigmoid, linear_map, spatial_mean, Tensor};

/// A video flattened to a batch of frames: `[B*T, H, W, C]` plus the original
/// `(batch, temporal)` split needed to invert the fold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameBatch {
    pub data: Tensor,
    pub batch: usize,
    pub temporal: usize,
}

/// Multi-scale feature pyramid; each level is `[B, T, H_l, W_l, C_l]` with
/// strictly nonincreasing spatial extent across levels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    pub levels: Vec<Tensor>,
}

impl FeatureMap {
    pub fn new(levels: Vec<Tensor>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::ShapeMismatch(
                "feature map needs at least one level".into(),
            ));
        }
        let mut prev: Option<(usize, usize)> = None;
        for (l, level) in levels.iter().enumerate() {
            let shape = level.shape();
            if shape.len() != 5 {
                return Err(Error::ShapeMismatch(format!(
                    "level {} must be [B,T,H,W,C], got {:?}",
                    l, shape
                )));
            }
            let hw = (shape[2], shape[3]);
            if let Some((ph, pw)) = prev {
                if hw.0 > ph || hw.1 > pw {
                    return Err(Error::ShapeMismatch(format!(
                        "level {} spatial size {:?} grows over previous {:?}",
                        l,
                        hw,
                        (ph, pw)
                    )));
                }
            }
            prev = Some(hw);
        }
        Ok(Self { levels })
    }

    pub fn scale_count(&self) -> usize {
        self.levels.len()
    }
}

/// Parameters of the affine channel map used by the temporal attention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LinearParams {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        if weight.ndim() != 2 || bias.ndim() != 1 || weight.shape()[1] != bias.shape()[0] {
            return Err(Error::ShapeMismatch(
                "linear params: weight [C_in, C_out] and bias [C_out] required".into(),
            ));
        }
        Ok(Self { weight, bias })
    }

    /// All-zero parameters mapping `c_in` channels to `c_out`.
    pub fn zeros(c_in: usize, c_out: usize) -> Self {
        Self {
            weight: Tensor::zeros(vec![c_in, c_out]),
            bias: Tensor::zeros(vec![c_out]),
        }
    }
}

/// The spatial attention stage, pluggable so the temporal mechanism can be
/// tested in isolation: either a pass-through or a per-location scalar gate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpatialAttention {
    /// All weights 1, i.e. spatial attention disabled.
    Identity,
    /// Per-location `hard_sigmoid` of a learned linear map of the channel
    /// vector; `params` must map C channels to 1.
    Gate(LinearParams),
}

/// Per-level attention parameters for [`sequential_attention`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelAttention {
    pub spatial: SpatialAttention,
    /// Channel map inside the temporal weight; must be square (C -> C).
    pub temporal: LinearParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionParams {
    pub levels: Vec<LevelAttention>,
}

impl AttentionParams {
    /// Identity spatial stage and zero temporal map for every level of `map`:
    /// the fixture configuration where every temporal weight is 0.5/T.
    pub fn neutral(map: &FeatureMap) -> Self {
        let levels = map
            .levels
            .iter()
            .map(|level| {
                let c = level.shape()[4];
                LevelAttention {
                    spatial: SpatialAttention::Identity,
                    temporal: LinearParams::zeros(c, c),
                }
            })
            .collect();
        Self { levels }
    }
}

/// Attention factors for one feature map: per level a temporal weight
/// `[B, T, C]` (entries in `[0, 1/T]`) and a spatial weight `[B, T, H, W]`
/// (entries in `[0, 1]`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionWeights {
    pub temporal: Vec<Tensor>,
    pub spatial: Vec<Tensor>,
}

/// Reshapes `[B, T, H, W, C]` video into `[B*T, H, W, C]` frames. Row-major
/// layout makes this a pure reshape: frame `(b, t)` lands at row `b*T + t`.
pub fn fold_temporal(video: &Tensor) -> Result<FrameBatch> {
    let shape = video.shape();
    if shape.len() != 5 {
        return Err(Error::ShapeMismatch(format!(
            "fold_temporal expects [B,T,H,W,C], got {:?}",
            shape
        )));
    }
    let (b, t) = (shape[0], shape[1]);
    let folded = video.reshape(vec![b * t, shape[2], shape[3], shape[4]])?;
    Ok(FrameBatch {
        data: folded,
        batch: b,
        temporal: t,
    })
}

/// Exact inverse of [`fold_temporal`].
pub fn unfold_temporal(frames: &FrameBatch) -> Result<Tensor> {
    let shape = frames.data.shape();
    if shape.len() != 4 {
        return Err(Error::ShapeMismatch(format!(
            "unfold_temporal expects [B',H,W,C], got {:?}",
            shape
        )));
    }
    if frames.temporal == 0 || !shape[0].is_multiple_of(frames.temporal) {
        return Err(Error::ShapeMismatch(format!(
            "batch size {} not divisible by temporal length {}",
            shape[0], frames.temporal
        )));
    }
    let b = shape[0] / frames.temporal;
    if b != frames.batch {
        return Err(Error::ShapeMismatch(format!(
            "recorded batch {} disagrees with {}/{}",
            frames.batch, shape[0], frames.temporal
        )));
    }
    frames
        .data
        .reshape(vec![b, frames.temporal, shape[1], shape[2], shape[3]])
}

/// Temporal attention weights for one level:
/// `(1/T) * hard_sigmoid(f(spatial_mean(F)))`, shape `[B, T, C]`.
pub fn temporal_attention_weights(features: &Tensor, f: &LinearParams) -> Result<Tensor> {
    let shape = features.shape();
    if shape.len() != 5 {
        return Err(Error::ShapeMismatch(format!(
            "temporal attention expects [B,T,H,W,C], got {:?}",
            shape
        )));
    }
    let c = shape[4];
    if f.weight.shape() != [c, c] {
        return Err(Error::ShapeMismatch(format!(
            "temporal attention map must be [{}, {}], got {:?}",
            c,
            c,
            f.weight.shape()
        )));
    }
    let t = shape[1] as f64;
    let pooled = spatial_mean(features)?;
    let mapped = linear_map(&pooled, &f.weight, &f.bias)?;
    mapped.map(|v| hard_sigmoid(v) / t)
}

/// Spatial attention weights for one level, shape `[B, T, H, W]` in `[0, 1]`.
pub fn spatial_attention_weights(
    features: &Tensor,
    attention: &SpatialAttention,
) -> Result<Tensor> {
    let shape = features.shape();
    if shape.len() != 5 {
        return Err(Error::ShapeMismatch(format!(
            "spatial attention expects [B,T,H,W,C], got {:?}",
            shape
        )));
    }
    let (b, t, h, w, c) = (shape[0], shape[1], shape[2], shape[3], shape[4]);
    match attention {
        SpatialAttention::Identity => Tensor::filled(vec![b, t, h, w], 1.0),
        SpatialAttention::Gate(params) => {
            if params.weight.shape() != [c, 1] || params.bias.shape() != [1] {
                return Err(Error::ShapeMismatch(format!(
                    "spatial gate must map {} channels to 1",
                    c
                )));
            }
            let mut out = vec![0.0; b * t * h * w];
            for (loc, slot) in out.iter_mut().enumerate() {
                let base = loc * c;
                let mut acc = params.bias.data()[0];
                for ci in 0..c {
                    acc += features.data()[base + ci] * params.weight.data()[ci];
                }
                *slot = hard_sigmoid(acc);
            }
            Tensor::new(vec![b, t, h, w], out)
        }
    }
}

/// Both attention factors per level; temporal weights are computed on the
/// spatially attended features.
pub fn attention_weights(map: &FeatureMap, params: &AttentionParams) -> Result<AttentionWeights> {
    if params.levels.len() != map.levels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} parameter sets for {} levels",
            params.levels.len(),
            map.levels.len()
        )));
    }
    let mut temporal = Vec::with_capacity(map.levels.len());
    let mut spatial = Vec::with_capacity(map.levels.len());
    for (level, level_params) in map.levels.iter().zip(&params.levels) {
        let sw = spatial_attention_weights(level, &level_params.spatial)?;
        let gated = apply_spatial(level, &sw)?;
        let tw = temporal_attention_weights(&gated, &level_params.temporal)?;
        spatial.push(sw);
        temporal.push(tw);
    }
    Ok(AttentionWeights { temporal, spatial })
}

/// Sequential spatial-then-temporal attention:
/// `out[b,t,h,w,c] = temporal[b,t,c] * spatial[b,t,h,w] * F[b,t,h,w,c]`.
pub fn sequential_attention(map: &FeatureMap, params: &AttentionParams) -> Result<FeatureMap> {
    let weights = attention_weights(map, params)?;
    let mut levels = Vec::with_capacity(map.levels.len());
    for (l, level) in map.levels.iter().enumerate() {
        let shape = level.shape();
        let (b, t, h, w, c) = (shape[0], shape[1], shape[2], shape[3], shape[4]);
        let sw = &weights.spatial[l];
        let tw = &weights.temporal[l];
        let mut out = vec![0.0; level.len()];
        for bi in 0..b {
            for ti in 0..t {
                let tw_base = (bi * t + ti) * c;
                for hi in 0..h {
                    for wi in 0..w {
                        let s = sw.data()[((bi * t + ti) * h + hi) * w + wi];
                        let base = level.offset(&[bi, ti, hi, wi, 0]);
                        for ci in 0..c {
                            out[base + ci] = tw.data()[tw_base + ci] * s * level.data()[base + ci];
                        }
                    }
                }
            }
        }
        levels.push(Tensor::new(shape.to_vec(), out)?);
    }
    FeatureMap::new(levels)
}

fn apply_spatial(level: &Tensor, weights: &Tensor) -> Result<Tensor> {
    let shape = level.shape();
    let c = shape[4];
    let mut out = vec![0.0; level.len()];
    for (loc, &w) in weights.data().iter().enumerate() {
        let base = loc * c;
        for ci in 0..c {
            out[base + ci] = level.data()[base + ci] * w;
        }
    }
    Tensor::new(shape.to_vec(), out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn video(b: usize, t: usize, h: usize, w: usize, c: usize, seed: u64) -> Tensor {
        // cheap deterministic fill
        let len = b * t * h * w * c;
        let data: Vec<f64> = (0..len)
            .map(|i| {
                let x = (i as u64)
                    .wrapping_mul(6364136223846793005)
                    .wrapping_add(seed);
                ((x >> 33) as f64 / (1u64 << 31) as f64) - 1.0
            })
            .collect();
        Tensor::new(vec![b, t, h, w, c], data).unwrap()
    }

    #[test]
    fn fold_is_identity_for_single_image() {
        let v = video(1, 1, 2, 2, 3, 1);
        let folded = fold_temporal(&v).unwrap();
        assert_eq!(folded.data.shape(), &[1, 2, 2, 3]);
        assert_eq!(folded.data.data(), v.data());
    }

    #[test]
    fn fold_places_frames_by_row() {
        let v = video(2, 3, 1, 1, 1, 2);
        let folded = fold_temporal(&v).unwrap();
        assert_eq!(folded.data.shape()[0], 6);
        // frame (b=1, t=2) sits at row 1*3+2 = 5
        assert_eq!(folded.data.at(&[5, 0, 0, 0]), v.at(&[1, 2, 0, 0, 0]));
    }

    #[test]
    fn unfold_inverts_fold() {
        let v = video(2, 3, 2, 2, 2, 3);
        let back = unfold_temporal(&fold_temporal(&v).unwrap()).unwrap();
        assert_eq!(back, v);
    }

    #[test]
    fn unfold_rejects_indivisible() {
        let frames = FrameBatch {
            data: Tensor::zeros(vec![6, 1, 1, 1]),
            batch: 1,
            temporal: 4,
        };
        assert!(unfold_temporal(&frames).is_err());
    }

    #[test]
    fn unfold_restores_singleton_axis() {
        let frames = FrameBatch {
            data: Tensor::zeros(vec![3, 2, 2, 1]),
            batch: 3,
            temporal: 1,
        };
        let t = unfold_temporal(&frames).unwrap();
        assert_eq!(t.shape(), &[3, 1, 2, 2, 1]);
    }

    #[test]
    fn temporal_weights_zero_map() {
        // f == 0 makes every weight hard_sigmoid(0)/T = 0.5/T.
        for (t, expect) in [(2usize, 0.25), (1usize, 0.5)] {
            let f = video(1, t, 2, 2, 3, 4);
            let w = temporal_attention_weights(&f, &LinearParams::zeros(3, 3)).unwrap();
            assert_eq!(w.shape(), &[1, t, 3]);
            assert!(w.data().iter().all(|&v| (v - expect).abs() < 1e-12));
        }
    }

    #[test]
    fn temporal_weights_saturate_at_inverse_t() {
        let f = video(1, 4, 2, 2, 2, 5);
        let params = LinearParams {
            weight: Tensor::zeros(vec![2, 2]),
            bias: Tensor::filled(vec![2], 1e6).unwrap(),
        };
        let w = temporal_attention_weights(&f, &params).unwrap();
        assert!(w.data().iter().all(|&v| (v - 0.25).abs() < 1e-12));
    }

    #[test]
    fn spatial_identity_and_zero_gate() {
        let f = video(1, 1, 2, 3, 2, 6);
        let ones = spatial_attention_weights(&f, &SpatialAttention::Identity).unwrap();
        assert!(ones.data().iter().all(|&v| v == 1.0));
        let gate = SpatialAttention::Gate(LinearParams::zeros(2, 1));
        let half = spatial_attention_weights(&f, &gate).unwrap();
        assert!(half.data().iter().all(|&v| (v - 0.5).abs() < 1e-12));
    }

    #[test]
    fn sequential_attention_neutral_fixture() {
        // identity spatial + zero temporal map, T=1, all-ones input -> all 0.5
        let f = FeatureMap::new(vec![Tensor::filled(vec![1, 1, 2, 2, 2], 1.0).unwrap()]).unwrap();
        let out = sequential_attention(&f, &AttentionParams::neutral(&f)).unwrap();
        assert!(out.levels[0]
            .data()
            .iter()
            .all(|&v| (v - 0.5).abs() < 1e-12));
    }

    #[test]
    fn sequential_attention_annihilates_zero_input() {
        let f = FeatureMap::new(vec![Tensor::zeros(vec![1, 2, 2, 2, 2])]).unwrap();
        let out = sequential_attention(&f, &AttentionParams::neutral(&f)).unwrap();
        assert!(out.levels[0].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn feature_map_rejects_growing_levels() {
        let l0 = Tensor::zeros(vec![1, 1, 2, 2, 1]);
        let l1 = Tensor::zeros(vec![1, 1, 4, 4, 1]);
        assert!(FeatureMap::new(vec![l0, l1]).is_err());
    }

    /// Splits a batch of T=1 clips into per-image runs and compares bitwise.
    #[test]
    fn image_path_matches_length_one_video_path() {
        let f = video(3, 1, 2, 2, 2, 7);
        let map = FeatureMap::new(vec![f.clone()]).unwrap();
        let params = AttentionParams {
            levels: vec![LevelAttention {
                spatial: SpatialAttention::Gate(LinearParams {
                    weight: Tensor::new(vec![2, 1], vec![0.3, -0.2]).unwrap(),
                    bias: Tensor::new(vec![1], vec![0.1]).unwrap(),
                }),
                temporal: LinearParams {
                    weight: Tensor::new(vec![2, 2], vec![0.5, -0.1, 0.2, 0.4]).unwrap(),
                    bias: Tensor::new(vec![2], vec![0.05, -0.05]).unwrap(),
                },
            }],
        };
        let whole = sequential_attention(&map, &params).unwrap();
        for b in 0..3 {
            let frame: Vec<f64> = (0..8).map(|i| f.data()[b * 8 + i]).collect();
            let single =
                FeatureMap::new(vec![Tensor::new(vec![1, 1, 2, 2, 2], frame).unwrap()]).unwrap();
            let out = sequential_attention(&single, &params).unwrap();
            for i in 0..8 {
                assert_eq!(out.levels[0].data()[i], whole.levels[0].data()[b * 8 + i]);
            }
        }
    }

    proptest! {
        #[test]
        fn fold_unfold_round_trip(
            b in 1usize..4, t in 1usize..4, h in 1usize..4, w in 1usize..4, c in 1usize..4,
            seed in 0u64..1000,
        ) {
            let v = video(b, t, h, w, c, seed);
            let back = unfold_temporal(&fold_temporal(&v).unwrap()).unwrap();
            prop_assert_eq!(back, v);
        }

        #[test]
        fn attention_never_amplifies(seed in 0u64..500) {
            let f = video(1, 3, 2, 2, 2, seed);
            let map = FeatureMap::new(vec![f.clone()]).unwrap();
            let params = AttentionParams {
                levels: vec![LevelAttention {
                    spatial: SpatialAttention::Gate(LinearParams {
                        weight: Tensor::new(vec![2, 1], vec![1.0, -1.0]).unwrap(),
                        bias: Tensor::new(vec![1], vec![0.2]).unwrap(),
                    }),
                    temporal: LinearParams {
                        weight: Tensor::new(vec![2, 2], vec![0.7, 0.1, -0.3, 0.9]).unwrap(),
                        bias: Tensor::new(vec![2], vec![0.1, 0.3]).unwrap(),
                    },
                }],
            };
            let out = sequential_attention(&map, &params).unwrap();
            for (o, i) in out.levels[0].data().iter().zip(f.data()) {
                prop_assert!(o.abs() <= i.abs() + 1e-15);
            }
        }
    }
}
