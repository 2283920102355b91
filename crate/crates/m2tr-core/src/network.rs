//! Full detector assembly: convolutional stem, stacked two-stream stages,
//! classification head, mask decoder, and the video-level heads.

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::blocks::{
    AttentionScale, CmfQuerySource, ConvParams, CrossModalityFusion, DenseParams, FrequencyFilter,
    MultiScaleTransformer,
};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// One stage of the stack. Fields are absent when the corresponding path is
/// ablated away, so disabled variants carry no dead parameters.
#[derive(Debug, Clone)]
struct Stage {
    mst: Option<MultiScaleTransformer>,
    ff: Option<FrequencyFilter>,
    cmf: Option<CrossModalityFusion>,
    naive_fusion: Option<ConvParams>,
}

#[derive(Debug, Clone)]
struct Stem {
    c0: ConvParams,
    c1: ConvParams,
    c2: ConvParams,
}

#[derive(Debug, Clone)]
struct ClassifierHead {
    c0: ConvParams,
    c1: ConvParams,
    fc: DenseParams,
}

#[derive(Debug, Clone)]
struct MaskDecoder {
    c0: ConvParams,
    c1: ConvParams,
    to_mask: ConvParams,
}

/// Frame-level detector: stem, `n_stack` two-stream stages, classification
/// head producing the score and feature vector, and the mask decoder.
#[derive(Debug, Clone)]
pub struct M2trModel {
    pub image_size: usize,
    pub grid: usize,
    pub channels: usize,
    pub feature_dim: usize,
    stem: Stem,
    stages: Vec<Stage>,
    head: ClassifierHead,
    decoder: MaskDecoder,
}

/// Results of one frame forward pass.
pub struct ForwardOutput {
    /// Forgery probability, scalar in (0, 1).
    pub score: Var,
    /// Per-pixel manipulation probability, `(H, W)`.
    pub mask: Var,
    /// Global semantic feature, `(D)`.
    pub feature: Var,
}

impl M2trModel {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, cfg: &Config) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.stem_channels;
        let d = cfg.feature_dim;
        let grid = cfg.image_size / 4;
        let stem = Stem {
            c0: ConvParams::new(store, rng, "stem.c0", 3, 3, c / 2, 2, 1)?,
            c1: ConvParams::new(store, rng, "stem.c1", 3, c / 2, c, 2, 1)?,
            c2: ConvParams::new(store, rng, "stem.c2", 3, c, c, 1, 1)?,
        };
        let mut stages = Vec::with_capacity(cfg.n_stack);
        for i in 0..cfg.n_stack {
            let prefix = format!("stage{i}");
            let mst = if cfg.ablate_mt {
                None
            } else {
                Some(MultiScaleTransformer::new(
                    store,
                    rng,
                    &format!("{prefix}.mst"),
                    grid,
                    c,
                    &cfg.patch_sides,
                    cfg.attention_scale,
                )?)
            };
            let (ff, cmf, naive_fusion) = if cfg.ablate_ff {
                (None, None, None)
            } else {
                let ff = Some(FrequencyFilter::new(store, &format!("{prefix}.ff"), grid, c)?);
                if cfg.ablate_cmf {
                    let naive =
                        ConvParams::new(store, rng, &format!("{prefix}.fuse"), 3, 2 * c, c, 1, 1)?;
                    (ff, None, Some(naive))
                } else {
                    let cmf = CrossModalityFusion::new(
                        store,
                        rng,
                        &format!("{prefix}.cmf"),
                        grid,
                        c,
                        cfg.attention_scale,
                        cfg.cmf_query_source,
                    )?;
                    (ff, Some(cmf), None)
                }
            };
            stages.push(Stage { mst, ff, cmf, naive_fusion });
        }
        let head = ClassifierHead {
            c0: ConvParams::new(store, rng, "head.c0", 3, c, d / 2, 2, 1)?,
            c1: ConvParams::new(store, rng, "head.c1", 3, d / 2, d, 2, 1)?,
            fc: DenseParams::new(store, rng, "head.fc", d, 1)?,
        };
        let dec_mid = (c / 2).max(1);
        let decoder = MaskDecoder {
            c0: ConvParams::new(store, rng, "decoder.c0", 3, c, c, 1, 1)?,
            c1: ConvParams::new(store, rng, "decoder.c1", 3, c, dec_mid, 1, 1)?,
            to_mask: ConvParams::new(store, rng, "decoder.to_mask", 1, dec_mid, 1, 1, 0)?,
        };
        Ok(M2trModel {
            image_size: cfg.image_size,
            grid,
            channels: c,
            feature_dim: d,
            stem,
            stages,
            head,
            decoder,
        })
    }

    /// Runs the stem and stage stack, returning the integrated feature map.
    fn backbone<T: Scalar>(&self, store: &ParamStore<T>, tape: &mut Tape<T>, image: Var) -> Result<Var> {
        let s0 = self.stem.c0.forward(store, tape, image)?;
        let s0 = tape.relu(s0);
        let s1 = self.stem.c1.forward(store, tape, s0)?;
        let s1 = tape.relu(s1);
        let mut m = self.stem.c2.forward(store, tape, s1)?;
        for stage in &self.stages {
            let t = match &stage.mst {
                Some(mst) => mst.forward(store, tape, m)?,
                None => m,
            };
            m = match (&stage.ff, &stage.cmf, &stage.naive_fusion) {
                (Some(ff), Some(cmf), None) => {
                    let w = ff.forward(store, tape, m)?;
                    cmf.forward(store, tape, t, w)?
                }
                (Some(ff), None, Some(naive)) => {
                    let w = ff.forward(store, tape, m)?;
                    let both = tape.concat_last(&[t, w])?;
                    naive.forward(store, tape, both)?
                }
                (None, None, None) => t,
                _ => return Err(Error::Config("inconsistent stage wiring".into())),
            };
        }
        Ok(m)
    }

    fn feature_of<T: Scalar>(&self, store: &ParamStore<T>, tape: &mut Tape<T>, m_out: Var) -> Result<Var> {
        let h0 = self.head.c0.forward(store, tape, m_out)?;
        let h0 = tape.relu(h0);
        let h1 = self.head.c1.forward(store, tape, h0)?;
        let h1 = tape.relu(h1);
        tape.global_avg_pool(h1)
    }

    /// Final dense + sigmoid mapping a feature vector to a probability.
    pub fn score_of_feature<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        tape: &mut Tape<T>,
        feature: Var,
    ) -> Result<Var> {
        let row = tape.reshape(feature, &[1, self.feature_dim])?;
        let logit = self.head.fc.forward(store, tape, row)?;
        let logit = tape.reshape(logit, &[])?;
        Ok(tape.sigmoid(logit))
    }

    pub fn forward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        tape: &mut Tape<T>,
        image: &Tensor<T>,
    ) -> Result<ForwardOutput> {
        if image.shape() != [self.image_size, self.image_size, 3] {
            return Err(Error::Shape(format!(
                "expected ({0}, {0}, 3) image, got {1:?}",
                self.image_size,
                image.shape()
            )));
        }
        let x = tape.input(image.clone());
        let m_out = self.backbone(store, tape, x)?;
        let feature = self.feature_of(store, tape, m_out)?;
        let score = self.score_of_feature(store, tape, feature)?;
        let d0 = self.decoder.c0.forward(store, tape, m_out)?;
        let d0 = tape.relu(d0);
        let d0 = tape.upsample_bilinear(d0, 2)?;
        let d1 = self.decoder.c1.forward(store, tape, d0)?;
        let d1 = tape.relu(d1);
        let d1 = tape.upsample_bilinear(d1, 2)?;
        let logits = self.decoder.to_mask.forward(store, tape, d1)?;
        let probs = tape.sigmoid(logits);
        let mask = tape.reshape(probs, &[self.image_size, self.image_size])?;
        Ok(ForwardOutput { score, mask, feature })
    }
}

/// Uniform-interval frame selection: `k` items at indices `floor(i*n/k)`.
pub fn sample_frames<X: Clone>(frames: &[X], k: usize) -> Result<Vec<X>> {
    let n = frames.len();
    if k == 0 || k > n {
        return Err(Error::Data(format!(
            "cannot sample {k} frames from a clip of {n}"
        )));
    }
    Ok((0..k).map(|i| frames[i * n / k].clone()).collect())
}

/// Clip score from averaged frame features, passed through the frame model's
/// final dense + sigmoid.
pub fn video_mean_forward<T: Scalar>(
    model: &M2trModel,
    store: &ParamStore<T>,
    tape: &mut Tape<T>,
    frames: &[Tensor<T>],
) -> Result<Var> {
    if frames.is_empty() {
        return Err(Error::Data("empty clip".into()));
    }
    let mut acc: Option<Var> = None;
    for frame in frames {
        let out = model.forward(store, tape, frame)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, out.feature)?,
            None => out.feature,
        });
    }
    let mean = tape.affine(acc.unwrap(), T::from_f64(1.0 / frames.len() as f64), T::zero());
    model.score_of_feature(store, tape, mean)
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    wq: DenseParams,
    wk: DenseParams,
    wv: DenseParams,
    wo: DenseParams,
    ff0: DenseParams,
    ff1: DenseParams,
}

/// Temporal transformer over per-frame features: learned frame-position
/// embedding, four stacked encoders with eight attention heads each, and a
/// two-layer MLP head.
#[derive(Debug, Clone)]
pub struct TemporalHead {
    pub frames_per_clip: usize,
    pub dim: usize,
    pub attn_heads: usize,
    pos: ParamId,
    layers: Vec<EncoderLayer>,
    mlp0: DenseParams,
    mlp1: DenseParams,
}

pub const TEMPORAL_ENCODERS: usize = 4;
pub const TEMPORAL_ATTN_HEADS: usize = 8;

impl TemporalHead {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        frames_per_clip: usize,
        dim: usize,
    ) -> Result<Self> {
        if dim % TEMPORAL_ATTN_HEADS != 0 {
            return Err(Error::Config(format!(
                "feature dim {dim} is not divisible into {TEMPORAL_ATTN_HEADS} attention heads"
            )));
        }
        let pos = store.register(
            "temporal.pos",
            crate::params::uniform_fanin(&[frames_per_clip, dim], dim, rng),
        )?;
        let mut layers = Vec::new();
        for i in 0..TEMPORAL_ENCODERS {
            let p = format!("temporal.enc{i}");
            layers.push(EncoderLayer {
                wq: DenseParams::new(store, rng, &format!("{p}.wq"), dim, dim)?,
                wk: DenseParams::new(store, rng, &format!("{p}.wk"), dim, dim)?,
                wv: DenseParams::new(store, rng, &format!("{p}.wv"), dim, dim)?,
                wo: DenseParams::new(store, rng, &format!("{p}.wo"), dim, dim)?,
                ff0: DenseParams::new(store, rng, &format!("{p}.ff0"), dim, 2 * dim)?,
                ff1: DenseParams::new(store, rng, &format!("{p}.ff1"), 2 * dim, dim)?,
            });
        }
        Ok(TemporalHead {
            frames_per_clip,
            dim,
            attn_heads: TEMPORAL_ATTN_HEADS,
            pos,
            layers,
            mlp0: DenseParams::new(store, rng, "temporal.mlp0", dim, dim)?,
            mlp1: DenseParams::new(store, rng, "temporal.mlp1", dim, 1)?,
        })
    }

    fn head_slice_perm(&self, k: usize, head: usize) -> Vec<usize> {
        let dh = self.dim / self.attn_heads;
        let mut perm = Vec::with_capacity(k * dh);
        for row in 0..k {
            for col in 0..dh {
                perm.push(row * self.dim + head * dh + col);
            }
        }
        perm
    }

    /// Clip score from a sequence of exactly `frames_per_clip` per-frame
    /// feature vectors.
    pub fn forward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        tape: &mut Tape<T>,
        features: &[Var],
    ) -> Result<Var> {
        if features.len() != self.frames_per_clip {
            return Err(Error::Contract(format!(
                "temporal head wants exactly {} frames, got {}",
                self.frames_per_clip,
                features.len()
            )));
        }
        let k = self.frames_per_clip;
        let flat = tape.concat_flat(features)?;
        let tokens = tape.reshape(flat, &[k, self.dim])?;
        let pos = tape.param(store, self.pos);
        let mut x = tape.add(tokens, pos)?;
        let dh = self.dim / self.attn_heads;
        let norm = T::from_f64(1.0 / (dh as f64).sqrt());
        for layer in &self.layers {
            let q = layer.wq.forward(store, tape, x)?;
            let key = layer.wk.forward(store, tape, x)?;
            let v = layer.wv.forward(store, tape, x)?;
            let mut heads = Vec::with_capacity(self.attn_heads);
            for h in 0..self.attn_heads {
                let perm = self.head_slice_perm(k, h);
                let qh = tape.reindex(q, perm.clone(), &[k, dh])?;
                let kh = tape.reindex(key, perm.clone(), &[k, dh])?;
                let vh = tape.reindex(v, perm, &[k, dh])?;
                let scores = tape.matmul_nt(qh, kh)?;
                let scaled = tape.affine(scores, norm, T::zero());
                let attn = tape.softmax_rows(scaled)?;
                heads.push(tape.matmul(attn, vh)?);
            }
            let merged = tape.concat_last(&heads)?;
            let projected = layer.wo.forward(store, tape, merged)?;
            let x1 = tape.add(x, projected)?;
            let hidden = layer.ff0.forward(store, tape, x1)?;
            let hidden = tape.relu(hidden);
            let ffn = layer.ff1.forward(store, tape, hidden)?;
            x = tape.add(x1, ffn)?;
        }
        // Mean over frame tokens -> two-layer MLP -> probability.
        let pooled = tape.reshape(x, &[k, self.dim])?;
        let mut rows = Vec::with_capacity(k);
        for row in 0..k {
            let perm: Vec<usize> = (0..self.dim).map(|c| row * self.dim + c).collect();
            rows.push(tape.reindex(pooled, perm, &[self.dim])?);
        }
        let sum = {
            let mut acc = rows[0];
            for &r in &rows[1..] {
                acc = tape.add(acc, r)?;
            }
            acc
        };
        let mean = tape.affine(sum, T::from_f64(1.0 / k as f64), T::zero());
        let row = tape.reshape(mean, &[1, self.dim])?;
        let hidden = self.mlp0.forward(store, tape, row)?;
        let hidden = tape.relu(hidden);
        let logit = self.mlp1.forward(store, tape, hidden)?;
        let logit = tape.reshape(logit, &[])?;
        Ok(tape.sigmoid(logit))
    }
}

/// Clip score under the temporal head: per-frame features from the frozen
/// frame model, then the temporal transformer.
pub fn video_temporal_forward<T: Scalar>(
    model: &M2trModel,
    head: &TemporalHead,
    store: &ParamStore<T>,
    tape: &mut Tape<T>,
    frames: &[Tensor<T>],
) -> Result<Var> {
    let mut features = Vec::with_capacity(frames.len());
    for frame in frames {
        let out = model.forward(store, tape, frame)?;
        features.push(out.feature);
    }
    head.forward(store, tape, &features)
}
