//! Detector metrics (accuracy, rank-based AUC, mask IoU) and dataset-quality
//! metrics (masked SSIM, fixed-pyramid perceptual distance, flow warping
//! error), plus feature export for external distribution analysis.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::Tape;
use crate::config::hex_prefix;
use crate::data::DatasetIndex;
use crate::error::{Error, Result};
use crate::kernels;
use crate::network::M2trModel;
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Parallel score/label lists for threshold metrics.
#[derive(Debug, Clone)]
pub struct ScoredSet {
    scores: Vec<f64>,
    labels: Vec<u8>,
}

impl ScoredSet {
    pub fn new(scores: Vec<f64>, labels: Vec<u8>) -> Result<Self> {
        if scores.len() != labels.len() || scores.is_empty() {
            return Err(Error::Data(format!(
                "scored set wants equal nonempty lists, got {} scores and {} labels",
                scores.len(),
                labels.len()
            )));
        }
        if labels.iter().any(|&l| l > 1) {
            return Err(Error::Data("labels must be 0 or 1".into()));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::Data("scores must be finite".into()));
        }
        Ok(ScoredSet { scores, labels })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// Fraction of samples whose thresholded score matches the label.
pub fn accuracy(set: &ScoredSet, threshold: f64) -> f64 {
    let correct = set
        .scores
        .iter()
        .zip(&set.labels)
        .filter(|(s, &l)| ((**s >= threshold) as u8) == l)
        .count();
    correct as f64 / set.len() as f64
}

/// Probability that a random positive outscores a random negative, ties
/// counted one half (Mann-Whitney rank statistic).
pub fn auc(set: &ScoredSet) -> Result<f64> {
    let n_pos = set.labels.iter().filter(|&&l| l == 1).count();
    let n_neg = set.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Data(
            "AUC needs at least one positive and one negative".into(),
        ));
    }
    let mut order: Vec<usize> = (0..set.len()).collect();
    order.sort_by(|&a, &b| set.scores[a].partial_cmp(&set.scores[b]).unwrap());
    // average ranks over tie groups
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && set.scores[order[j + 1]] == set.scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if set.labels[idx] == 1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as isize;
    let mut w = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    for dy in -half..=half {
        for dx in -half..=half {
            w.push((-((dy * dy + dx * dx) as f64) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp());
        }
    }
    let sum: f64 = w.iter().sum();
    w.iter().map(|v| v / sum).collect()
}

fn gray<T: Scalar>(img: &Tensor<T>, y: usize, x: usize) -> f64 {
    let c = img.shape()[2];
    let mut acc = 0.0;
    for ch in 0..c {
        acc += img.at3(y, x, ch).as_f64();
    }
    acc / c as f64
}

/// Mean SSIM over 11x11 Gaussian windows centered on mask pixels, on the
/// channel-mean grayscale images. Windows are clipped to the image with
/// renormalized weights. Unit dynamic range (images in [0, 1]).
pub fn mask_ssim<T: Scalar>(forged: &Tensor<T>, original: &Tensor<T>, face_mask: &Tensor<T>) -> Result<f64> {
    if forged.shape() != original.shape() {
        return Err(Error::Shape(format!(
            "image shapes disagree: {:?} vs {:?}",
            forged.shape(),
            original.shape()
        )));
    }
    if forged.rank() != 3 {
        return Err(Error::Shape(format!("images must be rank 3, got {:?}", forged.shape())));
    }
    let (h, w) = (forged.shape()[0], forged.shape()[1]);
    if face_mask.shape() != [h, w] {
        return Err(Error::Shape(format!(
            "mask {:?} does not match image {:?}",
            face_mask.shape(),
            forged.shape()
        )));
    }
    let window = gaussian_window();
    let half = (SSIM_WINDOW / 2) as isize;
    let mut total = 0.0;
    let mut count = 0usize;
    for cy in 0..h {
        for cx in 0..w {
            if face_mask.at2(cy, cx).as_f64() == 0.0 {
                continue;
            }
            let mut wsum = 0.0;
            let mut mu_a = 0.0;
            let mut mu_b = 0.0;
            for dy in -half..=half {
                for dx in -half..=half {
                    let (y, x) = (cy as isize + dy, cx as isize + dx);
                    if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                        continue;
                    }
                    let wv = window[((dy + half) * SSIM_WINDOW as isize + dx + half) as usize];
                    wsum += wv;
                    mu_a += wv * gray(forged, y as usize, x as usize);
                    mu_b += wv * gray(original, y as usize, x as usize);
                }
            }
            mu_a /= wsum;
            mu_b /= wsum;
            let mut var_a = 0.0;
            let mut var_b = 0.0;
            let mut cov = 0.0;
            for dy in -half..=half {
                for dx in -half..=half {
                    let (y, x) = (cy as isize + dy, cx as isize + dx);
                    if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                        continue;
                    }
                    let wv = window[((dy + half) * SSIM_WINDOW as isize + dx + half) as usize];
                    let da = gray(forged, y as usize, x as usize) - mu_a;
                    let db = gray(original, y as usize, x as usize) - mu_b;
                    var_a += wv * da * da;
                    var_b += wv * db * db;
                    cov += wv * da * db;
                }
            }
            var_a /= wsum;
            var_b /= wsum;
            cov /= wsum;
            total += ((2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2));
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Data("mask has no pixels".into()));
    }
    Ok(total / count as f64)
}

/// One convolution + ReLU stage of the fixed feature pyramid.
#[derive(Debug, Clone)]
pub struct PyramidStage {
    pub w: Tensor<f32>,
    pub b: Tensor<f32>,
    pub stride: usize,
    pub pad: usize,
}

/// Frozen, seed-deterministic random convolutional pyramid whose stage
/// outputs serve as the five perceptual taps. A stand-in for pretrained
/// backbone features: only ordering and identity properties are meaningful,
/// not absolute values.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub stages: Vec<PyramidStage>,
    descriptor: String,
}

pub const PYRAMID_SEED: u64 = 2024;

impl FeaturePyramid {
    /// The reference five-stage pyramid: 3 -> 16 -> 32 -> 64 -> 64 -> 64
    /// channels, stride-2 3x3 stages, seed 2024.
    pub fn reference() -> Self {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(PYRAMID_SEED);
        let dims = [3usize, 16, 32, 64, 64, 64];
        let mut stages = Vec::new();
        for i in 0..5 {
            let fan_in = 3 * 3 * dims[i];
            stages.push(PyramidStage {
                w: crate::params::uniform_fanin(&[3, 3, dims[i], dims[i + 1]], fan_in, &mut rng),
                b: Tensor::zeros(&[dims[i + 1]]),
                stride: 2,
                pad: 1,
            });
        }
        FeaturePyramid {
            stages,
            descriptor: format!("random-conv-pyramid-5x3x3-stride2-seed{PYRAMID_SEED}"),
        }
    }

    /// Single 1x1 identity tap; reduces the distance to mean squared pixel
    /// difference on nonnegative images.
    pub fn identity_tap() -> Self {
        let mut w = Tensor::zeros(&[1, 1, 3, 3]);
        for c in 0..3 {
            w.data_mut()[c * 3 + c] = 1.0;
        }
        FeaturePyramid {
            stages: vec![PyramidStage { w, b: Tensor::zeros(&[3]), stride: 1, pad: 0 }],
            descriptor: "identity-tap".into(),
        }
    }

    pub fn descriptor(&self) -> &str {
        &self.descriptor
    }

    /// Mean over taps of the mean squared feature difference.
    pub fn distance(&self, a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
        if a.shape() != b.shape() {
            return Err(Error::Shape(format!(
                "image shapes disagree: {:?} vs {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let mut fa = a.clone();
        let mut fb = b.clone();
        let mut acc = 0.0;
        for stage in &self.stages {
            fa = kernels::relu(&kernels::conv2d(&fa, &stage.w, &stage.b, stage.stride, stage.pad)?);
            fb = kernels::relu(&kernels::conv2d(&fb, &stage.w, &stage.b, stage.stride, stage.pad)?);
            let mut tap = 0.0;
            for (x, y) in fa.data().iter().zip(fb.data()) {
                let d = (*x - *y) as f64;
                tap += d * d;
            }
            acc += tap / fa.numel() as f64;
        }
        Ok(acc / self.stages.len() as f64)
    }
}

/// Perceptual distance between two images under a fixed pyramid.
pub fn perceptual_distance(a: &Tensor<f32>, b: &Tensor<f32>, pyramid: &FeaturePyramid) -> Result<f64> {
    pyramid.distance(a, b)
}

/// Dense displacement field with an occlusion mask; pixels flagged occluded
/// (or warped out of bounds) are excluded from the warping error.
#[derive(Debug, Clone)]
pub struct FlowField {
    pub flow: Tensor<f32>,
    pub occlusion: Tensor<f32>,
}

impl FlowField {
    pub fn new(flow: Tensor<f32>, occlusion: Tensor<f32>) -> Result<Self> {
        if flow.rank() != 3 || flow.shape()[2] != 2 {
            return Err(Error::Shape(format!("flow must be (H, W, 2), got {:?}", flow.shape())));
        }
        let (h, w) = (flow.shape()[0], flow.shape()[1]);
        if occlusion.shape() != [h, w] {
            return Err(Error::Shape(format!(
                "occlusion {:?} does not match flow {:?}",
                occlusion.shape(),
                flow.shape()
            )));
        }
        if !flow.all_finite() {
            return Err(Error::Data("flow must be finite".into()));
        }
        if occlusion.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Data("occlusion mask must be binary".into()));
        }
        Ok(FlowField { flow, occlusion })
    }

    pub fn all_visible(h: usize, w: usize) -> Self {
        FlowField {
            flow: Tensor::zeros(&[h, w, 2]),
            occlusion: Tensor::zeros(&[h, w]),
        }
    }
}

/// Mean squared difference between `frame_t1` and `frame_t` bilinearly
/// warped by `flow`, over visible pixels. Zero when everything is occluded.
pub fn ewarp(frame_t: &Tensor<f32>, frame_t1: &Tensor<f32>, flow: &FlowField) -> Result<f64> {
    if frame_t.shape() != frame_t1.shape() {
        return Err(Error::Shape(format!(
            "frame shapes disagree: {:?} vs {:?}",
            frame_t.shape(),
            frame_t1.shape()
        )));
    }
    if frame_t.rank() != 3 {
        return Err(Error::Shape(format!("frames must be rank 3, got {:?}", frame_t.shape())));
    }
    let (h, w, c) = (frame_t.shape()[0], frame_t.shape()[1], frame_t.shape()[2]);
    if flow.flow.shape()[0] != h || flow.flow.shape()[1] != w {
        return Err(Error::Shape(format!(
            "flow {:?} does not match frames {:?}",
            flow.flow.shape(),
            frame_t.shape()
        )));
    }
    let mut acc = 0.0;
    let mut count = 0usize;
    for y in 0..h {
        for x in 0..w {
            if flow.occlusion.at2(y, x) != 0.0 {
                continue;
            }
            let sy = y as f64 + flow.flow.at3(y, x, 0) as f64;
            let sx = x as f64 + flow.flow.at3(y, x, 1) as f64;
            if sy < 0.0 || sx < 0.0 || sy > (h - 1) as f64 || sx > (w - 1) as f64 {
                continue;
            }
            let y0 = sy.floor() as usize;
            let x0 = sx.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let x1 = (x0 + 1).min(w - 1);
            let fy = sy - y0 as f64;
            let fx = sx - x0 as f64;
            for ch in 0..c {
                let p = |yy: usize, xx: usize| frame_t.at3(yy, xx, ch) as f64;
                let warped = p(y0, x0) * (1.0 - fy) * (1.0 - fx)
                    + p(y0, x1) * (1.0 - fy) * fx
                    + p(y1, x0) * fy * (1.0 - fx)
                    + p(y1, x1) * fy * fx;
                let d = frame_t1.at3(y, x, ch) as f64 - warped;
                acc += d * d;
                count += 1;
            }
        }
    }
    if count == 0 {
        Ok(0.0)
    } else {
        Ok(acc / count as f64)
    }
}

/// Intersection over union of a thresholded soft mask against a binary
/// truth mask. An empty union (both masks empty) counts as a perfect 1.0.
pub fn mask_iou<T: Scalar>(pred: &Tensor<T>, truth: &Tensor<T>, threshold: f64) -> Result<f64> {
    if pred.shape() != truth.shape() {
        return Err(Error::Shape(format!(
            "mask shapes disagree: {:?} vs {:?}",
            pred.shape(),
            truth.shape()
        )));
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    for (p, t) in pred.data().iter().zip(truth.data()) {
        let p = p.as_f64() >= threshold;
        let t = t.as_f64() != 0.0;
        if p && t {
            inter += 1;
        }
        if p || t {
            union += 1;
        }
    }
    if union == 0 {
        Ok(1.0)
    } else {
        Ok(inter as f64 / union as f64)
    }
}

/// One named result in a metric report.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricRow {
    pub metric: String,
    pub value: f64,
    pub n: u64,
    pub config_hash: String,
}

/// Digest identifying a metric's own configuration in report rows.
pub fn metric_hash(descriptor: &str) -> String {
    hex_prefix(&Sha256::digest(descriptor.as_bytes()), 16)
}

pub fn write_report(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let json = serde_json::to_string_pretty(rows).map_err(|e| Error::Io(e.to_string()))?;
    std::fs::write(path, json)?;
    Ok(())
}

pub fn read_report(path: &Path) -> Result<Vec<MetricRow>> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Data(format!("bad report: {e}")))
}

/// Writes `id,label,f0..f{D-1}` rows of frame-level features for every
/// dataset sample, in dataset order. Returns the row count.
pub fn export_features(
    model: &M2trModel,
    store: &ParamStore<f32>,
    index: &DatasetIndex,
    out: &Path,
) -> Result<usize> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(out)?);
    write!(file, "id,label")?;
    for i in 0..model.feature_dim {
        write!(file, ",f{i}")?;
    }
    writeln!(file)?;
    let mut written = 0usize;
    for chunk_start in (0..index.len()).step_by(32) {
        let mut tape = Tape::new();
        for row in chunk_start..(chunk_start + 32).min(index.len()) {
            let sample = index.load_sample(row)?;
            let out_vars = model.forward(store, &mut tape, &sample.image)?;
            write!(file, "{},{}", sample.id, sample.label)?;
            for &v in tape.value(out_vars.feature).data() {
                write!(file, ",{v}")?;
            }
            writeln!(file)?;
            written += 1;
        }
    }
    file.flush()?;
    Ok(written)
}
