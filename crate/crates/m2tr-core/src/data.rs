//! Procedural synthetic-forgery dataset: smooth "face-like" real images,
//! four manipulation kinds with exact ground-truth masks, deterministic
//! on-disk persistence, and balanced epoch sampling.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft;
use crate::tensor::Tensor;
use crate::tns;

/// One image with its label and ground-truth manipulation mask.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    /// `(H, W, 3)` pixels in `[0, 1]`.
    pub image: Tensor<f32>,
    /// 0 = pristine, 1 = manipulated.
    pub label: u8,
    /// `(H, W)` indicator of manipulated pixels.
    pub mask: Tensor<f32>,
}

/// Fraction bounds on a fake's mask area.
pub const MIN_MASK_FRACTION: f64 = 0.01;
pub const MAX_MASK_FRACTION: f64 = 0.60;

impl Sample {
    /// Label/mask consistency and value-range invariants.
    pub fn validate(&self) -> Result<()> {
        let (h, w) = (self.image.shape()[0], self.image.shape()[1]);
        if self.image.rank() != 3 || self.image.shape()[2] != 3 {
            return Err(Error::Data(format!("image must be (H, W, 3), got {:?}", self.image.shape())));
        }
        if self.mask.shape() != [h, w] {
            return Err(Error::Data(format!(
                "mask {:?} does not match image {:?}",
                self.mask.shape(),
                self.image.shape()
            )));
        }
        if !self.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)) {
            return Err(Error::Data(format!("{}: pixel out of [0, 1]", self.id)));
        }
        if self.mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Data(format!("{}: mask is not binary", self.id)));
        }
        let area: f64 = self.mask.data().iter().map(|&v| v as f64).sum();
        let frac = area / (h * w) as f64;
        match self.label {
            0 if area != 0.0 => Err(Error::Data(format!("{}: real sample with nonzero mask", self.id))),
            1 if !(MIN_MASK_FRACTION..=MAX_MASK_FRACTION).contains(&frac) => Err(Error::Data(format!(
                "{}: mask covers {frac:.4} of the image, outside [{MIN_MASK_FRACTION}, {MAX_MASK_FRACTION}]",
                self.id
            ))),
            0 | 1 => Ok(()),
            l => Err(Error::Data(format!("{}: bad label {l}", self.id))),
        }
    }
}

/// splitmix64 step, used to derive independent per-item seeds.
pub fn derive_seed(root: u64, index: u64) -> u64 {
    let mut z = root ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x243F_6A88_85A3_08D3);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Smooth procedural pristine image: per-channel gradients, two low-frequency
/// sinusoidal layers, a soft-edged ellipse, and mild noise.
pub fn generate_real(seed: u64, h: usize, w: usize) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut channels = Vec::with_capacity(3);
    for _ in 0..3 {
        let base = rng.gen_range(0.3..0.6);
        let gy = rng.gen_range(-0.15..0.15);
        let gx = rng.gen_range(-0.15..0.15);
        let waves: Vec<(f64, f64, f64, f64)> = (0..2)
            .map(|_| {
                (
                    rng.gen_range(0.03..0.10),
                    rng.gen_range(0.5..2.0),
                    rng.gen_range(0.5..2.0),
                    rng.gen_range(0.0..std::f64::consts::TAU),
                )
            })
            .collect();
        channels.push((base, gy, gx, waves));
    }
    let cy = rng.gen_range(0.35..0.65) * h as f64;
    let cx = rng.gen_range(0.35..0.65) * w as f64;
    let ry = rng.gen_range(0.18..0.30) * h as f64;
    let rx = rng.gen_range(0.15..0.26) * w as f64;
    let face_tint: Vec<f64> = (0..3).map(|_| rng.gen_range(-0.15..0.15)).collect();
    let edge = 0.1 * h.min(w) as f64;

    let mut image = Tensor::zeros(&[h, w, 3]);
    for y in 0..h {
        for x in 0..w {
            let e = (((y as f64 - cy) / ry).powi(2) + ((x as f64 - cx) / rx).powi(2)).sqrt();
            // soft ellipse membership fading to zero across `edge` pixels
            let depth = (1.0 - e) * ry.min(rx);
            let face = (depth / edge).clamp(0.0, 1.0);
            for c in 0..3 {
                let (base, gy, gx, ref waves) = channels[c];
                let mut v = base + gy * y as f64 / h as f64 + gx * x as f64 / w as f64;
                for &(amp, fy, fx, phase) in waves {
                    v += amp
                        * (std::f64::consts::TAU * (fy * y as f64 / h as f64 + fx * x as f64 / w as f64)
                            + phase)
                            .sin();
                }
                v += face * face_tint[c];
                v += rng.gen_range(-0.01..0.01);
                image.data_mut()[(y * w + x) * 3 + c] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    Sample {
        id: format!("real-{seed:016x}"),
        image,
        label: 0,
        mask: Tensor::zeros(&[h, w]),
    }
}

/// Manipulation families. Spectral truncation zeroes high-frequency bins of
/// the region and stands in for compression-style artifacts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForgeryKind {
    Splice,
    ColorShift,
    BlurPatch,
    SpectralTruncation,
}

impl ForgeryKind {
    pub const ALL: [ForgeryKind; 4] = [
        ForgeryKind::Splice,
        ForgeryKind::ColorShift,
        ForgeryKind::BlurPatch,
        ForgeryKind::SpectralTruncation,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ForgeryKind::Splice => "splice",
            ForgeryKind::ColorShift => "color_shift",
            ForgeryKind::BlurPatch => "blur_patch",
            ForgeryKind::SpectralTruncation => "spectral_truncation",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Data(format!("unknown forgery kind {s}")))
    }

    /// Documented intensity range per kind: blend strength, channel offset,
    /// blur sigma, or truncated band fraction.
    pub fn intensity_range(self) -> (f64, f64) {
        match self {
            ForgeryKind::Splice => (0.0, 1.0),
            ForgeryKind::ColorShift => (0.0, 0.5),
            ForgeryKind::BlurPatch => (0.0, 8.0),
            ForgeryKind::SpectralTruncation => (0.0, 1.0),
        }
    }
}

/// Manipulated region: either an axis-aligned ellipse or a rectangle, in
/// pixel coordinates.
#[derive(Debug, Clone, PartialEq)]
pub enum RegionGeometry {
    Ellipse { cy: f64, cx: f64, ry: f64, rx: f64 },
    Rect { y0: usize, x0: usize, height: usize, width: usize },
}

impl RegionGeometry {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        match *self {
            RegionGeometry::Ellipse { cy, cx, ry, rx } => {
                ((y as f64 - cy) / ry).powi(2) + ((x as f64 - cx) / rx).powi(2) <= 1.0
            }
            RegionGeometry::Rect { y0, x0, height, width } => {
                y >= y0 && y < y0 + height && x >= x0 && x < x0 + width
            }
        }
    }

    /// Approximate distance (pixels) from an interior point to the region
    /// boundary; used for feathering.
    fn inner_depth(&self, y: usize, x: usize) -> f64 {
        match *self {
            RegionGeometry::Ellipse { cy, cx, ry, rx } => {
                let e = (((y as f64 - cy) / ry).powi(2) + ((x as f64 - cx) / rx).powi(2)).sqrt();
                (1.0 - e) * ry.min(rx)
            }
            RegionGeometry::Rect { y0, x0, height, width } => {
                let dy = (y - y0).min(y0 + height - 1 - y) as f64;
                let dx = (x - x0).min(x0 + width - 1 - x) as f64;
                dy.min(dx)
            }
        }
    }

    fn check_inside(&self, h: usize, w: usize) -> Result<()> {
        let ok = match *self {
            RegionGeometry::Ellipse { cy, cx, ry, rx } => {
                ry > 0.0
                    && rx > 0.0
                    && cy - ry >= 0.0
                    && cx - rx >= 0.0
                    && cy + ry <= (h - 1) as f64
                    && cx + rx <= (w - 1) as f64
            }
            RegionGeometry::Rect { y0, x0, height, width } => {
                height > 0 && width > 0 && y0 + height <= h && x0 + width <= w
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Data(format!("region {self:?} escapes a {h}x{w} image")))
        }
    }
}

/// Full description of one manipulation: what, where, how strong, and the
/// seed for any content it draws (donor images, channel directions).
#[derive(Debug, Clone, PartialEq)]
pub struct ForgeryRecipe {
    pub kind: ForgeryKind,
    pub region: RegionGeometry,
    pub intensity: f64,
    pub seed: u64,
}

/// Feather width (pixels) of the splice blend ramp.
pub const FEATHER_RADIUS: f64 = 2.0;

fn blend_ramp(depth: f64, intensity: f64) -> f64 {
    intensity * ((depth + 1.0) / (FEATHER_RADIUS + 1.0)).clamp(0.0, 1.0)
}

/// Applies `recipe` to a pristine sample. The output differs from the base
/// only inside the mask; label is 1 and the mask is exactly the region
/// indicator.
pub fn generate_fake(base: &Sample, recipe: &ForgeryRecipe) -> Result<Sample> {
    if base.label != 0 {
        return Err(Error::Data("forgery base must be a real sample".into()));
    }
    let (h, w) = (base.image.shape()[0], base.image.shape()[1]);
    recipe.region.check_inside(h, w)?;
    let (lo, hi) = recipe.kind.intensity_range();
    if recipe.intensity <= lo || recipe.intensity > hi {
        return Err(Error::Data(format!(
            "degenerate {} intensity {} (allowed ({lo}, {hi}])",
            recipe.kind.as_str(),
            recipe.intensity
        )));
    }

    let mut mask = Tensor::zeros(&[h, w]);
    let mut region_px = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if recipe.region.contains(y, x) {
                mask.data_mut()[y * w + x] = 1.0;
                region_px.push((y, x));
            }
        }
    }
    let frac = region_px.len() as f64 / (h * w) as f64;
    if !(MIN_MASK_FRACTION..=MAX_MASK_FRACTION).contains(&frac) {
        return Err(Error::Data(format!(
            "region covers {frac:.4} of the image, outside [{MIN_MASK_FRACTION}, {MAX_MASK_FRACTION}]"
        )));
    }

    let mut image = base.image.clone();
    match recipe.kind {
        ForgeryKind::Splice => {
            let donor = generate_real(derive_seed(recipe.seed, 0xD0), h, w);
            for &(y, x) in &region_px {
                let alpha = blend_ramp(recipe.region.inner_depth(y, x), recipe.intensity) as f32;
                for c in 0..3 {
                    let i = (y * w + x) * 3 + c;
                    image.data_mut()[i] =
                        (1.0 - alpha) * base.image.data()[i] + alpha * donor.image.data()[i];
                }
            }
        }
        ForgeryKind::ColorShift => {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(recipe.seed, 0xC0));
            let mut dir: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let peak = dir.iter().cloned().fold(0.0f64, |a, b| a.max(b.abs()));
            // renormalize so the strongest channel moves by exactly `intensity`
            for d in &mut dir {
                *d = if peak > 0.0 { *d / peak } else { 1.0 };
            }
            for &(y, x) in &region_px {
                for c in 0..3 {
                    let i = (y * w + x) * 3 + c;
                    let v = image.data()[i] as f64 + recipe.intensity * dir[c];
                    image.data_mut()[i] = v.clamp(0.0, 1.0) as f32;
                }
            }
        }
        ForgeryKind::BlurPatch => {
            let sigma = recipe.intensity;
            let radius = (2.0 * sigma).ceil() as isize;
            let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
            for d in -radius..=radius {
                kernel.push((-(d * d) as f64 / (2.0 * sigma * sigma)).exp());
            }
            let ksum: f64 = kernel.iter().sum();
            let sample_at = |y: isize, x: isize, c: usize| -> f64 {
                let yy = y.clamp(0, h as isize - 1) as usize;
                let xx = x.clamp(0, w as isize - 1) as usize;
                base.image.data()[(yy * w + xx) * 3 + c] as f64
            };
            for &(y, x) in &region_px {
                for c in 0..3 {
                    // separable pass folded into one 2D loop; regions are small
                    let mut acc = 0.0;
                    for (dy, ky) in (-radius..=radius).zip(&kernel) {
                        let mut row = 0.0;
                        for (dx, kx) in (-radius..=radius).zip(&kernel) {
                            row += kx * sample_at(y as isize + dy, x as isize + dx, c);
                        }
                        acc += ky * row / ksum;
                    }
                    image.data_mut()[(y * w + x) * 3 + c] = (acc / ksum).clamp(0.0, 1.0) as f32;
                }
            }
        }
        ForgeryKind::SpectralTruncation => {
            let (y0, x0, rh, rw) = match recipe.region {
                RegionGeometry::Rect { y0, x0, height, width } => (y0, x0, height, width),
                _ => {
                    return Err(Error::Data(
                        "spectral truncation needs a rectangular region".into(),
                    ))
                }
            };
            let patch = Tensor::<f32>::from_fn(&[rh, rw, 3], |i| {
                let c = i % 3;
                let x = (i / 3) % rw;
                let y = i / (3 * rw);
                base.image.data()[((y0 + y) * w + (x0 + x)) * 3 + c]
            });
            let mut spec = fft::fft2d(&patch)?;
            let keep = 1.0 - recipe.intensity;
            for u in 0..rh {
                for v in 0..rw {
                    let fy = u.min(rh - u) as f64 / (rh as f64 / 2.0);
                    let fx = v.min(rw - v) as f64 / (rw as f64 / 2.0);
                    if fy.max(fx) > keep {
                        for c in 0..3 {
                            let i = (u * rw + v) * 3 + c;
                            spec.re.data_mut()[i] = 0.0;
                            spec.im.data_mut()[i] = 0.0;
                        }
                    }
                }
            }
            let smoothed = fft::ifft2d(&spec)?;
            // Truncation can overshoot [0, 1]; an affine rescale touches only
            // the DC bin and a global gain, so the zeroed band stays zero.
            let mut lo = f32::INFINITY;
            let mut hi = f32::NEG_INFINITY;
            for &v in smoothed.data() {
                lo = lo.min(v);
                hi = hi.max(v);
            }
            let (scale, shift) = if lo < 0.0 || hi > 1.0 {
                (1.0 / (hi - lo).max(1e-6), -lo)
            } else {
                (1.0, 0.0)
            };
            for y in 0..rh {
                for x in 0..rw {
                    for c in 0..3 {
                        let v = (smoothed.data()[(y * rw + x) * 3 + c] + shift) * scale;
                        image.data_mut()[((y0 + y) * w + (x0 + x)) * 3 + c] = v;
                    }
                }
            }
        }
    }

    let fake = Sample {
        id: format!("fake-{:016x}", recipe.seed),
        image,
        label: 1,
        mask,
    };
    fake.validate()?;
    Ok(fake)
}

/// Draws a recipe whose region fits the image with a mask fraction in
/// roughly [0.05, 0.35] and a non-degenerate intensity.
pub fn random_recipe<R: Rng>(rng: &mut R, h: usize, w: usize, kind: ForgeryKind) -> ForgeryRecipe {
    let area = rng.gen_range(0.05..0.35) * (h * w) as f64;
    let aspect = rng.gen_range(0.6..1.6);
    let region = match kind {
        ForgeryKind::SpectralTruncation => rect_region(rng, h, w, area, aspect),
        _ => {
            if rng.gen_bool(0.7) {
                let ry = ((area / (std::f64::consts::PI * aspect)).sqrt()).clamp(2.0, h as f64 / 2.0 - 1.0);
                let rx = (ry * aspect).clamp(2.0, w as f64 / 2.0 - 1.0);
                let cy = rng.gen_range(ry..(h - 1) as f64 - ry);
                let cx = rng.gen_range(rx..(w - 1) as f64 - rx);
                RegionGeometry::Ellipse { cy, cx, ry, rx }
            } else {
                rect_region(rng, h, w, area, aspect)
            }
        }
    };
    let intensity = match kind {
        ForgeryKind::Splice => rng.gen_range(0.7..1.0),
        ForgeryKind::ColorShift => rng.gen_range(0.10..0.30),
        ForgeryKind::BlurPatch => rng.gen_range(1.2..3.0),
        ForgeryKind::SpectralTruncation => rng.gen_range(0.5..0.9),
    };
    ForgeryRecipe {
        kind,
        region,
        intensity,
        seed: rng.gen(),
    }
}

fn rect_region<R: Rng>(rng: &mut R, h: usize, w: usize, area: f64, aspect: f64) -> RegionGeometry {
    let rh = ((area / aspect).sqrt() as usize).clamp(3, h - 2);
    let rw = ((area / rh as f64) as usize).clamp(3, w - 2);
    let y0 = rng.gen_range(0..=(h - rh));
    let x0 = rng.gen_range(0..=(w - rw));
    RegionGeometry::Rect { y0, x0, height: rh, width: rw }
}

/// What `build_dataset` wrote: counts, seed, and generator settings.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub seed: u64,
    pub n_real: usize,
    pub n_fake: usize,
    pub image_size: usize,
    pub recipe_kinds: Vec<String>,
    pub area_fraction: (f64, f64),
    pub intensity_ranges: BTreeMap<String, (f64, f64)>,
}

/// One row of `labels.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelRow {
    pub id: String,
    pub path_image: String,
    pub path_mask: String,
    pub label: u8,
    pub recipe_kind: String,
}

/// Generates and persists a dataset under `out_dir`:
/// `images/<id>.tns`, `masks/<id>.tns`, `labels.csv`, `manifest.json`.
/// Byte-identical across reruns with the same arguments.
pub fn build_dataset(
    n_real: usize,
    n_fake: usize,
    seed: u64,
    image_size: usize,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    let images = out_dir.join("images");
    let masks = out_dir.join("masks");
    fs::create_dir_all(&images)?;
    fs::create_dir_all(&masks)?;
    let (h, w) = (image_size, image_size);
    let mut rows = Vec::with_capacity(n_real + n_fake);
    let mut write_sample = |sample: &Sample, kind: &str| -> Result<()> {
        sample.validate()?;
        let img_rel = format!("images/{}.tns", sample.id);
        let mask_rel = format!("masks/{}.tns", sample.id);
        tns::write_tensor(&out_dir.join(&img_rel), &sample.image)?;
        tns::write_tensor(&out_dir.join(&mask_rel), &sample.mask)?;
        rows.push(LabelRow {
            id: sample.id.clone(),
            path_image: img_rel,
            path_mask: mask_rel,
            label: sample.label,
            recipe_kind: kind.to_string(),
        });
        Ok(())
    };

    for i in 0..n_real {
        let mut sample = generate_real(derive_seed(seed, i as u64), h, w);
        sample.id = format!("real_{i:05}");
        write_sample(&sample, "none")?;
    }
    for i in 0..n_fake {
        let item_seed = derive_seed(seed, (n_real + i) as u64);
        let mut base = generate_real(derive_seed(item_seed, 1), h, w);
        base.id = format!("base_{i:05}");
        let kind = ForgeryKind::ALL[i % ForgeryKind::ALL.len()];
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(item_seed, 2));
        let recipe = random_recipe(&mut rng, h, w, kind);
        let mut fake = generate_fake(&base, &recipe)?;
        fake.id = format!("fake_{i:05}");
        write_sample(&fake, kind.as_str())?;
    }

    let mut csv = String::from("id,path_image,path_mask,label,recipe_kind\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            r.id, r.path_image, r.path_mask, r.label, r.recipe_kind
        ));
    }
    fs::write(out_dir.join("labels.csv"), csv)?;

    let manifest = DatasetManifest {
        format_version: 1,
        seed,
        n_real,
        n_fake,
        image_size,
        recipe_kinds: ForgeryKind::ALL.iter().map(|k| k.as_str().to_string()).collect(),
        area_fraction: (0.05, 0.35),
        intensity_ranges: ForgeryKind::ALL
            .iter()
            .map(|k| (k.as_str().to_string(), k.intensity_range()))
            .collect(),
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Io(e.to_string()))?;
    fs::write(out_dir.join("manifest.json"), json)?;
    Ok(manifest)
}

/// Loaded view of a dataset directory; samples are read lazily by row.
#[derive(Debug, Clone)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    pub rows: Vec<LabelRow>,
}

impl DatasetIndex {
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_text = fs::read_to_string(dir.join("manifest.json"))
            .map_err(|e| Error::Data(format!("{}: {e}", dir.join("manifest.json").display())))?;
        let manifest: DatasetManifest = serde_json::from_str(&manifest_text)
            .map_err(|e| Error::Data(format!("bad manifest: {e}")))?;
        if manifest.format_version != 1 {
            return Err(Error::Data(format!(
                "unsupported dataset format version {}",
                manifest.format_version
            )));
        }
        let csv = fs::read_to_string(dir.join("labels.csv"))
            .map_err(|e| Error::Data(format!("{}: {e}", dir.join("labels.csv").display())))?;
        let mut lines = csv.lines();
        match lines.next() {
            Some("id,path_image,path_mask,label,recipe_kind") => {}
            other => {
                return Err(Error::Data(format!(
                    "bad labels.csv header: {other:?}"
                )))
            }
        }
        let mut rows = Vec::new();
        for (lineno, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 5 {
                return Err(Error::Data(format!(
                    "labels.csv line {}: expected 5 columns, got {}",
                    lineno + 2,
                    parts.len()
                )));
            }
            let label: u8 = parts[3]
                .parse()
                .map_err(|_| Error::Data(format!("labels.csv line {}: bad label", lineno + 2)))?;
            if label > 1 {
                return Err(Error::Data(format!(
                    "labels.csv line {}: label must be 0 or 1",
                    lineno + 2
                )));
            }
            rows.push(LabelRow {
                id: parts[0].to_string(),
                path_image: parts[1].to_string(),
                path_mask: parts[2].to_string(),
                label,
                recipe_kind: parts[4].to_string(),
            });
        }
        if rows.len() != manifest.n_real + manifest.n_fake {
            return Err(Error::Data(format!(
                "labels.csv has {} rows, manifest promises {}",
                rows.len(),
                manifest.n_real + manifest.n_fake
            )));
        }
        Ok(DatasetIndex {
            root: dir.to_path_buf(),
            manifest,
            rows,
        })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn load_sample(&self, row: usize) -> Result<Sample> {
        let r = &self.rows[row];
        let image = tns::read_tensor(&self.root.join(&r.path_image))?;
        let mask = tns::read_tensor(&self.root.join(&r.path_mask))?;
        let sample = Sample {
            id: r.id.clone(),
            image,
            label: r.label,
            mask,
        };
        sample.validate()?;
        Ok(sample)
    }

    pub fn labels(&self) -> Vec<u8> {
        self.rows.iter().map(|r| r.label).collect()
    }
}

/// Epoch ordering that repeats every real sample `max(1, ceil(n_fake / n_real))`
/// times and takes each fake once, shuffled by `seed`. Returns row indices.
pub fn balanced_epoch(labels: &[u8], seed: u64) -> Vec<usize> {
    let reals: Vec<usize> = labels
        .iter()
        .enumerate()
        .filter(|(_, &l)| l == 0)
        .map(|(i, _)| i)
        .collect();
    let fakes: Vec<usize> = labels
        .iter()
        .enumerate()
        .filter(|(_, &l)| l == 1)
        .map(|(i, _)| i)
        .collect();
    let factor = if reals.is_empty() {
        0
    } else {
        ((fakes.len() + reals.len() - 1) / reals.len()).max(1)
    };
    let mut order = Vec::with_capacity(reals.len() * factor + fakes.len());
    for _ in 0..factor {
        order.extend_from_slice(&reals);
    }
    order.extend_from_slice(&fakes);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    order
}
