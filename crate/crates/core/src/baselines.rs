//! Comparison augmentation family: flip, feature noise, mixup variants,
//! cutmix, jitter, and the manual binary grid mix from the pilot study.

use crate::data::ImageTensor;
use crate::error::{Error, Result};
use crate::fusion::{expand_grid_values, fuse_images};
use crate::rng::Rng;
use ndarray::{Array1, Array2, Array3};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Support-set augmentation applied around the prototype classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentationMode {
    None,
    Metairnet,
    Flip,
    Gaussian,
    FinetuneganRaw,
    Mixup,
    ManifoldMixup,
    Cutmix,
    Jitter,
    ManualGrid,
}

impl AugmentationMode {
    /// Modes that consume the generated-image cache.
    pub fn needs_cache(&self) -> bool {
        matches!(
            self,
            AugmentationMode::Metairnet
                | AugmentationMode::FinetuneganRaw
                | AugmentationMode::ManualGrid
        )
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            AugmentationMode::None => "none",
            AugmentationMode::Metairnet => "metairnet",
            AugmentationMode::Flip => "flip",
            AugmentationMode::Gaussian => "gaussian",
            AugmentationMode::FinetuneganRaw => "finetunegan_raw",
            AugmentationMode::Mixup => "mixup",
            AugmentationMode::ManifoldMixup => "manifold_mixup",
            AugmentationMode::Cutmix => "cutmix",
            AugmentationMode::Jitter => "jitter",
            AugmentationMode::ManualGrid => "manual_grid",
        }
    }
}

/// Kind-specific augmentation parameters, carried in the run config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationSpec {
    /// Feature-noise standard deviation.
    pub gaussian_sigma: f64,
    /// CutMix area fraction range.
    pub cutmix_area: [f64; 2],
    /// Jitter shift magnitude as a fraction of image size.
    pub jitter_magnitude: f64,
    /// Manual binary grid pattern, rows of 0/1 entries.
    pub manual_pattern: Vec<Vec<u8>>,
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        AugmentationSpec {
            gaussian_sigma: 0.01,
            cutmix_area: [0.1, 0.5],
            jitter_magnitude: 0.15,
            manual_pattern: vec![vec![1, 0, 1], vec![0, 1, 0], vec![1, 0, 1]],
        }
    }
}

impl AugmentationSpec {
    pub fn manual_pattern_array(&self) -> Result<Array2<f64>> {
        let g = self.manual_pattern.len();
        if g == 0 || self.manual_pattern.iter().any(|row| row.len() != g) {
            return Err(Error::config("manual pattern must be a square grid"));
        }
        let mut out = Array2::<f64>::zeros((g, g));
        for (i, row) in self.manual_pattern.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                if v > 1 {
                    return Err(Error::config(format!(
                        "manual pattern entry {v} at ({i},{j}) is not binary"
                    )));
                }
                out[[i, j]] = v as f64;
            }
        }
        Ok(out)
    }
}

/// Horizontal flip (columns reversed); an involution.
pub fn flip_augment(image: &ImageTensor) -> ImageTensor {
    let (h, w) = (image.height(), image.width());
    let src = image.data();
    let mut out = Array3::<f64>::zeros((h, w, 3));
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                out[[y, x, c]] = src[[y, w - 1 - x, c]];
            }
        }
    }
    ImageTensor::new(out, image.range()).expect("flip preserves range")
}

/// Add `N(0, sigma^2)` noise to a feature vector.
pub fn gaussian_feature_augment(feature: &Array1<f64>, sigma: f64, rng: &mut Rng) -> Array1<f64> {
    if sigma == 0.0 {
        return feature.clone();
    }
    let dist = Normal::new(0.0, sigma).unwrap();
    feature + &Array1::from_shape_simple_fn(feature.len(), || dist.sample(rng))
}

/// `lam * a + (1 - lam) * b`.
pub fn mixup_images(a: &ImageTensor, b: &ImageTensor, lam: f64) -> Result<ImageTensor> {
    if !(0.0..=1.0).contains(&lam) {
        return Err(Error::config(format!("mixup weight {lam} outside [0, 1]")));
    }
    if (a.height(), a.width()) != (b.height(), b.width()) {
        return Err(Error::ShapeMismatch {
            expected: format!("{} x {}", a.height(), a.width()),
            got: format!("{} x {}", b.height(), b.width()),
        });
    }
    let data = a.data() * lam + b.data() * (1.0 - lam);
    ImageTensor::new_clamped(data, a.range())
}

/// Mixup in the embedding space.
pub fn manifold_mixup_embed(
    emb_a: &Array1<f64>,
    emb_b: &Array1<f64>,
    lam: f64,
) -> Result<Array1<f64>> {
    if !(0.0..=1.0).contains(&lam) {
        return Err(Error::config(format!("mixup weight {lam} outside [0, 1]")));
    }
    if emb_a.len() != emb_b.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{}", emb_a.len()),
            got: format!("{}", emb_b.len()),
        });
    }
    Ok(emb_a * lam + emb_b * (1.0 - lam))
}

/// Rectangular region `[y0, y0+h) x [x0, x0+w)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub y0: usize,
    pub x0: usize,
    pub h: usize,
    pub w: usize,
}

/// Overlay the region of `b` onto `a`. With no explicit region, a random
/// rectangle is drawn with area fraction uniform in `area_range`.
pub fn cutmix_images(
    a: &ImageTensor,
    b: &ImageTensor,
    region: Option<Rect>,
    area_range: [f64; 2],
    rng: &mut Rng,
) -> Result<ImageTensor> {
    if (a.height(), a.width()) != (b.height(), b.width()) {
        return Err(Error::ShapeMismatch {
            expected: format!("{} x {}", a.height(), a.width()),
            got: format!("{} x {}", b.height(), b.width()),
        });
    }
    let (h, w) = (a.height(), a.width());
    let region = match region {
        Some(r) => {
            if r.y0 + r.h > h || r.x0 + r.w > w {
                return Err(Error::data(format!(
                    "cutmix region {r:?} exceeds {h} x {w} bounds"
                )));
            }
            r
        }
        None => {
            let frac = rng.random_range(area_range[0]..=area_range[1]);
            let side = frac.sqrt();
            let rh = ((h as f64 * side).round() as usize).clamp(1, h);
            let rw = ((w as f64 * side).round() as usize).clamp(1, w);
            Rect {
                y0: rng.random_range(0..=h - rh),
                x0: rng.random_range(0..=w - rw),
                h: rh,
                w: rw,
            }
        }
    };
    let mut out = a.data().clone();
    for y in region.y0..region.y0 + region.h {
        for x in region.x0..region.x0 + region.w {
            for c in 0..3 {
                out[[y, x, c]] = b.data()[[y, x, c]];
            }
        }
    }
    ImageTensor::new(out, a.range())
}

/// Random integer shift within `+-magnitude` fraction of each dimension,
/// border pixels replicated.
pub fn jitter_augment(image: &ImageTensor, magnitude: f64, rng: &mut Rng) -> ImageTensor {
    let (h, w) = (image.height(), image.width());
    let max_dy = (magnitude * h as f64).floor() as i64;
    let max_dx = (magnitude * w as f64).floor() as i64;
    if max_dy == 0 && max_dx == 0 {
        return image.clone();
    }
    let dy = rng.random_range(-max_dy..=max_dy);
    let dx = rng.random_range(-max_dx..=max_dx);
    shift_image(image, dy, dx)
}

/// Deterministic integer relocation with clamped (replicated) borders.
pub fn shift_image(image: &ImageTensor, dy: i64, dx: i64) -> ImageTensor {
    let (h, w) = (image.height(), image.width());
    let src = image.data();
    let mut out = Array3::<f64>::zeros((h, w, 3));
    for y in 0..h {
        for x in 0..w {
            let sy = (y as i64 - dy).clamp(0, h as i64 - 1) as usize;
            let sx = (x as i64 - dx).clamp(0, w as i64 - 1) as usize;
            for c in 0..3 {
                out[[y, x, c]] = src[[sy, sx, c]];
            }
        }
    }
    ImageTensor::new(out, image.range()).expect("shift preserves range")
}

/// The pilot study's fixed binary grid mix: identical to
/// `fuse_images(a, b, expand_weight_grid(pattern))` with 0/1 weights.
pub fn manual_grid_mix(
    a: &ImageTensor,
    b: &ImageTensor,
    binary_pattern: &Array2<f64>,
) -> Result<ImageTensor> {
    if binary_pattern.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::config(
            "manual grid pattern entries must be exactly 0 or 1",
        ));
    }
    if binary_pattern.nrows() != binary_pattern.ncols() {
        return Err(Error::ShapeMismatch {
            expected: "square pattern".into(),
            got: format!("{:?}", binary_pattern.dim()),
        });
    }
    let map = expand_grid_values(binary_pattern, a.height(), a.width())?;
    fuse_images(a, b, &map)
}
