//! Procedural fine-grained dataset: bird-like shape classes whose
//! parameters differ only slightly between classes, rendered with
//! per-image pose, lighting, and background variation.

use crate::data::{ClassId, Dataset, ImageTensor, LabeledImage, ValueRange};
use crate::error::{Error, Result};
use crate::rng::derive_rng;
use ndarray::Array3;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub classes: u32,
    pub images_per_class: usize,
    pub image_size: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            classes: 20,
            images_per_class: 12,
            image_size: 64,
            seed: 0,
        }
    }
}

/// Class-level shape and color parameters.
struct ClassParams {
    hue: f64,
    saturation: f64,
    aspect: f64,
    angle: f64,
    beak_len: f64,
    beak_tilt: f64,
    tail_len: f64,
    wing_offset: f64,
    wing_scale: f64,
}

impl ClassParams {
    fn derive(seed: u64, class: u32, total: u32) -> Self {
        let mut rng = derive_rng(seed, "synthetic-class", class as u64);
        // Hues share a narrow band; neighbours differ subtly.
        let hue = 0.05 + 0.55 * (class as f64 / total.max(1) as f64)
            + rng.random_range(-0.008..0.008);
        ClassParams {
            hue,
            saturation: rng.random_range(0.55..0.85),
            aspect: rng.random_range(0.45..0.70),
            angle: rng.random_range(-0.45..0.45),
            beak_len: rng.random_range(0.08..0.20),
            beak_tilt: rng.random_range(-0.35..0.35),
            tail_len: rng.random_range(0.10..0.24),
            wing_offset: rng.random_range(-0.10..0.10),
            wing_scale: rng.random_range(0.38..0.62),
        }
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = (h.rem_euclid(1.0)) * 6.0;
    let i = h.floor() as i64 % 6;
    let f = h - h.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - f * s);
    let t = v * (1.0 - (1.0 - f) * s);
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

struct Pose {
    cx: f64,
    cy: f64,
    scale: f64,
    angle: f64,
}

/// Point-in-rotated-ellipse test in unit coordinates.
fn in_ellipse(u: f64, v: f64, cx: f64, cy: f64, ax: f64, ay: f64, angle: f64) -> bool {
    let (du, dv) = (u - cx, v - cy);
    let (ca, sa) = (angle.cos(), angle.sin());
    let x = du * ca + dv * sa;
    let y = -du * sa + dv * ca;
    (x / ax).powi(2) + (y / ay).powi(2) <= 1.0
}

/// Point-in-triangle test via signed areas.
fn in_triangle(u: f64, v: f64, a: (f64, f64), b: (f64, f64), c: (f64, f64)) -> bool {
    let sign = |p: (f64, f64), q: (f64, f64), r: (f64, f64)| {
        (p.0 - r.0) * (q.1 - r.1) - (q.0 - r.0) * (p.1 - r.1)
    };
    let d1 = sign((u, v), a, b);
    let d2 = sign((u, v), b, c);
    let d3 = sign((u, v), c, a);
    let has_neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
    let has_pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
    !(has_neg && has_pos)
}

fn render(params: &ClassParams, pose: &Pose, size: usize, rng: &mut crate::rng::Rng) -> Array3<f64> {
    let noise = Normal::new(0.0, 0.03).unwrap();
    let bg_hue: f64 = rng.random_range(0.0..1.0);
    let bg_val: f64 = rng.random_range(0.30..0.55);
    let brightness: f64 = rng.random_range(-0.08..0.08);

    let body = hsv_to_rgb(params.hue, params.saturation, (0.65 + brightness).clamp(0.0, 1.0));
    let wing = hsv_to_rgb(params.hue, params.saturation, (0.45 + brightness).clamp(0.0, 1.0));
    let head = hsv_to_rgb(params.hue, params.saturation * 0.8, (0.75 + brightness).clamp(0.0, 1.0));
    let beak = hsv_to_rgb(0.09, 0.85, (0.80 + brightness).clamp(0.0, 1.0));

    let (ca, sa) = (pose.angle.cos(), pose.angle.sin());
    let dir = (ca, sa);
    let s = pose.scale;
    let (ax, ay) = (s, s * params.aspect);
    // Head sits at the +x end of the body's major axis.
    let head_c = (pose.cx + dir.0 * ax * 0.95, pose.cy + dir.1 * ax * 0.95);
    let head_r = s * 0.42;
    // Beak triangle extends forward from the head.
    let tilt = pose.angle + params.beak_tilt;
    let beak_dir = (tilt.cos(), tilt.sin());
    let beak_tip = (
        head_c.0 + beak_dir.0 * (head_r + params.beak_len * s * 2.2),
        head_c.1 + beak_dir.1 * (head_r + params.beak_len * s * 2.2),
    );
    let perp = (-beak_dir.1, beak_dir.0);
    let beak_a = (head_c.0 + perp.0 * head_r * 0.55, head_c.1 + perp.1 * head_r * 0.55);
    let beak_b = (head_c.0 - perp.0 * head_r * 0.55, head_c.1 - perp.1 * head_r * 0.55);
    // Tail triangle extends backward.
    let tail_base = (pose.cx - dir.0 * ax * 0.9, pose.cy - dir.1 * ax * 0.9);
    let tail_tip = (
        pose.cx - dir.0 * (ax + params.tail_len * s * 2.4),
        pose.cy - dir.1 * (ax + params.tail_len * s * 2.4),
    );
    let tail_a = (tail_base.0 + perp.0 * ay * 0.6, tail_base.1 + perp.1 * ay * 0.6);
    let tail_b = (tail_base.0 - perp.0 * ay * 0.6, tail_base.1 - perp.1 * ay * 0.6);
    // Wing: smaller ellipse offset across the minor axis.
    let wing_c = (
        pose.cx - sa * params.wing_offset,
        pose.cy + ca * params.wing_offset,
    );

    let mut out = Array3::<f64>::zeros((size, size, 3));
    for y in 0..size {
        for x in 0..size {
            let u = (x as f64 + 0.5) / size as f64;
            let v = (y as f64 + 0.5) / size as f64;
            // Background: vertical gradient with per-pixel noise.
            let grad = bg_val + 0.12 * (v - 0.5);
            let mut px = hsv_to_rgb(bg_hue, 0.15, grad.clamp(0.0, 1.0));
            if in_triangle(u, v, tail_tip, tail_a, tail_b) {
                px = wing;
            }
            if in_ellipse(u, v, pose.cx, pose.cy, ax, ay, pose.angle) {
                px = body;
            }
            if in_ellipse(
                u,
                v,
                wing_c.0,
                wing_c.1,
                ax * params.wing_scale,
                ay * params.wing_scale,
                pose.angle,
            ) {
                px = wing;
            }
            if in_ellipse(u, v, head_c.0, head_c.1, head_r, head_r, 0.0) {
                px = head;
            }
            if in_triangle(u, v, beak_tip, beak_a, beak_b) {
                px = beak;
            }
            for c in 0..3 {
                let n = noise.sample(rng);
                out[[y, x, c]] = ((px[c] + n).clamp(0.0, 1.0)) * 2.0 - 1.0;
            }
        }
    }
    out
}

/// Generate the dataset in memory; fully determined by the config.
pub fn generate_synthetic_dataset(cfg: &SyntheticConfig) -> Result<Dataset> {
    if cfg.classes == 0 || cfg.images_per_class == 0 || cfg.image_size < 8 {
        return Err(Error::config(format!("invalid synthetic config: {cfg:?}")));
    }
    let mut images = Vec::with_capacity(cfg.classes as usize * cfg.images_per_class);
    for class in 0..cfg.classes {
        let params = ClassParams::derive(cfg.seed, class, cfg.classes);
        for idx in 0..cfg.images_per_class {
            let mut rng = derive_rng(
                cfg.seed,
                "synthetic-image",
                class as u64 * 1_000_003 + idx as u64,
            );
            let pose = Pose {
                cx: 0.5 + rng.random_range(-0.07..0.07),
                cy: 0.5 + rng.random_range(-0.07..0.07),
                scale: 0.24 + rng.random_range(-0.03..0.05),
                angle: params.angle + rng.random_range(-0.15..0.15),
            };
            let data = render(&params, &pose, cfg.image_size, &mut rng);
            images.push(LabeledImage {
                image: ImageTensor::new(data, ValueRange::UNIT_SIGNED)?,
                label: ClassId(class),
            });
        }
    }
    Dataset::new(images)
}

/// Write a dataset as a class-per-subdirectory PNG tree.
pub fn write_images_by_class(images: &[LabeledImage], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut counters = std::collections::BTreeMap::new();
    for li in images {
        let cdir = dir.join(format!("class_{:04}", li.label.0));
        std::fs::create_dir_all(&cdir).map_err(|e| Error::io(&cdir, e))?;
        let counter = counters.entry(li.label).or_insert(0usize);
        li.image
            .save_png(&cdir.join(format!("{:05}.png", *counter)))?;
        *counter += 1;
    }
    Ok(())
}
