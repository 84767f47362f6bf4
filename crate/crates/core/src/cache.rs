//! Content-addressed cache of generated image variants:
//! `cache/<image-hash>/<variant-index>.png` plus a `meta.txt` record with
//! the adapt-config hash, seed, and loss trace.

use crate::data::{ImageTensor, ValueRange};
use crate::error::{Error, Result};
use crate::fusion::GeneratedLookup;
use crate::generator::{
    adapt_generator_to_image, sample_perturbed_images, AdaptConfig, FeatureExtractor, LossRecord,
    ToyGenerator,
};
use rayon::prelude::*;
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

/// Hash identifying the adaptation settings (and generator checkpoint)
/// that produced a cache entry.
pub fn adapt_config_hash(config: &AdaptConfig, generator_tag: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(serde_json::to_vec(config).expect("config serializes"));
    hasher.update(generator_tag.as_bytes());
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone)]
pub struct CacheMeta {
    pub config_hash: String,
    pub seed: u64,
    pub num_variants: usize,
    pub loss_trace: Vec<LossRecord>,
}

#[derive(Debug, Clone)]
pub struct GeneratedCache {
    root: PathBuf,
}

impl GeneratedCache {
    pub fn new(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        std::fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        Ok(GeneratedCache { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn entry_dir(&self, image: &ImageTensor) -> PathBuf {
        self.root.join(image.content_hash())
    }

    fn variant_path(dir: &Path, index: usize) -> PathBuf {
        dir.join(format!("{index:03}.png"))
    }

    /// An entry is complete when its meta matches the config hash and all
    /// recorded variants are present.
    pub fn is_complete(&self, image: &ImageTensor, config_hash: &str, k: usize) -> bool {
        let dir = self.entry_dir(image);
        let Ok(meta) = read_meta(&dir.join("meta.txt")) else {
            return false;
        };
        meta.config_hash == config_hash
            && meta.num_variants >= k
            && (0..k).all(|i| Self::variant_path(&dir, i).exists())
    }

    pub fn write_entry(
        &self,
        image: &ImageTensor,
        variants: &[ImageTensor],
        meta: &CacheMeta,
    ) -> Result<()> {
        let dir = self.entry_dir(image);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (i, v) in variants.iter().enumerate() {
            v.save_png(&Self::variant_path(&dir, i))?;
        }
        // Meta is written last: a partially written entry never looks
        // complete on resume.
        write_meta(&dir.join("meta.txt"), meta)
    }

    pub fn load_meta(&self, image: &ImageTensor) -> Result<CacheMeta> {
        read_meta(&self.entry_dir(image).join("meta.txt"))
    }
}

impl GeneratedLookup for GeneratedCache {
    fn variant_count(&self, image: &ImageTensor) -> usize {
        let dir = self.entry_dir(image);
        match read_meta(&dir.join("meta.txt")) {
            Ok(meta) => (0..meta.num_variants)
                .take_while(|&i| Self::variant_path(&dir, i).exists())
                .count(),
            Err(_) => 0,
        }
    }

    fn variant(&self, image: &ImageTensor, index: usize) -> Result<ImageTensor> {
        let path = Self::variant_path(&self.entry_dir(image), index);
        if !path.exists() {
            return Err(Error::data(format!(
                "no cached variant {index} for image {}",
                image.content_hash()
            )));
        }
        ImageTensor::load_png(&path, ValueRange::UNIT_SIGNED)
    }
}

fn write_meta(path: &Path, meta: &CacheMeta) -> Result<()> {
    let mut text = String::new();
    text.push_str(&format!("config_hash: {}\n", meta.config_hash));
    text.push_str(&format!("seed: {}\n", meta.seed));
    text.push_str(&format!("num_variants: {}\n", meta.num_variants));
    text.push_str("trace:\n");
    for rec in &meta.loss_trace {
        text.push_str(&format!(
            "{},{},{},{},{}\n",
            rec.step, rec.total, rec.l1, rec.perceptual, rec.em
        ));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_meta(path: &Path) -> Result<CacheMeta> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut config_hash = None;
    let mut seed = None;
    let mut num_variants = None;
    let mut loss_trace = Vec::new();
    let mut in_trace = false;
    for line in text.lines() {
        if in_trace {
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() == 5 {
                loss_trace.push(LossRecord {
                    step: parts[0].parse().map_err(|_| bad_meta(path))?,
                    total: parts[1].parse().map_err(|_| bad_meta(path))?,
                    l1: parts[2].parse().map_err(|_| bad_meta(path))?,
                    perceptual: parts[3].parse().map_err(|_| bad_meta(path))?,
                    em: parts[4].parse().map_err(|_| bad_meta(path))?,
                });
            }
            continue;
        }
        if line == "trace:" {
            in_trace = true;
        } else if let Some(v) = line.strip_prefix("config_hash: ") {
            config_hash = Some(v.to_string());
        } else if let Some(v) = line.strip_prefix("seed: ") {
            seed = v.parse().ok();
        } else if let Some(v) = line.strip_prefix("num_variants: ") {
            num_variants = v.parse().ok();
        }
    }
    Ok(CacheMeta {
        config_hash: config_hash.ok_or_else(|| bad_meta(path))?,
        seed: seed.ok_or_else(|| bad_meta(path))?,
        num_variants: num_variants.ok_or_else(|| bad_meta(path))?,
        loss_trace,
    })
}

fn bad_meta(path: &Path) -> Error {
    Error::data(format!("malformed cache meta at {}", path.display()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PopulateReport {
    pub adapted: usize,
    pub skipped: usize,
}

/// Per-image rng stream derived from the image hash, so resumed or
/// re-sharded runs produce identical entries.
fn image_stream_index(image_hash: &str) -> u64 {
    u64::from_str_radix(&image_hash[..16], 16).unwrap_or(0)
}

/// Populate the cache for every distinct image: adapt the generator,
/// sample `num_variants` perturbed images, write the entry. Complete
/// entries are skipped, so the operation is idempotent and resumable.
/// Images are sharded across worker threads.
pub fn populate_cache(
    images: &[&ImageTensor],
    generator: &ToyGenerator,
    extractor: &(dyn FeatureExtractor + Sync),
    config: &AdaptConfig,
    config_hash: &str,
    cache: &GeneratedCache,
    master_seed: u64,
) -> Result<PopulateReport> {
    config.validate()?;
    // Deduplicate by content hash; identical images share one entry.
    let mut seen = std::collections::BTreeSet::new();
    let mut work: Vec<&ImageTensor> = Vec::new();
    for &img in images {
        if seen.insert(img.content_hash()) {
            work.push(img);
        }
    }
    let results: Vec<Result<bool>> = work
        .par_iter()
        .map(|img| {
            let hash = img.content_hash();
            if cache.is_complete(img, config_hash, config.num_variants) {
                return Ok(false);
            }
            let mut rng = crate::rng::derive_rng(master_seed, "adapt", image_stream_index(&hash));
            let state = adapt_generator_to_image(generator, img, extractor, config, &mut rng)?;
            let variants = sample_perturbed_images(
                &state,
                config.perturb_sigma,
                config.num_variants,
                &mut rng,
            )?;
            cache.write_entry(
                img,
                &variants,
                &CacheMeta {
                    config_hash: config_hash.to_string(),
                    seed: master_seed,
                    num_variants: config.num_variants,
                    loss_trace: state.loss_trace.clone(),
                },
            )?;
            Ok(true)
        })
        .collect();
    let mut adapted = 0;
    let mut skipped = 0;
    for r in results {
        if r? {
            adapted += 1;
        } else {
            skipped += 1;
        }
    }
    Ok(PopulateReport { adapted, skipped })
}
