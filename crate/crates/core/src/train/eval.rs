//! Meta-testing: episode evaluation with mode-specific support-set
//! enlargement, accuracy aggregation, and confidence intervals.

use crate::baselines::{self, AugmentationMode, AugmentationSpec};
use crate::data::{sample_episode, ClassId, Dataset, ImageTensor};
use crate::error::{Error, Result};
use crate::fusion::{
    augment_support_set_detailed, pick_distinct, FusionNetwork, FusionWeightRecord,
    GeneratedLookup,
};
use crate::protonet::{
    compute_prototypes, embed_batch, query_class_probabilities, EmbeddingNetwork,
};
use crate::rng::{derive_rng, Rng};
use ndarray::Array1;
use rand::Rng as _;
use rayon::prelude::*;
use serde::Serialize;
use std::collections::BTreeSet;

/// Evaluation protocol settings.
#[derive(Debug, Clone)]
pub struct EvalSettings {
    pub n: usize,
    pub m: usize,
    pub q: usize,
    pub episodes: usize,
    pub seed: u64,
    pub mode: AugmentationMode,
    pub n_aug: usize,
    pub flip_enabled: bool,
    pub squared_distance: bool,
    pub augmentation: AugmentationSpec,
}

/// Accuracy summary over evaluation episodes (percent units).
#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub mean_accuracy: f64,
    pub ci95: f64,
    pub episode_count: usize,
    pub per_episode_accuracies: Vec<f64>,
}

/// Weight-grid dump row for one fused support image.
#[derive(Debug, Clone, Serialize)]
pub struct WeightRecord {
    pub episode: usize,
    pub image_hash: String,
    pub weights: Vec<f64>,
}

/// Normal-approximation 95% interval with the sample (n-1) deviation.
pub fn confidence_interval(values: &[f64]) -> Result<(f64, f64)> {
    if values.len() < 2 {
        return Err(Error::data(format!(
            "confidence interval needs at least 2 values, got {}",
            values.len()
        )));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    Ok((mean, 1.96 * var.sqrt() / n.sqrt()))
}

fn argmax_first(values: &Array1<f64>) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Evaluate one sampled episode; returns accuracy in percent and any
/// fusion weight records.
#[allow(clippy::too_many_arguments)]
fn evaluate_episode(
    fusion: &FusionNetwork,
    embedder: &EmbeddingNetwork,
    dataset: &Dataset,
    pool: &BTreeSet<ClassId>,
    settings: &EvalSettings,
    cache: Option<&(dyn GeneratedLookup + Sync)>,
    rng: &mut Rng,
    episode_index: usize,
    dump_weights: bool,
) -> Result<(f64, Vec<WeightRecord>)> {
    let episode = sample_episode(dataset, pool, settings.n, settings.m, settings.q, rng)?;
    let spec = &settings.augmentation;
    let mut records = Vec::new();

    // Image-level support enlargement.
    let mut images: Vec<ImageTensor> = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    let push = |img: ImageTensor, label: usize, images: &mut Vec<ImageTensor>, labels: &mut Vec<usize>| {
        images.push(img);
        labels.push(label);
    };
    let need_cache = || {
        cache.ok_or_else(|| {
            Error::config(format!(
                "augmentation mode `{}` requires a generated-image cache",
                settings.mode.as_str()
            ))
        })
    };
    match settings.mode {
        AugmentationMode::Metairnet => {
            let lookup = need_cache()?;
            let (aug, recs) = augment_support_set_detailed(
                &episode.support,
                lookup,
                fusion,
                settings.n_aug,
                rng,
            )?;
            for entry in aug.entries {
                let label = episode.label_map[&entry.label];
                push(entry.image, label, &mut images, &mut labels);
            }
            if dump_weights {
                records.extend(recs.into_iter().map(|r: FusionWeightRecord| WeightRecord {
                    episode: episode_index,
                    image_hash: r.source_hash,
                    weights: r.weights,
                }));
            }
        }
        AugmentationMode::None
        | AugmentationMode::Gaussian
        | AugmentationMode::ManifoldMixup => {
            for item in &episode.support {
                push(
                    item.image.clone(),
                    episode.label_map[&item.label],
                    &mut images,
                    &mut labels,
                );
            }
        }
        AugmentationMode::Flip => {
            for item in &episode.support {
                let label = episode.label_map[&item.label];
                push(item.image.clone(), label, &mut images, &mut labels);
                push(
                    baselines::flip_augment(&item.image),
                    label,
                    &mut images,
                    &mut labels,
                );
            }
        }
        AugmentationMode::FinetuneganRaw => {
            let lookup = need_cache()?;
            for item in &episode.support {
                let label = episode.label_map[&item.label];
                push(item.image.clone(), label, &mut images, &mut labels);
                let count = lookup.variant_count(&item.image);
                if count < settings.n_aug {
                    return Err(Error::data(format!(
                        "image {} has {count} cached variants, need n_aug={}",
                        item.image.content_hash(),
                        settings.n_aug
                    )));
                }
                for choice in pick_distinct(count, settings.n_aug, rng) {
                    push(lookup.variant(&item.image, choice)?, label, &mut images, &mut labels);
                }
            }
        }
        AugmentationMode::Mixup => {
            let originals: Vec<ImageTensor> =
                episode.support.iter().map(|s| s.image.clone()).collect();
            for (i, item) in episode.support.iter().enumerate() {
                let label = episode.label_map[&item.label];
                push(item.image.clone(), label, &mut images, &mut labels);
                for _ in 0..settings.n_aug {
                    let partner = rng.random_range(0..originals.len());
                    let lam = rng.random_range(0.0..=1.0);
                    let mixed = baselines::mixup_images(&originals[i], &originals[partner], lam)?;
                    push(mixed, label, &mut images, &mut labels);
                }
            }
        }
        AugmentationMode::Cutmix => {
            let originals: Vec<ImageTensor> =
                episode.support.iter().map(|s| s.image.clone()).collect();
            for (i, item) in episode.support.iter().enumerate() {
                let label = episode.label_map[&item.label];
                push(item.image.clone(), label, &mut images, &mut labels);
                for _ in 0..settings.n_aug {
                    let partner = rng.random_range(0..originals.len());
                    let mixed = baselines::cutmix_images(
                        &originals[i],
                        &originals[partner],
                        None,
                        spec.cutmix_area,
                        rng,
                    )?;
                    push(mixed, label, &mut images, &mut labels);
                }
            }
        }
        AugmentationMode::Jitter => {
            for item in &episode.support {
                let label = episode.label_map[&item.label];
                push(item.image.clone(), label, &mut images, &mut labels);
                for _ in 0..settings.n_aug {
                    let jittered =
                        baselines::jitter_augment(&item.image, spec.jitter_magnitude, rng);
                    push(jittered, label, &mut images, &mut labels);
                }
            }
        }
        AugmentationMode::ManualGrid => {
            let lookup = need_cache()?;
            let pattern = spec.manual_pattern_array()?;
            for item in &episode.support {
                let label = episode.label_map[&item.label];
                push(item.image.clone(), label, &mut images, &mut labels);
                let count = lookup.variant_count(&item.image);
                if count < settings.n_aug {
                    return Err(Error::data(format!(
                        "image {} has {count} cached variants, need n_aug={}",
                        item.image.content_hash(),
                        settings.n_aug
                    )));
                }
                for choice in pick_distinct(count, settings.n_aug, rng) {
                    let generated = lookup.variant(&item.image, choice)?;
                    let mixed = baselines::manual_grid_mix(&item.image, &generated, &pattern)?;
                    push(mixed, label, &mut images, &mut labels);
                }
            }
        }
    }
    // Flip combines with any other mode.
    if settings.flip_enabled && settings.mode != AugmentationMode::Flip {
        for item in &episode.support {
            let label = episode.label_map[&item.label];
            push(
                baselines::flip_augment(&item.image),
                label,
                &mut images,
                &mut labels,
            );
        }
    }

    // Embed the augmented support and the queries in one inference batch.
    let mut refs: Vec<&ImageTensor> = images.iter().collect();
    refs.extend(episode.query.iter().map(|s| &s.image));
    let features = embed_batch(embedder, &refs)?;
    let (support_feats, query_feats) = features.split_at(images.len());
    let mut support_feats: Vec<Array1<f64>> = support_feats.to_vec();
    let mut support_labels = labels;

    // Feature-level enlargement.
    match settings.mode {
        AugmentationMode::Gaussian => {
            let base = support_feats.clone();
            let base_labels = support_labels.clone();
            for (f, &l) in base.iter().zip(&base_labels) {
                for _ in 0..settings.n_aug {
                    support_feats.push(baselines::gaussian_feature_augment(
                        f,
                        spec.gaussian_sigma,
                        rng,
                    ));
                    support_labels.push(l);
                }
            }
        }
        AugmentationMode::ManifoldMixup => {
            let base = support_feats.clone();
            let base_labels = support_labels.clone();
            for (i, &l) in base_labels.iter().enumerate() {
                for _ in 0..settings.n_aug {
                    let partner = rng.random_range(0..base.len());
                    let lam = rng.random_range(0.0..=1.0);
                    support_feats.push(baselines::manifold_mixup_embed(
                        &base[i],
                        &base[partner],
                        lam,
                    )?);
                    support_labels.push(l);
                }
            }
        }
        _ => {}
    }

    let prototypes = compute_prototypes(&support_feats, &support_labels, episode.n)?;
    let query_labels = episode.query_local_labels();
    let mut correct = 0usize;
    for (qf, &label) in query_feats.iter().zip(&query_labels) {
        let probs = query_class_probabilities(&prototypes, qf, settings.squared_distance);
        if argmax_first(&probs) == label {
            correct += 1;
        }
    }
    let accuracy = 100.0 * correct as f64 / query_labels.len() as f64;
    Ok((accuracy, records))
}

/// Evaluate over `settings.episodes` independent episodes. Episodes own
/// rng streams derived from the seed by index, so results are identical
/// regardless of worker scheduling.
pub fn evaluate_model(
    fusion: &FusionNetwork,
    embedder: &EmbeddingNetwork,
    dataset: &Dataset,
    pool: &BTreeSet<ClassId>,
    settings: &EvalSettings,
    cache: Option<&(dyn GeneratedLookup + Sync)>,
    dump_weights: bool,
) -> Result<(EvalReport, Vec<WeightRecord>)> {
    if settings.episodes < 2 {
        return Err(Error::config("evaluation needs at least 2 episodes"));
    }
    let results: Vec<Result<(f64, Vec<WeightRecord>)>> = (0..settings.episodes)
        .into_par_iter()
        .map(|idx| {
            let mut rng = derive_rng(settings.seed, "eval-episode", idx as u64);
            evaluate_episode(
                fusion, embedder, dataset, pool, settings, cache, &mut rng, idx, dump_weights,
            )
        })
        .collect();
    let mut accuracies = Vec::with_capacity(settings.episodes);
    let mut records = Vec::new();
    for r in results {
        let (acc, recs) = r?;
        accuracies.push(acc);
        records.extend(recs);
    }
    let (mean, ci95) = confidence_interval(&accuracies)?;
    Ok((
        EvalReport {
            mean_accuracy: mean,
            ci95,
            episode_count: accuracies.len(),
            per_episode_accuracies: accuracies,
        },
        records,
    ))
}

/// Evaluate the same checkpoint across several `n_aug` values with one
/// shared seed.
pub fn run_naug_sweep(
    fusion: &FusionNetwork,
    embedder: &EmbeddingNetwork,
    dataset: &Dataset,
    pool: &BTreeSet<ClassId>,
    base: &EvalSettings,
    values: &[usize],
    cache: Option<&(dyn GeneratedLookup + Sync)>,
) -> Result<Vec<(usize, EvalReport)>> {
    let mut out = Vec::with_capacity(values.len());
    for &n_aug in values {
        let settings = EvalSettings {
            n_aug,
            ..base.clone()
        };
        let (report, _) =
            evaluate_model(fusion, embedder, dataset, pool, &settings, cache, false)?;
        out.push((n_aug, report));
    }
    Ok(out)
}
