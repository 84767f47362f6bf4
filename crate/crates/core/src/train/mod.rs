//! Joint end-to-end meta-training of the fusion network and classifier,
//! validation-based model selection, and the evaluation protocol.

mod episode;
mod eval;
mod probes;

pub use episode::{episode_training_step, EpisodeStepOutput};
pub use eval::{
    confidence_interval, evaluate_model, run_naug_sweep, EvalReport, EvalSettings, WeightRecord,
};
pub use probes::{evaluate_frozen_probes, ProbeClassifier, ProbeData, ProbeOutcome, ProbeSettings};

use crate::baselines::{AugmentationMode, AugmentationSpec};
use crate::data::{sample_episode, ClassSplit, Dataset};
use crate::error::{Error, Result};
use crate::fusion::{pick_distinct, FusionNetwork, GeneratedLookup};
use crate::nn::Adam;
use crate::protonet::EmbeddingNetwork;
use crate::rng::derive_rng;
use serde::{Deserialize, Serialize};

/// Meta-training schedule and episode shape.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub n: usize,
    pub m: usize,
    pub q: usize,
    pub episodes_per_epoch: usize,
    pub epochs: usize,
    pub val_episodes: usize,
    pub learning_rate: f64,
    pub n_aug: usize,
    pub mode: AugmentationMode,
    pub flip_enabled: bool,
    pub squared_distance: bool,
    pub seed: u64,
    pub augmentation: AugmentationSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            n: 5,
            m: 1,
            q: 16,
            episodes_per_epoch: 100,
            epochs: 10,
            val_episodes: 50,
            learning_rate: 0.001,
            n_aug: 1,
            mode: AugmentationMode::Metairnet,
            flip_enabled: false,
            squared_distance: false,
            seed: 0,
            augmentation: AugmentationSpec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0
            || self.m == 0
            || self.q == 0
            || self.episodes_per_epoch == 0
            || self.epochs == 0
            || self.val_episodes < 2
            || self.learning_rate <= 0.0
        {
            return Err(Error::config(format!("invalid train config: {self:?}")));
        }
        Ok(())
    }

    fn eval_settings(&self, episodes: usize, seed: u64) -> EvalSettings {
        EvalSettings {
            n: self.n,
            m: self.m,
            q: self.q,
            episodes,
            seed,
            mode: self.mode,
            n_aug: self.n_aug,
            flip_enabled: self.flip_enabled,
            squared_distance: self.squared_distance,
            augmentation: self.augmentation.clone(),
        }
    }
}

/// Outcome of a meta-training run.
#[derive(Debug, Clone)]
pub struct TrainReport {
    /// 1-based epoch whose validation accuracy was maximal (earliest on
    /// ties).
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub epoch_val_accuracies: Vec<f64>,
    /// Fusion-parameter gradient norm at the very first training step
    /// (zero in modes that do not train the fusion network).
    pub first_step_fusion_grad_norm: f64,
    /// Queries whose true-class probability hit the softmax floor.
    pub floor_hits: usize,
}

/// Verify the cache covers every image the run will need.
fn preflight_cache(
    dataset: &Dataset,
    split: &ClassSplit,
    cache: Option<&(dyn GeneratedLookup + Sync)>,
    needed: usize,
) -> Result<()> {
    let Some(cache) = cache else {
        return Err(Error::config(
            "augmentation mode requires a generated-image cache; run finetune-gan first",
        ));
    };
    let mut missing = Vec::new();
    for li in dataset.images() {
        let in_scope = split.base.contains(&li.label) || split.val.contains(&li.label);
        if !in_scope {
            continue;
        }
        if cache.variant_count(&li.image) < needed {
            missing.push(li.image.content_hash());
        }
    }
    if !missing.is_empty() {
        let shown: Vec<&str> = missing.iter().take(8).map(|h| &h[..16]).collect();
        return Err(Error::data(format!(
            "generated-image cache is missing {} images (need {} variants each): {}{}",
            missing.len(),
            needed,
            shown.join(", "),
            if missing.len() > 8 { ", ..." } else { "" }
        )));
    }
    Ok(())
}

/// Meta-train on the base classes with per-epoch validation; returns the
/// networks from the best-validation epoch.
///
/// In `metairnet` mode the fusion network and classifier are optimized
/// jointly by one Adam; every other mode trains the plain prototype
/// classifier (augmentations apply at meta-testing).
pub fn run_meta_training(
    cfg: &TrainConfig,
    dataset: &Dataset,
    split: &ClassSplit,
    cache: Option<&(dyn GeneratedLookup + Sync)>,
    mut fusion: FusionNetwork,
    mut embedder: EmbeddingNetwork,
) -> Result<(FusionNetwork, EmbeddingNetwork, TrainReport)> {
    cfg.validate()?;
    let trains_fusion = cfg.mode == AugmentationMode::Metairnet && cfg.n_aug > 0;
    if cfg.mode.needs_cache() && cfg.n_aug > 0 {
        preflight_cache(dataset, split, cache, cfg.n_aug)?;
    }

    let mut opt = Adam::new(cfg.learning_rate);
    let mut rng = derive_rng(cfg.seed, "meta-train", 0);
    let mut best: Option<(usize, f64, FusionNetwork, EmbeddingNetwork)> = None;
    let mut epoch_val_accuracies = Vec::with_capacity(cfg.epochs);
    let mut first_step_fusion_grad_norm = 0.0;
    let mut floor_hits = 0usize;

    for epoch in 0..cfg.epochs {
        for step in 0..cfg.episodes_per_epoch {
            let episode = sample_episode(dataset, &split.base, cfg.n, cfg.m, cfg.q, &mut rng)?;
            let choices: Option<Vec<Vec<usize>>> = if trains_fusion {
                let lookup = cache.expect("preflight guarantees cache");
                let mut per_support = Vec::with_capacity(episode.support.len());
                for item in &episode.support {
                    let count = lookup.variant_count(&item.image);
                    per_support.push(pick_distinct(count, cfg.n_aug, &mut rng));
                }
                Some(per_support)
            } else {
                None
            };
            let out = episode::episode_training_step(
                &embedder,
                if trains_fusion { Some(&fusion) } else { None },
                &episode,
                cache.map(|c| c as &dyn GeneratedLookup),
                choices.as_deref(),
                cfg.squared_distance,
                true,
            )?;
            if epoch == 0 && step == 0 {
                first_step_fusion_grad_norm = out.fusion_grad_norm;
            }
            floor_hits += out.floor_hits;

            let embedder_grads = out.embedder_grads.expect("gradients requested");
            let mut grads: Vec<Vec<f64>> = Vec::new();
            if let Some(fg) = out.fusion_grads {
                grads.extend(fg);
            }
            grads.extend(embedder_grads);
            let mut params: Vec<&mut [f64]> = Vec::new();
            if trains_fusion {
                params.extend(fusion.param_slices_mut());
            }
            params.extend(embedder.backbone.param_slices_mut());
            opt.step(params, &grads);
            embedder.backbone.update_running_stats(&out.bn_stats);
        }

        let val_settings = cfg.eval_settings(cfg.val_episodes, derive_rng_seed(cfg.seed, epoch));
        let (val_report, _) = eval::evaluate_model(
            &fusion,
            &embedder,
            dataset,
            &split.val,
            &val_settings,
            cache,
            false,
        )?;
        let val_acc = val_report.mean_accuracy;
        epoch_val_accuracies.push(val_acc);
        log::info!(
            "epoch {}/{}: val accuracy {:.2}%",
            epoch + 1,
            cfg.epochs,
            val_acc
        );
        let improved = match &best {
            Some((_, best_acc, _, _)) => val_acc > *best_acc,
            None => true,
        };
        if improved {
            best = Some((epoch + 1, val_acc, fusion.clone(), embedder.clone()));
        }
    }

    let (best_epoch, best_val_accuracy, best_fusion, best_embedder) =
        best.expect("at least one epoch ran");
    Ok((
        best_fusion,
        best_embedder,
        TrainReport {
            best_epoch,
            best_val_accuracy,
            epoch_val_accuracies,
            first_step_fusion_grad_norm,
            floor_hits,
        },
    ))
}

/// Per-epoch validation seed derived from the master seed.
fn derive_rng_seed(seed: u64, epoch: usize) -> u64 {
    use rand::Rng as _;
    derive_rng(seed, "val", epoch as u64).random()
}
