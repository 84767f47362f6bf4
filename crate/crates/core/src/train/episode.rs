//! The differentiable episode step: build the (optionally fused)
//! augmented support set on a tape, embed everything in train mode,
//! form prototypes, and take the cross-entropy loss over the queries.

use crate::data::Episode;
use crate::error::{Error, Result};
use crate::fusion::{FusionNetwork, GeneratedLookup};
use crate::protonet::{batch_from_images, EmbeddingNetwork, PROB_FLOOR};
use crate::tensor::{BatchStats, Tape, Var};
use ndarray::Array2;

/// One training forward (and optional backward) through an episode.
#[derive(Debug)]
pub struct EpisodeStepOutput {
    pub loss: f64,
    pub floor_hits: usize,
    pub probabilities: Array2<f64>,
    /// Aligned with `FusionNetwork::param_slices_mut`; `None` without a
    /// fusion path or when gradients were not requested.
    pub fusion_grads: Option<Vec<Vec<f64>>>,
    /// Aligned with `Conv4::param_slices_mut`.
    pub embedder_grads: Option<Vec<Vec<f64>>>,
    /// Per-block batch statistics of the classifier forward.
    pub bn_stats: Vec<BatchStats>,
    /// L2 norm over all fusion parameter gradients.
    pub fusion_grad_norm: f64,
}

/// Run one episode in train mode. With `fusion` present, each support
/// image is followed by fused copies built from the cached variants named
/// in `variant_choices` (one list per support entry), and the loss
/// gradient flows through the fused pixels into the fusion parameters.
#[allow(clippy::too_many_arguments)]
pub fn episode_training_step(
    embedder: &EmbeddingNetwork,
    fusion: Option<&FusionNetwork>,
    episode: &Episode,
    lookup: Option<&dyn GeneratedLookup>,
    variant_choices: Option<&[Vec<usize>]>,
    squared_distance: bool,
    compute_grads: bool,
) -> Result<EpisodeStepOutput> {
    let mut tape = Tape::new();
    let (h, w) = (
        episode.support[0].image.height(),
        episode.support[0].image.width(),
    );

    // Support entries: image node + episode-local label.
    let mut entry_vars: Vec<Var> = Vec::new();
    let mut entry_labels: Vec<usize> = Vec::new();
    let bound_fusion = fusion.map(|f| f.bind(&mut tape));
    for (i, item) in episode.support.iter().enumerate() {
        let orig = tape.constant(item.image.data().clone().into_dyn());
        entry_vars.push(orig);
        entry_labels.push(episode.label_map[&item.label]);
        let (Some(bound), Some(choices)) = (&bound_fusion, variant_choices) else {
            continue;
        };
        let lookup = lookup.ok_or_else(|| {
            Error::config("fusion training requires a generated-image cache")
        })?;
        for &choice in &choices[i] {
            let generated = lookup.variant(&item.image, choice)?;
            let orig_batch =
                tape.constant(batch_from_images(&[&item.image]).into_dyn());
            let gen_batch = tape.constant(batch_from_images(&[&generated]).into_dyn());
            let grid = bound.predict_grid(&mut tape, orig_batch, gen_batch);
            let wmap = tape.expand_grid(grid, h, w);
            let gen_hwc = tape.constant(generated.data().clone().into_dyn());
            let fused = tape.fuse_hwc(orig, gen_hwc, wmap);
            entry_vars.push(fused);
            entry_labels.push(episode.label_map[&item.label]);
        }
    }
    let support_count = entry_vars.len();
    for q in &episode.query {
        entry_vars.push(tape.constant(q.image.data().clone().into_dyn()));
    }

    let batch = tape.stack_images_chw(&entry_vars);
    let bound_conv4 = embedder.backbone.bind(&mut tape);
    let (embs, bn_stats) = bound_conv4.apply(&mut tape, batch);
    let support_embs = tape.slice_rows(embs, 0, support_count);
    let query_embs = tape.slice_rows(embs, support_count, support_count + episode.query.len());

    let mut prototypes = Vec::with_capacity(episode.n);
    for class in 0..episode.n {
        let indices: Vec<usize> = entry_labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == class)
            .map(|(i, _)| i)
            .collect();
        if indices.is_empty() {
            return Err(Error::data(format!(
                "episode class {class} has no support entries"
            )));
        }
        prototypes.push(tape.mean_rows(support_embs, &indices));
    }
    let protos = tape.stack_rows(&prototypes);
    let logits = tape.neg_distance_logits(query_embs, protos, squared_distance);
    let query_labels = episode.query_local_labels();
    let (loss_var, probabilities, floor_hits) =
        tape.softmax_cross_entropy(logits, &query_labels, PROB_FLOOR);
    let loss = tape.scalar(loss_var);
    if !loss.is_finite() {
        return Err(Error::numerical("episode loss is non-finite".to_string()));
    }

    let (fusion_grads, embedder_grads, fusion_grad_norm) = if compute_grads {
        let grads = tape.backward(loss_var);
        let fusion_grads = bound_fusion.as_ref().map(|bound| {
            bound
                .vars()
                .iter()
                .map(|&v| crate::nn::grad_vec(&grads, v, tape.value(v).len()))
                .collect::<Vec<_>>()
        });
        let embedder_grads: Vec<Vec<f64>> = bound_conv4
            .vars()
            .iter()
            .map(|&v| crate::nn::grad_vec(&grads, v, tape.value(v).len()))
            .collect();
        let norm = fusion_grads
            .as_ref()
            .map(|gs| {
                gs.iter()
                    .flat_map(|g| g.iter())
                    .map(|&v| v * v)
                    .sum::<f64>()
                    .sqrt()
            })
            .unwrap_or(0.0);
        (fusion_grads, Some(embedder_grads), norm)
    } else {
        (None, None, 0.0)
    };

    Ok(EpisodeStepOutput {
        loss,
        floor_hits,
        probabilities,
        fusion_grads,
        embedder_grads,
        bn_stats,
        fusion_grad_norm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{sample_episode, ClassId};
    use crate::fusion::MemoryLookup;
    use crate::rng::rng_from_seed;
    use crate::synthetic::{generate_synthetic_dataset, SyntheticConfig};

    fn setup() -> (crate::data::Dataset, MemoryLookup) {
        let ds = generate_synthetic_dataset(&SyntheticConfig {
            classes: 3,
            images_per_class: 4,
            image_size: 16,
            seed: 9,
        })
        .unwrap();
        let mut lookup = MemoryLookup::new();
        let mut rng = rng_from_seed(1);
        for li in ds.images() {
            // Stand-in "generated" variants: jittered copies.
            let variants = (0..2)
                .map(|_| crate::baselines::jitter_augment(&li.image, 0.2, &mut rng))
                .collect();
            lookup.insert(&li.image, variants);
        }
        (ds, lookup)
    }

    #[test]
    fn plain_episode_loss_is_near_chance_at_init() {
        let (ds, _) = setup();
        let embedder = EmbeddingNetwork::new(4, &mut rng_from_seed(2));
        let ep = sample_episode(&ds, &ds.classes(), 3, 1, 2, &mut rng_from_seed(3)).unwrap();
        let out =
            episode_training_step(&embedder, None, &ep, None, None, false, true).unwrap();
        assert!(out.loss.is_finite());
        // Random net: queries near-uniform -> about ln 3.
        assert!((out.loss - 3.0_f64.ln()).abs() < 0.5, "loss {}", out.loss);
        assert_eq!(out.probabilities.dim(), (6, 3));
        assert!(out.fusion_grads.is_none());
        assert!(out.embedder_grads.is_some());
    }

    #[test]
    fn fusion_path_produces_nonzero_fusion_gradients() {
        let (ds, lookup) = setup();
        let embedder = EmbeddingNetwork::new(4, &mut rng_from_seed(4));
        let fusion = FusionNetwork::new(3, 4, &mut rng_from_seed(5));
        let ep = sample_episode(&ds, &ds.classes(), 2, 1, 2, &mut rng_from_seed(6)).unwrap();
        let choices = vec![vec![0usize], vec![1usize]];
        let out = episode_training_step(
            &embedder,
            Some(&fusion),
            &ep,
            Some(&lookup),
            Some(&choices),
            false,
            true,
        )
        .unwrap();
        assert!(out.fusion_grad_norm > 0.0, "fusion gradients all zero");
        let fusion_grads = out.fusion_grads.unwrap();
        assert_eq!(
            fusion_grads.len(),
            6 * 2 + 2,
            "two encoders x3 convs x(w,b) plus head (w,b)"
        );
    }

    #[test]
    fn fusion_head_gradient_matches_finite_differences() {
        let (ds, lookup) = setup();
        let embedder = EmbeddingNetwork::new(4, &mut rng_from_seed(7));
        let fusion = FusionNetwork::new(3, 4, &mut rng_from_seed(8));
        let ep = sample_episode(&ds, &ds.classes(), 2, 1, 1, &mut rng_from_seed(9)).unwrap();
        let choices = vec![vec![0usize], vec![0usize]];
        let out = episode_training_step(
            &embedder,
            Some(&fusion),
            &ep,
            Some(&lookup),
            Some(&choices),
            false,
            true,
        )
        .unwrap();
        let grads = out.fusion_grads.unwrap();
        // Head bias slot is the last one.
        let head_bias_grad = &grads[grads.len() - 1];
        let eps = 1e-5;
        for coord in [0usize, 4, 8] {
            let mut hi = fusion.clone();
            hi.head.bias[coord] += eps;
            let mut lo = fusion.clone();
            lo.head.bias[coord] -= eps;
            let f = |net: &FusionNetwork| {
                episode_training_step(
                    &embedder,
                    Some(net),
                    &ep,
                    Some(&lookup),
                    Some(&choices),
                    false,
                    false,
                )
                .unwrap()
                .loss
            };
            let numeric = (f(&hi) - f(&lo)) / (2.0 * eps);
            let analytic = head_bias_grad[coord];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
            assert!(
                rel < 1e-3,
                "head bias[{coord}]: analytic {analytic} vs numeric {numeric}"
            );
        }
    }

    #[test]
    fn classifier_gradient_matches_finite_differences() {
        let (ds, _) = setup();
        let embedder = EmbeddingNetwork::new(4, &mut rng_from_seed(10));
        let ep = sample_episode(&ds, &ds.classes(), 2, 1, 1, &mut rng_from_seed(11)).unwrap();
        let out =
            episode_training_step(&embedder, None, &ep, None, None, false, true).unwrap();
        let grads = out.embedder_grads.unwrap();
        // Slot 2 is block0 bn gamma (conv.w, conv.b, bn.gamma, bn.beta).
        let gamma_grad = &grads[2];
        let eps = 1e-5;
        for coord in [0usize, 3] {
            let mut hi = embedder.clone();
            hi.backbone.blocks[0].bn.gamma[coord] += eps;
            let mut lo = embedder.clone();
            lo.backbone.blocks[0].bn.gamma[coord] -= eps;
            let f = |net: &EmbeddingNetwork| {
                episode_training_step(net, None, &ep, None, None, false, false)
                    .unwrap()
                    .loss
            };
            let numeric = (f(&hi) - f(&lo)) / (2.0 * eps);
            let analytic = gamma_grad[coord];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
            assert!(
                rel < 1e-3,
                "bn gamma[{coord}]: analytic {analytic} vs numeric {numeric}"
            );
        }
    }

    #[test]
    fn missing_lookup_with_fusion_is_a_config_error() {
        let (ds, _) = setup();
        let embedder = EmbeddingNetwork::new(4, &mut rng_from_seed(12));
        let fusion = FusionNetwork::new(3, 4, &mut rng_from_seed(13));
        let ep = sample_episode(&ds, &ds.classes(), 2, 1, 1, &mut rng_from_seed(14)).unwrap();
        let choices = vec![vec![0usize], vec![0usize]];
        let err = episode_training_step(
            &embedder,
            Some(&fusion),
            &ep,
            None,
            Some(&choices),
            false,
            false,
        )
        .unwrap_err();
        assert_eq!(err.exit_code(), 1);
        let _ = ClassId(0);
    }
}
