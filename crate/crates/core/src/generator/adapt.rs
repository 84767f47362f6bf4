//! Single-image generator adaptation: optimize the noise vector and the
//! batch-norm scale/shift producers under an L1 + perceptual +
//! earth-mover loss, then sample perturbed variants.

use super::perceptual::{perceptual_distance, FeatureExtractor};
use super::{BindMode, BnParamSet, BoundGenerator, FrozenGenerator, NoiseVector, ToyGenerator};
use crate::data::{ImageTensor, ValueRange};
use crate::error::{Error, Result};
use crate::nn::Adam;
use crate::rng::Rng;
use crate::tensor::Tape;
use ndarray::Array1;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::sync::Arc;

/// Adaptation hyperparameters. Defaults: perceptual and earth-mover
/// coefficients 0.1, 500 updates, learning rate 0.01 for the noise and
/// 0.0005 for the batch-norm producers, perturbation sigma 0.1 (one
/// tenth of the unit latent standard deviation), 10 cached variants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptConfig {
    pub lambda_p: f64,
    pub lambda_z: f64,
    pub steps: usize,
    pub lr_noise: f64,
    pub lr_bn: f64,
    pub perturb_sigma: f64,
    pub num_variants: usize,
    /// Ablation: optimize the noise only, leaving batch norm fixed.
    pub noise_only: bool,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            lambda_p: 0.1,
            lambda_z: 0.1,
            steps: 500,
            lr_noise: 0.01,
            lr_bn: 0.0005,
            perturb_sigma: 0.1,
            num_variants: 10,
            noise_only: false,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_p < 0.0
            || self.lambda_z < 0.0
            || self.steps == 0
            || self.lr_noise <= 0.0
            || self.lr_bn <= 0.0
            || self.perturb_sigma < 0.0
            || self.num_variants == 0
        {
            return Err(Error::config(format!("invalid adapt config: {self:?}")));
        }
        Ok(())
    }
}

/// One step of the adaptation loss trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub total: f64,
    pub l1: f64,
    pub perceptual: f64,
    pub em: f64,
}

/// Decomposed adaptation loss; `total = l1 + lambda_p * perceptual +
/// lambda_z * em` exactly as computed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub l1: f64,
    pub perceptual: f64,
    pub em: f64,
}

/// Result of adapting a generator to one target image.
#[derive(Debug, Clone)]
pub struct AdaptedGeneratorState {
    pub frozen: Arc<FrozenGenerator>,
    pub noise: NoiseVector,
    pub bn: BnParamSet,
    pub loss_trace: Vec<LossRecord>,
}

impl AdaptedGeneratorState {
    /// Reconstruction `G(z)` with the adapted parameters.
    pub fn reconstruct(&self) -> Result<ImageTensor> {
        super::generate_image(&self.frozen, &self.bn, &self.noise, ValueRange::UNIT_SIGNED)
    }
}

/// Exact 1-D earth mover distance: mean absolute difference of the
/// coordinate-sorted vectors.
pub fn em_regularizer(z: &[f64], r: &[f64]) -> Result<f64> {
    if z.len() != r.len() || z.is_empty() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} coordinates", z.len()),
            got: format!("{}", r.len()),
        });
    }
    let mut zs = z.to_vec();
    let mut rs = r.to_vec();
    zs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    rs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(zs
        .iter()
        .zip(rs.iter())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / z.len() as f64)
}

/// Mean absolute pixel difference.
fn l1_distance(a: &ImageTensor, b: &ImageTensor) -> f64 {
    let n = a.data().len() as f64;
    a.data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| (x - y).abs())
        .sum::<f64>()
        / n
}

/// The adaptation loss for an already-generated image:
/// `L1(generated, target) + lambda_p * perceptual + lambda_z * EM(z, r)`.
pub fn generator_loss(
    generated: &ImageTensor,
    target: &ImageTensor,
    z: &NoiseVector,
    r: &NoiseVector,
    extractor: &dyn FeatureExtractor,
    lambda_p: f64,
    lambda_z: f64,
) -> Result<LossBreakdown> {
    if (generated.height(), generated.width()) != (target.height(), target.width()) {
        return Err(Error::ShapeMismatch {
            expected: format!("{} x {}", target.height(), target.width()),
            got: format!("{} x {}", generated.height(), generated.width()),
        });
    }
    let l1 = l1_distance(generated, target);
    let perceptual = perceptual_distance(generated, target, extractor)?;
    let em = em_regularizer(
        z.concat().as_slice().unwrap(),
        r.concat().as_slice().unwrap(),
    )?;
    Ok(LossBreakdown {
        total: l1 + lambda_p * perceptual + lambda_z * em,
        l1,
        perceptual,
        em,
    })
}

/// Gradients of the adaptation loss for one step.
#[derive(Debug, Clone)]
pub struct AdaptGrads {
    pub latent: Vec<f64>,
    pub embedding: Vec<f64>,
    /// Aligned with [`BnParamSet::param_slices_mut`]; empty in
    /// noise-only mode.
    pub bn: Vec<Vec<f64>>,
}

fn forward_loss(
    frozen: &FrozenGenerator,
    bn: &BnParamSet,
    noise: &NoiseVector,
    target: &ImageTensor,
    target_features: &[ndarray::ArrayD<f64>],
    extractor: &dyn FeatureExtractor,
    r: &NoiseVector,
    lambda_p: f64,
    lambda_z: f64,
    mode: BindMode,
) -> Result<(Tape, crate::tensor::Var, LossBreakdown, AdaptVars)> {
    let mut tape = Tape::new();
    let bound = BoundGenerator::bind(&mut tape, frozen, bn, mode);
    let latent = tape.param(
        noise
            .latent
            .clone()
            .insert_axis(ndarray::Axis(0))
            .into_dyn(),
    );
    let embedding = tape.param(
        noise
            .class_embedding
            .clone()
            .insert_axis(ndarray::Axis(0))
            .into_dyn(),
    );
    let out = bound.apply(&mut tape, latent, embedding);

    let target_chw = target.to_chw();
    let (c, h, w) = target_chw.dim();
    let target_var = tape.constant(
        target_chw
            .into_shape_with_order((1, c, h, w))
            .unwrap()
            .into_dyn(),
    );
    let l1 = tape.l1_loss(out, target_var);

    let gen_features = extractor.features_tape(&mut tape, out);
    if gen_features.is_empty() {
        return Err(Error::data("feature extractor returned no feature maps"));
    }
    let mut layer_terms = Vec::with_capacity(gen_features.len());
    for (gf, tf) in gen_features.iter().zip(target_features.iter()) {
        let shape = tape.value(*gf).shape().to_vec();
        let tf_resh = tf
            .clone()
            .into_shape_with_order(ndarray::IxDyn(&shape))
            .map_err(|_| Error::ShapeMismatch {
                expected: format!("{:?}", shape),
                got: format!("{:?}", tf.shape()),
            })?;
        let tf_var = tape.constant(tf_resh);
        let diff = tape.sub(*gf, tf_var);
        let sq = tape.mul(diff, diff);
        layer_terms.push(tape.mean_all(sq));
    }
    let perceptual = tape.add_scalars(&layer_terms);

    let latent_dim = noise.latent.len();
    let embed_dim = noise.class_embedding.len();
    let noise_cat = tape.concat_cols(latent, embedding);
    let noise_flat = tape.reshape(noise_cat, &[latent_dim + embed_dim]);
    let em = tape.em_distance(noise_flat, r.concat().as_slice().unwrap());

    let scaled_p = tape.scale(perceptual, lambda_p);
    let scaled_em = tape.scale(em, lambda_z);
    let total = tape.add_scalars(&[l1, scaled_p, scaled_em]);

    let breakdown = LossBreakdown {
        total: tape.scalar(total),
        l1: tape.scalar(l1),
        perceptual: tape.scalar(perceptual),
        em: tape.scalar(em),
    };
    let vars = AdaptVars {
        latent,
        embedding,
        bn: bound.bn_vars(),
    };
    Ok((tape, total, breakdown, vars))
}

struct AdaptVars {
    latent: crate::tensor::Var,
    embedding: crate::tensor::Var,
    bn: Vec<crate::tensor::Var>,
}

/// Adaptation loss value for explicit parameters (used by gradient
/// checks; identical math to the training step).
pub fn adaptation_loss(
    frozen: &FrozenGenerator,
    bn: &BnParamSet,
    noise: &NoiseVector,
    target: &ImageTensor,
    extractor: &dyn FeatureExtractor,
    r: &NoiseVector,
    lambda_p: f64,
    lambda_z: f64,
) -> Result<LossBreakdown> {
    let target_features = extractor.features(target);
    let (_, _, breakdown, _) = forward_loss(
        frozen,
        bn,
        noise,
        target,
        &target_features,
        extractor,
        r,
        lambda_p,
        lambda_z,
        BindMode::AllFrozen,
    )?;
    Ok(breakdown)
}

/// Adaptation loss together with gradients for the noise and batch-norm
/// parameters.
pub fn adaptation_loss_and_grads(
    frozen: &FrozenGenerator,
    bn: &BnParamSet,
    noise: &NoiseVector,
    target: &ImageTensor,
    extractor: &dyn FeatureExtractor,
    r: &NoiseVector,
    lambda_p: f64,
    lambda_z: f64,
    noise_only: bool,
) -> Result<(LossBreakdown, AdaptGrads)> {
    let target_features = extractor.features(target);
    let mode = if noise_only {
        BindMode::BnFrozen
    } else {
        BindMode::BnTrainable
    };
    let (tape, total, breakdown, vars) = forward_loss(
        frozen,
        bn,
        noise,
        target,
        &target_features,
        extractor,
        r,
        lambda_p,
        lambda_z,
        mode,
    )?;
    let grads = tape.backward(total);
    let latent = crate::nn::grad_vec(&grads, vars.latent, noise.latent.len());
    let embedding = crate::nn::grad_vec(&grads, vars.embedding, noise.class_embedding.len());
    let bn_grads = if noise_only {
        Vec::new()
    } else {
        vars.bn
            .iter()
            .map(|&v| {
                let len = tape.value(v).len();
                crate::nn::grad_vec(&grads, v, len)
            })
            .collect()
    };
    Ok((
        breakdown,
        AdaptGrads {
            latent,
            embedding,
            bn: bn_grads,
        },
    ))
}

/// Adapt a generator to one target image: the latent and class embedding
/// are optimized with `lr_noise`, the batch-norm producers with `lr_bn`;
/// everything else stays frozen. The reference noise `r` is resampled
/// from the standard normal at every step.
pub fn adapt_generator_to_image(
    generator: &ToyGenerator,
    target: &ImageTensor,
    extractor: &dyn FeatureExtractor,
    config: &AdaptConfig,
    rng: &mut Rng,
) -> Result<AdaptedGeneratorState> {
    config.validate()?;
    if generator.bn.layers.is_empty() {
        return Err(Error::data(
            "generator exposes no batch normalization layers to adapt",
        ));
    }
    let size = generator.image_size();
    if target.height() != size || target.width() != size {
        return Err(Error::ShapeMismatch {
            expected: format!("{size} x {size}"),
            got: format!("{} x {}", target.height(), target.width()),
        });
    }
    let arch = &generator.frozen.arch;
    let dist = Normal::new(0.0, 1.0).unwrap();
    let mut noise = NoiseVector {
        latent: Array1::from_shape_simple_fn(arch.latent_dim, || dist.sample(rng)),
        class_embedding: generator.frozen.mean_embedding(),
    };
    let mut bn = generator.bn.clone();
    let mut opt_noise = Adam::new(config.lr_noise);
    let mut opt_bn = Adam::new(config.lr_bn);
    let target_features = extractor.features(target);
    if target_features.is_empty() {
        return Err(Error::data("feature extractor returned no feature maps"));
    }
    let mut loss_trace = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let r = NoiseVector::sample_standard(arch.latent_dim, arch.embed_dim, rng);
        let mode = if config.noise_only {
            BindMode::BnFrozen
        } else {
            BindMode::BnTrainable
        };
        let (tape, total, breakdown, vars) = forward_loss(
            &generator.frozen,
            &bn,
            &noise,
            target,
            &target_features,
            extractor,
            &r,
            config.lambda_p,
            config.lambda_z,
            mode,
        )?;
        if !breakdown.total.is_finite() {
            return Err(Error::numerical(format!(
                "adaptation loss became non-finite at step {step}"
            )));
        }
        loss_trace.push(LossRecord {
            step,
            total: breakdown.total,
            l1: breakdown.l1,
            perceptual: breakdown.perceptual,
            em: breakdown.em,
        });
        let grads = tape.backward(total);
        let g_latent = crate::nn::grad_vec(&grads, vars.latent, arch.latent_dim);
        let g_embed = crate::nn::grad_vec(&grads, vars.embedding, arch.embed_dim);
        opt_noise.step(
            vec![
                noise.latent.as_slice_mut().unwrap(),
                noise.class_embedding.as_slice_mut().unwrap(),
            ],
            &[g_latent, g_embed],
        );
        if !config.noise_only {
            let bn_grads: Vec<Vec<f64>> = vars
                .bn
                .iter()
                .map(|&v| {
                    let len = tape.value(v).len();
                    crate::nn::grad_vec(&grads, v, len)
                })
                .collect();
            opt_bn.step(bn.param_slices_mut(), &bn_grads);
        }
        if !noise.is_finite() {
            return Err(Error::numerical(format!(
                "noise vector became non-finite after step {step}"
            )));
        }
    }
    Ok(AdaptedGeneratorState {
        frozen: Arc::new(generator.frozen.clone()),
        noise,
        bn,
        loss_trace,
    })
}

/// Sample `k` images `G(z + eps)` with `eps ~ N(0, sigma^2)` over the
/// whole noise vector. Sigma 0 reproduces the reconstruction `k` times.
pub fn sample_perturbed_images(
    state: &AdaptedGeneratorState,
    sigma: f64,
    k: usize,
    rng: &mut Rng,
) -> Result<Vec<ImageTensor>> {
    if k == 0 {
        return Err(Error::config("variant count k must be at least 1"));
    }
    if sigma < 0.0 {
        return Err(Error::config("perturbation sigma must be non-negative"));
    }
    let mut out = Vec::with_capacity(k);
    for _ in 0..k {
        let noise = if sigma == 0.0 {
            state.noise.clone()
        } else {
            let dist = Normal::new(0.0, sigma).unwrap();
            NoiseVector {
                latent: &state.noise.latent
                    + &Array1::from_shape_simple_fn(state.noise.latent.len(), || {
                        dist.sample(rng)
                    }),
                class_embedding: &state.noise.class_embedding
                    + &Array1::from_shape_simple_fn(state.noise.class_embedding.len(), || {
                        dist.sample(rng)
                    }),
            }
        };
        out.push(super::generate_image(
            &state.frozen,
            &state.bn,
            &noise,
            ValueRange::UNIT_SIGNED,
        )?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{ClassId, ValueRange};
    use crate::generator::{GeneratorArch, IdentityExtractor, ToyPerceptualNet};
    use crate::rng::rng_from_seed;
    use ndarray::Array3;
    use rand::Rng as _;
    use std::collections::BTreeSet;

    fn classes() -> BTreeSet<ClassId> {
        (0..2).map(ClassId).collect()
    }

    fn toy_gen(size: usize, seed: u64) -> ToyGenerator {
        ToyGenerator::new(GeneratorArch::toy(size), &classes(), &mut rng_from_seed(seed)).unwrap()
    }

    fn random_image(size: usize, seed: u64) -> ImageTensor {
        let mut rng = rng_from_seed(seed);
        ImageTensor::new(
            Array3::from_shape_simple_fn((size, size, 3), || rng.random_range(-0.9..0.9)),
            ValueRange::UNIT_SIGNED,
        )
        .unwrap()
    }

    #[test]
    fn default_config_matches_published_settings() {
        let cfg = AdaptConfig::default();
        assert_eq!(cfg.lambda_p, 0.1);
        assert_eq!(cfg.lambda_z, 0.1);
        assert_eq!(cfg.steps, 500);
        assert_eq!(cfg.lr_noise, 0.01);
        assert_eq!(cfg.lr_bn, 0.0005);
        assert_eq!(cfg.num_variants, 10);
    }

    #[test]
    fn em_regularizer_examples() {
        assert_eq!(em_regularizer(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(em_regularizer(&[1.0, 2.0], &[2.0, 1.0]).unwrap(), 0.0);
        assert_eq!(em_regularizer(&[0.0, 0.0], &[1.0, 1.0]).unwrap(), 1.0);
        assert!(em_regularizer(&[1.0], &[1.0, 2.0]).is_err());
    }

    /// Minimum mean-cost perfect matching by exhaustive permutation.
    fn em_brute_force(z: &[f64], r: &[f64]) -> f64 {
        fn permutations(n: usize) -> Vec<Vec<usize>> {
            if n == 1 {
                return vec![vec![0]];
            }
            let mut out = Vec::new();
            for p in permutations(n - 1) {
                for slot in 0..n {
                    let mut q: Vec<usize> = p.iter().map(|&v| if v >= slot { v + 1 } else { v }).collect();
                    q.insert(0, slot);
                    out.push(q);
                }
            }
            out
        }
        permutations(z.len())
            .into_iter()
            .map(|perm| {
                perm.iter()
                    .enumerate()
                    .map(|(i, &j)| (z[i] - r[j]).abs())
                    .sum::<f64>()
                    / z.len() as f64
            })
            .fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn em_matches_permutation_brute_force_up_to_dim_6() {
        let mut rng = rng_from_seed(7);
        for d in 2..=6 {
            for _ in 0..20 {
                let z: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
                let r: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
                let fast = em_regularizer(&z, &r).unwrap();
                let slow = em_brute_force(&z, &r);
                assert!(
                    (fast - slow).abs() < 1e-12,
                    "d={d}: sorted {fast} vs brute force {slow}"
                );
            }
        }
    }

    #[test]
    fn generator_loss_vanishes_for_perfect_reconstruction() {
        let img = random_image(8, 1);
        let mut rng = rng_from_seed(2);
        let z = NoiseVector::sample_standard(4, 4, &mut rng);
        let loss = generator_loss(&img, &img, &z, &z, &IdentityExtractor, 0.1, 0.1).unwrap();
        assert_eq!(loss.total, 0.0);
        assert_eq!(loss.l1, 0.0);
        assert_eq!(loss.perceptual, 0.0);
        assert_eq!(loss.em, 0.0);
    }

    #[test]
    fn zero_coefficients_isolate_the_l1_term() {
        let a = random_image(8, 3);
        let b = random_image(8, 4);
        let mut rng = rng_from_seed(5);
        let z = NoiseVector::sample_standard(4, 4, &mut rng);
        let r = NoiseVector::sample_standard(4, 4, &mut rng);
        let loss = generator_loss(&a, &b, &z, &r, &IdentityExtractor, 0.0, 0.0).unwrap();
        let expect: f64 = a
            .data()
            .iter()
            .zip(b.data().iter())
            .map(|(&x, &y)| (x - y).abs())
            .sum::<f64>()
            / a.data().len() as f64;
        assert!((loss.total - expect).abs() < 1e-15);
    }

    #[test]
    fn hand_computed_toy_pair_matches() {
        // 2x2 images with each channel constant per pixel; identity
        // extractor. Hand oracle: mean |a-b| + lambda_p * mean (a-b)^2.
        let vals_a = [0.8, -0.4, 0.2, 0.6];
        let vals_b = [0.3, 0.1, -0.2, 0.6];
        let mk = |vals: [f64; 4]| {
            let mut data = Array3::<f64>::zeros((2, 2, 3));
            for y in 0..2 {
                for x in 0..2 {
                    for c in 0..3 {
                        data[[y, x, c]] = vals[y * 2 + x];
                    }
                }
            }
            ImageTensor::new(data, ValueRange::UNIT_SIGNED).unwrap()
        };
        let a = mk(vals_a);
        let b = mk(vals_b);
        let mut hand_l1 = 0.0;
        let mut hand_sq = 0.0;
        for i in 0..4 {
            hand_l1 += (vals_a[i] - vals_b[i]).abs();
            hand_sq += (vals_a[i] - vals_b[i]) * (vals_a[i] - vals_b[i]);
        }
        hand_l1 /= 4.0;
        hand_sq /= 4.0;
        let z = NoiseVector {
            latent: ndarray::arr1(&[0.0]),
            class_embedding: ndarray::arr1(&[0.0]),
        };
        let lambda_p = 0.7;
        let loss = generator_loss(&a, &b, &z, &z, &IdentityExtractor, lambda_p, 0.5).unwrap();
        assert!((loss.l1 - hand_l1).abs() < 1e-12);
        assert!((loss.perceptual - hand_sq).abs() < 1e-12);
        assert!((loss.total - (hand_l1 + lambda_p * hand_sq)).abs() < 1e-12);
    }

    #[test]
    fn adaptation_reduces_loss_and_freezes_backbone() {
        let gen = toy_gen(16, 10);
        let target = random_image(16, 11);
        let mut rng = rng_from_seed(12);
        let extractor = ToyPerceptualNet::new(&mut rng_from_seed(99));
        let cfg = AdaptConfig {
            steps: 50,
            ..AdaptConfig::default()
        };
        let before = gen.frozen.weight_snapshot();
        let state = adapt_generator_to_image(&gen, &target, &extractor, &cfg, &mut rng).unwrap();
        assert_eq!(state.loss_trace.len(), 50);
        assert!(
            state.loss_trace.last().unwrap().total < state.loss_trace[0].total,
            "final {} !< initial {}",
            state.loss_trace.last().unwrap().total,
            state.loss_trace[0].total
        );
        // Freezing contract: non-BN weights untouched, element-wise.
        let after = gen.frozen.weight_snapshot();
        assert_eq!(before, after);
        let state_weights = state.frozen.weight_snapshot();
        assert_eq!(before, state_weights);
    }

    #[test]
    fn loss_decomposition_is_exact_along_the_trace() {
        let gen = toy_gen(16, 20);
        let target = random_image(16, 21);
        let extractor = ToyPerceptualNet::new(&mut rng_from_seed(98));
        let cfg = AdaptConfig {
            steps: 5,
            ..AdaptConfig::default()
        };
        let state =
            adapt_generator_to_image(&gen, &target, &extractor, &cfg, &mut rng_from_seed(1))
                .unwrap();
        for rec in &state.loss_trace {
            let recomposed = rec.l1 + cfg.lambda_p * rec.perceptual + cfg.lambda_z * rec.em;
            assert_eq!(rec.total, recomposed);
        }
    }

    #[test]
    fn noise_only_mode_leaves_bn_untouched() {
        let gen = toy_gen(16, 30);
        let target = random_image(16, 31);
        let extractor = ToyPerceptualNet::new(&mut rng_from_seed(97));
        let cfg = AdaptConfig {
            steps: 10,
            noise_only: true,
            ..AdaptConfig::default()
        };
        let state =
            adapt_generator_to_image(&gen, &target, &extractor, &cfg, &mut rng_from_seed(2))
                .unwrap();
        let mut orig_bn = gen.bn.clone();
        let mut state_bn = state.bn.clone();
        let a: Vec<f64> = orig_bn
            .param_slices_mut()
            .into_iter()
            .flat_map(|s| s.to_vec())
            .collect();
        let b: Vec<f64> = state_bn
            .param_slices_mut()
            .into_iter()
            .flat_map(|s| s.to_vec())
            .collect();
        assert_eq!(a, b);
    }

    #[test]
    fn generator_without_bn_is_rejected() {
        let mut arch = GeneratorArch::toy(16);
        arch.use_batch_norm = false;
        let gen = ToyGenerator::new(arch, &classes(), &mut rng_from_seed(3)).unwrap();
        let target = random_image(16, 40);
        let extractor = IdentityExtractor;
        let err = adapt_generator_to_image(
            &gen,
            &target,
            &extractor,
            &AdaptConfig::default(),
            &mut rng_from_seed(4),
        )
        .unwrap_err();
        assert!(err.to_string().contains("batch normalization"));
    }

    #[test]
    fn non_finite_loss_aborts_with_step_index() {
        struct NanExtractor;
        impl FeatureExtractor for NanExtractor {
            fn features(&self, image: &ImageTensor) -> Vec<ndarray::ArrayD<f64>> {
                vec![image.to_chw().into_dyn()]
            }
            fn features_tape(
                &self,
                tape: &mut Tape,
                image: crate::tensor::Var,
            ) -> Vec<crate::tensor::Var> {
                let nan = tape.constant(ndarray::ArrayD::from_elem(
                    tape.value(image).raw_dim(),
                    f64::NAN,
                ));
                vec![tape.mul(image, nan)]
            }
        }
        let gen = toy_gen(16, 50);
        let target = random_image(16, 51);
        let err = adapt_generator_to_image(
            &gen,
            &target,
            &NanExtractor,
            &AdaptConfig {
                steps: 3,
                ..AdaptConfig::default()
            },
            &mut rng_from_seed(5),
        )
        .unwrap_err();
        assert!(err.to_string().contains("step 0"), "got: {err}");
    }

    #[test]
    fn perturbed_sampling_counts_and_determinism() {
        let gen = toy_gen(16, 60);
        let target = random_image(16, 61);
        let extractor = ToyPerceptualNet::new(&mut rng_from_seed(96));
        let cfg = AdaptConfig {
            steps: 5,
            ..AdaptConfig::default()
        };
        let state =
            adapt_generator_to_image(&gen, &target, &extractor, &cfg, &mut rng_from_seed(6))
                .unwrap();

        let ten = sample_perturbed_images(&state, 0.1, 10, &mut rng_from_seed(7)).unwrap();
        assert_eq!(ten.len(), 10);

        let frozen = sample_perturbed_images(&state, 0.0, 3, &mut rng_from_seed(8)).unwrap();
        assert_eq!(frozen[0].data(), frozen[1].data());
        assert_eq!(frozen[1].data(), frozen[2].data());

        let a = sample_perturbed_images(&state, 0.2, 4, &mut rng_from_seed(9)).unwrap();
        let b = sample_perturbed_images(&state, 0.2, 4, &mut rng_from_seed(9)).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.data(), y.data());
        }
    }

    #[test]
    fn adaptation_gradients_match_finite_differences() {
        // Spot-check a few coordinates of z, gamma-producer, and
        // beta-producer gradients against central differences.
        let gen = toy_gen(16, 70);
        let target = random_image(16, 71);
        let extractor = ToyPerceptualNet::new(&mut rng_from_seed(95));
        let mut rng = rng_from_seed(72);
        let noise = NoiseVector {
            latent: Array1::from_shape_simple_fn(gen.frozen.arch.latent_dim, || {
                rng.random_range(-0.5..0.5)
            }),
            class_embedding: gen.frozen.mean_embedding(),
        };
        let r = NoiseVector::sample_standard(
            gen.frozen.arch.latent_dim,
            gen.frozen.arch.embed_dim,
            &mut rng,
        );
        let (_, grads) = adaptation_loss_and_grads(
            &gen.frozen,
            &gen.bn,
            &noise,
            &target,
            &extractor,
            &r,
            0.1,
            0.1,
            false,
        )
        .unwrap();
        let eps = 1e-5;
        // Latent coordinates.
        for &i in &[0usize, 3, 7] {
            let mut hi = noise.clone();
            hi.latent[i] += eps;
            let mut lo = noise.clone();
            lo.latent[i] -= eps;
            let fhi = adaptation_loss(&gen.frozen, &gen.bn, &hi, &target, &extractor, &r, 0.1, 0.1)
                .unwrap()
                .total;
            let flo = adaptation_loss(&gen.frozen, &gen.bn, &lo, &target, &extractor, &r, 0.1, 0.1)
                .unwrap()
                .total;
            let numeric = (fhi - flo) / (2.0 * eps);
            let analytic = grads.latent[i];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
            assert!(rel < 1e-3, "latent[{i}]: analytic {analytic} vs numeric {numeric}");
        }
        // One bn-producer coordinate per slot kind.
        let mut bn_probe = gen.bn.clone();
        let flat_index = 1usize;
        for slot in 0..grads.bn.len().min(4) {
            let base = {
                let slices = bn_probe.param_slices_mut();
                slices[slot][flat_index]
            };
            let set = |v: f64, bn_set: &mut BnParamSet| {
                let mut slices = bn_set.param_slices_mut();
                slices[slot][flat_index] = v;
            };
            let mut hi = gen.bn.clone();
            set(base + eps, &mut hi);
            let mut lo = gen.bn.clone();
            set(base - eps, &mut lo);
            let fhi =
                adaptation_loss(&gen.frozen, &hi, &noise, &target, &extractor, &r, 0.1, 0.1)
                    .unwrap()
                    .total;
            let flo =
                adaptation_loss(&gen.frozen, &lo, &noise, &target, &extractor, &r, 0.1, 0.1)
                    .unwrap()
                    .total;
            let numeric = (fhi - flo) / (2.0 * eps);
            let analytic = grads.bn[slot][flat_index];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
            assert!(
                rel < 1e-3,
                "bn slot {slot}: analytic {analytic} vs numeric {numeric}"
            );
        }
    }
}
