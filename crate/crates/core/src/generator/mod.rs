//! Conditional generator with batch-norm modulation, plus single-image
//! adaptation of its noise and batch-norm scale/shift parameters.
//!
//! The toy generator is a small conditional transposed-convolution stack
//! at reduced channel width, scratch-trainable by per-class
//! reconstruction. Full-scale pretrained generators are external inputs
//! loaded from checkpoint files with the same layout.

mod adapt;
pub mod perceptual;

pub use adapt::{
    adapt_generator_to_image, adaptation_loss, adaptation_loss_and_grads, em_regularizer,
    generator_loss, sample_perturbed_images, AdaptConfig, AdaptGrads, AdaptedGeneratorState,
    LossBreakdown, LossRecord,
};
pub use perceptual::{perceptual_distance, FeatureExtractor, IdentityExtractor, ToyPerceptualNet};

use crate::data::{ClassId, Dataset, ImageTensor, ValueRange};
use crate::error::{Error, Result};
use crate::nn::{Adam, BoundConv2d, BoundConvTranspose2d, BoundLinear, Conv2d, ConvTranspose2d, Linear};
use crate::rng::Rng;
use crate::tensor::{Tape, Var};
use ndarray::{Array1, Array2, Ix4};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

/// The generator input `z`: the latent vector together with the
/// class-conditional embedding, optimized jointly as one noise input.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseVector {
    pub latent: Array1<f64>,
    pub class_embedding: Array1<f64>,
}

impl NoiseVector {
    pub fn dim(&self) -> usize {
        self.latent.len() + self.class_embedding.len()
    }

    /// `[latent | class_embedding]` as one vector.
    pub fn concat(&self) -> Array1<f64> {
        let mut out = Array1::<f64>::zeros(self.dim());
        for (i, &v) in self.latent.iter().enumerate() {
            out[i] = v;
        }
        for (i, &v) in self.class_embedding.iter().enumerate() {
            out[self.latent.len() + i] = v;
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.latent.iter().all(|v| v.is_finite())
            && self.class_embedding.iter().all(|v| v.is_finite())
    }

    /// Standard-normal noise of the same shape.
    pub fn sample_standard(latent_dim: usize, embed_dim: usize, rng: &mut Rng) -> Self {
        let dist = Normal::new(0.0, 1.0).unwrap();
        NoiseVector {
            latent: Array1::from_shape_simple_fn(latent_dim, || dist.sample(rng)),
            class_embedding: Array1::from_shape_simple_fn(embed_dim, || dist.sample(rng)),
        }
    }
}

/// Trainable batch-norm modulation for one layer: either free (gamma,
/// beta) vectors, or fully-connected producers mapping the class
/// embedding to them (conditional batch norm).
#[derive(Debug, Clone)]
pub enum BnModulation {
    Direct {
        gamma: Array1<f64>,
        beta: Array1<f64>,
    },
    Conditional {
        /// gamma = 1 + embedding . w_gamma + b_gamma
        w_gamma: Array2<f64>,
        b_gamma: Array1<f64>,
        /// beta = embedding . w_beta + b_beta
        w_beta: Array2<f64>,
        b_beta: Array1<f64>,
    },
}

impl BnModulation {
    pub fn direct(channels: usize) -> Self {
        BnModulation::Direct {
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
        }
    }

    pub fn conditional(embed_dim: usize, channels: usize) -> Self {
        BnModulation::Conditional {
            w_gamma: Array2::zeros((embed_dim, channels)),
            b_gamma: Array1::zeros(channels),
            w_beta: Array2::zeros((embed_dim, channels)),
            b_beta: Array1::zeros(channels),
        }
    }

    pub fn channels(&self) -> usize {
        match self {
            BnModulation::Direct { gamma, .. } => gamma.len(),
            BnModulation::Conditional { b_gamma, .. } => b_gamma.len(),
        }
    }

    /// Effective (gamma, beta) for a given class embedding.
    pub fn effective(&self, embedding: &Array1<f64>) -> (Array1<f64>, Array1<f64>) {
        match self {
            BnModulation::Direct { gamma, beta } => (gamma.clone(), beta.clone()),
            BnModulation::Conditional {
                w_gamma,
                b_gamma,
                w_beta,
                b_beta,
            } => {
                let e = embedding.view().insert_axis(ndarray::Axis(0));
                let gamma = e.dot(w_gamma).remove_axis(ndarray::Axis(0)) + b_gamma + 1.0;
                let beta = e.dot(w_beta).remove_axis(ndarray::Axis(0)) + b_beta;
                (gamma, beta)
            }
        }
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            BnModulation::Direct { gamma, beta } => vec![
                gamma.as_slice_mut().unwrap(),
                beta.as_slice_mut().unwrap(),
            ],
            BnModulation::Conditional {
                w_gamma,
                b_gamma,
                w_beta,
                b_beta,
            } => vec![
                w_gamma.as_slice_mut().unwrap(),
                b_gamma.as_slice_mut().unwrap(),
                w_beta.as_slice_mut().unwrap(),
                b_beta.as_slice_mut().unwrap(),
            ],
        }
    }
}

/// Per-layer batch-norm modulation parameters plus the fixed numerical
/// stability constant inside the normalization. The constant is never
/// trained and is distinct from the latent perturbation sigma.
#[derive(Debug, Clone)]
pub struct BnParamSet {
    pub layers: Vec<BnModulation>,
    pub eps: f64,
}

impl BnParamSet {
    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.param_slices_mut())
            .collect()
    }
}

/// Generator architecture description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorArch {
    pub latent_dim: usize,
    pub embed_dim: usize,
    /// Channel width of the last up-sampling block; earlier blocks are
    /// wider by powers of two.
    pub base_width: usize,
    pub image_size: usize,
    /// Batch-norm scale/shift produced by FC maps from the class
    /// embedding (conditional batch norm) rather than free vectors.
    pub conditional_bn: bool,
    /// Disabled only to exercise the no-batch-norm error path.
    pub use_batch_norm: bool,
}

impl GeneratorArch {
    pub fn toy(image_size: usize) -> Self {
        GeneratorArch {
            latent_dim: 16,
            embed_dim: 16,
            base_width: 8,
            image_size,
            conditional_bn: true,
            use_batch_norm: true,
        }
    }

    pub fn num_blocks(&self) -> Result<usize> {
        let ratio = self.image_size / 4;
        if self.image_size < 8 || !ratio.is_power_of_two() || ratio * 4 != self.image_size {
            return Err(Error::config(format!(
                "generator image size {} must be 4 * 2^k with k >= 1",
                self.image_size
            )));
        }
        Ok(ratio.trailing_zeros() as usize)
    }

    /// Output channels of block `k` (0-based); the stack halves widths
    /// down to `base_width`.
    fn block_channels(&self, blocks: usize) -> Vec<usize> {
        (0..blocks)
            .map(|k| self.base_width * (1 << (blocks - 1 - k).min(3)))
            .collect()
    }
}

/// The pretrained weights that stay frozen during adaptation: the dense
/// stem, the transposed-conv stack, the output conv, and the class
/// embedding table.
#[derive(Debug, Clone)]
pub struct FrozenGenerator {
    pub arch: GeneratorArch,
    pub fc: Linear,
    pub blocks: Vec<ConvTranspose2d>,
    pub final_conv: Conv2d,
    /// One embedding row per class seen at (scratch) pretraining time.
    pub embeddings: Array2<f64>,
    pub class_ids: Vec<ClassId>,
}

impl FrozenGenerator {
    fn stem_channels(&self) -> usize {
        self.fc.weight.dim().1 / 16
    }

    /// Mean embedding row: the initialization point for adapting to an
    /// image of an unseen class.
    pub fn mean_embedding(&self) -> Array1<f64> {
        let k = self.embeddings.nrows() as f64;
        self.embeddings.sum_axis(ndarray::Axis(0)) / k
    }

    pub fn embedding_for(&self, class: ClassId) -> Option<Array1<f64>> {
        self.class_ids
            .iter()
            .position(|&c| c == class)
            .map(|i| self.embeddings.row(i).to_owned())
    }

    /// Flat snapshot of every frozen weight, for freezing-contract checks.
    pub fn weight_snapshot(&self) -> Vec<f64> {
        let mut out = Vec::new();
        out.extend(self.fc.weight.iter());
        out.extend(self.fc.bias.iter());
        for b in &self.blocks {
            out.extend(b.weight.iter());
            out.extend(b.bias.iter());
        }
        out.extend(self.final_conv.weight.iter());
        out.extend(self.final_conv.bias.iter());
        out.extend(self.embeddings.iter());
        out
    }
}

/// Frozen weights plus the trainable batch-norm modulation set.
#[derive(Debug, Clone)]
pub struct ToyGenerator {
    pub frozen: FrozenGenerator,
    pub bn: BnParamSet,
}

impl ToyGenerator {
    pub fn new(arch: GeneratorArch, classes: &BTreeSet<ClassId>, rng: &mut Rng) -> Result<Self> {
        let blocks_n = arch.num_blocks()?;
        let chans = arch.block_channels(blocks_n);
        let stem = chans[0] * 2;
        let fc = Linear::new(arch.latent_dim + arch.embed_dim, 16 * stem, rng);
        let mut blocks = Vec::with_capacity(blocks_n);
        let mut bn_layers = Vec::with_capacity(blocks_n);
        let mut cin = stem;
        for &cout in &chans {
            blocks.push(ConvTranspose2d::new(cin, cout, 4, 2, 1, rng));
            if arch.use_batch_norm {
                bn_layers.push(if arch.conditional_bn {
                    BnModulation::conditional(arch.embed_dim, cout)
                } else {
                    BnModulation::direct(cout)
                });
            }
            cin = cout;
        }
        let final_conv = Conv2d::new(cin, 3, 3, 1, 1, rng);
        let dist = Normal::new(0.0, 1.0).unwrap();
        let class_ids: Vec<ClassId> = classes.iter().copied().collect();
        let embeddings =
            Array2::from_shape_simple_fn((class_ids.len().max(1), arch.embed_dim), || {
                dist.sample(rng)
            });
        Ok(ToyGenerator {
            frozen: FrozenGenerator {
                arch,
                fc,
                blocks,
                final_conv,
                embeddings,
                class_ids,
            },
            bn: BnParamSet {
                layers: bn_layers,
                eps: 1e-5,
            },
        })
    }

    pub fn image_size(&self) -> usize {
        self.frozen.arch.image_size
    }

    /// Reconstruction `G(z)` for a single noise vector.
    pub fn generate(&self, noise: &NoiseVector, range: ValueRange) -> Result<ImageTensor> {
        generate_image(&self.frozen, &self.bn, noise, range)
    }
}

/// Pure forward `G(z)` for the given frozen weights and modulation set.
pub fn generate_image(
    frozen: &FrozenGenerator,
    bn: &BnParamSet,
    noise: &NoiseVector,
    range: ValueRange,
) -> Result<ImageTensor> {
    let mut tape = Tape::new();
    let bound = BoundGenerator::bind(&mut tape, frozen, bn, BindMode::AllFrozen);
    let latent = tape.constant(
        noise
            .latent
            .clone()
            .insert_axis(ndarray::Axis(0))
            .into_dyn(),
    );
    let embedding = tape.constant(
        noise
            .class_embedding
            .clone()
            .insert_axis(ndarray::Axis(0))
            .into_dyn(),
    );
    let out = bound.apply(&mut tape, latent, embedding);
    let batch = tape
        .value(out)
        .view()
        .into_dimensionality::<Ix4>()
        .unwrap()
        .to_owned();
    let chw = batch.index_axis(ndarray::Axis(0), 0).to_owned();
    ImageTensor::from_chw(&chw, range)
}

/// Which parameter groups receive gradients when binding the generator
/// onto a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BindMode {
    /// Everything constant (pure inference).
    AllFrozen,
    /// Batch-norm modulation trainable, backbone frozen (adaptation).
    BnTrainable,
    /// Backbone constant, batch norm constant (noise-only ablation).
    BnFrozen,
    /// Everything trainable (scratch pretraining).
    AllTrainable,
}

/// Batch-norm modulation bound onto a tape.
pub enum BoundBnLayer {
    Direct { gamma: Var, beta: Var },
    Conditional { wg: Var, bg: Var, wb: Var, bb: Var },
}

impl BoundBnLayer {
    fn bind(tape: &mut Tape, layer: &BnModulation, trainable: bool) -> Self {
        let mut put = |arr: ndarray::ArrayD<f64>| {
            if trainable {
                tape.param(arr)
            } else {
                tape.constant(arr)
            }
        };
        match layer {
            BnModulation::Direct { gamma, beta } => BoundBnLayer::Direct {
                gamma: put(gamma.clone().into_dyn()),
                beta: put(beta.clone().into_dyn()),
            },
            BnModulation::Conditional {
                w_gamma,
                b_gamma,
                w_beta,
                b_beta,
            } => BoundBnLayer::Conditional {
                wg: put(w_gamma.clone().into_dyn()),
                bg: put(b_gamma.clone().into_dyn()),
                wb: put(w_beta.clone().into_dyn()),
                bb: put(b_beta.clone().into_dyn()),
            },
        }
    }

    /// Effective per-channel (gamma, beta) nodes given the `[1,E]`
    /// embedding node.
    fn gamma_beta(&self, tape: &mut Tape, embedding: Var, channels: usize) -> (Var, Var) {
        match self {
            BoundBnLayer::Direct { gamma, beta } => (*gamma, *beta),
            BoundBnLayer::Conditional { wg, bg, wb, bb } => {
                let ones = tape.constant(Array1::<f64>::ones(channels).into_dyn());
                let g_row = tape.matmul(embedding, *wg);
                let g_vec = tape.reshape(g_row, &[channels]);
                let g_off = tape.add(g_vec, *bg);
                let gamma = tape.add(g_off, ones);
                let b_row = tape.matmul(embedding, *wb);
                let b_vec = tape.reshape(b_row, &[channels]);
                let beta = tape.add(b_vec, *bb);
                (gamma, beta)
            }
        }
    }

    pub fn vars(&self) -> Vec<Var> {
        match self {
            BoundBnLayer::Direct { gamma, beta } => vec![*gamma, *beta],
            BoundBnLayer::Conditional { wg, bg, wb, bb } => vec![*wg, *bg, *wb, *bb],
        }
    }
}

/// Generator bound onto a tape.
pub struct BoundGenerator {
    pub fc: BoundLinear,
    pub blocks: Vec<BoundConvTranspose2d>,
    pub bn: Vec<BoundBnLayer>,
    pub final_conv: BoundConv2d,
    pub embeddings_table: Option<Var>,
    stem_channels: usize,
    eps: f64,
}

impl BoundGenerator {
    pub fn bind(
        tape: &mut Tape,
        frozen: &FrozenGenerator,
        bn_params: &BnParamSet,
        mode: BindMode,
    ) -> Self {
        let backbone_trainable = mode == BindMode::AllTrainable;
        let bn_trainable = matches!(mode, BindMode::BnTrainable | BindMode::AllTrainable);
        let fc = if backbone_trainable {
            frozen.fc.bind(tape)
        } else {
            frozen.fc.bind_const(tape)
        };
        let blocks = frozen
            .blocks
            .iter()
            .map(|b| {
                if backbone_trainable {
                    b.bind(tape)
                } else {
                    b.bind_const(tape)
                }
            })
            .collect();
        let bn = bn_params
            .layers
            .iter()
            .map(|l| BoundBnLayer::bind(tape, l, bn_trainable))
            .collect();
        let final_conv = if backbone_trainable {
            frozen.final_conv.bind(tape)
        } else {
            frozen.final_conv.bind_const(tape)
        };
        let embeddings_table = if backbone_trainable {
            Some(tape.param(frozen.embeddings.clone().into_dyn()))
        } else {
            None
        };
        BoundGenerator {
            fc,
            blocks,
            bn,
            final_conv,
            embeddings_table,
            stem_channels: frozen.stem_channels(),
            eps: bn_params.eps,
        }
    }

    /// Forward `latents [N,Lz]` with a shared `[1,E]` class embedding to
    /// images `[N,3,H,W]` in (-1,1) via tanh.
    pub fn apply(&self, tape: &mut Tape, latents: Var, embedding: Var) -> Var {
        let n = tape.value(latents).shape()[0];
        let ones = tape.constant(Array2::<f64>::ones((n, 1)).into_dyn());
        let embedding_rows = tape.matmul(ones, embedding);
        let input = tape.concat_cols(latents, embedding_rows);
        let stem = self.fc.apply(tape, input);
        let mut cur = tape.reshape(stem, &[n, self.stem_channels, 4, 4]);
        for (i, block) in self.blocks.iter().enumerate() {
            cur = block.apply(tape, cur);
            if let Some(bn) = self.bn.get(i) {
                let channels = tape.value(cur).shape()[1];
                let (gamma, beta) = bn.gamma_beta(tape, embedding, channels);
                let (normed, _) = tape.batchnorm2d(cur, gamma, beta, self.eps);
                cur = normed;
            }
            cur = tape.relu(cur);
        }
        cur = self.final_conv.apply(tape, cur);
        tape.tanh(cur)
    }

    /// Batch-norm parameter vars, in [`BnParamSet::param_slices_mut`]
    /// order.
    pub fn bn_vars(&self) -> Vec<Var> {
        self.bn.iter().flat_map(|l| l.vars()).collect()
    }

    /// Backbone vars for scratch training, matching
    /// [`ToyGenerator::scratch_param_slices_mut`] order.
    pub fn scratch_vars(&self) -> Vec<Var> {
        let mut out = vec![self.fc.w, self.fc.b];
        for b in &self.blocks {
            out.push(b.w);
            out.push(b.b);
        }
        out.push(self.final_conv.w);
        out.push(self.final_conv.b);
        out.extend(self.bn_vars());
        if let Some(t) = self.embeddings_table {
            out.push(t);
        }
        out
    }
}

impl ToyGenerator {
    /// Parameter views aligned with [`BoundGenerator::scratch_vars`].
    pub fn scratch_param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        out.push(self.frozen.fc.weight.as_slice_mut().unwrap());
        out.push(self.frozen.fc.bias.as_slice_mut().unwrap());
        for b in &mut self.frozen.blocks {
            out.push(b.weight.as_slice_mut().unwrap());
            out.push(b.bias.as_slice_mut().unwrap());
        }
        out.push(self.frozen.final_conv.weight.as_slice_mut().unwrap());
        out.push(self.frozen.final_conv.bias.as_slice_mut().unwrap());
        out.extend(self.bn.param_slices_mut());
        out.push(self.frozen.embeddings.as_slice_mut().unwrap());
        out
    }
}

/// Scratch pretraining settings for the toy generator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScratchTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for ScratchTrainConfig {
    fn default() -> Self {
        ScratchTrainConfig {
            steps: 400,
            batch_size: 8,
            learning_rate: 0.002,
        }
    }
}

/// Train a toy generator from scratch by class-conditional reconstruction:
/// each image owns a fixed standard-normal latent, and the generator
/// (including its class embedding table and batch-norm producers) is fit
/// with an L1 reconstruction loss, one class per step.
pub fn train_toy_generator(
    arch: GeneratorArch,
    dataset: &Dataset,
    classes: &BTreeSet<ClassId>,
    cfg: &ScratchTrainConfig,
    rng: &mut Rng,
) -> Result<(ToyGenerator, Vec<f64>)> {
    if dataset.height() != arch.image_size || dataset.width() != arch.image_size {
        return Err(Error::config(format!(
            "dataset images are {}x{}, generator expects {}",
            dataset.height(),
            dataset.width(),
            arch.image_size
        )));
    }
    let mut gen = ToyGenerator::new(arch, classes, rng)?;
    let dist = Normal::new(0.0, 1.0).unwrap();
    // Per-image fixed latents.
    let latents: Vec<Array1<f64>> = (0..dataset.len())
        .map(|_| Array1::from_shape_simple_fn(gen.frozen.arch.latent_dim, || dist.sample(rng)))
        .collect();
    let class_list: Vec<ClassId> = classes.iter().copied().collect();
    let mut opt = Adam::new(cfg.learning_rate);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let class = class_list[step % class_list.len()];
        let indices = dataset
            .class_indices(class)
            .ok_or_else(|| Error::data(format!("class {class} missing from dataset")))?;
        let take = cfg.batch_size.min(indices.len());
        let mut pick: Vec<usize> = indices.to_vec();
        for i in 0..take {
            let j = rng.random_range(i..pick.len());
            pick.swap(i, j);
        }
        pick.truncate(take);

        let mut tape = Tape::new();
        let bound = BoundGenerator::bind(&mut tape, &gen.frozen, &gen.bn, BindMode::AllTrainable);
        let mut latent_batch = Array2::<f64>::zeros((take, gen.frozen.arch.latent_dim));
        for (row, &idx) in pick.iter().enumerate() {
            latent_batch.row_mut(row).assign(&latents[idx]);
        }
        let latents_var = tape.constant(latent_batch.into_dyn());
        let table = bound.embeddings_table.expect("scratch binding has table");
        let class_row = gen
            .frozen
            .class_ids
            .iter()
            .position(|&c| c == class)
            .expect("class present in table");
        let embedding = tape.slice_rows(table, class_row, class_row + 1);
        let out = bound.apply(&mut tape, latents_var, embedding);

        let mut target = ndarray::Array4::<f64>::zeros((
            take,
            3,
            gen.frozen.arch.image_size,
            gen.frozen.arch.image_size,
        ));
        for (row, &idx) in pick.iter().enumerate() {
            target
                .index_axis_mut(ndarray::Axis(0), row)
                .assign(&dataset.get(idx).image.to_chw());
        }
        let target_var = tape.constant(target.into_dyn());
        let loss = tape.l1_loss(out, target_var);
        let loss_val = tape.scalar(loss);
        if !loss_val.is_finite() {
            return Err(Error::numerical(format!(
                "scratch generator loss became non-finite at step {step}"
            )));
        }
        losses.push(loss_val);
        let grads = tape.backward(loss);
        let vars = bound.scratch_vars();
        let grad_vecs: Vec<Vec<f64>> = vars
            .iter()
            .map(|&v| {
                let len = tape.value(v).len();
                crate::nn::grad_vec(&grads, v, len)
            })
            .collect();
        opt.step(gen.scratch_param_slices_mut(), &grad_vecs);
    }
    Ok((gen, losses))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    fn tiny_classes() -> BTreeSet<ClassId> {
        (0..3).map(ClassId).collect()
    }

    #[test]
    fn generator_output_has_declared_shape_and_range() {
        let mut rng = rng_from_seed(0);
        let gen = ToyGenerator::new(GeneratorArch::toy(16), &tiny_classes(), &mut rng).unwrap();
        let noise = NoiseVector::sample_standard(16, 16, &mut rng);
        let img = gen.generate(&noise, ValueRange::UNIT_SIGNED).unwrap();
        assert_eq!((img.height(), img.width()), (16, 16));
        assert!(img.data().iter().all(|&v| (-1.0..=1.0).contains(&v)));
    }

    #[test]
    fn generation_is_deterministic_per_noise() {
        let mut rng = rng_from_seed(1);
        let gen = ToyGenerator::new(GeneratorArch::toy(16), &tiny_classes(), &mut rng).unwrap();
        let noise = NoiseVector::sample_standard(16, 16, &mut rng);
        let a = gen.generate(&noise, ValueRange::UNIT_SIGNED).unwrap();
        let b = gen.generate(&noise, ValueRange::UNIT_SIGNED).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn conditional_modulation_defaults_to_identity() {
        let layer = BnModulation::conditional(4, 6);
        let e = Array1::from_vec(vec![0.3, -0.5, 0.9, 0.0]);
        let (gamma, beta) = layer.effective(&e);
        assert!(gamma.iter().all(|&g| (g - 1.0).abs() < 1e-12));
        assert!(beta.iter().all(|&b| b.abs() < 1e-12));
    }

    #[test]
    fn invalid_image_size_is_rejected() {
        assert!(GeneratorArch::toy(20).num_blocks().is_err());
        assert!(GeneratorArch::toy(16).num_blocks().is_ok());
        assert_eq!(GeneratorArch::toy(64).num_blocks().unwrap(), 4);
    }

    #[test]
    fn scratch_training_reduces_reconstruction_loss() {
        let mut rng = rng_from_seed(2);
        let ds = crate::synthetic::generate_synthetic_dataset(
            &crate::synthetic::SyntheticConfig {
                classes: 3,
                images_per_class: 4,
                image_size: 16,
                seed: 5,
            },
        )
        .unwrap();
        let cfg = ScratchTrainConfig {
            steps: 60,
            batch_size: 4,
            learning_rate: 0.005,
        };
        let (_, losses) =
            train_toy_generator(GeneratorArch::toy(16), &ds, &ds.classes(), &cfg, &mut rng)
                .unwrap();
        let head: f64 = losses[..5].iter().sum::<f64>() / 5.0;
        let tail: f64 = losses[losses.len() - 5..].iter().sum::<f64>() / 5.0;
        assert!(
            tail < head,
            "reconstruction loss did not improve: {head} -> {tail}"
        );
    }
}
