//! Acceptance suite: one test per criterion, each printing a PASS line.
//!
//! Criteria 8 and 9 share one end-to-end toy pipeline (synthetic
//! fine-grained dataset, scratch-trained quarter-width generator, cached
//! variants, two meta-training runs) built once in a shared fixture.

use metairnet::analysis::{
    class_conditional_distance_stats, pairwise_distance_stats, pca_eigenspectrum,
};
use metairnet::baselines::AugmentationMode;
use metairnet::cache::{adapt_config_hash, populate_cache, GeneratedCache};
use metairnet::data::{build_class_splits, ClassId, ClassSplit, Dataset, ImageTensor, SplitSpec, ValueRange};
use metairnet::fusion::{
    expand_weight_grid, fuse_images, FusionNetwork, GeneratedLookup, WeightGrid,
};
use metairnet::generator::{
    adapt_generator_to_image, adaptation_loss, adaptation_loss_and_grads, em_regularizer,
    AdaptConfig, GeneratorArch, NoiseVector, ToyGenerator, ToyPerceptualNet,
};
use metairnet::protonet::{
    compute_prototypes, embed_batch, episode_cross_entropy, query_class_probabilities,
    EmbeddingNetwork, PrototypeSet,
};
use metairnet::rng::{derive_rng, rng_from_seed, Rng};
use metairnet::synthetic::{generate_synthetic_dataset, SyntheticConfig};
use metairnet::train::{
    confidence_interval, episode_training_step, evaluate_model, run_meta_training, EvalReport,
    EvalSettings, TrainConfig,
};
use ndarray::{Array1, Array2, Array3};
use rand::Rng as _;
use std::collections::BTreeSet;
use std::sync::OnceLock;

fn random_image(h: usize, w: usize, rng: &mut Rng) -> ImageTensor {
    ImageTensor::new(
        Array3::from_shape_simple_fn((h, w, 3), || rng.random_range(-1.0..1.0)),
        ValueRange::UNIT_SIGNED,
    )
    .unwrap()
}

// ---------------------------------------------------------------------
// Criterion 1: mixing identities and convexity.
// ---------------------------------------------------------------------
#[test]
fn acceptance_01_mixing_identities() {
    let mut rng = rng_from_seed(101);
    let ones = Array2::from_elem((8, 8), 1.0);
    let zeros = Array2::from_elem((8, 8), 0.0);
    for _ in 0..50 {
        let a = random_image(8, 8, &mut rng);
        let b = random_image(8, 8, &mut rng);
        assert_eq!(fuse_images(&a, &b, &ones).unwrap().data(), a.data());
        assert_eq!(fuse_images(&a, &b, &zeros).unwrap().data(), b.data());
    }
    // Convexity bound over 1,000 random pairs.
    for _ in 0..1000 {
        let a = random_image(4, 4, &mut rng);
        let b = random_image(4, 4, &mut rng);
        let map = Array2::from_shape_simple_fn((4, 4), || rng.random_range(0.0..=1.0));
        let fused = fuse_images(&a, &b, &map).unwrap();
        for ((y, x, c), &v) in fused.data().indexed_iter() {
            let lo = a.data()[[y, x, c]].min(b.data()[[y, x, c]]);
            let hi = a.data()[[y, x, c]].max(b.data()[[y, x, c]]);
            assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
        }
    }
    println!("ACCEPTANCE 01 mixing identities: PASS");
}

// ---------------------------------------------------------------------
// Criterion 2: grid expansion partitions every pixel exactly once.
// ---------------------------------------------------------------------
#[test]
fn acceptance_02_grid_expansion_partition() {
    // Independent floor-boundary oracle.
    fn owning_cell(g: usize, len: usize, p: usize) -> usize {
        for i in 0..g {
            if (i * len) / g <= p && p < ((i + 1) * len) / g {
                return i;
            }
        }
        unreachable!("pixel {p} not covered for g={g}, len={len}");
    }
    for g in [3usize, 5] {
        let mut values = Array2::<f64>::zeros((g, g));
        for i in 0..g {
            for j in 0..g {
                values[[i, j]] = (i * g + j + 1) as f64 / (g * g + 2) as f64;
            }
        }
        let grid = WeightGrid::new(values.clone()).unwrap();
        for h in [6usize, 7, 64, 224] {
            for w in [6usize, 7, 64, 224] {
                let map = expand_weight_grid(&grid, h, w).unwrap();
                let mut cell_counts = Array2::<usize>::zeros((g, g));
                for y in 0..h {
                    for x in 0..w {
                        let (ci, cj) = (owning_cell(g, h, y), owning_cell(g, w, x));
                        assert_eq!(
                            map[[y, x]],
                            values[[ci, cj]],
                            "pixel ({y},{x}) mismatch at g={g}, {h}x{w}"
                        );
                        cell_counts[[ci, cj]] += 1;
                    }
                }
                // Exhaustive coverage: cells tile the image exactly.
                assert_eq!(cell_counts.sum(), h * w);
                for i in 0..g {
                    for j in 0..g {
                        let rows = ((i + 1) * h) / g - (i * h) / g;
                        let cols = ((j + 1) * w) / g - (j * w) / g;
                        assert_eq!(cell_counts[[i, j]], rows * cols);
                    }
                }
            }
        }
    }
    println!("ACCEPTANCE 02 grid expansion: PASS");
}

// ---------------------------------------------------------------------
// Criterion 3: prototype and softmax oracles.
// ---------------------------------------------------------------------
#[test]
fn acceptance_03_prototype_softmax_oracle() {
    let mut rng = rng_from_seed(103);
    for _ in 0..100 {
        let n = rng.random_range(2usize..6);
        let d = rng.random_range(1usize..9);
        let count = rng.random_range(n..n + 10);
        let mut embeddings = Vec::with_capacity(count);
        let mut labels = Vec::with_capacity(count);
        for c in 0..n {
            embeddings.push(Array1::from_shape_simple_fn(d, || rng.random_range(-3.0..3.0)));
            labels.push(c);
        }
        for _ in n..count {
            embeddings.push(Array1::from_shape_simple_fn(d, || rng.random_range(-3.0..3.0)));
            labels.push(rng.random_range(0..n));
        }
        let protos = compute_prototypes(&embeddings, &labels, n).unwrap();
        // Brute-force group-by means.
        for c in 0..n {
            let members: Vec<usize> = (0..count).filter(|&i| labels[i] == c).collect();
            for j in 0..d {
                let mean: f64 =
                    members.iter().map(|&i| embeddings[i][j]).sum::<f64>() / members.len() as f64;
                assert!((protos.prototypes[c][j] - mean).abs() < 1e-6);
            }
        }
        // Hand-rolled softmax over negative Euclidean distances.
        let query = Array1::from_shape_simple_fn(d, || rng.random_range(-3.0..3.0));
        let p = query_class_probabilities(&protos, &query, false);
        let dists: Vec<f64> = protos
            .prototypes
            .iter()
            .map(|proto| {
                query
                    .iter()
                    .zip(proto.iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        let denom: f64 = dists.iter().map(|&d| (-d).exp()).sum();
        for c in 0..n {
            let expect = (-dists[c]).exp() / denom;
            assert!((p[c] - expect).abs() < 1e-6, "class {c}: {} vs {expect}", p[c]);
        }
    }
    // Uniform case: equidistant prototypes give exactly 1/n.
    let protos = PrototypeSet {
        prototypes: vec![
            Array1::from_vec(vec![2.0, 0.0]),
            Array1::from_vec(vec![-2.0, 0.0]),
            Array1::from_vec(vec![0.0, 2.0]),
            Array1::from_vec(vec![0.0, -2.0]),
        ],
    };
    let p = query_class_probabilities(&protos, &Array1::from_vec(vec![0.0, 0.0]), false);
    for &v in p.iter() {
        assert!((v - 0.25).abs() < 1e-9);
    }
    // Uniform 5-way predictions: loss = ln 5.
    let uniform = vec![Array1::from_elem(5, 0.2); 7];
    let loss = episode_cross_entropy(&uniform, &[0, 1, 2, 3, 4, 0, 1]).unwrap();
    assert!((loss - 5.0_f64.ln()).abs() < 1e-6);
    assert!((loss - 1.6094).abs() < 1e-3);
    println!("ACCEPTANCE 03 prototype/softmax oracle: PASS");
}

// ---------------------------------------------------------------------
// Criterion 4: analytic gradients match central finite differences.
// ---------------------------------------------------------------------
#[test]
fn acceptance_04_gradient_checks() {
    let rel_err = |analytic: f64, numeric: f64| {
        (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
    };

    // (a) Adaptation loss wrt sampled z, gamma, beta coordinates on a
    // direct-modulation toy generator.
    let mut arch = GeneratorArch::toy(16);
    arch.conditional_bn = false;
    let classes: BTreeSet<ClassId> = (0..3).map(ClassId).collect();
    let gen = ToyGenerator::new(arch, &classes, &mut rng_from_seed(401)).unwrap();
    let mut rng = rng_from_seed(402);
    let target = random_image(16, 16, &mut rng);
    let extractor = ToyPerceptualNet::new(&mut rng_from_seed(403));
    let noise = NoiseVector {
        latent: Array1::from_shape_simple_fn(16, || rng.random_range(-0.6..0.6)),
        class_embedding: gen.frozen.mean_embedding(),
    };
    let r = NoiseVector::sample_standard(16, 16, &mut rng);
    let (_, grads) = adaptation_loss_and_grads(
        &gen.frozen, &gen.bn, &noise, &target, &extractor, &r, 0.1, 0.1, false,
    )
    .unwrap();
    let eps = 1e-5;
    let loss_at = |noise: &NoiseVector, bn: &metairnet::generator::BnParamSet| {
        adaptation_loss(&gen.frozen, bn, noise, &target, &extractor, &r, 0.1, 0.1)
            .unwrap()
            .total
    };
    for &i in &[0usize, 5, 11, 15] {
        let mut hi = noise.clone();
        hi.latent[i] += eps;
        let mut lo = noise.clone();
        lo.latent[i] -= eps;
        let numeric = (loss_at(&hi, &gen.bn) - loss_at(&lo, &gen.bn)) / (2.0 * eps);
        assert!(
            rel_err(grads.latent[i], numeric) <= 1e-3,
            "z[{i}]: analytic {} vs numeric {numeric}",
            grads.latent[i]
        );
    }
    // Direct modulation: slots alternate gamma, beta per layer.
    for (slot, name) in [(0usize, "gamma[layer0]"), (1, "beta[layer0]"), (2, "gamma[layer1]")] {
        let coord = 1usize;
        let perturb = |delta: f64| {
            let mut bn = gen.bn.clone();
            bn.param_slices_mut()[slot][coord] += delta;
            loss_at(&noise, &bn)
        };
        let numeric = (perturb(eps) - perturb(-eps)) / (2.0 * eps);
        let analytic = grads.bn[slot][coord];
        assert!(
            rel_err(analytic, numeric) <= 1e-3,
            "{name}: analytic {analytic} vs numeric {numeric}"
        );
    }

    // (b) Episode loss wrt sampled fusion-head parameters.
    let ds = generate_synthetic_dataset(&SyntheticConfig {
        classes: 3,
        images_per_class: 4,
        image_size: 16,
        seed: 404,
    })
    .unwrap();
    let mut lookup = metairnet::fusion::MemoryLookup::new();
    let mut vrng = rng_from_seed(405);
    for li in ds.images() {
        let variants = (0..2)
            .map(|_| metairnet::baselines::jitter_augment(&li.image, 0.2, &mut vrng))
            .collect();
        lookup.insert(&li.image, variants);
    }
    let embedder = EmbeddingNetwork::new(4, &mut rng_from_seed(406));
    let fusion = FusionNetwork::new(3, 4, &mut rng_from_seed(407));
    let episode =
        metairnet::data::sample_episode(&ds, &ds.classes(), 3, 1, 2, &mut rng_from_seed(408))
            .unwrap();
    let choices = vec![vec![0usize], vec![1], vec![0]];
    let out = episode_training_step(
        &embedder,
        Some(&fusion),
        &episode,
        Some(&lookup),
        Some(&choices),
        false,
        true,
    )
    .unwrap();
    let fusion_grads = out.fusion_grads.unwrap();
    let head_w_slot = fusion_grads.len() - 2;
    let episode_loss = |net: &FusionNetwork| {
        episode_training_step(
            &embedder,
            Some(net),
            &episode,
            Some(&lookup),
            Some(&choices),
            false,
            false,
        )
        .unwrap()
        .loss
    };
    for coord in [0usize, 3, 7] {
        let rows = fusion.head.weight.dim().1;
        let (i, j) = (coord / rows, coord % rows);
        let mut hi = fusion.clone();
        hi.head.weight[[i, j]] += eps;
        let mut lo = fusion.clone();
        lo.head.weight[[i, j]] -= eps;
        let numeric = (episode_loss(&hi) - episode_loss(&lo)) / (2.0 * eps);
        let analytic = fusion_grads[head_w_slot][coord];
        assert!(
            rel_err(analytic, numeric) <= 1e-3,
            "head w[{coord}]: analytic {analytic} vs numeric {numeric}"
        );
    }
    for coord in [2usize, 5] {
        let mut hi = fusion.clone();
        hi.head.bias[coord] += eps;
        let mut lo = fusion.clone();
        lo.head.bias[coord] -= eps;
        let numeric = (episode_loss(&hi) - episode_loss(&lo)) / (2.0 * eps);
        let analytic = fusion_grads[head_w_slot + 1][coord];
        assert!(
            rel_err(analytic, numeric) <= 1e-3,
            "head b[{coord}]: analytic {analytic} vs numeric {numeric}"
        );
    }
    println!("ACCEPTANCE 04 gradient checks: PASS");
}

// ---------------------------------------------------------------------
// Criterion 5: freezing contract and loss decrease on 10 toy targets.
// ---------------------------------------------------------------------
#[test]
fn acceptance_05_freezing_contract() {
    let classes: BTreeSet<ClassId> = (0..4).map(ClassId).collect();
    let gen = ToyGenerator::new(GeneratorArch::toy(16), &classes, &mut rng_from_seed(501)).unwrap();
    let extractor = ToyPerceptualNet::new(&mut rng_from_seed(502));
    let ds = generate_synthetic_dataset(&SyntheticConfig {
        classes: 5,
        images_per_class: 2,
        image_size: 16,
        seed: 503,
    })
    .unwrap();
    let cfg = AdaptConfig {
        steps: 60,
        ..AdaptConfig::default()
    };
    let snapshot = gen.frozen.weight_snapshot();
    for (i, li) in ds.images().iter().take(10).enumerate() {
        let state = adapt_generator_to_image(
            &gen,
            &li.image,
            &extractor,
            &cfg,
            &mut derive_rng(504, "freeze", i as u64),
        )
        .unwrap();
        assert_eq!(state.loss_trace.len(), 60);
        let initial = state.loss_trace[0].total;
        let final_loss = state.loss_trace.last().unwrap().total;
        assert!(
            final_loss < initial,
            "target {i}: loss {initial} -> {final_loss} did not decrease"
        );
        // Element-wise snapshot diff of all non-BN weights is zero.
        assert_eq!(state.frozen.weight_snapshot(), snapshot, "target {i}");
        assert_eq!(gen.frozen.weight_snapshot(), snapshot, "target {i}");
    }
    println!("ACCEPTANCE 05 freezing contract: PASS");
}

// ---------------------------------------------------------------------
// Criterion 6: earth-mover regularizer vs permutation brute force.
// ---------------------------------------------------------------------
#[test]
fn acceptance_06_em_brute_force() {
    fn permutations(items: &[usize]) -> Vec<Vec<usize>> {
        if items.len() <= 1 {
            return vec![items.to_vec()];
        }
        let mut out = Vec::new();
        for (k, &first) in items.iter().enumerate() {
            let rest: Vec<usize> = items
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != k)
                .map(|(_, &v)| v)
                .collect();
            for mut tail in permutations(&rest) {
                tail.insert(0, first);
                out.push(tail);
            }
        }
        out
    }
    use num::rational::BigRational;
    use num::{FromPrimitive, Signed};
    let exact = |v: f64| BigRational::from_f64(v).unwrap();
    let exact_term = |a: f64, b: f64| (exact(a) - exact(b)).abs();

    let mut rng = rng_from_seed(601);
    for d in 2..=6 {
        for _ in 0..25 {
            let z: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
            let r: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
            let fast = em_regularizer(&z, &r).unwrap();
            // Exhaustive minimum-cost matching in exact rational
            // arithmetic: distinct optimal matchings tie as real numbers
            // but round differently in f64, so the minimum is taken
            // without rounding.
            let indices: Vec<usize> = (0..d).collect();
            let brute_exact = permutations(&indices)
                .into_iter()
                .map(|perm| {
                    perm.iter()
                        .enumerate()
                        .map(|(i, &j)| exact_term(z[i], r[j]))
                        .sum::<BigRational>()
                })
                .min()
                .unwrap();
            // The sorted matching attains the exact brute-force minimum.
            let mut zs = z.clone();
            let mut rs = r.clone();
            zs.sort_by(|a, b| a.partial_cmp(b).unwrap());
            rs.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let sorted_exact = zs
                .iter()
                .zip(rs.iter())
                .map(|(&a, &b)| exact_term(a, b))
                .sum::<BigRational>();
            assert_eq!(sorted_exact, brute_exact, "d={d}: sorted matching is not optimal");
            // And the implementation equals the same matching evaluated
            // with identical f64 summation order.
            let same_order: f64 = zs
                .iter()
                .zip(rs.iter())
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>()
                / d as f64;
            assert_eq!(fast, same_order, "d={d}");
        }
        let z: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
        assert_eq!(em_regularizer(&z, &z).unwrap(), 0.0);
    }
    println!("ACCEPTANCE 06 em regularizer: PASS");
}

// ---------------------------------------------------------------------
// Criterion 7: diversity oracles.
// ---------------------------------------------------------------------
#[test]
fn acceptance_07_diversity_oracles() {
    let mut rng = rng_from_seed(701);
    // Double-loop oracle, N = 50.
    let features: Vec<Array1<f64>> = (0..50)
        .map(|_| Array1::from_shape_simple_fn(7, || rng.random_range(-2.0..2.0)))
        .collect();
    let stats = pairwise_distance_stats(&features).unwrap();
    let mut distances = Vec::new();
    for i in 0..features.len() {
        for j in 0..features.len() {
            if i < j {
                let s: f64 = (0..7)
                    .map(|k| (features[i][k] - features[j][k]).powi(2))
                    .sum();
                distances.push(s.sqrt());
            }
        }
    }
    assert_eq!(stats.pair_count, distances.len());
    let mean = distances.iter().sum::<f64>() / distances.len() as f64;
    assert_eq!(stats.mean, mean);
    let var =
        distances.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / distances.len() as f64;
    assert_eq!(stats.stddev, var.sqrt());
    assert_eq!(
        stats.histogram.counts.iter().sum::<u64>(),
        stats.pair_count as u64
    );

    // Hand spectrum: points (1,0), (-1,0), (0,0) -> eigenvalues (1, 0).
    let spectrum = pca_eigenspectrum(
        &[
            Array1::from_vec(vec![1.0, 0.0]),
            Array1::from_vec(vec![-1.0, 0.0]),
            Array1::from_vec(vec![0.0, 0.0]),
        ],
        2,
    )
    .unwrap();
    assert!((spectrum.eigenvalues[0] - 1.0).abs() < 1e-9);
    assert!(spectrum.eigenvalues[1].abs() < 1e-9);

    // Trace-sum invariant at 1e-6 relative.
    let spectrum = pca_eigenspectrum(&features, 7).unwrap();
    let n = features.len() as f64;
    let mut trace = 0.0;
    for k in 0..7 {
        let m = features.iter().map(|f| f[k]).sum::<f64>() / n;
        trace += features.iter().map(|f| (f[k] - m).powi(2)).sum::<f64>() / (n - 1.0);
    }
    let sum: f64 = spectrum.eigenvalues.iter().sum();
    assert!((sum - trace).abs() / trace < 1e-6);

    // Intra/inter partition: 2 classes x 2 items -> 2 and 4 pairs.
    let small = vec![
        Array1::from_vec(vec![0.0]),
        Array1::from_vec(vec![1.0]),
        Array1::from_vec(vec![2.0]),
        Array1::from_vec(vec![3.0]),
    ];
    let labels = vec![ClassId(0), ClassId(0), ClassId(1), ClassId(1)];
    let (intra, inter) = class_conditional_distance_stats(&small, &labels).unwrap();
    assert_eq!((intra.pair_count, inter.pair_count), (2, 4));
    assert_eq!(intra.pair_count + inter.pair_count, 6);
    println!("ACCEPTANCE 07 diversity oracles: PASS");
}

// ---------------------------------------------------------------------
// Shared end-to-end toy pipeline for criteria 8 and 9.
// ---------------------------------------------------------------------
struct ToyPipeline {
    _cache_dir: tempfile::TempDir,
    dataset: Dataset,
    split: ClassSplit,
    cache: GeneratedCache,
    metairnet_fusion: FusionNetwork,
    metairnet_embedder: EmbeddingNetwork,
    report_metairnet: EvalReport,
    report_none: EvalReport,
    report_raw: EvalReport,
}

const PIPELINE_SEED: u64 = 2024;

fn eval_settings(mode: AugmentationMode) -> EvalSettings {
    EvalSettings {
        n: 5,
        m: 1,
        q: 5,
        episodes: 300,
        seed: PIPELINE_SEED,
        mode,
        n_aug: 1,
        flip_enabled: false,
        squared_distance: false,
        augmentation: Default::default(),
    }
}

fn pipeline() -> &'static ToyPipeline {
    static PIPELINE: OnceLock<ToyPipeline> = OnceLock::new();
    PIPELINE.get_or_init(|| {
        // 20-class synthetic fine-grained dataset at 64x64.
        let dataset = generate_synthetic_dataset(&SyntheticConfig {
            classes: 20,
            images_per_class: 12,
            image_size: 64,
            seed: 123,
        })
        .unwrap();
        let split = build_class_splits(
            &dataset.classes(),
            &SplitSpec::Ratios {
                ratios: [0.5, 0.2, 0.3],
                seed: 7,
            },
        )
        .unwrap();

        // Scratch quarter-width generator trained on the base classes.
        let arch = GeneratorArch::toy(64);
        let scratch = metairnet::generator::ScratchTrainConfig {
            steps: 300,
            batch_size: 8,
            learning_rate: 0.002,
        };
        let (generator, _) = metairnet::generator::train_toy_generator(
            arch,
            &dataset,
            &split.base,
            &scratch,
            &mut derive_rng(PIPELINE_SEED, "scratch", 0),
        )
        .unwrap();

        // Cache of perturbed variants for every image.
        let cache_dir = tempfile::tempdir().unwrap();
        let cache = GeneratedCache::new(cache_dir.path()).unwrap();
        let adapt = AdaptConfig {
            steps: 100,
            ..AdaptConfig::default()
        };
        let hash = adapt_config_hash(&adapt, "toy-pipeline");
        let extractor = ToyPerceptualNet::new(&mut derive_rng(PIPELINE_SEED, "perc", 0));
        let images: Vec<&ImageTensor> = dataset.images().iter().map(|li| &li.image).collect();
        populate_cache(&images, &generator, &extractor, &adapt, &hash, &cache, PIPELINE_SEED)
            .unwrap();

        // Meta-train the fused model and the plain prototype baseline.
        let train_base = TrainConfig {
            n: 5,
            m: 1,
            q: 8,
            episodes_per_epoch: 60,
            epochs: 4,
            val_episodes: 20,
            learning_rate: 0.001,
            n_aug: 1,
            mode: AugmentationMode::Metairnet,
            flip_enabled: false,
            squared_distance: false,
            seed: PIPELINE_SEED,
            augmentation: Default::default(),
        };
        let fusion_init = FusionNetwork::new(3, 8, &mut derive_rng(PIPELINE_SEED, "init-f", 0));
        let embedder_init = EmbeddingNetwork::new(16, &mut derive_rng(PIPELINE_SEED, "init-c", 0));
        let (metairnet_fusion, metairnet_embedder, report) = run_meta_training(
            &train_base,
            &dataset,
            &split,
            Some(&cache),
            fusion_init.clone(),
            embedder_init.clone(),
        )
        .unwrap();
        assert!(
            report.first_step_fusion_grad_norm > 0.0,
            "fusion received no gradient"
        );
        let none_cfg = TrainConfig {
            mode: AugmentationMode::None,
            ..train_base.clone()
        };
        let (_, none_embedder, _) = run_meta_training(
            &none_cfg,
            &dataset,
            &split,
            None,
            fusion_init.clone(),
            embedder_init,
        )
        .unwrap();

        // Meta-test all three modes on the novel split with one seed.
        let (report_metairnet, _) = evaluate_model(
            &metairnet_fusion,
            &metairnet_embedder,
            &dataset,
            &split.novel,
            &eval_settings(AugmentationMode::Metairnet),
            Some(&cache),
            false,
        )
        .unwrap();
        let (report_none, _) = evaluate_model(
            &fusion_init,
            &none_embedder,
            &dataset,
            &split.novel,
            &eval_settings(AugmentationMode::None),
            None,
            false,
        )
        .unwrap();
        let (report_raw, _) = evaluate_model(
            &fusion_init,
            &none_embedder,
            &dataset,
            &split.novel,
            &eval_settings(AugmentationMode::FinetuneganRaw),
            Some(&cache),
            false,
        )
        .unwrap();

        ToyPipeline {
            _cache_dir: cache_dir,
            dataset,
            split,
            cache,
            metairnet_fusion,
            metairnet_embedder,
            report_metairnet,
            report_none,
            report_raw,
        }
    })
}

// ---------------------------------------------------------------------
// Criterion 8: toy end-to-end non-inferiority.
// ---------------------------------------------------------------------
#[test]
fn acceptance_08_toy_end_to_end_non_inferiority() {
    let p = pipeline();
    let metairnet = p.report_metairnet.mean_accuracy;
    let none = p.report_none.mean_accuracy;
    let raw = p.report_raw.mean_accuracy;
    println!(
        "toy 5-way-1-shot over 300 episodes: metairnet {metairnet:.2}% (+-{:.2}), \
         none {none:.2}% (+-{:.2}), finetunegan_raw {raw:.2}% (+-{:.2})",
        p.report_metairnet.ci95, p.report_none.ci95, p.report_raw.ci95
    );
    assert_eq!(p.report_metairnet.episode_count, 300);
    assert!(
        metairnet >= none - 1.0,
        "metairnet {metairnet:.2}% fell more than 1 point below plain {none:.2}%"
    );
    assert!(
        raw <= metairnet,
        "raw generated images ({raw:.2}%) beat fused ones ({metairnet:.2}%)"
    );
    println!("ACCEPTANCE 08 toy end-to-end non-inferiority: PASS");
}

// ---------------------------------------------------------------------
// Criterion 9: diversity ordering on the toy pipeline.
// ---------------------------------------------------------------------
#[test]
fn acceptance_09_diversity_ordering() {
    let p = pipeline();
    let mut originals = Vec::new();
    let mut generated = Vec::new();
    let mut fused = Vec::new();
    for li in p.dataset.images() {
        if !p.split.novel.contains(&li.label) {
            continue;
        }
        let gen = p.cache.variant(&li.image, 0).unwrap();
        let grid = p
            .metairnet_fusion
            .predict_weight_grid(&li.image, &gen)
            .unwrap();
        let map = expand_weight_grid(&grid, li.image.height(), li.image.width()).unwrap();
        fused.push(fuse_images(&li.image, &gen, &map).unwrap());
        originals.push(li.image.clone());
        generated.push(gen);
    }
    let embed = |images: &[ImageTensor]| {
        let refs: Vec<&ImageTensor> = images.iter().collect();
        embed_batch(&p.metairnet_embedder, &refs).unwrap()
    };
    let orig_stats = pairwise_distance_stats(&embed(&originals)).unwrap();
    let gen_stats = pairwise_distance_stats(&embed(&generated)).unwrap();
    let fused_stats = pairwise_distance_stats(&embed(&fused)).unwrap();
    println!(
        "mean pairwise distance: original {:.4}, generated {:.4}, fused {:.4}",
        orig_stats.mean, gen_stats.mean, fused_stats.mean
    );
    assert!(
        gen_stats.mean < orig_stats.mean,
        "generated set ({:.4}) is not strictly less diverse than originals ({:.4})",
        gen_stats.mean,
        orig_stats.mean
    );
    assert!(
        fused_stats.mean >= 0.95 * orig_stats.mean,
        "fused set ({:.4}) fell below 0.95x original diversity ({:.4})",
        fused_stats.mean,
        orig_stats.mean
    );
    println!("ACCEPTANCE 09 diversity ordering: PASS");
}

// ---------------------------------------------------------------------
// Criterion 10: evaluation protocol determinism and CI formula.
// ---------------------------------------------------------------------
#[test]
fn acceptance_10_evaluation_protocol() {
    // 1000 episodes x 80 queries (5-way, 16 queries per class),
    // deterministic under a fixed seed, through a checkpoint roundtrip.
    let dataset = generate_synthetic_dataset(&SyntheticConfig {
        classes: 8,
        images_per_class: 20,
        image_size: 16,
        seed: 1001,
    })
    .unwrap();
    let pool = dataset.classes();
    let fusion = FusionNetwork::new(3, 4, &mut rng_from_seed(1002));
    let embedder = EmbeddingNetwork::new(8, &mut rng_from_seed(1003));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    metairnet::checkpoint::save_model(
        &path,
        &fusion,
        &embedder,
        &metairnet::checkpoint::ModelMeta {
            config_hash: "acceptance".into(),
            val_accuracy: 0.0,
            mode: "none".into(),
            squared_distance: false,
            grid: 3,
            encoder_width: 4,
            backbone_width: 8,
            image_size: 16,
            n_aug: 1,
            flip_enabled: false,
        },
    )
    .unwrap();
    let loaded = metairnet::checkpoint::load_model(&path).unwrap();
    let settings = EvalSettings {
        n: 5,
        m: 1,
        q: 16,
        episodes: 1000,
        seed: 42,
        mode: AugmentationMode::None,
        n_aug: 1,
        flip_enabled: false,
        squared_distance: false,
        augmentation: Default::default(),
    };
    let (a, _) = evaluate_model(
        &loaded.fusion,
        &loaded.embedder,
        &dataset,
        &pool,
        &settings,
        None,
        false,
    )
    .unwrap();
    let (b, _) = evaluate_model(
        &loaded.fusion,
        &loaded.embedder,
        &dataset,
        &pool,
        &settings,
        None,
        false,
    )
    .unwrap();
    assert_eq!(a.episode_count, 1000);
    assert_eq!(a.per_episode_accuracies, b.per_episode_accuracies);
    assert_eq!(a.mean_accuracy, b.mean_accuracy);
    assert_eq!(a.ci95, b.ci95);
    // Every episode scores 80 queries: accuracies are multiples of 1/80.
    for &acc in &a.per_episode_accuracies {
        let scaled = acc * 80.0 / 100.0;
        assert!((scaled - scaled.round()).abs() < 1e-9);
    }

    // The CI formula on the hand cases.
    let (mean, ci) = confidence_interval(&[0.0, 100.0]).unwrap();
    assert_eq!(mean, 50.0);
    assert!((ci - 98.0).abs() < 1e-1);
    assert!((ci - 1.96 * (5000.0_f64).sqrt() / (2.0_f64).sqrt()).abs() < 1e-3);
    let (mean, ci) = confidence_interval(&[70.0, 80.0, 90.0]).unwrap();
    assert_eq!(mean, 80.0);
    assert!((ci - 11.316).abs() < 1e-3);
    println!("ACCEPTANCE 10 evaluation protocol: PASS");
}
