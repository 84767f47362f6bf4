// Temporary sizing probe; removed before finalizing.
use metairnet::data::ClassId;
use metairnet::fusion::{FusionNetwork, MemoryLookup};
use metairnet::generator::*;
use metairnet::protonet::EmbeddingNetwork;
use metairnet::rng::rng_from_seed;
use metairnet::synthetic::*;
use metairnet::train::*;
use std::collections::BTreeSet;
use std::time::Instant;

#[test]
#[ignore]
fn probe_timings() {
    let ds = generate_synthetic_dataset(&SyntheticConfig {
        classes: 20,
        images_per_class: 12,
        image_size: 64,
        seed: 123,
    })
    .unwrap();
    println!("dataset: {} images 64px", ds.len());

    let classes: BTreeSet<ClassId> = (0..10).map(ClassId).collect();
    let t = Instant::now();
    let arch = GeneratorArch::toy(64);
    let cfg = ScratchTrainConfig {
        steps: 20,
        batch_size: 8,
        learning_rate: 0.002,
    };
    let (gen, losses) =
        train_toy_generator(arch, &ds, &classes, &cfg, &mut rng_from_seed(1)).unwrap();
    println!(
        "scratch 20 steps: {:?} ({:?}/step), loss {:.4}->{:.4}",
        t.elapsed(),
        t.elapsed() / 20,
        losses[0],
        losses.last().unwrap()
    );

    let extractor = ToyPerceptualNet::new(&mut rng_from_seed(2));
    let t = Instant::now();
    let adapt_cfg = AdaptConfig {
        steps: 20,
        num_variants: 10,
        ..AdaptConfig::default()
    };
    let state = adapt_generator_to_image(
        &gen,
        &ds.get(0).image,
        &extractor,
        &adapt_cfg,
        &mut rng_from_seed(3),
    )
    .unwrap();
    println!(
        "adapt 20 steps: {:?} ({:?}/step), loss {:.4}->{:.4}",
        t.elapsed(),
        t.elapsed() / 20,
        state.loss_trace[0].total,
        state.loss_trace.last().unwrap().total
    );
    let t = Instant::now();
    let _v = sample_perturbed_images(&state, 0.1, 10, &mut rng_from_seed(4)).unwrap();
    println!("sample 10 variants: {:?}", t.elapsed());

    // Episode training step timing, conv4 width 16, q=8.
    let embedder = EmbeddingNetwork::new(16, &mut rng_from_seed(5));
    let fusion = FusionNetwork::new(3, 8, &mut rng_from_seed(6));
    let mut lookup = MemoryLookup::new();
    for li in ds.images().iter().take(60) {
        let vs: Vec<_> = (0..2)
            .map(|_| metairnet::baselines::jitter_augment(&li.image, 0.1, &mut rng_from_seed(9)))
            .collect();
        lookup.insert(&li.image, vs);
    }
    let pool: BTreeSet<ClassId> = (0..5).map(ClassId).collect();
    let ep = metairnet::data::sample_episode(&ds, &pool, 5, 1, 8, &mut rng_from_seed(7)).unwrap();
    let choices: Vec<Vec<usize>> = vec![vec![0]; 5];
    let t = Instant::now();
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
    println!(
        "metairnet episode (5w1s q8, w16): {:?}, loss {:.4}",
        t.elapsed(),
        out.loss
    );
    let t = Instant::now();
    let _ = episode_training_step(&embedder, None, &ep, None, None, false, true).unwrap();
    println!("plain episode: {:?}", t.elapsed());

    // Eval episode timing q=5.
    let settings = EvalSettings {
        n: 5,
        m: 1,
        q: 5,
        episodes: 10,
        seed: 1,
        mode: metairnet::baselines::AugmentationMode::None,
        n_aug: 1,
        flip_enabled: false,
        squared_distance: false,
        augmentation: Default::default(),
    };
    let t = Instant::now();
    let (_r, _) = evaluate_model(&fusion, &embedder, &ds, &pool, &settings, None, false).unwrap();
    println!("eval 10 episodes (q5, none): {:?}", t.elapsed());
}
