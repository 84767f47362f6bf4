use crate::Command;
use metairnet::analysis::{compare_sets, write_report_artifacts, AnalysisSet};
use metairnet::baselines::AugmentationMode;
use metairnet::cache::{adapt_config_hash, populate_cache, GeneratedCache};
use metairnet::checkpoint::{self, ModelCheckpoint, ModelMeta};
use metairnet::config::ExperimentConfig;
use metairnet::data::{ClassId, ClassSplit, Dataset, ImageTensor, ValueRange};
use metairnet::error::{Error, Result};
use metairnet::fusion::{expand_weight_grid, fuse_images, FusionNetwork, GeneratedLookup};
use metairnet::generator::{train_toy_generator, ToyPerceptualNet};
use metairnet::ledger::{append_row, LedgerRow};
use metairnet::protonet::EmbeddingNetwork;
use metairnet::rng::derive_rng;
use metairnet::synthetic::{generate_synthetic_dataset, write_images_by_class, SyntheticConfig};
use metairnet::train::{
    evaluate_frozen_probes, evaluate_model, run_meta_training, run_naug_sweep, EvalReport,
    EvalSettings, ProbeSettings,
};
use std::path::{Path, PathBuf};

pub fn run(config_path: &Path, seed: Option<u64>, command: &Command) -> Result<()> {
    match command {
        Command::MakeSynthetic {
            out,
            classes,
            images_per_class,
            image_size,
            dataset_seed,
        } => {
            let cfg = SyntheticConfig {
                classes: *classes,
                images_per_class: *images_per_class,
                image_size: *image_size,
                seed: *dataset_seed,
            };
            let ds = generate_synthetic_dataset(&cfg)?;
            write_images_by_class(ds.images(), out)?;
            println!(
                "wrote {} images across {} classes to {}",
                ds.len(),
                classes,
                out.display()
            );
            Ok(())
        }
        other => {
            let mut cfg = ExperimentConfig::load(config_path)?;
            if let Some(seed) = seed {
                cfg.override_seed(seed);
            }
            dispatch(&cfg, other)
        }
    }
}

fn dispatch(cfg: &ExperimentConfig, command: &Command) -> Result<()> {
    match command {
        Command::MakeSynthetic { .. } => unreachable!("handled before config load"),
        Command::TrainGenerator => cmd_train_generator(cfg),
        Command::FinetuneGan => cmd_finetune_gan(cfg),
        Command::MetaTrain => cmd_meta_train(cfg),
        Command::Evaluate {
            checkpoint,
            mode,
            episodes,
            shot,
            n_aug,
            flip,
            dump_weights,
        } => cmd_evaluate(
            cfg,
            checkpoint.as_deref(),
            mode.as_deref(),
            *episodes,
            *shot,
            *n_aug,
            *flip,
            dump_weights.as_deref(),
        ),
        Command::EvaluateProbes {
            checkpoint,
            episodes,
        } => cmd_evaluate_probes(cfg, checkpoint.as_deref(), *episodes),
        Command::SweepNaug {
            checkpoint,
            values,
            episodes,
        } => cmd_sweep_naug(cfg, checkpoint.as_deref(), values, *episodes),
        Command::ExportSets {
            checkpoint,
            out,
            split,
            limit,
        } => cmd_export_sets(cfg, checkpoint.as_deref(), out, split, *limit),
        Command::AnalyzeDiversity {
            original,
            generated,
            fused,
            checkpoint,
            out,
        } => cmd_analyze(
            cfg,
            original,
            generated,
            fused,
            checkpoint.as_deref(),
            out.as_deref(),
        ),
    }
}

fn parse_mode(text: &str) -> Result<AugmentationMode> {
    let modes = [
        AugmentationMode::None,
        AugmentationMode::Metairnet,
        AugmentationMode::Flip,
        AugmentationMode::Gaussian,
        AugmentationMode::FinetuneganRaw,
        AugmentationMode::Mixup,
        AugmentationMode::ManifoldMixup,
        AugmentationMode::Cutmix,
        AugmentationMode::Jitter,
        AugmentationMode::ManualGrid,
    ];
    modes
        .into_iter()
        .find(|m| m.as_str() == text)
        .ok_or_else(|| {
            Error::config(format!(
                "unknown augmentation mode `{text}` (expected one of: {})",
                modes
                    .iter()
                    .map(|m| m.as_str())
                    .collect::<Vec<_>>()
                    .join(", ")
            ))
        })
}

fn model_path(cfg: &ExperimentConfig, explicit: Option<&Path>) -> PathBuf {
    explicit
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.paths.output_dir.join("model.ckpt"))
}

fn load_model_checkpoint(cfg: &ExperimentConfig, explicit: Option<&Path>) -> Result<ModelCheckpoint> {
    let path = model_path(cfg, explicit);
    if !path.exists() {
        return Err(Error::data(format!(
            "model checkpoint not found at {} (run meta-train first)",
            path.display()
        )));
    }
    checkpoint::load_model(&path)
}

fn load_context(cfg: &ExperimentConfig) -> Result<(Dataset, ClassSplit)> {
    let dataset = cfg.load_dataset()?;
    let split = cfg.build_split(&dataset)?;
    Ok((dataset, split))
}

fn cmd_train_generator(cfg: &ExperimentConfig) -> Result<()> {
    let (dataset, split) = load_context(cfg)?;
    let arch = cfg.generator.arch(cfg.dataset.image_size);
    let mut rng = derive_rng(cfg.train.seed, "generator-scratch", 0);
    let (generator, losses) =
        train_toy_generator(arch, &dataset, &split.base, &cfg.generator.scratch, &mut rng)?;
    if let Some(parent) = cfg.generator.checkpoint.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    checkpoint::save_generator(&cfg.generator.checkpoint, &generator, &cfg.config_hash())?;
    println!(
        "generator trained for {} steps (reconstruction L1 {:.4} -> {:.4}), saved to {}",
        losses.len(),
        losses.first().copied().unwrap_or(f64::NAN),
        losses.last().copied().unwrap_or(f64::NAN),
        cfg.generator.checkpoint.display()
    );
    Ok(())
}

fn cmd_finetune_gan(cfg: &ExperimentConfig) -> Result<()> {
    let dataset = cfg.load_dataset()?;
    if !cfg.generator.checkpoint.exists() {
        return Err(Error::data(format!(
            "generator checkpoint not found at {} (run train-generator or point [generator].checkpoint at one)",
            cfg.generator.checkpoint.display()
        )));
    }
    let (generator, _) = checkpoint::load_generator(&cfg.generator.checkpoint)?;
    let extractor = ToyPerceptualNet::new(&mut derive_rng(cfg.train.seed, "perceptual", 0));
    let cache = GeneratedCache::new(&cfg.paths.cache_dir)?;
    let config_hash = adapt_config_hash(
        &cfg.adapt,
        &cfg.generator.checkpoint.display().to_string(),
    );
    let images: Vec<&ImageTensor> = dataset.images().iter().map(|li| &li.image).collect();
    let report = populate_cache(
        &images,
        &generator,
        &extractor,
        &cfg.adapt,
        &config_hash,
        &cache,
        cfg.train.seed,
    )?;
    println!(
        "cache at {}: adapted {} images, {} already complete ({} variants each)",
        cfg.paths.cache_dir.display(),
        report.adapted,
        report.skipped,
        cfg.adapt.num_variants
    );
    Ok(())
}

fn cmd_meta_train(cfg: &ExperimentConfig) -> Result<()> {
    let (dataset, split) = load_context(cfg)?;
    let cache = GeneratedCache::new(&cfg.paths.cache_dir)?;
    let train_cfg = cfg.train_config();
    let mut init_rng = derive_rng(cfg.train.seed, "init", 0);
    let fusion = FusionNetwork::new(cfg.fusion.grid, cfg.fusion.encoder_width, &mut init_rng);
    let embedder = match &cfg.backbone.checkpoint {
        Some(path) => {
            let loaded = checkpoint::load_model(path)?;
            loaded.embedder
        }
        None => EmbeddingNetwork::new(cfg.backbone.width, &mut init_rng),
    };
    let (fusion, embedder, report) = run_meta_training(
        &train_cfg,
        &dataset,
        &split,
        Some(&cache),
        fusion,
        embedder,
    )?;
    for (epoch, acc) in report.epoch_val_accuracies.iter().enumerate() {
        println!("epoch {:>3}: val accuracy {acc:.2}%", epoch + 1);
    }
    println!(
        "best epoch {} with val accuracy {:.2}%",
        report.best_epoch, report.best_val_accuracy
    );

    let path = model_path(cfg, None);
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let meta = ModelMeta {
        config_hash: cfg.config_hash(),
        val_accuracy: report.best_val_accuracy,
        mode: cfg.train.mode.as_str().to_string(),
        squared_distance: cfg.backbone.squared_distance,
        grid: cfg.fusion.grid,
        encoder_width: cfg.fusion.encoder_width,
        backbone_width: cfg.backbone.width,
        image_size: cfg.dataset.image_size,
        n_aug: cfg.train.n_aug,
        flip_enabled: cfg.train.flip_enabled,
    };
    checkpoint::save_model(&path, &fusion, &embedder, &meta)?;
    println!("checkpoint written to {}", path.display());

    // Final validation report for the ledger with the selected model.
    let mut val_settings = cfg.eval_settings();
    val_settings.q = train_cfg.q;
    val_settings.episodes = cfg.train.val_episodes;
    val_settings.seed = cfg.train.seed;
    let (val_report, _) = evaluate_model(
        &fusion,
        &embedder,
        &dataset,
        &split.val,
        &val_settings,
        Some(&cache),
        false,
    )?;
    append_ledger(cfg, "meta-train", &val_settings, &val_report)?;
    Ok(())
}

fn append_ledger(
    cfg: &ExperimentConfig,
    stage: &str,
    settings: &EvalSettings,
    report: &EvalReport,
) -> Result<()> {
    let ledger = cfg.paths.output_dir.join("results.csv");
    append_row(
        &ledger,
        &LedgerRow {
            config_hash: cfg.config_hash(),
            mode: format!("{}:{}", stage, settings.mode.as_str()),
            n: settings.n,
            m: settings.m,
            q: settings.q,
            episodes: settings.episodes,
            mean_accuracy: report.mean_accuracy,
            ci95: report.ci95,
        },
    )
}

#[allow(clippy::too_many_arguments)]
fn cmd_evaluate(
    cfg: &ExperimentConfig,
    ckpt: Option<&Path>,
    mode: Option<&str>,
    episodes: Option<usize>,
    shot: Option<usize>,
    n_aug: Option<usize>,
    flip: bool,
    dump_weights: Option<&Path>,
) -> Result<()> {
    let (dataset, split) = load_context(cfg)?;
    let model = load_model_checkpoint(cfg, ckpt)?;
    let cache = GeneratedCache::new(&cfg.paths.cache_dir)?;
    let mut settings = cfg.eval_settings();
    if let Some(mode) = mode {
        settings.mode = parse_mode(mode)?;
    }
    if let Some(e) = episodes {
        settings.episodes = e;
    }
    if let Some(m) = shot {
        settings.m = m;
    }
    if let Some(a) = n_aug {
        settings.n_aug = a;
    }
    if flip {
        settings.flip_enabled = true;
    }
    let dump = dump_weights.is_some();
    let (report, records) = evaluate_model(
        &model.fusion,
        &model.embedder,
        &dataset,
        &split.novel,
        &settings,
        Some(&cache),
        dump,
    )?;
    println!(
        "{}-way {}-shot, mode {}: accuracy {:.2} +- {:.2} over {} episodes",
        settings.n,
        settings.m,
        settings.mode.as_str(),
        report.mean_accuracy,
        report.ci95,
        report.episode_count
    );
    if let Some(path) = dump_weights {
        let mut writer = csv::Writer::from_path(path)
            .map_err(|e| Error::data(format!("weight dump: {e}")))?;
        writer
            .write_record(["episode", "image_hash", "weights"])
            .map_err(|e| Error::data(e.to_string()))?;
        for rec in &records {
            let weights = rec
                .weights
                .iter()
                .map(|w| format!("{w:.6}"))
                .collect::<Vec<_>>()
                .join(" ");
            writer
                .write_record([&rec.episode.to_string(), &rec.image_hash, &weights])
                .map_err(|e| Error::data(e.to_string()))?;
        }
        writer.flush().map_err(|e| Error::data(e.to_string()))?;
        println!("wrote {} weight grids to {}", records.len(), path.display());
    }
    append_ledger(cfg, "evaluate", &settings, &report)
}

fn cmd_evaluate_probes(
    cfg: &ExperimentConfig,
    ckpt: Option<&Path>,
    episodes: Option<usize>,
) -> Result<()> {
    let (dataset, split) = load_context(cfg)?;
    let model = load_model_checkpoint(cfg, ckpt)?;
    let cache = GeneratedCache::new(&cfg.paths.cache_dir)?;
    let settings = ProbeSettings {
        n: cfg.episode.way,
        m: cfg.episode.shot,
        q: cfg.episode.query,
        episodes: episodes.unwrap_or(cfg.eval.probe_episodes),
        seed: cfg.eval.seed,
        pattern: cfg.augmentation.manual_pattern_array()?,
    };
    let outcomes = evaluate_frozen_probes(
        &model.embedder,
        &dataset,
        &split.novel,
        &settings,
        &cache,
    )?;
    println!(
        "{:<26} {:<22} accuracy",
        "training data", "classifier"
    );
    let ledger = cfg.paths.output_dir.join("results.csv");
    for outcome in &outcomes {
        println!(
            "{:<26} {:<22} {:.2} +- {:.2}",
            outcome.data.as_str(),
            outcome.classifier.as_str(),
            outcome.report.mean_accuracy,
            outcome.report.ci95
        );
        append_row(
            &ledger,
            &LedgerRow {
                config_hash: cfg.config_hash(),
                mode: format!(
                    "probes:{}:{}",
                    outcome.data.as_str(),
                    outcome.classifier.as_str()
                ),
                n: settings.n,
                m: settings.m,
                q: settings.q,
                episodes: settings.episodes,
                mean_accuracy: outcome.report.mean_accuracy,
                ci95: outcome.report.ci95,
            },
        )?;
    }
    Ok(())
}

fn cmd_sweep_naug(
    cfg: &ExperimentConfig,
    ckpt: Option<&Path>,
    values: &str,
    episodes: Option<usize>,
) -> Result<()> {
    let parsed: Vec<usize> = values
        .split(',')
        .map(|v| {
            v.trim()
                .parse::<usize>()
                .map_err(|_| Error::config(format!("bad n_aug value `{v}`")))
        })
        .collect::<Result<_>>()?;
    if parsed.is_empty() {
        return Err(Error::config("sweep needs at least one n_aug value"));
    }
    let (dataset, split) = load_context(cfg)?;
    let model = load_model_checkpoint(cfg, ckpt)?;
    let cache = GeneratedCache::new(&cfg.paths.cache_dir)?;
    let mut settings = cfg.eval_settings();
    if let Some(e) = episodes {
        settings.episodes = e;
    }
    let sweep = run_naug_sweep(
        &model.fusion,
        &model.embedder,
        &dataset,
        &split.novel,
        &settings,
        &parsed,
        Some(&cache),
    )?;
    for (n_aug, report) in &sweep {
        println!(
            "n_aug {}: accuracy {:.2} +- {:.2} over {} episodes",
            n_aug, report.mean_accuracy, report.ci95, report.episode_count
        );
        let mut row_settings = settings.clone();
        row_settings.n_aug = *n_aug;
        append_ledger(cfg, "sweep-naug", &row_settings, report)?;
    }
    Ok(())
}

fn cmd_export_sets(
    cfg: &ExperimentConfig,
    ckpt: Option<&Path>,
    out: &Path,
    split_name: &str,
    limit: Option<usize>,
) -> Result<()> {
    let (dataset, split) = load_context(cfg)?;
    let model = load_model_checkpoint(cfg, ckpt)?;
    let cache = GeneratedCache::new(&cfg.paths.cache_dir)?;
    let pool = match split_name {
        "base" => &split.base,
        "val" => &split.val,
        "novel" => &split.novel,
        other => {
            return Err(Error::config(format!(
                "unknown split `{other}` (expected base, val, or novel)"
            )))
        }
    };
    let limit = limit.unwrap_or(cfg.analysis.per_set_limit);
    let mut originals = Vec::new();
    let mut generated = Vec::new();
    let mut fused = Vec::new();
    let mut weight_rows: Vec<(String, Vec<f64>)> = Vec::new();
    for li in dataset.images() {
        if !pool.contains(&li.label) || originals.len() >= limit {
            continue;
        }
        if cache.variant_count(&li.image) == 0 {
            return Err(Error::data(format!(
                "no cached variants for image {} (run finetune-gan first)",
                li.image.content_hash()
            )));
        }
        let gen = cache.variant(&li.image, 0)?;
        let grid = model.fusion.predict_weight_grid(&li.image, &gen)?;
        let map = expand_weight_grid(&grid, li.image.height(), li.image.width())?;
        let fused_img = fuse_images(&li.image, &gen, &map)?;
        weight_rows.push((
            li.image.content_hash(),
            grid.weights().iter().copied().collect(),
        ));
        originals.push(metairnet::data::LabeledImage {
            image: li.image.clone(),
            label: li.label,
        });
        generated.push(metairnet::data::LabeledImage {
            image: gen,
            label: li.label,
        });
        fused.push(metairnet::data::LabeledImage {
            image: fused_img,
            label: li.label,
        });
    }
    if originals.is_empty() {
        return Err(Error::data(format!(
            "split `{split_name}` contributed no images"
        )));
    }
    write_images_by_class(&originals, &out.join("original"))?;
    write_images_by_class(&generated, &out.join("generated"))?;
    write_images_by_class(&fused, &out.join("fused"))?;
    let weights_path = out.join("weights.csv");
    let mut writer = csv::Writer::from_path(&weights_path)
        .map_err(|e| Error::data(format!("weights table: {e}")))?;
    writer
        .write_record(["image_hash", "weights"])
        .map_err(|e| Error::data(e.to_string()))?;
    for (hash, weights) in &weight_rows {
        let w = weights
            .iter()
            .map(|v| format!("{v:.6}"))
            .collect::<Vec<_>>()
            .join(" ");
        writer
            .write_record([hash, &w])
            .map_err(|e| Error::data(e.to_string()))?;
    }
    writer.flush().map_err(|e| Error::data(e.to_string()))?;
    println!(
        "exported {} image triples and {} to {}",
        originals.len(),
        weights_path.display(),
        out.display()
    );
    Ok(())
}

/// Load an image set: class-per-subdirectory when subdirectories exist,
/// otherwise a flat directory of images (labels unavailable).
fn load_set(
    name: &str,
    dir: &Path,
    size: usize,
    range: ValueRange,
) -> Result<(Vec<ImageTensor>, Option<Vec<ClassId>>)> {
    if !dir.exists() {
        return Err(Error::data(format!(
            "{name} set path {} does not exist",
            dir.display()
        )));
    }
    let has_subdirs = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok())
        .any(|e| e.path().is_dir());
    if has_subdirs {
        let load = metairnet::data::load_image_directory(dir, (size, size), range)?;
        let images = load.images.iter().map(|li| li.image.clone()).collect();
        let labels = load.images.iter().map(|li| li.label).collect();
        Ok((images, Some(labels)))
    } else {
        let (images, _) = metairnet::data::load_flat_images(dir, (size, size), range)?;
        Ok((images, None))
    }
}

fn cmd_analyze(
    cfg: &ExperimentConfig,
    original: &Path,
    generated: &Path,
    fused: &Path,
    ckpt: Option<&Path>,
    out: Option<&Path>,
) -> Result<()> {
    let size = cfg.dataset.image_size;
    let range = cfg.value_range();
    let (orig_images, orig_labels) = load_set("original", original, size, range)?;
    let (gen_images, gen_labels) = load_set("generated", generated, size, range)?;
    let (fused_images, fused_labels) = load_set("fused", fused, size, range)?;
    let model = load_model_checkpoint(cfg, ckpt)?;
    let limit = cfg.analysis.per_set_limit;
    let cap = |v: &Vec<ImageTensor>| v.len().min(limit);
    let sets = [
        AnalysisSet {
            name: "original",
            images: &orig_images[..cap(&orig_images)],
            labels: orig_labels.as_deref().map(|l| &l[..cap(&orig_images)]),
        },
        AnalysisSet {
            name: "generated",
            images: &gen_images[..cap(&gen_images)],
            labels: gen_labels.as_deref().map(|l| &l[..cap(&gen_images)]),
        },
        AnalysisSet {
            name: "fused",
            images: &fused_images[..cap(&fused_images)],
            labels: fused_labels.as_deref().map(|l| &l[..cap(&fused_images)]),
        },
    ];
    let report = compare_sets(&sets, &model.embedder, cfg.analysis.top_k)?;
    let out_dir = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.paths.output_dir.join("analysis"));
    let written = write_report_artifacts(&report, &out_dir)?;
    for set in &report.sets {
        println!(
            "{:<10} pairs {:>6}  mean {:.4}  stddev {:.4}  top eigenvalue {:.4}",
            set.name,
            set.distances.pair_count,
            set.distances.mean,
            set.distances.stddev,
            set.spectrum.eigenvalues.first().copied().unwrap_or(0.0)
        );
        if let (Some(intra), Some(inter)) = (&set.intra, &set.inter) {
            println!(
                "{:<10} intra mean {:.4} ({} pairs), inter mean {:.4} ({} pairs)",
                "", intra.mean, intra.pair_count, inter.mean, inter.pair_count
            );
        }
    }
    println!("wrote {} artifacts to {}", written.len(), out_dir.display());
    Ok(())
}
