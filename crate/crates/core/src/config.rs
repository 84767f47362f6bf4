//! Experiment configuration: a single TOML file with sections for data,
//! splits, episode shape, generation, fusion, backbone, training, and
//! evaluation. Unknown keys are rejected; a content hash identifies the
//! config; path fields accept environment-variable overrides.

use crate::baselines::{AugmentationMode, AugmentationSpec};
use crate::data::{
    build_class_splits, load_image_directory, load_manifest, ClassSplit, Dataset, SplitSpec,
    ValueRange,
};
use crate::error::{Error, Result};
use crate::generator::{AdaptConfig, GeneratorArch, ScratchTrainConfig};
use crate::train::{EvalSettings, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub root: PathBuf,
    /// Optional `path<TAB>class_id` manifest; otherwise the root is a
    /// class-per-subdirectory tree.
    pub manifest: Option<PathBuf>,
    pub image_size: usize,
    pub value_min: f64,
    pub value_max: f64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            root: PathBuf::from("data"),
            manifest: None,
            image_size: 64,
            value_min: -1.0,
            value_max: 1.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSection {
    pub base: Vec<u32>,
    pub val: Vec<u32>,
    pub novel: Vec<u32>,
    /// When set, overrides the explicit lists.
    pub ratios: Option<[f64; 3]>,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpisodeSection {
    pub way: usize,
    pub shot: usize,
    pub query: usize,
}

impl Default for EpisodeSection {
    fn default() -> Self {
        EpisodeSection {
            way: 5,
            shot: 1,
            query: 16,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorSection {
    pub checkpoint: PathBuf,
    pub latent_dim: usize,
    pub embed_dim: usize,
    pub base_width: usize,
    pub conditional_bn: bool,
    pub scratch: ScratchTrainConfig,
}

impl Default for GeneratorSection {
    fn default() -> Self {
        GeneratorSection {
            checkpoint: PathBuf::from("out/generator.ckpt"),
            latent_dim: 16,
            embed_dim: 16,
            base_width: 8,
            conditional_bn: true,
            scratch: ScratchTrainConfig::default(),
        }
    }
}

impl GeneratorSection {
    pub fn arch(&self, image_size: usize) -> GeneratorArch {
        GeneratorArch {
            latent_dim: self.latent_dim,
            embed_dim: self.embed_dim,
            base_width: self.base_width,
            image_size,
            conditional_bn: self.conditional_bn,
            use_batch_norm: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionSection {
    pub grid: usize,
    pub encoder_width: usize,
}

impl Default for FusionSection {
    fn default() -> Self {
        FusionSection {
            grid: 3,
            encoder_width: 8,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneSection {
    /// Only `conv4` is built in; larger encoders arrive via `checkpoint`.
    pub kind: String,
    pub width: usize,
    pub squared_distance: bool,
    /// Optional externally pretrained encoder checkpoint to start from.
    pub checkpoint: Option<PathBuf>,
}

impl Default for BackboneSection {
    fn default() -> Self {
        BackboneSection {
            kind: "conv4".into(),
            width: 32,
            squared_distance: false,
            checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub mode: AugmentationMode,
    pub flip_enabled: bool,
    pub learning_rate: f64,
    pub epochs: usize,
    pub episodes_per_epoch: usize,
    pub val_episodes: usize,
    pub n_aug: usize,
    /// Training-time query count; defaults to the episode query count.
    pub query: Option<usize>,
    pub seed: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            mode: AugmentationMode::Metairnet,
            flip_enabled: false,
            learning_rate: 0.001,
            epochs: 10,
            episodes_per_epoch: 100,
            val_episodes: 50,
            n_aug: 1,
            query: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub episodes: usize,
    pub probe_episodes: usize,
    pub seed: u64,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            episodes: 1000,
            probe_episodes: 2000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisSection {
    /// Eigenvalues reported per set.
    pub top_k: usize,
    /// Cap on images per analysis set.
    pub per_set_limit: usize,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        AnalysisSection {
            top_k: 20,
            per_set_limit: 200,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    pub cache_dir: PathBuf,
    pub output_dir: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        PathsSection {
            cache_dir: PathBuf::from("cache"),
            output_dir: PathBuf::from("out"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSection,
    pub split: SplitSection,
    pub episode: EpisodeSection,
    pub adapt: AdaptConfig,
    pub generator: GeneratorSection,
    pub fusion: FusionSection,
    pub backbone: BackboneSection,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub augmentation: AugmentationSpec,
    pub analysis: AnalysisSection,
    pub paths: PathsSection,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let mut cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::config(format!("config parse: {e}")))?;
        cfg.apply_env_overrides();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    /// Path fields overridable from the environment.
    fn apply_env_overrides(&mut self) {
        if let Ok(v) = std::env::var("METAIRNET_DATA_ROOT") {
            self.dataset.root = PathBuf::from(v);
        }
        if let Ok(v) = std::env::var("METAIRNET_CACHE_DIR") {
            self.paths.cache_dir = PathBuf::from(v);
        }
        if let Ok(v) = std::env::var("METAIRNET_OUTPUT_DIR") {
            self.paths.output_dir = PathBuf::from(v);
        }
        if let Ok(v) = std::env::var("METAIRNET_GENERATOR_CHECKPOINT") {
            self.generator.checkpoint = PathBuf::from(v);
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dataset.value_min >= self.dataset.value_max {
            return Err(Error::config("dataset value range is empty"));
        }
        if self.dataset.image_size < 8 {
            return Err(Error::config("image_size must be at least 8"));
        }
        if self.episode.way == 0 || self.episode.shot == 0 || self.episode.query == 0 {
            return Err(Error::config("episode shape must be positive"));
        }
        if self.backbone.kind != "conv4" {
            return Err(Error::config(format!(
                "unsupported backbone kind `{}` (supported: conv4)",
                self.backbone.kind
            )));
        }
        if self.fusion.grid == 0 {
            return Err(Error::config("fusion grid size must be positive"));
        }
        self.adapt.validate()?;
        Ok(())
    }

    /// Content hash identifying this configuration.
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&json);
        digest
            .iter()
            .take(8)
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// One seed drives every stage when set from the command line.
    pub fn override_seed(&mut self, seed: u64) {
        self.split.seed = seed;
        self.train.seed = seed;
        self.eval.seed = seed;
    }

    pub fn value_range(&self) -> ValueRange {
        ValueRange {
            lo: self.dataset.value_min,
            hi: self.dataset.value_max,
        }
    }

    pub fn split_spec(&self) -> SplitSpec {
        match self.split.ratios {
            Some(ratios) => SplitSpec::Ratios {
                ratios,
                seed: self.split.seed,
            },
            None => SplitSpec::Explicit {
                base: self.split.base.clone(),
                val: self.split.val.clone(),
                novel: self.split.novel.clone(),
            },
        }
    }

    /// Load the dataset named by the config.
    pub fn load_dataset(&self) -> Result<Dataset> {
        let size = (self.dataset.image_size, self.dataset.image_size);
        let range = self.value_range();
        let load = match &self.dataset.manifest {
            Some(manifest) => load_manifest(manifest, Some(&self.dataset.root), size, range)?,
            None => load_image_directory(&self.dataset.root, size, range)?,
        };
        if !load.report.skipped.is_empty() {
            log::warn!("ingestion skipped {} files", load.report.skipped.len());
        }
        Dataset::new(load.images)
    }

    pub fn build_split(&self, dataset: &Dataset) -> Result<ClassSplit> {
        build_class_splits(&dataset.classes(), &self.split_spec())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            n: self.episode.way,
            m: self.episode.shot,
            q: self.train.query.unwrap_or(self.episode.query),
            episodes_per_epoch: self.train.episodes_per_epoch,
            epochs: self.train.epochs,
            val_episodes: self.train.val_episodes,
            learning_rate: self.train.learning_rate,
            n_aug: self.train.n_aug,
            mode: self.train.mode,
            flip_enabled: self.train.flip_enabled,
            squared_distance: self.backbone.squared_distance,
            seed: self.train.seed,
            augmentation: self.augmentation.clone(),
        }
    }

    pub fn eval_settings(&self) -> EvalSettings {
        EvalSettings {
            n: self.episode.way,
            m: self.episode.shot,
            q: self.episode.query,
            episodes: self.eval.episodes,
            seed: self.eval.seed,
            mode: self.train.mode,
            n_aug: self.train.n_aug,
            flip_enabled: self.train.flip_enabled,
            squared_distance: self.backbone.squared_distance,
            augmentation: self.augmentation.clone(),
        }
    }
}
