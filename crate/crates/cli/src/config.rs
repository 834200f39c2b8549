//! The JSON run configuration: `model`, `train`, `data` and `ablate`
//! sections, unknown keys rejected.

use std::fs;
use std::path::{Path, PathBuf};

use pointvector::dataio::{
    classification_dataset, load_manifest_dataset, load_manifest_split, segmentation_dataset, ClassificationSpec,
    SceneSpec,
};
use pointvector::model::{Model, ModelConfig, Task};
use pointvector::setabs::Aggregation;
use pointvector::train::{Dataset, Sample, Split, TrainConfig};
use pointvector::vecenc::EncoderKind;
use pointvector::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Split manifest; relative paths resolve against the config file.
    pub manifest: Option<PathBuf>,
    /// Synthetic segmentation scenes when no manifest is given.
    pub scene: SceneSpec,
    pub train_scenes: usize,
    pub val_scenes: usize,
    /// Synthetic classification clouds when no manifest is given.
    pub clouds: ClassificationSpec,
    pub val_clouds: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            scene: SceneSpec::default(),
            train_scenes: 200,
            val_scenes: 40,
            clouds: ClassificationSpec::default(),
            val_clouds: 24,
        }
    }
}

/// Axes of an ablation sweep. An empty axis keeps the base model value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateConfig {
    pub aggregation: Vec<Aggregation>,
    pub encoder: Vec<EncoderKind>,
    pub vector_dim: Vec<usize>,
    pub seeds: Vec<u64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub ablate: AblateConfig,
    /// Directory the config was read from, for relative data paths.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("invalid config {}: {e}", path.display())))?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        Model::new(self.model.clone())?;
        self.train.validate()?;
        if self.data.manifest.is_none() {
            match self.model.task {
                Task::Segmentation => {
                    self.data.scene.validate()?;
                    if self.data.train_scenes == 0 {
                        return Err(Error::Config("data.train_scenes must be positive".into()));
                    }
                }
                Task::Classification => {
                    if self.data.clouds.num_clouds < 2 {
                        return Err(Error::Config("data.clouds.num_clouds must be at least 2".into()));
                    }
                }
            }
        }
        for &m in &self.ablate.vector_dim {
            pointvector::vecenc::check_vector_dim(m)?;
        }
        Ok(())
    }

    fn manifest_path(&self) -> Option<PathBuf> {
        self.data.manifest.as_ref().map(|m| self.base_dir.join(m))
    }

    /// Train and validation samples.
    pub fn dataset(&self) -> Result<Dataset> {
        if let Some(m) = self.manifest_path() {
            return load_manifest_dataset(m, self.model.task);
        }
        match self.model.task {
            Task::Segmentation => segmentation_dataset(&self.data.scene, self.data.train_scenes, self.data.val_scenes),
            Task::Classification => classification_dataset(&self.data.clouds, self.data.val_clouds),
        }
    }

    /// Samples of one split; synthetic data has no test split, so `test`
    /// falls back to validation.
    pub fn split(&self, split: Split) -> Result<Vec<Sample>> {
        if let Some(m) = self.manifest_path() {
            return load_manifest_split(m, self.model.task, split);
        }
        let d = self.dataset()?;
        Ok(match split {
            Split::Train => d.train,
            Split::Val | Split::Test => d.val,
        })
    }
}
