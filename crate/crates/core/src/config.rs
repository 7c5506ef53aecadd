//! Experiment configuration, read from JSON.
//!
//! Randomness flows from `seed` (the master seed) through named child
//! streams (see [`crate::rng`]):
//!
//! | stream                        | use                                  |
//! |-------------------------------|--------------------------------------|
//! | `partition/0`                 | partition shuffle                    |
//! | `data/0`                      | synthetic corpus (unless pinned)     |
//! | `initial/0` → `init/0`        | initial model parameters             |
//! | `initial/0` → `shuffle/0`     | initial model batch order            |
//! | `participant/i` → `shuffle/0` | participant `i` batch order          |
//! | `participant/i` → `noise/0`   | participant `i` DP noise             |

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{self, LabeledDataset, Partition, PartitionPlan};
use crate::error::{Error, Result};
use crate::federation::Participant;
use crate::nn::{self, LayerSpec};
use crate::optim::{DpConfig, SgdConfig};
use crate::rng::RngStream;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSource {
    /// One or more IDX image/label file pairs, concatenated in order.
    Idx { files: Vec<IdxFiles> },
    Synthetic {
        count: usize,
        classes: usize,
        height: usize,
        width: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdxFiles {
    pub images: PathBuf,
    pub labels: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionSizes {
    pub validation: usize,
    pub public: usize,
    pub train: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    /// Two conv/pool stages, a 32-unit dense layer and the class layer,
    /// sized to the dataset.
    Reference,
    Custom { layers: Vec<LayerSpec> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    pub partition: PartitionSizes,
    pub participants: usize,
    #[serde(default = "default_arch")]
    pub architecture: Architecture,
    /// Initial model (plain SGD).
    pub initial: SgdConfig,
    /// Private phase; its `batch_size` is superseded by `dp.minibatch_size`.
    pub private: SgdConfig,
    pub dp: DpConfig,
    /// Use only the first `n` training examples of every participant.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub private_train_limit: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ensemble_weights: Option<Vec<f64>>,
    pub seed: u64,
    #[serde(default = "default_out")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub record_curves: bool,
}

fn default_arch() -> Architecture {
    Architecture::Reference
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

/// Scalar overrides; each one that is set replaces the config value.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub noise_multiplier: Option<f64>,
    pub clip_threshold: Option<f64>,
    pub epochs: Option<usize>,
    pub batch: Option<usize>,
    pub participants: Option<usize>,
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    /// The MNIST setting: 70000 images split 28000 / 420 / 5 × (6653 + 1663),
    /// 60 epochs, mini-batch 250, clip 1.0, δ = 1e-4, learning rates 0.001
    /// (initial) and 0.15 (private).
    pub fn mnist(data_dir: &Path, noise_multiplier: f64, seed: u64) -> Self {
        let pair = |img: &str, lbl: &str| IdxFiles { images: data_dir.join(img), labels: data_dir.join(lbl) };
        ExperimentConfig {
            dataset: DatasetSource::Idx {
                files: vec![
                    pair("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
                    pair("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
                ],
            },
            partition: PartitionSizes { validation: 28000, public: 420, train: 6653, test: 1663 },
            participants: 5,
            architecture: Architecture::Reference,
            initial: SgdConfig { learning_rate: 0.001, epochs: 60, batch_size: 250 },
            private: SgdConfig { learning_rate: 0.15, epochs: 60, batch_size: 250 },
            dp: DpConfig { noise_multiplier, clip_threshold: 1.0, minibatch_size: 250, delta: 1e-4 },
            private_train_limit: None,
            ensemble_weights: None,
            seed,
            output_dir: default_out(),
            record_curves: false,
        }
    }

    /// 15000 synthetic 32×32 images in 3 classes split 6000 / 90 /
    /// 5 × (1426 + 356), 200 epochs, batch 18, clip 1.0, δ = 7e-4, learning
    /// rates 0.001 and 0.015.
    pub fn synthetic_lung(noise_multiplier: f64, seed: u64) -> Self {
        ExperimentConfig {
            dataset: DatasetSource::Synthetic { count: 15000, classes: 3, height: 32, width: 32, seed: None },
            partition: PartitionSizes { validation: 6000, public: 90, train: 1426, test: 356 },
            participants: 5,
            architecture: Architecture::Reference,
            initial: SgdConfig { learning_rate: 0.001, epochs: 200, batch_size: 18 },
            private: SgdConfig { learning_rate: 0.015, epochs: 200, batch_size: 18 },
            dp: DpConfig { noise_multiplier, clip_threshold: 1.0, minibatch_size: 18, delta: 7e-4 },
            private_train_limit: None,
            ensemble_weights: None,
            seed,
            output_dir: default_out(),
            record_curves: false,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&text)?;
        // relative data paths are taken from the config file's directory
        if let (DatasetSource::Idx { files }, Some(base)) = (&mut cfg.dataset, path.parent()) {
            for f in files {
                for p in [&mut f.images, &mut f.labels] {
                    if p.is_relative() && !p.exists() {
                        *p = base.join(&*p);
                    }
                }
            }
        }
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(v) = o.seed {
            self.seed = v;
        }
        if let Some(v) = o.noise_multiplier {
            self.dp.noise_multiplier = v;
        }
        if let Some(v) = o.clip_threshold {
            self.dp.clip_threshold = v;
        }
        if let Some(v) = o.epochs {
            self.private.epochs = v;
        }
        if let Some(v) = o.batch {
            self.dp.minibatch_size = v;
            self.private.batch_size = v;
        }
        if let Some(v) = o.participants {
            self.participants = v;
        }
        if let Some(v) = &o.output_dir {
            self.output_dir = v.clone();
        }
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |e: Error| Error::Config(e.to_string());
        self.initial.validate().map_err(wrap)?;
        self.private.validate().map_err(wrap)?;
        self.dp.validate().map_err(wrap)?;
        if self.participants == 0 {
            return Err(Error::Config("participants must be at least 1".into()));
        }
        if let Some(w) = &self.ensemble_weights {
            if w.len() != self.participants {
                return Err(Error::Config(format!("{} ensemble weights for {} participants", w.len(), self.participants)));
            }
        }
        if self.private_train_limit == Some(0) {
            return Err(Error::Config("private_train_limit must be positive".into()));
        }
        Ok(())
    }

    pub fn partition_plan(&self) -> PartitionPlan {
        PartitionPlan {
            validation_size: self.partition.validation,
            public_size: self.partition.public,
            per_participant_train: self.partition.train,
            per_participant_test: self.partition.test,
            participant_count: self.participants,
            seed: RngStream::new(self.seed).derive("partition", 0).seed(),
        }
    }

    pub fn load_dataset(&self) -> Result<LabeledDataset> {
        match &self.dataset {
            DatasetSource::Idx { files } => {
                if files.is_empty() {
                    return Err(Error::Config("no IDX files listed".into()));
                }
                let parts = files
                    .iter()
                    .map(|f| data::load_idx(&f.images, &f.labels))
                    .collect::<Result<Vec<_>>>()?;
                LabeledDataset::concat(&parts)
            }
            &DatasetSource::Synthetic { count, classes, height, width, seed } => {
                let seed = seed.unwrap_or_else(|| RngStream::new(self.seed).derive("data", 0).seed());
                data::synth_dataset(seed, count, classes, height, width)
            }
        }
    }

    /// Layer chain and input shape for `dataset`.
    pub fn architecture(&self, dataset: &LabeledDataset) -> Result<(Vec<LayerSpec>, Vec<usize>)> {
        let shape = dataset.sample_shape().to_vec();
        match &self.architecture {
            Architecture::Reference => {
                if shape[2] != 1 {
                    return Err(Error::Config("the reference architecture expects one channel".into()));
                }
                Ok(nn::reference_image(shape[0], shape[1], dataset.class_count()))
            }
            Architecture::Custom { layers } => Ok((layers.clone(), shape)),
        }
    }

    /// Participants with their data slices and random streams.
    pub fn participants_from(&self, parts: &Partition, master: &RngStream) -> Vec<Participant> {
        parts
            .participants
            .iter()
            .enumerate()
            .map(|(i, (train, test))| Participant {
                id: i + 1,
                train: match self.private_train_limit {
                    Some(n) => train.take(n),
                    None => train.clone(),
                },
                test: test.clone(),
                dp: self.dp,
                sgd: self.private,
                rng: master.derive("participant", i as u64 + 1),
            })
            .collect()
    }
}
