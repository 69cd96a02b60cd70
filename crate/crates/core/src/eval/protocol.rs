//! The fixed recipe behind the exhaustive conv micro-benchmark: dataset,
//! train/test split, training budget and scoring options.

use std::path::Path;

use super::cache::{BenchmarkCache, TrainingSetup};
use super::rank::{rank_space, train_all, ScoreOptions, Scorer};
use super::train::{LrSchedule, TrainConfig};
use crate::data::{gen_dataset, DatasetBundle, GenParams, GeneratorKind};
use crate::error::Result;
use crate::loss::LossKind;
use crate::space::{ArchId, CellSpace};

#[derive(Clone, Debug, PartialEq)]
pub struct BenchmarkProtocol {
    pub space: CellSpace,
    pub generator: GeneratorKind,
    pub params: GenParams,
    pub data_seed: u64,
    /// Leading rows used for training and scoring; the rest is the test set.
    pub train_samples: usize,
    pub training: TrainConfig,
    pub scoring: ScoreOptions,
}

impl BenchmarkProtocol {
    /// 96 architectures, 4-class image patches at noise 1.2, 1000 training
    /// and 500 test images, 20 epochs of cosine-decayed SGD.
    pub fn conv_micro() -> Self {
        let space = CellSpace::default_conv();
        BenchmarkProtocol {
            generator: GeneratorKind::ImagePatches,
            params: GenParams {
                samples: 1500,
                input: space.input,
                classes: space.output,
                noise: 1.2,
                normalize: true,
            },
            space,
            data_seed: 1,
            train_samples: 1000,
            training: TrainConfig {
                epochs: 20,
                lr: 50.0,
                batch_size: 32,
                seed: 0,
                schedule: LrSchedule::Cosine,
            },
            scoring: ScoreOptions {
                loss: LossKind::Mse,
                batch_size: 64,
                batch_seed: 0,
            },
        }
    }

    pub fn dataset(&self) -> Result<DatasetBundle> {
        gen_dataset(self.generator, &self.params, self.data_seed)
    }

    pub fn splits(&self) -> Result<(DatasetBundle, DatasetBundle)> {
        self.dataset()?.split(self.train_samples)
    }

    pub fn setup(&self) -> TrainingSetup {
        TrainingSetup {
            config: self.training,
            train_samples: self.train_samples,
        }
    }

    /// Loads the cache at `path`, scoring and training whatever is missing
    /// and saving after each phase.
    pub fn ground_truth(&self, path: &Path) -> Result<BenchmarkCache> {
        let data = self.dataset()?;
        let (train, test) = data.split(self.train_samples)?;
        let mut cache = BenchmarkCache::open(path, &self.space, &data.meta)?;
        if cache.header.scoring.is_none() {
            let scores = rank_space(&self.space, &train.x, &train.y, &[Scorer::Exact, Scorer::Approx], &self.scoring)?;
            cache.merge_scores(&scores, self.train_samples, &self.scoring)?;
            cache.write(path)?;
        }
        let setup = self.setup();
        let pending = cache.pending_training(&setup)?;
        if !pending.is_empty() {
            let archs = pending
                .iter()
                .map(|&r| ArchId::unrank(&self.space, r as u128))
                .collect::<Result<Vec<_>>>()?;
            let results = train_all(&self.space, &archs, (&train.x, &train.y), (&test.x, &test.y), &setup.config)?;
            cache.ranked.attach_training(&results)?;
            cache.header.training = Some(setup);
            cache.write(path)?;
        }
        Ok(cache)
    }
}
