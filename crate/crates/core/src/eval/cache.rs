//! On-disk benchmark cache: a header line followed by one [`RankedEntry`]
//! per architecture, as JSON lines.
//!
//! Columns are only ever added. Re-scoring a column that is already present
//! must reproduce the stored values, and training outcomes are reused when
//! the training setup matches.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::rank::{RankedEntry, RankedSpace, ScoreOptions};
use super::train::TrainConfig;
use crate::data::DatasetMeta;
use crate::error::{Error, Result};
use crate::io::{atomic_write, to_json_lines};
use crate::space::CellSpace;

pub const CACHE_SCHEMA: u32 = 1;

/// Relative tolerance when re-scored values are compared with the cache.
pub const RESCORE_TOLERANCE: f64 = 1e-9;

/// How the ground-truth errors were produced.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSetup {
    pub config: TrainConfig,
    /// Leading rows of the dataset used for training; the rest is the test set.
    pub train_samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CacheHeader {
    pub schema: u32,
    pub space: CellSpace,
    pub data: DatasetMeta,
    /// Leading rows of the dataset used for scoring.
    pub scored_samples: Option<usize>,
    pub scoring: Option<ScoreOptions>,
    pub training: Option<TrainingSetup>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchmarkCache {
    pub header: CacheHeader,
    pub ranked: RankedSpace,
}

impl BenchmarkCache {
    pub fn new(space: &CellSpace, data: &DatasetMeta) -> Result<Self> {
        Ok(BenchmarkCache {
            header: CacheHeader {
                schema: CACHE_SCHEMA,
                space: space.clone(),
                data: data.clone(),
                scored_samples: None,
                scoring: None,
                training: None,
            },
            ranked: RankedSpace::skeleton(space)?,
        })
    }

    /// Reads `path`, or starts an empty cache if it does not exist. An
    /// existing cache must describe the same space and dataset.
    pub fn open(path: &Path, space: &CellSpace, data: &DatasetMeta) -> Result<Self> {
        if !path.exists() {
            return Self::new(space, data);
        }
        let cache = Self::read(path)?;
        if &cache.header.space != space || &cache.header.data != data {
            return Err(Error::InvalidArgument(format!(
                "cache {} was built for a different space or dataset",
                path.display()
            )));
        }
        Ok(cache)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let parse = |line: &str, i: usize| Error::Parse {
            what: format!("benchmark cache {}", path.display()),
            detail: format!("line {}: {line}", i + 1),
        };
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (i, first) = lines.next().ok_or_else(|| parse("empty file", 0))?;
        let header: CacheHeader = serde_json::from_str(first).map_err(|e| parse(&e.to_string(), i))?;
        if header.schema != CACHE_SCHEMA {
            return Err(parse(&format!("unsupported schema {}", header.schema), i));
        }
        let entries = lines
            .map(|(i, l)| serde_json::from_str::<RankedEntry>(l).map_err(|e| parse(&e.to_string(), i)))
            .collect::<Result<Vec<_>>>()?;
        let skeleton = RankedSpace::skeleton(&header.space)?;
        if entries.len() != skeleton.len() || entries.iter().zip(&skeleton.entries).any(|(a, b)| a.arch != b.arch) {
            return Err(parse("entries do not cover the space in canonical order", i));
        }
        Ok(BenchmarkCache {
            header,
            ranked: RankedSpace { entries },
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string(&self.header).expect("header serializes");
        text.push('\n');
        text.push_str(&to_json_lines(&self.ranked.entries));
        atomic_write(path, text.as_bytes())
    }

    /// Adds freshly computed score columns, checking any column that was
    /// already cached.
    pub fn merge_scores(&mut self, fresh: &RankedSpace, scored_samples: usize, opts: &ScoreOptions) -> Result<()> {
        if let Some(old) = self.header.scoring {
            if old != *opts || self.header.scored_samples != Some(scored_samples) {
                return Err(Error::InvalidArgument(
                    "cache was scored with different options; use a new cache file".into(),
                ));
            }
        }
        for (e, f) in self.ranked.entries.iter_mut().zip(&fresh.entries) {
            for (slot, new) in [
                (&mut e.trace_exact, f.trace_exact),
                (&mut e.trace_approx, f.trace_approx),
                (&mut e.snip, f.snip),
                (&mut e.synflow, f.synflow),
            ] {
                match (*slot, new) {
                    (Some(old), Some(v)) if !close(old, v) => {
                        return Err(Error::InvalidArgument(format!(
                            "arch {}: re-scored value {v} differs from cached {old}",
                            e.rank
                        )))
                    }
                    (None, Some(v)) => *slot = Some(v),
                    _ => {}
                }
            }
        }
        self.header.scoring = Some(*opts);
        self.header.scored_samples = Some(scored_samples);
        Ok(())
    }

    /// Whether every architecture already has a test error under `setup`.
    pub fn has_training(&self, setup: &TrainingSetup) -> bool {
        self.header.training.as_ref() == Some(setup) && self.ranked.entries.iter().all(|e| e.test_error.is_some())
    }

    /// Ranks that still lack a test error; fails if the cache was trained
    /// under a different setup.
    pub fn pending_training(&self, setup: &TrainingSetup) -> Result<Vec<u64>> {
        if let Some(old) = &self.header.training {
            if old != setup {
                return Err(Error::InvalidArgument(
                    "cache was trained with a different setup; use a new cache file".into(),
                ));
            }
        }
        Ok(self.ranked.entries.iter().filter(|e| e.test_error.is_none()).map(|e| e.rank).collect())
    }
}

fn close(a: f64, b: f64) -> bool {
    a == b || (a - b).abs() <= RESCORE_TOLERANCE * a.abs().max(b.abs())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_dataset, GenParams, GeneratorKind};
    use crate::eval::{rank_space, Scorer, TrainResult};
    use crate::loss::LossKind;

    fn setup() -> (CellSpace, crate::data::DatasetBundle) {
        let mut space = CellSpace::default_dense();
        space.nodes = 3;
        let p = GenParams {
            samples: 16,
            input: space.input,
            classes: 4,
            noise: 0.3,
            normalize: true,
        };
        (space.clone(), gen_dataset(GeneratorKind::Blobs, &p, 3).unwrap())
    }

    #[test]
    fn round_trip_and_verified_rescore() {
        let (space, data) = setup();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        let opts = ScoreOptions {
            loss: LossKind::Mse,
            batch_size: 8,
            batch_seed: 1,
        };
        let scores = rank_space(&space, &data.x, &data.y, &[Scorer::Approx], &opts).unwrap();
        let mut cache = BenchmarkCache::open(&path, &space, &data.meta).unwrap();
        cache.merge_scores(&scores, 16, &opts).unwrap();
        cache.write(&path).unwrap();

        let mut again = BenchmarkCache::open(&path, &space, &data.meta).unwrap();
        assert_eq!(again, cache);
        again.merge_scores(&scores, 16, &opts).unwrap();

        let mut tampered = scores.clone();
        tampered.entries[0].trace_approx = Some(tampered.entries[0].trace_approx.unwrap() * 2.0 + 1.0);
        assert!(again.merge_scores(&tampered, 16, &opts).is_err());
        let other = ScoreOptions { batch_seed: 2, ..opts };
        assert!(again.merge_scores(&scores, 16, &other).is_err());
    }

    #[test]
    fn training_is_reused_only_for_the_same_setup() {
        let (space, data) = setup();
        let mut cache = BenchmarkCache::new(&space, &data.meta).unwrap();
        let setup = TrainingSetup {
            config: TrainConfig::default(),
            train_samples: 10,
        };
        assert_eq!(cache.pending_training(&setup).unwrap().len(), 8);
        let done: Vec<_> = (0..8)
            .map(|r| {
                (
                    r,
                    TrainResult {
                        test_error: 0.5,
                        final_loss: 1.0,
                        diverged: false,
                    },
                )
            })
            .collect();
        cache.ranked.attach_training(&done).unwrap();
        cache.header.training = Some(setup);
        assert!(cache.has_training(&setup));
        assert!(cache.pending_training(&setup).unwrap().is_empty());
        let other = TrainingSetup { train_samples: 12, ..setup };
        assert!(cache.pending_training(&other).is_err());
    }

    #[test]
    fn rejects_other_space_and_garbage() {
        let (space, data) = setup();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        BenchmarkCache::new(&space, &data.meta).unwrap().write(&path).unwrap();
        let mut other = space.clone();
        other.width = 8;
        assert!(BenchmarkCache::open(&path, &other, &data.meta).is_err());
        std::fs::write(&path, "{}\n").unwrap();
        assert!(BenchmarkCache::read(&path).is_err());
    }
}
