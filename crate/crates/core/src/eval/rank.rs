use serde::{Deserialize, Serialize};

use super::baselines::{baseline_snip, synflow_arch};
use super::train::{sgd_train_eval, TrainConfig, TrainResult};
use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::loss::LossKind;
use crate::ntk::{approx_trace, trace_norm_exact};
use crate::par;
use crate::space::{enumerate, instantiate, param_count, ArchId, CellSpace};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scorer {
    /// `sum_x ||J(x)||_F^2` over the scoring set.
    Exact,
    /// `m gamma^-1 ||b^-1 sum_{x in B} grad L_x||^2` on one seeded batch.
    Approx,
    Snip,
    Synflow,
}

impl std::str::FromStr for Scorer {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(Scorer::Exact),
            "approx" => Ok(Scorer::Approx),
            "snip" => Ok(Scorer::Snip),
            "synflow" => Ok(Scorer::Synflow),
            other => Err(Error::Parse {
                what: "scorer".into(),
                detail: format!("unknown scorer '{other}' (exact, approx, snip, synflow)"),
            }),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreOptions {
    pub loss: LossKind,
    pub batch_size: usize,
    /// Seed of the scoring batch; shared by all architectures.
    pub batch_seed: u64,
}

/// Scores of one architecture; absent scorers are `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RankedEntry {
    pub rank: u64,
    pub arch: ArchId,
    pub describe: String,
    pub params: usize,
    #[serde(default)]
    pub trace_exact: Option<f64>,
    #[serde(default)]
    pub trace_approx: Option<f64>,
    #[serde(default)]
    pub snip: Option<f64>,
    #[serde(default)]
    pub synflow: Option<f64>,
    #[serde(default)]
    pub test_error: Option<f64>,
    #[serde(default)]
    pub diverged: Option<bool>,
}

/// Every architecture of a space, in canonical order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedSpace {
    pub entries: Vec<RankedEntry>,
}

impl RankedSpace {
    /// Blank entries for the whole space.
    pub fn skeleton(space: &CellSpace) -> Result<Self> {
        let entries = enumerate(space)?
            .into_iter()
            .map(|arch| RankedEntry {
                rank: arch.rank(space) as u64,
                describe: arch.describe(space),
                params: param_count(space, &arch),
                arch,
                trace_exact: None,
                trace_approx: None,
                snip: None,
                synflow: None,
                test_error: None,
                diverged: None,
            })
            .collect();
        Ok(RankedSpace { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Values of one column; fails if any entry lacks it.
    pub fn column(&self, name: &str) -> Result<Vec<f64>> {
        self.entries
            .iter()
            .map(|e| {
                let v = match name {
                    "trace_exact" | "exact" => e.trace_exact,
                    "trace_approx" | "approx" => e.trace_approx,
                    "snip" => e.snip,
                    "synflow" => e.synflow,
                    "test_error" => e.test_error,
                    "params" => Some(e.params as f64),
                    _ => return Err(Error::InvalidArgument(format!("unknown column '{name}'"))),
                };
                v.ok_or_else(|| Error::InvalidArgument(format!("column '{name}' missing for arch {}", e.rank)))
            })
            .collect()
    }

    pub fn by_rank(&self, rank: u64) -> Option<&RankedEntry> {
        self.entries.iter().find(|e| e.rank == rank)
    }

    /// Copies training outcomes in by rank.
    pub fn attach_training(&mut self, results: &[(u64, TrainResult)]) -> Result<()> {
        for &(rank, r) in results {
            let e = self
                .entries
                .iter_mut()
                .find(|e| e.rank == rank)
                .ok_or_else(|| Error::InvalidArgument(format!("no architecture with rank {rank}")))?;
            e.test_error = Some(r.test_error);
            e.diverged = Some(r.diverged);
        }
        Ok(())
    }
}

/// Scores every architecture of `space` on `(x, y)` with weights drawn from
/// `space.seed`.
pub fn rank_space(space: &CellSpace, x: &Tensor, y: &Tensor, scorers: &[Scorer], opts: &ScoreOptions) -> Result<RankedSpace> {
    let mut ranked = RankedSpace::skeleton(space)?;
    let scores = par::try_map_range(ranked.len(), |i| {
        let inst = instantiate(space, &ranked.entries[i].arch, space.seed)?;
        let mut out = [None; 4];
        for s in scorers {
            let v = match s {
                Scorer::Exact => trace_norm_exact(&inst, x)?,
                Scorer::Approx => approx_trace(&inst, x, y, opts.loss, opts.batch_size, opts.batch_seed)?,
                Scorer::Snip => baseline_snip(&inst, x, y, opts.loss)?,
                Scorer::Synflow => synflow_arch(&inst)?,
            };
            out[*s as usize] = Some(v);
        }
        Ok::<_, Error>(out)
    })?;
    for (e, s) in ranked.entries.iter_mut().zip(scores) {
        e.trace_exact = s[Scorer::Exact as usize];
        e.trace_approx = s[Scorer::Approx as usize];
        e.snip = s[Scorer::Snip as usize];
        e.synflow = s[Scorer::Synflow as usize];
    }
    Ok(ranked)
}

/// Trains every architecture in `archs` (seeded per architecture rank) and
/// returns `(rank, result)` in input order.
pub fn train_all(
    space: &CellSpace,
    archs: &[ArchId],
    train: (&Tensor, &Tensor),
    test: (&Tensor, &Tensor),
    cfg: &TrainConfig,
) -> Result<Vec<(u64, TrainResult)>> {
    par::try_map_range(archs.len(), |i| {
        let arch = &archs[i];
        let rank = arch.rank(space) as u64;
        let inst = instantiate(space, arch, space.seed)?;
        let c = TrainConfig {
            seed: crate::space::derive_seed(cfg.seed, &[rank]),
            ..*cfg
        };
        Ok((rank, sgd_train_eval(&inst, train, test, &c)?))
    })
}
