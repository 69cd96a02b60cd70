use serde::{Deserialize, Serialize};

use super::correlation::{correlation_labeled, CorrelationReport};
use super::rank::{rank_space, ScoreOptions, Scorer};
use crate::autograd::Tensor;
use crate::data::{gaussian_like, permuted_rows};
use crate::error::Result;
use crate::space::CellSpace;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgnosticMode {
    /// Labels permuted across samples.
    RandomLabels,
    /// Inputs replaced by standard Gaussian rows rescaled to max-norm 1.
    RandomData,
}

/// Correlates approximate trace scores over the whole space on the true
/// data against scores on randomized labels or inputs. Weights and the
/// scoring batch are shared between the two runs.
pub fn agnostic_experiment(
    space: &CellSpace,
    x: &Tensor,
    y: &Tensor,
    mode: AgnosticMode,
    opts: &ScoreOptions,
    seed: u64,
) -> Result<CorrelationReport> {
    let truth = rank_space(space, x, y, &[Scorer::Approx], opts)?.column("approx")?;
    let (xr, yr) = match mode {
        AgnosticMode::RandomLabels => (x.clone(), permuted_rows(y, seed)),
        AgnosticMode::RandomData => (gaussian_like(x, seed), y.clone()),
    };
    let random = rank_space(space, &xr, &yr, &[Scorer::Approx], opts)?.column("approx")?;
    let name = match mode {
        AgnosticMode::RandomLabels => "approx (random labels)",
        AgnosticMode::RandomData => "approx (random data)",
    };
    correlation_labeled(&random, &truth, name, "approx (true data)")
}
