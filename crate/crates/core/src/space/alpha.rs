//! Architecture distribution `p_alpha` and straight-through Gumbel sampling.

use rand::Rng;
use rand_distr::{Distribution, Gumbel};
use serde::{Deserialize, Serialize};

use super::arch::{ArchId, NodeChoice};
use super::cell::CellSpace;

/// Logits of the per-node categorical distributions over operations and
/// inputs. Node `i` (from 2) has `|catalog|` op logits and `i` input logits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaParams {
    pub ops: Vec<Vec<f64>>,
    pub inputs: Vec<Vec<f64>>,
}

impl AlphaParams {
    pub fn zeros(space: &CellSpace) -> Self {
        AlphaParams {
            ops: space.intermediate().map(|_| vec![0.0; space.catalog.len()]).collect(),
            inputs: space.intermediate().map(|i| vec![0.0; i]).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.ops.iter().chain(&self.inputs).map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flattens as all op logits (node order) followed by all input logits.
    pub fn flatten(&self) -> Vec<f64> {
        self.ops.iter().chain(&self.inputs).flatten().copied().collect()
    }

    /// Inverse of [`flatten`](Self::flatten) using `self` as the shape.
    pub fn with_flat(&self, flat: &[f64]) -> Self {
        assert_eq!(flat.len(), self.len());
        let mut it = flat.iter().copied();
        let mut take = |v: &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
            v.iter().map(|row| row.iter().map(|_| it.next().unwrap()).collect()).collect()
        };
        let ops = take(&self.ops);
        let inputs = take(&self.inputs);
        AlphaParams { ops, inputs }
    }

    pub fn all_finite(&self) -> bool {
        self.flatten().iter().all(|v| v.is_finite())
    }

    /// Mode of `p_alpha`: per-node argmax, ties to the lowest index.
    pub fn argmax(&self) -> ArchId {
        ArchId {
            nodes: self
                .ops
                .iter()
                .zip(&self.inputs)
                .map(|(o, x)| NodeChoice {
                    op: argmax(o),
                    input: argmax(x),
                })
                .collect(),
        }
    }
}

/// First index of the maximum.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let mx = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - mx).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

/// Gumbel(0, 1) noise shaped like an [`AlphaParams`].
pub type GumbelNoise = AlphaParams;

pub fn draw_gumbel<R: Rng + ?Sized>(shape: &AlphaParams, rng: &mut R) -> GumbelNoise {
    let g = Gumbel::new(0.0, 1.0).expect("valid gumbel");
    let flat: Vec<f64> = (0..shape.len()).map(|_| g.sample(rng)).collect();
    shape.with_flat(&flat)
}

/// A straight-through sample: the discrete architecture used in the forward
/// pass and the relaxed categorical weights whose Jacobian carries the
/// backward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct StSample {
    pub arch: ArchId,
    /// `softmax((alpha + g) / tau)` per node, for ops and inputs.
    pub soft: AlphaParams,
    pub tau: f64,
}

pub fn sample_architecture(alpha: &AlphaParams, g: &GumbelNoise, tau: f64) -> StSample {
    assert!(tau > 0.0, "temperature must be positive");
    let perturbed = |a: &Vec<Vec<f64>>, n: &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
        a.iter()
            .zip(n)
            .map(|(ar, nr)| ar.iter().zip(nr).map(|(x, y)| (x + y) / tau).collect())
            .collect()
    };
    let logits = AlphaParams {
        ops: perturbed(&alpha.ops, &g.ops),
        inputs: perturbed(&alpha.inputs, &g.inputs),
    };
    let arch = logits.argmax();
    let soft = AlphaParams {
        ops: logits.ops.iter().map(|r| softmax(r)).collect(),
        inputs: logits.inputs.iter().map(|r| softmax(r)).collect(),
    };
    StSample { arch, soft, tau }
}

/// Pulls a gate-space gradient back to logit space through the relaxed
/// softmax: `dR/dalpha = (1/tau) (diag(y) - y y^T) dR/dy` per node.
pub fn softmax_pullback(soft: &AlphaParams, grad_gates: &AlphaParams, tau: f64) -> AlphaParams {
    let pull = |ys: &Vec<Vec<f64>>, gs: &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
        ys.iter()
            .zip(gs)
            .map(|(y, g)| {
                let d: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
                y.iter().zip(g).map(|(yi, gi)| yi * (gi - d) / tau).collect()
            })
            .collect()
    };
    AlphaParams {
        ops: pull(&soft.ops, &grad_gates.ops),
        inputs: pull(&soft.inputs, &grad_gates.inputs),
    }
}
