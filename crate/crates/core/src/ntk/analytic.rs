use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::gram::{exact_ntk, trace_norm_exact, NtkGram};
use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::model::{Activation, Mlp, Model};

/// Universal upper bound on the distribution term of the data-agnostic
/// trace bound.
pub const DISTRIBUTION_TERM_BOUND: f64 = 2.0;

/// One ReLU layer of the infinite-width covariance recursion: given the
/// pre-activation covariance entries, returns `E[relu(u) relu(v)]` and
/// `E[relu'(u) relu'(v)]` for `(u, v)` jointly Gaussian.
pub fn relu_layer(var_a: f64, var_b: f64, cov: f64) -> (f64, f64) {
    let norm = (var_a * var_b).sqrt();
    if norm <= 0.0 {
        return (0.0, 0.0);
    }
    let angle = (cov / norm).clamp(-1.0, 1.0).acos();
    let sigma = norm / (2.0 * PI) * (angle.sin() + (PI - angle) * angle.cos());
    let sigma_dot = (PI - angle) / (2.0 * PI);
    (sigma, sigma_dot)
}

/// Infinite-width covariances `Sigma^(l)` for `l = 1..=depth` of a bias-free
/// ReLU chain (each `m x m`, row-major).
pub fn relu_covariances(x: &Tensor, depth: usize) -> Result<Vec<Vec<f64>>> {
    Ok(relu_recursion(x, depth)?.0)
}

fn relu_recursion(x: &Tensor, depth: usize) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    if depth == 0 {
        return Err(Error::InvalidArgument("depth must be at least 1".into()));
    }
    if x.shape().len() != 2 || x.rows() == 0 {
        return Err(Error::shape("analytic_ntk", format!("expected (m, n0) input, got {:?}", x.shape())));
    }
    let (m, n0) = (x.rows(), x.shape()[1]);
    let mut sigma = vec![0.0; m * m];
    for i in 0..m {
        for j in 0..m {
            sigma[i * m + j] = x.row(i).iter().zip(x.row(j)).map(|(a, b)| a * b).sum::<f64>() / n0 as f64;
        }
    }
    let mut theta = sigma.clone();
    let mut all = vec![sigma.clone()];
    for _ in 1..depth {
        let mut next = vec![0.0; m * m];
        for i in 0..m {
            for j in 0..m {
                let (s, sd) = relu_layer(sigma[i * m + i], sigma[j * m + j], sigma[i * m + j]);
                next[i * m + j] = s;
                theta[i * m + j] = theta[i * m + j] * sd + s;
            }
        }
        sigma = next;
        all.push(sigma.clone());
    }
    Ok((all, theta))
}

/// Limiting NTK of a bias-free NTK-parameterized chain with `depth` weight
/// layers, expanded over `outputs` independent output units
/// (`Theta_inf (x) I_n`, sample-major). Only ReLU has a closed form here.
pub fn analytic_ntk_relu_mlp(x: &Tensor, depth: usize, outputs: usize, activation: Activation) -> Result<NtkGram> {
    if activation != Activation::Relu {
        return Err(Error::InvalidArgument(format!(
            "no closed-form kernel for {activation:?}; only relu chains are supported"
        )));
    }
    let (_, theta) = relu_recursion(x, depth)?;
    let m = x.rows();
    let d = m * outputs;
    let mut data = vec![0.0; d * d];
    for i in 0..m {
        for j in 0..m {
            for a in 0..outputs {
                data[(i * outputs + a) * d + j * outputs + a] = theta[i * m + j];
            }
        }
    }
    NtkGram::from_matrix(Tensor::new(vec![d, d], data)?, m, outputs)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WidthDeviation {
    pub width: usize,
    /// Seed-averaged `max |Theta_emp - Theta_inf| / max |Theta_inf|`.
    pub deviation: f64,
}

/// Compares empirical kernels of single-output ReLU chains against the
/// analytic limit, per width.
pub fn ntk_width_convergence(widths: &[usize], x: &Tensor, depth: usize, seeds: &[u64]) -> Result<Vec<WidthDeviation>> {
    if seeds.is_empty() {
        return Err(Error::InvalidArgument("need at least one seed".into()));
    }
    let limit = analytic_ntk_relu_mlp(x, depth, 1, Activation::Relu)?;
    let scale = limit.matrix().data().iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if scale == 0.0 {
        return Err(Error::InvalidArgument("limiting kernel is identically zero".into()));
    }
    let n0 = x.shape()[1];
    widths
        .iter()
        .map(|&width| {
            let mut total = 0.0;
            for &seed in seeds {
                let mlp = Mlp::new(n0, width, 1, depth, Activation::Relu, seed)?;
                let emp = exact_ntk(&mlp, x)?;
                let dev = emp
                    .matrix()
                    .data()
                    .iter()
                    .zip(limit.matrix().data())
                    .fold(0.0f64, |a, (e, l)| a.max((e - l).abs()));
                total += dev / scale;
            }
            Ok(WidthDeviation {
                width,
                deviation: total / seeds.len() as f64,
            })
        })
        .collect()
}

/// `D(gamma) = L` for `gamma = 1`, else `(1 - gamma^{2L}) / (1 - gamma^2)`.
pub fn depth_factor(gamma: f64, depth: usize) -> f64 {
    if gamma == 1.0 {
        depth as f64
    } else {
        (1.0 - gamma.powi(2 * depth as i32)) / (1.0 - gamma * gamma)
    }
}

/// `n0^-1 Z D(gamma)` with `Z` at its universal bound.
pub fn data_agnostic_bound(gamma: f64, depth: usize, n0: usize) -> f64 {
    DISTRIBUTION_TERM_BOUND * depth_factor(gamma, depth) / n0 as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapCheck {
    /// `(m n)^-1 |tr(P) - tr(Q)|`.
    pub gap: f64,
    pub bound: f64,
}

impl GapCheck {
    pub fn holds(&self) -> bool {
        self.gap <= self.bound
    }
}

/// Normalized trace-norm gap of `model` between two input sets of equal
/// size, against the data-agnostic bound. Inputs must satisfy `||x|| <= 1`.
pub fn prop2_gap_check<M: Model>(model: &M, p: &Tensor, q: &Tensor, gamma: f64, depth: usize) -> Result<GapCheck> {
    if p.shape() != q.shape() || p.shape().len() != 2 {
        return Err(Error::shape("prop2_gap_check", format!("{:?} vs {:?}", p.shape(), q.shape())));
    }
    for (name, t) in [("P", p), ("Q", q)] {
        for i in 0..t.rows() {
            let norm = t.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 1.0 + 1e-12 {
                return Err(Error::InvalidArgument(format!("{name} sample {i} has norm {norm} > 1")));
            }
        }
    }
    let (m, n0) = (p.rows(), p.shape()[1]);
    let tp = trace_norm_exact(model, p)?;
    let tq = trace_norm_exact(model, q)?;
    Ok(GapCheck {
        gap: (tp - tq).abs() / (m * model.num_outputs()) as f64,
        bound: data_agnostic_bound(gamma, depth, n0),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_rows() -> Tensor {
        Tensor::new(vec![3, 2], vec![1.0, 0.0, 0.0, 1.0, 0.6, 0.8]).unwrap()
    }

    #[test]
    fn depth_one_is_scaled_inner_product() {
        let g = analytic_ntk_relu_mlp(&unit_rows(), 1, 1, Activation::Relu).unwrap();
        assert!((g.entry(0, 2) - 0.3).abs() < 1e-15);
        assert!((g.entry(0, 1)).abs() < 1e-15);
    }

    #[test]
    fn diagonal_covariance_halves_per_layer() {
        let cov = relu_covariances(&unit_rows(), 4).unwrap();
        for (l, s) in cov.iter().enumerate() {
            let want = 0.5 / 2f64.powi(l as i32);
            assert!((s[0] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn covariance_and_derivative_bounds() {
        let x = Tensor::new(vec![4, 3], vec![0.3, 0.2, -0.1, 0.9, 0.0, 0.1, -0.5, 0.5, 0.5, 0.0, 0.0, 1.0]).unwrap();
        let cov = relu_covariances(&x, 3).unwrap();
        for s in &cov {
            for i in 0..4 {
                let xx: f64 = x.row(i).iter().map(|v| v * v).sum::<f64>() / 3.0;
                assert!(s[i * 4 + i] <= xx + 1e-15);
            }
        }
        for c in [-1.0, -0.3, 0.0, 0.7, 1.0] {
            let (_, sd) = relu_layer(1.0, 1.0, c);
            assert!((0.0..=1.0).contains(&sd));
        }
    }

    #[test]
    fn non_relu_is_rejected() {
        assert!(analytic_ntk_relu_mlp(&unit_rows(), 2, 1, Activation::Tanh).is_err());
    }

    #[test]
    fn bound_formula() {
        assert!((data_agnostic_bound(1.0, 3, 64) - 0.093_75).abs() < 1e-15);
        assert!((depth_factor(0.5, 2) - (1.0 - 0.0625) / 0.75).abs() < 1e-15);
    }

    #[test]
    fn identical_sets_have_zero_gap() {
        let mlp = Mlp::new(2, 32, 1, 3, Activation::Relu, 1).unwrap();
        let c = prop2_gap_check(&mlp, &unit_rows(), &unit_rows(), 1.0, 3).unwrap();
        assert_eq!(c.gap, 0.0);
        assert!(c.holds());
        assert!(prop2_gap_check(&mlp, &unit_rows().scaled(2.0), &unit_rows(), 1.0, 3).is_err());
    }
}
