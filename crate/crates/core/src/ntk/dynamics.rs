use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::gram::{stacked_jacobian, NtkGram};
use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::model::Model;

/// Losses above this are treated as divergence.
pub const DIVERGENCE_LOSS: f64 = 1e6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrajectorySource {
    ClosedForm,
    Simulated,
}

/// MSE loss `m^-1 ||f_t - Y||^2` along gradient descent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossTrajectory {
    pub eta: f64,
    pub times: Vec<f64>,
    pub losses: Vec<f64>,
    pub source: TrajectorySource,
}

impl LossTrajectory {
    pub fn at(&self, t: f64) -> Option<f64> {
        self.times.iter().position(|&s| s == t).map(|i| self.losses[i])
    }
}

/// Closed-form loss under kernel gradient descent with a constant kernel:
/// `L_t = m^-1 sum_i |1 - eta lambda_i|^{2t} (u_i^T r_0)^2`.
///
/// `residual` is the initial `Y - f_0` (just `Y` when outputs start at zero),
/// flattened sample-major.
pub fn mse_trajectory(gram: &NtkGram, residual: &[f64], eta: f64, times: &[f64]) -> Result<LossTrajectory> {
    let d = gram.dim();
    if residual.len() != d {
        return Err(Error::shape("mse_trajectory", format!("residual length {}, kernel dim {d}", residual.len())));
    }
    if !(eta >= 0.0) {
        return Err(Error::InvalidArgument(format!("eta must be non-negative, got {eta}")));
    }
    let proj: Vec<(f64, f64)> = (0..d)
        .map(|i| {
            let u = gram.eigenvector(i);
            let c: f64 = u.iter().zip(residual).map(|(a, b)| a * b).sum();
            ((1.0 - eta * gram.eigenvalues()[i]).abs(), c * c)
        })
        .collect();
    let m = gram.samples() as f64;
    let losses = times
        .iter()
        .map(|&t| proj.iter().map(|&(base, c2)| base.powf(2.0 * t) * c2).sum::<f64>() / m)
        .collect();
    Ok(LossTrajectory {
        eta,
        times: times.to_vec(),
        losses,
        source: TrajectorySource::ClosedForm,
    })
}

/// First-order expansion `f_lin(theta) = f_0 + J (theta - theta_0)` of a
/// model around its current parameters on a fixed input batch.
#[derive(Clone, Debug)]
pub struct LinearizedModel {
    jac: DMatrix<f64>,
    f0: DVector<f64>,
    samples: usize,
}

impl LinearizedModel {
    pub fn new<M: Model>(model: &M, x: &Tensor) -> Result<Self> {
        let jac = stacked_jacobian(model, x)?;
        let f0 = model.predict(x)?;
        Ok(LinearizedModel {
            jac,
            f0: DVector::from_column_slice(f0.data()),
            samples: x.rows(),
        })
    }

    /// Initial outputs, sample-major.
    pub fn initial_outputs(&self) -> &[f64] {
        self.f0.as_slice()
    }

    /// The (constant) NTK of the linearized model.
    pub fn gram(&self) -> Result<NtkGram> {
        let d = self.jac.nrows();
        let g = &self.jac * self.jac.transpose();
        let data = (0..d).flat_map(|r| (0..d).map(move |c| (r, c))).map(|(r, c)| g[(r, c)]).collect();
        NtkGram::from_matrix(Tensor::new(vec![d, d], data)?, self.samples, d / self.samples)
    }

    /// Full-batch gradient descent on `1/2 ||f_lin - Y||^2`; returns the
    /// loss `m^-1 ||f_lin - Y||^2` and the outputs at steps `0..=steps`.
    pub fn train(&self, y: &Tensor, eta: f64, steps: usize) -> Result<(LossTrajectory, Vec<Vec<f64>>)> {
        let d = self.jac.nrows();
        if y.len() != d {
            return Err(Error::shape("linearized_train", format!("labels length {}, outputs {d}", y.len())));
        }
        let target = DVector::from_column_slice(y.data());
        let mut delta = DVector::<f64>::zeros(self.jac.ncols());
        let mut losses = Vec::with_capacity(steps + 1);
        let mut outputs = Vec::with_capacity(steps + 1);
        for step in 0..=steps {
            let f = &self.f0 + &self.jac * &delta;
            let r = &f - &target;
            let loss = r.norm_squared() / self.samples as f64;
            if !loss.is_finite() || loss > DIVERGENCE_LOSS {
                return Err(Error::Divergence { eta });
            }
            losses.push(loss);
            outputs.push(f.as_slice().to_vec());
            if step < steps {
                delta -= self.jac.tr_mul(&r) * eta;
            }
        }
        let traj = LossTrajectory {
            eta,
            times: (0..=steps).map(|t| t as f64).collect(),
            losses,
            source: TrajectorySource::Simulated,
        };
        Ok((traj, outputs))
    }
}

/// Trains the linearization of `model` at its current parameters.
pub fn linearized_train<M: Model>(model: &M, x: &Tensor, y: &Tensor, eta: f64, steps: usize) -> Result<LossTrajectory> {
    Ok(LinearizedModel::new(model, x)?.train(y, eta, steps)?.0)
}

/// Full-batch gradient descent on `1/2 ||f(X) - Y||^2` for the network
/// itself; returns the outputs at steps `0..=steps`.
pub fn train_outputs<M: Model>(model: &M, x: &Tensor, y: &Tensor, eta: f64, steps: usize) -> Result<Vec<Vec<f64>>> {
    let mut current = model.with_theta(model.theta().clone())?;
    let mut outputs = Vec::with_capacity(steps + 1);
    for step in 0..=steps {
        let (f, g) = current.predict_vjp(x, |f| {
            let mut r = f.clone();
            for (a, b) in r.data_mut().iter_mut().zip(y.data()) {
                *a -= b;
            }
            Ok(r)
        })?;
        let loss: f64 = f.data().iter().zip(y.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / x.rows() as f64;
        if !loss.is_finite() || loss > DIVERGENCE_LOSS {
            return Err(Error::Divergence { eta });
        }
        outputs.push(f.into_data());
        if step < steps {
            let theta: Vec<f64> = current.theta().data().iter().zip(&g).map(|(t, d)| t - eta * d).collect();
            current = current.with_theta(Tensor::from_vec(theta))?;
        }
    }
    Ok(outputs)
}

/// `sup_t ||f_t(X) - f_lin_t(X)||_2` over `steps` of full-batch gradient
/// descent run on both the network and its linearization.
pub fn linearization_gap<M: Model>(model: &M, x: &Tensor, y: &Tensor, eta: f64, steps: usize) -> Result<f64> {
    let (_, lin) = LinearizedModel::new(model, x)?.train(y, eta, steps)?;
    let net = train_outputs(model, x, y, eta, steps)?;
    Ok(net
        .iter()
        .zip(&lin)
        .map(|(a, b)| a.iter().zip(b).map(|(u, v)| (u - v).powi(2)).sum::<f64>().sqrt())
        .fold(0.0, f64::max))
}

/// Leading term `m n^2 (1 - eta lambda_mean)^q` of the loss bound after `t`
/// steps, with `q = 2t` for `t < 0.5` and `q = 1` otherwise. Fails when
/// `eta lambda_mean >= 1`, i.e. when the kernel violates the trainability
/// constraint for this learning rate.
pub fn prop1_leading_bound(gram: &NtkGram, eta: f64, t: f64) -> Result<f64> {
    if !(eta >= 0.0) || !(t >= 0.0) {
        return Err(Error::InvalidArgument(format!("eta and t must be non-negative, got {eta}, {t}")));
    }
    let product = eta * gram.mean_eigenvalue();
    if product >= 1.0 {
        return Err(Error::Infeasible { product });
    }
    let q = if t < 0.5 { 2.0 * t } else { 1.0 };
    let (m, n) = (gram.samples() as f64, gram.outputs() as f64);
    Ok(m * n * n * (1.0 - product).powf(q))
}
