use nalgebra::{DMatrix, SymmetricEigen};

use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::par;

/// Default cap on `m * n` for exact kernel construction.
pub const NTK_CAP: usize = 2000;

/// Eigenvalues in `[-CLAMP_TOL, 0]` are reported as exactly zero.
const CLAMP_TOL: f64 = 1e-8;

/// Empirical NTK `J J^T` over `m` samples and `n` outputs, indexed
/// sample-major (`i * n + j`), with its spectrum.
#[derive(Clone, Debug)]
pub struct NtkGram {
    matrix: Tensor,
    eigenvalues: Vec<f64>,
    eigenvectors: Tensor,
    samples: usize,
    outputs: usize,
}

impl NtkGram {
    /// Symmetrizes `matrix` and decomposes it. Eigenvalues are sorted in
    /// decreasing order; column `i` of the eigenvector tensor is `u_i`.
    pub fn from_matrix(matrix: Tensor, samples: usize, outputs: usize) -> Result<Self> {
        let d = samples * outputs;
        if matrix.shape() != [d, d] {
            return Err(Error::shape(
                "ntk",
                format!("matrix shape {:?}, expected ({d}, {d})", matrix.shape()),
            ));
        }
        if !matrix.all_finite() {
            return Err(Error::NonFinite {
                context: "ntk matrix".into(),
            });
        }
        let raw = DMatrix::from_row_slice(d, d, matrix.data());
        let sym = (&raw + raw.transpose()) * 0.5;
        let eig = SymmetricEigen::new(sym.clone());
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let eigenvalues = order
            .iter()
            .map(|&i| {
                let v = eig.eigenvalues[i];
                if (-CLAMP_TOL..0.0).contains(&v) {
                    0.0
                } else {
                    v
                }
            })
            .collect();
        let mut vecs = vec![0.0; d * d];
        for (col, &i) in order.iter().enumerate() {
            for row in 0..d {
                vecs[row * d + col] = eig.eigenvectors[(row, i)];
            }
        }
        let sym_data: Vec<f64> = (0..d).flat_map(|r| (0..d).map(move |c| (r, c))).map(|(r, c)| sym[(r, c)]).collect();
        Ok(NtkGram {
            matrix: Tensor::new(vec![d, d], sym_data)?,
            eigenvalues,
            eigenvectors: Tensor::new(vec![d, d], vecs)?,
            samples,
            outputs,
        })
    }

    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    pub fn entry(&self, row: usize, col: usize) -> f64 {
        self.matrix.data()[row * self.dim() + col]
    }

    pub fn dim(&self) -> usize {
        self.samples * self.outputs
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn outputs(&self) -> usize {
        self.outputs
    }

    /// Eigenvalues, largest first.
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// Eigenvector `u_i` (matching `eigenvalues()[i]`).
    pub fn eigenvector(&self, i: usize) -> Vec<f64> {
        let d = self.dim();
        (0..d).map(|r| self.eigenvectors.data()[r * d + i]).collect()
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim()).map(|i| self.entry(i, i)).sum()
    }

    pub fn max_eigenvalue(&self) -> f64 {
        self.eigenvalues[0]
    }

    pub fn min_eigenvalue(&self) -> f64 {
        *self.eigenvalues.last().unwrap()
    }

    pub fn mean_eigenvalue(&self) -> f64 {
        self.eigenvalues.iter().sum::<f64>() / self.dim() as f64
    }
}

fn check_batch(x: &Tensor) -> Result<usize> {
    match x.shape().first() {
        Some(&m) if m > 0 => Ok(m),
        _ => Err(Error::shape("ntk", format!("need at least one sample, got shape {:?}", x.shape()))),
    }
}

/// Per-sample outputs and Jacobians, in sample order.
pub(crate) fn per_sample_jacobians<M: Model>(model: &M, x: &Tensor) -> Result<Vec<(Tensor, Tensor)>> {
    let m = check_batch(x)?;
    par::try_map_range(m, |i| model.output_and_jacobian(&x.select_rows(&[i])))
}

/// Exact empirical NTK at the model's current parameters.
pub fn exact_ntk<M: Model>(model: &M, x: &Tensor) -> Result<NtkGram> {
    exact_ntk_capped(model, x, NTK_CAP)
}

pub fn exact_ntk_capped<M: Model>(model: &M, x: &Tensor, cap: usize) -> Result<NtkGram> {
    let m = check_batch(x)?;
    let n = model.num_outputs();
    if m * n > cap {
        return Err(Error::CapExceeded {
            size: (m * n) as u128,
            cap: cap as u128,
        });
    }
    let jac = stacked_jacobian(model, x)?;
    let gram = &jac * jac.transpose();
    let data = (0..m * n).flat_map(|r| (0..m * n).map(move |c| (r, c))).map(|(r, c)| gram[(r, c)]).collect();
    NtkGram::from_matrix(Tensor::new(vec![m * n, m * n], data)?, m, n)
}

/// `(m n, p)` Jacobian with sample-major rows.
pub(crate) fn stacked_jacobian<M: Model>(model: &M, x: &Tensor) -> Result<DMatrix<f64>> {
    let rows = per_sample_jacobians(model, x)?;
    let p = model.num_params();
    let mut data = Vec::with_capacity(rows.len() * model.num_outputs() * p);
    for (_, j) in rows {
        data.extend_from_slice(j.data());
    }
    Ok(DMatrix::from_row_slice(data.len() / p, p, &data))
}

/// `sum_x ||d f(x) / d theta||_F^2`, the trace of the NTK without forming it.
pub fn trace_norm_exact<M: Model>(model: &M, x: &Tensor) -> Result<f64> {
    let m = check_batch(x)?;
    let norms = par::try_map_range(m, |i| Ok::<_, Error>(model.jacobian(&x.select_rows(&[i]))?.sum_squares()))?;
    Ok(par::tree_sum(&norms))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Activation, Mlp};

    #[test]
    fn linear_model_kernel_is_scaled_inner_product() {
        let mlp = Mlp::new(3, 1, 1, 1, Activation::Relu, 4).unwrap();
        let x = Tensor::new(vec![2, 3], vec![1.0, 0.0, 2.0, -1.0, 3.0, 0.5]).unwrap();
        let g = exact_ntk(&mlp, &x).unwrap();
        assert!((g.entry(0, 0) - 5.0 / 3.0).abs() < 1e-14);
        assert!((g.entry(0, 1) - 0.0).abs() < 1e-14);
        assert!((g.entry(1, 1) - 10.25 / 3.0).abs() < 1e-14);
    }

    #[test]
    fn unit_rows_give_trace_m_over_n0() {
        let mlp = Mlp::new(4, 1, 1, 1, Activation::Relu, 0).unwrap();
        let x = Tensor::new(vec![3, 4], vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.6, 0.8, 0.0, 0.5, 0.5, 0.5, 0.5]).unwrap();
        assert!((trace_norm_exact(&mlp, &x).unwrap() - 3.0 / 4.0).abs() < 1e-14);
    }

    #[test]
    fn trace_paths_agree_and_spectrum_is_psd() {
        let mlp = Mlp::new(5, 32, 3, 3, Activation::Tanh, 1).unwrap();
        let x = Tensor::new(vec![4, 5], (0..20).map(|i| ((i * 7 % 11) as f64 - 5.0) / 10.0).collect()).unwrap();
        let g = exact_ntk(&mlp, &x).unwrap();
        let t = trace_norm_exact(&mlp, &x).unwrap();
        assert!((g.trace() - t).abs() <= 1e-8 * t);
        let eig_sum: f64 = g.eigenvalues().iter().sum();
        assert!((eig_sum - t).abs() <= 1e-8 * t);
        assert!(g.min_eigenvalue() >= -1e-8);
        assert!(g.eigenvalues().windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn eigenvectors_diagonalize() {
        let m = Tensor::new(vec![2, 2], vec![2.0, 1.0, 1.0, 2.0]).unwrap();
        let g = NtkGram::from_matrix(m, 2, 1).unwrap();
        assert!((g.eigenvalues()[0] - 3.0).abs() < 1e-12);
        let u = g.eigenvector(0);
        assert!((u[0].abs() - 0.5f64.sqrt()).abs() < 1e-12 && (u[0] - u[1]).abs() < 1e-12);
    }

    #[test]
    fn cap_is_enforced() {
        let mlp = Mlp::new(2, 4, 3, 2, Activation::Relu, 0).unwrap();
        let x = Tensor::zeros(&[5, 2]);
        assert!(matches!(exact_ntk_capped(&mlp, &x, 14), Err(Error::CapExceeded { size: 15, .. })));
    }
}
