use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::gram::per_sample_jacobians;
use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::loss::LossKind;
use crate::model::Model;
use crate::par;

/// The exact trace norm and its gradient-norm lower bounds on one dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEstimates {
    /// `sum_x ||J(x)||_F^2`.
    pub exact: f64,
    /// `gamma^-1 sum_x ||grad_theta L_x||^2`.
    pub grad_sum: f64,
    /// `gamma^-1 sum_j |B_j| ||mean_{x in B_j} grad_theta L_x||^2` over a
    /// seeded partition into batches of `batch_size` (the last may be short).
    pub partition: f64,
    /// `||b^-1 sum_{x in B} grad_theta L_x||^2` for the first batch `B`.
    pub minibatch: f64,
    /// `m gamma^-1 minibatch`.
    pub scaled: f64,
    pub gamma: f64,
    pub batch_size: usize,
    pub batch: Vec<usize>,
}

fn check_batch_size(m: usize, b: usize) -> Result<()> {
    if b == 0 || m == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if b > m {
        return Err(Error::InvalidArgument(format!("batch size {b} exceeds {m} samples")));
    }
    Ok(())
}

/// Seeded permutation of `0..m`; its first `b` entries form a uniformly
/// random batch drawn without replacement.
pub fn shuffled_indices(m: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..m).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx
}

/// `||b^-1 sum_{x in X} grad_theta L_x||^2` via a single batched pass.
pub fn batch_grad_norm<M: Model>(model: &M, x: &Tensor, y: &Tensor, loss: LossKind) -> Result<f64> {
    let b = x.rows();
    let (_, g) = model.predict_vjp(x, |f| {
        let (_, grad) = loss.batch(f, y)?;
        Ok(grad.scaled(1.0 / b as f64))
    })?;
    Ok(g.iter().map(|v| v * v).sum())
}

/// The cheap score `m gamma^-1 ||b^-1 sum_{x in B} grad_theta L_x||^2` on
/// one seeded batch of size `b`.
pub fn approx_trace<M: Model>(model: &M, x: &Tensor, y: &Tensor, loss: LossKind, b: usize, seed: u64) -> Result<f64> {
    let m = x.rows();
    check_batch_size(m, b)?;
    loss.check_labels(y, model.num_outputs())?;
    let idx = &shuffled_indices(m, seed)[..b];
    let norm = batch_grad_norm(model, &x.select_rows(idx), &y.select_rows(idx), loss)?;
    Ok(m as f64 * norm / loss.gamma())
}

/// Evaluates every term of the trace lower-bound chain on `(x, y)`.
pub fn trace_lower_bounds<M: Model>(
    model: &M,
    x: &Tensor,
    y: &Tensor,
    loss: LossKind,
    batch_size: usize,
    seed: u64,
) -> Result<TraceEstimates> {
    let m = x.rows();
    check_batch_size(m, batch_size)?;
    loss.check_labels(y, model.num_outputs())?;
    if y.rows() != m {
        return Err(Error::shape("trace_lower_bounds", format!("{m} samples but {} label rows", y.rows())));
    }
    let gamma = loss.gamma();
    let p = model.num_params();
    let n = model.num_outputs();

    let per_sample = per_sample_jacobians(model, x)?;
    let mut frob = Vec::with_capacity(m);
    let mut grads: Vec<Vec<f64>> = Vec::with_capacity(m);
    for (i, (out, jac)) in per_sample.iter().enumerate() {
        frob.push(jac.sum_squares());
        let (_, gf) = loss.value_grad(out.data(), y.row(i));
        let mut g = vec![0.0; p];
        for (j, &c) in gf.iter().enumerate().take(n) {
            for (dst, &v) in g.iter_mut().zip(&jac.data()[j * p..(j + 1) * p]) {
                *dst += c * v;
            }
        }
        grads.push(g);
    }
    let exact = par::tree_sum(&frob);
    let sq: Vec<f64> = grads.iter().map(|g| g.iter().map(|v| v * v).sum()).collect();
    let grad_sum = par::tree_sum(&sq) / gamma;

    let order = shuffled_indices(m, seed);
    let mut terms = Vec::new();
    for chunk in order.chunks(batch_size) {
        let mut mean = vec![0.0; p];
        for &i in chunk {
            for (d, v) in mean.iter_mut().zip(&grads[i]) {
                *d += v;
            }
        }
        let k = chunk.len() as f64;
        terms.push(k * mean.iter().map(|v| (v / k).powi(2)).sum::<f64>());
    }
    let partition = par::tree_sum(&terms) / gamma;

    let batch = order[..batch_size].to_vec();
    let minibatch = batch_grad_norm(model, &x.select_rows(&batch), &y.select_rows(&batch), loss)?;
    Ok(TraceEstimates {
        exact,
        grad_sum,
        partition,
        minibatch,
        scaled: m as f64 * minibatch / gamma,
        gamma,
        batch_size,
        batch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::one_hot;
    use crate::model::{Activation, Mlp};

    fn data(m: usize, n0: usize) -> Tensor {
        Tensor::new(vec![m, n0], (0..m * n0).map(|i| ((i * 13 % 17) as f64 - 8.0) / 20.0).collect()).unwrap()
    }

    #[test]
    fn minibatch_pass_matches_per_sample_mean() {
        let mlp = Mlp::new(4, 16, 3, 2, Activation::Relu, 2).unwrap();
        let x = data(6, 4);
        let y = one_hot(&[0, 1, 2, 0, 1, 2], 3).unwrap();
        let est = trace_lower_bounds(&mlp, &x, &y, LossKind::CrossEntropy, 6, 9).unwrap();
        // one batch covering all samples: partition = m * minibatch / gamma
        assert!((est.partition - est.scaled).abs() <= 1e-12 * est.scaled);
        assert!(est.exact >= est.grad_sum && est.grad_sum >= est.partition);
    }

    #[test]
    fn batch_is_without_replacement_and_seeded() {
        let a = shuffled_indices(10, 3);
        let mut s = a.clone();
        s.sort();
        assert_eq!(s, (0..10).collect::<Vec<_>>());
        assert_eq!(a, shuffled_indices(10, 3));
    }

    #[test]
    fn empty_and_oversized_batches_are_rejected() {
        let mlp = Mlp::new(4, 8, 2, 2, Activation::Relu, 2).unwrap();
        let x = data(3, 4);
        let y = one_hot(&[0, 1, 1], 2).unwrap();
        assert!(trace_lower_bounds(&mlp, &x, &y, LossKind::Mse, 0, 0).is_err());
        assert!(trace_lower_bounds(&mlp, &x, &y, LossKind::Mse, 4, 0).is_err());
    }
}
