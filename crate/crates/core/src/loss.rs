//! Per-sample losses on network outputs.

use serde::{Deserialize, Serialize};

use crate::autograd::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    /// `n^-1 sum_j (f_j - y_j)^2`, labels in `[0, 1]`.
    Mse,
    /// Softmax cross-entropy against a label distribution (one-hot).
    CrossEntropy,
}

impl LossKind {
    pub fn name(&self) -> &'static str {
        match self {
            LossKind::Mse => "mse",
            LossKind::CrossEntropy => "cross-entropy",
        }
    }

    /// Lipschitz constant of the loss in the outputs used to turn gradient
    /// norms into trace estimates.
    pub fn gamma(&self) -> f64 {
        match self {
            LossKind::Mse => 2.0,
            LossKind::CrossEntropy => 1.0,
        }
    }

    /// Checks `labels` (shape `(m, n)`) against the loss's label domain.
    pub fn check_labels(&self, labels: &Tensor, n: usize) -> Result<()> {
        if labels.shape().len() != 2 || labels.shape()[1] != n {
            return Err(Error::shape(
                self.name(),
                format!("labels shape {:?}, expected (m, {n})", labels.shape()),
            ));
        }
        match self {
            LossKind::Mse => {
                if let Some(v) = labels.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
                    return Err(Error::InvalidArgument(format!("mse labels must lie in [0, 1], found {v}")));
                }
            }
            LossKind::CrossEntropy => {
                for i in 0..labels.rows() {
                    let row = labels.row(i);
                    let total: f64 = row.iter().sum();
                    if row.iter().any(|&v| v < 0.0) || (total - 1.0).abs() > 1e-9 {
                        return Err(Error::InvalidArgument(format!(
                            "cross-entropy label row {i} is not a distribution"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Loss value and gradient for one sample's outputs `f` and labels `y`.
    pub fn value_grad<T: Scalar>(&self, f: &[T], y: &[f64]) -> (T, Vec<T>) {
        let n = f.len();
        match self {
            LossKind::Mse => {
                let inv_n = 1.0 / n as f64;
                let mut value = T::zero();
                let grad = f
                    .iter()
                    .zip(y)
                    .map(|(&fj, &yj)| {
                        let r = fj - T::from_f64(yj);
                        value += r * r;
                        r.scale(2.0 * inv_n)
                    })
                    .collect();
                (value.scale(inv_n), grad)
            }
            LossKind::CrossEntropy => {
                let max = f.iter().map(|v| v.re()).fold(f64::NEG_INFINITY, f64::max);
                let shifted: Vec<T> = f.iter().map(|&v| v - T::from_f64(max)).collect();
                let exps: Vec<T> = shifted.iter().map(|v| v.exp()).collect();
                let mut total = T::zero();
                for &e in &exps {
                    total += e;
                }
                let log_total = total.ln();
                let mut value = T::zero();
                let mut y_sum = 0.0;
                for (&s, &yj) in shifted.iter().zip(y) {
                    if yj != 0.0 {
                        value += (log_total - s).scale(yj);
                    }
                    y_sum += yj;
                }
                let grad = exps
                    .iter()
                    .zip(y)
                    .map(|(&e, &yj)| (e / total).scale(y_sum) - T::from_f64(yj))
                    .collect();
                (value, grad)
            }
        }
    }

    /// Mean loss over rows and the gradient of the summed loss, both for
    /// `(m, n)` outputs.
    pub fn batch(&self, f: &Tensor, y: &Tensor) -> Result<(f64, Tensor)> {
        if f.shape() != y.shape() {
            return Err(Error::shape(
                self.name(),
                format!("outputs {:?} vs labels {:?}", f.shape(), y.shape()),
            ));
        }
        let m = f.rows();
        let mut total = 0.0;
        let mut grad = Vec::with_capacity(f.len());
        for i in 0..m {
            let (v, g) = self.value_grad(f.row(i), y.row(i));
            total += v;
            grad.extend(g);
        }
        Ok((total / m as f64, Tensor::new(f.shape().to_vec(), grad)?))
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mse" => Ok(LossKind::Mse),
            "ce" | "cross-entropy" => Ok(LossKind::CrossEntropy),
            other => Err(Error::Parse {
                what: "loss kind".into(),
                detail: format!("unknown loss '{other}' (expected mse or cross-entropy)"),
            }),
        }
    }
}

/// One-hot `(m, n)` labels from class indices.
pub fn one_hot(classes: &[usize], n: usize) -> Result<Tensor> {
    let mut data = vec![0.0; classes.len() * n];
    for (i, &c) in classes.iter().enumerate() {
        if c >= n {
            return Err(Error::InvalidArgument(format!("class {c} out of range for {n} outputs")));
        }
        data[i * n + c] = 1.0;
    }
    Tensor::new(vec![classes.len(), n], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_check(kind: LossKind, f: &[f64], y: &[f64]) {
        let (_, g) = kind.value_grad(f, y);
        for j in 0..f.len() {
            let mut a = f.to_vec();
            let mut b = f.to_vec();
            a[j] += 1e-6;
            b[j] -= 1e-6;
            let fd = (kind.value_grad(&a, y).0 - kind.value_grad(&b, y).0) / 2e-6;
            assert!((fd - g[j]).abs() < 1e-7, "{kind:?} j={j}: {fd} vs {}", g[j]);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        fd_check(LossKind::Mse, &[0.3, -1.2, 2.0], &[0.0, 1.0, 0.5]);
        fd_check(LossKind::CrossEntropy, &[0.3, -1.2, 2.0], &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn gamma_values() {
        assert_eq!(LossKind::Mse.gamma(), 2.0);
        assert_eq!(LossKind::CrossEntropy.gamma(), 1.0);
    }

    #[test]
    fn label_domains() {
        let y = Tensor::new(vec![1, 2], vec![1.5, 0.0]).unwrap();
        assert!(LossKind::Mse.check_labels(&y, 2).is_err());
        let y = one_hot(&[1], 2).unwrap();
        assert!(LossKind::Mse.check_labels(&y, 2).is_ok());
        assert!(LossKind::CrossEntropy.check_labels(&y, 2).is_ok());
        assert!(LossKind::CrossEntropy.check_labels(&y.scaled(2.0), 2).is_err());
    }

    #[test]
    fn cross_entropy_of_uniform_logits() {
        let (v, _) = LossKind::CrossEntropy.value_grad(&[0.0; 4], &[0.0, 0.0, 1.0, 0.0]);
        assert!((v - 4f64.ln()).abs() < 1e-15);
    }
}
