use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::loss::LossKind;
use crate::model::Model;
use crate::space::{argmax, derive_seed};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub schedule: LrSchedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            lr: 0.5,
            batch_size: 32,
            seed: 0,
            schedule: LrSchedule::Cosine,
        }
    }
}

/// Per-epoch learning-rate multiplier.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LrSchedule {
    Constant,
    /// `(1 + cos(pi e / E)) / 2` for epoch `e` of `E`.
    #[default]
    Cosine,
}

impl LrSchedule {
    pub fn factor(&self, epoch: usize, epochs: usize) -> f64 {
        match self {
            LrSchedule::Constant => 1.0,
            LrSchedule::Cosine => 0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / epochs as f64).cos()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainResult {
    /// Misclassification rate on the test split; 1.0 after divergence.
    pub test_error: f64,
    pub final_loss: f64,
    pub diverged: bool,
}

/// Fraction of rows whose argmax output differs from the label's argmax.
pub fn error_rate<M: Model>(model: &M, x: &Tensor, y: &Tensor) -> Result<f64> {
    let f = model.predict(x)?;
    let wrong = (0..f.rows()).filter(|&i| argmax(f.row(i)) != argmax(y.row(i))).count();
    Ok(wrong as f64 / f.rows() as f64)
}

/// Mini-batch SGD on softmax cross-entropy, then test misclassification.
/// Non-finite values or a loss above `1e6` count as divergence.
pub fn sgd_train_eval<M: Model>(
    model: &M,
    train: (&Tensor, &Tensor),
    test: (&Tensor, &Tensor),
    cfg: &TrainConfig,
) -> Result<TrainResult> {
    let (x, y) = train;
    let m = x.rows();
    if m == 0 || cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(Error::InvalidArgument("training needs samples, a batch size and epochs".into()));
    }
    let loss = LossKind::CrossEntropy;
    loss.check_labels(y, model.num_outputs())?;
    let diverged = TrainResult {
        test_error: 1.0,
        final_loss: f64::INFINITY,
        diverged: true,
    };
    let mut theta = model.theta().data().to_vec();
    let mut current = model.with_theta(Tensor::from_vec(theta.clone()))?;
    let mut last = 0.0;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..m).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[epoch as u64])));
        let mut total = 0.0;
        let lr = cfg.lr * cfg.schedule.factor(epoch, cfg.epochs);
        for batch in order.chunks(cfg.batch_size) {
            let (xb, yb) = (x.select_rows(batch), y.select_rows(batch));
            let mut batch_loss = 0.0;
            let step = current.predict_vjp(&xb, |f| {
                let (l, g) = loss.batch(f, &yb)?;
                batch_loss = l;
                Ok(g.scaled(1.0 / batch.len() as f64))
            });
            let grad = match step {
                Ok((_, g)) => g,
                Err(Error::NonFinite { .. }) => return Ok(diverged),
                Err(e) => return Err(e),
            };
            if !batch_loss.is_finite() || batch_loss > 1e6 {
                return Ok(diverged);
            }
            total += batch_loss * batch.len() as f64;
            for (t, g) in theta.iter_mut().zip(&grad) {
                *t -= lr * g;
            }
            current = current.with_theta(Tensor::from_vec(theta.clone()))?;
        }
        last = total / m as f64;
    }
    match error_rate(&current, test.0, test.1) {
        Ok(test_error) => Ok(TrainResult {
            test_error,
            final_loss: last,
            diverged: false,
        }),
        Err(Error::NonFinite { .. }) => Ok(diverged),
        Err(e) => Err(e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_dataset, GenParams, GeneratorKind};
    use crate::model::{Activation, Mlp};
    use crate::space::InputShape;

    #[test]
    fn separable_blobs_are_learned() {
        let p = GenParams {
            samples: 300,
            input: InputShape::Vector(8),
            classes: 2,
            noise: 0.1,
            normalize: true,
        };
        let data = gen_dataset(GeneratorKind::Blobs, &p, 4).unwrap();
        let (train, test) = data.split(200).unwrap();
        let mlp = Mlp::new(8, 64, 2, 2, Activation::Relu, 1).unwrap();
        let cfg = TrainConfig {
            lr: 2.0,
            ..TrainConfig::default()
        };
        let r = sgd_train_eval(&mlp, (&train.x, &train.y), (&test.x, &test.y), &cfg).unwrap();
        assert!(!r.diverged);
        assert!(r.test_error < 0.05, "{r:?}");
    }

    #[test]
    fn huge_learning_rate_reports_divergence() {
        let p = GenParams {
            samples: 64,
            input: InputShape::Vector(8),
            classes: 2,
            noise: 0.1,
            normalize: false,
        };
        let data = gen_dataset(GeneratorKind::Blobs, &p, 4).unwrap();
        let mlp = Mlp::new(8, 16, 2, 3, Activation::Relu, 1).unwrap();
        let cfg = TrainConfig {
            lr: 1e12,
            epochs: 5,
            schedule: LrSchedule::Constant,
            ..TrainConfig::default()
        };
        let r = sgd_train_eval(&mlp, (&data.x, &data.y), (&data.x, &data.y), &cfg).unwrap();
        assert!(r.diverged);
        assert_eq!(r.test_error, 1.0);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(LrSchedule::Cosine.factor(0, 10), 1.0);
        assert!((LrSchedule::Cosine.factor(5, 10) - 0.5).abs() < 1e-15);
        assert!(LrSchedule::Cosine.factor(9, 10) < 0.03);
        assert_eq!(LrSchedule::Constant.factor(9, 10), 1.0);
    }
}
