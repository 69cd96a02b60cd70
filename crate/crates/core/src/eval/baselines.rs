use crate::autograd::Tensor;
use crate::error::Result;
use crate::loss::LossKind;
use crate::model::Model;
use crate::space::ArchInstance;

/// `sum |theta * dL/dtheta|` for the batch-mean loss.
pub fn baseline_snip<M: Model>(model: &M, x: &Tensor, y: &Tensor, loss: LossKind) -> Result<f64> {
    loss.check_labels(y, model.num_outputs())?;
    let b = x.rows() as f64;
    let (_, g) = model.predict_vjp(x, |f| Ok(loss.batch(f, y)?.1.scaled(1.0 / b)))?;
    Ok(model.theta().data().iter().zip(&g).map(|(t, d)| (t * d).abs()).sum())
}

/// Path-norm score: with all weights replaced by their magnitudes and a
/// single all-ones input, `sum theta * d(sum f)/dtheta`.
pub fn baseline_synflow<M: Model>(model: &M, ones: &Tensor) -> Result<f64> {
    let abs = model.with_theta(model.theta().map(f64::abs))?;
    let seed = Tensor::full(&[ones.rows(), model.num_outputs()], 1.0);
    let g = abs.vjp(ones, &seed)?;
    Ok(abs.theta().data().iter().zip(&g).map(|(t, d)| t * d).sum())
}

/// [`baseline_synflow`] with the all-ones input of the instance's space.
pub fn synflow_arch(instance: &ArchInstance) -> Result<f64> {
    let ones = Tensor::full(&instance.space().input.batch_shape(1), 1.0);
    baseline_synflow(instance, &ones)
}
