use crate::autograd::{Dual, Scalar, Tape, Tensor};
use crate::error::{Error, Result};
use crate::loss::LossKind;
use crate::model::Model;
use crate::ntk::batch_grad_norm;
use crate::par;
use crate::space::{softmax_pullback, AlphaParams, ArchInstance, Gates, GumbelNoise, StSample, Supernet};

/// Exterior penalty `max(0, x)`.
pub fn exterior(x: f64) -> f64 {
    x.max(0.0)
}

/// `trace - mu * max(0, trace - nu)`.
pub fn penalized(trace: f64, mu: f64, nu: f64) -> f64 {
    trace - mu * exterior(trace - nu)
}

/// Derivative of [`penalized`] in `trace`; the kink `trace == nu` takes the
/// subgradient of the inactive side.
pub fn penalized_slope(trace: f64, mu: f64, nu: f64) -> f64 {
    if trace > nu {
        1.0 - mu
    } else {
        1.0
    }
}

/// Penalized minibatch trace estimate of one architecture on one batch.
pub fn objective_r(instance: &ArchInstance, x: &Tensor, y: &Tensor, mu: f64, nu: f64, loss: LossKind) -> Result<f64> {
    if x.rows() == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    loss.check_labels(y, instance.num_outputs())?;
    Ok(penalized(batch_grad_norm(instance, x, y, loss)?, mu, nu))
}

/// Minibatch trace estimate `||b^-1 sum_x grad_theta L_x||^2` of the gated
/// supernet and its derivative with respect to every gate (flattened, ops
/// then inputs). Each gate takes one forward-over-reverse pass with a unit
/// tangent on that gate.
pub fn trace_gate_gradient(net: &Supernet, gates: &Gates<f64>, x: &Tensor, y: &Tensor, loss: LossKind) -> Result<(f64, Vec<f64>)> {
    let b = x.rows();
    if b == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    loss.check_labels(y, net.space.output)?;
    let base = Gates::<Dual>::from_real(&gates.ops, &gates.inputs);
    let xd = x.lift::<Dual>();
    let passes = par::try_map_range(base.len(), |k| {
        let mut g = base.clone();
        g.flat_mut(k).eps = 1.0;
        let mut tape = Tape::<Dual>::new();
        let fwd = net.forward(&mut tape, &xd, &g)?;
        let f = tape.value(fwd.output)?;
        let n = f.row_len();
        let mut seed = Vec::with_capacity(f.len());
        for i in 0..b {
            let (_, gf) = loss.value_grad(f.row(i), y.row(i));
            seed.extend(gf.into_iter().map(|v| v.scale(1.0 / b as f64)));
        }
        let grads = tape.backward(fwd.output, &Tensor::new(vec![b, n], seed)?)?;
        let mut total = Dual::default();
        for &(_, v) in &fwd.params {
            total += grads.get(v)?.sum_squares();
        }
        Ok::<_, Error>(total)
    })?;
    Ok((passes[0].re, passes.iter().map(|d| d.eps).collect()))
}

fn flat_to_alpha(shape: &AlphaParams, flat: &[f64]) -> AlphaParams {
    shape.with_flat(flat)
}

/// Straight-through gradient of the penalized objective with respect to the
/// logits: gate derivatives at the sampled (one-hot) architecture, pulled
/// back through the relaxed softmax. Returns `(trace, gradient)`.
pub fn grad_alpha_r(
    net: &Supernet,
    sample: &StSample,
    x: &Tensor,
    y: &Tensor,
    loss: LossKind,
    mu: f64,
    nu: f64,
) -> Result<(f64, AlphaParams)> {
    let gates = Gates::<f64>::hard(&net.space, &sample.arch);
    let (trace, dgates) = trace_gate_gradient(net, &gates, x, y, loss)?;
    let slope = penalized_slope(trace, mu, nu);
    let scaled: Vec<f64> = dgates.iter().map(|d| d * slope).collect();
    let grad = softmax_pullback(&sample.soft, &flat_to_alpha(&sample.soft, &scaled), sample.tau);
    if !grad.all_finite() {
        return Err(Error::NonFinite {
            context: "logit gradient".into(),
        });
    }
    Ok((trace, grad))
}

/// Penalized objective of the continuous relaxation: the supernet gated by
/// `softmax((alpha + g) / tau)` instead of its argmax.
pub fn relaxed_objective(
    net: &Supernet,
    alpha: &AlphaParams,
    noise: &GumbelNoise,
    tau: f64,
    x: &Tensor,
    y: &Tensor,
    loss: LossKind,
    mu: f64,
    nu: f64,
) -> Result<f64> {
    let s = crate::space::sample_architecture(alpha, noise, tau);
    let gates = Gates::<f64>::from_real(&s.soft.ops, &s.soft.inputs);
    let mut tape = Tape::new();
    let fwd = net.forward(&mut tape, x, &gates)?;
    let f = tape.value(fwd.output)?;
    let (_, gf) = loss.batch(f, y)?;
    let grads = tape.backward(fwd.output, &gf.scaled(1.0 / x.rows() as f64))?;
    let mut trace = 0.0;
    for &(_, v) in &fwd.params {
        trace += grads.get(v)?.sum_squares();
    }
    Ok(penalized(trace, mu, nu))
}

/// Exact gradient of [`relaxed_objective`] with respect to `alpha`.
pub fn relaxed_grad_alpha(
    net: &Supernet,
    alpha: &AlphaParams,
    noise: &GumbelNoise,
    tau: f64,
    x: &Tensor,
    y: &Tensor,
    loss: LossKind,
    mu: f64,
    nu: f64,
) -> Result<AlphaParams> {
    let s = crate::space::sample_architecture(alpha, noise, tau);
    let gates = Gates::<f64>::from_real(&s.soft.ops, &s.soft.inputs);
    let (trace, dgates) = trace_gate_gradient(net, &gates, x, y, loss)?;
    let slope = penalized_slope(trace, mu, nu);
    let scaled: Vec<f64> = dgates.iter().map(|d| d * slope).collect();
    Ok(softmax_pullback(&s.soft, &flat_to_alpha(&s.soft, &scaled), tau))
}
