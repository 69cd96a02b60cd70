//! Differentiable models with a flat parameter vector, and fully connected
//! chains used as kernel oracles.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::{Gradients, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// A forward pass recorded on a tape: the `(m, n)` output node and each
/// parameter leaf together with its offset into the flat parameter vector.
#[derive(Clone, Debug)]
pub struct Recorded {
    pub output: Var,
    pub leaves: Vec<(Var, usize)>,
}

/// A network `f(x; theta)` with flattened parameters.
pub trait Model: Sized + Sync {
    fn num_params(&self) -> usize;
    fn num_outputs(&self) -> usize;
    fn theta(&self) -> &Tensor;
    /// Same model with replaced parameters.
    fn with_theta(&self, theta: Tensor) -> Result<Self>;
    /// Records `f(X; theta)` on `tape`.
    fn record(&self, tape: &mut Tape, x: &Tensor) -> Result<Recorded>;

    /// Output values `(m, n)`.
    fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let rec = self.record(&mut tape, x)?;
        Ok(tape.value(rec.output)?.clone())
    }

    /// Flattens leaf gradients into parameter order.
    fn flat_grad(&self, grads: &Gradients, rec: &Recorded) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.num_params()];
        for &(v, offset) in &rec.leaves {
            let g = grads.get(v)?;
            for (dst, &src) in out[offset..offset + g.len()].iter_mut().zip(g.data()) {
                *dst += src;
            }
        }
        Ok(out)
    }

    /// Gradient of `<f(X), seed>` with respect to the parameters.
    fn vjp(&self, x: &Tensor, seed: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let rec = self.record(&mut tape, x)?;
        let g = tape.backward(rec.output, seed)?;
        self.flat_grad(&g, &rec)
    }

    /// Outputs together with the gradient of `<f(X), seed(f(X))>`, where the
    /// seed may depend on the outputs (loss gradients).
    fn predict_vjp<F>(&self, x: &Tensor, seed: F) -> Result<(Tensor, Vec<f64>)>
    where
        F: FnOnce(&Tensor) -> Result<Tensor>,
    {
        let mut tape = Tape::new();
        let rec = self.record(&mut tape, x)?;
        let out = tape.value(rec.output)?.clone();
        let s = seed(&out)?;
        let g = tape.backward(rec.output, &s)?;
        Ok((out, self.flat_grad(&g, &rec)?))
    }

    /// Per-sample Jacobian `(n, p)`; `x` holds exactly one sample. Row `i`
    /// comes from one reverse pass seeded with the unit vector `e_i`.
    fn jacobian(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.output_and_jacobian(x)?.1)
    }

    /// The `(1, n)` output of one sample together with its Jacobian.
    fn output_and_jacobian(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        if x.rows() != 1 {
            return Err(Error::shape(
                "jacobian",
                format!("expected one sample, got shape {:?}", x.shape()),
            ));
        }
        let mut tape = Tape::new();
        let rec = self.record(&mut tape, x)?;
        let n = self.num_outputs();
        let mut data = Vec::with_capacity(n * self.num_params());
        for i in 0..n {
            let mut seed = Tensor::zeros(&[1, n]);
            seed.data_mut()[i] = 1.0;
            let g = tape.backward(rec.output, &seed)?;
            data.extend(self.flat_grad(&g, &rec)?);
        }
        let j = Tensor::new(vec![n, self.num_params()], data)?;
        if !j.all_finite() {
            return Err(Error::NonFinite {
                context: "jacobian".into(),
            });
        }
        Ok((tape.value(rec.output)?.clone(), j))
    }
}

/// Hidden-layer nonlinearity of an [`Mlp`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
}

/// Fully connected chain `x -> W_1 -> act -> ... -> W_depth`, NTK
/// parameterized. `depth` counts weight layers, so `depth = 2` has one
/// hidden layer.
#[derive(Clone, Debug)]
pub struct Mlp {
    dims: Vec<usize>,
    activation: Activation,
    theta: Tensor,
}

impl Mlp {
    pub fn new(input: usize, width: usize, output: usize, depth: usize, activation: Activation, seed: u64) -> Result<Self> {
        if depth == 0 || input == 0 || width == 0 || output == 0 {
            return Err(Error::InvalidArgument(format!(
                "mlp needs positive sizes, got input {input}, width {width}, output {output}, depth {depth}"
            )));
        }
        let mut dims = vec![input];
        dims.extend(std::iter::repeat_n(width, depth - 1));
        dims.push(output);
        let p: usize = dims.windows(2).map(|w| w[0] * w[1]).sum();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..p).map(|_| StandardNormal.sample(&mut rng)).collect();
        Ok(Mlp {
            dims,
            activation,
            theta: Tensor::from_vec(data),
        })
    }

    pub fn depth(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }
}

impl Model for Mlp {
    fn num_params(&self) -> usize {
        self.theta.len()
    }

    fn num_outputs(&self) -> usize {
        *self.dims.last().unwrap()
    }

    fn theta(&self) -> &Tensor {
        &self.theta
    }

    fn with_theta(&self, theta: Tensor) -> Result<Self> {
        if theta.len() != self.theta.len() {
            return Err(Error::shape(
                "with_theta",
                format!("expected {} parameters, got {}", self.theta.len(), theta.len()),
            ));
        }
        Ok(Mlp {
            theta: theta.reshape(vec![self.theta.len()])?,
            ..self.clone()
        })
    }

    fn record(&self, tape: &mut Tape, x: &Tensor) -> Result<Recorded> {
        if x.shape().len() != 2 || x.shape()[1] != self.dims[0] {
            return Err(Error::shape(
                "forward",
                format!("input shape {:?}, mlp expects (m, {})", x.shape(), self.dims[0]),
            ));
        }
        let mut h = tape.leaf(x.clone())?;
        let mut leaves = Vec::with_capacity(self.depth());
        let mut offset = 0;
        for (l, w) in self.dims.windows(2).enumerate() {
            let len = w[0] * w[1];
            let data = self.theta.data()[offset..offset + len].to_vec();
            let wv = tape.leaf(Tensor::new(vec![w[1], w[0]], data)?)?;
            leaves.push((wv, offset));
            offset += len;
            h = tape.dense(h, wv)?;
            if l + 1 < self.depth() {
                h = match self.activation {
                    Activation::Relu => tape.relu(h)?,
                    Activation::Tanh => tape.tanh(h)?,
                };
            }
        }
        Ok(Recorded { output: h, leaves })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_layer_jacobian_is_scaled_input() {
        let mlp = Mlp::new(2, 1, 1, 1, Activation::Relu, 0).unwrap();
        let j = mlp.jacobian(&Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap()).unwrap();
        let r = 1.0 / 2f64.sqrt();
        assert!(j.data().iter().all(|&v| (v - r).abs() < 1e-15));
    }

    #[test]
    fn jacobian_frobenius_matches_per_output_backward() {
        let mlp = Mlp::new(5, 16, 3, 2, Activation::Relu, 3).unwrap();
        let x = Tensor::new(vec![1, 5], vec![0.3, -0.1, 0.4, 0.2, -0.6]).unwrap();
        let j = mlp.jacobian(&x).unwrap();
        let mut total = 0.0;
        for i in 0..3 {
            let mut s = Tensor::zeros(&[1, 3]);
            s.data_mut()[i] = 1.0;
            total += mlp.vjp(&x, &s).unwrap().iter().map(|v| v * v).sum::<f64>();
        }
        assert!((j.sum_squares() - total).abs() <= 1e-12 * total);
    }

    #[test]
    fn parameter_count_and_depth() {
        let mlp = Mlp::new(4, 8, 2, 3, Activation::Tanh, 0).unwrap();
        assert_eq!(mlp.depth(), 3);
        assert_eq!(mlp.num_params(), 4 * 8 + 8 * 8 + 8 * 2);
        assert!(Mlp::new(4, 8, 2, 0, Activation::Relu, 0).is_err());
    }
}
