use super::kernels::{self, ConvDims};
use super::scalar::Scalar;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Primitive operation catalog.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PrimKind {
    /// `(m, in) x (out, in) -> (m, out)`, scaled by `1/sqrt(in)`.
    Dense,
    /// `(m, c, h, w) x (o, c, 3, 3) -> (m, o, h, w)`, scaled by `1/sqrt(9c)`.
    Conv3x3,
    /// `(m, c, h, w) x (o, c, 1, 1) -> (m, o, h, w)`, scaled by `1/sqrt(c)`.
    Conv1x1,
    Relu,
    Tanh,
    Add,
    ConcatChannels,
    MeanPool,
    MaxPool,
    /// `(m, c, h, w) -> (m, c)`.
    GlobalMeanPool,
    Scale(f64),
    Softmax,
    Identity,
    Zero,
}

impl PrimKind {
    pub fn name(&self) -> &'static str {
        match self {
            PrimKind::Dense => "dense",
            PrimKind::Conv3x3 => "conv2d-3x3",
            PrimKind::Conv1x1 => "conv2d-1x1",
            PrimKind::Relu => "relu",
            PrimKind::Tanh => "tanh",
            PrimKind::Add => "add",
            PrimKind::ConcatChannels => "concat-channels",
            PrimKind::MeanPool => "mean-pool",
            PrimKind::MaxPool => "max-pool",
            PrimKind::GlobalMeanPool => "global-mean-pool",
            PrimKind::Scale(_) => "scale-by-constant",
            PrimKind::Softmax => "softmax",
            PrimKind::Identity => "identity",
            PrimKind::Zero => "zero",
        }
    }
}

/// Handle to a node on a [`Tape`].
///
/// Handles carry the tape generation they were created in; using one after
/// [`Tape::reset`] is a usage error.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    id: usize,
    generation: u64,
}

impl Var {
    pub fn index(&self) -> usize {
        self.id
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Dense { x: usize, w: usize },
    Conv { x: usize, w: usize, k: usize },
    Relu(usize),
    Tanh(usize),
    Add(usize, usize),
    Concat(Vec<usize>),
    MeanPool(usize),
    MaxPool(usize),
    GlobalMeanPool(usize),
    Scale(usize, f64),
    Gate(usize, T),
    Softmax(usize),
    Identity(usize),
    Zero,
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Reverse-mode recording of primitive applications.
///
/// Nodes are appended in evaluation order, so every node's inputs precede it.
#[derive(Clone, Debug, Default)]
pub struct Tape<T: Scalar = f64> {
    nodes: Vec<Node<T>>,
    generation: u64,
}

/// Adjoints of every leaf after a backward sweep.
#[derive(Debug)]
pub struct Gradients<T: Scalar = f64> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
    generation: u64,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to the leaf `v`; zero if the output does not
    /// depend on it.
    pub fn get(&self, v: Var) -> Result<Tensor<T>> {
        if v.generation != self.generation || v.id >= self.shapes.len() {
            return Err(Error::Usage(format!("variable {} is not a leaf of this sweep", v.id)));
        }
        match &self.grads[v.id] {
            Some(g) => Ok(g.clone()),
            None if !self.shapes[v.id].is_empty() => Ok(Tensor::zeros(&self.shapes[v.id])),
            None => Err(Error::Usage(format!("variable {} is not a leaf", v.id))),
        }
    }

    /// Moves the gradient of `v` out, leaving zeros behind.
    pub fn take(&mut self, v: Var) -> Result<Tensor<T>> {
        let g = self.get(v)?;
        self.grads[v.id] = None;
        Ok(g)
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            generation: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node. Outstanding [`Var`]s become invalid.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.generation += 1;
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.generation != self.generation || v.id >= self.nodes.len() {
            return Err(Error::Usage(format!(
                "variable {} belongs to a consumed or foreign tape",
                v.id
            )));
        }
        Ok(v.id)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, kind: &'static str) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite {
                context: kind.to_string(),
            });
        }
        self.nodes.push(Node { value, op });
        Ok(Var {
            id: self.nodes.len() - 1,
            generation: self.generation,
        })
    }

    /// Records a leaf (parameter or input).
    pub fn leaf(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push(value, Op::Leaf, "leaf")
    }

    pub fn value(&self, v: Var) -> Result<&Tensor<T>> {
        let id = self.check(v)?;
        Ok(&self.nodes[id].value)
    }

    fn val(&self, id: usize) -> &Tensor<T> {
        &self.nodes[id].value
    }

    /// Applies a primitive. `inputs` are activations, `params` weights.
    pub fn apply(&mut self, kind: PrimKind, inputs: &[Var], params: &[Var]) -> Result<Var> {
        let arity = |n_in: usize, n_p: usize| -> Result<()> {
            if inputs.len() != n_in || params.len() != n_p {
                return Err(Error::shape(
                    kind.name(),
                    format!(
                        "expected {n_in} inputs and {n_p} params, got {} and {}",
                        inputs.len(),
                        params.len()
                    ),
                ));
            }
            Ok(())
        };
        match kind {
            PrimKind::Dense => {
                arity(1, 1)?;
                self.dense(inputs[0], params[0])
            }
            PrimKind::Conv3x3 | PrimKind::Conv1x1 => {
                arity(1, 1)?;
                self.conv(inputs[0], params[0], kind)
            }
            PrimKind::Add => {
                arity(2, 0)?;
                self.add(inputs[0], inputs[1])
            }
            PrimKind::ConcatChannels => {
                if inputs.is_empty() || !params.is_empty() {
                    return Err(Error::shape(kind.name(), "needs >= 1 input and no params"));
                }
                self.concat(inputs)
            }
            _ => {
                arity(1, 0)?;
                let x = inputs[0];
                match kind {
                    PrimKind::Relu => self.relu(x),
                    PrimKind::Tanh => self.tanh(x),
                    PrimKind::MeanPool => self.mean_pool(x),
                    PrimKind::MaxPool => self.max_pool(x),
                    PrimKind::GlobalMeanPool => self.global_mean_pool(x),
                    PrimKind::Scale(c) => self.scale(x, c),
                    PrimKind::Softmax => self.softmax(x),
                    PrimKind::Identity => self.identity(x),
                    PrimKind::Zero => self.zero_like(x),
                    _ => unreachable!(),
                }
            }
        }
    }

    pub fn dense(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xi, wi) = (self.check(x)?, self.check(w)?);
        let (xs, ws) = (self.val(xi).shape(), self.val(wi).shape());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::shape("dense", format!("input {xs:?}, weight {ws:?}")));
        }
        let (m, fan_in, out) = (xs[0], xs[1], ws[0]);
        let y = kernels::dense_fwd(self.val(xi).data(), self.val(wi).data(), m, fan_in, out);
        self.push(
            Tensor::from_parts_unchecked(vec![m, out], y),
            Op::Dense { x: xi, w: wi },
            "dense",
        )
    }

    fn conv_dims(&self, xi: usize, wi: usize, k: usize) -> Result<ConvDims> {
        let (xs, ws) = (self.val(xi).shape(), self.val(wi).shape());
        if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] || ws[2] != k || ws[3] != k {
            return Err(Error::shape(
                if k == 3 { "conv2d-3x3" } else { "conv2d-1x1" },
                format!("input {xs:?}, weight {ws:?}"),
            ));
        }
        Ok(ConvDims {
            m: xs[0],
            c_in: xs[1],
            c_out: ws[0],
            h: xs[2],
            w: xs[3],
            k,
        })
    }

    pub fn conv(&mut self, x: Var, w: Var, kind: PrimKind) -> Result<Var> {
        let k = match kind {
            PrimKind::Conv3x3 => 3,
            PrimKind::Conv1x1 => 1,
            other => return Err(Error::shape("conv", format!("{} is not a convolution", other.name()))),
        };
        let (xi, wi) = (self.check(x)?, self.check(w)?);
        let d = self.conv_dims(xi, wi, k)?;
        let y = kernels::conv_fwd(self.val(xi).data(), self.val(wi).data(), d);
        self.push(
            Tensor::from_parts_unchecked(vec![d.m, d.c_out, d.h, d.w], y),
            Op::Conv { x: xi, w: wi, k },
            kind.name(),
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let y = self.val(xi).map(|v| v.relu());
        self.push(y, Op::Relu(xi), "relu")
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let y = self.val(xi).map(|v| v.tanh());
        self.push(y, Op::Tanh(xi), "tanh")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        if self.val(ai).shape() != self.val(bi).shape() {
            return Err(Error::shape(
                "add",
                format!("{:?} vs {:?}", self.val(ai).shape(), self.val(bi).shape()),
            ));
        }
        let mut y = self.val(ai).clone();
        y.add_assign(self.val(bi));
        self.push(y, Op::Add(ai, bi), "add")
    }

    /// Concatenates along axis 1.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let ids = xs.iter().map(|&v| self.check(v)).collect::<Result<Vec<_>>>()?;
        let first = self.val(ids[0]).shape().to_vec();
        if first.len() < 2 {
            return Err(Error::shape("concat-channels", format!("rank-1 input {first:?}")));
        }
        let trailing: usize = first[2..].iter().product();
        let mut channels = 0;
        for &i in &ids {
            let s = self.val(i).shape();
            if s.len() != first.len() || s[0] != first[0] || s[2..] != first[2..] {
                return Err(Error::shape("concat-channels", format!("{s:?} vs {first:?}")));
            }
            channels += s[1];
        }
        let m = first[0];
        let mut data = Vec::with_capacity(m * channels * trailing);
        for r in 0..m {
            for &i in &ids {
                data.extend_from_slice(self.val(i).row(r));
            }
        }
        let mut shape = first;
        shape[1] = channels;
        self.push(Tensor::from_parts_unchecked(shape, data), Op::Concat(ids), "concat-channels")
    }

    fn image_dims(&self, xi: usize, kind: &'static str) -> Result<(usize, usize, usize)> {
        let s = self.val(xi).shape();
        if s.len() != 4 {
            return Err(Error::shape(kind, format!("expected NCHW input, got {s:?}")));
        }
        Ok((s[0] * s[1], s[2], s[3]))
    }

    pub fn mean_pool(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let (p, h, w) = self.image_dims(xi, "mean-pool")?;
        let y = kernels::mean_pool_fwd(self.val(xi).data(), p, h, w);
        let shape = self.val(xi).shape().to_vec();
        self.push(Tensor::from_parts_unchecked(shape, y), Op::MeanPool(xi), "mean-pool")
    }

    pub fn max_pool(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let (p, h, w) = self.image_dims(xi, "max-pool")?;
        let y = kernels::max_pool_fwd(self.val(xi).data(), p, h, w);
        let shape = self.val(xi).shape().to_vec();
        self.push(Tensor::from_parts_unchecked(shape, y), Op::MaxPool(xi), "max-pool")
    }

    pub fn global_mean_pool(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let (_, h, w) = self.image_dims(xi, "global-mean-pool")?;
        let s = self.val(xi).shape().to_vec();
        let inv = 1.0 / (h * w) as f64;
        let y: Vec<T> = self
            .val(xi)
            .data()
            .chunks(h * w)
            .map(|plane| plane.iter().fold(T::zero(), |a, &b| a + b).scale(inv))
            .collect();
        self.push(
            Tensor::from_parts_unchecked(vec![s[0], s[1]], y),
            Op::GlobalMeanPool(xi),
            "global-mean-pool",
        )
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let xi = self.check(x)?;
        let y = self.val(xi).scaled(c);
        self.push(y, Op::Scale(xi, c), "scale-by-constant")
    }

    /// Multiplies by a scalar that is constant for the tape but may carry a
    /// tangent (architecture gates).
    pub fn gate(&mut self, x: Var, g: T) -> Result<Var> {
        let xi = self.check(x)?;
        let y = self.val(xi).map(|v| v * g);
        self.push(y, Op::Gate(xi, g), "gate")
    }

    /// Softmax over the trailing axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let s = self.val(xi).shape().to_vec();
        let w = *s.last().unwrap();
        let y = kernels::softmax_rows(self.val(xi).data(), w);
        self.push(Tensor::from_parts_unchecked(s, y), Op::Softmax(xi), "softmax")
    }

    pub fn identity(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let y = self.val(xi).clone();
        self.push(y, Op::Identity(xi), "identity")
    }

    /// Zeros shaped like `x`, with no dependence on it.
    pub fn zero_like(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let y = Tensor::zeros(self.val(xi).shape());
        self.push(y, Op::Zero, "zero")
    }

    /// Gradient of `<output, seed>` with respect to every leaf.
    pub fn backward(&self, output: Var, seed: &Tensor<T>) -> Result<Gradients<T>> {
        let out = self.check(output)?;
        if seed.shape() != self.val(out).shape() {
            return Err(Error::Usage(format!(
                "seed shape {:?} does not match output shape {:?}",
                seed.shape(),
                self.val(out).shape()
            )));
        }
        let n = out + 1;
        let mut adj: Vec<Option<Tensor<T>>> = vec![None; n];
        adj[out] = Some(seed.clone());

        fn accumulate<T: Scalar>(adj: &mut [Option<Tensor<T>>], id: usize, shape: &[usize], g: Vec<T>) {
            match &mut adj[id] {
                Some(a) => {
                    for (x, y) in a.data_mut().iter_mut().zip(g) {
                        *x += y;
                    }
                }
                slot @ None => *slot = Some(Tensor::from_parts_unchecked(shape.to_vec(), g)),
            }
        }

        for id in (0..n).rev() {
            let node = &self.nodes[id];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = adj[id].take() else { continue };
            let gd = g.data();
            match &node.op {
                Op::Leaf | Op::Zero => {}
                Op::Dense { x, w } => {
                    let (xs, ws) = (self.val(*x).shape(), self.val(*w).shape());
                    let (gx, gw) = kernels::dense_bwd(
                        gd,
                        self.val(*x).data(),
                        self.val(*w).data(),
                        xs[0],
                        xs[1],
                        ws[0],
                    );
                    accumulate(&mut adj, *x, xs, gx);
                    accumulate(&mut adj, *w, ws, gw);
                }
                Op::Conv { x, w, k } => {
                    let d = self.conv_dims(*x, *w, *k)?;
                    let (gx, gw) = kernels::conv_bwd(gd, self.val(*x).data(), self.val(*w).data(), d);
                    accumulate(&mut adj, *x, self.val(*x).shape(), gx);
                    accumulate(&mut adj, *w, self.val(*w).shape(), gw);
                }
                Op::Relu(x) => {
                    let xv = self.val(*x);
                    let gx = gd
                        .iter()
                        .zip(xv.data())
                        .map(|(&g, &v)| if v.re() > 0.0 { g } else { T::zero() })
                        .collect();
                    accumulate(&mut adj, *x, xv.shape(), gx);
                }
                Op::Tanh(x) => {
                    let gx = gd
                        .iter()
                        .zip(node.value.data())
                        .map(|(&g, &t)| g * (T::one() - t * t))
                        .collect();
                    accumulate(&mut adj, *x, node.value.shape(), gx);
                }
                Op::Add(a, b) => {
                    accumulate(&mut adj, *a, g.shape(), gd.to_vec());
                    accumulate(&mut adj, *b, g.shape(), gd.to_vec());
                }
                Op::Concat(ids) => {
                    let m = g.rows();
                    let widths: Vec<usize> = ids.iter().map(|&i| self.val(i).row_len()).collect();
                    let total: usize = widths.iter().sum();
                    let mut offset = 0;
                    for (&i, &wd) in ids.iter().zip(&widths) {
                        let mut part = Vec::with_capacity(m * wd);
                        for r in 0..m {
                            part.extend_from_slice(&gd[r * total + offset..r * total + offset + wd]);
                        }
                        accumulate(&mut adj, i, self.val(i).shape(), part);
                        offset += wd;
                    }
                }
                Op::MeanPool(x) => {
                    let (p, h, w) = self.image_dims(*x, "mean-pool")?;
                    accumulate(&mut adj, *x, g.shape(), kernels::mean_pool_bwd(gd, p, h, w));
                }
                Op::MaxPool(x) => {
                    let (p, h, w) = self.image_dims(*x, "max-pool")?;
                    let gx = kernels::max_pool_bwd(gd, self.val(*x).data(), p, h, w);
                    accumulate(&mut adj, *x, g.shape(), gx);
                }
                Op::GlobalMeanPool(x) => {
                    let s = self.val(*x).shape();
                    let hw = s[2] * s[3];
                    let inv = 1.0 / hw as f64;
                    let gx = gd.iter().flat_map(|&v| std::iter::repeat_n(v.scale(inv), hw)).collect();
                    accumulate(&mut adj, *x, s, gx);
                }
                Op::Scale(x, c) => {
                    accumulate(&mut adj, *x, g.shape(), gd.iter().map(|v| v.scale(*c)).collect());
                }
                Op::Gate(x, s) => {
                    accumulate(&mut adj, *x, g.shape(), gd.iter().map(|&v| v * *s).collect());
                }
                Op::Softmax(x) => {
                    let w = *g.shape().last().unwrap();
                    let gx = kernels::softmax_bwd(gd, node.value.data(), w);
                    accumulate(&mut adj, *x, g.shape(), gx);
                }
                Op::Identity(x) => accumulate(&mut adj, *x, g.shape(), gd.to_vec()),
            }
        }

        let shapes = (0..self.nodes.len())
            .map(|i| match self.nodes[i].op {
                Op::Leaf => self.nodes[i].value.shape().to_vec(),
                _ => Vec::new(),
            })
            .collect();
        let mut grads: Vec<Option<Tensor<T>>> = adj;
        grads.resize(self.nodes.len(), None);
        for (i, g) in grads.iter_mut().enumerate() {
            if !matches!(self.nodes[i].op, Op::Leaf) {
                *g = None;
            }
        }
        if grads.iter().flatten().any(|g| !g.all_finite()) {
            return Err(Error::NonFinite {
                context: "backward".into(),
            });
        }
        Ok(Gradients {
            grads,
            shapes,
            generation: self.generation,
        })
    }
}
