//! Network construction for cell spaces and weight instantiation.
//!
//! Topology: a linear stem (dense for vectors, 3x3 conv for images) produces
//! `s`; the first cell sees inputs `(s, relu(s))`, and cell `c` sees the
//! outputs of cells `c-2` and `c-1`. With concat merging, cell outputs are
//! projected back to `width` channels (dense / 1x1 conv, linear) before
//! entering a later cell. Image networks end in global average pooling;
//! all networks end in a linear dense head. Every weight is drawn N(0, 1)
//! and every dense/conv carries `1/sqrt(fan_in)`; there are no biases.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::arch::ArchId;
use super::cell::{CellOp, CellSpace, InputShape, MergeRule};
use crate::autograd::{PrimKind, Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{Model, Recorded};

/// Identifies one weight tensor of the supergraph.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamKey {
    Stem,
    Preprocess { cell: usize, slot: usize },
    Op { cell: usize, node: usize, op: usize },
    Head,
}

impl ParamKey {
    fn code(&self) -> [u64; 4] {
        match *self {
            ParamKey::Stem => [1, 0, 0, 0],
            ParamKey::Preprocess { cell, slot } => [2, cell as u64, slot as u64, 0],
            ParamKey::Op { cell, node, op } => [3, cell as u64, node as u64, op as u64],
            ParamKey::Head => [4, 0, 0, 0],
        }
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a stream seed from a base seed and a list of integers.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(splitmix(base), |acc, &p| splitmix(acc ^ splitmix(p)))
}

/// N(0, 1) draws for the block `key`; independent of the architecture.
fn draw_block(seed: u64, key: ParamKey, shape: &[usize]) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &key.code()));
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("block shape")
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub key: ParamKey,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl Block {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn stem_shape(space: &CellSpace) -> Vec<usize> {
    match space.input {
        InputShape::Vector(n0) => vec![space.width, n0],
        InputShape::Image { c, .. } => vec![space.width, c, 3, 3],
    }
}

fn preprocess_shape(space: &CellSpace) -> Vec<usize> {
    let from = space.cell_output_width();
    if space.input.is_image() {
        vec![space.width, from, 1, 1]
    } else {
        vec![space.width, from]
    }
}

fn needs_preprocess(space: &CellSpace, cell: usize, slot: usize) -> bool {
    space.merge == MergeRule::Concat && cell + slot >= 2
}

/// Parameter layout for `arch`, or for the whole supergraph when `None`.
fn layout(space: &CellSpace, arch: Option<&ArchId>) -> Vec<(ParamKey, Vec<usize>)> {
    let mut out = vec![(ParamKey::Stem, stem_shape(space))];
    for cell in 0..space.cells {
        for slot in 0..2 {
            if needs_preprocess(space, cell, slot) {
                out.push((ParamKey::Preprocess { cell, slot }, preprocess_shape(space)));
            }
        }
        for node in space.intermediate() {
            let ops: Vec<usize> = match arch {
                Some(a) => vec![a.nodes[node - 2].op],
                None => (0..space.catalog.len()).collect(),
            };
            for op in ops {
                if let Some(shape) = space.catalog[op].weight_shape(space.width) {
                    out.push((ParamKey::Op { cell, node, op }, shape));
                }
            }
        }
    }
    out.push((ParamKey::Head, vec![space.output, space.cell_output_width()]));
    out
}

/// Closed-form parameter count of `arch`.
pub fn param_count(space: &CellSpace, arch: &ArchId) -> usize {
    let stem = match space.input {
        InputShape::Vector(n0) => n0 * space.width,
        InputShape::Image { c, .. } => 9 * c * space.width,
    };
    let pre = match space.merge {
        MergeRule::Sum => 0,
        MergeRule::Concat => {
            let slots = (0..space.cells).map(|c| if c == 0 { 0 } else if c == 1 { 1 } else { 2 }).sum::<usize>();
            slots * space.cell_output_width() * space.width
        }
    };
    let cell: usize = arch
        .nodes
        .iter()
        .map(|c| space.catalog[c.op].param_count(space.width))
        .sum();
    stem + pre + space.cells * cell + space.output * space.cell_output_width()
}

/// Continuous per-node selection weights. A discrete architecture is the
/// one-hot case.
#[derive(Clone, Debug)]
pub struct Gates<T> {
    pub ops: Vec<Vec<T>>,
    pub inputs: Vec<Vec<T>>,
}

impl<T: Scalar> Gates<T> {
    pub fn hard(space: &CellSpace, arch: &ArchId) -> Self {
        let one_hot = |n: usize, k: usize| -> Vec<T> {
            (0..n).map(|i| if i == k { T::one() } else { T::zero() }).collect()
        };
        Gates {
            ops: arch.nodes.iter().map(|c| one_hot(space.catalog.len(), c.op)).collect(),
            inputs: arch
                .nodes
                .iter()
                .enumerate()
                .map(|(k, c)| one_hot(k + 2, c.input))
                .collect(),
        }
    }

    pub fn from_real(ops: &[Vec<f64>], inputs: &[Vec<f64>]) -> Self {
        let lift = |v: &[Vec<f64>]| v.iter().map(|r| r.iter().map(|&x| T::from_f64(x)).collect()).collect();
        Gates {
            ops: lift(ops),
            inputs: lift(inputs),
        }
    }

    /// Number of gate scalars, ops first then inputs (node order).
    pub fn len(&self) -> usize {
        self.ops.iter().chain(&self.inputs).map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Mutable access to gate `idx` in flattened order.
    pub fn flat_mut(&mut self, mut idx: usize) -> &mut T {
        for row in self.ops.iter_mut().chain(self.inputs.iter_mut()) {
            if idx < row.len() {
                return &mut row[idx];
            }
            idx -= row.len();
        }
        panic!("gate index out of range");
    }
}

/// Output of a recorded forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub output: Var,
    /// Parameter leaves in layout order (only those actually created).
    pub params: Vec<(ParamKey, Var)>,
}

fn weighted_sum<T: Scalar>(tape: &mut Tape<T>, terms: &[(Var, T)], like: Var) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for &(v, g) in terms {
        let term = if g == T::one() { v } else { tape.gate(v, g)? };
        acc = Some(match acc {
            None => term,
            Some(a) => tape.add(a, term)?,
        });
    }
    match acc {
        Some(v) => Ok(v),
        None => tape.zero_like(like),
    }
}

fn apply_op<T: Scalar>(tape: &mut Tape<T>, op: CellOp, x: Var, w: Option<Var>) -> Result<Var> {
    match op {
        CellOp::Identity => Ok(x),
        CellOp::Zero => tape.zero_like(x),
        CellOp::DenseRelu => {
            let y = tape.apply(PrimKind::Dense, &[x], &[w.unwrap()])?;
            tape.relu(y)
        }
        CellOp::DenseTanh => {
            let y = tape.apply(PrimKind::Dense, &[x], &[w.unwrap()])?;
            tape.tanh(y)
        }
        CellOp::Conv3x3Relu => {
            let y = tape.apply(PrimKind::Conv3x3, &[x], &[w.unwrap()])?;
            tape.relu(y)
        }
        CellOp::Conv1x1Relu => {
            let y = tape.apply(PrimKind::Conv1x1, &[x], &[w.unwrap()])?;
            tape.relu(y)
        }
        CellOp::MeanPool3x3 => tape.mean_pool(x),
        CellOp::MaxPool3x3 => tape.max_pool(x),
    }
}

/// Records the gated supergraph forward pass. Gate entries that are exactly
/// zero (value and tangent) prune their branch.
pub(crate) fn build<T, P>(
    tape: &mut Tape<T>,
    space: &CellSpace,
    x: Var,
    gates: &Gates<T>,
    param: &mut P,
) -> Result<Var>
where
    T: Scalar,
    P: FnMut(&mut Tape<T>, ParamKey) -> Result<Var>,
{
    let stem_w = param(tape, ParamKey::Stem)?;
    let stem = if space.input.is_image() {
        tape.apply(PrimKind::Conv3x3, &[x], &[stem_w])?
    } else {
        tape.apply(PrimKind::Dense, &[x], &[stem_w])?
    };
    let stem_act = tape.relu(stem)?;
    let mut outs: Vec<Var> = vec![stem, stem_act];
    for cell in 0..space.cells {
        let mut states = Vec::with_capacity(space.nodes);
        for slot in 0..2 {
            let src = outs[cell + slot];
            let s = if needs_preprocess(space, cell, slot) {
                let w = param(tape, ParamKey::Preprocess { cell, slot })?;
                let kind = if space.input.is_image() {
                    PrimKind::Conv1x1
                } else {
                    PrimKind::Dense
                };
                tape.apply(kind, &[src], &[w])?
            } else {
                src
            };
            states.push(s);
        }
        for node in space.intermediate() {
            let k = node - 2;
            let in_terms: Vec<(Var, T)> = gates.inputs[k]
                .iter()
                .enumerate()
                .filter(|(_, g)| **g != T::zero())
                .map(|(j, &g)| (states[j], g))
                .collect();
            let input = weighted_sum(tape, &in_terms, states[0])?;
            let mut op_terms = Vec::new();
            for (o, &g) in gates.ops[k].iter().enumerate() {
                if g == T::zero() {
                    continue;
                }
                let op = space.catalog[o];
                let w = if op.weight_shape(space.width).is_some() {
                    Some(param(tape, ParamKey::Op { cell, node, op: o })?)
                } else {
                    None
                };
                op_terms.push((apply_op(tape, op, input, w)?, g));
            }
            let y = weighted_sum(tape, &op_terms, input)?;
            states.push(y);
        }
        let inter = &states[2..];
        let merged = match space.merge {
            MergeRule::Sum => {
                let mut acc = inter[0];
                for &v in &inter[1..] {
                    acc = tape.add(acc, v)?;
                }
                acc
            }
            MergeRule::Concat => tape.concat(inter)?,
        };
        outs.push(merged);
    }
    let last = *outs.last().unwrap();
    let feat = if space.input.is_image() {
        tape.global_mean_pool(last)?
    } else {
        last
    };
    let head = param(tape, ParamKey::Head)?;
    tape.apply(PrimKind::Dense, &[feat], &[head])
}

fn check_input<T: Scalar>(space: &CellSpace, x: &Tensor<T>) -> Result<()> {
    let want = space.input.batch_shape(x.shape()[0]);
    if x.shape() != want.as_slice() {
        return Err(Error::shape(
            "forward",
            format!("input shape {:?}, space expects {want:?}", x.shape()),
        ));
    }
    Ok(())
}

/// The full one-shot network with every candidate op's weights.
#[derive(Clone, Debug)]
pub struct Supernet {
    pub space: CellSpace,
    pub seed: u64,
    blocks: BTreeMap<ParamKey, Tensor>,
}

impl Supernet {
    pub fn new(space: &CellSpace, seed: u64) -> Result<Self> {
        space.validate()?;
        let blocks = layout(space, None)
            .into_iter()
            .map(|(k, s)| (k, draw_block(seed, k, &s)))
            .collect();
        Ok(Supernet {
            space: space.clone(),
            seed,
            blocks,
        })
    }

    pub fn num_params(&self) -> usize {
        self.blocks.values().map(Tensor::len).sum()
    }

    /// Records a gated forward pass; parameter leaves are created on demand.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, x: &Tensor<T>, gates: &Gates<T>) -> Result<Forward> {
        check_input(&self.space, x)?;
        let xv = tape.leaf(x.clone())?;
        let mut params = Vec::new();
        let mut provider = |tape: &mut Tape<T>, key: ParamKey| -> Result<Var> {
            let v = tape.leaf(self.blocks[&key].lift())?;
            params.push((key, v));
            Ok(v)
        };
        let output = build(tape, &self.space, xv, gates, &mut provider)?;
        Ok(Forward { output, params })
    }

    pub fn instance(&self, arch: &ArchId) -> Result<ArchInstance> {
        ArchInstance::new(&self.space, arch, self.seed)
    }
}

/// A concrete architecture with its initial weights `theta`.
#[derive(Clone, Debug)]
pub struct ArchInstance {
    space: CellSpace,
    arch: ArchId,
    seed: u64,
    theta: Tensor,
    blocks: Vec<Block>,
}

/// Instantiates `arch` with N(0, 1) weights derived from `seed`.
///
/// Weights of a given op slot do not depend on the rest of the
/// architecture, so all instances with the same seed share one supergraph
/// initialization.
pub fn instantiate(space: &CellSpace, arch: &ArchId, seed: u64) -> Result<ArchInstance> {
    ArchInstance::new(space, arch, seed)
}

impl ArchInstance {
    pub fn new(space: &CellSpace, arch: &ArchId, seed: u64) -> Result<Self> {
        space.validate()?;
        arch.validate(space)?;
        let mut blocks = Vec::new();
        let mut data = Vec::new();
        for (key, shape) in layout(space, Some(arch)) {
            let t = draw_block(seed, key, &shape);
            blocks.push(Block {
                key,
                shape,
                offset: data.len(),
            });
            data.extend_from_slice(t.data());
        }
        // Zero-parameter architectures cannot exist: stem and head always have weights.
        let theta = Tensor::from_vec(data);
        Ok(ArchInstance {
            space: space.clone(),
            arch: arch.clone(),
            seed,
            theta,
            blocks,
        })
    }

    pub fn space(&self) -> &CellSpace {
        &self.space
    }

    pub fn arch(&self) -> &ArchId {
        &self.arch
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn theta(&self) -> &Tensor {
        &self.theta
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    /// Same architecture with replaced parameters (e.g. after training).
    pub fn with_theta(&self, theta: Tensor) -> Result<Self> {
        if theta.len() != self.theta.len() {
            return Err(Error::shape(
                "with_theta",
                format!("expected {} parameters, got {}", self.theta.len(), theta.len()),
            ));
        }
        let mut out = self.clone();
        out.theta = theta.reshape(vec![self.theta.len()])?;
        Ok(out)
    }

    /// Records `f(X; theta)` on `tape`, returning the `(m, n)` output node.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, x: &Tensor<T>) -> Result<Forward> {
        check_input(&self.space, x)?;
        let xv = tape.leaf(x.clone())?;
        let gates = Gates::<T>::hard(&self.space, &self.arch);
        let mut params = Vec::with_capacity(self.blocks.len());
        let theta = self.theta.data();
        let by_key: BTreeMap<ParamKey, &Block> = self.blocks.iter().map(|b| (b.key, b)).collect();
        let mut provider = |tape: &mut Tape<T>, key: ParamKey| -> Result<Var> {
            let b = by_key[&key];
            let data = theta[b.offset..b.offset + b.len()].iter().map(|&v| T::from_f64(v)).collect();
            let v = tape.leaf(Tensor::from_parts_unchecked(b.shape.clone(), data))?;
            params.push((key, v));
            Ok(v)
        };
        let output = build(tape, &self.space, xv, &gates, &mut provider)?;
        Ok(Forward { output, params })
    }
}

impl Model for ArchInstance {
    fn num_params(&self) -> usize {
        self.theta.len()
    }

    fn num_outputs(&self) -> usize {
        self.space.output
    }

    fn theta(&self) -> &Tensor {
        &self.theta
    }

    fn with_theta(&self, theta: Tensor) -> Result<Self> {
        ArchInstance::with_theta(self, theta)
    }

    fn record(&self, tape: &mut Tape, x: &Tensor) -> Result<Recorded> {
        let fwd = self.forward(tape, x)?;
        let offsets: BTreeMap<ParamKey, usize> = self.blocks.iter().map(|b| (b.key, b.offset)).collect();
        Ok(Recorded {
            output: fwd.output,
            leaves: fwd.params.iter().map(|(k, v)| (*v, offsets[k])).collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::arch::{enumerate, NodeChoice};
    use crate::model::Model;

    fn image_batch(space: &CellSpace, m: usize) -> Tensor {
        let n = space.input.features();
        let data = (0..m * n).map(|i| ((i * 37 % 101) as f64 / 50.0 - 1.0) * 0.3).collect();
        Tensor::new(space.input.batch_shape(m), data).unwrap()
    }

    #[test]
    fn instantiate_is_deterministic() {
        let space = CellSpace::default_conv();
        let arch = ArchId::uniform(&space, 2, 0);
        let a = instantiate(&space, &arch, 11).unwrap();
        let b = instantiate(&space, &arch, 11).unwrap();
        assert_eq!(a.theta().data(), b.theta().data());
        let c = instantiate(&space, &arch, 12).unwrap();
        assert_ne!(a.theta().data(), c.theta().data());
    }

    #[test]
    fn shared_op_slots_share_weights() {
        let space = CellSpace::default_dense();
        let a = ArchId {
            nodes: vec![NodeChoice { op: 2, input: 0 }, NodeChoice { op: 3, input: 1 }],
        };
        let b = ArchId {
            nodes: vec![NodeChoice { op: 2, input: 1 }, NodeChoice { op: 0, input: 2 }],
        };
        let ia = instantiate(&space, &a, 5).unwrap();
        let ib = instantiate(&space, &b, 5).unwrap();
        // stem (16*32) + node-2 dense (32*32) blocks coincide
        let shared = 16 * 32 + 32 * 32;
        assert_eq!(ia.theta().data()[..shared], ib.theta().data()[..shared]);
    }

    #[test]
    fn param_count_matches_layout_for_every_arch() {
        let mut spaces = vec![CellSpace::default_dense(), CellSpace::default_conv()];
        let mut concat = CellSpace::default_conv();
        concat.merge = MergeRule::Concat;
        concat.cells = 3;
        concat.catalog.push(CellOp::MeanPool3x3);
        spaces.push(concat);
        for space in spaces {
            for arch in enumerate(&space).unwrap() {
                let inst = instantiate(&space, &arch, 0).unwrap();
                assert_eq!(inst.num_params(), param_count(&space, &arch), "{}", arch.describe(&space));
            }
        }
    }

    #[test]
    fn all_zero_arch_outputs_zero() {
        let space = CellSpace::default_conv();
        let arch = ArchId::uniform(&space, 1, 0);
        let inst = instantiate(&space, &arch, 3).unwrap();
        let y = inst.predict(&image_batch(&space, 5)).unwrap();
        assert_eq!(y.shape(), &[5, 4]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let space = CellSpace::default_conv();
        for arch in enumerate(&space).unwrap().iter().step_by(7) {
            let inst = instantiate(&space, arch, 3).unwrap();
            let x = Tensor::zeros(&space.input.batch_shape(2));
            assert!(inst.predict(&x).unwrap().data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn identity_arch_is_hand_traceable() {
        // N = 3, one cell, node 2 = identity of input 0 (the linear stem):
        // f(x) = W_head W_stem x / sqrt(k * n0)
        let space = CellSpace {
            nodes: 3,
            catalog: vec![CellOp::Identity],
            merge: MergeRule::Sum,
            input: InputShape::Vector(3),
            output: 2,
            width: 3,
            cells: 1,
            seed: 0,
        };
        let arch = ArchId {
            nodes: vec![NodeChoice { op: 0, input: 0 }],
        };
        let inst = instantiate(&space, &arch, 9).unwrap();
        let th = inst.theta().data();
        let (ws, wh) = (&th[..9], &th[9..15]);
        let x = [0.2, -0.5, 0.7];
        let y = inst.predict(&Tensor::new(vec![1, 3], x.to_vec()).unwrap()).unwrap();
        for o in 0..2 {
            let mut want = 0.0;
            for h in 0..3 {
                let s: f64 = (0..3).map(|i| ws[h * 3 + i] * x[i]).sum();
                want += wh[o * 3 + h] * s;
            }
            want /= (3.0f64 * 3.0).sqrt();
            assert!((y.data()[o] - want).abs() < 1e-14);
        }
    }

    #[test]
    fn supernet_with_hard_gates_matches_instance() {
        let space = CellSpace::default_conv();
        let net = Supernet::new(&space, 4).unwrap();
        let x = image_batch(&space, 3);
        for arch in enumerate(&space).unwrap().iter().step_by(11) {
            let mut tape = Tape::new();
            let fwd = net.forward(&mut tape, &x, &Gates::hard(&space, arch)).unwrap();
            let a = tape.value(fwd.output).unwrap().clone();
            let b = net.instance(arch).unwrap().predict(&x).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn weight_variance_is_unit() {
        let mut space = CellSpace::default_dense();
        space.width = 128;
        let arch = ArchId::uniform(&space, 2, 0);
        let inst = instantiate(&space, &arch, 21).unwrap();
        let d = inst.theta().data();
        assert!(d.len() >= 10_000);
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d.len() as f64;
        assert!((0.95..=1.05).contains(&var), "variance {var}");
    }

    #[test]
    fn wrong_input_shape_is_rejected() {
        let space = CellSpace::default_dense();
        let inst = instantiate(&space, &ArchId::uniform(&space, 2, 0), 0).unwrap();
        assert!(inst.predict(&Tensor::zeros(&[2, 15])).is_err());
    }
}
