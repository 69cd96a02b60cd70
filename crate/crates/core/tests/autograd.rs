//! Reverse-mode gradients against central finite differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tracenas::autograd::{PrimKind, Tape, Tensor, Var};
use tracenas::model::{Activation, Mlp, Model};

const STEP: f64 = 1e-5;
const REL_TOL: f64 = 1e-5;

/// Values bounded away from zero so ReLU kinks and pooling ties stay
/// outside the finite-difference stencil.
fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(0.1..1.0);
            if rng.random::<bool>() {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn run(kind: PrimKind, leaves: &[Tensor], n_inputs: usize) -> (Tape, Vec<Var>, Var) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = leaves.iter().map(|t| tape.leaf(t.clone()).unwrap()).collect();
    let out = tape.apply(kind, &vars[..n_inputs], &vars[n_inputs..]).unwrap();
    (tape, vars, out)
}

fn contract(tape: &Tape, out: Var, seed: &Tensor) -> f64 {
    tape.value(out).unwrap().data().iter().zip(seed.data()).map(|(a, b)| a * b).sum()
}

/// Largest relative error over every leaf, measured per leaf as
/// `||analytic - fd|| / max(||fd||, 1e-8)`.
fn gradcheck(kind: PrimKind, leaves: Vec<Tensor>, n_inputs: usize, rng: &mut ChaCha8Rng) -> f64 {
    let (tape, vars, out) = run(kind, &leaves, n_inputs);
    let seed = random_tensor(tape.value(out).unwrap().shape(), rng);
    let grads = tape.backward(out, &seed).unwrap();
    let mut worst: f64 = 0.0;
    for (li, leaf) in leaves.iter().enumerate() {
        let analytic = grads.get(vars[li]).unwrap();
        let (mut diff, mut norm) = (0.0, 0.0);
        for k in 0..leaf.len() {
            let probe = |delta: f64| {
                let mut moved = leaves.clone();
                let mut d = moved[li].data().to_vec();
                d[k] += delta;
                moved[li] = Tensor::new(leaf.shape().to_vec(), d).unwrap();
                let (t, _, o) = run(kind, &moved, n_inputs);
                contract(&t, o, &seed)
            };
            let fd = (probe(STEP) - probe(-STEP)) / (2.0 * STEP);
            diff += (analytic.data()[k] - fd).powi(2);
            norm += fd * fd;
        }
        worst = worst.max(diff.sqrt() / norm.sqrt().max(1e-8));
    }
    worst
}

#[test]
fn every_primitive_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let img = [2, 3, 4, 5];
    for trial in 0..3 {
        let cases: Vec<(PrimKind, Vec<Tensor>, usize)> = vec![
            (PrimKind::Dense, vec![random_tensor(&[3, 4], &mut rng), random_tensor(&[5, 4], &mut rng)], 1),
            (PrimKind::Conv3x3, vec![random_tensor(&img, &mut rng), random_tensor(&[2, 3, 3, 3], &mut rng)], 1),
            (PrimKind::Conv1x1, vec![random_tensor(&img, &mut rng), random_tensor(&[4, 3, 1, 1], &mut rng)], 1),
            (PrimKind::Relu, vec![random_tensor(&[3, 4], &mut rng)], 1),
            (PrimKind::Tanh, vec![random_tensor(&[3, 4], &mut rng)], 1),
            (PrimKind::Add, vec![random_tensor(&[3, 4], &mut rng), random_tensor(&[3, 4], &mut rng)], 2),
            (
                PrimKind::ConcatChannels,
                vec![random_tensor(&img, &mut rng), random_tensor(&[2, 1, 4, 5], &mut rng)],
                2,
            ),
            (PrimKind::MeanPool, vec![random_tensor(&img, &mut rng)], 1),
            (PrimKind::MaxPool, vec![random_tensor(&img, &mut rng)], 1),
            (PrimKind::GlobalMeanPool, vec![random_tensor(&img, &mut rng)], 1),
            (PrimKind::Scale(-1.7), vec![random_tensor(&[3, 4], &mut rng)], 1),
            (PrimKind::Softmax, vec![random_tensor(&[3, 4], &mut rng)], 1),
            (PrimKind::Identity, vec![random_tensor(&[3, 4], &mut rng)], 1),
            (PrimKind::Zero, vec![random_tensor(&[3, 4], &mut rng)], 1),
        ];
        for (kind, leaves, n_inputs) in cases {
            let err = gradcheck(kind, leaves, n_inputs, &mut rng);
            assert!(err < REL_TOL, "trial {trial}: {} relative error {err:.3e}", kind.name());
        }
    }
}

#[test]
fn two_layer_mlp_parameter_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for act in [Activation::Relu, Activation::Tanh] {
        let mlp = Mlp::new(6, 16, 3, 2, act, 9).unwrap();
        let x = random_tensor(&[4, 6], &mut rng);
        let seed = random_tensor(&[4, 3], &mut rng);
        let analytic = mlp.vjp(&x, &seed).unwrap();
        let theta = mlp.theta().data().to_vec();
        let value = |t: &[f64]| {
            let m = mlp.with_theta(Tensor::from_vec(t.to_vec())).unwrap();
            m.predict(&x).unwrap().data().iter().zip(seed.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let (mut diff, mut norm) = (0.0, 0.0);
        for k in 0..theta.len() {
            let (mut up, mut down) = (theta.clone(), theta.clone());
            up[k] += STEP;
            down[k] -= STEP;
            let fd = (value(&up) - value(&down)) / (2.0 * STEP);
            diff += (analytic[k] - fd).powi(2);
            norm += fd * fd;
        }
        let rel = diff.sqrt() / norm.sqrt();
        assert!(rel < REL_TOL, "{act:?}: relative error {rel:.3e}");
    }
}

#[test]
fn backward_is_linear_in_the_seed() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut tape = Tape::new();
    let x = tape.leaf(random_tensor(&[2, 3, 4, 4], &mut rng)).unwrap();
    let w1 = tape.leaf(random_tensor(&[3, 3, 3, 3], &mut rng)).unwrap();
    let w2 = tape.leaf(random_tensor(&[5, 3], &mut rng)).unwrap();
    let h = tape.conv(x, w1, PrimKind::Conv3x3).unwrap();
    let h = tape.tanh(h).unwrap();
    let h = tape.global_mean_pool(h).unwrap();
    let out = tape.dense(h, w2).unwrap();
    let (s1, s2) = (random_tensor(&[2, 5], &mut rng), random_tensor(&[2, 5], &mut rng));
    let (a, b) = (0.7, -2.3);
    let mixed = Tensor::new(
        vec![2, 5],
        s1.data().iter().zip(s2.data()).map(|(p, q)| a * p + b * q).collect(),
    )
    .unwrap();
    let g1 = tape.backward(out, &s1).unwrap();
    let g2 = tape.backward(out, &s2).unwrap();
    let gm = tape.backward(out, &mixed).unwrap();
    for v in [x, w1, w2] {
        let (p, q, r) = (g1.get(v).unwrap(), g2.get(v).unwrap(), gm.get(v).unwrap());
        for k in 0..r.len() {
            let want = a * p.data()[k] + b * q.data()[k];
            assert!((r.data()[k] - want).abs() <= 1e-12 * want.abs().max(1.0));
        }
    }
}
