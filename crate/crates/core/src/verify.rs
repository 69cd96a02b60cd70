//! Named property suites over the scoring machinery. Each suite builds its
//! own seeded synthetic data and reports every check it ran.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::data::{gen_dataset, DatasetBundle, GenParams, GeneratorKind};
use crate::error::{Error, Result};
use crate::eval::{agnostic_experiment, AgnosticMode, ScoreOptions};
use crate::loss::LossKind;
use crate::model::{Activation, Mlp};
use crate::ntk::{
    analytic_ntk_relu_mlp, exact_ntk, linearized_train, mse_trajectory, ntk_width_convergence, prop1_leading_bound,
    prop2_gap_check, trace_lower_bounds, trace_norm_exact, LinearizedModel,
};
use crate::space::{derive_seed, instantiate, ArchId, CellSpace};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Suite {
    Ntk,
    Chain,
    Dynamics,
    Agnostic,
    Prop2,
}

impl Suite {
    pub const ALL: [Suite; 5] = [Suite::Ntk, Suite::Chain, Suite::Dynamics, Suite::Agnostic, Suite::Prop2];

    pub fn name(&self) -> &'static str {
        match self {
            Suite::Ntk => "ntk",
            Suite::Chain => "chain",
            Suite::Dynamics => "dynamics",
            Suite::Agnostic => "agnostic",
            Suite::Prop2 => "prop2",
        }
    }
}

impl std::str::FromStr for Suite {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL.into_iter().find(|x| x.name() == s).ok_or_else(|| Error::Parse {
            what: "suite".into(),
            detail: format!("unknown suite '{s}' (ntk, chain, dynamics, agnostic, prop2)"),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub suite: Suite,
    pub checks: Vec<Check>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn first_failure(&self) -> Option<&Check> {
        self.checks.iter().find(|c| !c.passed)
    }

    fn check(&mut self, name: impl Into<String>, passed: bool, detail: impl Into<String>) {
        self.checks.push(Check {
            name: name.into(),
            passed,
            detail: detail.into(),
        });
    }
}

/// `m` rows of standard Gaussian directions scaled to unit norm.
pub fn unit_rows(m: usize, n0: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(m * n0);
    for _ in 0..m {
        let row: Vec<f64> = (0..n0).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        data.extend(row.into_iter().map(|v| v / norm));
    }
    Tensor::new(vec![m, n0], data).expect("shape")
}

/// `m` unit rows, each supported on `k` random coordinates with random signs.
pub fn sparse_unit_rows(m: usize, n0: usize, k: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = vec![0.0; m * n0];
    let mut coords: Vec<usize> = (0..n0).collect();
    let v = 1.0 / (k as f64).sqrt();
    for i in 0..m {
        coords.shuffle(&mut rng);
        for &c in &coords[..k] {
            data[i * n0 + c] = if rand::Rng::random::<bool>(&mut rng) { v } else { -v };
        }
    }
    Tensor::new(vec![m, n0], data).expect("shape")
}

/// `(m, n)` labels drawn uniformly from `[0, 1]`.
pub fn unit_interval_labels(m: usize, n: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u = Uniform::new_inclusive(0.0, 1.0).expect("range");
    Tensor::new(vec![m, n], (0..m * n).map(|_| u.sample(&mut rng)).collect()).expect("shape")
}

/// Seeded dataset matching the input and output shape of `space`.
pub fn dataset_for(space: &CellSpace, samples: usize, seed: u64) -> Result<DatasetBundle> {
    let kind = if space.input.is_image() {
        GeneratorKind::ImagePatches
    } else {
        GeneratorKind::Blobs
    };
    let params = GenParams {
        samples,
        input: space.input,
        classes: space.output,
        noise: if space.input.is_image() { 1.2 } else { 0.5 },
        normalize: true,
    };
    gen_dataset(kind, &params, seed)
}

fn rel_gap(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

fn ntk_suite(seed: u64) -> Result<SuiteReport> {
    let mut r = SuiteReport {
        suite: Suite::Ntk,
        checks: vec![],
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst_trace = 0.0f64;
    let mut worst_eig = 0.0f64;
    let mut worst_sym = 0.0f64;
    for space in [CellSpace::default_dense(), CellSpace::default_conv()] {
        let data = dataset_for(&space, 8, derive_seed(seed, &[1]))?;
        for _ in 0..5 {
            let arch = ArchId::random(&space, &mut rng);
            let inst = instantiate(&space, &arch, rand::Rng::random(&mut rng))?;
            let g = exact_ntk(&inst, &data.x)?;
            let t = trace_norm_exact(&inst, &data.x)?;
            if t > 0.0 {
                worst_trace = worst_trace.max(rel_gap(g.trace(), t));
            }
            worst_eig = worst_eig.min(g.min_eigenvalue());
            let d = g.dim();
            let raw = crate::ntk::exact_ntk_capped(&inst, &data.x, usize::MAX)?;
            for i in 0..d {
                for j in 0..d {
                    worst_sym = worst_sym.max((raw.entry(i, j) - raw.entry(j, i)).abs());
                }
            }
        }
    }
    r.check("two-path trace identity", worst_trace < 1e-8, format!("max relative gap {worst_trace:.3e}"));
    r.check("kernel is PSD", worst_eig >= -1e-8, format!("min eigenvalue {worst_eig:.3e}"));
    r.check("kernel is symmetric", worst_sym <= 1e-10, format!("max asymmetry {worst_sym:.3e}"));

    let x = unit_rows(4, 6, derive_seed(seed, &[2]));
    let lin = Mlp::new(6, 1, 1, 1, Activation::Relu, seed)?;
    let (emp, ana) = (exact_ntk(&lin, &x)?, analytic_ntk_relu_mlp(&x, 1, 1, Activation::Relu)?);
    let dev = emp
        .matrix()
        .data()
        .iter()
        .zip(ana.matrix().data())
        .fold(0.0f64, |a, (p, q)| a.max((p - q).abs()));
    r.check("linear model kernel equals scaled inner product", dev < 1e-12, format!("max deviation {dev:.3e}"));

    let conv = ntk_width_convergence(&[16, 1024], &x, 2, &[seed, seed + 1])?;
    r.check(
        "empirical kernel approaches the analytic limit",
        conv[1].deviation < conv[0].deviation && conv[1].deviation < 0.15,
        format!("deviation {:.4} at width 16, {:.4} at width 1024", conv[0].deviation, conv[1].deviation),
    );
    Ok(r)
}

fn chain_suite(seed: u64) -> Result<SuiteReport> {
    let mut r = SuiteReport {
        suite: Suite::Chain,
        checks: vec![],
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for space in [CellSpace::default_dense(), CellSpace::default_conv()] {
        let data = dataset_for(&space, 32, derive_seed(seed, &[3]))?;
        for loss in [LossKind::Mse, LossKind::CrossEntropy] {
            let mut violations = 0;
            let mut worst = f64::INFINITY;
            for _ in 0..10 {
                let arch = ArchId::random(&space, &mut rng);
                let inst = instantiate(&space, &arch, rand::Rng::random(&mut rng))?;
                let e = trace_lower_bounds(&inst, &data.x, &data.y, loss, 8, rand::Rng::random(&mut rng))?;
                let tol = 1e-8 * e.exact.max(1e-300);
                if e.exact + tol < e.grad_sum || e.grad_sum + tol < e.partition {
                    violations += 1;
                }
                if e.grad_sum > 0.0 {
                    worst = worst.min(e.exact / e.grad_sum);
                }
            }
            r.check(
                format!("lower-bound chain ({} space, {})", if space.input.is_image() { "conv" } else { "dense" }, loss.name()),
                violations == 0,
                format!("{violations} violations; min exact/grad_sum ratio {worst:.3}"),
            );
        }
    }
    Ok(r)
}

/// Setup shared by the dynamics checks: unit inputs, `[0, 1]` labels and a
/// wide one-hidden-layer ReLU network.
pub fn dynamics_setup(width: usize, m: usize, seed: u64) -> Result<(Mlp, Tensor, Tensor)> {
    let (n0, n) = (8, 2);
    let mlp = Mlp::new(n0, width, n, 2, Activation::Relu, seed)?;
    Ok((mlp, unit_rows(m, n0, derive_seed(seed, &[4])), unit_interval_labels(m, n, derive_seed(seed, &[5]))))
}

fn dynamics_suite(seed: u64) -> Result<SuiteReport> {
    let mut r = SuiteReport {
        suite: Suite::Dynamics,
        checks: vec![],
    };
    let (mlp, x, y) = dynamics_setup(512, 16, seed)?;
    let lin = LinearizedModel::new(&mlp, &x)?;
    let gram = lin.gram()?;
    let eta = 0.5 / gram.max_eigenvalue();
    let (sim, _) = lin.train(&y, eta, 100)?;
    let r0: Vec<f64> = y.data().iter().zip(lin.initial_outputs()).map(|(a, b)| a - b).collect();
    let cf = mse_trajectory(&gram, &r0, eta, &[10.0, 50.0, 100.0])?;
    let worst = cf
        .times
        .iter()
        .zip(&cf.losses)
        .map(|(&t, &l)| rel_gap(sim.at(t).unwrap(), l))
        .fold(0.0, f64::max);
    r.check("closed-form loss matches linearized training", worst <= 0.05, format!("max relative gap {worst:.3e}"));

    let mut ok = true;
    let mut detail = String::new();
    for t in [1.0, 10.0] {
        let bound = prop1_leading_bound(&gram, eta, t)?;
        let l = sim.at(t).unwrap();
        ok &= l <= bound + 0.1;
        detail.push_str(&format!("t={t}: loss {l:.4} <= {bound:.4} + 0.1; "));
    }
    r.check("loss under leading bound", ok, detail);

    let lam = gram.mean_eigenvalue();
    let feasible = [0.5, 0.999, 1.0, 2.0]
        .iter()
        .all(|&c| prop1_leading_bound(&gram, c / lam, 1.0).is_err() == (c >= 1.0));
    r.check("feasibility error exactly when eta * mean eigenvalue >= 1", feasible, format!("mean eigenvalue {lam:.4e}"));

    let still = linearized_train(&mlp, &x, &y, 0.0, 3)?;
    r.check(
        "zero learning rate keeps the loss constant",
        still.losses.iter().all(|&l| l == still.losses[0]),
        format!("{:?}", still.losses),
    );
    Ok(r)
}

fn agnostic_suite(seed: u64) -> Result<SuiteReport> {
    let mut r = SuiteReport {
        suite: Suite::Agnostic,
        checks: vec![],
    };
    let space = CellSpace::default_conv();
    let data = dataset_for(&space, 256, derive_seed(seed, &[6]))?;
    let opts = ScoreOptions {
        loss: LossKind::Mse,
        batch_size: 64,
        batch_seed: seed,
    };
    let labels = agnostic_experiment(&space, &data.x, &data.y, AgnosticMode::RandomLabels, &opts, seed)?;
    r.check(
        "random labels preserve the ranking",
        labels.pearson >= 0.9,
        format!("pearson {:.4}", labels.pearson),
    );
    let inputs = agnostic_experiment(&space, &data.x, &data.y, AgnosticMode::RandomData, &opts, seed)?;
    r.check(
        "random inputs preserve the ranking",
        inputs.pearson >= 0.8,
        format!("pearson {:.4}", inputs.pearson),
    );
    Ok(r)
}

fn prop2_suite(seed: u64) -> Result<SuiteReport> {
    let mut r = SuiteReport {
        suite: Suite::Prop2,
        checks: vec![],
    };
    let (n0, depth, m) = (64, 3, 16);
    let p = unit_rows(m, n0, derive_seed(seed, &[7]));
    let q = sparse_unit_rows(m, n0, 4, derive_seed(seed, &[8]));
    let mut worst: f64 = 0.0;
    let mut bound = 0.0;
    for trial in 0..5 {
        let mlp = Mlp::new(n0, 512, 1, depth, Activation::Relu, derive_seed(seed, &[9, trial]))?;
        let c = prop2_gap_check(&mlp, &p, &q, 1.0, depth)?;
        worst = worst.max(c.gap);
        bound = c.bound;
    }
    r.check("normalized trace gap within the data-agnostic bound", worst <= bound, format!("max gap {worst:.4e} <= {bound:.4e}"));
    let mlp = Mlp::new(n0, 512, 1, depth, Activation::Relu, seed)?;
    let same = prop2_gap_check(&mlp, &p, &p, 1.0, depth)?;
    r.check("identical inputs have zero gap", same.gap == 0.0, format!("gap {:.3e}", same.gap));
    Ok(r)
}

pub fn run_suite(suite: Suite, seed: u64) -> Result<SuiteReport> {
    match suite {
        Suite::Ntk => ntk_suite(seed),
        Suite::Chain => chain_suite(seed),
        Suite::Dynamics => dynamics_suite(seed),
        Suite::Agnostic => agnostic_suite(seed),
        Suite::Prop2 => prop2_suite(seed),
    }
}
