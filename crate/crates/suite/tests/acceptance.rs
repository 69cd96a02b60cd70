//! Acceptance suite: every criterion runs at its stated tolerance and
//! prints one PASS/FAIL line. The conv micro-benchmark ground truth is built
//! once and cached under the cargo target directory.

use std::path::PathBuf;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tracenas::data::DatasetBundle;
use tracenas::eval::{agnostic_experiment, correlation, rank_space, tradeoff_curve, AgnosticMode, BenchmarkProtocol, ScoreOptions, Scorer};
use tracenas::loss::LossKind;
use tracenas::model::{Activation, Mlp};
use tracenas::ntk::{
    data_agnostic_bound, exact_ntk, linearization_gap, mse_trajectory, ntk_width_convergence, prop1_leading_bound,
    prop2_gap_check, trace_lower_bounds, trace_norm_exact, LinearizedModel,
};
use tracenas::search::{
    delta_star, nasi_search, nu_fixed, search_labels, Complexity, NuPolicy, PenaltyConfig, SearchOutcome, SearchState,
    NU_SAMPLES,
};
use tracenas::space::{instantiate, ArchId, CellSpace};
use tracenas::verify::{dataset_for, dynamics_setup, sparse_unit_rows, unit_rows};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn within(budget: Duration, started: Instant, o: Outcome) -> Outcome {
    let took = started.elapsed();
    outcome(
        o.passed && took <= budget,
        format!("{}; {:.1}s of {}s budget", o.detail, took.as_secs_f64(), budget.as_secs()),
    )
}

fn rel_gap(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

fn random_instances(count: usize, seed: u64) -> Vec<(CellSpace, tracenas::space::ArchInstance)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spaces = [CellSpace::default_dense(), CellSpace::default_conv()];
    (0..count)
        .map(|i| {
            let space = spaces[i % 2].clone();
            let arch = ArchId::random(&space, &mut rng);
            let inst = instantiate(&space, &arch, rng.random()).unwrap();
            (space, inst)
        })
        .collect()
}

fn trace_identity() -> Outcome {
    let started = Instant::now();
    let data = [dataset_for(&CellSpace::default_dense(), 8, 1).unwrap(), dataset_for(&CellSpace::default_conv(), 8, 1).unwrap()];
    let mut worst: f64 = 0.0;
    for (space, inst) in random_instances(50, 101) {
        let x = &data[space.input.is_image() as usize].x;
        let t = trace_norm_exact(&inst, x).unwrap();
        let g = exact_ntk(&inst, x).unwrap();
        if t > 0.0 {
            worst = worst.max(rel_gap(g.trace(), t));
        }
    }
    within(Duration::from_secs(60), started, outcome(worst < 1e-8, format!("50 archs, max relative gap {worst:.2e}")))
}

fn inequality_chain() -> Outcome {
    let started = Instant::now();
    let data = [dataset_for(&CellSpace::default_dense(), 32, 2).unwrap(), dataset_for(&CellSpace::default_conv(), 32, 2).unwrap()];
    let mut violations = 0;
    let mut checks = 0;
    for (i, (space, inst)) in random_instances(100, 202).into_iter().enumerate() {
        let d = &data[space.input.is_image() as usize];
        for loss in [LossKind::Mse, LossKind::CrossEntropy] {
            let e = trace_lower_bounds(&inst, &d.x, &d.y, loss, 8, i as u64).unwrap();
            let slack = 1e-8 * e.exact.max(1e-300);
            if e.exact + slack < e.grad_sum || e.grad_sum + slack < e.partition {
                violations += 1;
            }
            checks += 1;
        }
    }
    within(
        Duration::from_secs(120),
        started,
        outcome(violations == 0, format!("{violations} violations in {checks} (arch, loss) checks")),
    )
}

fn closed_form_dynamics() -> Outcome {
    let started = Instant::now();
    let (mlp, x, y) = dynamics_setup(512, 16, 0).unwrap();
    let lin = LinearizedModel::new(&mlp, &x).unwrap();
    let gram = lin.gram().unwrap();
    let eta = 0.5 / gram.max_eigenvalue();
    let (sim, _) = lin.train(&y, eta, 100).unwrap();
    let residual: Vec<f64> = y.data().iter().zip(lin.initial_outputs()).map(|(a, b)| a - b).collect();
    let cf = mse_trajectory(&gram, &residual, eta, &[10.0, 50.0, 100.0]).unwrap();
    let worst = cf
        .times
        .iter()
        .zip(&cf.losses)
        .map(|(&t, &l)| rel_gap(sim.at(t).unwrap(), l))
        .fold(0.0, f64::max);
    within(Duration::from_secs(60), started, outcome(worst <= 0.05, format!("max relative gap {worst:.2e} at t in {{10, 50, 100}}")))
}

fn leading_bound() -> Outcome {
    let (mlp, x, y) = dynamics_setup(512, 16, 0).unwrap();
    let lin = LinearizedModel::new(&mlp, &x).unwrap();
    let gram = lin.gram().unwrap();
    let eta = 0.5 / gram.max_eigenvalue();
    let (sim, _) = lin.train(&y, eta, 10).unwrap();
    let mut ok = true;
    let mut detail = Vec::new();
    for t in [1.0, 10.0] {
        let bound = prop1_leading_bound(&gram, eta, t).unwrap();
        let loss = sim.at(t).unwrap();
        ok &= loss <= bound + 0.1;
        detail.push(format!("L_{t} = {loss:.4} vs {bound:.4} + 0.1"));
    }
    let lam = gram.mean_eigenvalue();
    let feasibility = [0.5, 0.999, 1.0, 1.5, 3.0]
        .iter()
        .all(|&c| prop1_leading_bound(&gram, c / lam, 1.0).is_err() == (c >= 1.0));
    detail.push(format!("feasibility error iff eta*mean >= 1: {feasibility}"));
    outcome(ok && feasibility, detail.join("; "))
}

fn analytic_convergence() -> Outcome {
    let started = Instant::now();
    let x = unit_rows(6, 8, 5);
    let widths = [16, 64, 256, 1024];
    let dev = ntk_width_convergence(&widths, &x, 2, &[0, 1, 2, 3, 4]).unwrap();
    let inversions = dev.windows(2).filter(|w| w[1].deviation > w[0].deviation).count();
    let last = dev.last().unwrap().deviation;
    let series: Vec<String> = dev.iter().map(|d| format!("{}:{:.4}", d.width, d.deviation)).collect();
    within(
        Duration::from_secs(300),
        started,
        outcome(
            inversions <= 1 && last < 0.15,
            format!("deviation {} ({inversions} inversions)", series.join(" ")),
        ),
    )
}

fn linearization_gap_shrinks() -> Outcome {
    let mean_gap = |width: usize| {
        (0..5u64)
            .map(|seed| {
                let (mlp, x, y) = dynamics_setup(width, 16, 100 + seed).unwrap();
                let eta = 0.5 / exact_ntk(&mlp, &x).unwrap().max_eigenvalue();
                linearization_gap(&mlp, &x, &y, eta, 100).unwrap()
            })
            .sum::<f64>()
            / 5.0
    };
    let (narrow, wide) = (mean_gap(64), mean_gap(1024));
    outcome(wide < narrow, format!("5-seed mean sup gap {narrow:.4e} at width 64, {wide:.4e} at width 1024"))
}

fn approximation_quality(train: &DatasetBundle, protocol: &BenchmarkProtocol) -> Outcome {
    let started = Instant::now();
    let opts = |b| ScoreOptions {
        batch_size: b,
        ..protocol.scoring
    };
    let space = &protocol.space;
    let at64 = rank_space(space, &train.x, &train.y, &[Scorer::Exact, Scorer::Approx], &opts(64)).unwrap();
    let exact = at64.column("exact").unwrap();
    let rho64 = correlation(&at64.column("approx").unwrap(), &exact).unwrap().pearson;
    let at4 = rank_space(space, &train.x, &train.y, &[Scorer::Approx], &opts(4)).unwrap();
    let rho4 = correlation(&at4.column("approx").unwrap(), &exact).unwrap().pearson;
    within(
        Duration::from_secs(600),
        started,
        outcome(
            rho64 >= 0.6 && rho64 >= rho4 - 0.05,
            format!("pearson {rho64:.3} at b=64, {rho4:.3} at b=4"),
        ),
    )
}

fn agnosticism(train: &DatasetBundle, protocol: &BenchmarkProtocol) -> Outcome {
    let started = Instant::now();
    let run = |mode| agnostic_experiment(&protocol.space, &train.x, &train.y, mode, &protocol.scoring, 7).unwrap().pearson;
    let (labels, data) = (run(AgnosticMode::RandomLabels), run(AgnosticMode::RandomData));
    within(
        Duration::from_secs(600),
        started,
        outcome(
            labels >= 0.9 && data >= 0.8,
            format!("pearson {labels:.4} with random labels, {data:.4} with random inputs"),
        ),
    )
}

fn data_agnostic_gap() -> Outcome {
    let (n0, depth) = (64, 3);
    let bound = data_agnostic_bound(1.0, depth, n0);
    let mut worst: f64 = 0.0;
    let mut failures = 0;
    for trial in 0..20u64 {
        let mlp = Mlp::new(n0, 512, 1, depth, Activation::Relu, 1000 + trial).unwrap();
        let p = unit_rows(16, n0, 2000 + trial);
        let q = sparse_unit_rows(16, n0, 4, 3000 + trial);
        let c = prop2_gap_check(&mlp, &p, &q, 1.0, depth).unwrap();
        worst = worst.max(c.gap);
        failures += usize::from(c.gap > bound);
    }
    outcome(failures == 0, format!("20 trials, max gap {worst:.3e} <= 2L/n0 = {bound:.4}"))
}

fn cache_path() -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("conv_micro_ground_truth.jsonl")
}

/// The five seeded searches shared by the effectiveness and contract
/// criteria.
fn benchmark_searches(train: &DatasetBundle, protocol: &BenchmarkProtocol) -> (Vec<SearchOutcome>, Vec<Duration>) {
    let space = &protocol.space;
    let y = search_labels(Some(&train.y), train.samples(), space.output, 0).unwrap();
    let nu0 = nu_fixed(space, &train.x, &y, LossKind::Mse, 64, 0, NU_SAMPLES).unwrap();
    (0..5u64)
        .map(|seed| {
            let cfg = PenaltyConfig {
                mu: Complexity::for_space(space).default_mu(),
                seed,
                ..PenaltyConfig::new(NuPolicy::Adaptive(nu0))
            };
            let started = Instant::now();
            let out = nasi_search(space, &train.x, &y, &cfg).unwrap();
            (out, started.elapsed())
        })
        .unzip()
}

fn search_effectiveness(protocol: &BenchmarkProtocol, errors: &[f64], searches: &[SearchOutcome], times: &[Duration], build: Duration) -> Outcome {
    let cutoff = errors.len() / 4;
    let positions: Vec<usize> = searches
        .iter()
        .map(|s| {
            let e = errors[s.selected.rank(&protocol.space) as usize];
            errors.iter().filter(|&&v| v < e).count()
        })
        .collect();
    let hits = positions.iter().filter(|&&p| p < cutoff).count();
    let slowest = times.iter().max().unwrap();
    let picks: Vec<String> = searches
        .iter()
        .zip(&positions)
        .map(|(s, p)| format!("{} (#{p})", s.selected.describe(&protocol.space)))
        .collect();
    outcome(
        hits >= 4 && *slowest <= Duration::from_secs(30) && build <= Duration::from_secs(1800),
        format!(
            "{hits}/5 seeds in the top {cutoff} of {}; picks {}; slowest search {:.1}s; ground truth {:.0}s",
            errors.len(),
            picks.join(", "),
            slowest.as_secs_f64(),
            build.as_secs_f64()
        ),
    )
}

fn tradeoff(trace: &[f64], errors: &[f64]) -> Outcome {
    let curve = tradeoff_curve(trace, errors, 4).unwrap();
    let means: Vec<String> = curve.bins.iter().map(|b| format!("{:.3}", b.mean_error)).collect();
    outcome(
        curve.bins.len() == 4 && curve.interior_min(),
        format!("mean test error per trace bin [{}], argmin bin {}", means.join(", "), curve.argmin),
    )
}

#[derive(serde::Serialize, serde::Deserialize, PartialEq, Debug)]
struct Golden {
    selected: String,
    traces: Vec<f64>,
    delta: Vec<f64>,
}

fn optimizer_contracts(searches: &[SearchOutcome]) -> Outcome {
    let mut notes = Vec::new();
    let ball = searches.iter().all(|s| s.delta.iter().map(|v| v * v).sum::<f64>().sqrt() <= 1.0 + 1e-12);
    notes.push(format!("|delta| <= xi on {} runs: {ball}", searches.len()));

    let hand = delta_star(&[vec![1.0, 0.0], vec![0.0, 2.0]], 1.0).unwrap() == vec![0.5, 0.5];
    notes.push(format!("hand example: {hand}"));

    let mut state = SearchState::new(&CellSpace::default_dense(), 10.0);
    let history = [4.0, 6.0, 10.0, 8.0];
    let nus: Vec<f64> = history.iter().map(|&t| state.nu_adaptive_step(t)).collect();
    let want = [10.0, 7.0, 20.0 / 3.0, 7.5];
    let adaptive = nus.iter().zip(want).all(|(a, b)| (a - b).abs() < 1e-12);
    notes.push(format!("scripted adaptive nu {nus:?}: {adaptive}"));

    let space = CellSpace::default_dense();
    let data = dataset_for(&space, 128, 12).unwrap();
    let cfg = PenaltyConfig {
        steps: 20,
        batch_size: 32,
        seed: 4,
        ..PenaltyConfig::new(NuPolicy::Adaptive(40.0))
    };
    let run = nasi_search(&space, &data.x, &data.y, &cfg).unwrap();
    let got = Golden {
        selected: run.selected.describe(&space),
        traces: run.state.traces.clone(),
        delta: run.delta.clone(),
    };
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden/search_dense.json");
    if std::env::var_os("TRACENAS_BLESS").is_some() {
        std::fs::write(&path, serde_json::to_string_pretty(&got).unwrap() + "\n").unwrap();
    }
    let golden = std::fs::read_to_string(&path)
        .ok()
        .and_then(|t| serde_json::from_str::<Golden>(&t).ok())
        .is_some_and(|g| g == got);
    notes.push(format!("golden search run: {golden}"));
    outcome(ball && hand && adaptive && golden, notes.join("; "))
}

#[test]
fn acceptance_criteria() {
    let mut results: Vec<(u8, &str, Outcome)> = Vec::new();
    let mut record = |id: u8, name: &'static str, o: Outcome| {
        println!("{} [{id:>2}] {name}: {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
        results.push((id, name, o));
    };
    record(1, "trace identity", trace_identity());
    record(2, "inequality chain", inequality_chain());
    record(3, "closed-form dynamics", closed_form_dynamics());
    record(4, "leading loss bound", leading_bound());
    record(5, "analytic kernel convergence", analytic_convergence());
    record(6, "linearization gap", linearization_gap_shrinks());

    let protocol = BenchmarkProtocol::conv_micro();
    let (train, _) = protocol.splits().unwrap();
    record(7, "approximation quality", approximation_quality(&train, &protocol));
    record(8, "label and data agnosticism", agnosticism(&train, &protocol));
    record(9, "data-agnostic gap bound", data_agnostic_gap());

    let started = Instant::now();
    let cache = protocol.ground_truth(&cache_path()).unwrap();
    let build = started.elapsed();
    let errors = cache.ranked.column("test_error").unwrap();
    let (searches, times) = benchmark_searches(&train, &protocol);
    record(10, "search effectiveness", search_effectiveness(&protocol, &errors, &searches, &times, build));
    record(11, "trade-off curve", tradeoff(&cache.ranked.column("trace_approx").unwrap(), &errors));
    record(12, "optimizer contracts", optimizer_contracts(&searches));

    let failed: Vec<String> = results.iter().filter(|r| !r.2.passed).map(|r| format!("{} ({})", r.0, r.1)).collect();
    println!("{} of {} criteria passed", results.len() - failed.len(), results.len());
    assert!(failed.is_empty(), "failed criteria: {}", failed.join(", "));
}
