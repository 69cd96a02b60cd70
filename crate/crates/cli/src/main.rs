//! `tracenas` command-line front end.
//!
//! Exit codes: 0 success, 1 a verification suite or numeric check failed,
//! 2 usage or input errors.

mod record;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use record::{RunRecord, SearchEcho, Selection, RUN_SCHEMA};
use tracenas::data::{gen_dataset, DatasetBundle, GenParams, GeneratorKind};
use tracenas::eval::{
    correlation_labeled, rank_space, train_all, BenchmarkCache, LrSchedule, ScoreOptions, Scorer, TrainConfig, TrainingSetup,
};
use tracenas::io::{atomic_write, read_json_lines, to_json_lines};
use tracenas::loss::LossKind;
use tracenas::ntk::{approx_trace, trace_norm_exact};
use tracenas::search::{nasi_search, nu_fixed, search_labels, NuPolicy, PenaltyConfig, NU_SAMPLES};
use tracenas::space::{enumerate, instantiate, ArchId, CellSpace, InputShape};
use tracenas::verify::{run_suite, Suite};
use tracenas::Error;

const SEED_ENV: &str = "TRACENAS_SEED";

#[derive(Parser)]
#[command(name = "tracenas", version, about = "Training-free architecture search from the NTK trace")]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    GenData {
        #[arg(long, value_enum)]
        kind: Kind,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, env = SEED_ENV, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1000)]
        samples: usize,
        /// `n0` for vectors or `h,w,c` for images.
        #[arg(long, default_value = "16")]
        input: String,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 0.5)]
        noise: f64,
        /// Keep raw scale instead of shrinking rows into the unit ball.
        #[arg(long)]
        no_normalize: bool,
    },
    /// Print the space size and its canonical listing.
    Enumerate {
        #[arg(long, default_value = "dense")]
        space: String,
        /// Print only the count.
        #[arg(long)]
        count_only: bool,
    },
    /// Score one architecture.
    Score {
        #[arg(long, default_value = "dense")]
        space: String,
        /// Canonical rank or `2:op(input) 3:op(input) ...`.
        #[arg(long)]
        arch: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = Method::Approx)]
        method: Method,
        #[arg(long, default_value_t = 64)]
        batch_size: usize,
        #[arg(long, default_value = "mse")]
        loss: LossKind,
        #[arg(long, env = SEED_ENV, default_value_t = 0)]
        seed: u64,
    },
    /// Run the penalized one-step search.
    Search {
        #[arg(long, default_value = "dense")]
        space: String,
        #[arg(long, required_unless_present = "replay")]
        data: Option<PathBuf>,
        /// TOML search configuration; flags below override it.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Re-run the configuration echoed in an earlier run record.
        #[arg(long, conflicts_with_all = ["config", "data"])]
        replay: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, env = SEED_ENV)]
        seed: Option<u64>,
        #[arg(long)]
        mu: Option<f64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long, value_enum)]
        nu: Option<NuKind>,
        /// Initial constraint value; estimated from random architectures if omitted.
        #[arg(long)]
        nu0: Option<f64>,
    },
    /// Score every architecture into a benchmark cache.
    Rank {
        #[arg(long, default_value = "dense")]
        space: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "exact,approx")]
        scorers: Vec<Scorer>,
        #[arg(long, default_value_t = 64)]
        batch_size: usize,
        #[arg(long, default_value = "mse")]
        loss: LossKind,
        #[arg(long, env = SEED_ENV, default_value_t = 0)]
        seed: u64,
        /// Score on the leading rows only.
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train every architecture and record test errors in a benchmark cache.
    TrainAll {
        #[arg(long, default_value = "dense")]
        space: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 50)]
        epochs: usize,
        #[arg(long, default_value_t = 50.0)]
        lr: f64,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        #[arg(long, value_enum, default_value_t = Schedule::Cosine)]
        schedule: Schedule,
        #[arg(long, env = SEED_ENV, default_value_t = 0)]
        seed: u64,
        /// Leading rows used for training; the rest is the test set.
        #[arg(long)]
        train_size: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Correlate two score vectors (`cache.jsonl:column` or a JSON array file).
    Correlate {
        #[arg(long)]
        a: String,
        #[arg(long)]
        b: String,
    },
    /// Run a named property suite.
    Verify {
        #[arg(long, value_enum)]
        suite: Vec<SuiteArg>,
        #[arg(long, env = SEED_ENV, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Blobs,
    Spirals,
    GaussianNoise,
    ImagePatches,
}

impl From<Kind> for GeneratorKind {
    fn from(k: Kind) -> Self {
        match k {
            Kind::Blobs => GeneratorKind::Blobs,
            Kind::Spirals => GeneratorKind::Spirals,
            Kind::GaussianNoise => GeneratorKind::GaussianNoise,
            Kind::ImagePatches => GeneratorKind::ImagePatches,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Method {
    Exact,
    Approx,
}

#[derive(Clone, Copy, ValueEnum)]
enum Schedule {
    Constant,
    Cosine,
}

#[derive(Clone, Copy, ValueEnum)]
enum NuKind {
    Fixed,
    Adaptive,
}

#[derive(Clone, Copy, ValueEnum)]
enum SuiteArg {
    Ntk,
    Chain,
    Dynamics,
    Agnostic,
    Prop2,
    All,
}

/// Failure classes mapped onto exit codes.
enum Failure {
    Property(String),
    Input(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::NonFinite { .. } | Error::Divergence { .. } | Error::Degenerate(_) | Error::Infeasible { .. } => {
                Failure::Property(e.to_string())
            }
            other => Failure::Input(other),
        }
    }
}

type CliResult<T = ()> = std::result::Result<T, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = configure_threads(cli.threads) {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Property(msg)) => {
            eprintln!("FAILED: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Input(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

#[cfg(feature = "parallel")]
fn configure_threads(threads: Option<usize>) -> Result<(), String> {
    match threads {
        Some(0) => Err("--threads must be >= 1".into()),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| e.to_string()),
        None => Ok(()),
    }
}

#[cfg(not(feature = "parallel"))]
fn configure_threads(threads: Option<usize>) -> Result<(), String> {
    match threads {
        Some(0) => Err("--threads must be >= 1".into()),
        _ => Ok(()),
    }
}

fn run(command: Command) -> CliResult {
    match command {
        Command::GenData {
            kind,
            out,
            seed,
            samples,
            input,
            classes,
            noise,
            no_normalize,
        } => {
            let params = GenParams {
                samples,
                input: parse_input(&input)?,
                classes,
                noise,
                normalize: !no_normalize,
            };
            let data = gen_dataset(kind.into(), &params, seed)?;
            data.write(&out)?;
            println!("{}", json(&data.meta));
        }
        Command::Enumerate { space, count_only } => {
            let space = load_space(&space)?;
            println!("{}", space.size());
            if !count_only {
                for (rank, arch) in enumerate(&space)?.iter().enumerate() {
                    println!("{rank}\t{}", arch.describe(&space));
                }
            }
        }
        Command::Score {
            space,
            arch,
            data,
            method,
            batch_size,
            loss,
            seed,
        } => {
            let space = load_space(&space)?;
            let arch = ArchId::parse(&space, &arch)?;
            let data = load_data(&data, &space)?;
            let inst = instantiate(&space, &arch, space.seed)?;
            let value = match method {
                Method::Exact => trace_norm_exact(&inst, &data.x)?,
                Method::Approx => approx_trace(&inst, &data.x, &data.y, loss, batch_size, seed)?,
            };
            let record = serde_json::json!({
                "arch": arch.describe(&space),
                "rank": arch.rank(&space) as u64,
                "method": if method == Method::Exact { "exact" } else { "approx" },
                "loss": loss,
                "batch_size": (method == Method::Approx).then_some(batch_size),
                "seed": seed,
                "samples": data.samples(),
                "trace": value,
            });
            println!("{record}");
        }
        Command::Search {
            space,
            data,
            config,
            replay,
            out,
            seed,
            mu,
            steps,
            batch_size,
            nu,
            nu0,
        } => {
            let echo = match replay {
                Some(path) => replayed_config(&path)?,
                None => {
                    let space = load_space(&space)?;
                    let dir = data.expect("clap requires --data");
                    let bundle = load_data(&dir, &space)?;
                    let overrides = SearchOverrides {
                        seed,
                        mu,
                        steps,
                        batch_size,
                        nu,
                        nu0,
                    };
                    let search = resolve_search_config(&space, &bundle, config.as_deref(), &overrides)?;
                    SearchEcho {
                        space,
                        data_dir: dir.display().to_string(),
                        data: bundle.meta.clone(),
                        search,
                    }
                }
            };
            run_search(echo, &out)?;
        }
        Command::Rank {
            space,
            data,
            scorers,
            batch_size,
            loss,
            seed,
            samples,
            out,
        } => {
            let space = load_space(&space)?;
            let bundle = load_data(&data, &space)?;
            let n = samples.unwrap_or(bundle.samples());
            let (scored, _) = if n < bundle.samples() {
                bundle.split(n)?
            } else {
                (bundle.clone(), bundle.clone())
            };
            let opts = ScoreOptions {
                loss,
                batch_size,
                batch_seed: seed,
            };
            let mut cache = BenchmarkCache::open(&out, &space, &bundle.meta)?;
            let fresh = rank_space(&space, &scored.x, &scored.y, &scorers, &opts)?;
            cache.merge_scores(&fresh, n, &opts)?;
            cache.write(&out)?;
            println!("{}", serde_json::json!({"architectures": cache.ranked.len(), "out": out.display().to_string()}));
        }
        Command::TrainAll {
            space,
            data,
            epochs,
            lr,
            batch_size,
            schedule,
            seed,
            train_size,
            out,
        } => {
            let schedule = match schedule {
                Schedule::Constant => LrSchedule::Constant,
                Schedule::Cosine => LrSchedule::Cosine,
            };
            let space = load_space(&space)?;
            let bundle = load_data(&data, &space)?;
            let n = train_size.unwrap_or(bundle.samples() * 2 / 3);
            let (train, test) = bundle.split(n)?;
            let setup = TrainingSetup {
                config: TrainConfig {
                    epochs,
                    lr,
                    batch_size,
                    seed,
                    schedule,
                },
                train_samples: n,
            };
            let mut cache = BenchmarkCache::open(&out, &space, &bundle.meta)?;
            let pending = cache.pending_training(&setup)?;
            let archs = pending
                .iter()
                .map(|&r| ArchId::unrank(&space, r as u128))
                .collect::<tracenas::Result<Vec<_>>>()?;
            let results = train_all(&space, &archs, (&train.x, &train.y), (&test.x, &test.y), &setup.config)?;
            cache.ranked.attach_training(&results)?;
            cache.header.training = Some(setup);
            cache.write(&out)?;
            let diverged = cache.ranked.entries.iter().filter(|e| e.diverged == Some(true)).count();
            println!(
                "{}",
                serde_json::json!({"trained": results.len(), "reused": cache.ranked.len() - results.len(), "diverged": diverged, "out": out.display().to_string()})
            );
        }
        Command::Correlate { a, b } => {
            let (va, vb) = (load_scores(&a)?, load_scores(&b)?);
            let report = correlation_labeled(&va, &vb, &a, &b)?;
            println!("{}", json(&report));
        }
        Command::Verify { suite, seed } => {
            let suites: Vec<Suite> = if suite.is_empty() || suite.iter().any(|s| matches!(s, SuiteArg::All)) {
                Suite::ALL.to_vec()
            } else {
                suite.iter().map(|s| to_suite(*s)).collect()
            };
            let mut first_failure = None;
            for s in suites {
                let report = run_suite(s, seed)?;
                for c in &report.checks {
                    println!("{} {}: {} ({})", if c.passed { "PASS" } else { "FAIL" }, s.name(), c.name, c.detail);
                }
                if first_failure.is_none() {
                    first_failure = report.first_failure().map(|c| format!("{}: {} ({})", s.name(), c.name, c.detail));
                }
            }
            if let Some(msg) = first_failure {
                return Err(Failure::Property(msg));
            }
        }
    }
    Ok(())
}

fn to_suite(s: SuiteArg) -> Suite {
    match s {
        SuiteArg::Ntk => Suite::Ntk,
        SuiteArg::Chain => Suite::Chain,
        SuiteArg::Dynamics => Suite::Dynamics,
        SuiteArg::Agnostic => Suite::Agnostic,
        SuiteArg::Prop2 | SuiteArg::All => Suite::Prop2,
    }
}

fn json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("value serializes")
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Input(Error::Usage(msg.into()))
}

fn parse_input(text: &str) -> CliResult<InputShape> {
    let dims = text
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|_| usage(format!("--input must be n0 or h,w,c, got '{text}'")))?;
    InputShape::try_from(dims).map_err(usage)
}

/// `dense` and `conv` name the built-in spaces; anything else is a TOML file.
fn load_space(arg: &str) -> CliResult<CellSpace> {
    Ok(match arg {
        "dense" => CellSpace::default_dense(),
        "conv" => CellSpace::default_conv(),
        path => CellSpace::load(Path::new(path))?,
    })
}

fn load_data(dir: &Path, space: &CellSpace) -> CliResult<DatasetBundle> {
    let data = DatasetBundle::read(dir)?;
    if data.meta.input != space.input || data.meta.classes != space.output {
        return Err(usage(format!(
            "dataset {} has input {:?} and {} classes; space expects {:?} and {}",
            dir.display(),
            data.meta.input,
            data.meta.classes,
            space.input,
            space.output
        )));
    }
    Ok(data)
}

/// Reads `cache.jsonl:column` from a benchmark cache, or a JSON array file.
fn load_scores(arg: &str) -> CliResult<Vec<f64>> {
    if let Some((path, column)) = arg.rsplit_once(':') {
        if Path::new(path).is_file() {
            let cache = BenchmarkCache::read(Path::new(path))?;
            return Ok(cache.ranked.column(column)?);
        }
    }
    let text = std::fs::read_to_string(arg).map_err(|e| Failure::Input(Error::Io {
        path: arg.into(),
        source: e,
    }))?;
    serde_json::from_str(&text).map_err(|e| {
        Failure::Input(Error::Parse {
            what: arg.to_string(),
            detail: e.to_string(),
        })
    })
}

struct SearchOverrides {
    seed: Option<u64>,
    mu: Option<f64>,
    steps: Option<usize>,
    batch_size: Option<usize>,
    nu: Option<NuKind>,
    nu0: Option<f64>,
}

/// Config file (if any), then flag overrides; a missing `nu0` is estimated
/// from random architectures so the echoed config is always explicit.
fn resolve_search_config(
    space: &CellSpace,
    data: &DatasetBundle,
    file: Option<&Path>,
    o: &SearchOverrides,
) -> CliResult<PenaltyConfig> {
    let mut cfg = match file {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Failure::Input(Error::Io {
                path: path.into(),
                source: e,
            }))?;
            PenaltyConfig::from_toml(&text)?
        }
        None => {
            let mut c = PenaltyConfig::new(NuPolicy::Adaptive(f64::NAN));
            c.mu = tracenas::search::Complexity::for_space(space).default_mu();
            c
        }
    };
    if let Some(v) = o.seed {
        cfg.seed = v;
    }
    if let Some(v) = o.mu {
        cfg.mu = v;
    }
    if let Some(v) = o.steps {
        cfg.steps = v;
    }
    if let Some(v) = o.batch_size {
        cfg.batch_size = v;
    }
    let mut nu0 = o.nu0.unwrap_or(cfg.nu_policy.initial());
    if file.is_none() && o.nu0.is_none() {
        let y = search_labels(Some(&data.y), data.samples(), space.output, cfg.seed)?;
        nu0 = nu_fixed(space, &data.x, &y, cfg.loss, cfg.batch_size, cfg.seed, NU_SAMPLES)?;
    }
    cfg.nu_policy = match o.nu {
        Some(NuKind::Fixed) => NuPolicy::Fixed(nu0),
        Some(NuKind::Adaptive) => NuPolicy::Adaptive(nu0),
        None => match cfg.nu_policy {
            NuPolicy::Fixed(_) => NuPolicy::Fixed(nu0),
            NuPolicy::Adaptive(_) => NuPolicy::Adaptive(nu0),
        },
    };
    cfg.validate()?;
    Ok(cfg)
}

fn replayed_config(path: &Path) -> CliResult<SearchEcho> {
    let records: Vec<RunRecord> = read_json_lines(path)?;
    match records.into_iter().next() {
        Some(RunRecord::Config { schema, config, .. }) if schema == RUN_SCHEMA => Ok(config),
        _ => Err(usage(format!("{} does not start with a config record", path.display()))),
    }
}

const RUN_FILE: &str = "run.jsonl";
const SELECTED_FILE: &str = "selected.json";

fn run_search(echo: SearchEcho, out: &Path) -> CliResult {
    let started = Instant::now();
    let data = load_data(Path::new(&echo.data_dir), &echo.space)?;
    if data.meta != echo.data {
        return Err(usage(format!("dataset at {} no longer matches the recorded one", echo.data_dir)));
    }
    let cfg = &echo.search;
    let y = search_labels(Some(&data.y), data.samples(), echo.space.output, cfg.seed)?;
    let outcome = nasi_search(&echo.space, &data.x, &y, cfg)?;
    let selection = Selection {
        describe: outcome.selected.describe(&echo.space),
        rank: outcome.selected.rank(&echo.space) as u64,
        arch: outcome.selected.clone(),
    };
    let mut records = vec![RunRecord::Config {
        schema: RUN_SCHEMA,
        command: "search".into(),
        seed: cfg.seed,
        config: echo.clone(),
    }];
    records.extend(outcome.log.iter().cloned().map(RunRecord::Step));
    records.push(RunRecord::Final {
        selection: selection.clone(),
        alpha_star: outcome.alpha_star.flatten(),
        delta_norm: outcome.delta.iter().map(|v| v * v).sum::<f64>().sqrt(),
        wall_clock_s: started.elapsed().as_secs_f64(),
    });
    std::fs::create_dir_all(out).map_err(|e| Failure::Input(Error::Io {
        path: out.into(),
        source: e,
    }))?;
    atomic_write(&out.join(RUN_FILE), to_json_lines(&records).as_bytes())?;
    let mut sel = serde_json::to_string_pretty(&selection).expect("selection serializes");
    sel.push('\n');
    atomic_write(&out.join(SELECTED_FILE), sel.as_bytes())?;
    println!("{}", json(&selection));
    Ok(())
}
