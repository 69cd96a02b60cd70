use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::objective::{grad_alpha_r, penalized};
use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::loss::{one_hot, LossKind};
use crate::ntk::{batch_grad_norm, shuffled_indices};
use crate::space::{derive_seed, draw_gumbel, sample_architecture, AlphaParams, ArchId, CellSpace, Supernet};

/// Number of random architectures averaged for a fixed complexity cap.
pub const NU_SAMPLES: usize = 50;

/// How the complexity cap `nu` is set per step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "nu0")]
pub enum NuPolicy {
    /// `nu_t = nu0` throughout.
    Fixed(f64),
    /// Running mean of `nu0` and the traces seen so far.
    Adaptive(f64),
}

impl NuPolicy {
    pub fn initial(&self) -> f64 {
        match *self {
            NuPolicy::Fixed(v) | NuPolicy::Adaptive(v) => v,
        }
    }
}

/// Normalization of the accumulated logit gradients.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalizer {
    /// Each `G_t` divided by the running max of `||G_s||`, `s <= t`.
    #[default]
    RunningMax,
    /// Direction of the empirical mean gradient.
    Mean,
}

/// Complexity class of a search space, selecting the default penalty.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Complexity {
    Small,
    Large,
}

/// Spaces up to this many architectures count as small.
pub const SMALL_SPACE: u128 = 1000;

impl Complexity {
    pub fn for_space(space: &CellSpace) -> Self {
        if space.size() <= SMALL_SPACE {
            Complexity::Small
        } else {
            Complexity::Large
        }
    }

    pub fn default_mu(&self) -> f64 {
        match self {
            Complexity::Small => 1.0,
            Complexity::Large => 2.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PenaltyConfig {
    pub mu: f64,
    pub nu_policy: NuPolicy,
    pub tau: f64,
    pub xi: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub loss: LossKind,
    pub seed: u64,
    #[serde(default)]
    pub normalizer: Normalizer,
}

impl PenaltyConfig {
    pub fn new(nu_policy: NuPolicy) -> Self {
        PenaltyConfig {
            mu: Complexity::Large.default_mu(),
            nu_policy,
            tau: 1.0,
            xi: 1.0,
            steps: 100,
            batch_size: 64,
            loss: LossKind::Mse,
            seed: 0,
            normalizer: Normalizer::RunningMax,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: PenaltyConfig = toml::from_str(text).map_err(|e| Error::Parse {
            what: "search config".into(),
            detail: e.to_string(),
        })?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if !(self.mu >= 0.0) {
            return bad(format!("mu must be >= 0, got {}", self.mu));
        }
        if !(self.nu_policy.initial() > 0.0) {
            return bad(format!("nu0 must be > 0, got {}", self.nu_policy.initial()));
        }
        if !(self.tau > 0.0) || !(self.xi > 0.0) {
            return bad(format!("tau and xi must be > 0, got {} and {}", self.tau, self.xi));
        }
        if self.steps == 0 || self.batch_size == 0 {
            return bad("steps and batch size must be >= 1".into());
        }
        Ok(())
    }
}

/// Everything the search accumulates; logits are never updated during the
/// gradient collection phase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchState {
    pub alpha0: AlphaParams,
    pub gradients: Vec<Vec<f64>>,
    /// `max_{s <= t} ||G_s||` after each step.
    pub running_max: Vec<f64>,
    pub nu0: f64,
    pub nu: f64,
    pub traces: Vec<f64>,
    pub step: usize,
}

impl SearchState {
    pub fn new(space: &CellSpace, nu0: f64) -> Self {
        SearchState {
            alpha0: AlphaParams::zeros(space),
            gradients: Vec::new(),
            running_max: Vec::new(),
            nu0,
            nu: nu0,
            traces: Vec::new(),
            step: 0,
        }
    }

    /// `nu_t = t^-1 (nu0 + sum_{s<t} trace_s)` for the current step `t`,
    /// then appends `new_trace` to the history.
    pub fn nu_adaptive_step(&mut self, new_trace: f64) -> f64 {
        let t = self.traces.len() + 1;
        self.nu = (self.nu0 + self.traces.iter().sum::<f64>()) / t as f64;
        self.traces.push(new_trace);
        self.nu
    }

    pub fn push_gradient(&mut self, g: Vec<f64>) {
        let norm = l2(&g);
        let prev = self.running_max.last().copied().unwrap_or(0.0);
        self.running_max.push(prev.max(norm));
        self.gradients.push(g);
        self.step += 1;
    }
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `(xi / T) sum_t G_t / max_{s <= t} ||G_s||`. Terms whose running max is
/// still zero contribute nothing.
pub fn delta_star(gradients: &[Vec<f64>], xi: f64) -> Result<Vec<f64>> {
    let first = gradients.first().ok_or_else(|| Error::Degenerate("no gradients".into()))?;
    let mut out = vec![0.0; first.len()];
    let mut running = 0.0f64;
    for g in gradients {
        running = running.max(l2(g));
        if running > 0.0 {
            for (o, v) in out.iter_mut().zip(g) {
                *o += v / running;
            }
        }
    }
    if running == 0.0 {
        return Err(Error::Degenerate("all logit gradients are zero".into()));
    }
    let scale = xi / gradients.len() as f64;
    Ok(out.into_iter().map(|v| v * scale).collect())
}

/// `xi * mean(G) / ||mean(G)||`.
pub fn delta_star_mean(gradients: &[Vec<f64>], xi: f64) -> Result<Vec<f64>> {
    let first = gradients.first().ok_or_else(|| Error::Degenerate("no gradients".into()))?;
    let mut mean = vec![0.0; first.len()];
    for g in gradients {
        for (m, v) in mean.iter_mut().zip(g) {
            *m += v;
        }
    }
    let norm = l2(&mean);
    if norm == 0.0 {
        return Err(Error::Degenerate("mean logit gradient is zero".into()));
    }
    Ok(mean.into_iter().map(|v| xi * v / norm).collect())
}

/// Labels for scoring and search: the dataset's own labels when present,
/// otherwise uniformly random one-hot labels.
pub fn search_labels(labels: Option<&Tensor>, m: usize, n: usize, seed: u64) -> Result<Tensor> {
    match labels {
        Some(y) => Ok(y.clone()),
        None => {
            use rand::Rng;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x1abe1]));
            let classes: Vec<usize> = (0..m).map(|_| rng.random_range(0..n)).collect();
            one_hot(&classes, n)
        }
    }
}

/// Mean minibatch trace estimate over `samples` uniformly random
/// architectures, each on its own random batch.
pub fn nu_fixed(space: &CellSpace, x: &Tensor, y: &Tensor, loss: LossKind, batch_size: usize, seed: u64, samples: usize) -> Result<f64> {
    if samples == 0 {
        return Err(Error::InvalidArgument("need at least one architecture".into()));
    }
    let m = x.rows();
    if batch_size == 0 || batch_size > m {
        return Err(Error::InvalidArgument(format!("batch size {batch_size} invalid for {m} samples")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x4e55]));
    let archs: Vec<ArchId> = (0..samples).map(|_| ArchId::random(space, &mut rng)).collect();
    let traces = crate::par::try_map_range(samples, |i| {
        let inst = crate::space::instantiate(space, &archs[i], space.seed)?;
        let idx = &shuffled_indices(m, derive_seed(seed, &[0x4e56, i as u64]))[..batch_size];
        batch_grad_norm(&inst, &x.select_rows(idx), &y.select_rows(idx), loss)
    })?;
    Ok(traces.iter().sum::<f64>() / samples as f64)
}

/// One row of the search log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub arch: String,
    pub rank: u64,
    pub trace: f64,
    pub objective: f64,
    pub nu: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchOutcome {
    pub selected: ArchId,
    pub alpha_star: AlphaParams,
    pub delta: Vec<f64>,
    pub state: SearchState,
    pub log: Vec<StepRecord>,
}

/// Collects straight-through logit gradients at `alpha0 = 0` over
/// `config.steps` fresh (batch, Gumbel) draws, takes the one-step update
/// `alpha* = alpha0 + delta*` and returns the per-node argmax of `alpha*`.
pub fn nasi_search(space: &CellSpace, x: &Tensor, y: &Tensor, config: &PenaltyConfig) -> Result<SearchOutcome> {
    config.validate()?;
    let m = x.rows();
    if m < config.batch_size {
        return Err(Error::InvalidArgument(format!(
            "dataset has {m} samples, fewer than batch size {}",
            config.batch_size
        )));
    }
    let net = Supernet::new(space, space.seed)?;
    let mut state = SearchState::new(space, config.nu_policy.initial());
    let mut log = Vec::with_capacity(config.steps);
    for t in 0..config.steps {
        let idx = &shuffled_indices(m, derive_seed(config.seed, &[1, t as u64]))[..config.batch_size];
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[2, t as u64]));
        let noise = draw_gumbel(&state.alpha0, &mut rng);
        let sample = sample_architecture(&state.alpha0, &noise, config.tau);
        let (xb, yb) = (x.select_rows(idx), y.select_rows(idx));
        // The trace and its gate derivatives do not depend on nu; the slope
        // is applied once nu_t is known.
        let (trace, raw) = grad_alpha_r(&net, &sample, &xb, &yb, config.loss, 0.0, f64::INFINITY)?;
        let nu = match config.nu_policy {
            NuPolicy::Fixed(v) => {
                state.traces.push(trace);
                state.nu = v;
                v
            }
            NuPolicy::Adaptive(_) => state.nu_adaptive_step(trace),
        };
        let slope = super::objective::penalized_slope(trace, config.mu, nu);
        let g: Vec<f64> = raw.flatten().into_iter().map(|v| v * slope).collect();
        let grad_norm = l2(&g);
        log.push(StepRecord {
            step: t + 1,
            arch: sample.arch.describe(space),
            rank: sample.arch.rank(space) as u64,
            trace,
            objective: penalized(trace, config.mu, nu),
            nu,
            grad_norm,
        });
        state.push_gradient(g);
    }
    let delta = match config.normalizer {
        Normalizer::RunningMax => delta_star(&state.gradients, config.xi)?,
        Normalizer::Mean => delta_star_mean(&state.gradients, config.xi)?,
    };
    let norm = l2(&delta);
    if norm > config.xi * (1.0 + 1e-12) {
        return Err(Error::Degenerate(format!("update norm {norm} exceeds radius {}", config.xi)));
    }
    let alpha0 = state.alpha0.flatten();
    let alpha_star = state
        .alpha0
        .with_flat(&alpha0.iter().zip(&delta).map(|(a, d)| a + d).collect::<Vec<_>>());
    Ok(SearchOutcome {
        selected: alpha_star.argmax(),
        alpha_star,
        delta,
        state,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_toml_round_trip() {
        let mut c = PenaltyConfig::new(NuPolicy::Adaptive(0.25));
        c.normalizer = Normalizer::Mean;
        assert_eq!(PenaltyConfig::from_toml(&c.to_toml()).unwrap(), c);
        let text = "mu = 1.0\ntau = 1.0\nxi = 1.0\nsteps = 10\nbatch_size = 8\nloss = \"mse\"\nseed = 3\nnu_policy = { kind = \"fixed\", nu0 = 2.0 }\n";
        assert_eq!(PenaltyConfig::from_toml(text).unwrap().nu_policy, NuPolicy::Fixed(2.0));
        assert!(PenaltyConfig::from_toml(&format!("{text}bogus = 1\n")).is_err());
        assert!(PenaltyConfig::from_toml(&text.replace("mu = 1.0", "mu = -1.0")).is_err());
    }

    #[test]
    fn delta_star_hand_example() {
        let d = delta_star(&[vec![1.0, 0.0], vec![0.0, 2.0]], 1.0).unwrap();
        assert_eq!(d, vec![0.5, 0.5]);
    }

    #[test]
    fn delta_star_single_and_repeated_terms() {
        let g = vec![3.0, -4.0];
        let one = delta_star(std::slice::from_ref(&g), 2.0).unwrap();
        assert!((l2(&one) - 2.0).abs() < 1e-15);
        let many = delta_star(&vec![g.clone(); 7], 2.0).unwrap();
        for (a, b) in one.iter().zip(&many) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_gradients_are_degenerate() {
        assert!(matches!(delta_star(&vec![vec![0.0; 3]; 4], 1.0), Err(Error::Degenerate(_))));
        assert!(delta_star(&[], 1.0).is_err());
        assert!(delta_star_mean(&[vec![1.0], vec![-1.0]], 1.0).is_err());
    }

    #[test]
    fn adaptive_nu_scripted_history() {
        let mut s = SearchState::new(&CellSpace::default_dense(), 10.0);
        let got: Vec<f64> = [4.0, 6.0, 8.0, 1.0].iter().map(|&t| s.nu_adaptive_step(t)).collect();
        assert_eq!(got, vec![10.0, 7.0, 20.0 / 3.0, 7.0]);
    }

    #[test]
    fn adaptive_nu_tends_to_constant_history() {
        let mut s = SearchState::new(&CellSpace::default_dense(), 500.0);
        let mut nu = 0.0;
        for _ in 0..100_000 {
            nu = s.nu_adaptive_step(3.0);
        }
        assert!((nu - 3.0).abs() < 0.01);
    }

    #[test]
    fn running_max_is_monotone() {
        let mut s = SearchState::new(&CellSpace::default_dense(), 1.0);
        for g in [vec![1.0, 0.0], vec![0.1, 0.0], vec![0.0, 3.0], vec![1.0, 1.0]] {
            s.push_gradient(g);
        }
        assert_eq!(s.running_max, vec![1.0, 1.0, 3.0, 3.0]);
    }

    #[test]
    fn config_validation() {
        let mut c = PenaltyConfig::new(NuPolicy::Fixed(1.0));
        assert!(c.validate().is_ok());
        c.mu = -1.0;
        assert!(c.validate().is_err());
        let c = PenaltyConfig::new(NuPolicy::Adaptive(0.0));
        assert!(c.validate().is_err());
    }
}
