//! Ground truth and statistics: exhaustive ranking, a small SGD trainer,
//! rank correlations, agnosticism experiments, trade-off curves and
//! baseline proxies.

mod agnostic;
mod baselines;
mod cache;
mod correlation;
mod protocol;
mod rank;
mod tradeoff;
mod train;

pub use agnostic::{agnostic_experiment, AgnosticMode};
pub use baselines::{baseline_snip, baseline_synflow, synflow_arch};
pub use cache::{BenchmarkCache, CacheHeader, TrainingSetup, CACHE_SCHEMA, RESCORE_TOLERANCE};
pub use correlation::{average_ranks, correlation, correlation_labeled, CorrelationReport};
pub use protocol::BenchmarkProtocol;
pub use rank::{rank_space, train_all, RankedEntry, RankedSpace, ScoreOptions, Scorer};
pub use tradeoff::{tradeoff_curve, Bin, TradeoffCurve, MIN_BIN};
pub use train::{error_rate, sgd_train_eval, LrSchedule, TrainConfig, TrainResult};
