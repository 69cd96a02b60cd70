//! Cell-DAG search spaces, architectures, the architecture distribution and
//! weight instantiation.

mod alpha;
mod arch;
mod cell;
mod net;

pub use alpha::{argmax, draw_gumbel, sample_architecture, softmax, softmax_pullback, AlphaParams, GumbelNoise, StSample};
pub use arch::{enumerate, enumerate_capped, ArchId, NodeChoice};
pub use cell::{CellOp, CellSpace, InputShape, MergeRule, ENUMERATION_CAP};
pub use net::{derive_seed, instantiate, param_count, ArchInstance, Block, Forward, Gates, ParamKey, Supernet};
