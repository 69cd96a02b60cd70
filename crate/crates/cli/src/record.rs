//! Run records written by `search`: one JSON object per line, tagged by
//! `record`.

use serde::{Deserialize, Serialize};
use tracenas::data::DatasetMeta;
use tracenas::search::{PenaltyConfig, StepRecord};
use tracenas::space::{ArchId, CellSpace};

pub const RUN_SCHEMA: u32 = 1;

/// Everything needed to replay a search.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchEcho {
    pub space: CellSpace,
    pub data_dir: String,
    pub data: DatasetMeta,
    pub search: PenaltyConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "kebab-case")]
pub enum RunRecord {
    Config {
        schema: u32,
        command: String,
        seed: u64,
        config: SearchEcho,
    },
    Step(StepRecord),
    Final {
        selection: Selection,
        alpha_star: Vec<f64>,
        delta_norm: f64,
        wall_clock_s: f64,
    },
}

/// Contents of the selected-architecture file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Selection {
    pub arch: ArchId,
    pub describe: String,
    pub rank: u64,
}
