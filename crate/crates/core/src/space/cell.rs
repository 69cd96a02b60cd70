use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Candidate operation for an intermediate cell node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CellOp {
    Identity,
    Zero,
    DenseRelu,
    DenseTanh,
    Conv3x3Relu,
    Conv1x1Relu,
    MeanPool3x3,
    MaxPool3x3,
}

impl CellOp {
    pub fn name(&self) -> &'static str {
        match self {
            CellOp::Identity => "identity",
            CellOp::Zero => "zero",
            CellOp::DenseRelu => "dense-relu",
            CellOp::DenseTanh => "dense-tanh",
            CellOp::Conv3x3Relu => "conv3x3-relu",
            CellOp::Conv1x1Relu => "conv1x1-relu",
            CellOp::MeanPool3x3 => "mean-pool3x3",
            CellOp::MaxPool3x3 => "max-pool3x3",
        }
    }

    /// Weight count of one instance of the op at channel width `k`.
    pub fn param_count(&self, k: usize) -> usize {
        match self {
            CellOp::DenseRelu | CellOp::DenseTanh | CellOp::Conv1x1Relu => k * k,
            CellOp::Conv3x3Relu => 9 * k * k,
            _ => 0,
        }
    }

    /// Shape of the weight tensor, if any.
    pub fn weight_shape(&self, k: usize) -> Option<Vec<usize>> {
        match self {
            CellOp::DenseRelu | CellOp::DenseTanh => Some(vec![k, k]),
            CellOp::Conv3x3Relu => Some(vec![k, k, 3, 3]),
            CellOp::Conv1x1Relu => Some(vec![k, k, 1, 1]),
            _ => None,
        }
    }

    fn needs_image(&self) -> Option<bool> {
        match self {
            CellOp::DenseRelu | CellOp::DenseTanh => Some(false),
            CellOp::Conv3x3Relu | CellOp::Conv1x1Relu | CellOp::MeanPool3x3 | CellOp::MaxPool3x3 => {
                Some(true)
            }
            CellOp::Identity | CellOp::Zero => None,
        }
    }
}

impl fmt::Display for CellOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MergeRule {
    /// Cell output is the sum of the intermediate nodes; width stays `k`.
    #[default]
    Sum,
    /// Cell output concatenates the intermediate nodes along channels.
    Concat,
}

/// Per-sample input shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub enum InputShape {
    Vector(usize),
    /// Stored planar (channel-major) in tensors.
    Image { h: usize, w: usize, c: usize },
}

impl InputShape {
    pub fn features(&self) -> usize {
        match *self {
            InputShape::Vector(n) => n,
            InputShape::Image { h, w, c } => h * w * c,
        }
    }

    /// Tensor shape for a batch of `m` samples.
    pub fn batch_shape(&self, m: usize) -> Vec<usize> {
        match *self {
            InputShape::Vector(n) => vec![m, n],
            InputShape::Image { h, w, c } => vec![m, c, h, w],
        }
    }

    pub fn is_image(&self) -> bool {
        matches!(self, InputShape::Image { .. })
    }
}

impl TryFrom<Vec<usize>> for InputShape {
    type Error = String;
    fn try_from(v: Vec<usize>) -> std::result::Result<Self, String> {
        match v.as_slice() {
            [n] if *n > 0 => Ok(InputShape::Vector(*n)),
            [h, w, c] if *h > 0 && *w > 0 && *c > 0 => Ok(InputShape::Image { h: *h, w: *w, c: *c }),
            _ => Err(format!("input must be [n0] or [h, w, c] with positive extents, got {v:?}")),
        }
    }
}

impl From<InputShape> for Vec<usize> {
    fn from(s: InputShape) -> Self {
        match s {
            InputShape::Vector(n) => vec![n],
            InputShape::Image { h, w, c } => vec![h, w, c],
        }
    }
}

/// A micro cell-DAG search space.
///
/// Nodes 0 and 1 are the cell inputs, nodes `2..nodes` are intermediate and
/// each picks one operation from `catalog` applied to one predecessor. The
/// cell output merges all intermediate nodes. `cells` copies of the cell
/// (same topology, separate weights) are stacked between a linear stem and
/// a linear head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellSpace {
    pub nodes: usize,
    pub catalog: Vec<CellOp>,
    #[serde(default)]
    pub merge: MergeRule,
    pub input: InputShape,
    pub output: usize,
    pub width: usize,
    #[serde(default = "one")]
    pub cells: usize,
    #[serde(default)]
    pub seed: u64,
}

fn one() -> usize {
    1
}

/// Default cap on exhaustive enumeration.
pub const ENUMERATION_CAP: u128 = 100_000;

impl CellSpace {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.nodes < 3 {
            return bad(format!("nodes must be >= 3, got {}", self.nodes));
        }
        if self.catalog.is_empty() {
            return bad("catalog must not be empty".into());
        }
        if self.width == 0 || self.output == 0 || self.cells == 0 {
            return bad("width, output and cells must be positive".into());
        }
        let image = self.input.is_image();
        for op in &self.catalog {
            if let Some(need) = op.needs_image() {
                if need != image {
                    return bad(format!(
                        "op {op} requires {} input",
                        if need { "image" } else { "vector" }
                    ));
                }
            }
        }
        let mut seen = self.catalog.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.catalog.len() {
            return bad("catalog contains duplicates".into());
        }
        Ok(())
    }

    pub fn intermediate(&self) -> std::ops::Range<usize> {
        2..self.nodes
    }

    pub fn num_intermediate(&self) -> usize {
        self.nodes - 2
    }

    /// `prod_{i=2}^{N-1} |catalog| * i`.
    pub fn size(&self) -> u128 {
        self.intermediate()
            .map(|i| (self.catalog.len() * i) as u128)
            .product()
    }

    /// Channel width of a cell's output.
    pub fn cell_output_width(&self) -> usize {
        match self.merge {
            MergeRule::Sum => self.width,
            MergeRule::Concat => self.width * self.num_intermediate(),
        }
    }

    /// Small vector space with the dense catalog.
    pub fn default_dense() -> Self {
        CellSpace {
            nodes: 4,
            catalog: vec![CellOp::Identity, CellOp::Zero, CellOp::DenseRelu, CellOp::DenseTanh],
            merge: MergeRule::Sum,
            input: InputShape::Vector(16),
            output: 4,
            width: 32,
            cells: 1,
            seed: 0,
        }
    }

    /// Small image space with the conv catalog (96 architectures).
    pub fn default_conv() -> Self {
        CellSpace {
            nodes: 4,
            catalog: vec![CellOp::Identity, CellOp::Zero, CellOp::Conv3x3Relu, CellOp::Conv1x1Relu],
            merge: MergeRule::Sum,
            input: InputShape::Image { h: 6, w: 6, c: 3 },
            output: 4,
            width: 8,
            cells: 1,
            seed: 0,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let s: CellSpace = toml::from_str(text).map_err(|e| Error::Parse {
            what: "space definition".into(),
            detail: e.to_string(),
        })?;
        s.validate()?;
        Ok(s)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("space serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn enumeration_sizes() {
        let mut s = CellSpace::default_dense();
        for (nodes, want) in [(3, 8u128), (4, 96), (5, 1536)] {
            s.nodes = nodes;
            assert_eq!(s.size(), want);
        }
    }

    #[test]
    fn toml_round_trip_and_unknown_keys() {
        let s = CellSpace::default_conv();
        let text = s.to_toml();
        assert_eq!(CellSpace::from_toml(&text).unwrap(), s);
        let bad = format!("{text}\nbogus = 1\n");
        assert!(CellSpace::from_toml(&bad).is_err());
    }

    #[test]
    fn parses_documented_keys() {
        let s = CellSpace::from_toml(
            r#"
nodes = 5
catalog = ["identity", "zero", "dense-relu", "dense-tanh"]
merge = "concat"
input = [8]
output = 2
width = 16
cells = 2
seed = 7
"#,
        )
        .unwrap();
        assert_eq!(s.size(), 1536);
        assert_eq!(s.cell_output_width(), 48);
    }

    #[test]
    fn rejects_mismatched_catalog() {
        let mut s = CellSpace::default_dense();
        s.catalog.push(CellOp::Conv3x3Relu);
        assert!(s.validate().is_err());
        s.catalog = vec![];
        assert!(s.validate().is_err());
    }
}
