use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::cell::{CellSpace, ENUMERATION_CAP};
use crate::error::{Error, Result};

/// Choice made at one intermediate node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NodeChoice {
    /// Index into the space's catalog.
    pub op: usize,
    /// Predecessor node feeding this node (`< node index`).
    pub input: usize,
}

/// A concrete architecture: one [`NodeChoice`] per intermediate node,
/// starting with node 2.
///
/// The derived ordering is the canonical enumeration order.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ArchId {
    pub nodes: Vec<NodeChoice>,
}

impl ArchId {
    pub fn validate(&self, space: &CellSpace) -> Result<()> {
        if self.nodes.len() != space.num_intermediate() {
            return Err(Error::InvalidArgument(format!(
                "architecture has {} node choices, space needs {}",
                self.nodes.len(),
                space.num_intermediate()
            )));
        }
        for (k, c) in self.nodes.iter().enumerate() {
            let node = k + 2;
            if c.op >= space.catalog.len() || c.input >= node {
                return Err(Error::InvalidArgument(format!(
                    "node {node}: op {} / input {} out of range",
                    c.op, c.input
                )));
            }
        }
        Ok(())
    }

    /// Position in the canonical enumeration (node 2 most significant,
    /// op before input).
    pub fn rank(&self, space: &CellSpace) -> u128 {
        let ops = space.catalog.len() as u128;
        self.nodes.iter().enumerate().fold(0u128, |acc, (k, c)| {
            let node = (k + 2) as u128;
            (acc * ops + c.op as u128) * node + c.input as u128
        })
    }

    pub fn unrank(space: &CellSpace, mut rank: u128) -> Result<Self> {
        if rank >= space.size() {
            return Err(Error::InvalidArgument(format!(
                "rank {rank} outside space of size {}",
                space.size()
            )));
        }
        let ops = space.catalog.len() as u128;
        let mut nodes = vec![NodeChoice { op: 0, input: 0 }; space.num_intermediate()];
        for k in (0..nodes.len()).rev() {
            let node = (k + 2) as u128;
            let input = rank % node;
            rank /= node;
            let op = rank % ops;
            rank /= ops;
            nodes[k] = NodeChoice {
                op: op as usize,
                input: input as usize,
            };
        }
        Ok(ArchId { nodes })
    }

    /// Uniform draw over the space.
    pub fn random<R: Rng + ?Sized>(space: &CellSpace, rng: &mut R) -> Self {
        let nodes = space
            .intermediate()
            .map(|i| NodeChoice {
                op: rng.random_range(0..space.catalog.len()),
                input: rng.random_range(0..i),
            })
            .collect();
        ArchId { nodes }
    }

    /// Every node uses catalog entry `op` on input `input` (clamped to a
    /// valid predecessor).
    pub fn uniform(space: &CellSpace, op: usize, input: usize) -> Self {
        let nodes = space
            .intermediate()
            .map(|i| NodeChoice {
                op,
                input: input.min(i - 1),
            })
            .collect();
        ArchId { nodes }
    }

    /// Human-readable form, e.g. `2:conv3x3-relu(0) 3:zero(2)`.
    pub fn describe(&self, space: &CellSpace) -> String {
        self.nodes
            .iter()
            .enumerate()
            .map(|(k, c)| format!("{}:{}({})", k + 2, space.catalog[c.op], c.input))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Parses the [`ArchId::describe`] form or a canonical rank.
    pub fn parse(space: &CellSpace, text: &str) -> Result<Self> {
        let text = text.trim();
        if let Ok(rank) = text.parse::<u128>() {
            return Self::unrank(space, rank);
        }
        let bad = |detail: String| Error::Parse {
            what: "architecture".into(),
            detail,
        };
        let mut nodes = Vec::new();
        for (k, part) in text.split_whitespace().enumerate() {
            let (node, rest) = part.split_once(':').ok_or_else(|| bad(format!("'{part}' is not node:op(input)")))?;
            let (op, input) = rest
                .strip_suffix(')')
                .and_then(|r| r.split_once('('))
                .ok_or_else(|| bad(format!("'{part}' is not node:op(input)")))?;
            if node.parse::<usize>().ok() != Some(k + 2) {
                return Err(bad(format!("expected node {} in '{part}'", k + 2)));
            }
            let op = space
                .catalog
                .iter()
                .position(|o| o.name() == op)
                .ok_or_else(|| bad(format!("op '{op}' is not in the catalog")))?;
            let input = input.parse().map_err(|_| bad(format!("bad input index in '{part}'")))?;
            nodes.push(NodeChoice { op, input });
        }
        let arch = ArchId { nodes };
        arch.validate(space)?;
        Ok(arch)
    }
}

impl fmt::Display for ArchId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.nodes.iter().map(|c| format!("{}/{}", c.op, c.input)).collect();
        write!(f, "[{}]", parts.join(","))
    }
}

/// Every architecture in canonical order.
pub fn enumerate(space: &CellSpace) -> Result<Vec<ArchId>> {
    enumerate_capped(space, ENUMERATION_CAP)
}

pub fn enumerate_capped(space: &CellSpace, cap: u128) -> Result<Vec<ArchId>> {
    let size = space.size();
    if size > cap {
        return Err(Error::CapExceeded { size, cap });
    }
    (0..size).map(|r| ArchId::unrank(space, r)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parse_inverts_describe_and_rank() {
        let space = CellSpace::default_conv();
        for a in enumerate(&space).unwrap() {
            assert_eq!(ArchId::parse(&space, &a.describe(&space)).unwrap(), a);
            assert_eq!(ArchId::parse(&space, &a.rank(&space).to_string()).unwrap(), a);
        }
        for bad in ["2:conv3x3-relu(2) 3:zero(0)", "2:dense-relu(0) 3:zero(0)", "3:zero(0) 2:zero(0)", "2:zero(0)", "x"] {
            assert!(ArchId::parse(&space, bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn enumeration_is_sorted_and_duplicate_free() {
        let space = CellSpace::default_dense();
        let all = enumerate(&space).unwrap();
        assert_eq!(all.len(), 96);
        assert!(all.windows(2).all(|w| w[0] < w[1]));
        for a in &all {
            a.validate(&space).unwrap();
        }
    }

    #[test]
    fn cap_is_enforced() {
        let mut space = CellSpace::default_dense();
        space.nodes = 5;
        let err = enumerate_capped(&space, 1000).unwrap_err();
        assert!(matches!(err, Error::CapExceeded { size: 1536, cap: 1000 }));
    }

    proptest! {
        #[test]
        fn rank_unrank_bijection(nodes in 3usize..6, ops in 1usize..5, seed in any::<u64>()) {
            let mut space = CellSpace::default_dense();
            space.nodes = nodes;
            space.catalog.truncate(ops);
            let r = (seed as u128) % space.size();
            let a = ArchId::unrank(&space, r).unwrap();
            prop_assert_eq!(a.rank(&space), r);
        }
    }
}
