//! Set partitions for the multivariate chain rule.
//!
//! A derivative of total order `q = a1 + a2` is expanded over the set
//! partitions of `q` labeled slots, the first `a1` standing for the first
//! variable. Each block only matters through how many slots of each variable
//! it holds, so partitions are grouped by that block multiset.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Largest supported total derivative order.
pub const MAX_ORDER: usize = 4;

/// All set partitions of `{0, .., q-1}` as block lists, generated through
/// restricted growth strings.
pub fn set_partitions(q: usize) -> Vec<Vec<Vec<usize>>> {
    let mut out = Vec::new();
    if q == 0 {
        out.push(Vec::new());
        return out;
    }
    let mut rgs = vec![0usize; q];
    loop {
        let blocks = rgs.iter().max().unwrap() + 1;
        let mut parts = vec![Vec::new(); blocks];
        for (i, &b) in rgs.iter().enumerate() {
            parts[b].push(i);
        }
        out.push(parts);
        // next restricted growth string
        let mut i = q - 1;
        loop {
            if i == 0 {
                return out;
            }
            let prefix_max = rgs[..i].iter().copied().max().unwrap();
            if rgs[i] <= prefix_max {
                rgs[i] += 1;
                rgs[i + 1..].fill(0);
                break;
            }
            i -= 1;
        }
    }
}

pub fn bell(q: usize) -> usize {
    (0..=q).map(|j| stirling2(q, j)).sum()
}

/// Number of partitions of a `q`-set into `j` blocks.
pub fn stirling2(q: usize, j: usize) -> usize {
    let mut row = vec![1usize];
    for n in 1..=q {
        let mut next = vec![0usize; n + 1];
        for k in 1..=n {
            next[k] = k * row.get(k).copied().unwrap_or(0) + row[k - 1];
        }
        row = next;
    }
    row.get(j).copied().unwrap_or(0)
}

/// Partitions of one key shape sharing a block multiset.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockGroup {
    /// Number of set partitions in the group.
    pub count: f64,
    /// Per block: slots taken from the first and the second variable.
    pub blocks: Vec<(usize, usize)>,
}

#[derive(Clone, Debug)]
pub struct PartitionTable {
    max_order: usize,
    groups: BTreeMap<(usize, usize), Vec<BlockGroup>>,
}

impl PartitionTable {
    pub fn new(max_order: usize) -> Result<Self> {
        if max_order > MAX_ORDER {
            return Err(Error::OrderOverflow { requested: max_order, max: MAX_ORDER });
        }
        let mut groups = BTreeMap::new();
        for q in 1..=max_order {
            let partitions = set_partitions(q);
            for a1 in 1..=q {
                let a2 = q - a1;
                let mut tally: BTreeMap<Vec<(usize, usize)>, usize> = BTreeMap::new();
                for p in &partitions {
                    let mut blocks: Vec<(usize, usize)> = p
                        .iter()
                        .map(|b| {
                            let first = b.iter().filter(|&&s| s < a1).count();
                            (first, b.len() - first)
                        })
                        .collect();
                    blocks.sort_unstable();
                    *tally.entry(blocks).or_default() += 1;
                }
                let list = tally.into_iter().map(|(blocks, count)| BlockGroup { count: count as f64, blocks }).collect();
                groups.insert((a1, a2), list);
            }
        }
        Ok(PartitionTable { max_order, groups })
    }

    pub fn max_order(&self) -> usize {
        self.max_order
    }

    /// Groups for a key of shape `(a1, a2)`; `a2 = 0` for a single variable.
    pub fn groups(&self, shape: (usize, usize)) -> &[BlockGroup] {
        self.groups.get(&shape).map_or(&[], Vec::as_slice)
    }
}
