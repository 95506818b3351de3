use std::fmt;

use serde::Serialize;

use crate::error::{Error, Result};

/// One differentiation variable: input feature `feature` of node `node`,
/// differentiated `order` times.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct Slot {
    pub node: usize,
    pub feature: usize,
    pub order: usize,
}

impl Slot {
    pub fn new(node: usize, feature: usize, order: usize) -> Self {
        Slot { node, feature, order }
    }

    fn var(&self) -> (usize, usize) {
        (self.node, self.feature)
    }
}

/// Canonical multi-index of a partial derivative: at most two distinct
/// variables, sorted by `(node, feature)`, each with a positive order.
///
/// Unused trailing slots are zeroed, and a real slot never has order 0, so the
/// derived ordering coincides with lexicographic ordering of the used slots.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct DerivKey {
    slots: [Slot; 2],
    len: u8,
}

impl DerivKey {
    pub fn single(node: usize, feature: usize, order: usize) -> Self {
        debug_assert!(order >= 1);
        DerivKey { slots: [Slot::new(node, feature, order), Slot::default()], len: 1 }
    }

    /// Builds the canonical key for any listing of slots; repeated variables
    /// have their orders summed.
    pub fn new(slots: &[Slot]) -> Result<Self> {
        let mut sorted: Vec<Slot> = slots.to_vec();
        sorted.sort();
        let mut merged: Vec<Slot> = Vec::with_capacity(2);
        for s in sorted {
            if s.order == 0 {
                return Err(Error::Validation("derivative slot with order 0".into()));
            }
            match merged.last_mut() {
                Some(last) if last.var() == s.var() => last.order += s.order,
                _ => merged.push(s),
            }
        }
        match merged.len() {
            1 => Ok(DerivKey { slots: [merged[0], Slot::default()], len: 1 }),
            2 => Ok(DerivKey { slots: [merged[0], merged[1]], len: 2 }),
            0 => Err(Error::Validation("derivative key needs at least one slot".into())),
            n => Err(Error::UnsupportedArity(n)),
        }
    }

    pub fn slots(&self) -> &[Slot] {
        &self.slots[..self.len as usize]
    }

    /// Number of distinct variables.
    pub fn arity(&self) -> usize {
        self.len as usize
    }

    pub fn total_order(&self) -> usize {
        self.slots().iter().map(|s| s.order).sum()
    }

    /// Orders of the first and (if present) second variable.
    pub fn shape(&self) -> (usize, usize) {
        (self.slots[0].order, self.slots[1].order)
    }

    /// The key whose multi-index is the sum of both, if it has at most
    /// `max_arity` variables.
    pub fn combine(&self, other: &DerivKey, max_arity: usize) -> Option<DerivKey> {
        let mut out = [Slot::default(); 2];
        let mut len = 0;
        let (a, b) = (self.slots(), other.slots());
        let (mut i, mut j) = (0, 0);
        while i < a.len() || j < b.len() {
            let next = match (a.get(i), b.get(j)) {
                (Some(x), Some(y)) if x.var() == y.var() => {
                    i += 1;
                    j += 1;
                    Slot { order: x.order + y.order, ..*x }
                }
                (Some(x), Some(y)) if x.var() < y.var() => {
                    i += 1;
                    *x
                }
                (Some(x), None) => {
                    i += 1;
                    *x
                }
                (_, Some(y)) => {
                    j += 1;
                    *y
                }
                (None, None) => unreachable!(),
            };
            if len == max_arity.min(2) {
                return None;
            }
            out[len] = next;
            len += 1;
        }
        Some(DerivKey { slots: out, len: len as u8 })
    }

    /// The key keeping `first` derivatives of the first variable and `second`
    /// of the second; `None` when both are zero.
    pub fn restrict(&self, first: usize, second: usize) -> Option<DerivKey> {
        debug_assert!(first <= self.slots[0].order && second <= self.slots[1].order);
        match (first, second) {
            (0, 0) => None,
            (a, 0) => Some(DerivKey::single(self.slots[0].node, self.slots[0].feature, a)),
            (0, b) => Some(DerivKey::single(self.slots[1].node, self.slots[1].feature, b)),
            (a, b) => Some(DerivKey { slots: [Slot { order: a, ..self.slots[0] }, Slot { order: b, ..self.slots[1] }], len: 2 }),
        }
    }

    /// The same multi-index with every node relabeled through `perm`.
    pub fn relabeled(&self, perm: &[usize]) -> DerivKey {
        let slots: Vec<Slot> = self.slots().iter().map(|s| Slot { node: perm[s.node], ..*s }).collect();
        DerivKey::new(&slots).expect("relabeling keeps a valid key")
    }

    pub fn is_diagonal(&self, v: usize) -> bool {
        self.slots().iter().all(|s| s.node == v)
    }
}

impl fmt::Debug for DerivKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("{")?;
        for (i, s) in self.slots().iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "x[{},{}]^{}", s.node, s.feature, s.order)?;
        }
        f.write_str("}")
    }
}
