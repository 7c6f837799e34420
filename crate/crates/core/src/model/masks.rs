//! Attention masks, indexed `(query row, key column)`, `true` = may attend.
//!
//! Behavior and session masks are defined at item granularity and expanded
//! to every token of an item run.

use super::sequence::{Token, TokenSequence};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    n: usize,
    allowed: Vec<bool>,
}

impl Mask {
    pub fn from_fn(n: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut allowed = Vec::with_capacity(n * n);
        for q in 0..n {
            for k in 0..n {
                allowed.push(f(q, k));
            }
        }
        Self { n, allowed }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, q: usize, k: usize) -> bool {
        self.allowed[q * self.n + k]
    }

    pub fn row(&self, q: usize) -> &[bool] {
        &self.allowed[q * self.n..(q + 1) * self.n]
    }

    /// True when every allowed pair of `self` is allowed in `other`.
    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.n == other.n && self.allowed.iter().zip(&other.allowed).all(|(&a, &b)| !a || b)
    }

    pub fn count(&self) -> usize {
        self.allowed.iter().filter(|&&a| a).count()
    }
}

pub fn causal_allows(q: usize, k: usize) -> bool {
    k <= q
}

/// Earlier item with a strictly lower behavior level.
pub fn behavior_allows(q: &Token, k: &Token) -> bool {
    k.item < q.item && k.level < q.level
}

/// Strictly earlier session, or an earlier-or-same token of the query's own
/// item run.
pub fn session_allows(qi: usize, q: &Token, ki: usize, k: &Token) -> bool {
    k.session < q.session || (k.item == q.item && ki <= qi)
}

/// Behavior mask as used inside the session-wise model: the same-session
/// restriction also applies to the cross-level layer.
pub fn session_behavior_allows(q: &Token, k: &Token) -> bool {
    behavior_allows(q, k) && k.session < q.session
}

pub fn build_causal_mask(seq: &TokenSequence) -> Mask {
    Mask::from_fn(seq.len(), causal_allows)
}

pub fn build_behavior_mask(seq: &TokenSequence) -> Mask {
    let t = &seq.tokens;
    Mask::from_fn(t.len(), |q, k| behavior_allows(&t[q], &t[k]))
}

/// Session-wise mask plus rotary position ids (the session ordinal of each
/// token).
pub fn build_session_mask_and_positions(seq: &TokenSequence) -> (Mask, Vec<u32>) {
    let t = &seq.tokens;
    let mask = Mask::from_fn(t.len(), |q, k| session_allows(q, &t[q], k, &t[k]));
    (mask, seq.session_index())
}
