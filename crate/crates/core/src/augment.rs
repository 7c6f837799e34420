//! Behavior-hierarchy sequence augmentation.
//!
//! For a drop ratio `r`, every behavior `b` below the target level loses
//! `floor(n_b * r / L_b)` of its interactions, sampled uniformly without
//! replacement. Target-level interactions are never dropped. `x` folds use
//! ratios `i / (x + 1)` for `i = 1..=x`.

use std::collections::BTreeSet;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::data::{BehaviorSchema, Interaction, ItemId, Session, UserId};
use crate::error::{Error, Result};
use crate::rng::{self, derive_seed, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentationPlan {
    pub x: usize,
    pub seed: u64,
}

impl AugmentationPlan {
    pub fn new(x: usize, seed: u64) -> Self {
        Self { x, seed }
    }

    /// `i / (x + 1)` for `i = 1..=x`; empty when `x == 0`.
    pub fn ratios(&self) -> Vec<f64> {
        (1..=self.x).map(|i| i as f64 / (self.x + 1) as f64).collect()
    }
}

/// `floor(n * r / level)`, robust to `r` being the float nearest a rational.
pub fn drop_count(n: usize, r: f64, level: u32) -> usize {
    ((n as f64 * r) / level as f64 + 1e-9).floor() as usize
}

fn keep_mask(history: &[Interaction], r: f64, schema: &BehaviorSchema, rng: &mut Rng) -> Result<Vec<bool>> {
    if !(0.0..1.0).contains(&r) {
        return Err(Error::Config(format!("augmentation ratio must be in [0, 1), got {r}")));
    }
    let mut by_behavior: Vec<Vec<usize>> = vec![Vec::new(); schema.len()];
    for (pos, it) in history.iter().enumerate() {
        by_behavior
            .get_mut(it.behavior as usize)
            .ok_or_else(|| Error::Data(format!("behavior id {} not in schema", it.behavior)))?
            .push(pos);
    }
    let mut keep = vec![true; history.len()];
    for (b, positions) in by_behavior.iter().enumerate() {
        let b = b as u16;
        if b == schema.target() || positions.is_empty() {
            continue;
        }
        let k = drop_count(positions.len(), r, schema.level(b));
        for i in index::sample(rng, positions.len(), k) {
            keep[positions[i]] = false;
        }
    }
    Ok(keep)
}

/// Drops low-level interactions for one ratio; survivors keep their order.
pub fn augment_once(history: &[Interaction], r: f64, schema: &BehaviorSchema, seed: u64) -> Result<Vec<Interaction>> {
    let keep = keep_mask(history, r, schema, &mut rng::seeded(seed))?;
    Ok(history.iter().zip(&keep).filter(|(_, &k)| k).map(|(i, _)| *i).collect())
}

/// [`augment_once`] over a sessionized history. Survivors stay in their
/// original session; emptied sessions disappear and the rest are renumbered
/// densely.
pub fn augment_sessions(sessions: &[Session], r: f64, schema: &BehaviorSchema, seed: u64) -> Result<Vec<Session>> {
    let flat: Vec<Interaction> = sessions.iter().flat_map(|s| s.interactions.iter().copied()).collect();
    let keep = keep_mask(&flat, r, schema, &mut rng::seeded(seed))?;
    let mut out = Vec::with_capacity(sessions.len());
    let mut pos = 0;
    for s in sessions {
        let kept: Vec<Interaction> = s
            .interactions
            .iter()
            .zip(&keep[pos..pos + s.len()])
            .filter(|(_, &k)| k)
            .map(|(i, _)| *i)
            .collect();
        pos += s.len();
        if !kept.is_empty() {
            out.push(Session { index: out.len(), interactions: kept });
        }
    }
    Ok(out)
}

/// One training sequence: fold 0 is the original, fold `i` used ratio
/// `i / (x + 1)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentedSequence {
    pub user: UserId,
    pub fold: usize,
    pub sessions: Vec<Session>,
}

/// Originals followed by `x` augmented copies per user. Each (user, fold)
/// pair draws from its own derived seed.
pub fn build_augmented_trainset(
    train: &[(UserId, Vec<Session>)],
    plan: &AugmentationPlan,
    schema: &BehaviorSchema,
) -> Result<Vec<AugmentedSequence>> {
    let ratios = plan.ratios();
    let mut out = Vec::with_capacity(train.len() * (plan.x + 1));
    for (user, sessions) in train {
        out.push(AugmentedSequence { user: *user, fold: 0, sessions: sessions.clone() });
    }
    for (user, sessions) in train {
        for (i, &r) in ratios.iter().enumerate() {
            let fold = i + 1;
            let seed = derive_seed(plan.seed, *user as u64, fold as u64);
            let sessions = augment_sessions(sessions, r, schema, seed)?;
            out.push(AugmentedSequence { user: *user, fold, sessions });
        }
    }
    Ok(out)
}

/// Input perturbation for robustness checks: removes `floor(n * r)` of the
/// `n` lowest-level interactions (all of them at `r = 1`), then, with
/// `drop_target_items`, every interaction on an item in `targets`.
pub fn robustness_perturb(
    history: &[Interaction],
    r: f64,
    drop_target_items: bool,
    targets: &BTreeSet<ItemId>,
    schema: &BehaviorSchema,
    seed: u64,
) -> Result<Vec<Interaction>> {
    if !(0.0..=1.0).contains(&r) {
        return Err(Error::Config(format!("perturbation ratio must be in [0, 1], got {r}")));
    }
    let lowest: Vec<usize> = history
        .iter()
        .enumerate()
        .filter(|(_, i)| schema.level(i.behavior) == 1)
        .map(|(p, _)| p)
        .collect();
    let k = drop_count(lowest.len(), r, 1);
    let mut keep = vec![true; history.len()];
    for i in index::sample(&mut rng::seeded(seed), lowest.len(), k) {
        keep[lowest[i]] = false;
    }
    Ok(history
        .iter()
        .zip(&keep)
        .filter(|(it, &k)| k && !(drop_target_items && targets.contains(&it.item)))
        .map(|(i, _)| *i)
        .collect())
}

/// [`robustness_perturb`] keeping session membership. Emptied sessions are
/// dropped; survivors keep their original ordinals so provenance stays
/// traceable.
pub fn perturb_sessions(
    sessions: &[Session],
    r: f64,
    drop_target_items: bool,
    targets: &BTreeSet<ItemId>,
    schema: &BehaviorSchema,
    seed: u64,
) -> Result<Vec<Session>> {
    let flat: Vec<Interaction> = sessions.iter().flat_map(|s| s.interactions.iter().copied()).collect();
    let survivors = robustness_perturb(&flat, r, drop_target_items, targets, schema, seed)?;
    // survivors are an order-preserving subsequence of `flat`
    let mut out = Vec::new();
    let mut it = survivors.iter().peekable();
    for s in sessions {
        let mut kept = Vec::new();
        for x in &s.interactions {
            if it.peek() == Some(&x) {
                kept.push(*x);
                it.next();
            }
        }
        if !kept.is_empty() {
            out.push(Session { index: s.index, interactions: kept });
        }
    }
    Ok(out)
}
