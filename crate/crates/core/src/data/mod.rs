//! Interaction records, session partitioning and the session-wise split.
//!
//! Histories are split into sessions by a time rule, and the last two
//! sessions of every user become the test and validation sets. Only
//! interactions from strictly earlier sessions are ever visible when a
//! session is evaluated.

mod ingest;
mod schema;

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use ingest::{read_interactions, write_interactions, IngestReport, Rejected};
pub use schema::{BehaviorId, BehaviorSchema, SessionRule};

pub type UserId = u32;
pub type ItemId = u32;

const SECONDS_PER_DAY: i64 = 86_400;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Interaction {
    pub user: UserId,
    pub item: ItemId,
    pub behavior: BehaviorId,
    pub timestamp: i64,
}

/// Opaque string ids mapped to dense integers in first-seen order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Registry {
    names: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

impl Registry {
    pub fn from_names(names: Vec<String>) -> Self {
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i as u32)).collect();
        Self { names, index }
    }

    pub fn intern(&mut self, name: &str) -> u32 {
        if let Some(&id) = self.index.get(name) {
            return id;
        }
        let id = self.names.len() as u32;
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), id);
        id
    }

    pub fn get(&self, name: &str) -> Option<u32> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: u32) -> &str {
        &self.names[id as usize]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Rebuilds the lookup table after deserialization.
    pub fn reindex(&mut self) {
        self.index = self.names.iter().enumerate().map(|(i, n)| (n.clone(), i as u32)).collect();
    }
}

/// All users' chronologically ordered histories plus the id registries.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Dataset {
    pub schema: BehaviorSchema,
    pub users: Registry,
    pub items: Registry,
    /// Indexed by dense user id; each history is sorted by timestamp with
    /// equal timestamps in input order.
    pub histories: Vec<Vec<Interaction>>,
}

impl Dataset {
    pub fn interaction_count(&self) -> usize {
        self.histories.iter().map(Vec::len).sum()
    }

    /// Interaction counts per dense item id.
    pub fn item_counts(&self) -> Vec<u64> {
        let mut counts = vec![0u64; self.items.len()];
        for h in &self.histories {
            for it in h {
                counts[it.item as usize] += 1;
            }
        }
        counts
    }

    pub fn reindex(&mut self) {
        self.users.reindex();
        self.items.reindex();
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Session {
    /// Ordinal within the user's history, starting at 0.
    pub index: usize,
    pub interactions: Vec<Interaction>,
}

impl Session {
    pub fn len(&self) -> usize {
        self.interactions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.interactions.is_empty()
    }

    pub fn contains_behavior(&self, behavior: BehaviorId) -> bool {
        self.interactions.iter().any(|i| i.behavior == behavior)
    }
}

/// Partitions one chronologically sorted history into sessions.
///
/// Under [`SessionRule::Gap`] a session ends exactly when the gap to the next
/// interaction exceeds the threshold; under [`SessionRule::CalendarDay`]
/// sessions are maximal runs sharing a UTC day. Equal timestamps never split.
pub fn sessionize(history: &[Interaction], rule: SessionRule) -> Result<Vec<Session>> {
    if history.is_empty() {
        return Err(Error::Data("cannot sessionize an empty history".into()));
    }
    if let Some(w) = history.windows(2).position(|w| w[1].timestamp < w[0].timestamp) {
        return Err(Error::Data(format!(
            "history not sorted by timestamp at position {}",
            w + 1
        )));
    }
    let breaks = |prev: &Interaction, next: &Interaction| match rule {
        SessionRule::Gap { seconds } => next.timestamp - prev.timestamp > seconds,
        SessionRule::CalendarDay => {
            next.timestamp.div_euclid(SECONDS_PER_DAY) != prev.timestamp.div_euclid(SECONDS_PER_DAY)
        }
    };
    let mut sessions = Vec::new();
    let mut current = vec![history[0]];
    for w in history.windows(2) {
        if breaks(&w[0], &w[1]) {
            let index = sessions.len();
            sessions.push(Session { index, interactions: std::mem::take(&mut current) });
        }
        current.push(w[1]);
    }
    let index = sessions.len();
    sessions.push(Session { index, interactions: current });
    Ok(sessions)
}

/// One user's session-wise leave-one-out split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserSplit {
    pub user: UserId,
    pub train: Vec<Session>,
    pub val: Session,
    pub test: Session,
}

impl UserSplit {
    pub fn train_interactions(&self) -> Vec<Interaction> {
        self.train.iter().flat_map(|s| s.interactions.iter().copied()).collect()
    }

    /// Train and validation sessions: the visible history when the test
    /// session is evaluated.
    pub fn history_before_test(&self) -> Vec<Session> {
        let mut s = self.train.clone();
        s.push(self.val.clone());
        s
    }

    pub fn all_sessions(&self) -> Vec<Session> {
        let mut s = self.history_before_test();
        s.push(self.test.clone());
        s
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SplitDataset {
    pub users: Vec<UserSplit>,
    /// Users dropped for having fewer than three sessions.
    pub excluded: Vec<UserId>,
}

/// Holds out the last session for test and the second-to-last for
/// validation. Returns `None` (user excluded) with fewer than three sessions.
pub fn split_leave_one_session_out(user: UserId, mut sessions: Vec<Session>) -> Option<UserSplit> {
    if sessions.len() < 3 {
        return None;
    }
    let test = sessions.pop().unwrap();
    let val = sessions.pop().unwrap();
    Some(UserSplit { user, train: sessions, val, test })
}

/// Sessionizes and splits every user of a dataset.
pub fn split_dataset(dataset: &Dataset) -> Result<SplitDataset> {
    let rule = dataset.schema.session_rule();
    let mut out = SplitDataset::default();
    for (u, history) in dataset.histories.iter().enumerate() {
        let u = u as UserId;
        if history.is_empty() {
            out.excluded.push(u);
            continue;
        }
        match split_leave_one_session_out(u, sessionize(history, rule)?) {
            Some(split) => out.users.push(split),
            None => out.excluded.push(u),
        }
    }
    Ok(out)
}

/// Deduplicated items the user touched with exactly `behavior` in `session`.
pub fn build_targets(session: &Session, behavior: &str, schema: &BehaviorSchema) -> Result<BTreeSet<ItemId>> {
    let b = schema.id(behavior)?;
    Ok(targets_for(session, b))
}

pub(crate) fn targets_for(session: &Session, behavior: BehaviorId) -> BTreeSet<ItemId> {
    session
        .interactions
        .iter()
        .filter(|i| i.behavior == behavior)
        .map(|i| i.item)
        .collect()
}

/// Fraction of test-session target-behavior interactions whose item appears
/// among the `k` most recent interactions preceding it.
///
/// The preceding history is everything before the interaction, including
/// earlier interactions of the test session itself (the next-item view that
/// the session-wise protocol guards against). With `filter_low_level`, the
/// most recent preceding interaction is dropped first when it is a
/// lower-level behavior on the same item. `None` when there is no test-set
/// target interaction.
pub fn duplication_ratio(
    dataset: &SplitDataset,
    schema: &BehaviorSchema,
    k: usize,
    filter_low_level: bool,
) -> Result<Option<f64>> {
    if k == 0 {
        return Err(Error::Config("duplication ratio needs k >= 1".into()));
    }
    let target = schema.target();
    let (mut hits, mut total) = (0usize, 0usize);
    for user in &dataset.users {
        let mut prefix = user.train_interactions();
        prefix.extend(user.val.interactions.iter().copied());
        for it in &user.test.interactions {
            if it.behavior == target {
                total += 1;
                let mut history: &[Interaction] = &prefix;
                if filter_low_level {
                    if let Some(last) = history.last() {
                        if last.item == it.item && schema.level(last.behavior) < schema.level(target) {
                            history = &history[..history.len() - 1];
                        }
                    }
                }
                let start = history.len().saturating_sub(k);
                if history[start..].iter().any(|h| h.item == it.item) {
                    hits += 1;
                }
            }
            prefix.push(*it);
        }
    }
    Ok((total > 0).then(|| hits as f64 / total as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn it(item: ItemId, behavior: BehaviorId, timestamp: i64) -> Interaction {
        Interaction { user: 0, item, behavior, timestamp }
    }

    fn sizes(s: &[Session]) -> Vec<usize> {
        s.iter().map(Session::len).collect()
    }

    fn session(index: usize, items: &[(ItemId, BehaviorId)]) -> Session {
        Session {
            index,
            interactions: items.iter().enumerate().map(|(i, &(v, b))| it(v, b, (index * 10_000 + i) as i64)).collect(),
        }
    }

    #[test]
    fn gap_rule_splits_on_excess() {
        let h = [it(1, 0, 0), it(2, 0, 100), it(3, 0, 1100)];
        assert_eq!(sizes(&sessionize(&h, SessionRule::Gap { seconds: 900 }).unwrap()), vec![2, 1]);
        // a gap equal to the threshold does not split
        let h = [it(1, 0, 0), it(2, 0, 900)];
        assert_eq!(sizes(&sessionize(&h, SessionRule::Gap { seconds: 900 }).unwrap()), vec![2]);
    }

    #[test]
    fn calendar_day_rule() {
        let d = 20_000 * SECONDS_PER_DAY;
        let h = [it(1, 0, d + 5), it(2, 0, d + 80_000), it(3, 0, d + SECONDS_PER_DAY + 1)];
        let s = sessionize(&h, SessionRule::CalendarDay).unwrap();
        assert_eq!(sizes(&s), vec![2, 1]);
        assert_eq!(s[1].index, 1);
    }

    #[test]
    fn single_and_errors() {
        for rule in [SessionRule::CalendarDay, SessionRule::SHORT_VIDEO] {
            assert_eq!(sizes(&sessionize(&[it(1, 0, 7)], rule).unwrap()), vec![1]);
            assert!(sessionize(&[], rule).is_err());
            assert!(sessionize(&[it(1, 0, 7), it(1, 0, 6)], rule).is_err());
        }
    }

    #[test]
    fn split_shapes() {
        let five: Vec<Session> = (0..5).map(|i| session(i, &[(i as u32, 0)])).collect();
        let s = split_leave_one_session_out(0, five).unwrap();
        assert_eq!(s.train.iter().map(|s| s.index).collect::<Vec<_>>(), vec![0, 1, 2]);
        assert_eq!((s.val.index, s.test.index), (3, 4));

        let three: Vec<Session> = (0..3).map(|i| session(i, &[(1, 0)])).collect();
        let s = split_leave_one_session_out(0, three).unwrap();
        assert_eq!((s.train.len(), s.val.index, s.test.index), (1, 1, 2));

        let two: Vec<Session> = (0..2).map(|i| session(i, &[(1, 0)])).collect();
        assert!(split_leave_one_session_out(0, two).is_none());
    }

    #[test]
    fn targets() {
        let schema = BehaviorSchema::ordered(&["click", "buy"], SessionRule::TMALL).unwrap();
        let s = session(0, &[(10, 0), (11, 1), (11, 1)]);
        assert_eq!(build_targets(&s, "buy", &schema).unwrap(), BTreeSet::from([11]));
        let s = session(0, &[(10, 0)]);
        assert!(build_targets(&s, "buy", &schema).unwrap().is_empty());
        let s = session(0, &[(10, 0), (12, 1), (13, 1)]);
        assert_eq!(build_targets(&s, "buy", &schema).unwrap(), BTreeSet::from([12, 13]));
        assert!(build_targets(&s, "cart", &schema).is_err());
    }

    fn user_with_test(user: UserId, history: &[(ItemId, BehaviorId)], test: &[(ItemId, BehaviorId)]) -> UserSplit {
        UserSplit {
            user,
            train: vec![session(0, &[(999, 0)])],
            val: session(1, history),
            test: session(2, test),
        }
    }

    #[test]
    fn duplication_ratio_fixture() {
        let schema = BehaviorSchema::ordered(&["click", "buy"], SessionRule::TMALL).unwrap();
        // 10 users, one test buy each; the first 5 clicked the bought item
        // two steps earlier, the rest never saw it.
        let users = (0..10)
            .map(|u| {
                let item = 100 + u;
                let seen = if u < 5 { item } else { 500 + u };
                user_with_test(u, &[(seen, 0), (7, 0)], &[(item, 1)])
            })
            .collect();
        let ds = SplitDataset { users, excluded: vec![] };
        assert_eq!(duplication_ratio(&ds, &schema, 2, false).unwrap(), Some(0.5));
        assert_eq!(duplication_ratio(&ds, &schema, 1, false).unwrap(), Some(0.0));
        assert_eq!(duplication_ratio(&ds, &schema, 100, false).unwrap(), Some(0.5));
    }

    #[test]
    fn duplication_ratio_filter_removes_sole_match() {
        let schema = BehaviorSchema::ordered(&["click", "buy"], SessionRule::TMALL).unwrap();
        let users = (0..4).map(|u| user_with_test(u, &[(1, 0)], &[(50 + u, 0), (50 + u, 1)])).collect();
        let ds = SplitDataset { users, excluded: vec![] };
        assert_eq!(duplication_ratio(&ds, &schema, 1, false).unwrap(), Some(1.0));
        assert_eq!(duplication_ratio(&ds, &schema, 1, true).unwrap(), Some(0.0));
    }

    #[test]
    fn duplication_ratio_undefined_and_saturated() {
        let schema = BehaviorSchema::ordered(&["click", "buy"], SessionRule::TMALL).unwrap();
        let ds = SplitDataset { users: vec![user_with_test(0, &[(1, 0)], &[(2, 0)])], excluded: vec![] };
        assert_eq!(duplication_ratio(&ds, &schema, 3, false).unwrap(), None);
        let ds = SplitDataset { users: vec![user_with_test(0, &[(2, 0), (1, 0)], &[(2, 1), (1, 1)])], excluded: vec![] };
        assert_eq!(duplication_ratio(&ds, &schema, 1000, false).unwrap(), Some(1.0));
        assert!(duplication_ratio(&ds, &schema, 0, false).is_err());
    }
}
