//! Seeded synthetic corpora with planted structure, for tests and
//! benchmarks.
//!
//! Each user prefers one topic. Exposures mostly come from that topic, and a
//! small per-user "planted" set drawn from the topic's popular items gets
//! frequent clicks. Only the first planted item ever converts, so the planted
//! list in order is a perfect conversion ranker for its own data.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{BehaviorSchema, Dataset, Interaction, ItemId, Registry, Session, SessionRule, UserId};
use crate::error::{Error, Result};
use crate::eval::{Query, Recommendation, Recommender};
use crate::ranking::{BinaryScore, RankingExample};
use crate::rng::{derive_seed, seeded};
use crate::tokenizer::{write_features, IdKind, ItemTokenizer};

const BASE_TIME: i64 = 1_600_000_000;
const DAY: i64 = 86_400;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub users: usize,
    pub topics: usize,
    pub items_per_topic: usize,
    /// Popular items per topic that planted sets are drawn from.
    pub popular_per_topic: usize,
    pub feature_dim: usize,
    /// Inclusive range of sessions per user.
    pub sessions: (usize, usize),
    /// Inclusive range of exposures per session.
    pub session_len: (usize, usize),
    /// Inclusive range of planted items per user.
    pub planted: (usize, usize),
    /// Probability an exposure comes from the user's topic.
    pub affinity: f64,
    /// Probability a topic exposure is one of the user's planted items.
    pub planted_share: f64,
    /// Click rate on the primary planted item; the others click at
    /// `planted_click + planted_conversion`.
    pub planted_click: f64,
    /// Conversion rate on the primary planted item.
    pub planted_conversion: f64,
    pub other_click: f64,
    pub feature_noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            users: 2000,
            topics: 8,
            items_per_topic: 32,
            popular_per_topic: 6,
            feature_dim: 16,
            sessions: (4, 6),
            session_len: (5, 8),
            planted: (2, 3),
            affinity: 0.7,
            planted_share: 0.4,
            planted_click: 0.2,
            planted_conversion: 0.2,
            other_click: 0.15,
            feature_noise: 0.5,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn num_items(&self) -> usize {
        self.topics * self.items_per_topic
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("synthetic spec: {m}")));
        if self.users == 0 || self.topics == 0 || self.items_per_topic == 0 || self.feature_dim == 0 {
            return bad("users, topics, items_per_topic and feature_dim must be positive".into());
        }
        if self.sessions.0 < 3 || self.sessions.0 > self.sessions.1 {
            return bad(format!("session range {:?} must start at 3 or more and be ordered", self.sessions));
        }
        if self.session_len.0 == 0 || self.session_len.0 > self.session_len.1 {
            return bad(format!("session length range {:?} is empty", self.session_len));
        }
        if self.planted.0 == 0 || self.planted.0 > self.planted.1 || self.planted.1 > self.popular_per_topic {
            return bad(format!("planted range {:?} must be non-empty and fit {} popular items", self.planted, self.popular_per_topic));
        }
        if self.popular_per_topic > self.items_per_topic {
            return bad("more popular items than items per topic".into());
        }
        for (name, p) in [
            ("affinity", self.affinity),
            ("planted_share", self.planted_share),
            ("planted_click", self.planted_click),
            ("planted_conversion", self.planted_conversion),
            ("other_click", self.other_click),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} = {p} is not a probability"));
            }
        }
        if self.planted_click + self.planted_conversion > 1.0 {
            return bad("planted click and conversion rates sum above 1".into());
        }
        if !(self.feature_noise >= 0.0 && self.feature_noise.is_finite()) {
            return bad("feature_noise must be finite and non-negative".into());
        }
        Ok(())
    }

    /// `p3s < click < conversion`, sessions cut at 15 minutes of inactivity.
    pub fn schema(&self) -> BehaviorSchema {
        BehaviorSchema::short_video()
    }

    /// Probabilities that an exposure lands on the primary planted item and
    /// on any planted item.
    pub fn planted_rates(&self) -> (f64, f64) {
        let ks = self.planted.0..=self.planted.1;
        let n = ks.clone().count() as f64;
        let mean_k = ks.clone().map(|k| k as f64).sum::<f64>() / n;
        let mean_inv_k = ks.map(|k| 1.0 / k as f64).sum::<f64>() / n;
        let rate = |share: f64, per_item: f64| {
            self.affinity * (self.planted_share * share + (1.0 - self.planted_share) * per_item / self.items_per_topic as f64)
                + (1.0 - self.affinity) * per_item / self.num_items() as f64
        };
        (rate(mean_inv_k, 1.0), rate(1.0, mean_k))
    }

    /// Expected share of each behavior among all interactions.
    pub fn behavior_rates(&self) -> Vec<f64> {
        let (primary, planted) = self.planted_rates();
        let conv = primary * self.planted_conversion;
        let click = primary * self.planted_click
            + (planted - primary) * (self.planted_click + self.planted_conversion)
            + (1.0 - planted) * self.other_click;
        vec![1.0 - conv - click, click, conv]
    }
}

/// What the generator planted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub item_topic: Vec<u32>,
    pub user_topic: Vec<u32>,
    /// Planted items per user, the converting one first.
    pub planted: Vec<Vec<ItemId>>,
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub dataset: Dataset,
    pub features: Vec<Vec<f64>>,
    pub truth: GroundTruth,
}

fn draw_range(rng: &mut crate::rng::Rng, r: (usize, usize)) -> usize {
    rng.gen_range(r.0..=r.1)
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let n_items = spec.num_items();
    let schema = spec.schema();
    let (p3s, click, conversion) = (schema.id("p3s")?, schema.id("click")?, schema.id("conversion")?);

    let mut rng = seeded(derive_seed(spec.seed, 0, 0));
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let centers: Vec<Vec<f64>> = (0..spec.topics).map(|_| (0..spec.feature_dim).map(|_| 3.0 * unit.sample(&mut rng)).collect()).collect();
    let item_topic: Vec<u32> = (0..n_items).map(|i| (i / spec.items_per_topic) as u32).collect();
    let features: Vec<Vec<f64>> = item_topic
        .iter()
        .map(|&t| centers[t as usize].iter().map(|c| c + spec.feature_noise * unit.sample(&mut rng)).collect())
        .collect();
    let popular: Vec<Vec<ItemId>> = (0..spec.topics)
        .map(|t| {
            let mut pool: Vec<ItemId> = (0..spec.items_per_topic).map(|k| (t * spec.items_per_topic + k) as ItemId).collect();
            pool.shuffle(&mut rng);
            pool.truncate(spec.popular_per_topic);
            pool.sort_unstable();
            pool
        })
        .collect();

    let mut histories = Vec::with_capacity(spec.users);
    let mut user_topic = Vec::with_capacity(spec.users);
    let mut planted_sets = Vec::with_capacity(spec.users);
    for u in 0..spec.users {
        let mut rng = seeded(derive_seed(spec.seed, 1, u as u64));
        let topic = rng.gen_range(0..spec.topics);
        let k = draw_range(&mut rng, spec.planted);
        let planted_list: Vec<ItemId> = popular[topic].choose_multiple(&mut rng, k).copied().collect();
        let planted: BTreeSet<ItemId> = planted_list.iter().copied().collect();
        let primary = planted_list[0];
        let mut t = BASE_TIME + rng.gen_range(0..DAY);
        let mut history = Vec::new();
        for _ in 0..draw_range(&mut rng, spec.sessions) {
            for _ in 0..draw_range(&mut rng, spec.session_len) {
                let item = if rng.gen_bool(spec.affinity) {
                    if rng.gen_bool(spec.planted_share) {
                        *planted_list.choose(&mut rng).expect("planted set is non-empty")
                    } else {
                        (topic * spec.items_per_topic + rng.gen_range(0..spec.items_per_topic)) as ItemId
                    }
                } else {
                    rng.gen_range(0..n_items) as ItemId
                };
                let x: f64 = rng.gen();
                let behavior = if item == primary {
                    if x < spec.planted_conversion {
                        conversion
                    } else if x < spec.planted_conversion + spec.planted_click {
                        click
                    } else {
                        p3s
                    }
                } else if planted.contains(&item) {
                    if x < spec.planted_conversion + spec.planted_click {
                        click
                    } else {
                        p3s
                    }
                } else if x < spec.other_click {
                    click
                } else {
                    p3s
                };
                history.push(Interaction { user: u as UserId, item, behavior, timestamp: t });
                t += rng.gen_range(5..120);
            }
            t += DAY + rng.gen_range(0..DAY / 2);
        }
        histories.push(history);
        user_topic.push(topic as u32);
        planted_sets.push(planted_list);
    }

    let dataset = Dataset {
        schema,
        users: Registry::from_names((0..spec.users).map(|u| format!("u{u:05}")).collect()),
        items: Registry::from_names((0..n_items).map(|i| format!("i{i:04}")).collect()),
        histories,
    };
    Ok(SyntheticCorpus { dataset, features, truth: GroundTruth { item_topic, user_topic, planted: planted_sets } })
}

impl SyntheticCorpus {
    /// Writes `interactions.tsv`, `features.tsv`, `schema.toml` and
    /// `truth.json` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let rows: Vec<Interaction> = self.dataset.histories.iter().flatten().copied().collect();
        let mut buf = Vec::new();
        crate::data::write_interactions(&mut buf, &self.dataset, &rows, None)?;
        std::fs::write(dir.join("interactions.tsv"), buf)?;
        let mut buf = Vec::new();
        write_features(&mut buf, &self.dataset.items, &self.features)?;
        std::fs::write(dir.join("features.tsv"), buf)?;
        std::fs::write(dir.join("schema.toml"), self.dataset.schema.to_toml())?;
        let mut f = std::fs::File::create(dir.join("truth.json"))?;
        serde_json::to_writer(&mut f, &self.truth)?;
        f.write_all(b"\n")?;
        Ok(())
    }
}

/// Recommends each user's planted items in planted order.
pub struct IdealRanker<'a> {
    pub truth: &'a GroundTruth,
}

impl Recommender for IdealRanker<'_> {
    fn recommend(&self, q: &Query) -> Result<Recommendation> {
        let planted = self
            .truth
            .planted
            .get(q.user as usize)
            .ok_or_else(|| Error::Data(format!("user {} has no planted set", q.user)))?;
        Ok(Recommendation { ranked: planted.iter().take(q.top_n).copied().collect(), prompt: None })
    }
}

/// Ranking fixture: candidates convert with a probability set only by
/// whether their topic matches the user's.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RankingSpec {
    pub train_users: usize,
    pub test_users: usize,
    pub topics: usize,
    pub items_per_topic: usize,
    /// Inclusive range of history exposures, split over two sessions.
    pub history_len: (usize, usize),
    /// Probability a history exposure comes from the user's topic.
    pub affinity: f64,
    /// Probability a candidate comes from the user's topic.
    pub match_share: f64,
    pub p_match: f64,
    pub p_other: f64,
    pub seed: u64,
}

impl Default for RankingSpec {
    fn default() -> Self {
        Self {
            train_users: 4000,
            test_users: 2000,
            topics: 8,
            items_per_topic: 16,
            history_len: (6, 10),
            affinity: 0.8,
            match_share: 0.5,
            p_match: 0.85,
            p_other: 0.1,
            seed: 11,
        }
    }
}

impl RankingSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = self.train_users > 0
            && self.test_users > 0
            && self.topics >= 2
            && self.items_per_topic > 0
            && self.history_len.0 >= 2
            && self.history_len.0 <= self.history_len.1
            && [self.affinity, self.match_share, self.p_match, self.p_other].iter().all(|p| (0.0..=1.0).contains(p))
            && self.p_match != self.p_other;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("infeasible ranking spec {self:?}")))
        }
    }

    fn conversion_probability(&self, matched: bool) -> f64 {
        if matched {
            self.p_match
        } else {
            self.p_other
        }
    }

    /// AUROC of the true conversion probability, computed from the two
    /// score levels and their class-conditional frequencies.
    pub fn bayes_auroc(&self) -> f64 {
        let (hi, lo) = if self.p_match > self.p_other { (self.p_match, self.p_other) } else { (self.p_other, self.p_match) };
        let share_hi = if self.p_match > self.p_other { self.match_share } else { 1.0 - self.match_share };
        let pos = share_hi * hi + (1.0 - share_hi) * lo;
        let neg = 1.0 - pos;
        let hi_given_pos = share_hi * hi / pos;
        let hi_given_neg = share_hi * (1.0 - hi) / neg;
        let wins = hi_given_pos * (1.0 - hi_given_neg);
        let ties = hi_given_pos * hi_given_neg + (1.0 - hi_given_pos) * (1.0 - hi_given_neg);
        wins + 0.5 * ties
    }
}

#[derive(Debug, Clone)]
pub struct RankingFixture {
    pub schema: BehaviorSchema,
    pub tokenizer: ItemTokenizer,
    pub train: Vec<RankingExample>,
    pub test: Vec<RankingExample>,
    /// True conversion probability of each test example.
    pub test_oracle: Vec<BinaryScore>,
}

pub fn generate_ranking_fixture(spec: &RankingSpec) -> Result<RankingFixture> {
    spec.validate()?;
    let schema = BehaviorSchema::exposure_conversion().with_session_rule(SessionRule::SHORT_VIDEO);
    let (exposure, conversion) = (schema.id("exposure")?, schema.id("conversion")?);
    let codebook = spec.topics.max(spec.items_per_topic);
    let codes: Vec<Vec<u32>> = (0..spec.topics * spec.items_per_topic)
        .map(|i| vec![(i / spec.items_per_topic) as u32, (i % spec.items_per_topic) as u32])
        .collect();
    let tokenizer = ItemTokenizer::new(IdKind::Sid, codebook, codes)?;
    let item_of = |topic: usize, k: usize| (topic * spec.items_per_topic + k) as ItemId;

    let mut train = Vec::with_capacity(spec.train_users);
    let mut test = Vec::with_capacity(spec.test_users);
    let mut test_oracle = Vec::with_capacity(spec.test_users);
    for u in 0..spec.train_users + spec.test_users {
        let mut rng = seeded(derive_seed(spec.seed, 2, u as u64));
        let topic = rng.gen_range(0..spec.topics);
        let other_topic = |rng: &mut crate::rng::Rng| (topic + rng.gen_range(1..spec.topics)) % spec.topics;
        let draw = |rng: &mut crate::rng::Rng, matched: bool, t: i64| {
            let tp = if matched { topic } else { other_topic(rng) };
            let item = item_of(tp, rng.gen_range(0..spec.items_per_topic));
            let p = spec.conversion_probability(matched);
            let behavior = if rng.gen_bool(p) { conversion } else { exposure };
            (Interaction { user: u as UserId, item, behavior, timestamp: t }, p)
        };
        let n = draw_range(&mut rng, spec.history_len);
        let split = n / 2;
        let mut history = vec![Session { index: 0, interactions: Vec::new() }, Session { index: 1, interactions: Vec::new() }];
        for i in 0..n {
            let matched = rng.gen_bool(spec.affinity);
            let t = BASE_TIME + if i < split { i as i64 * 30 } else { DAY + i as i64 * 30 };
            history[usize::from(i >= split)].interactions.push(draw(&mut rng, matched, t).0);
        }
        let matched = rng.gen_bool(spec.match_share);
        let (cand, p) = draw(&mut rng, matched, BASE_TIME + 2 * DAY);
        let ex = RankingExample { user: u as UserId, history, candidate: cand.item, behavior: cand.behavior };
        if u < spec.train_users {
            train.push(ex);
        } else {
            test_oracle.push(BinaryScore { score: p, label: cand.behavior == conversion });
            test.push(ex);
        }
    }
    Ok(RankingFixture { schema, tokenizer, train, test, test_oracle })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::split_dataset;
    use crate::eval::{evaluate, EvalTask};
    use crate::ranking::auroc;

    fn small() -> SyntheticSpec {
        SyntheticSpec { users: 300, ..SyntheticSpec::default() }
    }

    #[test]
    fn deterministic_files() {
        let c = generate_synthetic(&small()).unwrap();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        c.write(a.path()).unwrap();
        generate_synthetic(&small()).unwrap().write(b.path()).unwrap();
        for f in ["interactions.tsv", "features.tsv", "schema.toml", "truth.json"] {
            assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
        }
    }

    #[test]
    fn behavior_frequencies_within_three_sigma() {
        let spec = small();
        let c = generate_synthetic(&spec).unwrap();
        let n = c.dataset.interaction_count() as f64;
        let mut counts = [0f64; 3];
        for it in c.dataset.histories.iter().flatten() {
            counts[it.behavior as usize] += 1.0;
        }
        for (b, p) in spec.behavior_rates().into_iter().enumerate() {
            let sigma = (n * p * (1.0 - p)).sqrt();
            assert!((counts[b] - n * p).abs() <= 3.0 * sigma, "behavior {b}: {} vs {}", counts[b], n * p);
        }
    }

    #[test]
    fn sessions_survive_sessionization() {
        let spec = small();
        let c = generate_synthetic(&spec).unwrap();
        let split = split_dataset(&c.dataset).unwrap();
        assert!(split.excluded.is_empty());
        for u in &split.users {
            let n = u.train.len() + 2;
            assert!((spec.sessions.0..=spec.sessions.1).contains(&n));
        }
    }

    #[test]
    fn ideal_ranker_is_perfect() {
        let c = generate_synthetic(&small()).unwrap();
        let split = split_dataset(&c.dataset).unwrap();
        let report = evaluate(&IdealRanker { truth: &c.truth }, &split, &c.dataset.schema, &EvalTask::default(), None).unwrap();
        let row = &report.rows[0];
        assert!(row.users > 0);
        assert_eq!(row.ndcg_at(10), Some(1.0));
        assert_eq!(row.hr_at(10), Some(1.0));
    }

    #[test]
    fn infeasible_specs_rejected() {
        for spec in [
            SyntheticSpec { sessions: (2, 4), ..small() },
            SyntheticSpec { planted: (2, 9), ..small() },
            SyntheticSpec { affinity: 1.5, ..small() },
        ] {
            assert!(matches!(generate_synthetic(&spec), Err(Error::Config(_))));
        }
    }

    #[test]
    fn bayes_auroc_matches_oracle_sample() {
        let spec = RankingSpec { train_users: 10, test_users: 20_000, ..RankingSpec::default() };
        let f = generate_ranking_fixture(&spec).unwrap();
        let sample = auroc(&f.test_oracle).unwrap();
        assert!((sample - spec.bayes_auroc()).abs() < 0.01, "{sample} vs {}", spec.bayes_auroc());
        let even = RankingSpec { p_match: 1.0, p_other: 0.0, ..spec };
        assert_eq!(even.bayes_auroc(), 1.0);
    }
}
