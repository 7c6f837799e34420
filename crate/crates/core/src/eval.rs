//! Trie-constrained beam search, ranking metrics and the evaluation
//! harness.

use std::cmp::Ordering;
use std::collections::{BTreeSet, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::perturb_sessions;
use crate::data::{targets_for, BehaviorId, BehaviorSchema, ItemId, Session, SplitDataset, UserId, UserSplit};
use crate::error::{Error, Result};
use crate::model::sequence::continuation_of;
use crate::model::{tokenize_history, KvCache, Layout, Model, Provenance, Token, TokenSequence};
use crate::rng::derive_seed;
use crate::tokenizer::{IdKind, ItemTokenizer, NodeId, PrefixTrie};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    /// Condition on the target behavior only.
    Target,
    /// Evaluate every behavior type separately.
    Specific,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalTask {
    pub kind: TaskKind,
    /// Behavior name for the target task; ignored by the specific task.
    pub behavior: Option<String>,
    pub ks: Vec<usize>,
    pub beam: usize,
    pub top_n: usize,
}

impl Default for EvalTask {
    fn default() -> Self {
        Self { kind: TaskKind::Target, behavior: None, ks: vec![5, 10], beam: 20, top_n: 10 }
    }
}

impl EvalTask {
    pub fn validate(&self) -> Result<()> {
        if self.beam == 0 {
            return Err(Error::Config("eval beam must be at least 1".into()));
        }
        if self.top_n > self.beam {
            return Err(Error::Config(format!("eval top_n {} exceeds beam {}", self.top_n, self.beam)));
        }
        if self.ks.is_empty() || self.ks.iter().any(|&k| k == 0 || k > self.top_n) {
            return Err(Error::Config(format!("eval K values {:?} must lie in 1..={}", self.ks, self.top_n)));
        }
        Ok(())
    }

    /// Behaviors evaluated by this task.
    pub fn behaviors(&self, schema: &BehaviorSchema) -> Result<Vec<BehaviorId>> {
        match self.kind {
            TaskKind::Target => match &self.behavior {
                Some(name) => Ok(vec![schema.id(name)?]),
                None => Ok(vec![schema.target()]),
            },
            TaskKind::Specific => Ok((0..schema.len() as BehaviorId).collect()),
        }
    }
}

/// Items in rank order with their scores (summed token log-probabilities
/// for generated lists).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub items: Vec<(ItemId, f64)>,
}

impl RankedList {
    pub fn ids(&self) -> Vec<ItemId> {
        self.items.iter().map(|x| x.0).collect()
    }
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let lse = crate::model::ops::log_sum_exp(logits);
    logits.iter().map(|v| v - lse).collect()
}

/// Score descending, then code tuple ascending.
fn rank_order(a: (f64, &[u32]), b: (f64, &[u32])) -> Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1))
}

struct Hypothesis {
    codes: Vec<u32>,
    node: NodeId,
    score: f64,
    cache: KvCache,
    state: Vec<f64>,
    last: Token,
}

fn check_prompt(model: &Model, prompt: &TokenSequence, trie: &PrefixTrie) -> Result<Token> {
    if model.config().layout != Layout::Generative {
        return Err(Error::Config("beam search needs the generative layout".into()));
    }
    if trie.is_empty() {
        return Err(Error::Data("catalog trie is empty".into()));
    }
    if trie.depth() != model.config().sid_len {
        return Err(Error::Config(format!("trie depth {} differs from model sid_len {}", trie.depth(), model.config().sid_len)));
    }
    let last = *prompt.tokens.last().ok_or_else(|| Error::Shape("empty prompt".into()))?;
    if last.role != 0 {
        return Err(Error::Shape("prompt must end with a conditioning behavior token".into()));
    }
    Ok(last)
}

/// Beam search over exactly `l` code positions, each restricted to the
/// trie children of the hypothesis prefix. Hypotheses are ranked by summed
/// log-probability; ties go to the smaller code tuple.
pub fn constrained_beam_search(model: &Model, prompt: &TokenSequence, trie: &PrefixTrie, beam: usize, top_n: usize) -> Result<RankedList> {
    if beam == 0 {
        return Err(Error::Config("beam must be at least 1".into()));
    }
    let cond = check_prompt(model, prompt, trie)?;
    let cfg = model.config();
    let (prefix, state) = model.prefill(prompt)?;
    let mut hyps = vec![Hypothesis { codes: Vec::new(), node: PrefixTrie::ROOT, score: 0.0, cache: model.empty_cache(), state, last: cond }];
    for j in 1..=cfg.sid_len {
        let mut cands: Vec<(usize, u32, NodeId, f64, Vec<u32>)> = Vec::new();
        for (hi, h) in hyps.iter().enumerate() {
            let lp = log_softmax(&model.logits_from_state(&h.state));
            for &(code, node) in trie.children(h.node) {
                let mut codes = h.codes.clone();
                codes.push(code);
                cands.push((hi, code, node, h.score + lp[cfg.sid_token(j, code) as usize], codes));
            }
        }
        cands.sort_by(|a, b| rank_order((a.3, &a.4), (b.3, &b.4)));
        cands.truncate(beam);
        let mut next = Vec::with_capacity(cands.len());
        for (hi, code, node, score, codes) in cands {
            let parent = &hyps[hi];
            let tok = continuation_of(&parent.last, code, cfg)?;
            let (cache, state) = if j < cfg.sid_len {
                let mut cache = parent.cache.clone();
                let state = model.step(Some(&prefix), &mut cache, tok)?;
                (cache, state)
            } else {
                (KvCache::default(), Vec::new())
            };
            next.push(Hypothesis { codes, node, score, cache, state, last: tok });
        }
        hyps = next;
    }
    let mut items: Vec<(ItemId, f64)> = Vec::with_capacity(top_n);
    for h in hyps.iter().take(top_n) {
        let item = trie.item(h.node).ok_or_else(|| Error::Data(format!("code tuple {:?} is not a catalog item", h.codes)))?;
        items.push((item, h.score));
    }
    Ok(RankedList { items })
}

/// Scores every catalog item by its summed code log-probability after
/// `prompt`; full ranking in the beam-search order.
pub fn exhaustive_scores(model: &Model, prompt: &TokenSequence, trie: &PrefixTrie) -> Result<RankedList> {
    let cond = check_prompt(model, prompt, trie)?;
    let cfg = model.config();
    let (prefix, state) = model.prefill(prompt)?;
    let mut out: Vec<(f64, Vec<u32>, ItemId)> = Vec::with_capacity(trie.len());
    // Depth-first over the trie; each frame is (node, codes, score, cache, state, last token).
    let mut stack = vec![(PrefixTrie::ROOT, Vec::new(), 0.0, model.empty_cache(), state, cond)];
    while let Some((node, codes, score, cache, state, last)) = stack.pop() {
        let j = codes.len() + 1;
        let lp = log_softmax(&model.logits_from_state(&state));
        for &(code, child) in trie.children(node) {
            let s = score + lp[cfg.sid_token(j, code) as usize];
            let mut c = codes.clone();
            c.push(code);
            if j == cfg.sid_len {
                let item = trie.item(child).ok_or_else(|| Error::Data("trie leaf without item".into()))?;
                out.push((s, c, item));
            } else {
                let tok = continuation_of(&last, code, cfg)?;
                let mut cache = cache.clone();
                let st = model.step(Some(&prefix), &mut cache, tok)?;
                stack.push((child, c, s, cache, st, tok));
            }
        }
    }
    out.sort_by(|a, b| rank_order((a.0, &a.1), (b.0, &b.1)));
    Ok(RankedList { items: out.into_iter().map(|(s, _, i)| (i, s)).collect() })
}

fn hits(ranked: &[ItemId], targets: &BTreeSet<ItemId>, k: usize) -> usize {
    ranked.iter().take(k).filter(|i| targets.contains(i)).count()
}

/// 1 if any target is in the top `k`; `None` when there are no targets.
pub fn hr_at_k(ranked: &[ItemId], targets: &BTreeSet<ItemId>, k: usize) -> Option<f64> {
    (!targets.is_empty() && k > 0).then(|| if hits(ranked, targets, k) > 0 { 1.0 } else { 0.0 })
}

/// `|top-k ∩ T| / |T|`; `None` when there are no targets.
pub fn recall_at_k(ranked: &[ItemId], targets: &BTreeSet<ItemId>, k: usize) -> Option<f64> {
    (!targets.is_empty() && k > 0).then(|| hits(ranked, targets, k) as f64 / targets.len() as f64)
}

/// Binary-relevance NDCG with ideal DCG over `min(k, |T|)` hits.
pub fn ndcg_at_k(ranked: &[ItemId], targets: &BTreeSet<ItemId>, k: usize) -> Option<f64> {
    if targets.is_empty() || k == 0 {
        return None;
    }
    let dcg: f64 = ranked
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, i)| targets.contains(i))
        .map(|(r, _)| 1.0 / ((r + 2) as f64).log2())
        .sum();
    let idcg: f64 = (0..k.min(targets.len())).map(|r| 1.0 / ((r + 2) as f64).log2()).sum();
    Some(dcg / idcg)
}

/// Most recent distinct items, newest first.
pub fn rule_based_reference(history: &[Session], n: usize) -> Vec<ItemId> {
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(n);
    for it in history.iter().rev().flat_map(|s| s.interactions.iter().rev()) {
        if out.len() == n {
            break;
        }
        if seen.insert(it.item) {
            out.push(it.item);
        }
    }
    out
}

/// One user's evaluation request: visible history and the behavior to
/// condition on.
pub struct Query<'a> {
    pub user: UserId,
    pub history: &'a [Session],
    pub behavior: BehaviorId,
    pub top_n: usize,
}

pub struct Recommendation {
    pub ranked: Vec<ItemId>,
    /// Model input, when there is one, for the provenance audit.
    pub prompt: Option<TokenSequence>,
}

pub trait Recommender: Sync {
    fn recommend(&self, q: &Query) -> Result<Recommendation>;
}

/// The rule-based reference: most recently interacted distinct items.
pub struct RecentItems;

impl Recommender for RecentItems {
    fn recommend(&self, q: &Query) -> Result<Recommendation> {
        Ok(Recommendation { ranked: rule_based_reference(q.history, q.top_n), prompt: None })
    }
}

/// Beam-search generation from a trained model.
pub struct Generative<'a> {
    pub model: &'a Model,
    pub tokenizer: &'a ItemTokenizer,
    pub schema: &'a BehaviorSchema,
    pub beam: usize,
}

impl Generative<'_> {
    /// History truncated to leave room for the generated item, then the
    /// conditioning behavior token.
    pub fn prompt(&self, history: &[Session], behavior: BehaviorId) -> Result<TokenSequence> {
        let cfg = self.model.config();
        let budget = cfg.max_tokens - cfg.run_len();
        let mut seq = tokenize_history(history, self.schema, self.tokenizer, cfg, budget)?;
        seq.push_condition(behavior, self.schema, cfg);
        Ok(seq)
    }
}

impl Recommender for Generative<'_> {
    fn recommend(&self, q: &Query) -> Result<Recommendation> {
        let prompt = self.prompt(q.history, q.behavior)?;
        let ranked = constrained_beam_search(self.model, &prompt, self.tokenizer.trie(), self.beam, q.top_n)?.ids();
        Ok(Recommendation { ranked, prompt: Some(prompt) })
    }
}

/// Tokens of `prompt` that come from the test session or later, or prompt
/// tokens other than the final conditioning token.
pub fn leakage_violations(prompt: &TokenSequence, test_session: usize) -> usize {
    let n = prompt.len();
    prompt
        .tokens
        .iter()
        .enumerate()
        .filter(|(i, t)| match t.provenance {
            Provenance::History { session } => session as usize >= test_session,
            Provenance::Prompt => *i + 1 != n || t.role != 0,
        })
        .count()
}

/// Input perturbation applied to evaluation histories.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Perturbation {
    pub r: f64,
    pub drop_targets: bool,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub task: TaskKind,
    pub behavior: String,
    /// Users averaged over.
    pub users: usize,
    pub ks: Vec<usize>,
    pub hr: Vec<f64>,
    pub recall: Vec<f64>,
    pub ndcg: Vec<f64>,
}

impl MetricRow {
    pub fn ndcg_at(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|i| self.ndcg[i])
    }

    pub fn hr_at(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|i| self.hr[i])
    }

    pub fn recall_at(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|i| self.recall[i])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserRecord {
    pub user: UserId,
    pub behavior: String,
    pub ranked: Vec<ItemId>,
    pub targets: Vec<ItemId>,
    pub hr: Vec<f64>,
    pub recall: Vec<f64>,
    pub ndcg: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<MetricRow>,
    pub users: Vec<UserRecord>,
    pub leakage_violations: usize,
}

fn user_inputs(u: &UserSplit, behavior: BehaviorId, schema: &BehaviorSchema, perturbation: Option<&Perturbation>) -> Result<Option<(Vec<Session>, BTreeSet<ItemId>)>> {
    let targets = targets_for(&u.test, behavior);
    if targets.is_empty() {
        return Ok(None);
    }
    let history = u.history_before_test();
    let history = match perturbation {
        Some(p) => perturb_sessions(&history, p.r, p.drop_targets, &targets, schema, derive_seed(p.seed, u64::from(u.user), u64::from(behavior)))?,
        None => history,
    };
    Ok(Some((history, targets)))
}

/// Averages metrics over users whose test session contains each evaluated
/// behavior. Users are processed in parallel; reduction is in user order.
pub fn evaluate(
    rec: &dyn Recommender,
    split: &SplitDataset,
    schema: &BehaviorSchema,
    task: &EvalTask,
    perturbation: Option<&Perturbation>,
) -> Result<EvalReport> {
    task.validate()?;
    let mut rows = Vec::new();
    let mut users = Vec::new();
    let mut violations = 0;
    for b in task.behaviors(schema)? {
        let name = schema.name(b).to_string();
        let results = split
            .users
            .par_iter()
            .map(|u| -> Result<Option<(UserRecord, usize)>> {
                let Some((history, targets)) = user_inputs(u, b, schema, perturbation)? else { return Ok(None) };
                let r = rec.recommend(&Query { user: u.user, history: &history, behavior: b, top_n: task.top_n })?;
                let leaks = r.prompt.as_ref().map_or(0, |p| leakage_violations(p, u.test.index));
                let m = |f: fn(&[ItemId], &BTreeSet<ItemId>, usize) -> Option<f64>| -> Vec<f64> {
                    task.ks.iter().map(|&k| f(&r.ranked, &targets, k).unwrap_or(0.0)).collect()
                };
                Ok(Some((
                    UserRecord {
                        user: u.user,
                        behavior: name.clone(),
                        hr: m(hr_at_k),
                        recall: m(recall_at_k),
                        ndcg: m(ndcg_at_k),
                        ranked: r.ranked.clone(),
                        targets: targets.into_iter().collect(),
                    },
                    leaks,
                )))
            })
            .collect::<Result<Vec<_>>>()?;
        let evaluated: Vec<(UserRecord, usize)> = results.into_iter().flatten().collect();
        if evaluated.is_empty() {
            if task.kind == TaskKind::Target {
                return Err(Error::Data(format!("no users with `{name}` in their test session")));
            }
            continue;
        }
        let n = evaluated.len() as f64;
        let nk = task.ks.len();
        let (mut hr, mut recall, mut ndcg) = (vec![0.0; nk], vec![0.0; nk], vec![0.0; nk]);
        for (rec, leaks) in &evaluated {
            violations += leaks;
            for i in 0..nk {
                hr[i] += rec.hr[i];
                recall[i] += rec.recall[i];
                ndcg[i] += rec.ndcg[i];
            }
        }
        for v in [&mut hr, &mut recall, &mut ndcg] {
            v.iter_mut().for_each(|x| *x /= n);
        }
        rows.push(MetricRow { task: task.kind, behavior: name, users: evaluated.len(), ks: task.ks.clone(), hr, recall, ndcg });
        users.extend(evaluated.into_iter().map(|(r, _)| r));
    }
    if rows.is_empty() {
        return Err(Error::Data("no evaluable users for any behavior".into()));
    }
    Ok(EvalReport { rows, users, leakage_violations: violations })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    /// No cross-level behavior sublayer.
    Plain,
    BehaviorLayer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AblationCell {
    pub x: usize,
    pub architecture: Architecture,
    pub ids: IdKind,
}

impl AblationCell {
    fn key(&self) -> (usize, Architecture, u8) {
        (self.x, self.architecture, match self.ids {
            IdKind::Cid => 0,
            IdKind::Sid => 1,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub cell: AblationCell,
    pub rows: Vec<MetricRow>,
    pub error: Option<String>,
}

/// Every combination of the given axes.
pub fn ablation_grid(xs: &[usize], architectures: &[Architecture], ids: &[IdKind]) -> Vec<AblationCell> {
    let mut out = Vec::new();
    for &x in xs {
        for &architecture in architectures {
            for &id in ids {
                out.push(AblationCell { x, architecture, ids: id });
            }
        }
    }
    out
}

/// Runs `run` on every cell; a failing cell records its error and the grid
/// continues. Rows are sorted by `(x, architecture, ids)`.
pub fn run_ablation(cells: &[AblationCell], mut run: impl FnMut(&AblationCell) -> Result<Vec<MetricRow>>) -> Vec<AblationRow> {
    let mut out: Vec<AblationRow> = cells
        .iter()
        .map(|c| match run(c) {
            Ok(rows) => AblationRow { cell: *c, rows, error: None },
            Err(e) => AblationRow { cell: *c, rows: Vec::new(), error: Some(e.to_string()) },
        })
        .collect();
    out.sort_by_key(|r| r.cell.key());
    out
}
