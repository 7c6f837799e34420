//! Ranking variant: items precede their behavior, SID and behavior
//! vocabularies are separate, and a `[MASK]` behavior slot on the candidate
//! is scored by a dedicated behavior head.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{BehaviorId, BehaviorSchema, ItemId, Session, UserId};
use crate::error::{Error, Result};
use crate::model::ops::log_sum_exp;
use crate::model::{tokenize_history, Layout, Model, ModelConfig, TokenSequence};
use crate::tokenizer::ItemTokenizer;
use crate::train::Sample;

fn require_ranking(cfg: &ModelConfig) -> Result<u32> {
    if cfg.layout != Layout::Ranking {
        return Err(Error::Config("model is not in the ranking layout".into()));
    }
    Ok(cfg.mask_token().expect("ranking layout has a mask token"))
}

/// History items as SIDs-then-behavior, followed by the candidate with a
/// `[MASK]` behavior slot. History is truncated to fit `max_tokens`.
pub fn restructure_for_ranking(
    history: &[Session],
    candidate: ItemId,
    schema: &BehaviorSchema,
    tokenizer: &ItemTokenizer,
    cfg: &ModelConfig,
) -> Result<TokenSequence> {
    require_ranking(cfg)?;
    let codes = tokenizer.codes(candidate).ok_or_else(|| Error::Data(format!("candidate item {candidate} has no code tuple")))?;
    let budget = cfg.max_tokens - cfg.run_len();
    let mut seq = tokenize_history(history, schema, tokenizer, cfg, budget)?;
    seq.push_candidate(codes, schema, cfg)?;
    Ok(seq)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HeadKind {
    Item,
    Behavior,
}

/// Logits of one position from the head that predicts its next token.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadRow {
    pub position: usize,
    pub head: HeadKind,
    /// `sid_vocab` wide for the item head, `num_behaviors + 1` for the
    /// behavior head (the last column is `[MASK]`).
    pub logits: Vec<f64>,
}

/// Scores each position with the head matching its successor: the last SID
/// of an item is followed by a behavior, everything else by an SID. The
/// final position is the candidate's `[MASK]` slot and uses the behavior
/// head.
pub fn dual_head_forward(model: &Model, seq: &TokenSequence) -> Result<Vec<HeadRow>> {
    let cfg = model.config();
    require_ranking(cfg)?;
    let logits = model.forward_dense(seq)?;
    let nb = cfg.behavior_vocab();
    let last = seq.len() - 1;
    Ok(seq
        .tokens
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let row = logits.row(i);
            let behavior = t.role as usize == cfg.sid_len || (i == last && t.role == 0);
            if behavior {
                HeadRow { position: i, head: HeadKind::Behavior, logits: row[..nb].to_vec() }
            } else {
                HeadRow { position: i, head: HeadKind::Item, logits: row[nb..].to_vec() }
            }
        })
        .collect())
}

/// Softmax over the real behaviors (`[MASK]` excluded) of behavior-head
/// logits.
pub fn behavior_distribution(logits: &[f64], num_behaviors: usize) -> Vec<f64> {
    let real = &logits[..num_behaviors];
    let lse = log_sum_exp(real);
    real.iter().map(|v| (v - lse).exp()).collect()
}

fn check_masked(cfg: &ModelConfig, seq: &TokenSequence, behavior: BehaviorId) -> Result<()> {
    let mask = require_ranking(cfg)?;
    if seq.tokens.last().map(|t| t.id) != Some(mask) {
        return Err(Error::Shape("ranking sequence must end in [MASK]".into()));
    }
    if behavior as usize >= cfg.num_behaviors {
        return Err(Error::Config(format!("behavior {behavior} is not in the vocabulary")));
    }
    Ok(())
}

/// Probability of `behavior` at the candidate's `[MASK]` slot.
pub fn predict_conversion(model: &Model, seq: &TokenSequence, behavior: BehaviorId) -> Result<f64> {
    let cfg = model.config();
    check_masked(cfg, seq, behavior)?;
    let (_, state) = model.prefill(seq)?;
    let logits = model.logits_from_state(&state);
    Ok(behavior_distribution(&logits[..cfg.behavior_vocab()], cfg.num_behaviors)[behavior as usize])
}

/// Scores several candidates after one shared history; the history is run
/// once and each candidate continues from its cache. Agrees bit-for-bit with
/// [`predict_conversion`] on the concatenated sequence.
pub fn score_candidates(
    model: &Model,
    history: &TokenSequence,
    candidates: &[&[u32]],
    schema: &BehaviorSchema,
    behavior: BehaviorId,
) -> Result<Vec<f64>> {
    let cfg = model.config();
    let mask = require_ranking(cfg)?;
    if behavior as usize >= cfg.num_behaviors {
        return Err(Error::Config(format!("behavior {behavior} is not in the vocabulary")));
    }
    if history.tokens.iter().any(|t| t.id == mask) {
        return Err(Error::Shape("history already holds a [MASK] slot".into()));
    }
    let prefix = if history.is_empty() { None } else { Some(model.prefill(history)?.0) };
    candidates
        .iter()
        .map(|codes| {
            let mut seq = history.clone();
            seq.push_candidate(codes, schema, cfg)?;
            seq.validate(cfg)?;
            let mut cache = model.empty_cache();
            let mut state = Vec::new();
            for tok in &seq.tokens[history.len()..] {
                state = model.step(prefix.as_ref(), &mut cache, *tok)?;
            }
            let logits = model.logits_from_state(&state);
            Ok(behavior_distribution(&logits[..cfg.behavior_vocab()], cfg.num_behaviors)[behavior as usize])
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinaryScore {
    pub score: f64,
    pub label: bool,
}

/// Probability that a random positive outscores a random negative, ties
/// counted half, from average ranks.
pub fn auroc(scores: &[BinaryScore]) -> Result<f64> {
    if let Some(s) = scores.iter().find(|s| !s.score.is_finite()) {
        return Err(Error::Numeric(format!("non-finite score {}", s.score)));
    }
    let pos = scores.iter().filter(|s| s.label).count();
    let neg = scores.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Data("AUROC needs both positive and negative labels".into()));
    }
    let mut order: Vec<&BinaryScore> = scores.iter().collect();
    order.sort_by(|a, b| a.score.partial_cmp(&b.score).unwrap_or(Ordering::Equal));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && order[j].score == order[i].score {
            j += 1;
        }
        // Ranks i+1..=j share their mean.
        let mean_rank = (i + 1 + j) as f64 / 2.0;
        rank_sum += mean_rank * order[i..j].iter().filter(|s| s.label).count() as f64;
        i = j;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// A candidate with the observed behavior it received.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingExample {
    pub user: UserId,
    pub history: Vec<Session>,
    pub candidate: ItemId,
    pub behavior: BehaviorId,
}

/// One example per distinct item of `session`, labelled with the highest
/// level behavior it received, against the sessions before it.
pub fn session_examples(user: UserId, history: &[Session], session: &Session, schema: &BehaviorSchema) -> Vec<RankingExample> {
    let mut best: BTreeMap<ItemId, BehaviorId> = BTreeMap::new();
    for it in &session.interactions {
        best.entry(it.item)
            .and_modify(|b| {
                if schema.level(it.behavior) > schema.level(*b) {
                    *b = it.behavior;
                }
            })
            .or_insert(it.behavior);
    }
    best.into_iter()
        .map(|(candidate, behavior)| RankingExample { user, history: history.to_vec(), candidate, behavior })
        .collect()
}

/// Training sequence for one example: every history position predicts its
/// successor with the matching head, and the `[MASK]` slot predicts the
/// candidate's behavior.
pub fn ranking_sample(ex: &RankingExample, schema: &BehaviorSchema, tokenizer: &ItemTokenizer, cfg: &ModelConfig) -> Result<Sample> {
    let seq = restructure_for_ranking(&ex.history, ex.candidate, schema, tokenizer, cfg)?;
    let n = seq.len();
    let mut targets: Vec<Option<u32>> = seq.tokens[1..].iter().map(|t| Some(t.id)).collect();
    targets[n - 2] = None;
    targets.push(Some(cfg.behavior_token(ex.behavior)));
    Ok(Sample { seq, targets })
}

pub fn ranking_samples(examples: &[RankingExample], schema: &BehaviorSchema, tokenizer: &ItemTokenizer, cfg: &ModelConfig) -> Result<Vec<Sample>> {
    examples.iter().map(|ex| ranking_sample(ex, schema, tokenizer, cfg)).collect()
}

/// Model scores for `behavior` on each example, paired with whether the
/// example received it.
pub fn score_examples(
    model: &Model,
    examples: &[RankingExample],
    schema: &BehaviorSchema,
    tokenizer: &ItemTokenizer,
    behavior: BehaviorId,
) -> Result<Vec<BinaryScore>> {
    use rayon::prelude::*;
    examples
        .par_iter()
        .map(|ex| {
            let seq = restructure_for_ranking(&ex.history, ex.candidate, schema, tokenizer, model.config())?;
            Ok(BinaryScore { score: predict_conversion(model, &seq, behavior)?, label: ex.behavior == behavior })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Interaction;
    use crate::tokenizer::IdKind;

    fn fixture() -> (BehaviorSchema, ItemTokenizer, ModelConfig) {
        let codes: Vec<Vec<u32>> = (0..12u32).map(|i| vec![i % 4, i / 4]).collect();
        let tok = ItemTokenizer::new(IdKind::Sid, 4, codes).unwrap();
        let cfg = ModelConfig { layout: Layout::Ranking, max_tokens: 48, ..ModelConfig::desk(2, 4, 2) };
        (BehaviorSchema::exposure_conversion(), tok, cfg)
    }

    fn session(index: usize, items: &[(u32, u16)]) -> Session {
        let interactions = items
            .iter()
            .enumerate()
            .map(|(k, &(item, behavior))| Interaction { user: 0, item, behavior, timestamp: (index * 10_000 + k) as i64 })
            .collect();
        Session { index, interactions }
    }

    #[test]
    fn layout_of_two_item_history() {
        let (schema, tok, cfg) = fixture();
        let seq = restructure_for_ranking(&[session(0, &[(1, 0), (2, 1)])], 3, &schema, &tok, &cfg).unwrap();
        assert_eq!(seq.roles(), vec![1, 2, 0, 1, 2, 0, 1, 2, 0]);
        let mask = cfg.mask_token().unwrap();
        assert_eq!(seq.ids().iter().filter(|&&t| t == mask).count(), 1);
        assert_eq!(*seq.ids().last().unwrap(), mask);
        assert_eq!(seq.levels()[6..], [2, 2, 2]);
    }

    #[test]
    fn empty_history_is_candidate_only() {
        let (schema, tok, cfg) = fixture();
        let seq = restructure_for_ranking(&[], 5, &schema, &tok, &cfg).unwrap();
        assert_eq!(seq.len(), 3);
        assert!(restructure_for_ranking(&[], 99, &schema, &tok, &cfg).is_err());
    }

    #[test]
    fn vocabularies_are_disjoint() {
        let (_, _, cfg) = fixture();
        for id in 0..cfg.vocab_size() as u32 {
            assert_ne!(cfg.is_behavior_token(id), cfg.sid_code(id).is_some());
        }
    }

    #[test]
    fn head_widths_and_routing() {
        let (schema, tok, cfg) = fixture();
        let m = Model::init(cfg.clone(), 3).unwrap();
        let seq = restructure_for_ranking(&[session(0, &[(1, 0), (2, 1)])], 3, &schema, &tok, &cfg).unwrap();
        let rows = dual_head_forward(&m, &seq).unwrap();
        let heads: Vec<HeadKind> = rows.iter().map(|r| r.head).collect();
        use HeadKind::*;
        assert_eq!(heads, vec![Item, Behavior, Item, Item, Behavior, Item, Item, Behavior, Behavior]);
        for r in &rows {
            let w = if r.head == Behavior { 3 } else { 8 };
            assert_eq!(r.logits.len(), w);
        }
    }

    #[test]
    fn head_perturbation_is_local() {
        let (schema, tok, cfg) = fixture();
        let base = Model::init(cfg.clone(), 4).unwrap();
        let seq = restructure_for_ranking(&[session(0, &[(1, 0), (2, 1)])], 3, &schema, &tok, &cfg).unwrap();
        let r0 = dual_head_forward(&base, &seq).unwrap();
        let changed = |m: &Model| -> (bool, bool) {
            let r1 = dual_head_forward(m, &seq).unwrap();
            let diff = |h| r0.iter().zip(&r1).filter(|(a, _)| a.head == h).any(|(a, b)| a.logits != b.logits);
            (diff(HeadKind::Item), diff(HeadKind::Behavior))
        };
        let bump = |name: &str| {
            let mut m = base.clone();
            let i = m.params().tensors.iter().position(|t| t.name == name).unwrap();
            m.params_mut().get_mut(i).iter_mut().for_each(|v| *v += 0.1);
            m
        };
        assert_eq!(changed(&bump("item_head")), (true, false));
        assert_eq!(changed(&bump("behavior_head")), (false, true));
        assert_eq!(changed(&bump("layers.0.attn.wv")), (true, true));
    }

    #[test]
    fn mask_excluded_from_distribution() {
        let p = behavior_distribution(&[0.0, 0.0, 100.0], 2);
        assert_eq!(p, vec![0.5, 0.5]);
        let (schema, tok, cfg) = fixture();
        let m = Model::init(cfg.clone(), 5).unwrap();
        let seq = restructure_for_ranking(&[session(0, &[(1, 0)])], 3, &schema, &tok, &cfg).unwrap();
        let a = predict_conversion(&m, &seq, 1).unwrap();
        let b = predict_conversion(&m, &seq, 0).unwrap();
        assert!((a + b - 1.0).abs() < 1e-12);
        assert!(predict_conversion(&m, &seq, 2).is_err());
        let mut unmasked = seq.clone();
        unmasked.tokens.truncate(3);
        assert!(predict_conversion(&m, &unmasked, 1).is_err());
    }

    #[test]
    fn batched_scoring_is_bitwise_equal() {
        let (schema, tok, cfg) = fixture();
        let m = Model::init(cfg.clone(), 6).unwrap();
        let history = [session(0, &[(1, 0), (4, 1)]), session(1, &[(7, 0)])];
        let prefix = tokenize_history(&history, &schema, &tok, &cfg, cfg.max_tokens - cfg.run_len()).unwrap();
        let cands: Vec<u32> = vec![0, 5, 11];
        let codes: Vec<&[u32]> = cands.iter().map(|&c| tok.codes(c).unwrap()).collect();
        let batched = score_candidates(&m, &prefix, &codes, &schema, 1).unwrap();
        for (i, &c) in cands.iter().enumerate() {
            let seq = restructure_for_ranking(&history, c, &schema, &tok, &cfg).unwrap();
            assert_eq!(batched[i].to_bits(), predict_conversion(&m, &seq, 1).unwrap().to_bits());
        }
    }

    fn bs(scores: &[f64], labels: &[bool]) -> Vec<BinaryScore> {
        scores.iter().zip(labels).map(|(&score, &label)| BinaryScore { score, label }).collect()
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&bs(&[0.9, 0.4, 0.6], &[true, true, false])).unwrap(), 0.5);
        assert_eq!(auroc(&bs(&[0.9, 0.8, 0.1], &[true, true, false])).unwrap(), 1.0);
        assert_eq!(auroc(&bs(&[0.3; 4], &[true, false, true, false])).unwrap(), 0.5);
        assert!(auroc(&bs(&[0.3, 0.4], &[true, true])).is_err());
        assert!(auroc(&bs(&[f64::NAN, 0.4], &[true, false])).is_err());
    }

    #[test]
    fn examples_take_highest_behavior() {
        let schema = BehaviorSchema::exposure_conversion();
        let s = session(2, &[(5, 0), (6, 0), (5, 1), (7, 1)]);
        let ex = session_examples(0, &[], &s, &schema);
        let got: Vec<(u32, u16)> = ex.iter().map(|e| (e.candidate, e.behavior)).collect();
        assert_eq!(got, vec![(5, 1), (6, 0), (7, 1)]);
    }

    #[test]
    fn sample_targets_skip_mask() {
        let (schema, tok, cfg) = fixture();
        let ex = RankingExample { user: 0, history: vec![session(0, &[(1, 0)])], candidate: 2, behavior: 1 };
        let s = ranking_sample(&ex, &schema, &tok, &cfg).unwrap();
        assert_eq!(s.targets.len(), 6);
        assert_eq!(s.targets[4], None);
        assert_eq!(s.targets[5], Some(1));
        assert_eq!(s.targets[1], Some(0));
        let m = Model::init(cfg, 1).unwrap();
        assert!(m.sequence_loss(&s.seq, &s.targets).unwrap().count == 5);
    }
}
