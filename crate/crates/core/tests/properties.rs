use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;

use hiergen::augment::{augment_once, build_augmented_trainset, drop_count, AugmentationPlan};
use hiergen::data::{duplication_ratio, sessionize, split_leave_one_session_out, BehaviorSchema, Interaction, SessionRule, SplitDataset};
use hiergen::eval::{constrained_beam_search, hr_at_k, ndcg_at_k, recall_at_k};
use hiergen::model::{build_behavior_mask, build_causal_mask, build_session_mask_and_positions, Layout, Model, ModelConfig, Provenance, TokenSequence};
use hiergen::ranking::{auroc, behavior_distribution, BinaryScore};
use hiergen::tokenizer::{assign_chunked_ids, chunked_len, IdKind, ItemTokenizer};
use hiergen::train::{lr_at, AdamW, TrainConfig};

fn schema() -> BehaviorSchema {
    BehaviorSchema::short_video()
}

/// Sorted history for one user from (item, behavior, gap) triples.
fn history(steps: &[(u32, u16, i64)]) -> Vec<Interaction> {
    let mut t = 1_000_000;
    steps
        .iter()
        .map(|&(item, behavior, gap)| {
            t += gap;
            Interaction { user: 0, item, behavior, timestamp: t }
        })
        .collect()
}

fn steps(max: usize) -> impl Strategy<Value = Vec<(u32, u16, i64)>> {
    // Gaps mix same-second ties, in-session gaps and session breaks.
    let gap = prop_oneof![Just(0i64), 1i64..900, 901i64..200_000];
    prop::collection::vec((0u32..40, 0u16..3, gap), 1..max)
}

fn rule() -> impl Strategy<Value = SessionRule> {
    prop_oneof![(1i64..3600).prop_map(|seconds| SessionRule::Gap { seconds }), Just(SessionRule::CalendarDay)]
}

fn random_sequence(cfg: &ModelConfig, spec: &[(u16, bool)], codes_seed: u32) -> TokenSequence {
    let mut seq = TokenSequence::default();
    let mut session = 0;
    for (i, &(b, new_session)) in spec.iter().enumerate() {
        if i > 0 && new_session {
            session += 1;
        }
        let codes: Vec<u32> = (0..cfg.sid_len).map(|j| (codes_seed + (i * 5 + j) as u32) % cfg.codebook_size as u32).collect();
        seq.push_item(cfg, &codes, b, u32::from(b) + 1, session, Provenance::History { session });
    }
    seq
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn sessionize_partitions_the_history(s in steps(60), rule in rule()) {
        let h = history(&s);
        let sessions = sessionize(&h, rule).unwrap();
        let flat: Vec<Interaction> = sessions.iter().flat_map(|s| s.interactions.clone()).collect();
        prop_assert_eq!(flat, h);
        for (i, s) in sessions.iter().enumerate() {
            prop_assert_eq!(s.index, i);
            prop_assert!(!s.is_empty());
        }
        // Equal timestamps never straddle a boundary.
        for w in sessions.windows(2) {
            prop_assert!(w[0].interactions.last().unwrap().timestamp < w[1].interactions[0].timestamp);
        }
    }

    #[test]
    fn split_is_temporally_safe(s in steps(60), rule in rule()) {
        let sessions = sessionize(&history(&s), rule).unwrap();
        let n = sessions.len();
        match split_leave_one_session_out(0, sessions) {
            None => prop_assert!(n < 3),
            Some(split) => {
                let train_max = split.train_interactions().iter().map(|i| i.timestamp).max().unwrap();
                let val_min = split.val.interactions.iter().map(|i| i.timestamp).min().unwrap();
                let val_max = split.val.interactions.iter().map(|i| i.timestamp).max().unwrap();
                let test_min = split.test.interactions.iter().map(|i| i.timestamp).min().unwrap();
                prop_assert!(train_max <= val_min);
                prop_assert!(val_max <= test_min);
            }
        }
    }

    #[test]
    fn duplication_ratio_is_nondecreasing_in_k(users in prop::collection::vec(steps(40), 1..6), filter in any::<bool>()) {
        let mut split = SplitDataset::default();
        for (u, s) in users.iter().enumerate() {
            let sessions = sessionize(&history(s), SessionRule::SHORT_VIDEO).unwrap();
            if let Some(x) = split_leave_one_session_out(u as u32, sessions) {
                split.users.push(x);
            }
        }
        let mut prev = 0.0;
        for k in 1..12 {
            match duplication_ratio(&split, &schema(), k, filter).unwrap() {
                Some(r) => {
                    prop_assert!((0.0..=1.0).contains(&r));
                    prop_assert!(r >= prev);
                    prev = r;
                }
                None => break,
            }
        }
    }

    #[test]
    fn augmentation_keeps_order_and_exact_counts(s in steps(80), i in 1usize..10, seed in any::<u64>()) {
        let schema = schema();
        let h = history(&s);
        let r = i as f64 / 10.0;
        let out = augment_once(&h, r, &schema, seed).unwrap();
        // Survivors form a subsequence of the input.
        let mut it = h.iter();
        for x in &out {
            prop_assert!(it.any(|y| y == x));
        }
        for b in 0..schema.len() as u16 {
            let n = h.iter().filter(|x| x.behavior == b).count();
            let kept = out.iter().filter(|x| x.behavior == b).count();
            let expected = if b == schema.target() { 0 } else { n * i / (10 * schema.level(b) as usize) };
            prop_assert_eq!(n - kept, expected);
        }
        prop_assert_eq!(augment_once(&h, r, &schema, seed).unwrap(), out);
    }

    #[test]
    fn drop_count_is_nonincreasing_in_level(n in 0usize..500, i in 0usize..20) {
        let r = i as f64 / 20.0;
        for level in 1..6 {
            prop_assert!(drop_count(n, r, level + 1) <= drop_count(n, r, level));
        }
    }

    #[test]
    fn augmented_trainset_is_deterministic_and_keeps_originals(users in prop::collection::vec(steps(30), 1..5), x in 0usize..5, seed in any::<u64>()) {
        let train: Vec<(u32, Vec<_>)> = users
            .iter()
            .enumerate()
            .map(|(u, s)| (u as u32, sessionize(&history(s), SessionRule::SHORT_VIDEO).unwrap()))
            .collect();
        let plan = AugmentationPlan::new(x, seed);
        let a = build_augmented_trainset(&train, &plan, &schema()).unwrap();
        prop_assert_eq!(a.len(), train.len() * (x + 1));
        for (orig, (u, sessions)) in a.iter().zip(&train) {
            prop_assert_eq!(orig.fold, 0);
            prop_assert_eq!(orig.user, *u);
            prop_assert_eq!(&orig.sessions, sessions);
        }
        prop_assert_eq!(build_augmented_trainset(&train, &plan, &schema()).unwrap(), a);
        let ratios = plan.ratios();
        prop_assert!(ratios.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(ratios.iter().all(|&r| r > 0.0 && r < 1.0));
    }

    #[test]
    fn chunked_ids_are_balanced_and_bijective(counts in prop::collection::vec(0u64..50, 1..400), k in 2usize..12) {
        let codes = assign_chunked_ids(&counts, k).unwrap();
        let len = chunked_len(counts.len(), k);
        prop_assert!(codes.iter().all(|c| c.len() == len));
        let unique: BTreeSet<&Vec<u32>> = codes.iter().collect();
        prop_assert_eq!(unique.len(), codes.len());
        let mut buckets: BTreeMap<u32, usize> = BTreeMap::new();
        for c in &codes {
            *buckets.entry(c[0]).or_default() += 1;
        }
        let max = *buckets.values().max().unwrap();
        prop_assert!(max <= counts.len().div_ceil(k));

        let tok = ItemTokenizer::new(IdKind::Cid, k, codes.clone()).unwrap();
        let mut paths = tok.trie().paths();
        paths.sort();
        let mut expected: Vec<(Vec<u32>, u32)> = codes.into_iter().enumerate().map(|(i, c)| (c, i as u32)).collect();
        expected.sort();
        prop_assert_eq!(paths, expected);
    }

    #[test]
    fn metrics_are_bounded_and_monotone(ranked in prop::collection::btree_set(0u32..60, 0..30), targets in prop::collection::btree_set(0u32..60, 1..8), seed in any::<u64>()) {
        // Shuffle the ranked set deterministically.
        let mut ranked: Vec<u32> = ranked.into_iter().collect();
        ranked.sort_by_key(|&i| (u64::from(i)).wrapping_mul(seed | 1).rotate_left(17));
        let mut prev = (0.0, 0.0, 0.0);
        for k in 1..=ranked.len().max(1) + 2 {
            let hr = hr_at_k(&ranked, &targets, k).unwrap();
            let rc = recall_at_k(&ranked, &targets, k).unwrap();
            let nd = ndcg_at_k(&ranked, &targets, k).unwrap();
            for v in [hr, rc, nd] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            prop_assert!(hr >= rc);
            prop_assert!(hr >= prev.0 && rc >= prev.1);
            // The ideal DCG grows with K while |T| > K, so NDCG is only
            // monotone for a single target.
            if targets.len() == 1 {
                prop_assert!(nd >= prev.2 - 1e-15);
            }
            prev = (hr, rc, nd);
        }
    }

    #[test]
    fn auroc_is_invariant_under_monotone_maps(raw in prop::collection::vec((0u32..40, any::<bool>()), 2..200), a in 0.1f64..5.0, b in -3.0f64..3.0) {
        prop_assume!(raw.iter().any(|x| x.1) && raw.iter().any(|x| !x.1));
        let scores: Vec<BinaryScore> = raw.iter().map(|&(s, label)| BinaryScore { score: f64::from(s) / 7.0, label }).collect();
        let mapped: Vec<BinaryScore> = scores.iter().map(|s| BinaryScore { score: (a * s.score + b).exp() + s.score.powi(3), label: s.label }).collect();
        let x = auroc(&scores).unwrap();
        prop_assert!((x - auroc(&mapped).unwrap()).abs() < 1e-12);

        let (pos, neg): (Vec<&BinaryScore>, Vec<&BinaryScore>) = scores.iter().partition(|s| s.label);
        let mut wins = 0.0;
        for p in &pos {
            for n in &neg {
                wins += if p.score > n.score { 1.0 } else if p.score == n.score { 0.5 } else { 0.0 };
            }
        }
        prop_assert!((x - wins / (pos.len() * neg.len()) as f64).abs() < 1e-9);
    }

    #[test]
    fn lr_schedule_is_continuous_and_bounded(total in 10usize..5000, warm in 0.0f64..0.5, base in 1e-5f64..1e-2) {
        let cfg = TrainConfig { base_lr: base, min_lr: base * 0.01, warmup_fraction: warm, ..TrainConfig::default() };
        let w = (warm * total as f64).floor() as usize;
        if w > 0 {
            let left = base * (w as f64 - 1e-12) / w as f64;
            prop_assert!((lr_at(w, total, &cfg) - left).abs() < 1e-12);
        }
        for step in 0..=total {
            let lr = lr_at(step, total, &cfg);
            prop_assert!(lr >= 0.0 && lr <= base + 1e-15);
            if step > w {
                prop_assert!(lr <= lr_at(step - 1, total, &cfg) + 1e-15);
                prop_assert!(lr >= cfg.min_lr - 1e-15);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn masks_are_subsets_of_causal(spec in prop::collection::vec((0u16..3, any::<bool>()), 1..24), seed in 0u32..50) {
        let cfg = ModelConfig::desk(2, 8, 3);
        let seq = random_sequence(&cfg, &spec, seed);
        let causal = build_causal_mask(&seq);
        prop_assert!(build_behavior_mask(&seq).is_subset_of(&causal));
        let (session, positions) = build_session_mask_and_positions(&seq);
        prop_assert!(session.is_subset_of(&causal));
        prop_assert_eq!(positions, seq.session_index());
    }

    #[test]
    fn decay_with_zero_gradient_is_multiplicative(seed in 0u64..1000, lr in 1e-4f64..1e-1, wd in 0.0f64..0.5, steps in 1usize..4) {
        let model = Model::init(ModelConfig { layers: 1, ..ModelConfig::desk(2, 4, 2) }, seed).unwrap();
        let cfg = TrainConfig { weight_decay: wd, ..TrainConfig::default() };
        let mut params = model.params().clone();
        let zero = params.zeros_like();
        let mut opt = AdamW::new(&params, &cfg);
        for _ in 0..steps {
            opt.step(&mut params, &zero, lr);
        }
        let factor = (1.0 - lr * wd).powi(steps as i32);
        for (before, after) in model.params().tensors.iter().zip(&params.tensors) {
            for (x, y) in before.data.iter().zip(&after.data) {
                let expected = if before.is_matrix() { x * factor } else { *x };
                prop_assert!((y - expected).abs() <= 1e-12 * x.abs().max(1.0));
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn beam_output_is_valid_and_sorted(seed in 0u64..10_000, n_items in 5usize..60, beam in 1usize..12, top in 1usize..12) {
        let cfg = ModelConfig { layers: 1, max_tokens: 48, ..ModelConfig::desk(2, 8, 3) };
        let model = Model::init(cfg.clone(), seed).unwrap();
        let codes: Vec<Vec<u32>> = (0..n_items as u32).map(|i| vec![i % 8, (i / 8 + i) % 8]).collect();
        let unique: BTreeSet<&Vec<u32>> = codes.iter().collect();
        prop_assume!(unique.len() == codes.len());
        let tok = ItemTokenizer::new(IdKind::Sid, 8, codes).unwrap();
        let mut prompt = random_sequence(&cfg, &[(0, false), (1, false), (2, true)], seed as u32);
        prompt.push_condition(2, &schema(), &cfg);
        let top = top.min(beam);
        let ranked = constrained_beam_search(&model, &prompt, tok.trie(), beam, top).unwrap();
        prop_assert!(ranked.items.len() <= top);
        prop_assert_eq!(ranked.items.len(), top.min(n_items));
        let ids: BTreeSet<u32> = ranked.ids().into_iter().collect();
        prop_assert_eq!(ids.len(), ranked.items.len());
        prop_assert!(ids.iter().all(|&i| (i as usize) < n_items));
        prop_assert!(ranked.items.windows(2).all(|w| w[0].1 >= w[1].1));
        prop_assert!(ranked.items.iter().all(|x| x.1.is_finite() && x.1 <= 0.0));
    }

    #[test]
    fn behavior_head_gives_mask_no_mass(logits in prop::collection::vec(-20.0f64..20.0, 2..8)) {
        let nb = logits.len() - 1;
        let p = behavior_distribution(&logits, nb);
        prop_assert_eq!(p.len(), nb);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&x| x > 0.0 && x.is_finite()));
    }
}

#[test]
fn ranking_vocabularies_are_disjoint() {
    for (l, c, nb) in [(2, 8, 2), (3, 16, 3), (4, 64, 5)] {
        let cfg = ModelConfig { layout: Layout::Ranking, ..ModelConfig::desk(l, c, nb) };
        let mask = cfg.mask_token().unwrap();
        assert_eq!(mask as usize, nb);
        for id in 0..cfg.vocab_size() as u32 {
            assert!(!(cfg.is_behavior_token(id) && cfg.sid_code(id).is_some()), "{id} in both vocabularies");
            assert!(cfg.is_behavior_token(id) || cfg.sid_code(id).is_some(), "{id} in neither vocabulary");
        }
    }
}
