use rand::Rng as _;

use super::*;
use crate::rng;

/// Random history: levels drawn from `1..=levels`, nondecreasing sessions.
pub(crate) fn random_sequence(cfg: &ModelConfig, items: usize, levels: u32, seed: u64) -> TokenSequence {
    let mut r = rng::seeded(seed);
    let mut seq = TokenSequence::default();
    let mut session = 0;
    for i in 0..items {
        if i > 0 && r.gen_bool(0.3) {
            session += 1;
        }
        let codes: Vec<u32> = (0..cfg.sid_len).map(|_| r.gen_range(0..cfg.codebook_size as u32)).collect();
        let behavior = r.gen_range(0..cfg.num_behaviors as u16);
        let level = (u32::from(behavior) % levels) + 1;
        seq.push_item(cfg, &codes, behavior, level, session, Provenance::History { session });
    }
    seq
}

/// Items with the given behaviors (level = behavior + 1) and random codes.
pub(crate) fn patterned_sequence(cfg: &ModelConfig, behaviors: &[u16], seed: u64) -> TokenSequence {
    let mut r = rng::seeded(seed);
    let mut seq = TokenSequence::default();
    for (i, &b) in behaviors.iter().enumerate() {
        let codes: Vec<u32> = (0..cfg.sid_len).map(|_| r.gen_range(0..cfg.codebook_size as u32)).collect();
        let session = (i / 2) as u32;
        seq.push_item(cfg, &codes, b, u32::from(b) + 1, session, Provenance::History { session });
    }
    seq
}

fn next_token_targets(seq: &TokenSequence) -> Vec<Option<u32>> {
    let mut t: Vec<Option<u32>> = seq.tokens[1..].iter().map(|t| Some(t.id)).collect();
    t.push(None);
    t
}

fn gradcheck_cfg() -> ModelConfig {
    ModelConfig { dim: 16, inner_dim: 24, heads: 2, head_dim: 8, layers: 2, ..ModelConfig::desk(3, 16, 3) }
}

/// Per-tensor relative error `|g - fd| / max(|g|, |fd|)` over sampled
/// entries (every entry when `samples` is `None`).
pub(crate) fn gradient_errors(model: &Model, seq: &TokenSequence, targets: &[Option<u32>], samples: Option<usize>) -> Vec<(String, f64, f64)> {
    let mut grads = model.params().zeros_like();
    model.sequence_loss_grad(seq, targets, &mut grads).unwrap();
    let mut probe = model.clone();
    let h = 1e-5;
    let mut out = Vec::new();
    for ti in 0..model.params().tensors.len() {
        let n = model.params().tensors[ti].data.len();
        let picks: Vec<usize> = match samples {
            Some(s) if s < n => (0..s).map(|i| (i * 7919 + ti * 31) % n).collect(),
            _ => (0..n).collect(),
        };
        let (mut diff, mut a_norm, mut f_norm) = (0.0, 0.0, 0.0);
        for &e in &picks {
            let orig = probe.params().tensors[ti].data[e];
            probe.params_mut().tensors[ti].data[e] = orig + h;
            let up = probe.sequence_loss(seq, targets).unwrap().nll;
            probe.params_mut().tensors[ti].data[e] = orig - h;
            let down = probe.sequence_loss(seq, targets).unwrap().nll;
            probe.params_mut().tensors[ti].data[e] = orig;
            let fd = (up - down) / (2.0 * h);
            let an = grads.tensors[ti].data[e];
            diff += (an - fd).powi(2);
            a_norm += an * an;
            f_norm += fd * fd;
        }
        let scale = a_norm.sqrt().max(f_norm.sqrt());
        let rel = if scale < 1e-10 { 0.0 } else { diff.sqrt() / scale };
        out.push((model.params().tensors[ti].name.clone(), rel, scale));
    }
    out
}

#[test]
fn gradients_match_finite_differences() {
    let model = Model::init(gradcheck_cfg(), 11).unwrap();
    let seq = patterned_sequence(model.config(), &[0, 1, 0, 2, 1], 4);
    assert!(build_behavior_mask(&seq).count() > 0);
    let targets = next_token_targets(&seq);
    let errs = gradient_errors(&model, &seq, &targets, Some(12));
    for (name, rel, _) in &errs {
        assert!(*rel < 1e-4, "{name}: relative error {rel}");
    }
    let dead: Vec<_> = errs.iter().filter(|e| e.2 <= 1e-10).map(|e| e.0.as_str()).collect();
    assert!(dead.len() * 10 <= errs.len(), "tensors without gradient: {dead:?}");
}

#[test]
fn ranking_gradients_match_finite_differences() {
    let cfg = ModelConfig { layout: Layout::Ranking, session_wise: true, ..gradcheck_cfg() };
    let model = Model::init(cfg, 5).unwrap();
    let mut seq = patterned_sequence(model.config(), &[0, 1, 2], 9);
    let schema = crate::data::BehaviorSchema::short_video();
    seq.push_candidate(&[1, 2, 3], &schema, model.config()).unwrap();
    let mut targets = vec![None; seq.len()];
    targets[seq.len() - 1] = Some(2);
    targets[3] = Some(seq.tokens[4].id);
    for (name, rel, _) in gradient_errors(&model, &seq, &targets, Some(8)) {
        assert!(rel < 1e-4, "{name}: relative error {rel}");
    }
}

#[test]
fn dense_and_incremental_paths_agree() {
    for session_wise in [false, true] {
        let cfg = ModelConfig { session_wise, ..ModelConfig::desk(2, 8, 3) };
        let model = Model::init(cfg, 2).unwrap();
        let seq = random_sequence(model.config(), 9, 3, 1);
        let a = model.forward(&seq).unwrap();
        let b = model.forward_dense(&seq).unwrap();
        assert_eq!((a.rows, a.cols), (seq.len(), model.config().vocab_size()));
        let worst = a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(worst < 1e-10, "session_wise={session_wise}: {worst}");
    }
}

#[test]
fn causal_perturbation_probe() {
    let model = Model::init(ModelConfig::desk(2, 8, 3), 3).unwrap();
    let seq = random_sequence(model.config(), 6, 3, 2);
    let base = model.forward(&seq).unwrap();
    for t in [0, 4, 10, seq.len() - 2] {
        let mut p = seq.clone();
        let tok = &mut p.tokens[t + 1];
        tok.id = if tok.role == 0 { (tok.id + 1) % 3 } else { model.config().sid_token(tok.role as usize, (tok.id + 3) % 8) };
        let out = model.forward(&p).unwrap();
        assert_eq!(&out.data[..(t + 1) * out.cols], &base.data[..(t + 1) * out.cols]);
        assert_ne!(&out.data[(t + 1) * out.cols..], &base.data[(t + 1) * out.cols..]);
    }
}

#[test]
fn session_wise_probe_ignores_same_session_items() {
    let cfg = ModelConfig { session_wise: true, ..ModelConfig::desk(2, 8, 3) };
    let model = Model::init(cfg, 4).unwrap();
    let mut seq = TokenSequence::default();
    let layout = [(0, 0), (1, 1), (2, 1), (0, 1), (2, 2)];
    for (i, &(b, s)) in layout.iter().enumerate() {
        seq.push_item(model.config(), &[i as u32, 7 - i as u32], b, u32::from(b) + 1, s, Provenance::History { session: s });
    }
    let base = model.forward(&seq).unwrap();
    // Change item 1 (session 1): items 2 and 3 share its session.
    let mut p = seq.clone();
    for t in &mut p.tokens[3..6] {
        if t.role > 0 {
            t.id = model.config().sid_token(t.role as usize, 5);
        }
    }
    let out = model.forward(&p).unwrap();
    let rows = |l: &Logits, item: usize| l.data[item * 3 * l.cols..(item + 1) * 3 * l.cols].to_vec();
    assert_eq!(rows(&out, 0), rows(&base, 0));
    assert_eq!(rows(&out, 2), rows(&base, 2));
    assert_eq!(rows(&out, 3), rows(&base, 3));
    assert_ne!(rows(&out, 1), rows(&base, 1));
    assert_ne!(rows(&out, 4), rows(&base, 4));
}

#[test]
fn residual_identity() {
    let cfg = ModelConfig::desk(2, 8, 3);
    let mut model = Model::init(cfg.clone(), 6).unwrap();
    let idx = model.index().clone();
    for li in &idx.layers {
        model.params_mut().get_mut(li.wo).fill(0.0);
        model.params_mut().get_mut(li.behavior.as_ref().unwrap().wo).fill(0.0);
        for &(_, w2) in &li.experts {
            model.params_mut().get_mut(w2).fill(0.0);
        }
    }
    let seq = random_sequence(&cfg, 3, 3, 7);
    let out = model.forward(&seq).unwrap();
    let p = model.params();
    for (r, tok) in seq.tokens.iter().enumerate() {
        let e = &p.get(idx.embed)[tok.id as usize * cfg.dim..(tok.id as usize + 1) * cfg.dim];
        let mut x = vec![0.0; cfg.dim];
        ops::rms_norm_row(e, p.get(idx.final_norm), cfg.norm_eps, &mut x);
        let mut want = vec![0.0; cfg.vocab_size()];
        ops::vec_mat(&x, p.get(idx.head), &mut want);
        assert_eq!(out.row(r), want.as_slice());
    }
}

#[test]
fn loss_of_uniform_logits() {
    let cfg = ModelConfig::desk(2, 8, 3);
    let mut model = Model::init(cfg.clone(), 6).unwrap();
    let head = model.index().head;
    model.params_mut().get_mut(head).fill(0.0);
    let seq = random_sequence(&cfg, 2, 3, 1);
    let loss = model.sequence_loss(&seq, &next_token_targets(&seq)).unwrap();
    assert_eq!(loss.count, seq.len() - 1);
    assert!((loss.mean().unwrap() - (cfg.vocab_size() as f64).ln()).abs() < 1e-12);
}

#[test]
fn attention_rows_are_distributions() {
    let model = Model::init(ModelConfig::desk(2, 8, 3), 8).unwrap();
    let seq = random_sequence(model.config(), 7, 3, 3);
    let (ca, ba, _) = model.masks_for(&seq);
    let tape = model.run_tape(&seq).unwrap();
    let _ = tape.xf.len();
    let t = seq.len();
    let x: Vec<f64> = (0..t * 16).map(|i| (i as f64 * 0.37).sin()).collect();
    for mask in [&ca, &ba] {
        let p = attention::mha_forward(&x, &x, &x, t, 1, 16, mask).p;
        for q in 0..t {
            let s: f64 = p[q * t..(q + 1) * t].iter().sum();
            let any = mask.row(q).iter().any(|&b| b);
            assert!(if any { (s - 1.0).abs() < 1e-12 } else { s == 0.0 });
        }
    }
}

#[test]
fn out_of_vocabulary_token_rejected() {
    let model = Model::init(ModelConfig::desk(2, 8, 3), 8).unwrap();
    let mut seq = random_sequence(model.config(), 2, 3, 3);
    seq.tokens[1].id = 10_000;
    assert!(model.forward(&seq).is_err());
    assert!(model.forward(&TokenSequence::default()).is_err());
}

