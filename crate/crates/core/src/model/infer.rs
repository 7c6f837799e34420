//! Token-at-a-time inference with cached keys and values.
//!
//! Every row is computed with fixed-order row kernels, so a token's result
//! depends only on the tokens it may attend to. Beam hypotheses share a
//! read-only prompt cache and each own a short suffix cache.

use super::config::Layout;
use super::forward::Logits;
use super::masks;
use super::ops::{rms_norm_row, silu, vec_mat};
use super::rope::{rope_frequencies, rope_row};
use super::sequence::{Token, TokenSequence};
use super::Model;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Default)]
struct LayerKv {
    k: Vec<f64>,
    v: Vec<f64>,
    kb: Vec<f64>,
    vb: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct KvCache {
    tokens: Vec<Token>,
    layers: Vec<LayerKv>,
}

impl KvCache {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }
}

/// Attention of one query over the given `(key row, value row)` pairs.
fn attend(q: &[f64], keys: &[(&[f64], &[f64])], heads: usize, hd: usize, out: &mut [f64]) {
    out.fill(0.0);
    if keys.is_empty() {
        return;
    }
    let scale = 1.0 / (hd as f64).sqrt();
    let mut scores = vec![0.0; keys.len()];
    for h in 0..heads {
        let s = h * hd..(h + 1) * hd;
        let qh = &q[s.clone()];
        let mut max = f64::NEG_INFINITY;
        for (sc, (k, _)) in scores.iter_mut().zip(keys) {
            *sc = scale * qh.iter().zip(&k[s.clone()]).map(|(a, b)| a * b).sum::<f64>();
            max = max.max(*sc);
        }
        let mut sum = 0.0;
        for sc in scores.iter_mut() {
            *sc = (*sc - max).exp();
            sum += *sc;
        }
        let oh = &mut out[s.clone()];
        for (sc, (_, v)) in scores.iter().zip(keys) {
            let w = sc / sum;
            for (o, x) in oh.iter_mut().zip(&v[s.clone()]) {
                *o += w * x;
            }
        }
    }
}

impl Model {
    pub fn empty_cache(&self) -> KvCache {
        KvCache { tokens: Vec::new(), layers: vec![LayerKv::default(); self.config.layers] }
    }

    fn check_token(&self, tok: &Token) -> Result<()> {
        let cfg = &self.config;
        if tok.id as usize >= cfg.vocab_size() || tok.role as usize > cfg.sid_len || tok.behavior as usize >= cfg.behavior_vocab() {
            return Err(Error::Shape(format!("token {tok:?} outside the model vocabulary")));
        }
        Ok(())
    }

    /// Feeds one token after `prefix` and the tokens already in `cache`,
    /// appending its keys and values to `cache`. Returns the final
    /// normalized state of the token.
    pub fn step(&self, prefix: Option<&KvCache>, cache: &mut KvCache, tok: Token) -> Result<Vec<f64>> {
        self.check_token(&tok)?;
        let cfg = &self.config;
        let p = &self.params;
        let (d, a, hd) = (cfg.dim, cfg.attention_width(), cfg.head_dim);
        let base = prefix.map_or(0, |c| c.len());
        let qi = base + cache.len();
        let pos = if cfg.session_wise { tok.session } else { qi as u32 };
        let freqs = rope_frequencies(hd, cfg.rope_base)?;
        cache.tokens.push(tok);
        let segs: Vec<&KvCache> = prefix.into_iter().collect();

        let ca_allowed: Vec<bool> = segs
            .iter()
            .flat_map(|c| c.tokens.iter())
            .chain(cache.tokens.iter())
            .enumerate()
            .map(|(ki, k)| if cfg.session_wise { masks::session_allows(qi, &tok, ki, k) } else { ki <= qi })
            .collect();
        let ba_allowed: Vec<bool> = segs
            .iter()
            .flat_map(|c| c.tokens.iter())
            .chain(cache.tokens.iter())
            .map(|k| {
                if cfg.session_wise {
                    masks::session_behavior_allows(&tok, k)
                } else {
                    masks::behavior_allows(&tok, k)
                }
            })
            .collect();

        let r = tok.id as usize;
        let mut h = p.get(self.index.embed)[r * d..(r + 1) * d].to_vec();
        let mut x = vec![0.0; d];
        let mut q = vec![0.0; a];
        let mut att = vec![0.0; a];
        let mut o = vec![0.0; d];
        for (l, li) in self.index.layers.iter().enumerate() {
            rms_norm_row(&h, p.get(li.attn_norm), cfg.norm_eps, &mut x);
            vec_mat(&x, p.get(li.wq), &mut q);
            let mut k = vec![0.0; a];
            let mut v = vec![0.0; a];
            vec_mat(&x, p.get(li.wk), &mut k);
            vec_mat(&x, p.get(li.wv), &mut v);
            rope_row(&mut q, hd, pos, &freqs, false);
            rope_row(&mut k, hd, pos, &freqs, false);
            let lkv = &mut cache.layers[l];
            lkv.k.extend_from_slice(&k);
            lkv.v.extend_from_slice(&v);
            let keys = gather(&segs, cache, l, &ca_allowed, a, false);
            attend(&q, &keys, cfg.heads, hd, &mut att);
            vec_mat(&att, p.get(li.wo), &mut o);
            h.iter_mut().zip(&o).for_each(|(a, b)| *a += b);

            if let Some(bi) = &li.behavior {
                rms_norm_row(&h, p.get(bi.norm), cfg.norm_eps, &mut x);
                let b = tok.behavior as usize;
                let offset = |m: &mut Vec<f64>, wi: usize, ei: usize| {
                    vec_mat(&x, p.get(wi), m);
                    m.iter_mut().zip(&p.get(ei)[b * a..(b + 1) * a]).for_each(|(a, e)| *a += e);
                };
                let mut kb = vec![0.0; a];
                let mut vb = vec![0.0; a];
                offset(&mut q, bi.wq, bi.eq);
                offset(&mut kb, bi.wk, bi.ek);
                offset(&mut vb, bi.wv, bi.ev);
                let lkv = &mut cache.layers[l];
                lkv.kb.extend_from_slice(&kb);
                lkv.vb.extend_from_slice(&vb);
                let keys = gather(&segs, cache, l, &ba_allowed, a, true);
                attend(&q, &keys, cfg.heads, hd, &mut att);
                vec_mat(&att, p.get(bi.wo), &mut o);
                let mut z = vec![0.0; d];
                vec_mat(&x, p.get(bi.wg), &mut z);
                for ((hv, ov), zv) in h.iter_mut().zip(&o).zip(&z) {
                    *hv += ov * silu(*zv);
                }
            }

            rms_norm_row(&h, p.get(li.moe_norm), cfg.norm_eps, &mut x);
            let (w1, w2) = li.experts[tok.role as usize];
            let mut u = x.clone();
            if tok.role > 0 {
                let b = tok.behavior as usize;
                u.extend_from_slice(&p.get(li.eb)[b * d..(b + 1) * d]);
            }
            let mut z = vec![0.0; cfg.inner_dim];
            vec_mat(&u, p.get(w1), &mut z);
            z.iter_mut().for_each(|v| *v = silu(*v));
            vec_mat(&z, p.get(w2), &mut o);
            h.iter_mut().zip(&o).for_each(|(a, b)| *a += b);
        }
        let mut xf = vec![0.0; d];
        rms_norm_row(&h, p.get(self.index.final_norm), cfg.norm_eps, &mut xf);
        Ok(xf)
    }

    /// Logits over the token id space for a final state (see
    /// [`Model::forward_dense`] for the ranking column layout).
    pub fn logits_from_state(&self, xf: &[f64]) -> Vec<f64> {
        let p = &self.params;
        match (self.config.layout, self.index.behavior_head) {
            (Layout::Ranking, Some(bh)) => {
                let mut b = vec![0.0; self.config.behavior_vocab()];
                vec_mat(xf, p.get(bh), &mut b);
                let mut s = vec![0.0; self.config.sid_vocab()];
                vec_mat(xf, p.get(self.index.head), &mut s);
                b.extend(s);
                b
            }
            _ => {
                let mut out = vec![0.0; self.config.vocab_size()];
                vec_mat(xf, p.get(self.index.head), &mut out);
                out
            }
        }
    }

    /// Runs a whole sequence into a fresh cache; returns the cache and the
    /// final state of the last token.
    pub fn prefill(&self, seq: &TokenSequence) -> Result<(KvCache, Vec<f64>)> {
        if seq.is_empty() {
            return Err(Error::Shape("empty token sequence".into()));
        }
        seq.validate(&self.config)?;
        let mut cache = self.empty_cache();
        let mut last = Vec::new();
        for tok in &seq.tokens {
            last = self.step(None, &mut cache, *tok)?;
        }
        Ok((cache, last))
    }

    /// Per-position next-token logits, `len × vocab`, from the incremental
    /// path. Deterministic, and position `t` depends only on the tokens it
    /// may attend to.
    pub fn forward(&self, seq: &TokenSequence) -> Result<Logits> {
        if seq.is_empty() {
            return Err(Error::Shape("empty token sequence".into()));
        }
        seq.validate(&self.config)?;
        let cols = self.config.vocab_size();
        let mut cache = self.empty_cache();
        let mut data = Vec::with_capacity(seq.len() * cols);
        for tok in &seq.tokens {
            let xf = self.step(None, &mut cache, *tok)?;
            data.extend(self.logits_from_state(&xf));
        }
        Ok(Logits { rows: seq.len(), cols, data })
    }
}

fn gather<'a>(segs: &[&'a KvCache], cache: &'a KvCache, l: usize, allowed: &[bool], a: usize, behavior: bool) -> Vec<(&'a [f64], &'a [f64])> {
    let mut out = Vec::new();
    let mut ki = 0;
    for c in segs.iter().copied().chain(std::iter::once(cache)) {
        let lkv = &c.layers[l];
        let (k, v) = if behavior { (&lkv.kb, &lkv.vb) } else { (&lkv.k, &lkv.v) };
        for r in 0..c.len() {
            if allowed[ki] {
                out.push((&k[r * a..(r + 1) * a], &v[r * a..(r + 1) * a]));
            }
            ki += 1;
        }
    }
    out
}
