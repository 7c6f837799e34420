//! Whole-sequence forward pass with a tape, and its backward pass.

use super::attention::{beh_forward, mha_backward, mha_forward, moe_forward, AttnOut, BehTape, MoeTape};
use super::config::{Layout, ModelConfig};
use super::masks::{self, Mask};
use super::ops::{log_sum_exp, matmul, matmul_at, matmul_bt, rms_norm_row, rms_norm_row_backward, silu_grad};
use super::params::ModelParams;
use super::rope::{rope_frequencies, rope_row};
use super::sequence::TokenSequence;
use super::Model;
use crate::error::{Error, Result};

/// Summed negative log-likelihood and the number of supervised positions.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossSum {
    pub nll: f64,
    pub count: usize,
}

impl LossSum {
    pub fn add(&mut self, other: LossSum) {
        self.nll += other.nll;
        self.count += other.count;
    }

    pub fn mean(&self) -> Option<f64> {
        (self.count > 0).then(|| self.nll / self.count as f64)
    }
}

/// Row-major logits, one row per position.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Logits {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Head {
    /// Shared head (generative) or item head (ranking).
    Main,
    Behavior,
}

/// Head and class scoring a target token id, plus the number of classes
/// that take part in the softmax.
pub(crate) fn head_class(cfg: &ModelConfig, target: u32) -> Result<(Head, usize, usize)> {
    let t = target as usize;
    if t >= cfg.vocab_size() {
        return Err(Error::Shape(format!("target id {target} outside vocabulary")));
    }
    Ok(match cfg.layout {
        Layout::Generative => (Head::Main, t, cfg.vocab_size()),
        Layout::Ranking if t < cfg.behavior_vocab() => {
            if t >= cfg.num_behaviors {
                return Err(Error::Shape("[MASK] cannot be a prediction target".into()));
            }
            (Head::Behavior, t, cfg.num_behaviors)
        }
        Layout::Ranking => (Head::Main, t - cfg.behavior_vocab(), cfg.sid_vocab()),
    })
}

fn rms_rows(x: &[f64], d: usize, gain: &[f64], eps: f64) -> (Vec<f64>, Vec<f64>) {
    let mut y = vec![0.0; x.len()];
    let inv = x.chunks_exact(d).zip(y.chunks_exact_mut(d)).map(|(xr, yr)| rms_norm_row(xr, gain, eps, yr)).collect();
    (y, inv)
}

fn rms_rows_backward(x: &[f64], d: usize, gain: &[f64], inv: &[f64], dy: &[f64], dx: &mut [f64], dgain: &mut [f64]) {
    for (r, &iv) in inv.iter().enumerate() {
        let s = r * d..(r + 1) * d;
        rms_norm_row_backward(&x[s.clone()], gain, iv, &dy[s.clone()], &mut dx[s], dgain);
    }
}

struct BehStage {
    x2: Vec<f64>,
    inv2: Vec<f64>,
    tape: BehTape,
}

struct LayerTape {
    h_in: Vec<f64>,
    x1: Vec<f64>,
    inv1: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    attn: AttnOut,
    h1: Vec<f64>,
    beh: Option<BehStage>,
    h2: Vec<f64>,
    inv3: Vec<f64>,
    moe: MoeTape,
}

pub(crate) struct Tape {
    layers: Vec<LayerTape>,
    h_out: Vec<f64>,
    inv_f: Vec<f64>,
    /// Final normalized states, `t × dim`.
    pub xf: Vec<f64>,
    ca_mask: Mask,
    ba_mask: Mask,
    positions: Vec<u32>,
}

impl Model {
    /// Attention masks and rotary positions the model uses for `seq`.
    pub(crate) fn masks_for(&self, seq: &TokenSequence) -> (Mask, Mask, Vec<u32>) {
        let t = &seq.tokens;
        if self.config.session_wise {
            let (m, pos) = masks::build_session_mask_and_positions(seq);
            let b = Mask::from_fn(t.len(), |q, k| masks::session_behavior_allows(&t[q], &t[k]));
            (m, b, pos)
        } else {
            (masks::build_causal_mask(seq), masks::build_behavior_mask(seq), (0..t.len() as u32).collect())
        }
    }

    pub(crate) fn run_tape(&self, seq: &TokenSequence) -> Result<Tape> {
        let cfg = &self.config;
        if seq.is_empty() {
            return Err(Error::Shape("empty token sequence".into()));
        }
        seq.validate(cfg)?;
        let p = &self.params;
        let (t, d, a, hd) = (seq.len(), cfg.dim, cfg.attention_width(), cfg.head_dim);
        let roles = seq.roles();
        let behaviors: Vec<u16> = seq.tokens.iter().map(|x| x.behavior).collect();
        let (ca_mask, ba_mask, positions) = self.masks_for(seq);
        let freqs = rope_frequencies(hd, cfg.rope_base)?;
        let embed = p.get(self.index.embed);
        let mut h = Vec::with_capacity(t * d);
        for tok in &seq.tokens {
            let r = tok.id as usize;
            h.extend_from_slice(&embed[r * d..(r + 1) * d]);
        }
        let mut layers = Vec::with_capacity(cfg.layers);
        for (l, li) in self.index.layers.iter().enumerate() {
            let (x1, inv1) = rms_rows(&h, d, p.get(li.attn_norm), cfg.norm_eps);
            let mut q = vec![0.0; t * a];
            let mut k = vec![0.0; t * a];
            let mut v = vec![0.0; t * a];
            matmul(&x1, p.get(li.wq), &mut q, t, d, a, false);
            matmul(&x1, p.get(li.wk), &mut k, t, d, a, false);
            matmul(&x1, p.get(li.wv), &mut v, t, d, a, false);
            for (r, &pos) in positions.iter().enumerate() {
                rope_row(&mut q[r * a..(r + 1) * a], hd, pos, &freqs, false);
                rope_row(&mut k[r * a..(r + 1) * a], hd, pos, &freqs, false);
            }
            let attn = mha_forward(&q, &k, &v, t, cfg.heads, hd, &ca_mask);
            let mut h1 = h.clone();
            matmul(&attn.a, p.get(li.wo), &mut h1, t, a, d, true);
            let (beh, h2) = match (&li.behavior, self.index.behavior_weights(l, cfg, p)) {
                (Some(bi), Some(w)) => {
                    let (x2, inv2) = rms_rows(&h1, d, p.get(bi.norm), cfg.norm_eps);
                    let tape = beh_forward(&x2, t, &behaviors, &ba_mask, &w);
                    let h2: Vec<f64> = h1.iter().zip(&tape.out).map(|(x, y)| x + y).collect();
                    (Some(BehStage { x2, inv2, tape }), h2)
                }
                _ => (None, h1.clone()),
            };
            let (x3, inv3) = rms_rows(&h2, d, p.get(li.moe_norm), cfg.norm_eps);
            let moe = moe_forward(&x3, &roles, &behaviors, &self.index.moe_weights(l, cfg, p))?;
            let h3: Vec<f64> = h2.iter().zip(&moe.out).map(|(x, y)| x + y).collect();
            layers.push(LayerTape { h_in: std::mem::replace(&mut h, h3), x1, inv1, q, k, v, attn, h1, beh, h2, inv3, moe });
        }
        let (xf, inv_f) = rms_rows(&h, d, p.get(self.index.final_norm), cfg.norm_eps);
        Ok(Tape { layers, h_out: h, inv_f, xf, ca_mask, ba_mask, positions })
    }

    fn head_weights(&self, head: Head) -> (usize, usize) {
        let cfg = &self.config;
        match (head, self.index.behavior_head) {
            (Head::Behavior, Some(i)) => (i, cfg.behavior_vocab()),
            (Head::Main, _) => (self.index.head, self.params.tensors[self.index.head].shape[1]),
            (Head::Behavior, None) => unreachable!("behavior head requested in generative layout"),
        }
    }

    /// Logits for every position from the whole-sequence path. In the
    /// ranking layout columns follow the token id space: behavior-head
    /// columns then item-head columns.
    pub fn forward_dense(&self, seq: &TokenSequence) -> Result<Logits> {
        let tape = self.run_tape(seq)?;
        let (t, d) = (seq.len(), self.config.dim);
        let heads: Vec<Head> = match self.config.layout {
            Layout::Generative => vec![Head::Main],
            Layout::Ranking => vec![Head::Behavior, Head::Main],
        };
        let cols = self.config.vocab_size();
        let mut data = vec![0.0; t * cols];
        let mut start = 0;
        for head in heads {
            let (wi, n) = self.head_weights(head);
            let mut part = vec![0.0; t * n];
            matmul(&tape.xf, self.params.get(wi), &mut part, t, d, n, false);
            for r in 0..t {
                data[r * cols + start..r * cols + start + n].copy_from_slice(&part[r * n..(r + 1) * n]);
            }
            start += n;
        }
        Ok(Logits { rows: t, cols, data })
    }

    /// Summed next-token loss over positions with a target.
    pub fn sequence_loss(&self, seq: &TokenSequence, targets: &[Option<u32>]) -> Result<LossSum> {
        self.loss_impl(seq, targets, None)
    }

    /// As [`Model::sequence_loss`], accumulating the gradient of the summed
    /// loss into `grads`.
    pub fn sequence_loss_grad(&self, seq: &TokenSequence, targets: &[Option<u32>], grads: &mut ModelParams) -> Result<LossSum> {
        self.loss_impl(seq, targets, Some(grads))
    }

    fn loss_impl(&self, seq: &TokenSequence, targets: &[Option<u32>], grads: Option<&mut ModelParams>) -> Result<LossSum> {
        if targets.len() != seq.len() {
            return Err(Error::Shape(format!("{} targets for {} tokens", targets.len(), seq.len())));
        }
        let cfg = &self.config;
        let d = cfg.dim;
        let tape = self.run_tape(seq)?;
        let mut groups: Vec<(Head, Vec<usize>, Vec<usize>, usize)> = Vec::new();
        for (pos, tgt) in targets.iter().enumerate() {
            let Some(tgt) = *tgt else { continue };
            let (head, class, valid) = head_class(cfg, tgt)?;
            match groups.iter_mut().find(|g| g.0 == head) {
                Some(g) => {
                    g.1.push(pos);
                    g.2.push(class);
                }
                None => groups.push((head, vec![pos], vec![class], valid)),
            }
        }
        let mut loss = LossSum::default();
        let mut dxf = grads.as_ref().map(|_| vec![0.0; seq.len() * d]);
        let mut grads = grads;
        for (head, rows, classes, valid) in &groups {
            let (wi, n) = self.head_weights(*head);
            let w = self.params.get(wi);
            let m = rows.len();
            let mut x = Vec::with_capacity(m * d);
            for &r in rows {
                x.extend_from_slice(&tape.xf[r * d..(r + 1) * d]);
            }
            let mut z = vec![0.0; m * n];
            matmul(&x, w, &mut z, m, d, n, false);
            let mut dz = vec![0.0; m * n];
            for (i, &c) in classes.iter().enumerate() {
                let row = &z[i * n..i * n + valid];
                let lse = log_sum_exp(row);
                loss.nll += lse - row[c];
                for (j, &v) in row.iter().enumerate() {
                    dz[i * n + j] = (v - lse).exp();
                }
                dz[i * n + c] -= 1.0;
            }
            loss.count += m;
            if let (Some(g), Some(dxf)) = (grads.as_deref_mut(), dxf.as_mut()) {
                matmul_at(&x, &dz, g.get_mut(wi), m, d, n, true);
                let mut dx = vec![0.0; m * d];
                matmul_bt(&dz, w, &mut dx, m, n, d, false);
                for (i, &r) in rows.iter().enumerate() {
                    for c in 0..d {
                        dxf[r * d + c] += dx[i * d + c];
                    }
                }
            }
        }
        if !loss.nll.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {}", loss.nll)));
        }
        if let (Some(g), Some(dxf)) = (grads, dxf) {
            self.backward(seq, &tape, &dxf, g);
        }
        Ok(loss)
    }

    fn backward(&self, seq: &TokenSequence, tape: &Tape, dxf: &[f64], g: &mut ModelParams) {
        let cfg = &self.config;
        let p = &self.params;
        let (t, d, a, hd) = (seq.len(), cfg.dim, cfg.attention_width(), cfg.head_dim);
        let behaviors: Vec<u16> = seq.tokens.iter().map(|x| x.behavior).collect();
        let freqs = rope_frequencies(hd, cfg.rope_base).expect("validated head dim");
        let mut dh = vec![0.0; t * d];
        rms_rows_backward(&tape.h_out, d, p.get(self.index.final_norm), &tape.inv_f, dxf, &mut dh, g.get_mut(self.index.final_norm));

        for (li, lt) in self.index.layers.iter().zip(&tape.layers).rev() {
            // Experts: h3 = h2 + moe(norm(h2)).
            let mut dh2 = dh.clone();
            let mut dx3 = vec![0.0; t * d];
            for grp in &lt.moe.groups {
                let (w1i, w2i) = li.experts[grp.role];
                let n = grp.rows.len();
                let in_w = if grp.role == 0 { d } else { 2 * d };
                let inner = cfg.inner_dim;
                let mut dy = Vec::with_capacity(n * d);
                for &r in &grp.rows {
                    dy.extend_from_slice(&dh[r * d..(r + 1) * d]);
                }
                matmul_at(&grp.s, &dy, g.get_mut(w2i), n, inner, d, true);
                let mut dz = vec![0.0; n * inner];
                matmul_bt(&dy, p.get(w2i), &mut dz, n, d, inner, false);
                for (x, &z) in dz.iter_mut().zip(&grp.z) {
                    *x *= silu_grad(z);
                }
                matmul_at(&grp.u, &dz, g.get_mut(w1i), n, in_w, inner, true);
                let mut du = vec![0.0; n * in_w];
                matmul_bt(&dz, p.get(w1i), &mut du, n, inner, in_w, false);
                for (i, &r) in grp.rows.iter().enumerate() {
                    let row = &du[i * in_w..(i + 1) * in_w];
                    for c in 0..d {
                        dx3[r * d + c] += row[c];
                    }
                    if grp.role > 0 {
                        let b = behaviors[r] as usize;
                        let eb = g.get_mut(li.eb);
                        for c in 0..d {
                            eb[b * d + c] += row[d + c];
                        }
                    }
                }
            }
            rms_rows_backward(&lt.h2, d, p.get(li.moe_norm), &lt.inv3, &dx3, &mut dh2, g.get_mut(li.moe_norm));

            // Behavior layer: h2 = h1 + (attn·Wo) ⊙ silu(x2·Wg), x2 = norm(h1).
            let mut dh1 = dh2.clone();
            if let (Some(bi), Some(bs)) = (&li.behavior, &lt.beh) {
                let bt = &bs.tape;
                let mut dx2 = vec![0.0; t * d];
                let mut dob = vec![0.0; t * d];
                let mut dz = vec![0.0; t * d];
                for i in 0..t * d {
                    dob[i] = dh2[i] * bt.g[i];
                    dz[i] = dh2[i] * bt.ob[i] * silu_grad(bt.z[i]);
                }
                matmul_at(&bs.x2, &dz, g.get_mut(bi.wg), t, d, d, true);
                matmul_bt(&dz, p.get(bi.wg), &mut dx2, t, d, d, true);
                matmul_at(&bt.attn.a, &dob, g.get_mut(bi.wo), t, a, d, true);
                let mut da = vec![0.0; t * a];
                matmul_bt(&dob, p.get(bi.wo), &mut da, t, d, a, false);
                let (mut dq, mut dk, mut dv) = (vec![0.0; t * a], vec![0.0; t * a], vec![0.0; t * a]);
                mha_backward(&bt.q, &bt.k, &bt.v, &bt.attn.p, &da, t, cfg.heads, hd, &tape.ba_mask, &mut dq, &mut dk, &mut dv);
                for (dm, wi, ei) in [(&dq, bi.wq, bi.eq), (&dk, bi.wk, bi.ek), (&dv, bi.wv, bi.ev)] {
                    matmul_at(&bs.x2, dm, g.get_mut(wi), t, d, a, true);
                    matmul_bt(dm, p.get(wi), &mut dx2, t, a, d, true);
                    let e = g.get_mut(ei);
                    for (r, &b) in behaviors.iter().enumerate() {
                        let b = b as usize;
                        for c in 0..a {
                            e[b * a + c] += dm[r * a + c];
                        }
                    }
                }
                rms_rows_backward(&lt.h1, d, p.get(bi.norm), &bs.inv2, &dx2, &mut dh1, g.get_mut(bi.norm));
            }

            // Causal attention: h1 = h_in + attn(norm(h_in))·Wo.
            let mut dh_in = dh1.clone();
            matmul_at(&lt.attn.a, &dh1, g.get_mut(li.wo), t, a, d, true);
            let mut da = vec![0.0; t * a];
            matmul_bt(&dh1, p.get(li.wo), &mut da, t, d, a, false);
            let (mut dq, mut dk, mut dv) = (vec![0.0; t * a], vec![0.0; t * a], vec![0.0; t * a]);
            mha_backward(&lt.q, &lt.k, &lt.v, &lt.attn.p, &da, t, cfg.heads, hd, &tape.ca_mask, &mut dq, &mut dk, &mut dv);
            for (r, &pos) in tape.positions.iter().enumerate() {
                rope_row(&mut dq[r * a..(r + 1) * a], hd, pos, &freqs, true);
                rope_row(&mut dk[r * a..(r + 1) * a], hd, pos, &freqs, true);
            }
            let mut dx1 = vec![0.0; t * d];
            for (dm, wi) in [(&dq, li.wq), (&dk, li.wk), (&dv, li.wv)] {
                matmul_at(&lt.x1, dm, g.get_mut(wi), t, d, a, true);
                matmul_bt(dm, p.get(wi), &mut dx1, t, a, d, true);
            }
            rms_rows_backward(&lt.h_in, d, p.get(li.attn_norm), &lt.inv1, &dx1, &mut dh_in, g.get_mut(li.attn_norm));
            dh = dh_in;
        }
        let e = g.get_mut(self.index.embed);
        for (r, tok) in seq.tokens.iter().enumerate() {
            let row = tok.id as usize;
            for c in 0..d {
                e[row * d + c] += dh[r * d + c];
            }
        }
    }
}
