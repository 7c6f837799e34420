//! Attention, cross-level behavior interaction and role-routed experts on
//! whole sequences. These are the training-path kernels; each forward keeps
//! what its backward needs.

use super::masks::Mask;
use super::ops::{matmul, silu};
use crate::error::{Error, Result};

/// Multi-head attention output and the per-head probability matrices
/// (`heads × t × t`, zero where masked).
pub(crate) struct AttnOut {
    pub a: Vec<f64>,
    pub p: Vec<f64>,
}

/// Softmax attention restricted to allowed keys; rows with no allowed key
/// produce zero output and a zero probability row.
pub(crate) fn mha_forward(q: &[f64], k: &[f64], v: &[f64], t: usize, heads: usize, hd: usize, mask: &Mask) -> AttnOut {
    let width = heads * hd;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut a = vec![0.0; t * width];
    let mut p = vec![0.0; heads * t * t];
    let mut scores = vec![0.0; t];
    for h in 0..heads {
        let off = h * hd;
        for qi in 0..t {
            let qrow = &q[qi * width + off..qi * width + off + hd];
            let allowed = mask.row(qi);
            let mut max = f64::NEG_INFINITY;
            for ki in 0..t {
                if allowed[ki] {
                    let krow = &k[ki * width + off..ki * width + off + hd];
                    let s = scale * qrow.iter().zip(krow).map(|(x, y)| x * y).sum::<f64>();
                    scores[ki] = s;
                    max = max.max(s);
                }
            }
            if max == f64::NEG_INFINITY {
                continue;
            }
            let prow = &mut p[(h * t + qi) * t..(h * t + qi + 1) * t];
            let mut sum = 0.0;
            for ki in 0..t {
                if allowed[ki] {
                    let e = (scores[ki] - max).exp();
                    prow[ki] = e;
                    sum += e;
                }
            }
            let arow = &mut a[qi * width + off..qi * width + off + hd];
            for ki in 0..t {
                if allowed[ki] {
                    prow[ki] /= sum;
                    let w = prow[ki];
                    for (o, &x) in arow.iter_mut().zip(&v[ki * width + off..ki * width + off + hd]) {
                        *o += w * x;
                    }
                }
            }
        }
    }
    AttnOut { a, p }
}

/// Accumulates gradients of [`mha_forward`] into `dq`, `dk`, `dv`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn mha_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    p: &[f64],
    da: &[f64],
    t: usize,
    heads: usize,
    hd: usize,
    mask: &Mask,
    dq: &mut [f64],
    dk: &mut [f64],
    dv: &mut [f64],
) {
    let width = heads * hd;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut dp = vec![0.0; t];
    for h in 0..heads {
        let off = h * hd;
        for qi in 0..t {
            let allowed = mask.row(qi);
            let prow = &p[(h * t + qi) * t..(h * t + qi + 1) * t];
            let darow = &da[qi * width + off..qi * width + off + hd];
            let mut inner = 0.0;
            let mut any = false;
            for ki in 0..t {
                if allowed[ki] {
                    any = true;
                    let vrow = &v[ki * width + off..ki * width + off + hd];
                    dp[ki] = darow.iter().zip(vrow).map(|(x, y)| x * y).sum();
                    inner += prow[ki] * dp[ki];
                }
            }
            if !any {
                continue;
            }
            for ki in 0..t {
                if !allowed[ki] {
                    continue;
                }
                let pk = prow[ki];
                let ds = scale * pk * (dp[ki] - inner);
                for c in 0..hd {
                    dq[qi * width + off + c] += ds * k[ki * width + off + c];
                    dk[ki * width + off + c] += ds * q[qi * width + off + c];
                    dv[ki * width + off + c] += pk * darow[c];
                }
            }
        }
    }
}

fn check_finite(name: &str, x: &[f64]) -> Result<()> {
    if x.iter().any(|v| v.is_nan()) {
        return Err(Error::Numeric(format!("NaN in {name}")));
    }
    Ok(())
}

/// Single-head scaled dot-product attention under `mask` with scale
/// `1/sqrt(head_dim)`. `q` and `k` are `n × head_dim`, `v` is `n × d_v`.
pub fn masked_attention(q: &[f64], k: &[f64], v: &[f64], mask: &Mask, head_dim: usize) -> Result<Vec<f64>> {
    let n = mask.len();
    if n == 0 || q.len() != n * head_dim || k.len() != n * head_dim || !v.len().is_multiple_of(n) {
        return Err(Error::Shape(format!(
            "attention shapes q={} k={} v={} do not fit {n} rows of width {head_dim}",
            q.len(),
            k.len(),
            v.len()
        )));
    }
    check_finite("queries", q)?;
    check_finite("keys", k)?;
    check_finite("values", v)?;
    let dv = v.len() / n;
    if dv == head_dim {
        return Ok(mha_forward(q, k, v, n, 1, head_dim, mask).a);
    }
    // Values of another width: attend with probabilities only.
    let probs = mha_forward(q, k, &vec![0.0; n * head_dim], n, 1, head_dim, mask).p;
    let mut out = vec![0.0; n * dv];
    matmul(&probs, v, &mut out, n, n, dv, false);
    Ok(out)
}

/// Weights of one cross-level behavior interaction sublayer.
#[derive(Debug, Clone, Copy)]
pub struct BehaviorWeights<'a> {
    pub dim: usize,
    pub heads: usize,
    pub head_dim: usize,
    /// `dim × width` projections.
    pub wq: &'a [f64],
    pub wk: &'a [f64],
    pub wv: &'a [f64],
    /// Behavior offset tables, `behaviors × width`.
    pub eq: &'a [f64],
    pub ek: &'a [f64],
    pub ev: &'a [f64],
    /// `width × dim` output map.
    pub wo: &'a [f64],
    /// `dim × dim` gate.
    pub wg: &'a [f64],
}

impl BehaviorWeights<'_> {
    fn width(&self) -> usize {
        self.heads * self.head_dim
    }

    fn check(&self, rows: usize, h: &[f64], behaviors: &[u16], mask: &Mask) -> Result<()> {
        let (d, w) = (self.dim, self.width());
        let nb = self.eq.len() / w.max(1);
        let ok = h.len() == rows * d
            && behaviors.len() == rows
            && mask.len() == rows
            && [self.wq, self.wk, self.wv].iter().all(|m| m.len() == d * w)
            && [self.eq, self.ek, self.ev].iter().all(|m| m.len() == nb * w)
            && self.wo.len() == w * d
            && self.wg.len() == d * d;
        if !ok {
            return Err(Error::Shape("behavior layer weights or inputs have inconsistent shapes".into()));
        }
        if let Some(b) = behaviors.iter().find(|&&b| b as usize >= nb) {
            return Err(Error::Shape(format!("behavior id {b} outside the {nb}-row embedding tables")));
        }
        Ok(())
    }
}

pub(crate) struct BehTape {
    pub q: Vec<f64>,
    pub k: Vec<f64>,
    pub v: Vec<f64>,
    pub attn: AttnOut,
    pub ob: Vec<f64>,
    pub z: Vec<f64>,
    pub g: Vec<f64>,
    pub out: Vec<f64>,
}

fn project_with_offsets(x: &[f64], w: &[f64], table: &[f64], behaviors: &[u16], rows: usize, d: usize, width: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * width];
    matmul(x, w, &mut out, rows, d, width, false);
    for (r, &b) in behaviors.iter().enumerate() {
        let e = &table[b as usize * width..(b as usize + 1) * width];
        for (o, x) in out[r * width..(r + 1) * width].iter_mut().zip(e) {
            *o += x;
        }
    }
    out
}

pub(crate) fn beh_forward(x: &[f64], rows: usize, behaviors: &[u16], mask: &Mask, w: &BehaviorWeights) -> BehTape {
    let (d, width) = (w.dim, w.width());
    let q = project_with_offsets(x, w.wq, w.eq, behaviors, rows, d, width);
    let k = project_with_offsets(x, w.wk, w.ek, behaviors, rows, d, width);
    let v = project_with_offsets(x, w.wv, w.ev, behaviors, rows, d, width);
    let attn = mha_forward(&q, &k, &v, rows, w.heads, w.head_dim, mask);
    let mut ob = vec![0.0; rows * d];
    matmul(&attn.a, w.wo, &mut ob, rows, width, d, false);
    let mut z = vec![0.0; rows * d];
    matmul(x, w.wg, &mut z, rows, d, d, false);
    let g: Vec<f64> = z.iter().map(|&v| silu(v)).collect();
    let out = ob.iter().zip(&g).map(|(a, b)| a * b).collect();
    BehTape { q, k, v, attn, ob, z, g, out }
}

/// Cross-level behavior interaction on token states `h` (`rows × dim`):
/// behavior-offset attention under `mask`, output map, then a SiLU gate
/// computed from `h`. Rows with no allowed key contribute exactly zero.
pub fn behavior_interaction_layer(h: &[f64], behaviors: &[u16], mask: &Mask, w: &BehaviorWeights) -> Result<Vec<f64>> {
    let rows = behaviors.len();
    w.check(rows, h, behaviors, mask)?;
    check_finite("behavior layer input", h)?;
    Ok(beh_forward(h, rows, behaviors, mask, w).out)
}

/// Experts `φ_0..φ_l`: `φ_0` maps `dim → inner → dim`, `φ_j` (`j ≥ 1`) maps
/// `2·dim → inner → dim` over the state concatenated with a behavior
/// embedding.
#[derive(Debug, Clone)]
pub struct MoeWeights<'a> {
    pub dim: usize,
    pub inner: usize,
    /// Behavior embedding table, `behaviors × dim`.
    pub eb: &'a [f64],
    /// `(w1, w2)` per role.
    pub experts: Vec<(&'a [f64], &'a [f64])>,
}

pub(crate) struct MoeGroup {
    pub role: usize,
    pub rows: Vec<usize>,
    pub u: Vec<f64>,
    pub z: Vec<f64>,
    pub s: Vec<f64>,
}

pub(crate) struct MoeTape {
    pub groups: Vec<MoeGroup>,
    pub out: Vec<f64>,
}

pub(crate) fn moe_forward(x: &[f64], roles: &[u8], behaviors: &[u16], w: &MoeWeights) -> Result<MoeTape> {
    let (d, inner) = (w.dim, w.inner);
    let rows = roles.len();
    if let Some(r) = roles.iter().find(|&&r| r as usize >= w.experts.len()) {
        return Err(Error::Shape(format!("role {r} has no expert (experts for roles 0..{})", w.experts.len())));
    }
    let mut out = vec![0.0; rows * d];
    let mut groups = Vec::new();
    for (role, &(w1, w2)) in w.experts.iter().enumerate() {
        let members: Vec<usize> = (0..rows).filter(|&r| roles[r] as usize == role).collect();
        if members.is_empty() {
            continue;
        }
        let n = members.len();
        let in_w = if role == 0 { d } else { 2 * d };
        let mut u = Vec::with_capacity(n * in_w);
        for &r in &members {
            u.extend_from_slice(&x[r * d..(r + 1) * d]);
            if role > 0 {
                let b = behaviors[r] as usize;
                u.extend_from_slice(&w.eb[b * d..(b + 1) * d]);
            }
        }
        let mut z = vec![0.0; n * inner];
        matmul(&u, w1, &mut z, n, in_w, inner, false);
        let s: Vec<f64> = z.iter().map(|&v| silu(v)).collect();
        let mut y = vec![0.0; n * d];
        matmul(&s, w2, &mut y, n, inner, d, false);
        for (i, &r) in members.iter().enumerate() {
            out[r * d..(r + 1) * d].copy_from_slice(&y[i * d..(i + 1) * d]);
        }
        groups.push(MoeGroup { role, rows: members, u, z, s });
    }
    Ok(MoeTape { groups, out })
}

/// Role-routed feed-forward: each token goes to the fixed expert of its
/// role; no learned gate.
pub fn pb_moe(x: &[f64], roles: &[u8], behaviors: &[u16], w: &MoeWeights) -> Result<Vec<f64>> {
    let (d, inner) = (w.dim, w.inner);
    let nb = w.eb.len() / d.max(1);
    let shapes_ok = x.len() == roles.len() * d
        && behaviors.len() == roles.len()
        && w.eb.len() == nb * d
        && w.experts.iter().enumerate().all(|(j, (w1, w2))| {
            let in_w = if j == 0 { d } else { 2 * d };
            w1.len() == in_w * inner && w2.len() == inner * d
        });
    if !shapes_ok {
        return Err(Error::Shape("expert weights or inputs have inconsistent shapes".into()));
    }
    if let Some(b) = behaviors.iter().zip(roles).find(|(&b, &r)| r > 0 && b as usize >= nb) {
        return Err(Error::Shape(format!("behavior id {} outside the embedding table", b.0)));
    }
    check_finite("expert input", x)?;
    Ok(moe_forward(x, roles, behaviors, w)?.out)
}
