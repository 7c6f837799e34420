//! Rotary position embedding, half-split convention: dimension `i` pairs
//! with `i + d/2` inside each head.

use crate::error::{Error, Result};

/// `base^(-2i/d)` for `i = 0..d/2`.
pub fn rope_frequencies(head_dim: usize, base: f64) -> Result<Vec<f64>> {
    if head_dim == 0 || !head_dim.is_multiple_of(2) {
        return Err(Error::Config(format!("rotary head dim must be even and positive, got {head_dim}")));
    }
    Ok((0..head_dim / 2).map(|i| base.powf(-2.0 * i as f64 / head_dim as f64)).collect())
}

/// Rotates every head of one row in place; `inverse` rotates backwards
/// (the transpose, used for gradients).
pub(crate) fn rope_row(row: &mut [f64], head_dim: usize, pos: u32, freqs: &[f64], inverse: bool) {
    if pos == 0 {
        return;
    }
    let half = head_dim / 2;
    let sign = if inverse { -1.0 } else { 1.0 };
    for head in row.chunks_exact_mut(head_dim) {
        for (i, &f) in freqs.iter().enumerate() {
            let (s, c) = (pos as f64 * f).sin_cos();
            let s = sign * s;
            let (a, b) = (head[i], head[i + half]);
            head[i] = a * c - b * s;
            head[i + half] = a * s + b * c;
        }
    }
}

/// Applies the rotation to a row-major matrix whose rows are tokens and whose
/// columns are whole heads of width `head_dim`.
pub fn rope_apply(x: &[f64], head_dim: usize, positions: &[u32], base: f64) -> Result<Vec<f64>> {
    let freqs = rope_frequencies(head_dim, base)?;
    let rows = positions.len();
    if rows == 0 || !x.len().is_multiple_of(rows) || !(x.len() / rows).is_multiple_of(head_dim) {
        return Err(Error::Shape(format!(
            "rope input of {} values does not split into {rows} rows of whole {head_dim}-wide heads",
            x.len()
        )));
    }
    let width = x.len() / rows;
    let mut out = x.to_vec();
    for (row, &p) in out.chunks_exact_mut(width).zip(positions) {
        rope_row(row, head_dim, p, &freqs, false);
    }
    Ok(out)
}
