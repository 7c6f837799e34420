//! Residual k-means quantizer producing semantic IDs from item features.

use std::io::{Read, Write};

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng;

pub const MAX_ITERATIONS: usize = 100;

/// One level of centroids, `size` rows of `dim` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub level: usize,
    pub dim: usize,
    pub centroids: Vec<f64>,
}

impl Codebook {
    pub fn size(&self) -> usize {
        self.centroids.len() / self.dim
    }

    pub fn centroid(&self, c: usize) -> &[f64] {
        &self.centroids[c * self.dim..(c + 1) * self.dim]
    }

    /// Nearest centroid, ties to the smaller index.
    pub fn nearest(&self, x: &[f64]) -> usize {
        let mut best = (0, f64::INFINITY);
        for c in 0..self.size() {
            let d = sq_dist(x, self.centroid(c));
            if d < best.1 {
                best = (c, d);
            }
        }
        best.0
    }
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check_features(features: &[Vec<f64>]) -> Result<usize> {
    let dim = features
        .first()
        .map(Vec::len)
        .ok_or_else(|| Error::Data("no feature vectors".into()))?;
    if dim == 0 {
        return Err(Error::Data("feature vectors are empty".into()));
    }
    for (i, f) in features.iter().enumerate() {
        if f.len() != dim {
            return Err(Error::Shape(format!("feature {i} has dim {} (expected {dim})", f.len())));
        }
        if f.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("feature {i} has non-finite values")));
        }
    }
    Ok(dim)
}

/// Lloyd's k-means with k-means++ seeding.
///
/// When fewer than `k` distinct points exist, clustering runs with the
/// distinct count and the codebook is padded by repeating centroids, so it
/// always holds exactly `k` rows.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64, level: usize) -> Result<Codebook> {
    let dim = check_features(points)?;
    if k == 0 {
        return Err(Error::Config("codebook size must be positive".into()));
    }
    let mut distinct: Vec<&Vec<f64>> = points.iter().collect();
    distinct.sort_by(|a, b| a.iter().zip(b.iter()).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal));
    distinct.dedup();
    let k_eff = k.min(distinct.len());

    let mut rng = rng::seeded(seed);
    let n = points.len();
    let mut centroids: Vec<f64> = Vec::with_capacity(k * dim);
    let first = rng.gen_range(0..n);
    centroids.extend_from_slice(&points[first]);
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &points[first])).collect();
    while centroids.len() / dim < k_eff {
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            break;
        }
        let t = rng.gen::<f64>() * total;
        let mut acc = 0.0;
        let pick = d2
            .iter()
            .position(|&d| {
                acc += d;
                acc > t && d > 0.0
            })
            .or_else(|| d2.iter().rposition(|&d| d > 0.0))
            .unwrap();
        let c = points[pick].clone();
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, &c));
        }
        centroids.extend_from_slice(&c);
    }
    let k_eff = centroids.len() / dim;

    let mut assign = vec![usize::MAX; n];
    for _ in 0..MAX_ITERATIONS {
        let book = Codebook { level, dim, centroids: centroids.clone() };
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let c = book.nearest(p);
            if assign[i] != c {
                assign[i] = c;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![0.0; k_eff * dim];
        let mut counts = vec![0usize; k_eff];
        for (i, p) in points.iter().enumerate() {
            counts[assign[i]] += 1;
            for (s, v) in sums[assign[i] * dim..].iter_mut().zip(p) {
                *s += v;
            }
        }
        for c in 0..k_eff {
            // empty clusters keep their previous centroid
            if counts[c] > 0 {
                for j in 0..dim {
                    centroids[c * dim + j] = sums[c * dim + j] / counts[c] as f64;
                }
            }
        }
    }
    for c in k_eff..k {
        let src = (c % k_eff) * dim;
        let row: Vec<f64> = centroids[src..src + dim].to_vec();
        centroids.extend_from_slice(&row);
    }
    Ok(Codebook { level, dim, centroids })
}

/// Trains `levels` codebooks; level j clusters the residuals left after
/// subtracting the nearest centroids of levels before j.
pub fn train_residual_quantizer(
    features: &[Vec<f64>],
    levels: usize,
    codebook_size: usize,
    seed: u64,
) -> Result<Vec<Codebook>> {
    check_features(features)?;
    if levels == 0 {
        return Err(Error::Config("quantizer needs at least one level".into()));
    }
    let mut residuals: Vec<Vec<f64>> = features.to_vec();
    let mut books = Vec::with_capacity(levels);
    for level in 0..levels {
        let book = kmeans(&residuals, codebook_size, rng::derive_seed(seed, level as u64, 0), level + 1)?;
        for r in residuals.iter_mut() {
            let c = book.nearest(r);
            for (x, m) in r.iter_mut().zip(book.centroid(c)) {
                *x -= m;
            }
        }
        books.push(book);
    }
    Ok(books)
}

/// Greedy residual encoding: nearest centroid at each level.
pub fn encode_item(features: &[f64], books: &[Codebook]) -> Result<Vec<u32>> {
    let mut r = features.to_vec();
    let mut codes = Vec::with_capacity(books.len());
    for b in books {
        if b.dim != r.len() {
            return Err(Error::Shape(format!("feature dim {} vs codebook dim {}", r.len(), b.dim)));
        }
        let c = b.nearest(&r);
        for (x, m) in r.iter_mut().zip(b.centroid(c)) {
            *x -= m;
        }
        codes.push(c as u32);
    }
    Ok(codes)
}

/// Mean squared norm of what remains after encoding with `books`.
pub fn quantization_error(features: &[Vec<f64>], books: &[Codebook]) -> Result<f64> {
    let mut total = 0.0;
    for f in features {
        let codes = encode_item(f, books)?;
        let mut r = f.clone();
        for (b, &c) in books.iter().zip(&codes) {
            for (x, m) in r.iter_mut().zip(b.centroid(c as usize)) {
                *x -= m;
            }
        }
        total += r.iter().map(|v| v * v).sum::<f64>();
    }
    Ok(total / features.len().max(1) as f64)
}

/// Binary layout: `l`, `C`, `d_f` as little-endian u32, then all centroids as
/// little-endian f32, level-major.
pub fn write_codebooks<W: Write>(mut w: W, books: &[Codebook]) -> Result<()> {
    let first = books.first().ok_or_else(|| Error::Data("no codebooks to write".into()))?;
    let (size, dim) = (first.size(), first.dim);
    if books.iter().any(|b| b.size() != size || b.dim != dim) {
        return Err(Error::Shape("codebooks differ in size".into()));
    }
    for v in [books.len(), size, dim] {
        w.write_all(&(v as u32).to_le_bytes())?;
    }
    for b in books {
        for &c in &b.centroids {
            w.write_all(&(c as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_codebooks<R: Read>(mut r: R) -> Result<Vec<Codebook>> {
    let mut word = [0u8; 4];
    let mut header = [0usize; 3];
    for h in header.iter_mut() {
        r.read_exact(&mut word)?;
        *h = u32::from_le_bytes(word) as usize;
    }
    let [levels, size, dim] = header;
    if levels == 0 || size == 0 || dim == 0 {
        return Err(Error::Data(format!("bad codebook header {header:?}")));
    }
    let mut books = Vec::with_capacity(levels);
    for level in 0..levels {
        let mut centroids = Vec::with_capacity(size * dim);
        for _ in 0..size * dim {
            r.read_exact(&mut word)?;
            let v = f32::from_le_bytes(word);
            if !v.is_finite() {
                return Err(Error::Numeric("non-finite centroid".into()));
            }
            centroids.push(v as f64);
        }
        books.push(Codebook { level: level + 1, dim, centroids });
    }
    Ok(books)
}
