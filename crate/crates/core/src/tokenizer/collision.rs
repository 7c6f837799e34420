use std::collections::HashSet;

use super::quantizer::{sq_dist, Codebook};
use crate::error::{Error, Result};

/// Makes code tuples unique by moving later duplicates to the nearest unused
/// final-level code.
///
/// `codes` is indexed by item id. The first item (by id) holding a tuple keeps
/// it; every later holder gets the final-level code closest to its original
/// one (by centroid distance when `last_level` is given, else by
/// `|a - b|`), ties to the smaller code, among codes whose full tuple is not
/// yet taken.
pub fn resolve_collisions(
    codes: &[Vec<u32>],
    codebook_size: usize,
    last_level: Option<&Codebook>,
) -> Result<Vec<Vec<u32>>> {
    let mut used: HashSet<&[u32]> = HashSet::with_capacity(codes.len());
    let mut first_holder = vec![false; codes.len()];
    for (i, c) in codes.iter().enumerate() {
        if c.is_empty() {
            return Err(Error::Data(format!("item {i} has an empty code tuple")));
        }
        first_holder[i] = used.insert(c.as_slice());
    }
    let mut taken: HashSet<Vec<u32>> = used.into_iter().map(<[u32]>::to_vec).collect();
    let mut out = codes.to_vec();
    for (i, c) in codes.iter().enumerate() {
        if first_holder[i] {
            continue;
        }
        let last = c.len() - 1;
        let orig = c[last] as usize;
        let dist = |cand: usize| -> f64 {
            match last_level {
                Some(book) => sq_dist(book.centroid(orig), book.centroid(cand)),
                None => (cand as f64 - orig as f64).abs(),
            }
        };
        let mut best: Option<(usize, f64)> = None;
        let mut probe = c.clone();
        for cand in 0..codebook_size {
            probe[last] = cand as u32;
            if taken.contains(&probe) {
                continue;
            }
            let d = dist(cand);
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((cand, d));
            }
        }
        let (cand, _) = best.ok_or_else(|| {
            Error::Data(format!(
                "item {i}: no free final-level code left for prefix {:?}",
                &c[..last]
            ))
        })?;
        probe[last] = cand as u32;
        out[i] = probe.clone();
        taken.insert(probe);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line_book(size: usize) -> Codebook {
        Codebook { level: 2, dim: 1, centroids: (0..size).map(|c| c as f64).collect() }
    }

    #[test]
    fn identity_without_collisions() {
        let codes = vec![vec![0, 1], vec![0, 2], vec![1, 1]];
        assert_eq!(resolve_collisions(&codes, 4, None).unwrap(), codes);
    }

    #[test]
    fn moves_second_item_to_nearest_free() {
        // 3 and 5 are taken, so the nearest free code to 4 on the line is 2
        let codes = vec![vec![0, 4], vec![0, 3], vec![0, 5], vec![0, 4]];
        let out = resolve_collisions(&codes, 6, Some(&line_book(6))).unwrap();
        assert_eq!(out[0], vec![0, 4]);
        assert_eq!(out[3], vec![0, 2]);
    }

    #[test]
    fn uses_centroid_distance_not_index() {
        let book = Codebook { level: 1, dim: 1, centroids: vec![0.0, 10.0, 0.5] };
        let out = resolve_collisions(&[vec![0], vec![0]], 3, Some(&book)).unwrap();
        assert_eq!(out[1], vec![2]);
    }

    #[test]
    fn exhaustive_assignment() {
        let c = 8;
        let codes = vec![vec![1, 3]; c];
        let out = resolve_collisions(&codes, c, Some(&line_book(c))).unwrap();
        let set: HashSet<_> = out.iter().collect();
        assert_eq!(set.len(), c);
        assert!(out.iter().all(|t| t[0] == 1));
        // one more than available codes must fail
        assert!(resolve_collisions(&vec![vec![1, 3]; c + 1], c, None).is_err());
    }
}
