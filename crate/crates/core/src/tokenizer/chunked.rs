use crate::error::{Error, Result};

/// Number of base-`k` digits needed to give `n` items distinct codes.
pub fn chunked_len(n: usize, k: usize) -> usize {
    let mut len = 1;
    let mut cap = k;
    while cap < n {
        cap = cap.saturating_mul(k);
        len += 1;
    }
    len
}

/// Balanced chunked IDs from interaction counts (indexed by item id).
///
/// Items are ranked by descending count, ties by item id, and rank `r` is
/// written in base `k`. The first code is the least significant digit, so
/// consecutive ranks spread round-robin over first-code buckets and each
/// bucket holds at most `ceil(|V| / k)` items.
pub fn assign_chunked_ids(counts: &[u64], k: usize) -> Result<Vec<Vec<u32>>> {
    if k < 2 {
        return Err(Error::Config("chunked ids need k >= 2".into()));
    }
    if counts.is_empty() {
        return Err(Error::Data("empty catalog".into()));
    }
    let len = chunked_len(counts.len(), k);
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    let mut codes = vec![Vec::new(); counts.len()];
    for (rank, &item) in order.iter().enumerate() {
        let mut r = rank;
        let mut digits = Vec::with_capacity(len);
        for _ in 0..len {
            digits.push((r % k) as u32);
            r /= k;
        }
        codes[item] = digits;
    }
    Ok(codes)
}
