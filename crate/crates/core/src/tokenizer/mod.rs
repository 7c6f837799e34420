//! Item tokenization: semantic IDs from residual quantization, balanced
//! chunked IDs from popularity, and the prefix trie used to constrain
//! generation to catalog items.

mod chunked;
mod collision;
mod quantizer;
mod trie;

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{ItemId, Registry};
use crate::error::{Error, Result};

pub use chunked::{assign_chunked_ids, chunked_len};
pub use collision::resolve_collisions;
pub use quantizer::{
    encode_item, kmeans, quantization_error, read_codebooks, train_residual_quantizer, write_codebooks, Codebook,
    MAX_ITERATIONS,
};
pub use trie::{NodeId, PrefixTrie};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IdKind {
    /// Semantic IDs (residual quantization or imported).
    Sid,
    /// Balanced chunked IDs.
    Cid,
}

/// Code tuple per item, all of one length, unique across the catalog.
#[derive(Debug, Clone)]
pub struct ItemTokenizer {
    kind: IdKind,
    codebook_size: usize,
    codes: Vec<Vec<u32>>,
    trie: PrefixTrie,
}

impl ItemTokenizer {
    /// Wraps precomputed codes (indexed by item id). Codes must be unique,
    /// of equal length and below `codebook_size`.
    pub fn new(kind: IdKind, codebook_size: usize, codes: Vec<Vec<u32>>) -> Result<Self> {
        if let Some((i, c)) = codes
            .iter()
            .enumerate()
            .find(|(_, c)| c.iter().any(|&v| v as usize >= codebook_size))
        {
            return Err(Error::Data(format!("item {i} code {c:?} exceeds codebook size {codebook_size}")));
        }
        let trie = PrefixTrie::build(codes.iter().enumerate().map(|(i, c)| (i as ItemId, c.as_slice())))?;
        Ok(Self { kind, codebook_size, codes, trie })
    }

    /// Trains residual k-means codebooks and assigns collision-free SIDs.
    pub fn from_features(
        features: &[Vec<f64>],
        levels: usize,
        codebook_size: usize,
        seed: u64,
    ) -> Result<(Self, Vec<Codebook>)> {
        let books = train_residual_quantizer(features, levels, codebook_size, seed)?;
        let raw: Vec<Vec<u32>> = features.iter().map(|f| encode_item(f, &books)).collect::<Result<_>>()?;
        let codes = resolve_collisions(&raw, codebook_size, books.last())?;
        Ok((Self::new(IdKind::Sid, codebook_size, codes)?, books))
    }

    pub fn from_counts(counts: &[u64], k: usize) -> Result<Self> {
        Self::new(IdKind::Cid, k, assign_chunked_ids(counts, k)?)
    }

    pub fn kind(&self) -> IdKind {
        self.kind
    }

    /// Tuple length `l`.
    pub fn code_len(&self) -> usize {
        self.trie.depth()
    }

    pub fn codebook_size(&self) -> usize {
        self.codebook_size
    }

    pub fn num_items(&self) -> usize {
        self.codes.len()
    }

    pub fn codes(&self, item: ItemId) -> Option<&[u32]> {
        self.codes.get(item as usize).map(Vec::as_slice)
    }

    pub fn all_codes(&self) -> &[Vec<u32>] {
        &self.codes
    }

    pub fn trie(&self) -> &PrefixTrie {
        &self.trie
    }

    /// `item\tc1\t...\tcl` with a header line.
    pub fn write_tsv<W: Write>(&self, mut w: W, items: &Registry) -> Result<()> {
        let header: Vec<String> = (1..=self.code_len()).map(|j| format!("c{j}")).collect();
        writeln!(w, "item\t{}", header.join("\t"))?;
        for (i, c) in self.codes.iter().enumerate() {
            let cs: Vec<String> = c.iter().map(u32::to_string).collect();
            writeln!(w, "{}\t{}", items.name(i as u32), cs.join("\t"))?;
        }
        Ok(())
    }

    /// Imports externally produced SIDs keyed by item name. Every item of the
    /// registry must be present; unknown items are ignored. Duplicate tuples
    /// are resolved like trained ones, by code distance.
    pub fn import_tsv(path: &Path, items: &Registry, codebook_size: usize) -> Result<Self> {
        let rows = read_numeric_tsv::<u32>(path)?;
        let mut codes: Vec<Option<Vec<u32>>> = vec![None; items.len()];
        for (name, c) in rows {
            if let Some(id) = items.get(&name) {
                codes[id as usize] = Some(c);
            }
        }
        let codes: Vec<Vec<u32>> = codes
            .into_iter()
            .enumerate()
            .map(|(i, c)| c.ok_or_else(|| Error::Data(format!("item {:?} has no SID", items.name(i as u32)))))
            .collect::<Result<_>>()?;
        let codes = resolve_collisions(&codes, codebook_size, None)?;
        Self::new(IdKind::Sid, codebook_size, codes)
    }
}

/// Feature vectors per registry item from an `item\tf1\t...` TSV.
pub fn read_features(path: &Path, items: &Registry) -> Result<Vec<Vec<f64>>> {
    let rows = read_numeric_tsv::<f64>(path)?;
    let mut out: Vec<Option<Vec<f64>>> = vec![None; items.len()];
    for (name, f) in rows {
        if let Some(id) = items.get(&name) {
            out[id as usize] = Some(f);
        }
    }
    out.into_iter()
        .enumerate()
        .map(|(i, f)| f.ok_or_else(|| Error::Data(format!("item {:?} has no features", items.name(i as u32)))))
        .collect()
}

pub fn write_features<W: Write>(mut w: W, items: &Registry, features: &[Vec<f64>]) -> Result<()> {
    let dim = features.first().map_or(0, Vec::len);
    let header: Vec<String> = (1..=dim).map(|j| format!("f{j}")).collect();
    writeln!(w, "item\t{}", header.join("\t"))?;
    for (i, f) in features.iter().enumerate() {
        let fs: Vec<String> = f.iter().map(|v| format!("{v}")).collect();
        writeln!(w, "{}\t{}", items.name(i as u32), fs.join("\t"))?;
    }
    Ok(())
}

/// Rows of `name\tv1\tv2...`; a first line whose values don't parse is
/// treated as a header.
fn read_numeric_tsv<T: std::str::FromStr>(path: &Path) -> Result<Vec<(String, Vec<T>)>> {
    let file = std::fs::File::open(path)?;
    let mut rows = Vec::new();
    let mut width = None;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let name = fields.next().unwrap_or_default().to_string();
        let values: std::result::Result<Vec<T>, _> = fields.map(str::parse::<T>).collect();
        let values = match values {
            Ok(v) => v,
            Err(_) if i == 0 => continue,
            Err(_) => {
                return Err(Error::Parse { path: path.to_path_buf(), line: i + 1, msg: "non-numeric value".into() })
            }
        };
        if values.is_empty() || *width.get_or_insert(values.len()) != values.len() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: format!("expected {} values, found {}", width.unwrap_or(0), values.len()),
            });
        }
        rows.push((name, values));
    }
    Ok(rows)
}
