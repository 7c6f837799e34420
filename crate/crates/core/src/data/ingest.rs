use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::Serialize;

use super::{BehaviorSchema, Dataset, Interaction, Registry};
use crate::error::{Error, Result};

const HEADER: [&str; 4] = ["user", "item", "behavior", "timestamp"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Rejected {
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct IngestReport {
    pub valid_rows: usize,
    pub users: usize,
    pub items: usize,
    pub rejected: Vec<Rejected>,
}

/// Reads a `user\titem\tbehavior\ttimestamp` TSV.
///
/// Malformed rows are skipped and listed in the report with their 1-based
/// line numbers; with `strict` the first one is returned as an error instead.
/// A missing or wrong header is always an error. Each user's history is
/// stably sorted by timestamp, so equal timestamps keep file order.
pub fn read_interactions(
    path: &Path,
    schema: &BehaviorSchema,
    strict: bool,
) -> Result<(Dataset, IngestReport)> {
    let file = std::fs::File::open(path)?;
    parse_interactions(file, path, schema, strict)
}

pub(crate) fn parse_interactions<R: Read>(
    reader: R,
    path: &Path,
    schema: &BehaviorSchema,
    strict: bool,
) -> Result<(Dataset, IngestReport)> {
    let parse_err = |line: usize, msg: String| Error::Parse { path: path.to_path_buf(), line, msg };
    let mut lines = BufReader::new(reader).lines();
    let header = match lines.next() {
        Some(h) => h?,
        None => return Err(parse_err(1, "empty file".into())),
    };
    let cols: Vec<&str> = header.trim_end_matches('\r').split('\t').collect();
    if cols.len() < 4 || cols[..4] != HEADER {
        return Err(parse_err(1, format!("expected header {:?}, got {:?}", HEADER.join("\t"), header)));
    }

    let mut users = Registry::default();
    let mut items = Registry::default();
    let mut histories: Vec<Vec<Interaction>> = Vec::new();
    let mut report = IngestReport::default();

    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        let line = line?;
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let row = match parse_row(line, schema) {
            Ok(r) => r,
            Err(reason) => {
                if strict {
                    return Err(parse_err(lineno, reason));
                }
                report.rejected.push(Rejected { line: lineno, reason });
                continue;
            }
        };
        let user = users.intern(row.0);
        let item = items.intern(row.1);
        if histories.len() <= user as usize {
            histories.push(Vec::new());
        }
        histories[user as usize].push(Interaction { user, item, behavior: row.2, timestamp: row.3 });
        report.valid_rows += 1;
    }
    for h in &mut histories {
        h.sort_by_key(|i| i.timestamp);
    }
    report.users = users.len();
    report.items = items.len();
    Ok((Dataset { schema: schema.clone(), users, items, histories }, report))
}

fn parse_row<'a>(line: &'a str, schema: &BehaviorSchema) -> Result<(&'a str, &'a str, u16, i64), String> {
    let f: Vec<&str> = line.split('\t').collect();
    if f.len() != 4 {
        return Err(format!("expected 4 tab-separated fields, found {}", f.len()));
    }
    if f[0].is_empty() || f[1].is_empty() {
        return Err("empty user or item id".into());
    }
    let behavior = schema.id(f[2]).map_err(|_| format!("behavior {:?} not in schema", f[2]))?;
    let ts: i64 = f[3].parse().map_err(|_| format!("invalid timestamp {:?}", f[3]))?;
    if ts < 0 {
        return Err(format!("negative timestamp {ts}"));
    }
    Ok((f[0], f[1], behavior, ts))
}

/// Writes interactions in ingestion format; with `folds`, adds a trailing
/// `fold` column (one entry per row).
pub fn write_interactions<W: Write>(
    mut out: W,
    dataset: &Dataset,
    rows: &[Interaction],
    folds: Option<&[usize]>,
) -> Result<()> {
    match folds {
        Some(_) => writeln!(out, "{}\tfold", HEADER.join("\t"))?,
        None => writeln!(out, "{}", HEADER.join("\t"))?,
    }
    for (i, r) in rows.iter().enumerate() {
        write!(
            out,
            "{}\t{}\t{}\t{}",
            dataset.users.name(r.user),
            dataset.items.name(r.item),
            dataset.schema.name(r.behavior),
            r.timestamp
        )?;
        match folds {
            Some(f) => writeln!(out, "\t{}", f[i])?,
            None => writeln!(out)?,
        }
    }
    Ok(())
}
