//! C interface to a trained hiergen model.
//!
//! Every fallible function returns an [`HgStatus`]. On failure the message is
//! kept per thread and read with [`hg_last_error_message`]. Item and behavior
//! ids are the dense ids used by the tokenizer and schema files: item `i` is
//! row `i` of the tokenizer's code table, behavior `b` is entry `b` of the
//! schema's behavior list.

use std::cell::RefCell;
use std::collections::BTreeSet;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use hiergen::data::{BehaviorSchema, Interaction, Session};
use hiergen::eval::{constrained_beam_search, ndcg_at_k, Generative};
use hiergen::model::{checkpoint, tokenize_history, Layout, Model};
use hiergen::pipeline::{load_tokenizer, resolve_model_config};
use hiergen::ranking::{auroc, score_candidates, BinaryScore};
use hiergen::tokenizer::ItemTokenizer;
use hiergen::Error;

/// Result of every fallible call. Values 2 to 4 match the CLI exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HgStatus {
    Ok = 0,
    NullArgument = 1,
    Config = 2,
    Data = 3,
    Runtime = 4,
    InvalidUtf8 = 5,
    Panic = 6,
}

/// One past interaction. Consecutive entries with the same `session` value
/// form one session; sessions must appear in chronological order.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct HgInteraction {
    pub item: u32,
    pub behavior: u16,
    pub session: u32,
    pub timestamp: i64,
}

/// Opaque handle: a checkpoint with its tokenizer and behavior schema.
pub struct HgModel {
    model: Model,
    tokenizer: ItemTokenizer,
    schema: BehaviorSchema,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let msg = CString::new(msg.replace('\0', " ")).expect("interior nul removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

struct Failure(HgStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match e.exit_code() {
            2 => HgStatus::Config,
            3 => HgStatus::Data,
            _ => HgStatus::Runtime,
        };
        Failure(status, e.to_string())
    }
}

fn null(name: &str) -> Failure {
    Failure(HgStatus::NullArgument, format!("`{name}` is null"))
}

/// Runs `f`, converting errors and panics into a status and a stored message.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> HgStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => HgStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(format!("panic: {msg}"));
            HgStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char, name: &str) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(null(name));
    }
    let s = CStr::from_ptr(p).to_str().map_err(|_| Failure(HgStatus::InvalidUtf8, format!("`{name}` is not valid UTF-8")))?;
    Ok(PathBuf::from(s))
}

/// A slice from a C pointer; `len == 0` accepts a null pointer.
unsafe fn slice_arg<'a, T>(p: *const T, len: usize, name: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(name));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn model_arg<'a>(m: *const HgModel) -> Result<&'a HgModel, Failure> {
    m.as_ref().ok_or_else(|| null("model"))
}

fn sessions_from(history: &[HgInteraction], h: &HgModel) -> Result<Vec<Session>, Failure> {
    let mut sessions: Vec<Session> = Vec::new();
    let mut last = None;
    for (i, x) in history.iter().enumerate() {
        if x.item as usize >= h.tokenizer.num_items() {
            return Err(Failure(HgStatus::Data, format!("history[{i}]: item {} is not in the tokenizer", x.item)));
        }
        if x.behavior as usize >= h.schema.len() {
            return Err(Failure(HgStatus::Data, format!("history[{i}]: behavior {} is not in the schema", x.behavior)));
        }
        if last != Some(x.session) {
            sessions.push(Session { index: sessions.len(), interactions: Vec::new() });
            last = Some(x.session);
        }
        let s = sessions.last_mut().expect("pushed above");
        s.interactions.push(Interaction { user: 0, item: x.item, behavior: x.behavior, timestamp: x.timestamp });
    }
    Ok(sessions)
}

fn behavior_arg(h: &HgModel, behavior: u16) -> Result<u16, Failure> {
    if behavior as usize >= h.schema.len() {
        return Err(Failure(HgStatus::Config, format!("behavior {behavior} is not in the schema")));
    }
    Ok(behavior)
}

/// Library version as a static nul-terminated string.
#[no_mangle]
pub extern "C" fn hg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or null if none. The
/// pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn hg_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |s| s.as_ptr()))
}

/// Loads a checkpoint, its tokenizer (JSON as written by the tokenize stage)
/// and a behavior schema (TOML). A null `schema_path` selects the built-in
/// short-video schema. On success `*out` owns a handle to release with
/// [`hg_model_free`].
///
/// # Safety
/// Path arguments must be null or nul-terminated strings; `out` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn hg_model_open(
    checkpoint_path: *const c_char,
    tokenizer_path: *const c_char,
    schema_path: *const c_char,
    out: *mut *mut HgModel,
) -> HgStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let ckpt = path_arg(checkpoint_path, "checkpoint_path")?;
        let tok_path = path_arg(tokenizer_path, "tokenizer_path")?;
        let schema = if schema_path.is_null() {
            BehaviorSchema::short_video()
        } else {
            BehaviorSchema::load(&path_arg(schema_path, "schema_path")?)?
        };
        let tokenizer = load_tokenizer(&tok_path)?;
        let model = checkpoint::load(&ckpt)?;
        let expected = resolve_model_config(model.config(), &tokenizer, &schema)?;
        if &expected != model.config() {
            return Err(Failure(HgStatus::Config, "checkpoint does not match the tokenizer and schema".into()));
        }
        *out = Box::into_raw(Box::new(HgModel { model, tokenizer, schema }));
        Ok(())
    })
}

/// Releases a handle from [`hg_model_open`]. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn hg_model_free(model: *mut HgModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of items the model can generate or score.
///
/// # Safety
/// `model` must be a live handle or null; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hg_model_num_items(model: *const HgModel, out: *mut usize) -> HgStatus {
    guard(|| {
        let h = model_arg(model)?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = h.tokenizer.num_items();
        Ok(())
    })
}

/// Generates up to `capacity` items for the next `behavior` after `history`
/// with constrained beam search. Items go to `out_items` and their
/// sequence log-probabilities to `out_scores` (may be null), best first;
/// `*out_len` receives the count. Needs a generative checkpoint.
///
/// # Safety
/// `history` must point to `history_len` entries; `out_items` and a non-null
/// `out_scores` must have room for `capacity` entries.
#[no_mangle]
pub unsafe extern "C" fn hg_recommend(
    model: *const HgModel,
    history: *const HgInteraction,
    history_len: usize,
    behavior: u16,
    beam: usize,
    out_items: *mut u32,
    out_scores: *mut f64,
    capacity: usize,
    out_len: *mut usize,
) -> HgStatus {
    guard(|| {
        let h = model_arg(model)?;
        let history = slice_arg(history, history_len, "history")?;
        if out_items.is_null() && capacity > 0 {
            return Err(null("out_items"));
        }
        let out_len = out_len.as_mut().ok_or_else(|| null("out_len"))?;
        if h.model.config().layout != Layout::Generative {
            return Err(Failure(HgStatus::Config, "recommendation needs a generative checkpoint".into()));
        }
        let behavior = behavior_arg(h, behavior)?;
        let sessions = sessions_from(history, h)?;
        let gen = Generative { model: &h.model, tokenizer: &h.tokenizer, schema: &h.schema, beam };
        let prompt = gen.prompt(&sessions, behavior)?;
        let ranked = constrained_beam_search(&h.model, &prompt, h.tokenizer.trie(), beam, capacity)?;
        for (i, (item, score)) in ranked.items.iter().enumerate() {
            *out_items.add(i) = *item;
            if !out_scores.is_null() {
                *out_scores.add(i) = *score;
            }
        }
        *out_len = ranked.items.len();
        Ok(())
    })
}

/// Probability that each candidate item receives `behavior` after
/// `history`, written to `out_scores`. Needs a ranking checkpoint.
///
/// # Safety
/// `history` must point to `history_len` entries, `candidates` and
/// `out_scores` to `num_candidates` entries.
#[no_mangle]
pub unsafe extern "C" fn hg_rank(
    model: *const HgModel,
    history: *const HgInteraction,
    history_len: usize,
    candidates: *const u32,
    num_candidates: usize,
    behavior: u16,
    out_scores: *mut f64,
) -> HgStatus {
    guard(|| {
        let h = model_arg(model)?;
        let history = slice_arg(history, history_len, "history")?;
        let candidates = slice_arg(candidates, num_candidates, "candidates")?;
        if out_scores.is_null() && num_candidates > 0 {
            return Err(null("out_scores"));
        }
        let cfg = h.model.config();
        if cfg.layout != Layout::Ranking {
            return Err(Failure(HgStatus::Config, "ranking needs a ranking checkpoint".into()));
        }
        let behavior = behavior_arg(h, behavior)?;
        let sessions = sessions_from(history, h)?;
        let seq = tokenize_history(&sessions, &h.schema, &h.tokenizer, cfg, cfg.max_tokens - cfg.run_len())?;
        let codes: Vec<&[u32]> = candidates
            .iter()
            .map(|&c| h.tokenizer.codes(c).ok_or_else(|| Failure(HgStatus::Data, format!("candidate {c} is not in the tokenizer"))))
            .collect::<Result<_, _>>()?;
        let scores = score_candidates(&h.model, &seq, &codes, &h.schema, behavior)?;
        std::ptr::copy_nonoverlapping(scores.as_ptr(), out_scores, scores.len());
        Ok(())
    })
}

/// Area under the ROC curve of `scores` against 0/1 `labels`, ties counted
/// as one half.
///
/// # Safety
/// `scores` and `labels` must point to `len` entries; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hg_auroc(scores: *const f64, labels: *const u8, len: usize, out: *mut f64) -> HgStatus {
    guard(|| {
        let scores = slice_arg(scores, len, "scores")?;
        let labels = slice_arg(labels, len, "labels")?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let pairs: Vec<BinaryScore> = scores.iter().zip(labels).map(|(&score, &l)| BinaryScore { score, label: l != 0 }).collect();
        *out = auroc(&pairs)?;
        Ok(())
    })
}

/// NDCG@k of a ranked item list against a target set. Fails with
/// `HG_STATUS_DATA` when the target set is empty or `k` is zero.
///
/// # Safety
/// `ranked` and `targets` must point to `ranked_len` and `targets_len`
/// entries; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hg_ndcg_at_k(
    ranked: *const u32,
    ranked_len: usize,
    targets: *const u32,
    targets_len: usize,
    k: usize,
    out: *mut f64,
) -> HgStatus {
    guard(|| {
        let ranked = slice_arg(ranked, ranked_len, "ranked")?;
        let targets: BTreeSet<u32> = slice_arg(targets, targets_len, "targets")?.iter().copied().collect();
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = ndcg_at_k(ranked, &targets, k).ok_or_else(|| Failure(HgStatus::Data, "NDCG is undefined for no targets or k = 0".into()))?;
        Ok(())
    })
}
