//! Flattened token sequences with per-token annotations.

use serde::{Deserialize, Serialize};

use super::config::{Layout, ModelConfig};
use crate::data::{BehaviorId, BehaviorSchema, Interaction, ItemId, Session};
use crate::error::{Error, Result};
use crate::tokenizer::ItemTokenizer;

/// Where a token came from, for leakage audits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Provenance {
    /// Derived from an interaction in the user's session with this ordinal.
    History { session: u32 },
    /// Appended at inference time: conditioning token, generated codes or a
    /// ranking candidate.
    Prompt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub id: u32,
    /// Position inside the item run: 0 for the behavior token, `j` for the
    /// `j`-th SID token.
    pub role: u8,
    pub item: u32,
    /// Behavior of the owning item (the `[MASK]` id for a ranking candidate).
    pub behavior: BehaviorId,
    pub level: u32,
    pub session: u32,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub tokens: Vec<Token>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn ids(&self) -> Vec<u32> {
        self.tokens.iter().map(|t| t.id).collect()
    }

    pub fn roles(&self) -> Vec<u8> {
        self.tokens.iter().map(|t| t.role).collect()
    }

    pub fn item_index(&self) -> Vec<u32> {
        self.tokens.iter().map(|t| t.item).collect()
    }

    pub fn levels(&self) -> Vec<u32> {
        self.tokens.iter().map(|t| t.level).collect()
    }

    pub fn session_index(&self) -> Vec<u32> {
        self.tokens.iter().map(|t| t.session).collect()
    }

    pub fn num_items(&self) -> usize {
        self.tokens.last().map_or(0, |t| t.item as usize + 1)
    }

    fn next_item(&self) -> u32 {
        self.num_items() as u32
    }

    /// Session ordinal for appended prompt items: one past the last history
    /// session.
    fn prompt_session(&self) -> u32 {
        match self.tokens.iter().rev().find(|t| matches!(t.provenance, Provenance::History { .. })) {
            Some(t) => t.session + 1,
            None => self.tokens.last().map_or(0, |t| t.session),
        }
    }

    /// Appends one item run in the layout of `cfg`. Codes are not checked
    /// here; [`TokenSequence::validate`] does that.
    pub fn push_item(&mut self, cfg: &ModelConfig, codes: &[u32], behavior: BehaviorId, level: u32, session: u32, provenance: Provenance) {
        let item = self.next_item();
        let behavior_token = cfg.behavior_token(behavior);
        let tok = |id, role| Token { id, role, item, behavior, level, session, provenance };
        let sid = codes.iter().enumerate().map(|(j, &c)| tok(cfg.sid_token(j + 1, c), (j + 1) as u8));
        match cfg.layout {
            Layout::Generative => {
                self.tokens.push(tok(behavior_token, 0));
                self.tokens.extend(sid);
            }
            Layout::Ranking => {
                self.tokens.extend(sid);
                self.tokens.push(tok(behavior_token, 0));
            }
        }
    }

    /// Appends the conditioning behavior token that starts a generated item.
    pub fn push_condition(&mut self, behavior: BehaviorId, schema: &BehaviorSchema, cfg: &ModelConfig) {
        let session = self.prompt_session();
        self.tokens.push(Token {
            id: cfg.behavior_token(behavior),
            role: 0,
            item: self.next_item(),
            behavior,
            level: schema.level(behavior),
            session,
            provenance: Provenance::Prompt,
        });
    }

    /// The token that would follow the last one if it carried SID `code`.
    pub fn continuation(&self, code: u32, cfg: &ModelConfig) -> Result<Token> {
        let last = self.tokens.last().ok_or_else(|| Error::Shape("no item run to continue".into()))?;
        continuation_of(last, code, cfg)
    }

    /// Appends a ranking candidate: its SID tokens then `[MASK]`. The
    /// candidate carries the `[MASK]` behavior id and the maximum level.
    pub fn push_candidate(&mut self, codes: &[u32], schema: &BehaviorSchema, cfg: &ModelConfig) -> Result<()> {
        let mask = cfg.mask_token().ok_or_else(|| Error::Config("candidates need the ranking layout".into()))?;
        if codes.len() != cfg.sid_len {
            return Err(Error::Shape(format!("candidate has {} codes, expected {}", codes.len(), cfg.sid_len)));
        }
        let session = self.prompt_session();
        self.push_item(cfg, codes, mask as BehaviorId, schema.max_level(), session, Provenance::Prompt);
        Ok(())
    }

    /// Checks run structure and vocabulary ranges against `cfg`.
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let run = cfg.run_len();
        let vocab = cfg.vocab_size() as u32;
        for (i, t) in self.tokens.iter().enumerate() {
            if t.id >= vocab {
                return Err(Error::Shape(format!("token {i}: id {} outside vocabulary of {vocab}", t.id)));
            }
            if t.item as usize != i / run {
                return Err(Error::Shape(format!("token {i}: item index {} breaks runs of {run}", t.item)));
            }
            let expected_role = match cfg.layout {
                Layout::Generative => i % run,
                Layout::Ranking => (i % run + 1) % run,
            };
            if t.role as usize != expected_role {
                return Err(Error::Shape(format!("token {i}: role {} where {expected_role} expected", t.role)));
            }
            let is_behavior = cfg.is_behavior_token(t.id);
            if is_behavior != (t.role == 0) {
                return Err(Error::Shape(format!("token {i}: id {} does not match role {}", t.id, t.role)));
            }
            if let Some((j, _)) = cfg.sid_code(t.id) {
                if j != t.role as usize {
                    return Err(Error::Shape(format!("token {i}: level-{j} code in role {}", t.role)));
                }
            }
            if (t.behavior as usize) >= cfg.behavior_vocab() {
                return Err(Error::Shape(format!("token {i}: behavior {} outside vocabulary", t.behavior)));
            }
            if i % run != 0 {
                let first = &self.tokens[i - i % run];
                if (first.level, first.session, first.behavior) != (t.level, t.session, t.behavior) {
                    return Err(Error::Shape(format!("token {i}: annotations differ within item run")));
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn continuation_of(last: &Token, code: u32, cfg: &ModelConfig) -> Result<Token> {
    let role = match cfg.layout {
        Layout::Generative => last.role as usize + 1,
        Layout::Ranking if (last.role as usize) < cfg.sid_len && last.role > 0 => last.role as usize + 1,
        Layout::Ranking => 0,
    };
    if role == 0 || role > cfg.sid_len || code as usize >= cfg.codebook_size {
        return Err(Error::Shape(format!("cannot continue role {} with code {code}", last.role)));
    }
    Ok(Token { id: cfg.sid_token(role, code), role: role as u8, ..*last })
}

/// Flattens sessions into item runs, keeping the most recent whole items
/// that fit in `budget` tokens. Session ordinals are renumbered densely over
/// the kept sessions; provenance keeps the original ordinals.
pub fn tokenize_history(
    sessions: &[Session],
    schema: &BehaviorSchema,
    tokenizer: &ItemTokenizer,
    cfg: &ModelConfig,
    budget: usize,
) -> Result<TokenSequence> {
    if tokenizer.code_len() != cfg.sid_len {
        return Err(Error::Config(format!(
            "tokenizer code length {} differs from model sid_len {}",
            tokenizer.code_len(),
            cfg.sid_len
        )));
    }
    let flat: Vec<(&Session, &Interaction)> = sessions.iter().flat_map(|s| s.interactions.iter().map(move |i| (s, i))).collect();
    let keep = (budget / cfg.run_len()).min(flat.len());
    let mut seq = TokenSequence { tokens: Vec::with_capacity(keep * cfg.run_len()) };
    let mut dense = 0u32;
    let mut prev: Option<usize> = None;
    for (s, it) in &flat[flat.len() - keep..] {
        if let Some(p) = prev {
            if p != s.index {
                dense += 1;
            }
        }
        prev = Some(s.index);
        let codes = item_codes(tokenizer, it.item)?;
        seq.push_item(
            cfg,
            codes,
            it.behavior,
            schema.level(it.behavior),
            dense,
            Provenance::History { session: s.index as u32 },
        );
    }
    Ok(seq)
}

fn item_codes(tokenizer: &ItemTokenizer, item: ItemId) -> Result<&[u32]> {
    tokenizer.codes(item).ok_or_else(|| Error::Data(format!("item {item} has no code tuple")))
}
