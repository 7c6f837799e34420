use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Token layout of an item run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Layout {
    /// Behavior token then `l` SID tokens; one shared output head.
    #[default]
    Generative,
    /// `l` SID tokens then the behavior token; a `[MASK]` behavior id and
    /// separate item and behavior heads.
    Ranking,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub dim: usize,
    pub inner_dim: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub layers: usize,
    /// Code tuple length `l`.
    pub sid_len: usize,
    /// Codebook size `C` per level.
    pub codebook_size: usize,
    /// Number of real behavior types in the schema.
    pub num_behaviors: usize,
    pub rope_base: f64,
    pub max_tokens: usize,
    pub session_wise: bool,
    /// Cross-level behavior interaction sublayer on/off.
    pub behavior_layer: bool,
    pub layout: Layout,
    pub norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 256,
            inner_dim: 512,
            heads: 6,
            head_dim: 64,
            layers: 8,
            sid_len: 4,
            codebook_size: 8192,
            num_behaviors: 3,
            rope_base: 10_000.0,
            max_tokens: 500,
            session_wise: false,
            behavior_layer: true,
            layout: Layout::Generative,
            norm_eps: 1e-6,
        }
    }
}

impl ModelConfig {
    /// Small configuration used by tests and the synthetic benchmark.
    pub fn desk(sid_len: usize, codebook_size: usize, num_behaviors: usize) -> Self {
        Self {
            dim: 32,
            inner_dim: 64,
            heads: 2,
            head_dim: 16,
            layers: 2,
            sid_len,
            codebook_size,
            num_behaviors,
            max_tokens: 128,
            ..Self::default()
        }
    }

    pub fn attention_width(&self) -> usize {
        self.heads * self.head_dim
    }

    /// Behavior ids, including `[MASK]` in the ranking layout.
    pub fn behavior_vocab(&self) -> usize {
        self.num_behaviors + usize::from(self.layout == Layout::Ranking)
    }

    pub fn sid_vocab(&self) -> usize {
        self.sid_len * self.codebook_size
    }

    /// Size of the input embedding table: behavior ids followed by SID ids.
    pub fn vocab_size(&self) -> usize {
        self.behavior_vocab() + self.sid_vocab()
    }

    pub fn mask_token(&self) -> Option<u32> {
        (self.layout == Layout::Ranking).then_some(self.num_behaviors as u32)
    }

    pub fn behavior_token(&self, behavior: u16) -> u32 {
        u32::from(behavior)
    }

    /// Token id of `code` at level `j` (1-based).
    pub fn sid_token(&self, j: usize, code: u32) -> u32 {
        (self.behavior_vocab() + (j - 1) * self.codebook_size) as u32 + code
    }

    pub fn is_behavior_token(&self, token: u32) -> bool {
        (token as usize) < self.behavior_vocab()
    }

    /// `(level j, code)` of a SID token id.
    pub fn sid_code(&self, token: u32) -> Option<(usize, u32)> {
        let t = (token as usize).checked_sub(self.behavior_vocab())?;
        (t < self.sid_vocab()).then(|| (t / self.codebook_size + 1, (t % self.codebook_size) as u32))
    }

    /// Tokens per item run.
    pub fn run_len(&self) -> usize {
        self.sid_len + 1
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("dim", self.dim),
            ("inner_dim", self.inner_dim),
            ("heads", self.heads),
            ("head_dim", self.head_dim),
            ("layers", self.layers),
            ("sid_len", self.sid_len),
            ("codebook_size", self.codebook_size),
            ("num_behaviors", self.num_behaviors),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be positive")));
            }
        }
        if !self.head_dim.is_multiple_of(2) {
            return Err(Error::Config(format!("model.head_dim must be even for rotary positions, got {}", self.head_dim)));
        }
        if self.max_tokens < 2 * self.run_len() {
            return Err(Error::Config(format!(
                "model.max_tokens = {} leaves no room for history plus a prompt item",
                self.max_tokens
            )));
        }
        if !(self.rope_base > 1.0 && self.rope_base.is_finite()) {
            return Err(Error::Config("model.rope_base must be finite and > 1".into()));
        }
        if !(self.norm_eps > 0.0) {
            return Err(Error::Config("model.norm_eps must be positive".into()));
        }
        if self.vocab_size() > u32::MAX as usize {
            return Err(Error::Config("vocabulary does not fit 32-bit token ids".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = ModelConfig::default();
        assert_eq!((c.dim, c.inner_dim, c.heads, c.head_dim, c.layers), (256, 512, 6, 64, 8));
        assert_eq!(c.attention_width(), 384);
        c.validate().unwrap();
    }

    #[test]
    fn vocabulary_layout() {
        let mut c = ModelConfig::desk(3, 16, 3);
        assert_eq!(c.vocab_size(), 3 + 48);
        assert_eq!(c.sid_token(1, 0), 3);
        assert_eq!(c.sid_token(3, 15), 50);
        assert_eq!(c.sid_code(50), Some((3, 15)));
        assert_eq!(c.sid_code(2), None);
        assert_eq!(c.mask_token(), None);
        c.layout = Layout::Ranking;
        assert_eq!(c.mask_token(), Some(3));
        assert_eq!(c.sid_token(1, 0), 4);
        assert!(c.is_behavior_token(3));
        assert!(!c.is_behavior_token(4));
    }

    #[test]
    fn rejects_odd_head_dim() {
        let c = ModelConfig { head_dim: 7, ..ModelConfig::desk(2, 4, 2) };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }
}
