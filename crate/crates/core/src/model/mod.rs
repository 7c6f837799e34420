//! Decoder model: token sequences, masks, the block stack, and checkpoints.
//!
//! Each block is pre-norm: causal (or session-wise) self-attention with
//! rotary positions, the cross-level behavior interaction sublayer, then
//! role-routed experts, each added back to the residual stream.

pub mod attention;
pub mod checkpoint;
pub mod config;
mod forward;
mod infer;
pub mod masks;
pub mod ops;
pub mod params;
pub mod rope;
pub mod sequence;

pub use attention::{behavior_interaction_layer, masked_attention, pb_moe, BehaviorWeights, MoeWeights};
pub use config::{Layout, ModelConfig};
pub use forward::{LossSum, Logits};
pub use infer::KvCache;
pub use masks::{build_behavior_mask, build_causal_mask, build_session_mask_and_positions, Mask};
pub use params::{ModelParams, ParamIndex, Tensor};
pub use rope::{rope_apply, rope_frequencies};
pub use sequence::{tokenize_history, Provenance, Token, TokenSequence};


use crate::error::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    index: ParamIndex,
    params: ModelParams,
}

impl Model {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = params::init_params(&config, seed)?;
        let index = ParamIndex::new(&config);
        Ok(Self { config, index, params })
    }

    pub fn from_params(config: ModelConfig, params: ModelParams) -> Result<Self> {
        config.validate()?;
        params::check_params(&config, &params)?;
        let index = ParamIndex::new(&config);
        Ok(Self { config, index, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn index(&self) -> &ParamIndex {
        &self.index
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    /// Mutable access for optimizers and tests; shapes must be preserved.
    pub fn params_mut(&mut self) -> &mut ModelParams {
        &mut self.params
    }

    pub fn into_params(self) -> ModelParams {
        self.params
    }
}

#[cfg(test)]
mod tests;
