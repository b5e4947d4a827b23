use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How leaf nodes feed keys and values to later windows.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LeafContext {
    /// Every node, leaf or internal, goes through the node-context projections.
    #[default]
    Projected,
    /// Leaves reuse the per-layer key/value their gist token produced while encoding.
    Cached,
}

/// Shape of the miniature decoder and its aggregator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    /// 256 byte values plus the gist token, which is always the last id.
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    /// Longest window (tree context excluded) a single forward may see.
    pub max_window: usize,
    pub rope_base: f64,
    pub agg_heads: usize,
    /// Per-head width of the aggregator's query/key scoring space.
    pub agg_score_dim: usize,
    pub leaf_ctx: LeafContext,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            vocab_size: 257,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 256,
            max_window: 512,
            rope_base: 10_000.0,
            agg_heads: 4,
            agg_score_dim: 4,
            leaf_ctx: LeafContext::Projected,
        }
    }
}

impl BackboneConfig {
    /// The small instance used by the gradient-check suites.
    pub fn tiny() -> Self {
        BackboneConfig {
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            d_ff: 32,
            max_window: 128,
            agg_heads: 2,
            agg_score_dim: 4,
            ..Self::default()
        }
    }

    pub fn gist_id(&self) -> usize {
        self.vocab_size - 1
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn agg_head_dim(&self) -> usize {
        self.d_model / self.agg_heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::arg(m));
        if self.vocab_size < 2 {
            return bad(format!("vocab_size {} < 2", self.vocab_size));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.d_head() % 2 != 0 {
            return bad(format!("head width {} must be even for rotary", self.d_head()));
        }
        if self.agg_heads == 0 || self.d_model % self.agg_heads != 0 {
            return bad(format!(
                "d_model {} not divisible by agg_heads {}",
                self.d_model, self.agg_heads
            ));
        }
        if self.n_layers == 0 || self.d_ff == 0 || self.agg_score_dim == 0 || self.max_window == 0 {
            return bad("layer count, d_ff, agg_score_dim and max_window must be positive".into());
        }
        if !(self.rope_base > 1.0) {
            return bad(format!("rope_base {} must exceed 1", self.rope_base));
        }
        Ok(())
    }
}
