//! Miniature causal decoder with separate text and gist projections and
//! injectable tree-node context.

pub mod checkpoint;
mod config;
mod encode;
mod layout;
mod params;

pub use config::{BackboneConfig, LeafContext};
pub use encode::{
    encode_window, lm_logits, project_all_layers, project_tree_context, EncodeOptions, LayerKv,
    WindowOutput,
};
pub use layout::{AttentionLayout, TokenKind};
pub use params::{AggSlots, Bound, Group, LayerSlots, ParameterSet, Phase, Slots};

#[cfg(test)]
mod tests;
