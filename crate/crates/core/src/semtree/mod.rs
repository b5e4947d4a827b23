//! Incremental binary semantic tree over gist-token hidden states.

mod aggregate;
mod tree;

pub use aggregate::{aggregate, aggregate_values};
pub use tree::{retrieve_top_nodes, NodeInfo, NodeKind, SemanticTree, TreeNode};
