//! Pieces shared by inference sessions and the training forward.

use crate::backbone::{project_all_layers, Bound, LayerKv, LeafContext, WindowOutput};
use crate::error::Result;
use crate::numeric::{Tape, Tensor, Var};
use crate::semtree::aggregate;

/// A tree node on a tape: its hidden vector and the per-layer key/value row
/// it contributes as context.
#[derive(Clone, Debug)]
pub struct NodeVars<'t> {
    pub hidden: Var<'t>,
    pub kv: Vec<LayerKv<'t>>,
}

/// A detached tree node.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeState {
    pub hidden: Vec<f64>,
    /// Per layer, the pre-rotary key and value rows.
    pub kv: Vec<(Vec<f64>, Vec<f64>)>,
}

impl NodeVars<'_> {
    pub fn detach(&self) -> NodeState {
        NodeState {
            hidden: self.hidden.value().to_vec(),
            kv: self
                .kv
                .iter()
                .map(|kv| (kv.k.value().to_vec(), kv.v.value().to_vec()))
                .collect(),
        }
    }
}

/// `(node id, position)` pairs for nodes listed in flatten order.
pub fn context_keys(flat: &[usize]) -> Vec<(usize, usize)> {
    flat.iter().enumerate().map(|(pos, &id)| (id, pos)).collect()
}

/// The leaf for the gist token at window row `row`.
pub fn leaf_vars<'t>(bound: &Bound<'t>, out: &WindowOutput<'t>, row: usize) -> Result<NodeVars<'t>> {
    let hidden = out.hidden.slice_rows(row, row + 1)?;
    let kv = match bound.config.leaf_ctx {
        LeafContext::Projected => project_all_layers(bound, hidden)?,
        LeafContext::Cached => out
            .window_kv
            .iter()
            .map(|kv| {
                Ok(LayerKv {
                    k: kv.k.slice_rows(row, row + 1)?,
                    v: kv.v.slice_rows(row, row + 1)?,
                })
            })
            .collect::<Result<_>>()?,
    };
    Ok(NodeVars { hidden, kv })
}

/// Parent of two adjacent nodes.
pub fn internal_vars<'t>(bound: &Bound<'t>, left: Var<'t>, right: Var<'t>) -> Result<NodeVars<'t>> {
    let hidden = aggregate(bound, &[left, right])?;
    let kv = project_all_layers(bound, hidden)?;
    Ok(NodeVars { hidden, kv })
}

/// Stacks the context rows of `nodes` for every layer.
pub fn context_from_vars<'t>(tape: &'t Tape, nodes: &[&NodeVars<'t>], n_layers: usize) -> Result<Vec<LayerKv<'t>>> {
    if nodes.is_empty() {
        return Ok(Vec::new());
    }
    (0..n_layers)
        .map(|l| {
            let ks: Vec<Var<'t>> = nodes.iter().map(|n| n.kv[l].k).collect();
            let vs: Vec<Var<'t>> = nodes.iter().map(|n| n.kv[l].v).collect();
            Ok(LayerKv {
                k: tape.concat_rows(&ks)?,
                v: tape.concat_rows(&vs)?,
            })
        })
        .collect()
}

/// Context rows of detached nodes as tape constants. With `zero` every row
/// is replaced by zeros, which is what an all-zero hidden vector projects to.
pub fn context_from_states<'t>(
    tape: &'t Tape,
    nodes: &[&NodeState],
    n_layers: usize,
    d: usize,
    zero: bool,
) -> Result<Vec<LayerKv<'t>>> {
    if nodes.is_empty() {
        return Ok(Vec::new());
    }
    let stack = |pick: &dyn Fn(&NodeState) -> &[f64]| -> Result<Tensor> {
        let mut data = Vec::with_capacity(nodes.len() * d);
        for n in nodes {
            if zero {
                data.extend(std::iter::repeat(0.0).take(d));
            } else {
                data.extend_from_slice(pick(n));
            }
        }
        Tensor::new(vec![nodes.len(), d], data)
    };
    (0..n_layers)
        .map(|l| {
            Ok(LayerKv {
                k: tape.constant(&stack(&|n| &n.kv[l].0)?),
                v: tape.constant(&stack(&|n| &n.kv[l].1)?),
            })
        })
        .collect()
}

/// Tape constant holding one node's hidden vector as a row.
pub fn hidden_constant<'t>(tape: &'t Tape, node: &NodeState) -> Result<Var<'t>> {
    Ok(tape.constant(&Tensor::new(vec![1, node.hidden.len()], node.hidden.clone())?))
}
