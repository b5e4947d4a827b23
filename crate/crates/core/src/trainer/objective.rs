//! Training objectives. Both are next-token cross-entropy; the gist
//! objective runs the compression pipeline with every node kept on the tape.

use crate::backbone::{encode_window, AttentionLayout, Bound, EncodeOptions, ParameterSet};
use crate::compressor::pipeline::{context_from_vars, context_keys, internal_vars, leaf_vars, NodeVars};
use crate::error::{Error, Result};
use crate::numeric::{Tape, Var};
use crate::segmenter::{build_plan, ScoringConfig, SegmentPlan};
use crate::semtree::SemanticTree;

/// Text-row logits of one document in stream order, with the token each row
/// predicts.
pub struct Predictions<'t> {
    pub logits: Var<'t>,
    pub targets: Vec<usize>,
    /// Stream position of the token that produced each row.
    pub positions: Vec<usize>,
}

impl<'t> Predictions<'t> {
    pub fn loss(&self) -> Result<Var<'t>> {
        self.logits.cross_entropy(&self.targets, &vec![true; self.targets.len()])
    }

    /// Negative log-likelihood of every row.
    pub fn nll(&self) -> Vec<f64> {
        let v = self.logits.value();
        let vocab = self.logits.cols();
        self.targets
            .iter()
            .enumerate()
            .map(|(r, &t)| {
                let row = &v[r * vocab..(r + 1) * vocab];
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
                max + z.ln() - row[t]
            })
            .collect()
    }
}

/// Plain causal language modelling over one window.
pub fn backbone_predictions<'t>(bound: &Bound<'t>, tokens: &[usize]) -> Result<Predictions<'t>> {
    if tokens.len() < 2 {
        return Err(Error::arg("language modelling needs at least 2 tokens"));
    }
    let layout = AttentionLayout::causal(vec![], &tokens[..tokens.len() - 1], 0)?;
    let out = encode_window(
        bound,
        &layout,
        &[],
        EncodeOptions {
            logits: true,
            ..Default::default()
        },
    )?;
    Ok(Predictions {
        logits: out.logits.expect("text rows present"),
        targets: tokens[1..].to_vec(),
        positions: (0..tokens.len() - 1).collect(),
    })
}

/// Compresses `tokens` under `plan` with the whole tree on the tape. Each
/// sub-segment's text rows see only the tree built from earlier
/// sub-segments plus their own prefix; row `p` predicts token `p + 1`.
pub fn gist_predictions<'t>(
    tape: &'t Tape,
    bound: &Bound<'t>,
    tokens: &[usize],
    plan: &SegmentPlan,
) -> Result<Predictions<'t>> {
    if plan.length != tokens.len() {
        return Err(Error::arg(format!(
            "plan covers {} tokens, document has {}",
            plan.length,
            tokens.len()
        )));
    }
    if plan.leaves < 2 {
        return Err(Error::arg(format!(
            "document of {} tokens yields a single sub-segment",
            tokens.len()
        )));
    }
    let cfg = &bound.config;
    if let Some(&bad) = tokens.iter().find(|&&t| t >= cfg.gist_id()) {
        return Err(Error::arg(format!("token {bad} outside the byte range")));
    }
    let last = tokens.len() - 1;
    let mut tree: SemanticTree<NodeVars<'t>> = SemanticTree::new();
    let mut merge = |a: &NodeVars<'t>, b: &NodeVars<'t>| internal_vars(bound, a.hidden, b.hidden);
    let mut rows = Vec::new();
    let mut positions = Vec::new();
    for (k, sub) in plan.subsegments.iter().enumerate() {
        let flat = tree.flatten();
        let nodes: Vec<&NodeVars<'t>> = flat.iter().map(|&i| &tree.node(i).payload).collect();
        let ctx = context_from_vars(tape, &nodes, cfg.n_layers)?;
        let layout =
            AttentionLayout::sub_segment(context_keys(&flat), &tokens[sub.start..sub.end], cfg.gist_id(), flat.len())?;
        let out = encode_window(
            bound,
            &layout,
            &ctx,
            EncodeOptions {
                logits: true,
                ..Default::default()
            },
        )?;
        let logits = out.logits.expect("sub-segments are nonempty");
        let used = sub.end.min(last) - sub.start;
        if used > 0 {
            rows.push(logits.slice_rows(0, used)?);
            positions.extend(sub.start..sub.start + used);
        }
        if k + 1 < plan.leaves {
            let leaf = leaf_vars(bound, &out, sub.len())?;
            tree.append_leaf(leaf, &mut merge)?;
        }
    }
    Ok(Predictions {
        logits: tape.concat_rows(&rows)?,
        targets: positions.iter().map(|&p| tokens[p + 1]).collect(),
        positions,
    })
}

/// Mean next-token loss of the gist objective for one document.
pub fn gist_loss(model: &ParameterSet, tokens: &[usize], config: &ScoringConfig) -> Result<f64> {
    let plan = build_plan(tokens, model, config)?;
    gist_loss_with_plan(model, tokens, &plan)
}

pub fn gist_loss_with_plan(model: &ParameterSet, tokens: &[usize], plan: &SegmentPlan) -> Result<f64> {
    let tape = Tape::new();
    let bound = model.bind(&tape);
    Ok(gist_predictions(&tape, &bound, tokens, plan)?.loss()?.item())
}

/// Per-position loss of the gist objective: `(position, nll)` for every
/// predicted token.
pub fn gist_position_nll(model: &ParameterSet, tokens: &[usize], plan: &SegmentPlan) -> Result<Vec<(usize, f64)>> {
    let tape = Tape::new();
    let bound = model.bind(&tape);
    let p = gist_predictions(&tape, &bound, tokens, plan)?;
    Ok(p.positions.iter().copied().zip(p.nll()).collect())
}
