use serde::{Deserialize, Serialize};

use super::pipeline::{
    context_from_states, context_keys, hidden_constant, internal_vars, leaf_vars, NodeState,
};
use crate::backbone::{encode_window, AttentionLayout, Bound, EncodeOptions, ParameterSet, WindowOutput};
use crate::error::{Error, Result};
use crate::numeric::{Tape, Tensor};
use crate::segmenter::{build_plan, ScoringConfig, SegmentPlan};
use crate::semtree::SemanticTree;

/// One appended stream of tokens and the plan it was compressed with.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    /// Index of the turn's first token in the session's token stream.
    pub offset: usize,
    /// Leaf index of the turn's first sub-segment.
    pub first_leaf: usize,
    pub plan: SegmentPlan,
}

/// What one compression step computed, without committing it.
#[derive(Clone, Debug)]
pub struct StepOutput {
    /// Final hidden state of the step's gist token.
    pub gist_hidden: Vec<f64>,
    /// Logits of the sub-segment's text tokens, one row each.
    pub logits: Tensor,
    /// Stream position of each text row.
    pub positions: Vec<usize>,
}

/// Incremental compression state for one document or dialogue.
#[derive(Clone, Debug)]
pub struct CompressionSession {
    pub(crate) config: ScoringConfig,
    pub(crate) tokens: Vec<usize>,
    pub(crate) turns: Vec<Turn>,
    pub(crate) tree: SemanticTree<NodeState>,
    pub(crate) cursor: usize,
}

impl CompressionSession {
    pub fn new(config: ScoringConfig) -> Result<Self> {
        config.validate()?;
        Ok(CompressionSession {
            config,
            tokens: Vec::new(),
            turns: Vec::new(),
            tree: SemanticTree::new(),
            cursor: 0,
        })
    }

    /// Plans and fully compresses `tokens`, then seals the tree.
    pub fn compress_document(tokens: &[usize], model: &ParameterSet, config: &ScoringConfig) -> Result<Self> {
        let mut s = Self::new(config.clone())?;
        s.append_turn(tokens, model)?;
        Ok(s)
    }

    pub fn config(&self) -> &ScoringConfig {
        &self.config
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn turns(&self) -> &[Turn] {
        &self.turns
    }

    /// Plan of the most recent turn.
    pub fn plan(&self) -> Option<&SegmentPlan> {
        self.turns.last().map(|t| &t.plan)
    }

    pub fn tree(&self) -> &SemanticTree<NodeState> {
        &self.tree
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    /// Leaves planned over all turns.
    pub fn planned_leaves(&self) -> usize {
        self.turns.iter().map(|t| t.plan.leaves).sum()
    }

    pub fn pending(&self) -> usize {
        self.planned_leaves() - self.cursor
    }

    /// Token count over flattened node count.
    pub fn achieved_ratio(&self) -> Result<f64> {
        if self.tree.node_count() == 0 {
            return Err(Error::state("ratio of an empty tree"));
        }
        Ok(self.tokens.len() as f64 / self.tree.node_count() as f64)
    }

    fn check_model(&self, model: &ParameterSet) -> Result<()> {
        let c = model.config();
        if c.n_layers == 0 || c.d_model == 0 {
            return Err(Error::arg("model has no layers"));
        }
        if self.config.n + 1 > c.max_window {
            return Err(Error::arg(format!(
                "segment length {} does not fit the model window of {}",
                self.config.n, c.max_window
            )));
        }
        if let Some(n) = self.tree.nodes().first() {
            if n.payload.hidden.len() != c.d_model || n.payload.kv.len() != c.n_layers {
                return Err(Error::arg("session was built by a model of another shape"));
            }
        }
        Ok(())
    }

    /// Adds a turn planned from `tokens` with the model's scores.
    pub fn begin_turn(&mut self, tokens: &[usize], model: &ParameterSet) -> Result<()> {
        self.check_model(model)?;
        let plan = build_plan(tokens, model, &self.config)?;
        self.begin_turn_with_plan(tokens, plan)
    }

    /// Adds a turn with a caller-supplied plan.
    pub fn begin_turn_with_plan(&mut self, tokens: &[usize], plan: SegmentPlan) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::arg("a turn needs at least one token"));
        }
        if plan.length != tokens.len() {
            return Err(Error::arg(format!(
                "plan covers {} tokens, turn has {}",
                plan.length,
                tokens.len()
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t > 255) {
            return Err(Error::arg(format!("token {bad} is not a byte")));
        }
        if self.pending() > 0 {
            return Err(Error::state("previous turn is not fully compressed"));
        }
        self.tree.reopen()?;
        self.turns.push(Turn {
            offset: self.tokens.len(),
            first_leaf: self.cursor,
            plan,
        });
        self.tokens.extend_from_slice(tokens);
        Ok(())
    }

    /// Stream span `[start, end)` of leaf `k`'s sub-segment.
    pub fn subsegment_span(&self, k: usize) -> Option<(usize, usize)> {
        let turn = self
            .turns
            .iter()
            .rev()
            .find(|t| t.first_leaf <= k && k < t.first_leaf + t.plan.leaves)?;
        let s = &turn.plan.subsegments[k - turn.first_leaf];
        Some((turn.offset + s.start, turn.offset + s.end))
    }

    fn forward_step<'t>(
        &self,
        tape: &'t Tape,
        bound: &Bound<'t>,
        zero_context: bool,
    ) -> Result<(WindowOutput<'t>, usize, (usize, usize))> {
        let (start, end) = self
            .subsegment_span(self.cursor)
            .ok_or_else(|| Error::state("no sub-segment left to compress"))?;
        let flat = self.tree.flatten();
        let cfg = &bound.config;
        let layout = AttentionLayout::sub_segment(
            context_keys(&flat),
            &self.tokens[start..end],
            cfg.gist_id(),
            flat.len(),
        )?;
        let states: Vec<&NodeState> = flat.iter().map(|&i| &self.tree.node(i).payload).collect();
        let ctx = context_from_states(tape, &states, cfg.n_layers, cfg.d_model, zero_context)?;
        let out = encode_window(
            bound,
            &layout,
            &ctx,
            EncodeOptions {
                logits: true,
                ..Default::default()
            },
        )?;
        Ok((out, end - start, (start, end)))
    }

    /// Runs the next step's forward without changing the session. With
    /// `zero_context` every tree node contributes zero keys and values.
    pub fn peek_step(&self, model: &ParameterSet, zero_context: bool) -> Result<StepOutput> {
        self.check_model(model)?;
        let tape = Tape::new();
        let bound = model.bind(&tape);
        let (out, g, (start, end)) = self.forward_step(&tape, &bound, zero_context)?;
        Ok(StepOutput {
            gist_hidden: out.hidden.slice_rows(g, g + 1)?.value().to_vec(),
            logits: out.logits.expect("sub-segments are nonempty").to_tensor(),
            positions: (start..end).collect(),
        })
    }

    /// Encodes the next sub-segment and appends its leaf. Returns the ids of
    /// every node created.
    pub fn compress_step(&mut self, model: &ParameterSet) -> Result<Vec<usize>> {
        self.check_model(model)?;
        if self.tree.is_sealed() {
            return Err(Error::state("tree is sealed"));
        }
        let tape = Tape::new();
        let bound = model.bind(&tape);
        let (out, g, _) = self.forward_step(&tape, &bound, false)?;
        let leaf = leaf_vars(&bound, &out, g)?.detach();
        let mut merge = |a: &NodeState, b: &NodeState| {
            let (ha, hb) = (hidden_constant(&tape, a)?, hidden_constant(&tape, b)?);
            Ok(internal_vars(&bound, ha, hb)?.detach())
        };
        let created = self.tree.append_leaf(leaf, &mut merge)?;
        self.cursor += 1;
        Ok(created)
    }

    /// Folds the frontier into a root once every planned leaf exists.
    pub fn seal(&mut self, model: &ParameterSet) -> Result<()> {
        if self.pending() > 0 {
            return Err(Error::state(format!("{} sub-segments still pending", self.pending())));
        }
        let tape = Tape::new();
        let bound = model.bind(&tape);
        let mut merge = |a: &NodeState, b: &NodeState| {
            let (ha, hb) = (hidden_constant(&tape, a)?, hidden_constant(&tape, b)?);
            Ok(internal_vars(&bound, ha, hb)?.detach())
        };
        self.tree.seal(&mut merge)?;
        Ok(())
    }

    /// Compresses a new turn onto the existing tree and reseals it.
    pub fn append_turn(&mut self, tokens: &[usize], model: &ParameterSet) -> Result<()> {
        self.begin_turn(tokens, model)?;
        self.finish_turn(model)
    }

    pub fn append_turn_with_plan(&mut self, tokens: &[usize], plan: SegmentPlan, model: &ParameterSet) -> Result<()> {
        self.check_model(model)?;
        self.begin_turn_with_plan(tokens, plan)?;
        self.finish_turn(model)
    }

    fn finish_turn(&mut self, model: &ParameterSet) -> Result<()> {
        while self.pending() > 0 {
            self.compress_step(model)?;
        }
        self.seal(model)
    }
}
