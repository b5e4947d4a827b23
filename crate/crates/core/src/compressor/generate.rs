use super::pipeline::{context_from_states, NodeState};
use super::session::CompressionSession;
use crate::backbone::{encode_window, AttentionLayout, EncodeOptions, ParameterSet};
use crate::error::{Error, Result};
use crate::numeric::Tape;
use crate::semtree::retrieve_top_nodes;

struct Probe {
    next: usize,
    attention: Vec<f64>,
}

impl CompressionSession {
    /// One forward over `window` with the flattened nodes at positions `kept`
    /// (indices into the flatten order) as context.
    fn probe(&self, model: &ParameterSet, kept: &[usize], window: &[usize], attention: bool) -> Result<Probe> {
        let cfg = model.config();
        let flat = self.tree.flatten();
        let keys: Vec<(usize, usize)> = kept.iter().map(|&p| (flat[p], p)).collect();
        let layout = AttentionLayout::causal(keys, window, flat.len())?;
        let tape = Tape::new();
        let bound = model.bind(&tape);
        let states: Vec<&NodeState> = kept.iter().map(|&p| &self.tree.node(flat[p]).payload).collect();
        let ctx = context_from_states(&tape, &states, cfg.n_layers, cfg.d_model, false)?;
        let out = encode_window(
            &bound,
            &layout,
            &ctx,
            EncodeOptions {
                logits: !attention,
                context_attention: attention,
            },
        )?;
        let next = match out.logits {
            Some(l) => {
                let v = l.value();
                let vocab = cfg.vocab_size;
                let last = &v[(window.len() - 1) * vocab..window.len() * vocab];
                // The gist id is never emitted.
                let mut best = 0;
                for (t, &x) in last.iter().enumerate().take(cfg.gist_id()) {
                    if x > last[best] {
                        best = t;
                    }
                }
                best
            }
            None => 0,
        };
        Ok(Probe {
            next,
            attention: out.context_attention.unwrap_or_default(),
        })
    }

    /// Mean attention of the window's last token on each flattened node,
    /// averaged over heads and layers.
    pub fn last_token_attention(&self, model: &ParameterSet, window: &[usize]) -> Result<Vec<f64>> {
        if window.is_empty() {
            return Err(Error::arg("attention probe needs a nonempty window"));
        }
        let all: Vec<usize> = (0..self.tree.node_count()).collect();
        Ok(self.probe(model, &all, window, true)?.attention)
    }

    /// Flatten positions kept for `window` under `keep_fraction`.
    pub fn retained_nodes(&self, model: &ParameterSet, window: &[usize], keep_fraction: Option<f64>) -> Result<Vec<usize>> {
        let all: Vec<usize> = (0..self.tree.node_count()).collect();
        match keep_fraction {
            None => Ok(all),
            Some(f) if all.is_empty() => {
                retrieve_top_nodes(&[], f)?;
                Ok(all)
            }
            Some(f) => retrieve_top_nodes(&self.last_token_attention(model, window)?, f),
        }
    }

    /// Greedy continuation of `prompt` conditioned on the tree. With a keep
    /// fraction, every step first scores the nodes by the last token's
    /// attention and keeps only the best share of them.
    pub fn generate(
        &self,
        model: &ParameterSet,
        prompt: &[usize],
        max_new: usize,
        keep_fraction: Option<f64>,
    ) -> Result<Vec<usize>> {
        Ok(self.generate_traced(model, prompt, max_new, keep_fraction)?.0)
    }

    /// [`CompressionSession::generate`] that also returns, per step, the
    /// flatten positions the step attended to.
    pub fn generate_traced(
        &self,
        model: &ParameterSet,
        prompt: &[usize],
        max_new: usize,
        keep_fraction: Option<f64>,
    ) -> Result<(Vec<usize>, Vec<Vec<usize>>)> {
        if max_new == 0 {
            return Err(Error::arg("max_new must be positive"));
        }
        if prompt.is_empty() {
            return Err(Error::arg("generation needs a nonempty prompt"));
        }
        if let Some(&bad) = prompt.iter().find(|&&t| t >= model.config().gist_id()) {
            return Err(Error::arg(format!("prompt token {bad} outside the byte range")));
        }
        if prompt.len() + max_new - 1 > model.config().max_window {
            return Err(Error::arg(format!(
                "prompt plus {max_new} new tokens exceeds the model window"
            )));
        }
        let mut window = prompt.to_vec();
        let mut out = Vec::with_capacity(max_new);
        let mut trace = Vec::with_capacity(max_new);
        for _ in 0..max_new {
            let kept = self.retained_nodes(model, &window, keep_fraction)?;
            let next = self.probe(model, &kept, &window, false)?.next;
            out.push(next);
            window.push(next);
            trace.push(kept);
        }
        Ok((out, trace))
    }
}
