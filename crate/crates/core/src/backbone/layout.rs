use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenKind {
    Text,
    Gist,
}

/// Who may attend to whom in one forward: context keys (tree nodes) first,
/// then the window tokens.
#[derive(Clone, Debug)]
pub struct AttentionLayout {
    /// `(node id, position)` for every context key, in flatten order.
    pub context_keys: Vec<(usize, usize)>,
    pub tokens: Vec<usize>,
    pub kinds: Vec<TokenKind>,
    /// Sub-segment each window token belongs to.
    pub groups: Vec<usize>,
    pub positions: Vec<usize>,
    /// Row-major `[window × (context + window)]`.
    allow: Vec<bool>,
}

impl AttentionLayout {
    /// General constructor; `allow` is validated against every layout rule.
    pub fn new(
        context_keys: Vec<(usize, usize)>,
        tokens: Vec<usize>,
        kinds: Vec<TokenKind>,
        groups: Vec<usize>,
        positions: Vec<usize>,
        allow: Vec<bool>,
    ) -> Result<Self> {
        let layout = AttentionLayout {
            context_keys,
            tokens,
            kinds,
            groups,
            positions,
            allow,
        };
        layout.validate()?;
        Ok(layout)
    }

    /// A run of text tokens under a plain causal mask, starting at `start`.
    pub fn causal(context_keys: Vec<(usize, usize)>, tokens: &[usize], start: usize) -> Result<Self> {
        let w = tokens.len();
        let c = context_keys.len();
        let mut allow = vec![false; w * (c + w)];
        for i in 0..w {
            let row = &mut allow[i * (c + w)..(i + 1) * (c + w)];
            row[..c + i + 1].iter_mut().for_each(|a| *a = true);
        }
        Self::new(
            context_keys,
            tokens.to_vec(),
            vec![TokenKind::Text; w],
            vec![0; w],
            (start..start + w).collect(),
            allow,
        )
    }

    /// One sub-segment followed by its gist token. Text is causal; the gist
    /// token sees the whole sub-segment and itself. Everything sees the context.
    pub fn sub_segment(
        context_keys: Vec<(usize, usize)>,
        text: &[usize],
        gist_id: usize,
        start: usize,
    ) -> Result<Self> {
        let mut tokens = text.to_vec();
        tokens.push(gist_id);
        let mut layout = Self::causal(context_keys, &tokens, start)?;
        if let Some(k) = layout.kinds.last_mut() {
            *k = TokenKind::Gist;
        }
        layout.validate()?;
        Ok(layout)
    }

    pub fn context_len(&self) -> usize {
        self.context_keys.len()
    }

    pub fn window_len(&self) -> usize {
        self.tokens.len()
    }

    pub fn key_len(&self) -> usize {
        self.context_len() + self.window_len()
    }

    pub fn allow(&self) -> &[bool] {
        &self.allow
    }

    pub fn allows(&self, query: usize, key: usize) -> bool {
        self.allow[query * self.key_len() + key]
    }

    pub fn text_rows(&self) -> Vec<usize> {
        self.rows_of(TokenKind::Text)
    }

    pub fn gist_rows(&self) -> Vec<usize> {
        self.rows_of(TokenKind::Gist)
    }

    fn rows_of(&self, kind: TokenKind) -> Vec<usize> {
        (0..self.window_len()).filter(|&i| self.kinds[i] == kind).collect()
    }

    /// Transposes the window block. Used only to inject a causality fault.
    pub fn flip_window_mask(&mut self) {
        let (c, w, k) = (self.context_len(), self.window_len(), self.key_len());
        let old = self.allow.clone();
        for i in 0..w {
            for j in 0..w {
                self.allow[i * k + c + j] = old[j * k + c + i];
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (c, w, k) = (self.context_len(), self.window_len(), self.key_len());
        if w == 0 {
            return Err(Error::layout("empty window"));
        }
        if self.kinds.len() != w || self.groups.len() != w || self.positions.len() != w {
            return Err(Error::layout("per-token tables disagree with window length"));
        }
        if self.allow.len() != w * k {
            return Err(Error::layout(format!(
                "allow has {} entries, expected {}",
                self.allow.len(),
                w * k
            )));
        }
        for i in 0..w {
            if let Some(j) = (0..c).find(|&j| !self.allows(i, j)) {
                return Err(Error::layout(format!("query {i} blocks context key {j}")));
            }
            if !self.allows(i, c + i) {
                return Err(Error::layout(format!("query {i} cannot see itself")));
            }
            for j in 0..w {
                if !self.allows(i, c + j) {
                    continue;
                }
                if j > i {
                    return Err(Error::layout(format!("query {i} sees future key {j}")));
                }
                if self.kinds[i] == TokenKind::Text && self.groups[j] != self.groups[i] {
                    return Err(Error::layout(format!(
                        "text query {i} sees key {j} of another sub-segment"
                    )));
                }
            }
        }
        Ok(())
    }
}
