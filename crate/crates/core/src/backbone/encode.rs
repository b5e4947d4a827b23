use std::sync::Arc;

use super::layout::AttentionLayout;
use super::params::Bound;
use crate::error::{Error, Result};
use crate::numeric::{Rotation, Var};

/// Pre-rotary keys and values for one layer; one row per context node or
/// window token.
#[derive(Clone, Copy, Debug)]
pub struct LayerKv<'t> {
    pub k: Var<'t>,
    pub v: Var<'t>,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct EncodeOptions {
    pub logits: bool,
    /// Record the last window row's attention on every context key.
    pub context_attention: bool,
}

pub struct WindowOutput<'t> {
    /// Final-normalised hidden states, one row per window token.
    pub hidden: Var<'t>,
    /// Logits for the text rows of the window, in window order.
    pub logits: Option<Var<'t>>,
    pub text_rows: Vec<usize>,
    /// Per-layer pre-rotary keys/values of the window tokens.
    pub window_kv: Vec<LayerKv<'t>>,
    /// Mean over layers and heads of the last query's weight on each context key.
    pub context_attention: Option<Vec<f64>>,
}

/// Keys and values that tree nodes contribute to `layer`.
pub fn project_tree_context<'t>(bound: &Bound<'t>, nodes: Var<'t>, layer: usize) -> Result<LayerKv<'t>> {
    let l = bound
        .slots
        .layers
        .get(layer)
        .ok_or_else(|| Error::arg(format!("layer {layer} out of range")))?;
    Ok(LayerKv {
        k: nodes.matmul(&bound.get(l.node_wk))?,
        v: nodes.matmul(&bound.get(l.node_wv))?,
    })
}

/// Context keys/values for every layer.
pub fn project_all_layers<'t>(bound: &Bound<'t>, nodes: Var<'t>) -> Result<Vec<LayerKv<'t>>> {
    (0..bound.config.n_layers)
        .map(|l| project_tree_context(bound, nodes, l))
        .collect()
}

/// Output head applied to hidden states.
pub fn lm_logits<'t>(bound: &Bound<'t>, hidden: Var<'t>) -> Result<Var<'t>> {
    hidden
        .matmul(&bound.get(bound.slots.head_w))?
        .add_row(&bound.get(bound.slots.head_b))
}

fn split_rows<'t>(
    x: Var<'t>,
    text: &[usize],
    gist: &[usize],
    text_w: Var<'t>,
    gist_w: Var<'t>,
) -> Result<Var<'t>> {
    if gist.is_empty() {
        return x.matmul(&text_w);
    }
    if text.is_empty() {
        return x.matmul(&gist_w);
    }
    let t = x.gather_rows(text)?.matmul(&text_w)?;
    let g = x.gather_rows(gist)?.matmul(&gist_w)?;
    x.tape().scatter_rows(&[(t, text.to_vec()), (g, gist.to_vec())])
}

/// One forward over a window. `ctx` is empty or holds one entry per layer
/// with a row per context key of `layout`.
pub fn encode_window<'t>(
    bound: &Bound<'t>,
    layout: &AttentionLayout,
    ctx: &[LayerKv<'t>],
    opts: EncodeOptions,
) -> Result<WindowOutput<'t>> {
    let cfg = &bound.config;
    let slots = &bound.slots;
    let tape = bound.get(slots.tok_emb).tape();
    let (c, w) = (layout.context_len(), layout.window_len());
    if w > cfg.max_window {
        return Err(Error::layout(format!("window {w} exceeds max_window {}", cfg.max_window)));
    }
    if c > 0 && ctx.len() != cfg.n_layers {
        return Err(Error::layout(format!(
            "{c} context keys but context for {} of {} layers",
            ctx.len(),
            cfg.n_layers
        )));
    }
    for kv in ctx {
        if kv.k.rows() != c || kv.v.rows() != c {
            return Err(Error::layout(format!(
                "tree context has {} rows, layout has {c} context keys",
                kv.k.rows()
            )));
        }
    }
    let text = layout.text_rows();
    let gist = layout.gist_rows();

    let mut x = if gist.is_empty() {
        bound.get(slots.tok_emb).embedding(&layout.tokens)?
    } else {
        let gt = bound.get(slots.gt_emb).gather_rows(&vec![0; gist.len()])?;
        if text.is_empty() {
            gt
        } else {
            let ids: Vec<usize> = text.iter().map(|&i| layout.tokens[i]).collect();
            let t = bound.get(slots.tok_emb).embedding(&ids)?;
            tape.scatter_rows(&[(t, text.clone()), (gt, gist.clone())])?
        }
    };

    let dh = cfg.d_head();
    let win_rot = Arc::new(Rotation::new(&layout.positions, dh, cfg.rope_base)?);
    let ctx_positions: Vec<usize> = layout.context_keys.iter().map(|&(_, p)| p).collect();
    let ctx_rot = Arc::new(Rotation::new(&ctx_positions, dh, cfg.rope_base)?);
    let allow = Arc::new(layout.allow().to_vec());
    let scale = 1.0 / (dh as f64).sqrt();
    let mut window_kv = Vec::with_capacity(cfg.n_layers);
    let mut ctx_attn = opts.context_attention.then(|| vec![0.0; c]);

    for (l, ls) in slots.layers.iter().enumerate() {
        let h = x.rms_norm(&bound.get(ls.attn_norm))?;
        let q = split_rows(h, &text, &gist, bound.get(ls.wq), bound.get(ls.gt_wq))?;
        let k = split_rows(h, &text, &gist, bound.get(ls.wk), bound.get(ls.gt_wk))?;
        let v = split_rows(h, &text, &gist, bound.get(ls.wv), bound.get(ls.gt_wv))?;
        window_kv.push(LayerKv { k, v });
        let q = q.rope(&win_rot)?;
        let k_win = k.rope(&win_rot)?;
        let (keys, values) = if c > 0 {
            let k_ctx = ctx[l].k.rope(&ctx_rot)?;
            (
                tape.concat_rows(&[k_ctx, k_win])?,
                tape.concat_rows(&[ctx[l].v, v])?,
            )
        } else {
            (k_win, v)
        };
        let mut heads = Vec::with_capacity(cfg.n_heads);
        for hd in 0..cfg.n_heads {
            let (a, b) = (hd * dh, (hd + 1) * dh);
            let scores = q
                .slice_cols(a, b)?
                .matmul_nt(&keys.slice_cols(a, b)?)?
                .scale(scale)
                .mask_fill(Arc::clone(&allow))?;
            let probs = scores.softmax_rows()?;
            if let Some(acc) = ctx_attn.as_mut() {
                let p = probs.value();
                let last = &p[(w - 1) * (c + w)..(w - 1) * (c + w) + c];
                acc.iter_mut().zip(last).for_each(|(s, x)| *s += x);
            }
            heads.push(probs.matmul(&values.slice_cols(a, b)?)?);
        }
        let attn = tape.concat_cols(&heads)?.matmul(&bound.get(ls.wo))?;
        x = x.add(&attn)?;
        let f = x
            .rms_norm(&bound.get(ls.ffn_norm))?
            .matmul(&bound.get(ls.w1))?
            .silu()
            .matmul(&bound.get(ls.w2))?;
        x = x.add(&f)?;
    }
    let hidden = x.rms_norm(&bound.get(slots.final_norm))?;
    let logits = if opts.logits && !text.is_empty() {
        let rows = if gist.is_empty() {
            hidden
        } else {
            hidden.gather_rows(&text)?
        };
        Some(lm_logits(bound, rows)?)
    } else {
        None
    };
    if let Some(acc) = ctx_attn.as_mut() {
        let denom = (cfg.n_layers * cfg.n_heads) as f64;
        acc.iter_mut().for_each(|s| *s /= denom);
    }
    Ok(WindowOutput {
        hidden,
        logits,
        text_rows: text,
        window_kv,
        context_attention: ctx_attn,
    })
}
