use crate::backbone::{Bound, ParameterSet};
use crate::error::{Error, Result};
use crate::numeric::{Tape, Tensor, Var};

/// Bidirectional single-layer self-attention over one or two child vectors
/// followed by the mean of the outputs. A single child passes through as is.
///
/// Queries and keys live in a narrow per-head scoring space; values and the
/// output map are block-diagonal over heads.
pub fn aggregate<'t>(bound: &Bound<'t>, children: &[Var<'t>]) -> Result<Var<'t>> {
    match children.len() {
        1 => return Ok(children[0]),
        2 => {}
        n => return Err(Error::Arity(n)),
    }
    let cfg = &bound.config;
    let a = &bound.slots.agg;
    let tape = children[0].tape();
    let x = tape.concat_rows(children)?;
    if x.cols() != cfg.d_model {
        return Err(Error::Dimension {
            op: "aggregate",
            left: vec![2, cfg.d_model],
            right: x.shape(),
        });
    }
    let (heads, sd, dh) = (cfg.agg_heads, cfg.agg_score_dim, cfg.agg_head_dim());
    let q = x.matmul(&bound.get(a.wq))?;
    let k = x.matmul(&bound.get(a.wk))?;
    let (wv, wo) = (bound.get(a.wv), bound.get(a.wo));
    let scale = 1.0 / (sd as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let probs = q
            .slice_cols(h * sd, (h + 1) * sd)?
            .matmul_nt(&k.slice_cols(h * sd, (h + 1) * sd)?)?
            .scale(scale)
            .softmax_rows()?;
        let v = x
            .slice_cols(h * dh, (h + 1) * dh)?
            .matmul(&wv.slice_rows(h * dh, (h + 1) * dh)?)?;
        outs.push(probs.matmul(&v)?.matmul(&wo.slice_rows(h * dh, (h + 1) * dh)?)?);
    }
    Ok(tape.concat_cols(&outs)?.mean_rows())
}

/// [`aggregate`] on plain vectors, on a private tape.
pub fn aggregate_values(params: &ParameterSet, children: &[&[f64]]) -> Result<Vec<f64>> {
    if children.len() == 1 {
        return Ok(children[0].to_vec());
    }
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let vars = children
        .iter()
        .map(|c| Ok(tape.constant(&Tensor::new(vec![1, c.len()], c.to_vec())?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(aggregate(&bound, &vars)?.value().to_vec())
}
