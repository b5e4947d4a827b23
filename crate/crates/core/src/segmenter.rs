//! Uniform segmentation, information scoring, tiered gist budgets and the
//! interleaved sub-segment plan.

use serde::{Deserialize, Serialize};

use crate::backbone::{encode_window, AttentionLayout, EncodeOptions, ParameterSet};
use crate::error::{Error, Result};
use crate::numeric::Tape;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScoringConfig {
    /// Weight of the entropy discount in the information score.
    pub lambda_ent: f64,
    /// Target compression ratio.
    pub tau: f64,
    /// Initial segment length.
    pub n: usize,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        ScoringConfig {
            lambda_ent: 0.1,
            tau: 4.0,
            n: 128,
        }
    }
}

impl ScoringConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau >= 1.0) || !self.tau.is_finite() {
            return Err(Error::arg(format!("tau {} must be a finite value >= 1", self.tau)));
        }
        if self.n == 0 {
            return Err(Error::arg("segment length must be positive"));
        }
        if !(self.lambda_ent >= 0.0) || !self.lambda_ent.is_finite() {
            return Err(Error::arg(format!("lambda_ent {} must be >= 0", self.lambda_ent)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    Top25,
    Mid25,
    Bottom50,
}

impl Tier {
    fn divisor(self) -> f64 {
        match self {
            Tier::Top25 => 1.0,
            Tier::Mid25 => 2.0,
            Tier::Bottom50 => 4.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubSegment {
    pub segment: usize,
    pub start: usize,
    pub end: usize,
    /// Index of the gist token (and hence leaf) that follows this span.
    pub slot: usize,
}

impl SubSegment {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentPlan {
    pub length: usize,
    pub segments: Vec<(usize, usize)>,
    pub scores: Vec<f64>,
    pub tiers: Vec<Tier>,
    pub budgets: Vec<usize>,
    pub subsegments: Vec<SubSegment>,
    pub leaves: usize,
}

/// Spans `[i·n, min((i+1)·n, L))`.
pub fn initial_segments(length: usize, n: usize) -> Vec<(usize, usize)> {
    assert!(n > 0, "segment length must be positive");
    (0..length.div_ceil(n))
        .map(|i| (i * n, ((i + 1) * n).min(length)))
        .collect()
}

/// Empirical unigram entropy in nats.
pub fn segment_entropy(tokens: &[usize]) -> Result<f64> {
    if tokens.is_empty() {
        return Err(Error::arg("entropy of an empty segment"));
    }
    let mut counts = std::collections::BTreeMap::new();
    for &t in tokens {
        *counts.entry(t).or_insert(0usize) += 1;
    }
    let n = tokens.len() as f64;
    Ok(counts
        .values()
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum::<f64>()
        .max(0.0))
}

/// `exp` of the mean next-token loss of the backbone reading only `tokens`.
pub fn segment_ppl(model: &ParameterSet, tokens: &[usize]) -> Result<f64> {
    if tokens.len() < 2 {
        return Err(Error::arg(format!(
            "perplexity needs at least 2 tokens, got {}",
            tokens.len()
        )));
    }
    let tape = Tape::new();
    let bound = model.bind(&tape);
    let layout = AttentionLayout::causal(vec![], &tokens[..tokens.len() - 1], 0)?;
    let out = encode_window(
        &bound,
        &layout,
        &[],
        EncodeOptions {
            logits: true,
            ..Default::default()
        },
    )?;
    let logits = out.logits.expect("text rows present");
    let mask = vec![true; tokens.len() - 1];
    Ok(logits.cross_entropy(&tokens[1..], &mask)?.item().exp())
}

pub fn info_score(ppl: f64, entropy: f64, lambda_ent: f64) -> f64 {
    ppl * (-lambda_ent * entropy).exp()
}

/// Tier and budget for each segment. Ranking is by descending score with
/// earlier segments winning ties.
pub fn allocate_budgets(scores: &[f64], lens: &[usize], tau: f64) -> (Vec<Tier>, Vec<usize>) {
    assert_eq!(scores.len(), lens.len());
    let s = scores.len();
    let mut order: Vec<usize> = (0..s).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let quarter = (0.25 * s as f64).ceil() as usize;
    let mut tiers = vec![Tier::Bottom50; s];
    for (rank, &i) in order.iter().enumerate() {
        tiers[i] = if rank < quarter {
            Tier::Top25
        } else if rank < 2 * quarter {
            Tier::Mid25
        } else {
            Tier::Bottom50
        };
    }
    let budgets = tiers
        .iter()
        .zip(lens)
        .map(|(t, &n)| {
            let b = (n as f64 / (t.divisor() * tau)).round() as usize;
            b.clamp(1, n.max(1))
        })
        .collect();
    (tiers, budgets)
}

/// Splits `[start, end)` into `parts` contiguous spans, longer spans first.
pub fn split_span(start: usize, end: usize, parts: usize) -> Vec<(usize, usize)> {
    let len = end - start;
    let (q, r) = (len / parts, len % parts);
    let mut out = Vec::with_capacity(parts);
    let mut at = start;
    for j in 0..parts {
        let l = q + usize::from(j < r);
        out.push((at, at + l));
        at += l;
    }
    out
}

/// Plan for `tokens` given already computed segment scores.
pub fn plan_from_scores(length: usize, scores: Vec<f64>, config: &ScoringConfig) -> Result<SegmentPlan> {
    config.validate()?;
    if length == 0 {
        return Err(Error::arg("cannot plan an empty document"));
    }
    let segments = initial_segments(length, config.n);
    if scores.len() != segments.len() {
        return Err(Error::arg(format!(
            "{} scores for {} segments",
            scores.len(),
            segments.len()
        )));
    }
    let lens: Vec<usize> = segments.iter().map(|(a, b)| b - a).collect();
    let (tiers, budgets) = allocate_budgets(&scores, &lens, config.tau);
    let mut subsegments = Vec::new();
    for (i, (&(a, b), &bud)) in segments.iter().zip(&budgets).enumerate() {
        for (start, end) in split_span(a, b, bud) {
            subsegments.push(SubSegment {
                segment: i,
                start,
                end,
                slot: subsegments.len(),
            });
        }
    }
    Ok(SegmentPlan {
        length,
        leaves: subsegments.len(),
        segments,
        scores,
        tiers,
        budgets,
        subsegments,
    })
}

/// Scores each initial segment with the backbone and builds the plan.
pub fn build_plan(tokens: &[usize], model: &ParameterSet, config: &ScoringConfig) -> Result<SegmentPlan> {
    config.validate()?;
    if tokens.is_empty() {
        return Err(Error::arg("cannot plan an empty document"));
    }
    let scores = initial_segments(tokens.len(), config.n)
        .into_iter()
        .map(|(a, b)| {
            let seg = &tokens[a..b];
            // A lone token has no predicted position; it scores as a perfectly
            // predictable segment.
            let ppl = if seg.len() < 2 { 1.0 } else { segment_ppl(model, seg)? };
            Ok(info_score(ppl, segment_entropy(seg)?, config.lambda_ent))
        })
        .collect::<Result<Vec<_>>>()?;
    plan_from_scores(tokens.len(), scores, config)
}
