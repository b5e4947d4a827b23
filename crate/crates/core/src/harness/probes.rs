//! End-to-end probes: the invariant suite and the needle-depth sweep.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{
    encode_window, AttentionLayout, BackboneConfig, EncodeOptions, Group, LayerKv, ParameterSet,
};
use crate::compressor::CompressionSession;
use crate::error::{Error, Result};
use crate::numeric::{finite_difference_at, max_relative_error, Tape, Tensor};
use crate::segmenter::{plan_from_scores, ScoringConfig, SegmentPlan};
use crate::semtree::{aggregate_values, NodeKind, SemanticTree};
use crate::trainer::{gist_loss_with_plan, gist_predictions, make_needle_corpus, thread_pool, train_gist, TrainConfig};

/// Deliberate defects the property suite must catch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fault {
    /// Transposes the window block of every attention mask in the
    /// causality check, letting tokens read the future.
    FlipMask,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub module: String,
    pub invariant: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PropertyReport {
    pub seed: u64,
    pub fault: Option<Fault>,
    pub passed: bool,
    pub checks: Vec<CheckResult>,
}

type Check = fn(u64, Option<Fault>) -> Result<std::result::Result<String, String>>;

const CHECKS: &[(&str, &str, Check)] = &[
    ("segmenter", "budget-conservation", check_budget_conservation),
    ("semtree", "tree-identity", check_tree_identity),
    ("semtree", "incremental-equals-batch", check_incremental_batch),
    ("backbone", "causality-perturbation", check_window_causality),
    ("compressor", "cross-sub-segment-causality", check_sub_segment_causality),
    ("compressor", "ratio-accounting", check_ratio),
    ("trainer", "gradient-check", check_gradients),
    ("trainer", "freeze-contract", check_freeze),
];

/// Runs every invariant check. A check that errors counts as failed.
pub fn probe_properties(seed: u64, fault: Option<Fault>) -> PropertyReport {
    let checks: Vec<CheckResult> = CHECKS
        .iter()
        .map(|&(module, invariant, f)| {
            let (passed, detail) = match f(seed, fault) {
                Ok(Ok(d)) => (true, d),
                Ok(Err(d)) => (false, d),
                Err(e) => (false, format!("error: {e}")),
            };
            CheckResult {
                module: module.into(),
                invariant: invariant.into(),
                passed,
                detail,
            }
        })
        .collect();
    PropertyReport {
        seed,
        fault,
        passed: checks.iter().all(|c| c.passed),
        checks,
    }
}

fn verdict(ok: bool, pass: String, fail: String) -> Result<std::result::Result<String, String>> {
    Ok(if ok { Ok(pass) } else { Err(fail) })
}

fn jittered(config: &BackboneConfig, seed: u64) -> Result<ParameterSet> {
    let mut p = ParameterSet::init(config, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    for i in 0..p.len() {
        p.tensor_mut(i)
            .data_mut()
            .iter_mut()
            .for_each(|x| *x += rng.gen_range(-0.1..0.1));
    }
    Ok(p)
}

fn random_doc(rng: &mut ChaCha8Rng, len: usize) -> Vec<usize> {
    (0..len).map(|_| rng.gen_range(0..256)).collect()
}

fn check_budget_conservation(seed: u64, _: Option<Fault>) -> Result<std::result::Result<String, String>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = ScoringConfig {
        n: 512,
        tau: 4.0,
        lambda_ent: 0.1,
    };
    let scores = (0..8).map(|_| rng.gen::<f64>()).collect();
    let plan = plan_from_scores(4096, scores, &c)?;
    verdict(
        plan.leaves == 512,
        "4096 tokens at n=512, tau=4 budget 512 leaves".into(),
        format!("budget {} instead of 512", plan.leaves),
    )
}

fn check_tree_identity(_: u64, _: Option<Fault>) -> Result<std::result::Result<String, String>> {
    let mut unit = |_: &(), _: &()| Ok(());
    for m in 1..=64 {
        let t = SemanticTree::build_batch(vec![(); m], &mut unit)?;
        if t.node_count() != 2 * m - 1 || t.internal_count() != m - 1 {
            return verdict(false, String::new(), format!("M={m} gave {} nodes", t.node_count()));
        }
    }
    let t = SemanticTree::build_batch(vec![(); 5], &mut unit)?;
    let got: Vec<(NodeKind, (usize, usize))> = t.flatten().iter().map(|&i| (t.node(i).kind, t.node(i).span)).collect();
    let mut want: Vec<(NodeKind, (usize, usize))> = (0..5).map(|i| (NodeKind::Leaf, (i, i))).collect();
    want.extend([(0, 1), (2, 3), (0, 3), (0, 4)].map(|s| (NodeKind::Internal, s)));
    verdict(
        got == want,
        "M in 1..=64 gives 2M-1 nodes; M=5 flattens to L1..L5, N1, N2, N3, root".into(),
        format!("M=5 flatten order {got:?}"),
    )
}

fn check_incremental_batch(seed: u64, _: Option<Fault>) -> Result<std::result::Result<String, String>> {
    let p = jittered(&BackboneConfig::tiny(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa5);
    let d = p.config().d_model;
    let mut merge = |a: &Vec<f64>, b: &Vec<f64>| aggregate_values(&p, &[a, b]);
    for m in 1..=32 {
        let leaves: Vec<Vec<f64>> = (0..m).map(|_| (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
        let mut inc = SemanticTree::new();
        for l in &leaves {
            inc.append_leaf(l.clone(), &mut merge)?;
        }
        inc.seal(&mut merge)?;
        let batch = SemanticTree::build_batch(leaves, &mut merge)?;
        let canonical = |t: &SemanticTree<Vec<f64>>| -> Vec<_> {
            t.flatten()
                .into_iter()
                .map(|i| {
                    let n = t.node(i);
                    (n.kind, n.height, n.span, n.payload.clone())
                })
                .collect()
        };
        if canonical(&inc) != canonical(&batch) {
            return verdict(false, String::new(), format!("M={m} differs"));
        }
    }
    verdict(true, "M in 1..=32 bit-identical".into(), String::new())
}

fn check_window_causality(seed: u64, fault: Option<Fault>) -> Result<std::result::Result<String, String>> {
    let p = jittered(&BackboneConfig::tiny(), seed)?;
    let cfg = p.config().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x77);
    let text = random_doc(&mut rng, 6);
    let nodes = 3;
    let ctx_data: Vec<(Tensor, Tensor)> = (0..cfg.n_layers)
        .map(|_| {
            let mut t = || Tensor::new(vec![nodes, cfg.d_model], (0..nodes * cfg.d_model).map(|_| rng.gen_range(-1.0..1.0)).collect());
            Ok((t()?, t()?))
        })
        .collect::<Result<_>>()?;
    let run = |tokens: &[usize]| -> Result<Vec<f64>> {
        let tape = Tape::new();
        let bound = p.bind(&tape);
        let mut layout = AttentionLayout::sub_segment((0..nodes).map(|i| (i, i)).collect(), tokens, cfg.gist_id(), nodes)?;
        if fault == Some(Fault::FlipMask) {
            layout.flip_window_mask();
        }
        let ctx: Vec<LayerKv> = ctx_data
            .iter()
            .map(|(k, v)| LayerKv {
                k: tape.constant(k),
                v: tape.constant(v),
            })
            .collect();
        Ok(encode_window(&bound, &layout, &ctx, EncodeOptions::default())?.hidden.value().to_vec())
    };
    let base = run(&text)?;
    let d = cfg.d_model;
    for j in 1..text.len() {
        let mut other = text.clone();
        other[j] = (other[j] + 1) % 256;
        let out = run(&other)?;
        if out[..j * d] != base[..j * d] {
            return verdict(false, String::new(), format!("perturbing token {j} changed earlier rows"));
        }
    }
    verdict(true, "earlier rows bit-identical under later perturbations".into(), String::new())
}

fn fixed_plan(len: usize, c: &ScoringConfig) -> Result<SegmentPlan> {
    let s = len.div_ceil(c.n);
    plan_from_scores(len, (0..s).map(|i| i as f64).collect(), c)
}

fn check_sub_segment_causality(seed: u64, _: Option<Fault>) -> Result<std::result::Result<String, String>> {
    let p = jittered(&BackboneConfig::tiny(), seed)?;
    let c = ScoringConfig {
        n: 16,
        tau: 4.0,
        lambda_ent: 0.1,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x99);
    let tokens = random_doc(&mut rng, 48);
    let plan = fixed_plan(tokens.len(), &c)?;
    let step = |toks: &[usize], k: usize, zero: bool| -> Result<Tensor> {
        let mut s = CompressionSession::new(c.clone())?;
        s.begin_turn_with_plan(toks, plan.clone())?;
        for _ in 0..k {
            s.compress_step(&p)?;
        }
        Ok(s.peek_step(&p, zero)?.logits)
    };
    for k in 0..plan.leaves - 1 {
        let next = &plan.subsegments[k + 1];
        let mut other = tokens.clone();
        let at = rng.gen_range(next.start..next.end);
        other[at] = (other[at] + 1) % 256;
        if step(&tokens, k, false)? != step(&other, k, false)? {
            return verdict(false, String::new(), format!("step {k} saw token {at} of the next sub-segment"));
        }
    }
    let k = plan.leaves - 1;
    let mut other = tokens.clone();
    for t in &mut other[..plan.subsegments[k].start] {
        *t = (*t + 7) % 256;
    }
    verdict(
        step(&tokens, k, true)? == step(&other, k, true)?,
        "future sub-segments invisible; zeroed tree severs the past".into(),
        "zeroed tree still leaks earlier sub-segments".into(),
    )
}

fn check_ratio(seed: u64, _: Option<Fault>) -> Result<std::result::Result<String, String>> {
    let p = jittered(&BackboneConfig::tiny(), seed)?;
    let c = ScoringConfig {
        n: 16,
        tau: 4.0,
        lambda_ent: 0.1,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x33);
    let mut worst = (f64::INFINITY, f64::NEG_INFINITY);
    for _ in 0..10 {
        let len = rng.gen_range(8 * c.n..16 * c.n);
        let s = CompressionSession::compress_document(&random_doc(&mut rng, len), &p, &c)?;
        let r = s.achieved_ratio()?;
        if (r - len as f64 / s.tree().node_count() as f64).abs() > 0.0 {
            return verdict(false, String::new(), format!("ratio {r} is not tokens over nodes"));
        }
        worst = (worst.0.min(r), worst.1.max(r));
    }
    verdict(
        worst.0 >= 0.8 * c.tau && worst.1 <= 2.0 * c.tau,
        format!("ratios within [{:.3}, {:.3}]", worst.0, worst.1),
        format!("ratios spread over [{:.3}, {:.3}]", worst.0, worst.1),
    )
}

fn check_gradients(seed: u64, _: Option<Fault>) -> Result<std::result::Result<String, String>> {
    let p = jittered(&BackboneConfig::tiny(), seed)?;
    let c = ScoringConfig {
        n: 16,
        tau: 4.0,
        lambda_ent: 0.1,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x11);
    let tokens = random_doc(&mut rng, 40);
    let plan = fixed_plan(tokens.len(), &c)?;
    let tape = Tape::new();
    let bound = p.bind(&tape);
    let loss = gist_predictions(&tape, &bound, &tokens, &plan)?.loss()?;
    let grads = tape.backward(loss)?;
    let mut worst: (f64, String) = (0.0, String::new());
    for i in p.indices(Group::Trainable) {
        let coords: Vec<usize> = (0..3).map(|_| rng.gen_range(0..p.tensor(i).numel())).collect();
        let fd = finite_difference_at(
            |t| {
                let mut q = p.clone();
                q.tensor_mut(i).data_mut().copy_from_slice(t.data());
                gist_loss_with_plan(&q, &tokens, &plan)
            },
            p.tensor(i),
            &coords,
            1e-5,
        )?;
        let g = grads.get(bound.vars[i]).ok_or_else(|| Error::state("trainable tensor got no gradient"))?;
        let analytic: Vec<f64> = coords.iter().map(|&c| g[c]).collect();
        let err = max_relative_error(&fd, &analytic, 1e-6);
        if err > worst.0 {
            worst = (err, p.name(i).to_string());
        }
    }
    verdict(
        worst.0 < 1e-4,
        format!("max relative error {:.2e}", worst.0),
        format!("relative error {:.2e} on {}", worst.0, worst.1),
    )
}

fn check_freeze(seed: u64, _: Option<Fault>) -> Result<std::result::Result<String, String>> {
    let mut p = jittered(&BackboneConfig::tiny(), seed)?;
    let before = p.checksum(Group::Frozen);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x55);
    let corpus = (0..4).map(|_| random_doc(&mut rng, 40)).collect();
    let config = TrainConfig {
        steps: 3,
        batch_size: 2,
        seed,
        scoring: ScoringConfig {
            n: 16,
            ..Default::default()
        },
        ..Default::default()
    };
    train_gist(&mut p, corpus, &config)?;
    verdict(
        p.checksum(Group::Frozen) == before,
        "frozen checksum unchanged after 3 gist steps".into(),
        "frozen parameters moved".into(),
    )
}

/// Exact-match recovery of needle values at one relative depth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthRow {
    pub depth: f64,
    pub accuracy: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PositionReport {
    pub haystack_len: usize,
    pub rows: Vec<DepthRow>,
    /// Largest minus smallest per-depth accuracy.
    pub spread: f64,
}

impl PositionReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("depth,accuracy,count\n");
        for r in &self.rows {
            writeln!(s, "{},{},{}", r.depth, r.accuracy, r.count).expect("writing to a String");
        }
        s
    }
}

/// Settings of the needle-depth sweep.
#[derive(Clone, Debug)]
pub struct PositionProbe {
    pub depths: Vec<f64>,
    pub count: usize,
    pub haystack_len: usize,
    pub seed: u64,
    pub keep_fraction: Option<f64>,
}

impl Default for PositionProbe {
    fn default() -> Self {
        PositionProbe {
            depths: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            count: 8,
            haystack_len: 512,
            seed: 0,
            keep_fraction: None,
        }
    }
}

/// Compresses each haystack, asks for the needle's value and scores exact
/// matches per depth.
pub fn probe_position(model: &ParameterSet, scoring: &ScoringConfig, probe: &PositionProbe) -> Result<PositionReport> {
    if probe.depths.is_empty() || probe.count == 0 {
        return Err(Error::arg("position probe needs at least one depth and one sample"));
    }
    let samples = make_needle_corpus(probe.count, probe.haystack_len, &probe.depths, probe.seed)?;
    let hits: Vec<Result<bool>> = thread_pool()?.install(|| {
        samples
            .par_iter()
            .map(|s| {
                let session = CompressionSession::compress_document(&s.document, model, scoring)?;
                let out = session.generate(model, &s.query, s.value.len(), probe.keep_fraction)?;
                Ok(out == s.value)
            })
            .collect()
    });
    let hits: Vec<bool> = hits.into_iter().collect::<Result<_>>()?;
    let rows: Vec<DepthRow> = probe
        .depths
        .iter()
        .zip(hits.chunks(probe.count))
        .map(|(&depth, h)| DepthRow {
            depth,
            accuracy: h.iter().filter(|&&x| x).count() as f64 / h.len() as f64,
            count: h.len(),
        })
        .collect();
    let max = rows.iter().map(|r| r.accuracy).fold(f64::NEG_INFINITY, f64::max);
    let min = rows.iter().map(|r| r.accuracy).fold(f64::INFINITY, f64::min);
    Ok(PositionReport {
        haystack_len: probe.haystack_len,
        rows,
        spread: max - min,
    })
}
