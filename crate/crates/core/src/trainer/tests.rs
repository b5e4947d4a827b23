use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::backbone::{BackboneConfig, Group, ParameterSet, Phase};
use crate::compressor::CompressionSession;
use crate::error::Error;
use crate::numeric::{finite_difference_at, max_relative_error, Tape};
use crate::segmenter::{plan_from_scores, ScoringConfig, SegmentPlan};

fn jittered(config: &BackboneConfig, seed: u64) -> ParameterSet {
    let mut p = ParameterSet::init(config, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for i in 0..p.len() {
        p.tensor_mut(i)
            .data_mut()
            .iter_mut()
            .for_each(|x| *x += rng.gen_range(-0.05..0.05));
    }
    p
}

fn doc(len: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.gen_range(0..256)).collect()
}

fn small_scoring() -> ScoringConfig {
    ScoringConfig {
        n: 16,
        tau: 4.0,
        lambda_ent: 0.1,
    }
}

fn ranked_plan(len: usize, c: &ScoringConfig) -> SegmentPlan {
    let s = len.div_ceil(c.n);
    plan_from_scores(len, (0..s).map(|i| i as f64).collect(), c).unwrap()
}

#[test]
fn training_forward_matches_inference_steps() {
    let p = jittered(&BackboneConfig::tiny(), 1);
    let c = small_scoring();
    let tokens = doc(50, 2);
    let plan = ranked_plan(50, &c);
    let tape = Tape::new();
    let bound = p.bind(&tape);
    let pred = gist_predictions(&tape, &bound, &tokens, &plan).unwrap();
    assert_eq!(pred.positions, (0..49).collect::<Vec<_>>());
    assert_eq!(pred.targets, tokens[1..]);
    let train_rows = pred.logits.to_tensor();

    let mut s = CompressionSession::new(c).unwrap();
    s.begin_turn_with_plan(&tokens, plan.clone()).unwrap();
    let vocab = p.config().vocab_size;
    for sub in &plan.subsegments {
        let step = s.peek_step(&p, false).unwrap();
        let used = sub.end.min(49) - sub.start;
        assert_eq!(step.logits.data()[..used * vocab], train_rows.data()[sub.start * vocab..(sub.start + used) * vocab]);
        if s.pending() > 1 {
            s.compress_step(&p).unwrap();
        }
    }
}

#[test]
fn first_sub_segment_is_plain_language_modelling() {
    let p = jittered(&BackboneConfig::tiny(), 3);
    let c = small_scoring();
    let tokens = doc(40, 4);
    let plan = ranked_plan(40, &c);
    let nll = gist_position_nll(&p, &tokens, &plan).unwrap();
    let first = &plan.subsegments[0];
    let tape = Tape::new();
    let bound = p.bind(&tape);
    let plain = backbone_predictions(&bound, &tokens[first.start..=first.end]).unwrap().nll();
    for (j, &(pos, x)) in nll[..first.len()].iter().enumerate() {
        assert_eq!(pos, j);
        assert_eq!(x, plain[j]);
    }
}

#[test]
fn gradients_reach_exactly_the_trainable_set() {
    let p = jittered(&BackboneConfig::tiny(), 5);
    let tokens = doc(64, 6);
    let plan = ranked_plan(64, &small_scoring());
    let tape = Tape::new();
    let bound = p.bind(&tape);
    let loss = gist_predictions(&tape, &bound, &tokens, &plan).unwrap().loss().unwrap();
    let grads = tape.backward(loss).unwrap();
    for i in 0..p.len() {
        let g = grads.get(bound.vars[i]);
        match p.group(i) {
            Group::Frozen => assert!(g.is_none(), "{}", p.name(i)),
            Group::Trainable => assert!(g.unwrap().iter().any(|&x| x != 0.0), "{}", p.name(i)),
        }
    }
}

#[test]
fn sampled_trainable_gradients_match_finite_differences() {
    let config = BackboneConfig {
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        agg_heads: 2,
        ..BackboneConfig::tiny()
    };
    let p = jittered(&config, 7);
    let tokens = doc(40, 8);
    let plan = ranked_plan(40, &small_scoring());
    let tape = Tape::new();
    let bound = p.bind(&tape);
    let loss = gist_predictions(&tape, &bound, &tokens, &plan).unwrap().loss().unwrap();
    let grads = tape.backward(loss).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for i in p.indices(Group::Trainable) {
        let n = p.tensor(i).numel();
        let coords: Vec<usize> = (0..4).map(|_| rng.gen_range(0..n)).collect();
        let fd = finite_difference_at(
            |t| {
                let mut q = p.clone();
                q.tensor_mut(i).data_mut().copy_from_slice(t.data());
                gist_loss_with_plan(&q, &tokens, &plan)
            },
            p.tensor(i),
            &coords,
            1e-5,
        )
        .unwrap();
        let analytic: Vec<f64> = coords.iter().map(|&c| grads.get(bound.vars[i]).unwrap()[c]).collect();
        let err = max_relative_error(&fd, &analytic, 1e-6);
        assert!(err < 1e-4, "{}: {err}", p.name(i));
    }
}

#[test]
fn single_sub_segment_documents_are_rejected() {
    let p = jittered(&BackboneConfig::tiny(), 1);
    let err = gist_loss(&p, &[1, 2, 3], &small_scoring());
    assert!(matches!(err, Err(Error::Argument(_))));
}

fn gist_config(steps: usize) -> TrainConfig {
    TrainConfig {
        phase: Phase::Gist,
        steps,
        batch_size: 2,
        seed: 11,
        scoring: small_scoring(),
        ..Default::default()
    }
}

#[test]
fn zero_steps_leave_the_model_unchanged() {
    let mut p = jittered(&BackboneConfig::tiny(), 12);
    let before = p.clone();
    let report = train_gist(&mut p, vec![doc(40, 1)], &gist_config(0)).unwrap();
    assert!(report.is_empty());
    for g in [Group::Frozen, Group::Trainable] {
        assert_eq!(p.checksum(g), before.checksum(g));
    }
}

#[test]
fn gist_training_is_deterministic_and_keeps_the_backbone() {
    let corpus: Vec<Vec<usize>> = (0..5).map(|i| doc(40, 30 + i)).collect();
    let base = jittered(&BackboneConfig::tiny(), 13);
    let run = || {
        let mut p = base.clone();
        let r = train_gist(&mut p, corpus.clone(), &gist_config(4)).unwrap();
        (p, r.iter().map(|s| s.loss).collect::<Vec<_>>())
    };
    let (a, la) = run();
    let (b, lb) = run();
    assert_eq!(la, lb);
    assert_eq!(a.checksum(Group::Trainable), b.checksum(Group::Trainable));
    assert_eq!(a.checksum(Group::Frozen), base.checksum(Group::Frozen));
    assert_ne!(a.checksum(Group::Trainable), base.checksum(Group::Trainable));
}

#[test]
fn backbone_phase_moves_only_the_backbone_and_learns() {
    let mut p = ParameterSet::init(&BackboneConfig::tiny(), 14).unwrap();
    let before = p.clone();
    let corpus = vec![b"abcabcabcabcabcabcabcabc".iter().map(|&b| usize::from(b)).collect()];
    let config = TrainConfig {
        phase: Phase::Backbone,
        steps: 40,
        batch_size: 1,
        lr: Some(1e-2),
        ..Default::default()
    };
    let report = train(&mut p, corpus, &config).unwrap();
    assert_eq!(p.checksum(Group::Trainable), before.checksum(Group::Trainable));
    assert!(report.last().unwrap().loss < 0.5 * report[0].loss);
    assert_eq!(report[3].step, 4);
}

#[test]
fn trainer_rejects_bad_inputs() {
    let mut p = ParameterSet::init(&BackboneConfig::tiny(), 1).unwrap();
    assert!(matches!(
        Trainer::new(&mut p, vec![], gist_config(1)),
        Err(Error::Io(_))
    ));
    assert!(Trainer::new(&mut p, vec![vec![256, 1]], gist_config(1)).is_err());
    let mut bad = gist_config(1);
    bad.lr = Some(0.0);
    assert!(Trainer::new(&mut p, vec![vec![1, 2]], bad).is_err());
}

#[test]
fn step_records_serialize_as_jsonl() {
    let r = StepRecord {
        step: 3,
        loss: 1.5,
        lr: 3e-4,
        wall_ms: 12,
    };
    let mut out = Vec::new();
    r.write_jsonl(&mut out).unwrap();
    let line = String::from_utf8(out).unwrap();
    assert!(line.ends_with('\n'));
    let back: StepRecord = serde_json::from_str(line.trim()).unwrap();
    assert_eq!(back, r);
}
