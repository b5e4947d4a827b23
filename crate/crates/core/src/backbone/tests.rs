use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;
use crate::numeric::{finite_difference_grad, max_relative_error, Tape, Tensor};

fn jittered(seed: u64) -> ParameterSet {
    let mut p = ParameterSet::init(&BackboneConfig::tiny(), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for i in 0..p.len() {
        let t = p.tensor_mut(i);
        for x in t.data_mut() {
            *x += 0.2 * (rng.gen::<f64>() - 0.5);
        }
    }
    p
}

fn rand_tokens(n: usize, rng: &mut impl Rng) -> Vec<usize> {
    (0..n).map(|_| rng.gen_range(0..256)).collect()
}

fn rand_rows(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    Tensor::randn(vec![rows, cols], 1.0, rng)
}

// Dense reference forward: plain loops, explicit -inf mask, no tape.
mod oracle {
    use super::*;

    pub type Mat = Vec<Vec<f64>>;

    fn get(p: &ParameterSet, slot: usize) -> Mat {
        let t = p.tensor(slot);
        let c = *t.shape().last().unwrap();
        t.data().chunks(c).map(|r| r.to_vec()).collect()
    }

    fn vecmat(x: &[f64], w: &Mat) -> Vec<f64> {
        let mut out = vec![0.0; w[0].len()];
        for (xi, row) in x.iter().zip(w) {
            for (o, wij) in out.iter_mut().zip(row) {
                *o += xi * wij;
            }
        }
        out
    }

    fn rms(x: &[f64], g: &[f64]) -> Vec<f64> {
        let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
        let inv = 1.0 / (ms + 1e-6).sqrt();
        x.iter().zip(g).map(|(v, gi)| v * inv * gi).collect()
    }

    fn rotate(x: &[f64], pos: usize, dh: usize, base: f64) -> Vec<f64> {
        let mut out = x.to_vec();
        for h in 0..x.len() / dh {
            for i in 0..dh / 2 {
                let th = pos as f64 * base.powf(-(2.0 * i as f64) / dh as f64);
                let (a, b) = (x[h * dh + 2 * i], x[h * dh + 2 * i + 1]);
                out[h * dh + 2 * i] = a * th.cos() - b * th.sin();
                out[h * dh + 2 * i + 1] = a * th.sin() + b * th.cos();
            }
        }
        out
    }

    /// Returns (final hidden rows, logits of every row).
    pub fn forward(p: &ParameterSet, layout: &AttentionLayout, ctx: &[(Mat, Mat)]) -> (Mat, Mat) {
        let cfg = p.config();
        let s = p.slots();
        let (dh, base) = (cfg.d_head(), cfg.rope_base);
        let emb = get(p, s.tok_emb);
        let gt = get(p, s.gt_emb);
        let w = layout.window_len();
        let c = layout.context_len();
        let mut x: Mat = (0..w)
            .map(|i| match layout.kinds[i] {
                TokenKind::Text => emb[layout.tokens[i]].clone(),
                TokenKind::Gist => gt[0].clone(),
            })
            .collect();
        for (l, ls) in s.layers.iter().enumerate() {
            let g = &get(p, ls.attn_norm)[0];
            let proj = |i: usize, h: &[f64], text: usize, gist: usize| {
                let slot = if layout.kinds[i] == TokenKind::Text { text } else { gist };
                vecmat(h, &get(p, slot))
            };
            let hs: Mat = x.iter().map(|r| rms(r, g)).collect();
            let mut q = Vec::new();
            let mut keys = Vec::new();
            let mut vals = Vec::new();
            for j in 0..c {
                keys.push(rotate(&ctx[l].0[j], layout.context_keys[j].1, dh, base));
                vals.push(ctx[l].1[j].clone());
            }
            for (i, h) in hs.iter().enumerate() {
                let pos = layout.positions[i];
                q.push(rotate(&proj(i, h, ls.wq, ls.gt_wq), pos, dh, base));
                keys.push(rotate(&proj(i, h, ls.wk, ls.gt_wk), pos, dh, base));
                vals.push(proj(i, h, ls.wv, ls.gt_wv));
            }
            let wo = get(p, ls.wo);
            for i in 0..w {
                let mut concat = vec![0.0; cfg.d_model];
                for hd in 0..cfg.n_heads {
                    let r = hd * dh..(hd + 1) * dh;
                    let scores: Vec<f64> = (0..c + w)
                        .map(|j| {
                            let dot: f64 = q[i][r.clone()]
                                .iter()
                                .zip(&keys[j][r.clone()])
                                .map(|(a, b)| a * b)
                                .sum();
                            let m = if layout.allows(i, j) { 0.0 } else { f64::NEG_INFINITY };
                            dot / (dh as f64).sqrt() + m
                        })
                        .collect();
                    let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
                    let z: f64 = e.iter().sum();
                    for j in 0..c + w {
                        for (o, v) in concat[r.clone()].iter_mut().zip(&vals[j][r.clone()]) {
                            *o += e[j] / z * v;
                        }
                    }
                }
                let a = vecmat(&concat, &wo);
                x[i].iter_mut().zip(&a).for_each(|(xi, ai)| *xi += ai);
            }
            let g2 = &get(p, ls.ffn_norm)[0];
            let (w1, w2) = (get(p, ls.w1), get(p, ls.w2));
            for xi in x.iter_mut() {
                let hidden: Vec<f64> = vecmat(&rms(xi, g2), &w1)
                    .iter()
                    .map(|z| z / (1.0 + (-z).exp()))
                    .collect();
                let f = vecmat(&hidden, &w2);
                xi.iter_mut().zip(&f).for_each(|(a, b)| *a += b);
            }
        }
        let gf = &get(p, s.final_norm)[0];
        let hidden: Mat = x.iter().map(|r| rms(r, gf)).collect();
        let hw = get(p, s.head_w);
        let hb = &get(p, s.head_b)[0];
        let logits = hidden
            .iter()
            .map(|h| vecmat(h, &hw).iter().zip(hb).map(|(a, b)| a + b).collect())
            .collect();
        (hidden, logits)
    }
}

fn max_diff(var: &[f64], rows: &oracle::Mat) -> f64 {
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    assert_eq!(flat.len(), var.len());
    flat.iter().zip(var).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
}

fn to_rows(t: &Tensor) -> oracle::Mat {
    t.data().chunks(t.cols()).map(|r| r.to_vec()).collect()
}

#[test]
fn empty_context_matches_plain_causal_decoder() {
    let p = jittered(1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let tokens = rand_tokens(12, &mut rng);
    let layout = AttentionLayout::causal(vec![], &tokens, 0).unwrap();
    let tape = Tape::new();
    let bound = p.bind(&tape);
    let out = encode_window(&bound, &layout, &[], EncodeOptions { logits: true, ..Default::default() }).unwrap();
    let (h, logits) = oracle::forward(&p, &layout, &[]);
    assert!(max_diff(&out.hidden.value(), &h) < 1e-10);
    assert!(max_diff(&out.logits.unwrap().value(), &logits) < 1e-10);
}

#[test]
fn tree_context_matches_dense_mask_oracle() {
    let p = jittered(3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let d = p.config().d_model;
    let nodes = rand_rows(3, d, &mut rng);
    let text = rand_tokens(5, &mut rng);
    let layout =
        AttentionLayout::sub_segment(vec![(10, 0), (11, 1), (12, 2)], &text, p.config().gist_id(), 3)
            .unwrap();
    let tape = Tape::new();
    let bound = p.bind(&tape);
    let nv = tape.constant(&nodes);
    let ctx = project_all_layers(&bound, nv).unwrap();
    let out = encode_window(&bound, &layout, &ctx, EncodeOptions { logits: true, ..Default::default() }).unwrap();
    let ctx_rows: Vec<_> = ctx
        .iter()
        .map(|kv| (to_rows(&kv.k.to_tensor()), to_rows(&kv.v.to_tensor())))
        .collect();
    let (h, logits) = oracle::forward(&p, &layout, &ctx_rows);
    assert!(max_diff(&out.hidden.value(), &h) < 1e-10);
    let text_logits: oracle::Mat = out.text_rows.iter().map(|&i| logits[i].clone()).collect();
    assert!(max_diff(&out.logits.unwrap().value(), &text_logits) < 1e-10);
}

#[test]
fn context_length_mismatch_is_a_layout_error() {
    let p = jittered(5);
    let tape = Tape::new();
    let bound = p.bind(&tape);
    let nodes = tape.constant(&Tensor::zeros(vec![2, p.config().d_model]));
    let ctx = project_all_layers(&bound, nodes).unwrap();
    let layout = AttentionLayout::causal(vec![(0, 0), (1, 1), (2, 2)], &[1, 2], 3).unwrap();
    let err = encode_window(&bound, &layout, &ctx, EncodeOptions::default());
    assert!(matches!(err, Err(Error::Layout(_))));
}

#[test]
fn perturbing_a_token_leaves_earlier_rows_bit_identical() {
    let p = jittered(6);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let tokens = rand_tokens(10, &mut rng);
    for pos in [0, 4, 9] {
        let mut other = tokens.clone();
        other[pos] = (other[pos] + 1) % 256;
        let run = |toks: &[usize]| {
            let tape = Tape::new();
            let bound = p.bind(&tape);
            let layout = AttentionLayout::causal(vec![], toks, 0).unwrap();
            encode_window(&bound, &layout, &[], EncodeOptions::default())
                .unwrap()
                .hidden
                .to_tensor()
        };
        let (a, b) = (run(&tokens), run(&other));
        for r in 0..pos {
            assert_eq!(a.row(r), b.row(r), "row {r} moved after perturbing {pos}");
        }
        assert_ne!(a.row(pos), b.row(pos));
    }
}

#[test]
fn dependence_follows_random_masks() {
    let p = jittered(8);
    let n_layers = p.config().n_layers;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..20 {
        let w = rng.gen_range(2..9);
        let tokens = rand_tokens(w, &mut rng);
        let mut allow = vec![false; w * w];
        for i in 0..w {
            for j in 0..=i {
                allow[i * w + j] = j == i || rng.gen_bool(0.4);
            }
        }
        let layout = AttentionLayout::new(
            vec![],
            tokens.clone(),
            vec![TokenKind::Text; w],
            vec![0; w],
            (0..w).collect(),
            allow.clone(),
        )
        .unwrap();
        // Reachability after n_layers rounds of attention.
        let mut dep: Vec<Vec<bool>> = (0..w).map(|i| (0..w).map(|j| i == j).collect()).collect();
        for _ in 0..n_layers {
            let prev = dep.clone();
            for i in 0..w {
                for j in 0..w {
                    if allow[i * w + j] {
                        for t in 0..w {
                            dep[i][t] |= prev[j][t];
                        }
                    }
                }
            }
        }
        let t = rng.gen_range(0..w);
        let mut other = layout.clone();
        other.tokens[t] = (tokens[t] + 7) % 256;
        let run = |l: &AttentionLayout| {
            let tape = Tape::new();
            let bound = p.bind(&tape);
            encode_window(&bound, l, &[], EncodeOptions::default())
                .unwrap()
                .hidden
                .to_tensor()
        };
        let (a, b) = (run(&layout), run(&other));
        for i in 0..w {
            if dep[i][t] {
                assert_ne!(a.row(i), b.row(i));
            } else {
                assert_eq!(a.row(i), b.row(i));
            }
        }
    }
}

#[test]
fn zeroing_gist_projections_leaves_text_keys_and_values() {
    let p = jittered(10);
    let mut zeroed = p.clone();
    for ls in p.slots().layers.clone() {
        for s in [ls.gt_wq, ls.gt_wk, ls.gt_wv] {
            zeroed.tensor_mut(s).data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let text = rand_tokens(6, &mut rng);
    let layout = AttentionLayout::sub_segment(vec![], &text, 256, 0).unwrap();
    let run = |params: &ParameterSet| {
        let tape = Tape::new();
        let bound = params.bind(&tape);
        let out = encode_window(&bound, &layout, &[], EncodeOptions::default()).unwrap();
        let kv: Vec<(Tensor, Tensor)> = out
            .window_kv
            .iter()
            .map(|kv| (kv.k.to_tensor(), kv.v.to_tensor()))
            .collect();
        (out.hidden.to_tensor(), kv)
    };
    let (ha, kva) = run(&p);
    let (hb, kvb) = run(&zeroed);
    assert_ne!(ha.row(6), hb.row(6));
    for ((ka, va), (kb, vb)) in kva.iter().zip(&kvb) {
        for r in 0..6 {
            assert_eq!(ka.row(r), kb.row(r));
            assert_eq!(va.row(r), vb.row(r));
        }
        assert_ne!(ka.row(6), kb.row(6));
    }
}

#[test]
fn node_projection_is_linear_and_equivariant() {
    let p = jittered(12);
    let d = p.config().d_model;
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut nodes = rand_rows(4, d, &mut rng);
    nodes.data_mut()[d..2 * d].iter_mut().for_each(|x| *x = 0.0);
    let perm = [2, 0, 3, 1];
    let permuted = Tensor::from_rows(&perm.iter().map(|&i| nodes.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
    let tape = Tape::new();
    let bound = p.bind(&tape);
    for layer in 0..p.config().n_layers {
        let a = project_tree_context(&bound, tape.constant(&nodes), layer).unwrap();
        let b = project_tree_context(&bound, tape.constant(&permuted), layer).unwrap();
        let (ak, av, bk, bv) = (a.k.to_tensor(), a.v.to_tensor(), b.k.to_tensor(), b.v.to_tensor());
        assert!(ak.row(1).iter().chain(av.row(1)).all(|&x| x == 0.0));
        for (dst, &src) in perm.iter().enumerate() {
            assert_eq!(bk.row(dst), ak.row(src));
            assert_eq!(bv.row(dst), av.row(src));
        }
    }
    assert!(project_tree_context(&bound, tape.constant(&Tensor::zeros(vec![2, d + 1])), 0).is_err());
}

#[test]
fn node_projection_gradients_match_finite_differences() {
    let p = jittered(14);
    let d = p.config().d_model;
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let nodes = rand_rows(3, d, &mut rng);
    let text = rand_tokens(5, &mut rng);
    let targets = rand_tokens(5, &mut rng);
    let layout = AttentionLayout::sub_segment(vec![(0, 0), (1, 1), (2, 2)], &text, 256, 3).unwrap();
    let loss_of = |params: &ParameterSet| -> crate::Result<(f64, Vec<Vec<f64>>)> {
        let tape = Tape::new();
        let bound = params.bind(&tape);
        let ctx = project_all_layers(&bound, tape.constant(&nodes))?;
        let out = encode_window(&bound, &layout, &ctx, EncodeOptions { logits: true, ..Default::default() })?;
        let loss = out.logits.unwrap().cross_entropy(&targets, &[true; 5])?;
        let g = tape.backward(loss)?;
        let grads = bound.vars.iter().map(|&v| g.wrt(v)).collect();
        Ok((loss.item(), grads))
    };
    let (_, grads) = loss_of(&p).unwrap();
    for ls in p.slots().layers.clone() {
        for slot in [ls.node_wk, ls.node_wv] {
            let fd = finite_difference_grad(
                |t| {
                    let mut q = p.clone();
                    *q.tensor_mut(slot) = t.clone();
                    Ok(loss_of(&q)?.0)
                },
                p.tensor(slot),
                1e-5,
            )
            .unwrap();
            let err = max_relative_error(&grads[slot], fd.data(), 1e-6);
            assert!(err < 1e-4, "{}: {err}", p.name(slot));
        }
    }
}

#[test]
fn head_examples() {
    let p = jittered(16);
    let v = p.config().vocab_size;
    let d = p.config().d_model;
    let tape = Tape::new();
    let mut zero_bias = p.clone();
    let hb = p.slots().head_b;
    zero_bias.tensor_mut(hb).data_mut().iter_mut().for_each(|x| *x = 0.0);
    let bound = zero_bias.bind(&tape);
    let logits = lm_logits(&bound, tape.constant(&Tensor::zeros(vec![2, d]))).unwrap();
    let ce = logits.cross_entropy(&[3, 200], &[true, true]).unwrap();
    assert!((ce.item() - (v as f64).ln()).abs() < 1e-12);

    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let h = rand_rows(3, d, &mut rng);
    let bound = p.bind(&tape);
    let out = lm_logits(&bound, tape.constant(&h)).unwrap().to_tensor();
    let (w, b) = (p.tensor(p.slots().head_w), p.tensor(hb));
    for r in 0..3 {
        for c in 0..v {
            let want: f64 = (0..d).map(|k| h.row(r)[k] * w.data()[k * v + c]).sum::<f64>() + b.data()[c];
            assert!((out.row(r)[c] - want).abs() < 1e-12);
        }
    }

    let mut permuted = p.clone();
    let hw = p.slots().head_w;
    let shift = |c: usize| (c + 5) % v;
    for k in 0..d {
        for c in 0..v {
            permuted.tensor_mut(hw).data_mut()[k * v + shift(c)] = w.data()[k * v + c];
        }
    }
    for c in 0..v {
        permuted.tensor_mut(hb).data_mut()[shift(c)] = b.data()[c];
    }
    let bound = permuted.bind(&tape);
    let moved = lm_logits(&bound, tape.constant(&h)).unwrap().to_tensor();
    for r in 0..3 {
        for c in 0..v {
            assert_eq!(moved.row(r)[shift(c)], out.row(r)[c]);
        }
    }
}

#[test]
fn context_attention_is_a_softmax_slice() {
    let p = jittered(18);
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let nodes = rand_rows(4, p.config().d_model, &mut rng);
    let tape = Tape::new();
    let bound = p.bind(&tape);
    let ctx = project_all_layers(&bound, tape.constant(&nodes)).unwrap();
    let layout = AttentionLayout::causal((0..4).map(|i| (i, i)).collect(), &[5, 6, 7], 4).unwrap();
    let out = encode_window(
        &bound,
        &layout,
        &ctx,
        EncodeOptions {
            logits: false,
            context_attention: true,
        },
    )
    .unwrap();
    let a = out.context_attention.unwrap();
    assert_eq!(a.len(), 4);
    assert!(a.iter().all(|&x| x > 0.0));
    assert!(a.iter().sum::<f64>() <= 1.0 + 1e-12);
}
