use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::BackboneConfig;
use crate::error::{Error, Result};
use crate::numeric::{Gradients, Tape, Tensor, Var};

/// Which half of the parameter partition a tensor belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Group {
    Frozen,
    Trainable,
}

impl Group {
    pub fn prefix(self) -> &'static str {
        match self {
            Group::Frozen => "frozen",
            Group::Trainable => "trainable",
        }
    }
}

/// Which group an optimizer is currently allowed to move.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Backbone,
    Gist,
}

/// Indices of one decoder layer's tensors inside a [`ParameterSet`].
#[derive(Clone, Debug)]
pub struct LayerSlots {
    pub attn_norm: usize,
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
    pub ffn_norm: usize,
    pub w1: usize,
    pub w2: usize,
    pub gt_wq: usize,
    pub gt_wk: usize,
    pub gt_wv: usize,
    pub node_wk: usize,
    pub node_wv: usize,
}

/// Indices of the aggregator's tensors.
#[derive(Clone, Debug)]
pub struct AggSlots {
    pub wq: usize,
    pub wk: usize,
    /// Block-diagonal value map stored as `agg_heads` stacked `[dh, dh]` blocks.
    pub wv: usize,
    pub wo: usize,
}

#[derive(Clone, Debug)]
pub struct Slots {
    pub tok_emb: usize,
    pub final_norm: usize,
    pub head_w: usize,
    pub head_b: usize,
    pub gt_emb: usize,
    pub layers: Vec<LayerSlots>,
    pub agg: AggSlots,
}

/// Every tensor of the model, each tagged frozen or trainable.
#[derive(Clone, Debug)]
pub struct ParameterSet {
    config: BackboneConfig,
    names: Vec<String>,
    groups: Vec<Group>,
    tensors: Vec<Tensor>,
    slots: Slots,
    phase: Phase,
}

struct Builder {
    names: Vec<String>,
    groups: Vec<Group>,
    tensors: Vec<Tensor>,
}

impl Builder {
    fn add(&mut self, group: Group, name: String, t: Tensor) -> usize {
        self.names.push(format!("{}/{}", group.prefix(), name));
        self.groups.push(group);
        self.tensors.push(t);
        self.tensors.len() - 1
    }
}

fn block_identity(heads: usize, dh: usize) -> Tensor {
    let mut t = Tensor::zeros(vec![heads * dh, dh]);
    let data = t.data_mut();
    for h in 0..heads {
        for i in 0..dh {
            data[(h * dh + i) * dh + i] = 1.0;
        }
    }
    t
}

impl ParameterSet {
    /// Fresh random weights. Gist-side projections start as copies of their
    /// text-side counterparts; call [`ParameterSet::reset_gist_from_text`]
    /// again after backbone pre-training.
    pub fn init(config: &BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let (v, ff, nl) = (config.vocab_size, config.d_ff, config.n_layers);
        let proj = 1.0 / (d as f64).sqrt();
        let resid = 1.0 / (2.0 * nl as f64).sqrt();
        let mut b = Builder {
            names: Vec::new(),
            groups: Vec::new(),
            tensors: Vec::new(),
        };
        let f = Group::Frozen;
        let tok_emb = b.add(f, "tok_emb".into(), Tensor::randn(vec![v, d], 1.0, &mut rng));
        let mut frozen_layers = Vec::new();
        for l in 0..nl {
            let p = |n: &str| format!("layer{l}/{n}");
            let attn_norm = b.add(f, p("attn_norm"), Tensor::full(vec![d], 1.0));
            let wq = b.add(f, p("wq"), Tensor::randn(vec![d, d], proj, &mut rng));
            let wk = b.add(f, p("wk"), Tensor::randn(vec![d, d], proj, &mut rng));
            let wv = b.add(f, p("wv"), Tensor::randn(vec![d, d], proj, &mut rng));
            let wo = b.add(f, p("wo"), Tensor::randn(vec![d, d], proj * resid, &mut rng));
            let ffn_norm = b.add(f, p("ffn_norm"), Tensor::full(vec![d], 1.0));
            let w1 = b.add(f, p("w1"), Tensor::randn(vec![d, ff], proj, &mut rng));
            let w2 = b.add(
                f,
                p("w2"),
                Tensor::randn(vec![ff, d], resid / (ff as f64).sqrt(), &mut rng),
            );
            frozen_layers.push((attn_norm, wq, wk, wv, wo, ffn_norm, w1, w2));
        }
        let final_norm = b.add(f, "final_norm".into(), Tensor::full(vec![d], 1.0));
        let head_w = b.add(f, "head_w".into(), Tensor::randn(vec![d, v], proj, &mut rng));
        let head_b = b.add(f, "head_b".into(), Tensor::zeros(vec![v]));

        let t = Group::Trainable;
        let gt_emb = b.add(t, "gt_emb".into(), Tensor::randn(vec![1, d], 1.0, &mut rng));
        let mut layers = Vec::new();
        for (l, &(attn_norm, wq, wk, wv, wo, ffn_norm, w1, w2)) in frozen_layers.iter().enumerate() {
            let p = |n: &str| format!("layer{l}/{n}");
            let gt_wq = b.add(t, p("gt_wq"), b.tensors[wq].clone());
            let gt_wk = b.add(t, p("gt_wk"), b.tensors[wk].clone());
            let gt_wv = b.add(t, p("gt_wv"), b.tensors[wv].clone());
            let node_wk = b.add(t, p("node_wk"), b.tensors[wk].clone());
            let node_wv = b.add(t, p("node_wv"), b.tensors[wv].clone());
            layers.push(LayerSlots {
                attn_norm,
                wq,
                wk,
                wv,
                wo,
                ffn_norm,
                w1,
                w2,
                gt_wq,
                gt_wk,
                gt_wv,
                node_wk,
                node_wv,
            });
        }
        let (ah, sd, adh) = (config.agg_heads, config.agg_score_dim, config.agg_head_dim());
        let agg = AggSlots {
            wq: b.add(t, "agg/wq".into(), Tensor::randn(vec![d, ah * sd], proj, &mut rng)),
            wk: b.add(t, "agg/wk".into(), Tensor::randn(vec![d, ah * sd], proj, &mut rng)),
            wv: b.add(t, "agg/wv".into(), block_identity(ah, adh)),
            wo: b.add(t, "agg/wo".into(), block_identity(ah, adh)),
        };
        let slots = Slots {
            tok_emb,
            final_norm,
            head_w,
            head_b,
            gt_emb,
            layers,
            agg,
        };
        let mut set = ParameterSet {
            config: config.clone(),
            names: b.names,
            groups: b.groups,
            tensors: b.tensors,
            slots,
            phase: Phase::Gist,
        };
        set.set_phase(Phase::Gist);
        Ok(set)
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn slots(&self) -> &Slots {
        &self.slots
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn group(&self, i: usize) -> Group {
        self.groups[i]
    }

    pub fn tensor(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.tensors[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    /// Marks the group that the phase trains as requiring gradients and the
    /// other group as not.
    pub fn set_phase(&mut self, phase: Phase) {
        self.phase = phase;
        let active = match phase {
            Phase::Backbone => Group::Frozen,
            Phase::Gist => Group::Trainable,
        };
        for (t, &g) in self.tensors.iter_mut().zip(&self.groups) {
            t.set_requires_grad(g == active);
        }
    }

    /// Re-derives the gist-side and node-context projections from the current
    /// text-side weights.
    pub fn reset_gist_from_text(&mut self) {
        for l in self.slots.layers.clone() {
            for (dst, src) in [
                (l.gt_wq, l.wq),
                (l.gt_wk, l.wk),
                (l.gt_wv, l.wv),
                (l.node_wk, l.wk),
                (l.node_wv, l.wv),
            ] {
                let keep = self.tensors[dst].requires_grad();
                self.tensors[dst] = self.tensors[src].clone();
                self.tensors[dst].set_requires_grad(keep);
            }
        }
    }

    pub fn indices(&self, group: Group) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.groups[i] == group).collect()
    }

    pub fn count(&self, group: Group) -> usize {
        self.indices(group).iter().map(|&i| self.tensors[i].numel()).sum()
    }

    pub fn aggregator_count(&self) -> usize {
        let a = &self.slots.agg;
        [a.wq, a.wk, a.wv, a.wo].iter().map(|&i| self.tensors[i].numel()).sum()
    }

    /// SHA-256 over names, shapes and values of one group.
    pub fn checksum(&self, group: Group) -> String {
        let mut h = Sha256::new();
        for i in self.indices(group) {
            h.update(self.names[i].as_bytes());
            for &s in self.tensors[i].shape() {
                h.update((s as u64).to_le_bytes());
            }
            for &x in self.tensors[i].data() {
                h.update(x.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Records every tensor as a leaf of `tape`, honouring `requires_grad`.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        Bound {
            vars: self.tensors.iter().map(|t| tape.leaf(t)).collect(),
            config: self.config.clone(),
            slots: self.slots.clone(),
        }
    }

    /// Adds the gradients found in `grads` to every tensor that requires them.
    pub fn accumulate(&mut self, bound: &Bound<'_>, grads: &Gradients) -> Result<()> {
        for (t, &v) in self.tensors.iter_mut().zip(&bound.vars) {
            if t.requires_grad() {
                if let Some(g) = grads.get(v) {
                    t.accumulate_grad(g)?;
                }
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Builds a set from named tensors, validating names and shapes against
    /// a freshly initialised layout for `config`.
    pub fn from_named(config: &BackboneConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        let mut set = ParameterSet::init(config, 0)?;
        if named.len() != set.len() {
            return Err(Error::arg(format!(
                "expected {} tensors, found {}",
                set.len(),
                named.len()
            )));
        }
        for (name, t) in named {
            let i = set
                .index_of(&name)
                .ok_or_else(|| Error::arg(format!("unknown tensor {name}")))?;
            if t.shape() != set.tensors[i].shape() {
                return Err(Error::Dimension {
                    op: "load",
                    left: set.tensors[i].shape().to_vec(),
                    right: t.shape().to_vec(),
                });
            }
            let rg = set.tensors[i].requires_grad();
            set.tensors[i] = Tensor::new(t.shape().to_vec(), t.into_data())?;
            set.tensors[i].set_requires_grad(rg);
        }
        Ok(set)
    }
}

/// Tape handles for a [`ParameterSet`], indexed by the same slots.
pub struct Bound<'t> {
    pub vars: Vec<Var<'t>>,
    pub config: BackboneConfig,
    pub slots: Slots,
}

impl<'t> Bound<'t> {
    pub fn get(&self, slot: usize) -> Var<'t> {
        self.vars[slot]
    }
}
