use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::objective::{backbone_predictions, gist_predictions};
use super::optim::{Adam, AdamConfig};
use crate::backbone::{ParameterSet, Phase};
use crate::error::{Error, Result};
use crate::numeric::Tape;
use crate::segmenter::{build_plan, ScoringConfig, SegmentPlan};

/// Environment variable capping the number of worker threads.
pub const THREADS_ENV: &str = "ADMTREE_THREADS";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub phase: Phase,
    /// Defaults to 1e-3 for the backbone phase and 3e-4 for the gist phase.
    pub lr: Option<f64>,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub corpus: Option<PathBuf>,
    /// Planning settings for gist-phase documents. Not read from JSON: run
    /// configurations carry them in their compression section.
    #[serde(skip)]
    pub scoring: ScoringConfig,
    pub optimizer: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            phase: Phase::Gist,
            lr: None,
            steps: 500,
            batch_size: 8,
            seed: 0,
            corpus: None,
            scoring: ScoringConfig::default(),
            optimizer: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn learning_rate(&self) -> f64 {
        self.lr.unwrap_or(match self.phase {
            Phase::Backbone => 1e-3,
            Phase::Gist => 3e-4,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let lr = self.learning_rate();
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::arg(format!("learning rate {lr} must be positive")));
        }
        if self.batch_size == 0 {
            return Err(Error::arg("batch size must be positive"));
        }
        self.scoring.validate()?;
        self.optimizer.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub wall_ms: u64,
}

impl StepRecord {
    pub fn write_jsonl(&self, out: &mut impl Write) -> Result<()> {
        serde_json::to_writer(&mut *out, self)?;
        out.write_all(b"\n")?;
        Ok(())
    }
}

/// Worker pool sized by [`THREADS_ENV`] when set.
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::arg(format!("{THREADS_ENV}={v} is not a positive integer")))?;
        b = b.num_threads(n);
    }
    b.build().map_err(|e| Error::arg(e.to_string()))
}

/// Stateful loop over one phase. Batches are drawn from per-epoch shuffles
/// of the corpus; per-item gradients are computed in parallel and summed in
/// batch order, so results do not depend on the thread count.
pub struct Trainer {
    config: TrainConfig,
    corpus: Vec<Vec<usize>>,
    plans: Vec<Option<SegmentPlan>>,
    optimizer: Adam,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    next: usize,
    step: usize,
    pool: rayon::ThreadPool,
    started: Instant,
}

struct Item {
    tokens: Vec<usize>,
    doc: usize,
}

impl Trainer {
    /// Switches `model` into the configured phase and prepares the loop.
    pub fn new(model: &mut ParameterSet, corpus: Vec<Vec<usize>>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if corpus.is_empty() {
            return Err(std::io::Error::new(std::io::ErrorKind::InvalidData, "training corpus is empty").into());
        }
        if let Some(i) = corpus.iter().position(|d| d.len() < 2) {
            return Err(Error::arg(format!("document {i} has fewer than 2 tokens")));
        }
        if let Some(&bad) = corpus.iter().flatten().find(|&&t| t >= model.config().gist_id()) {
            return Err(Error::arg(format!("corpus token {bad} collides with the gist id")));
        }
        model.set_phase(config.phase);
        Ok(Trainer {
            optimizer: Adam::new(model, config.optimizer.clone())?,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            plans: vec![None; corpus.len()],
            corpus,
            config,
            order: Vec::new(),
            next: 0,
            step: 0,
            pool: thread_pool()?,
            started: Instant::now(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    fn draw(&mut self, model: &ParameterSet) -> Result<Vec<Item>> {
        let mut items = Vec::with_capacity(self.config.batch_size);
        for _ in 0..self.config.batch_size {
            if self.next == self.order.len() {
                self.order = (0..self.corpus.len()).collect();
                self.order.shuffle(&mut self.rng);
                self.next = 0;
            }
            let doc = self.order[self.next];
            self.next += 1;
            let full = &self.corpus[doc];
            let tokens = match self.config.phase {
                Phase::Backbone => {
                    let span = full.len().min(model.config().max_window + 1);
                    let at = self.rng.gen_range(0..=full.len() - span);
                    full[at..at + span].to_vec()
                }
                Phase::Gist => {
                    if self.plans[doc].is_none() {
                        self.plans[doc] = Some(build_plan(full, model, &self.config.scoring)?);
                    }
                    full.clone()
                }
            };
            items.push(Item { tokens, doc });
        }
        Ok(items)
    }

    /// Loss and per-tensor gradients of one item.
    fn item(&self, model: &ParameterSet, item: &Item) -> Result<(f64, Vec<Option<Vec<f64>>>)> {
        let tape = Tape::new();
        let bound = model.bind(&tape);
        let pred = match self.config.phase {
            Phase::Backbone => backbone_predictions(&bound, &item.tokens)?,
            Phase::Gist => {
                let plan = self.plans[item.doc].as_ref().expect("plans are built while drawing");
                gist_predictions(&tape, &bound, &item.tokens, plan)?
            }
        };
        let loss = pred.loss()?;
        let grads = tape.backward(loss)?;
        let per = (0..model.len())
            .map(|i| {
                if model.tensor(i).requires_grad() {
                    grads.get(bound.vars[i]).map(<[f64]>::to_vec)
                } else {
                    None
                }
            })
            .collect();
        Ok((loss.item(), per))
    }

    /// One optimizer step on a fresh batch.
    pub fn step(&mut self, model: &mut ParameterSet) -> Result<StepRecord> {
        if model.phase() != self.config.phase {
            return Err(Error::state("model phase changed under the trainer"));
        }
        let items = self.draw(model)?;
        let results: Vec<Result<(f64, Vec<Option<Vec<f64>>>)>> = {
            let shared: &ParameterSet = model;
            self.pool
                .install(|| items.par_iter().map(|it| self.item(shared, it)).collect())
        };
        let mut loss = 0.0;
        for r in results {
            let (l, grads) = r?;
            loss += l;
            for (i, g) in grads.into_iter().enumerate() {
                if let Some(g) = g {
                    model.tensor_mut(i).accumulate_grad(&g)?;
                }
            }
        }
        let n = items.len() as f64;
        let lr = self.config.learning_rate();
        self.optimizer.step(model, lr, 1.0 / n)?;
        self.step += 1;
        Ok(StepRecord {
            step: self.step,
            loss: loss / n,
            lr,
            wall_ms: self.started.elapsed().as_millis() as u64,
        })
    }

    /// Runs `steps` steps, handing each record to `on_step`.
    pub fn run(
        &mut self,
        model: &mut ParameterSet,
        steps: usize,
        mut on_step: impl FnMut(&StepRecord) -> Result<()>,
    ) -> Result<Vec<StepRecord>> {
        let mut out = Vec::with_capacity(steps);
        for _ in 0..steps {
            let r = self.step(model)?;
            on_step(&r)?;
            out.push(r);
        }
        Ok(out)
    }
}

/// Runs `config.steps` steps of the configured phase.
pub fn train(model: &mut ParameterSet, corpus: Vec<Vec<usize>>, config: &TrainConfig) -> Result<Vec<StepRecord>> {
    let mut t = Trainer::new(model, corpus, config.clone())?;
    t.run(model, config.steps, |_| Ok(()))
}

/// Gist-phase training; the backbone stays untouched.
pub fn train_gist(model: &mut ParameterSet, corpus: Vec<Vec<usize>>, config: &TrainConfig) -> Result<Vec<StepRecord>> {
    if config.phase != Phase::Gist {
        return Err(Error::arg("train_gist needs phase = gist"));
    }
    train(model, corpus, config)
}
