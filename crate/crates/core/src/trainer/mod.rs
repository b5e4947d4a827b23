//! Backbone pre-training and gist-side training.

mod corpus;
mod objective;
mod optim;
mod train;

pub use corpus::{load_corpus, make_needle_corpus, make_repetition_corpus, needle_len, NeedleSample};
pub use objective::{
    backbone_predictions, gist_loss, gist_loss_with_plan, gist_position_nll, gist_predictions, Predictions,
};
pub use optim::{Adam, AdamConfig};
pub use train::{thread_pool, train, train_gist, StepRecord, TrainConfig, Trainer, THREADS_ENV};

#[cfg(test)]
mod tests;
