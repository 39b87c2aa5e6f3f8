//! Seeded mini-batch training: encoders, refinement, late interaction and
//! the losses, driven by Adam with separate encoder and ATRM rates.

mod adam;
mod config;
mod model;

pub use adam::{optimizer_step, AdamState, BETA1, BETA2, EPSILON};
pub use config::{LossKind, TrainConfig};
pub use model::{forward_backward, forward_batch, kink_margin, BatchOutput, ModelDims, ModelParams, ParamGroup, Slot, SlotMut};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clim::ScoreMode;
use crate::corpus::{Pair, PairCorpus};
use crate::diffcore::{grad_check, Matrix};
use crate::error::{Error, Result};
use crate::evalharness::{recall_at_k, score_corpus, Direction};

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean batch loss over the epoch.
    pub loss: f64,
    pub r1_i2t: f64,
    pub r1_t2i: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: ModelParams,
    pub dims: ModelDims,
    pub log: Vec<EpochMetrics>,
}

pub fn dims_of(corpus: &PairCorpus) -> ModelDims {
    ModelDims {
        d_in: corpus.d_in,
        patches: corpus.patches,
        max_text_len: corpus.max_text_len,
    }
}

/// Score mode matching the training objective.
pub fn primary_mode(cfg: &TrainConfig) -> ScoreMode {
    if cfg.uses_fine_scores() {
        ScoreMode::Fine
    } else {
        ScoreMode::Coarse
    }
}

/// Splits off the last `cfg.heldout` pairs for evaluation. With no
/// held-out pairs the training set doubles as the evaluation set.
pub fn split_heldout<'a>(cfg: &TrainConfig, corpus: &'a PairCorpus) -> Result<(&'a [Pair], &'a [Pair])> {
    let n = corpus.len();
    if cfg.heldout >= n {
        return Err(Error::InvalidParameter(format!(
            "{} held-out pairs leave nothing to train on ({n} pairs)",
            cfg.heldout
        )));
    }
    let (train, eval) = corpus.pairs.split_at(n - cfg.heldout);
    Ok((train, if eval.is_empty() { train } else { eval }))
}

/// Recall@1 in both directions on `pairs` under the objective's mode.
pub fn recall1(model: &ModelParams, pairs: &[Pair], dims: &ModelDims, cfg: &TrainConfig) -> Result<(f64, f64)> {
    let scores = score_corpus(model, pairs, dims, cfg.include_global, primary_mode(cfg))?;
    Ok((
        recall_at_k(&scores, 1, Direction::ImageToText)?,
        recall_at_k(&scores, 1, Direction::TextToImage)?,
    ))
}

/// Central-difference check of the gradient of the batch loss with
/// respect to every parameter of a freshly initialized model. Returns the
/// maximum relative error.
pub fn pipeline_grad_check(cfg: &TrainConfig, batch: &[Pair], dims: &ModelDims, epsilon: f64) -> Result<f64> {
    let model = ModelParams::init(cfg, dims)?;
    let batch: Vec<&Pair> = batch.iter().collect();
    grad_check(
        |p: &[Matrix]| {
            let mut m = model.clone();
            m.set_from_matrices(p)?;
            let (out, g) = forward_backward(&m, &batch, dims, cfg)?;
            Ok((out.loss.total, g))
        },
        &model.to_matrices(),
        epsilon,
    )
}

pub fn train(cfg: &TrainConfig, corpus: &PairCorpus) -> Result<TrainOutcome> {
    train_with(cfg, corpus, |_| {})
}

/// [`train`] with a callback invoked after every epoch.
pub fn train_with<F: FnMut(&EpochMetrics)>(cfg: &TrainConfig, corpus: &PairCorpus, mut on_epoch: F) -> Result<TrainOutcome> {
    cfg.validate()?;
    corpus.validate()?;
    if corpus.is_empty() {
        return Err(Error::InvalidParameter("empty corpus".into()));
    }
    let dims = dims_of(corpus);
    let mut model = ModelParams::init(cfg, &dims)?;
    let (train_pairs, eval_pairs) = split_heldout(cfg, corpus)?;
    if train_pairs.len() < 2 {
        return Err(Error::NoNegatives);
    }
    let mut order: Vec<usize> = (0..train_pairs.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(model::derived_seed(cfg.seed, 4));
    let mut state = AdamState::new();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            // a lone trailing pair has no in-batch negative
            if chunk.len() < 2 {
                continue;
            }
            let batch: Vec<&Pair> = chunk.iter().map(|&i| &train_pairs[i]).collect();
            let (out, grads) = forward_backward(&model, &batch, &dims, cfg)?;
            optimizer_step(&mut model, &grads, &mut state, cfg.lr_encoder, cfg.lr_atrm)?;
            total += out.loss.total;
            batches += 1;
        }
        let (r1_i2t, r1_t2i) = recall1(&model, eval_pairs, &dims, cfg)?;
        let m = EpochMetrics {
            epoch: epoch + 1,
            loss: total / batches as f64,
            r1_i2t,
            r1_t2i,
        };
        if !m.loss.is_finite() {
            return Err(Error::NonFiniteObjective);
        }
        on_epoch(&m);
        log.push(m);
    }
    Ok(TrainOutcome { model, dims, log })
}
