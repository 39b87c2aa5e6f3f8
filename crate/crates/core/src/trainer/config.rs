use serde::{Deserialize, Serialize};

use crate::atrm::DEFAULT_RATIO;
use crate::clim::DEFAULT_LAMBDA;
use crate::error::{Error, Result};
use crate::loss::{DEFAULT_MARGIN, DEFAULT_TEMPERATURE};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    /// Dual triplet loss over fine scores.
    Triplet,
    /// Symmetric cross-entropy over coarse scores (the global baseline).
    Contrastive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Aggregation ratio `N′/N`.
    pub ratio: f64,
    /// Triplet margin.
    pub alpha: f64,
    pub lr_encoder: f64,
    pub lr_atrm: f64,
    pub atrm_image: bool,
    pub atrm_text: bool,
    pub include_global: bool,
    pub loss: LossKind,
    /// Softmax temperature of the contrastive baseline.
    pub temperature: f64,
    /// Fine/coarse weight for combined scoring.
    pub lambda: f64,
    /// Token feature width.
    pub d: usize,
    /// ATRM key width; must be smaller than `d`.
    pub d_k: usize,
    pub train_pos: bool,
    /// Base text positional table, stretched by `pos_keep` / `pos_factor`.
    pub pos_base_len: usize,
    pub pos_keep: usize,
    pub pos_factor: usize,
    /// Trailing corpus pairs held out of training and used for the
    /// per-epoch recall. Zero measures recall on the training pairs.
    pub heldout: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 30,
            batch_size: 32,
            ratio: DEFAULT_RATIO,
            alpha: DEFAULT_MARGIN,
            lr_encoder: 1e-3,
            lr_atrm: 1e-2,
            atrm_image: true,
            atrm_text: true,
            include_global: true,
            loss: LossKind::Triplet,
            temperature: DEFAULT_TEMPERATURE,
            lambda: DEFAULT_LAMBDA,
            d: 32,
            d_k: 16,
            train_pos: true,
            pos_base_len: 16,
            pos_keep: 4,
            pos_factor: 4,
            heldout: 0,
        }
    }
}

impl TrainConfig {
    /// ATRM on both branches, late interaction, triplet loss.
    pub fn finelip() -> Self {
        Self::default()
    }

    /// Late interaction over raw local tokens, no refinement.
    pub fn clim_only() -> Self {
        Self {
            atrm_image: false,
            atrm_text: false,
            ..Self::default()
        }
    }

    /// Global-token contrastive baseline.
    pub fn coarse_baseline() -> Self {
        Self {
            atrm_image: false,
            atrm_text: false,
            loss: LossKind::Contrastive,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.batch_size < 2 {
            return bad(format!("batch size {} < 2", self.batch_size));
        }
        if !(self.ratio > 0.0 && self.ratio < 1.0) {
            return bad(format!("ratio {} outside (0, 1)", self.ratio));
        }
        if !(self.lr_encoder > 0.0 && self.lr_atrm > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if !(self.alpha >= 0.0) {
            return bad(format!("margin {}", self.alpha));
        }
        if !(self.temperature > 0.0) {
            return bad(format!("temperature {}", self.temperature));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad(format!("lambda {} outside [0, 1]", self.lambda));
        }
        if self.d_k >= self.d {
            return Err(Error::KeyDimTooLarge);
        }
        if self.d_k == 0 {
            return bad("d_k must be positive".into());
        }
        Ok(())
    }

    pub fn uses_fine_scores(&self) -> bool {
        self.loss == LossKind::Triplet
    }
}
