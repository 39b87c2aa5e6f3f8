use serde::{Deserialize, Serialize};

use crate::diffcore::Matrix;
use crate::error::{Error, Result};

use super::model::{ModelParams, ParamGroup};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// First/second moment estimates, one buffer per parameter slot.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    /// One Adam update of `params` in place. `lr` is indexed by slot.
    pub fn update(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]], lr: &[f64]) -> Result<()> {
        if params.len() != grads.len() || params.len() != lr.len() {
            return Err(Error::Shape("optimizer slots disagree".into()));
        }
        if grads.iter().any(|g| g.iter().any(|x| !x.is_finite())) {
            return Err(Error::Diverged);
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - BETA1.powi(t);
        let bc2 = 1.0 - BETA2.powi(t);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.len() != g.len() || self.m[k].len() != p.len() {
                return Err(Error::Shape(format!("optimizer slot {k} changed size")));
            }
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.len() {
                m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
                v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr[k] * m_hat / (v_hat.sqrt() + EPSILON);
            }
            if p.iter().any(|x| !x.is_finite()) {
                return Err(Error::Diverged);
            }
        }
        Ok(())
    }
}

/// Adam step over every model parameter, with `lr_encoder` for encoder
/// slots and `lr_atrm` for refinement slots. `grads` follows
/// [`ModelParams::slots`] order.
pub fn optimizer_step(
    model: &mut ModelParams,
    grads: &[Matrix],
    state: &mut AdamState,
    lr_encoder: f64,
    lr_atrm: f64,
) -> Result<()> {
    let groups: Vec<ParamGroup> = model.slots().iter().map(|s| s.group).collect();
    let lr: Vec<f64> = groups
        .iter()
        .map(|g| match g {
            ParamGroup::Encoder => lr_encoder,
            ParamGroup::Atrm => lr_atrm,
        })
        .collect();
    let grad_views: Vec<&[f64]> = grads.iter().map(Matrix::data).collect();
    let mut slots = model.slots_mut();
    let mut views: Vec<&mut [f64]> = slots.iter_mut().map(|s| &mut *s.data).collect();
    state.update(&mut views, &grad_views, &lr)
}
