//! Batch losses over a `B × B` score matrix whose diagonal holds the
//! positive pairs.

use serde::{Deserialize, Serialize};

use crate::diffcore::{Function, GradTape, Matrix, Var};
use crate::error::{Error, Result};

pub const DEFAULT_MARGIN: f64 = 0.2;
pub const DEFAULT_TEMPERATURE: f64 = 0.07;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub i2t: f64,
    pub t2i: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn new(i2t: f64, t2i: f64) -> Self {
        Self {
            i2t,
            t2i,
            total: i2t + t2i,
        }
    }
}

fn check_square(scores: &Matrix) -> Result<usize> {
    let (r, c) = scores.shape();
    if r != c {
        return Err(Error::Shape(format!("score matrix is {r}x{c}")));
    }
    if r < 2 {
        return Err(Error::NoNegatives);
    }
    Ok(r)
}

/// Hardest off-diagonal entry of row `i` (or column `i` when
/// `by_column`), lowest index on ties.
fn hardest_negative(s: &Matrix, i: usize, by_column: bool) -> usize {
    let n = s.rows();
    let at = |k: usize| if by_column { s[(k, i)] } else { s[(i, k)] };
    let mut best = usize::MAX;
    for k in (0..n).filter(|&k| k != i) {
        if best == usize::MAX || at(k) > at(best) {
            best = k;
        }
    }
    best
}

struct Hinges {
    rows: Vec<(usize, f64)>,
    cols: Vec<(usize, f64)>,
}

fn hinges(s: &Matrix, alpha: f64) -> Hinges {
    let n = s.rows();
    let rows = (0..n)
        .map(|i| {
            let j = hardest_negative(s, i, false);
            (j, (s[(i, j)] - s[(i, i)] + alpha).max(0.0))
        })
        .collect();
    let cols = (0..n)
        .map(|j| {
            let i = hardest_negative(s, j, true);
            (i, (s[(i, j)] - s[(j, j)] + alpha).max(0.0))
        })
        .collect();
    Hinges { rows, cols }
}

/// Dual triplet margin loss with the hardest in-batch negative per anchor.
/// Each direction averages its hinges over the `B` anchors.
pub fn triplet_dual(scores: &Matrix, alpha: f64) -> Result<LossBreakdown> {
    let n = check_square(scores)?;
    if !(alpha >= 0.0) {
        return Err(Error::InvalidParameter(format!("margin {alpha}")));
    }
    let h = hinges(scores, alpha);
    let i2t = h.rows.iter().map(|(_, v)| v).sum::<f64>() / n as f64;
    let t2i = h.cols.iter().map(|(_, v)| v).sum::<f64>() / n as f64;
    Ok(LossBreakdown::new(i2t, t2i))
}

/// Mean over `i` of `−log softmax(row_i / T)[i]`, halved, for rows and for
/// columns; the total is their average cross-entropy.
pub fn global_contrastive_breakdown(scores: &Matrix, temperature: f64) -> Result<LossBreakdown> {
    let n = check_square(scores)?;
    if !(temperature > 0.0) {
        return Err(Error::InvalidParameter(format!("temperature {temperature}")));
    }
    let (row_ce, col_ce) = contrastive_terms(scores, temperature);
    Ok(LossBreakdown::new(
        row_ce / (2.0 * n as f64),
        col_ce / (2.0 * n as f64),
    ))
}

pub fn global_contrastive(scores: &Matrix, temperature: f64) -> Result<f64> {
    Ok(global_contrastive_breakdown(scores, temperature)?.total)
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    max + xs.map(|x| (x - max).exp()).sum::<f64>().ln()
}

fn contrastive_terms(s: &Matrix, t: f64) -> (f64, f64) {
    let n = s.rows();
    let mut rows = 0.0;
    let mut cols = 0.0;
    for i in 0..n {
        rows += log_sum_exp((0..n).map(|k| s[(i, k)] / t)) - s[(i, i)] / t;
        cols += log_sum_exp((0..n).map(|k| s[(k, i)] / t)) - s[(i, i)] / t;
    }
    (rows, cols)
}

pub fn triplet_on(tape: &mut GradTape, scores: Var, alpha: f64) -> Result<Var> {
    triplet_dual(tape.value(scores), alpha)?;
    tape.apply(TripletDual { alpha }, &[scores])
}

pub fn contrastive_on(tape: &mut GradTape, scores: Var, temperature: f64) -> Result<Var> {
    global_contrastive(tape.value(scores), temperature)?;
    tape.apply(GlobalContrastive { temperature }, &[scores])
}

struct TripletDual {
    alpha: f64,
}

impl Function for TripletDual {
    fn name(&self) -> &'static str {
        "triplet_dual"
    }

    fn forward(&self, x: &[&Matrix]) -> Result<Matrix> {
        Ok(Matrix::scalar(triplet_dual(x[0], self.alpha)?.total))
    }

    fn backward(&self, x: &[&Matrix], _out: &Matrix, g: &Matrix) -> Result<Vec<Matrix>> {
        let s = x[0];
        let n = s.rows();
        let w = g.item() / n as f64;
        let h = hinges(s, self.alpha);
        let mut gs = Matrix::zeros(n, n);
        for (i, &(j, v)) in h.rows.iter().enumerate() {
            if v > 0.0 {
                gs[(i, j)] += w;
                gs[(i, i)] -= w;
            }
        }
        for (j, &(i, v)) in h.cols.iter().enumerate() {
            if v > 0.0 {
                gs[(i, j)] += w;
                gs[(j, j)] -= w;
            }
        }
        Ok(vec![gs])
    }
}

struct GlobalContrastive {
    temperature: f64,
}

impl Function for GlobalContrastive {
    fn name(&self) -> &'static str {
        "global_contrastive"
    }

    fn forward(&self, x: &[&Matrix]) -> Result<Matrix> {
        Ok(Matrix::scalar(global_contrastive(x[0], self.temperature)?))
    }

    fn backward(&self, x: &[&Matrix], _out: &Matrix, g: &Matrix) -> Result<Vec<Matrix>> {
        let s = x[0];
        let n = s.rows();
        let t = self.temperature;
        let w = g.item() / (2.0 * n as f64 * t);
        let mut gs = Matrix::zeros(n, n);
        for i in 0..n {
            let lse = log_sum_exp((0..n).map(|k| s[(i, k)] / t));
            for k in 0..n {
                gs[(i, k)] += w * (s[(i, k)] / t - lse).exp();
            }
            gs[(i, i)] -= w;
            let lse = log_sum_exp((0..n).map(|k| s[(k, i)] / t));
            for k in 0..n {
                gs[(k, i)] += w * (s[(k, i)] / t - lse).exp();
            }
            gs[(i, i)] -= w;
        }
        Ok(vec![gs])
    }
}
