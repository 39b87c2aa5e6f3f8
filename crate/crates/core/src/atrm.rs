//! Adaptive token refinement: learnable aggregation of `N` local tokens
//! into `N′` refined tokens.
//!
//! The mixing matrix is `W_ref = softmax(W_q · gelu(X·W_k)ᵀ / τ)` with the
//! softmax taken down each column (over the `N′` output rows), so every
//! valid input token distributes exactly unit mass across the outputs.
//! Padded columns are zeroed and the refined set is `X′ = W_ref · X`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{softmax_into, Function, GradTape, Matrix, Var};
use crate::error::{Error, Result};

pub const DEFAULT_RATIO: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AtrmParams {
    /// `d × d_k`
    pub w_k: Matrix,
    /// `n_out × d_k`
    pub w_q: Matrix,
    pub log_tau: f64,
}

impl AtrmParams {
    pub fn tau(&self) -> f64 {
        self.log_tau.exp()
    }

    pub fn n_out(&self) -> usize {
        self.w_q.rows()
    }

    pub fn dim(&self) -> usize {
        self.w_k.rows()
    }

    pub fn key_dim(&self) -> usize {
        self.w_k.cols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.w_k.cols() != self.w_q.cols() {
            return Err(Error::Shape(format!(
                "w_k has {} key columns, w_q has {}",
                self.w_k.cols(),
                self.w_q.cols()
            )));
        }
        if self.key_dim() >= self.dim() {
            return Err(Error::KeyDimTooLarge);
        }
        if self.n_out() == 0 {
            return Err(Error::InvalidParameter("ATRM needs at least one output token".into()));
        }
        Ok(())
    }

    /// Registers the parameters as tape leaves.
    pub fn to_tape(&self, tape: &mut GradTape) -> AtrmVars {
        AtrmVars {
            w_k: tape.param(self.w_k.clone()),
            w_q: tape.param(self.w_q.clone()),
            log_tau: tape.param(Matrix::scalar(self.log_tau)),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AtrmVars {
    pub w_k: Var,
    pub w_q: Var,
    pub log_tau: Var,
}

#[derive(Clone, Debug)]
pub struct RefinedTokens {
    /// `n_out × d`
    pub tokens: Matrix,
    /// `n_out × N`, the realized `W_ref`
    pub mixing: Matrix,
}

/// `max(1, round(ratio · n_in))` with half-away-from-zero rounding.
pub fn output_count(n_in: usize, ratio: f64) -> usize {
    ((ratio * n_in as f64).round() as usize).max(1)
}

/// Gaussian `N(0, 1/d_k)` projections from a seeded generator and `τ = 1`.
pub fn init_atrm(seed: u64, d: usize, d_k: usize, n_out: usize) -> Result<AtrmParams> {
    if d_k >= d {
        return Err(Error::KeyDimTooLarge);
    }
    if d_k == 0 || n_out == 0 {
        return Err(Error::InvalidParameter("ATRM dimensions must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std = 1.0 / (d_k as f64).sqrt();
    let w_k = Matrix::gaussian(d, d_k, std, &mut rng);
    let w_q = Matrix::gaussian(n_out, d_k, std, &mut rng);
    Ok(AtrmParams {
        w_k,
        w_q,
        log_tau: 0.0,
    })
}

pub fn refine(x: &Matrix, valid: &[bool], params: &AtrmParams) -> Result<RefinedTokens> {
    let mut tape = GradTape::new();
    let xv = tape.constant(x.clone());
    let vars = params.to_tape(&mut tape);
    let (tokens, mixing) = refine_on(&mut tape, xv, valid, &vars)?;
    Ok(RefinedTokens {
        tokens: tape.value(tokens).clone(),
        mixing: tape.value(mixing).clone(),
    })
}

/// Records the refinement on `tape`; returns `(tokens, mixing)`.
pub fn refine_on(tape: &mut GradTape, x: Var, valid: &[bool], p: &AtrmVars) -> Result<(Var, Var)> {
    let (n, d) = tape.value(x).shape();
    if valid.len() != n {
        return Err(Error::Shape(format!("{} mask entries for {n} tokens", valid.len())));
    }
    if !valid.iter().any(|v| *v) {
        return Err(Error::EmptyTokenSequence);
    }
    if tape.value(p.w_k).rows() != d {
        return Err(Error::Shape(format!(
            "tokens have dim {d}, w_k expects {}",
            tape.value(p.w_k).rows()
        )));
    }
    let keys = tape.matmul(x, p.w_k)?;
    let keys = tape.gelu(keys)?;
    let logits = tape.matmul_t(p.w_q, keys)?;
    let mixing = tape.apply(
        ColumnSoftmax {
            valid: valid.to_vec(),
        },
        &[logits, p.log_tau],
    )?;
    let tokens = tape.matmul(mixing, x)?;
    Ok((tokens, mixing))
}

/// Softmax down each valid column of `logits / exp(log_tau)`; masked
/// columns are exactly zero.
struct ColumnSoftmax {
    valid: Vec<bool>,
}

impl Function for ColumnSoftmax {
    fn name(&self) -> &'static str {
        "column_softmax"
    }

    fn forward(&self, x: &[&Matrix]) -> Result<Matrix> {
        let (logits, log_tau) = (x[0], x[1].item());
        let tau = log_tau.exp();
        let (rows, cols) = logits.shape();
        let mut out = Matrix::zeros(rows, cols);
        let mut col = vec![0.0; rows];
        let mut probs = vec![0.0; rows];
        for j in (0..cols).filter(|&j| self.valid[j]) {
            for i in 0..rows {
                col[i] = logits[(i, j)];
            }
            softmax_into(&col, tau, &mut probs)?;
            for i in 0..rows {
                out[(i, j)] = probs[i];
            }
        }
        Ok(out)
    }

    fn backward(&self, x: &[&Matrix], out: &Matrix, g: &Matrix) -> Result<Vec<Matrix>> {
        let (logits, tau) = (x[0], x[1].item().exp());
        let (rows, cols) = logits.shape();
        let mut gl = Matrix::zeros(rows, cols);
        let mut g_log_tau = 0.0;
        for j in (0..cols).filter(|&j| self.valid[j]) {
            let mean: f64 = (0..rows).map(|i| out[(i, j)] * g[(i, j)]).sum();
            for i in 0..rows {
                let dz = out[(i, j)] * (g[(i, j)] - mean) / tau;
                gl[(i, j)] = dz;
                g_log_tau -= dz * logits[(i, j)];
            }
        }
        Ok(vec![gl, Matrix::scalar(g_log_tau)])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::grad_check;
    use rand::Rng;

    fn random_case(seed: u64, n: usize, d: usize, n_out: usize) -> (Matrix, Vec<bool>, AtrmParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5);
        let x = Matrix::gaussian(n, d, 1.0, &mut rng);
        let mut valid: Vec<bool> = (0..n).map(|_| rng.random_bool(0.7)).collect();
        valid[0] = true;
        let mut p = init_atrm(seed, d, d / 2, n_out).unwrap();
        p.log_tau = rng.random_range(-1.0..1.0);
        (x, valid, p)
    }

    #[test]
    fn output_count_rounding() {
        assert_eq!(output_count(196, 0.2), 39);
        assert_eq!(output_count(10, 0.2), 2);
        assert_eq!(output_count(3, 0.2), 1);
        assert_eq!(output_count(16, 0.2), 3);
        assert_eq!(output_count(12, 0.2), 2);
        // 0.5 rounds up
        assert_eq!(output_count(5, 0.5), 3);
    }

    #[test]
    fn init_shapes_and_determinism() {
        let a = init_atrm(11, 8, 4, 3).unwrap();
        assert_eq!(a.w_k.shape(), (8, 4));
        assert_eq!(a.w_q.shape(), (3, 4));
        assert_eq!(a.tau(), 1.0);
        assert_eq!(a, init_atrm(11, 8, 4, 3).unwrap());
        assert_ne!(a, init_atrm(12, 8, 4, 3).unwrap());
        let err = init_atrm(1, 4, 4, 2).unwrap_err();
        assert_eq!(err.to_string(), "d_k must be strictly smaller than d");
    }

    #[test]
    fn columns_are_stochastic_and_padding_is_zero() {
        for seed in 0..50 {
            let (x, valid, p) = random_case(seed, 9, 6, 3);
            let r = refine(&x, &valid, &p).unwrap();
            for (j, &ok) in valid.iter().enumerate() {
                let s: f64 = (0..3).map(|i| r.mixing[(i, j)]).sum();
                if ok {
                    assert!((s - 1.0).abs() < 1e-9);
                } else {
                    assert!((0..3).all(|i| r.mixing[(i, j)] == 0.0));
                }
            }
            assert!(r.mixing.data().iter().all(|w| (0.0..=1.0).contains(w)));
        }
    }

    #[test]
    fn single_token_mass_is_conserved() {
        let (x, _, p) = random_case(3, 1, 6, 4);
        let r = refine(&x, &[true], &p).unwrap();
        for c in 0..6 {
            let s: f64 = (0..4).map(|i| r.tokens[(i, c)]).sum();
            assert!((s - x[(0, c)]).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_temperature_limit_is_one_hot() {
        let (x, valid, mut p) = random_case(5, 7, 6, 3);
        p.log_tau = -20.0;
        let r = refine(&x, &valid, &p).unwrap();
        for j in (0..7).filter(|&j| valid[j]) {
            let col: Vec<f64> = (0..3).map(|i| r.mixing[(i, j)]).collect();
            assert_eq!(col.iter().filter(|w| **w == 1.0).count(), 1, "{col:?}");
            assert_eq!(col.iter().filter(|w| **w == 0.0).count(), 2, "{col:?}");
        }
    }

    #[test]
    fn empty_sequence_is_rejected() {
        let (x, _, p) = random_case(1, 3, 6, 2);
        let err = refine(&x, &[false; 3], &p).unwrap_err();
        assert_eq!(err.to_string(), "empty token sequence");
    }

    #[test]
    fn gradient_wrt_all_inputs() {
        for seed in 0..20 {
            let (x, valid, p) = random_case(seed, 6, 6, 3);
            let weights = {
                let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
                Matrix::gaussian(3, 6, 1.0, &mut rng)
            };
            let f = |ps: &[Matrix]| -> Result<(f64, Vec<Matrix>)> {
                let mut t = GradTape::new();
                let xv = t.param(ps[0].clone());
                let vars = AtrmVars {
                    w_k: t.param(ps[1].clone()),
                    w_q: t.param(ps[2].clone()),
                    log_tau: t.param(ps[3].clone()),
                };
                let (tok, _) = refine_on(&mut t, xv, &valid, &vars)?;
                // nonlinear read-out so that mass conservation does not hide errors
                let tok = t.gelu(tok)?;
                let w = t.constant(weights.clone());
                let prod = t.matmul_t(tok, w)?;
                let m = t.mean_rows(prod)?;
                let one = t.constant(Matrix::from_vec(1, 3, vec![0.4, -1.3, 0.9])?);
                let y = t.matmul_t(m, one)?;
                let g = t.backward(y)?;
                let grads = [xv, vars.w_k, vars.w_q, vars.log_tau]
                    .iter()
                    .zip(ps)
                    .map(|(v, m)| g.get_or_zeros(*v, m))
                    .collect();
                Ok((t.value(y).item(), grads))
            };
            let params = [x, p.w_k.clone(), p.w_q.clone(), Matrix::scalar(p.log_tau)];
            let err = grad_check(f, &params, 2e-5).unwrap();
            assert!(err < 1e-6, "seed {seed}: {err}");
        }
    }
}
