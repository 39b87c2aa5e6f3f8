//! Cross-modal late interaction scoring.
//!
//! The fine score of an image token set `V` against a text token set `T`
//! is
//!
//! ```text
//! R(V, T) = mean_{v ∈ V} max_{t ∈ T} cos(v, t) + mean_{t ∈ T} max_{v ∈ V} cos(t, v)
//! ```
//!
//! so it lies in `[-2, 2]`. Global rows ([CLS], [EOS]) are ordinary
//! members of the sets when present. Max ties resolve to the lowest index.

use serde::{Deserialize, Serialize};

use crate::diffcore::{cosine_sim, dot, norm, Function, GradTape, Matrix, Var, COSINE_EPS};
use crate::error::{Error, Result};

pub const DEFAULT_LAMBDA: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreMode {
    Fine,
    Coarse,
    /// Weighted sum `λ·fine/2 + (1 − λ)·coarse`.
    Combined(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredPair {
    pub fine: f64,
    pub coarse: f64,
}

impl ScoredPair {
    pub fn get(&self, mode: ScoreMode) -> f64 {
        match mode {
            ScoreMode::Fine => self.fine,
            ScoreMode::Coarse => self.coarse,
            ScoreMode::Combined(lambda) => combined_score(self.fine, self.coarse, lambda),
        }
    }
}

/// One side of a pair as seen by the scorer: the rows that take part in
/// late interaction plus the global vector used for coarse scoring.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignedTokens {
    pub tokens: Matrix,
    pub global: Vec<f64>,
}

/// Copy of `m` with every row scaled to unit length (rows shorter than ε
/// are divided by ε).
pub fn normalize_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for i in 0..out.rows() {
        let r = out.row_mut(i);
        let n = norm(r).max(COSINE_EPS);
        r.iter_mut().for_each(|v| *v /= n);
    }
    out
}

/// Bidirectional max-mean pooling over rows that are already unit length.
/// Returns the score and the argmax of each row in each direction.
fn pooled_max(v: &Matrix, t: &Matrix) -> (f64, Vec<usize>, Vec<usize>) {
    let (p, m) = (v.rows(), t.rows());
    let mut best_for_v = vec![f64::NEG_INFINITY; p];
    let mut arg_for_v = vec![0usize; p];
    let mut best_for_t = vec![f64::NEG_INFINITY; m];
    let mut arg_for_t = vec![0usize; m];
    for i in 0..p {
        let vi = v.row(i);
        for j in 0..m {
            let s = dot(vi, t.row(j));
            if s > best_for_v[i] {
                best_for_v[i] = s;
                arg_for_v[i] = j;
            }
            if s > best_for_t[j] {
                best_for_t[j] = s;
                arg_for_t[j] = i;
            }
        }
    }
    let i2t = best_for_v.iter().sum::<f64>() / p as f64;
    let t2i = best_for_t.iter().sum::<f64>() / m as f64;
    (i2t + t2i, arg_for_v, arg_for_t)
}

fn check_pair(v: &Matrix, t: &Matrix) -> Result<()> {
    if v.rows() == 0 || t.rows() == 0 {
        return Err(Error::EmptyTokenSequence);
    }
    if v.cols() != t.cols() {
        return Err(Error::Shape(format!(
            "token dims {} and {} differ",
            v.cols(),
            t.cols()
        )));
    }
    Ok(())
}

pub fn fine_score(v_tokens: &Matrix, t_tokens: &Matrix) -> Result<f64> {
    check_pair(v_tokens, t_tokens)?;
    Ok(pooled_max(&normalize_rows(v_tokens), &normalize_rows(t_tokens)).0)
}

pub fn coarse_score(v_cls: &[f64], t_eos: &[f64]) -> Result<f64> {
    if v_cls.len() != t_eos.len() {
        return Err(Error::Shape(format!(
            "global dims {} and {} differ",
            v_cls.len(),
            t_eos.len()
        )));
    }
    Ok(cosine_sim(v_cls, t_eos))
}

/// `λ·(fine/2) + (1 − λ)·coarse`; halving maps the fine range onto the
/// coarse one.
pub fn combined_score(fine: f64, coarse: f64, lambda: f64) -> f64 {
    lambda * (fine / 2.0) + (1.0 - lambda) * coarse
}

pub fn score_pair(image: &AlignedTokens, text: &AlignedTokens) -> Result<ScoredPair> {
    Ok(ScoredPair {
        fine: fine_score(&image.tokens, &text.tokens)?,
        coarse: coarse_score(&image.global, &text.global)?,
    })
}

/// `B × B` matrix whose `(i, j)` entry scores image `i` against text `j`.
/// Each cell equals the corresponding [`score_pair`] value bit for bit.
pub fn score_matrix(images: &[AlignedTokens], texts: &[AlignedTokens], mode: ScoreMode) -> Result<Matrix> {
    if images.len() != texts.len() {
        return Err(Error::RaggedBatch);
    }
    let b = images.len();
    for s in images.iter().chain(texts) {
        if s.tokens.rows() == 0 {
            return Err(Error::EmptyTokenSequence);
        }
    }
    let needs_fine = !matches!(mode, ScoreMode::Coarse);
    let needs_coarse = !matches!(mode, ScoreMode::Fine);
    let (vn, tn): (Vec<Matrix>, Vec<Matrix>) = if needs_fine {
        (
            images.iter().map(|s| normalize_rows(&s.tokens)).collect(),
            texts.iter().map(|s| normalize_rows(&s.tokens)).collect(),
        )
    } else {
        (Vec::new(), Vec::new())
    };
    let mut out = Matrix::zeros(b, b);
    for i in 0..b {
        for j in 0..b {
            let fine = if needs_fine {
                check_pair(&images[i].tokens, &texts[j].tokens)?;
                pooled_max(&vn[i], &tn[j]).0
            } else {
                0.0
            };
            let coarse = if needs_coarse {
                coarse_score(&images[i].global, &texts[j].global)?
            } else {
                0.0
            };
            out[(i, j)] = ScoredPair { fine, coarse }.get(mode);
        }
    }
    Ok(out)
}

/// Records the fine score of two row-normalized token matrices on the
/// tape as a `1 × 1` node.
pub fn fine_score_on(tape: &mut GradTape, v_unit: Var, t_unit: Var) -> Result<Var> {
    check_pair(tape.value(v_unit), tape.value(t_unit))?;
    tape.apply(LateInteraction, &[v_unit, t_unit])
}

struct LateInteraction;

impl Function for LateInteraction {
    fn name(&self) -> &'static str {
        "late_interaction"
    }

    fn forward(&self, x: &[&Matrix]) -> Result<Matrix> {
        Ok(Matrix::scalar(pooled_max(x[0], x[1]).0))
    }

    fn backward(&self, x: &[&Matrix], _out: &Matrix, g: &Matrix) -> Result<Vec<Matrix>> {
        let (v, t) = (x[0], x[1]);
        let (_, arg_v, arg_t) = pooled_max(v, t);
        let g = g.item();
        let mut gv = Matrix::zeros(v.rows(), v.cols());
        let mut gt = Matrix::zeros(t.rows(), t.cols());
        let wv = g / v.rows() as f64;
        for (i, &j) in arg_v.iter().enumerate() {
            axpy(gv.row_mut(i), wv, t.row(j));
            axpy(gt.row_mut(j), wv, v.row(i));
        }
        let wt = g / t.rows() as f64;
        for (j, &i) in arg_t.iter().enumerate() {
            axpy(gt.row_mut(j), wt, v.row(i));
            axpy(gv.row_mut(i), wt, t.row(j));
        }
        Ok(vec![gv, gt])
    }
}

#[inline]
fn axpy(dst: &mut [f64], a: f64, x: &[f64]) {
    for (d, v) in dst.iter_mut().zip(x) {
        *d += a * v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_1_SQRT_2;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    /// Scalar loops over the raw definition using `cosine_sim`.
    fn oracle(v: &Matrix, t: &Matrix) -> f64 {
        let mut a = 0.0;
        for i in 0..v.rows() {
            let mut best = f64::NEG_INFINITY;
            for j in 0..t.rows() {
                best = best.max(cosine_sim(v.row(i), t.row(j)));
            }
            a += best;
        }
        let mut b = 0.0;
        for j in 0..t.rows() {
            let mut best = f64::NEG_INFINITY;
            for i in 0..v.rows() {
                best = best.max(cosine_sim(t.row(j), v.row(i)));
            }
            b += best;
        }
        a / v.rows() as f64 + b / t.rows() as f64
    }

    #[test]
    fn hand_worked_pair() {
        let v = m(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let t = m(&[&[1.0, 0.0], &[FRAC_1_SQRT_2, FRAC_1_SQRT_2]]);
        let s = fine_score(&v, &t).unwrap();
        assert!((s - 1.707_106_781_186_547_5).abs() < 1e-12, "{s}");
        assert!((s - oracle(&v, &t)).abs() < 1e-12);
    }

    #[test]
    fn self_pair_scores_two() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = Matrix::gaussian(5, 4, 1.0, &mut rng);
        assert!((fine_score(&v, &v).unwrap() - 2.0).abs() < 1e-9);
    }

    #[test]
    fn empty_sets_are_rejected() {
        let err = fine_score(&Matrix::zeros(0, 2), &m(&[&[1.0, 0.0]])).unwrap_err();
        assert_eq!(err.to_string(), "empty token sequence");
    }

    #[test]
    fn coarse_and_combined() {
        assert!((coarse_score(&[2.0, 1.0], &[2.0, 1.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(coarse_score(&[1.0, 0.0], &[0.0, 3.0]).unwrap(), 0.0);
        assert!((coarse_score(&[1.0, 0.0], &[1.0, 1.0]).unwrap() - FRAC_1_SQRT_2).abs() < 1e-15);
        assert_eq!(combined_score(1.3, -0.4, 0.0), -0.4);
        assert_eq!(combined_score(2.0, 0.3, 1.0), 1.0);
        assert_eq!(combined_score(2.0, 1.0, 0.5), 1.0);
    }

    #[test]
    fn duplicate_image_row_only_moves_first_term() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let v = Matrix::gaussian(3, 4, 1.0, &mut rng);
        let t = Matrix::gaussian(4, 4, 1.0, &mut rng);
        let v2 = Matrix::vstack(&[&v, &v.slice_rows(1, 1).unwrap()]).unwrap();
        assert!((fine_score(&v2, &t).unwrap() - oracle(&v2, &t)).abs() < 1e-12);
    }

    #[test]
    fn matrix_matches_pairwise_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let sets: Vec<AlignedTokens> = (0..6)
            .map(|k| AlignedTokens {
                tokens: Matrix::gaussian(2 + k % 3, 5, 1.0, &mut rng),
                global: Matrix::gaussian(1, 5, 1.0, &mut rng).into_vec(),
            })
            .collect();
        let (imgs, txts) = sets.split_at(3);
        for mode in [ScoreMode::Fine, ScoreMode::Coarse, ScoreMode::Combined(0.3)] {
            let s = score_matrix(imgs, txts, mode).unwrap();
            assert_eq!(s.shape(), (3, 3));
            for i in 0..3 {
                for j in 0..3 {
                    let p = score_pair(&imgs[i], &txts[j]).unwrap();
                    assert_eq!(s[(i, j)], p.get(mode));
                }
            }
        }
        assert!(matches!(
            score_matrix(imgs, &txts[..2], ScoreMode::Fine),
            Err(Error::RaggedBatch)
        ));
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v = Matrix::gaussian(4, 5, 1.0, &mut rng);
            let t = Matrix::gaussian(3, 5, 1.0, &mut rng);
            let f = |ps: &[Matrix]| -> Result<(f64, Vec<Matrix>)> {
                let mut tape = GradTape::new();
                let a = tape.param(ps[0].clone());
                let b = tape.param(ps[1].clone());
                let an = tape.normalize_rows(a)?;
                let bn = tape.normalize_rows(b)?;
                let s = fine_score_on(&mut tape, an, bn)?;
                let g = tape.backward(s)?;
                Ok((tape.value(s).item(), vec![g.get_or_zeros(a, &ps[0]), g.get_or_zeros(b, &ps[1])]))
            };
            let err = grad_check(f, &[v, t], 1e-6).unwrap();
            assert!(err < 1e-6, "seed {seed}: {err}");
        }
    }

    proptest::proptest! {
        #[test]
        fn set_function_and_scale_invariance(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v = Matrix::gaussian(5, 4, 1.0, &mut rng);
            let t = Matrix::gaussian(3, 4, 1.0, &mut rng);
            let base = fine_score(&v, &t).unwrap();
            let pv = v.select_rows(&[3, 0, 4, 2, 1]).unwrap();
            let pt = t.select_rows(&[2, 0, 1]).unwrap();
            proptest::prop_assert!((fine_score(&pv, &pt).unwrap() - base).abs() < 1e-12);
            let mut sv = v.clone();
            for i in 0..sv.rows() {
                let f = 0.1 + i as f64 * 3.7;
                sv.row_mut(i).iter_mut().for_each(|x| *x *= f);
            }
            proptest::prop_assert!((fine_score(&sv, &t).unwrap() - base).abs() < 1e-9);
            proptest::prop_assert!((-2.0 - 1e-9..=2.0 + 1e-9).contains(&base));
        }
    }
}
