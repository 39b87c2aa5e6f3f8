//! Recall@K in both directions under fine, coarse and combined scoring.

use serde::{Deserialize, Serialize};

use crate::clim::{self, AlignedTokens, ScoreMode};
use crate::corpus::{Pair, PairCorpus};
use crate::diffcore::Matrix;
use crate::error::{Error, Result};
use crate::trainer::{dims_of, ModelDims, ModelParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    /// Rows are image queries.
    ImageToText,
    /// Columns are text queries.
    TextToImage,
}

/// Fraction of queries whose diagonal entry is among the top `k` of its
/// row (i2t) or column (t2i). On exact ties a lower-index competitor
/// ranks ahead of the diagonal.
pub fn recall_at_k(scores: &Matrix, k: usize, direction: Direction) -> Result<f64> {
    let n = scores.rows();
    if scores.cols() != n {
        return Err(Error::Shape(format!("score matrix is {:?}, expected square", scores.shape())));
    }
    if k == 0 || k > n {
        return Err(Error::InvalidParameter(format!("k = {k} outside [1, {n}]")));
    }
    let at = |q: usize, c: usize| match direction {
        Direction::ImageToText => scores[(q, c)],
        Direction::TextToImage => scores[(c, q)],
    };
    let mut hits = 0usize;
    for q in 0..n {
        let target = at(q, q);
        let ahead = (0..n)
            .filter(|&c| c != q && (at(q, c) > target || (at(q, c) == target && c < q)))
            .count();
        if ahead < k {
            hits += 1;
        }
    }
    Ok(hits as f64 / n as f64)
}

/// Aligned token sets for every pair.
pub fn align_all(
    model: &ModelParams,
    pairs: &[Pair],
    dims: &ModelDims,
    include_global: bool,
) -> Result<(Vec<AlignedTokens>, Vec<AlignedTokens>)> {
    let mut images = Vec::with_capacity(pairs.len());
    let mut texts = Vec::with_capacity(pairs.len());
    for p in pairs {
        let (v, t) = model.align(p, dims, include_global)?;
        images.push(v);
        texts.push(t);
    }
    Ok((images, texts))
}

pub fn score_corpus(
    model: &ModelParams,
    pairs: &[Pair],
    dims: &ModelDims,
    include_global: bool,
    mode: ScoreMode,
) -> Result<Matrix> {
    let (images, texts) = align_all(model, pairs, dims, include_global)?;
    clim::score_matrix(&images, &texts, mode)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Recalls {
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectionalRecalls {
    pub i2t: Recalls,
    pub t2i: Recalls,
}

impl DirectionalRecalls {
    /// Mean of the two R@1 values.
    pub fn mean_r1(&self) -> f64 {
        (self.i2t.r1 + self.t2i.r1) / 2.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub include_global: bool,
    pub lambda: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            include_global: true,
            lambda: clim::DEFAULT_LAMBDA,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub fine: DirectionalRecalls,
    pub coarse: DirectionalRecalls,
    pub combined: DirectionalRecalls,
    pub config: EvalConfig,
    pub n_pairs: usize,
    /// FNV-1a 64 of the corpus file bytes, as 16 hex digits.
    pub corpus_fingerprint: String,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// R@{1,5,10} both ways; `k` beyond the number of pairs is clamped.
pub fn recalls(scores: &Matrix) -> Result<DirectionalRecalls> {
    let n = scores.rows();
    let dir = |d| -> Result<Recalls> {
        Ok(Recalls {
            r1: recall_at_k(scores, 1.min(n), d)?,
            r5: recall_at_k(scores, 5.min(n), d)?,
            r10: recall_at_k(scores, 10.min(n), d)?,
        })
    };
    Ok(DirectionalRecalls {
        i2t: dir(Direction::ImageToText)?,
        t2i: dir(Direction::TextToImage)?,
    })
}

pub fn evaluate(model: &ModelParams, corpus: &PairCorpus, cfg: &EvalConfig) -> Result<EvalReport> {
    if corpus.is_empty() {
        return Err(Error::InvalidParameter("empty corpus".into()));
    }
    if !(0.0..=1.0).contains(&cfg.lambda) {
        return Err(Error::InvalidParameter(format!("lambda {} outside [0, 1]", cfg.lambda)));
    }
    corpus.validate()?;
    let dims = dims_of(corpus);
    let (images, texts) = align_all(model, &corpus.pairs, &dims, cfg.include_global)?;
    let per_mode = |mode| -> Result<DirectionalRecalls> { recalls(&clim::score_matrix(&images, &texts, mode)?) };
    Ok(EvalReport {
        fine: per_mode(ScoreMode::Fine)?,
        coarse: per_mode(ScoreMode::Coarse)?,
        combined: per_mode(ScoreMode::Combined(cfg.lambda))?,
        config: cfg.clone(),
        n_pairs: corpus.len(),
        corpus_fingerprint: format!("{:016x}", corpus.fingerprint()?),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic, SyntheticConfig};
    use crate::trainer::TrainConfig;
    use proptest::prelude::*;

    fn mat(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn identity_scores_are_perfect() {
        let s = Matrix::identity(5);
        for k in 1..=5 {
            assert_eq!(recall_at_k(&s, k, Direction::ImageToText).unwrap(), 1.0);
            assert_eq!(recall_at_k(&s, k, Direction::TextToImage).unwrap(), 1.0);
        }
    }

    #[test]
    fn anti_diagonal_first_rank() {
        let s = mat(&[&[0.0, 0.0, 1.0], &[0.0, 1.0, 0.0], &[1.0, 0.0, 0.0]]);
        assert!((recall_at_k(&s, 1, Direction::ImageToText).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn ties_rank_the_lower_index_first() {
        let s = Matrix::zeros(3, 3);
        // only query 0 has no lower-index competitor
        assert!((recall_at_k(&s, 1, Direction::ImageToText).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!((recall_at_k(&s, 2, Direction::TextToImage).unwrap() - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn k_out_of_range() {
        let s = Matrix::identity(3);
        assert!(recall_at_k(&s, 0, Direction::ImageToText).is_err());
        assert!(recall_at_k(&s, 4, Direction::ImageToText).is_err());
        assert!(recall_at_k(&Matrix::zeros(2, 3), 1, Direction::ImageToText).is_err());
    }

    fn score_strategy() -> impl Strategy<Value = Matrix> {
        (1usize..9).prop_flat_map(|n| {
            // small integer grid so ties are common
            proptest::collection::vec(-3i32..4, n * n)
                .prop_map(move |v| Matrix::from_vec(n, n, v.into_iter().map(f64::from).collect()).unwrap())
        })
    }

    proptest! {
        #[test]
        fn recall_is_monotone_in_k(s in score_strategy()) {
            let n = s.rows();
            for d in [Direction::ImageToText, Direction::TextToImage] {
                let mut prev = 0.0;
                for k in 1..=n {
                    let r = recall_at_k(&s, k, d).unwrap();
                    prop_assert!(r >= prev && (0.0..=1.0).contains(&r));
                    prev = r;
                }
                prop_assert_eq!(prev, 1.0);
            }
        }

        #[test]
        fn directions_are_transposes(s in score_strategy()) {
            for k in 1..=s.rows() {
                prop_assert_eq!(
                    recall_at_k(&s, k, Direction::TextToImage).unwrap(),
                    recall_at_k(&s.transpose(), k, Direction::ImageToText).unwrap()
                );
            }
        }
    }

    fn setup(n: usize) -> (ModelParams, PairCorpus) {
        let c = generate_synthetic(&SyntheticConfig {
            seed: 11,
            n_pairs: n,
            patches: 8,
            text_len: 6,
            d_in: 8,
            n_concepts: 3,
            noise_sigma: 0.05,
            n_distractors: 2,
        })
        .unwrap();
        let cfg = TrainConfig { d: 8, d_k: 4, ..TrainConfig::finelip() };
        (ModelParams::init(&cfg, &dims_of(&c)).unwrap(), c)
    }

    #[test]
    fn report_round_trips_and_is_ordered() {
        let (m, c) = setup(12);
        let r = evaluate(&m, &c, &EvalConfig::default()).unwrap();
        assert_eq!(EvalReport::from_json(&r.to_json().unwrap()).unwrap(), r);
        for d in [r.fine, r.coarse, r.combined] {
            for x in [d.i2t, d.t2i] {
                assert!(0.0 <= x.r1 && x.r1 <= x.r5 && x.r5 <= x.r10 && x.r10 <= 1.0);
            }
        }
        assert_eq!(r.corpus_fingerprint.len(), 16);
    }

    #[test]
    fn combined_degenerates_to_each_mode() {
        let (m, c) = setup(12);
        let r0 = evaluate(&m, &c, &EvalConfig { lambda: 0.0, ..Default::default() }).unwrap();
        assert_eq!(r0.combined, r0.coarse);
        let r1 = evaluate(&m, &c, &EvalConfig { lambda: 1.0, ..Default::default() }).unwrap();
        assert_eq!(r1.combined, r1.fine);
    }

    #[test]
    fn single_pair_is_perfect() {
        let (m, c) = setup(1);
        let r = evaluate(&m, &c, &EvalConfig::default()).unwrap();
        for d in [r.fine, r.coarse, r.combined] {
            assert_eq!(d.mean_r1(), 1.0);
            assert_eq!(d.i2t.r10, 1.0);
        }
    }

    #[test]
    fn consistent_permutation_keeps_recalls() {
        let (m, c) = setup(12);
        let order: Vec<usize> = (0..12).rev().collect();
        let a = evaluate(&m, &c, &EvalConfig::default()).unwrap();
        let b = evaluate(&m, &c.reordered(&order), &EvalConfig::default()).unwrap();
        // distinct random scores, so no ties to break differently
        assert_eq!((a.fine, a.coarse, a.combined), (b.fine, b.coarse, b.combined));
    }
}
