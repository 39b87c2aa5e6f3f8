//! Synthetic paired corpora with planted token-level correspondence, and
//! the `FLCP` file format.
//!
//! Each pair owns `n_concepts` random unit vectors. The image holds those
//! concepts plus `P − n_concepts` background vectors; the text holds one
//! copy of every concept plus `n_distractors` distractors. Backgrounds and
//! distractors are drawn from a small pool shared by the whole corpus, so
//! they carry no pair identity. The text fills any remaining
//! slots with repeated mentions of its own concepts. Every token is then
//! perturbed by `N(0, σ²)` noise and both sequences are shuffled, so the
//! pairing can only be recovered token by token.
//!
//! `FLCP` layout, little-endian:
//!
//! ```text
//! "FLCP" | u32 version = 1 | u32 n_pairs | u32 P | u32 M_max | u32 d_in
//! per pair: P·d_in × f32 | u32 m_i | m_i·d_in × f32
//! ```

use std::fs;
use std::hash::Hasher;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffcore::{norm, Matrix};
use crate::error::{Error, Result};
use crate::io::{dim_u32, put_f32_matrix, put_u32, write_atomic, ByteReader};

pub const CORPUS_MAGIC: &[u8; 4] = b"FLCP";
pub const CORPUS_VERSION: u32 = 1;

/// Size of the corpus-wide pool that image backgrounds and text
/// distractors are drawn from.
pub const DISTRACTOR_POOL: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct Pair {
    /// `P × d_in`
    pub image: Matrix,
    /// `m_i × d_in`
    pub text: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairCorpus {
    pub d_in: usize,
    pub patches: usize,
    pub max_text_len: usize,
    pub pairs: Vec<Pair>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub n_pairs: usize,
    pub patches: usize,
    pub text_len: usize,
    pub d_in: usize,
    pub n_concepts: usize,
    pub noise_sigma: f64,
    pub n_distractors: usize,
}

impl SyntheticConfig {
    fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if self.n_pairs == 0 || self.patches == 0 || self.text_len == 0 || self.d_in == 0 {
            return bad("pairs, P, M and d_in must be positive".into());
        }
        if self.n_concepts == 0 || self.n_concepts > self.patches.min(self.text_len) {
            return bad(format!(
                "concepts {} must lie in 1..=min(P, M) = {}",
                self.n_concepts,
                self.patches.min(self.text_len)
            ));
        }
        if self.n_concepts + self.n_distractors > self.text_len {
            return bad(format!(
                "concepts + distractors = {} exceeds M = {}",
                self.n_concepts + self.n_distractors,
                self.text_len
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise {}", self.noise_sigma));
        }
        Ok(())
    }
}

fn unit_vector(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let n = norm(&v);
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Adds noise, then rounds to f32 so that the in-memory corpus is exactly
/// what the file format stores.
fn finish_rows(rows: Vec<Vec<f64>>, sigma: f64, rng: &mut ChaCha8Rng) -> Result<Matrix> {
    let d = rows[0].len();
    let mut data = Vec::with_capacity(rows.len() * d);
    for r in rows {
        for x in r {
            let noise: f64 = if sigma > 0.0 { sigma * Distribution::<f64>::sample(&StandardNormal, rng) } else { 0.0 };
            data.push((x + noise) as f32 as f64);
        }
    }
    Matrix::from_vec(data.len() / d, d, data)
}

pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<PairCorpus> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let pool: Vec<Vec<f64>> = (0..DISTRACTOR_POOL).map(|_| unit_vector(&mut rng, cfg.d_in)).collect();
    let mut pairs = Vec::with_capacity(cfg.n_pairs);
    for _ in 0..cfg.n_pairs {
        let concepts: Vec<Vec<f64>> = (0..cfg.n_concepts).map(|_| unit_vector(&mut rng, cfg.d_in)).collect();

        let mut image = concepts.clone();
        image.extend((cfg.n_concepts..cfg.patches).map(|_| pool[rng.random_range(0..pool.len())].clone()));
        image.shuffle(&mut rng);

        let mut text = concepts.clone();
        text.extend((0..cfg.n_distractors).map(|_| pool[rng.random_range(0..pool.len())].clone()));
        let repeats = cfg.text_len - cfg.n_concepts - cfg.n_distractors;
        text.extend((0..repeats).map(|_| concepts[rng.random_range(0..concepts.len())].clone()));
        text.shuffle(&mut rng);

        let image = finish_rows(image, cfg.noise_sigma, &mut rng)?;
        let text = finish_rows(text, cfg.noise_sigma, &mut rng)?;
        pairs.push(Pair { image, text });
    }
    Ok(PairCorpus {
        d_in: cfg.d_in,
        patches: cfg.patches,
        max_text_len: cfg.text_len,
        pairs,
    })
}

impl PairCorpus {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        for (k, p) in self.pairs.iter().enumerate() {
            if p.image.shape() != (self.patches, self.d_in) {
                return Err(Error::Malformed(format!("pair {k}: image is {:?}", p.image.shape())));
            }
            let m = p.text.rows();
            if m == 0 || m > self.max_text_len || p.text.cols() != self.d_in {
                return Err(Error::Malformed(format!("pair {k}: text is {:?}", p.text.shape())));
            }
        }
        Ok(())
    }

    fn with_pairs(&self, pairs: Vec<Pair>) -> Self {
        Self {
            d_in: self.d_in,
            patches: self.patches,
            max_text_len: self.max_text_len,
            pairs,
        }
    }

    /// First `n` pairs and the rest.
    pub fn split(&self, n: usize) -> (Self, Self) {
        let n = n.min(self.len());
        (
            self.with_pairs(self.pairs[..n].to_vec()),
            self.with_pairs(self.pairs[n..].to_vec()),
        )
    }

    /// Pairs reordered so that new position `k` holds old pair `order[k]`.
    pub fn reordered(&self, order: &[usize]) -> Self {
        self.with_pairs(order.iter().map(|&i| self.pairs[i].clone()).collect())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut out = Vec::new();
        out.extend_from_slice(CORPUS_MAGIC);
        put_u32(&mut out, CORPUS_VERSION);
        put_u32(&mut out, dim_u32(self.pairs.len(), "pair count")?);
        put_u32(&mut out, dim_u32(self.patches, "P")?);
        put_u32(&mut out, dim_u32(self.max_text_len, "M")?);
        put_u32(&mut out, dim_u32(self.d_in, "d_in")?);
        for p in &self.pairs {
            put_f32_matrix(&mut out, &p.image);
            put_u32(&mut out, dim_u32(p.text.rows(), "text length")?);
            put_f32_matrix(&mut out, &p.text);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(4).map_err(|_| Error::NotACorpusFile)? != CORPUS_MAGIC {
            return Err(Error::NotACorpusFile);
        }
        let version = r.u32()?;
        if version != CORPUS_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let n = r.u32()? as usize;
        let patches = r.u32()? as usize;
        let max_text_len = r.u32()? as usize;
        let d_in = r.u32()? as usize;
        let mut pairs = Vec::new();
        for k in 0..n {
            let image = r.f32_matrix(patches, d_in)?;
            let m = r.u32()? as usize;
            if m == 0 || m > max_text_len {
                return Err(Error::Malformed(format!("pair {k}: text length {m} outside 1..={max_text_len}")));
            }
            let text = r.f32_matrix(m, d_in)?;
            pairs.push(Pair { image, text });
        }
        if !r.is_at_end() {
            return Err(Error::Malformed("trailing bytes after corpus".into()));
        }
        Ok(Self {
            d_in,
            patches,
            max_text_len,
            pairs,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// 64-bit FNV-1a of the serialized corpus.
    pub fn fingerprint(&self) -> Result<u64> {
        Ok(fnv1a(&self.to_bytes()?))
    }
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = fnv::FnvHasher::default();
    h.write(bytes);
    h.finish()
}
