//! Linear stand-ins for the image and text towers.
//!
//! Images: `P` patch features become `P` local rows (`patches·proj + pos`)
//! preceded by a global [CLS] row, `mean(local)·cls_head`.
//!
//! Texts: row 0 is a learned [BOS] vector, rows `1..=M` are
//! `words·proj + pos[1..=M]`, row `M + 1` is the global [EOS] row
//! `mean(rows 0..=M)·cls_head`, and the rest up to `max_len` is zero
//! padding marked invalid.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{GradTape, Matrix, Var};
use crate::error::{Error, Result};
use crate::posembed::{self, PositionalTable};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    /// `d_in × d`
    pub proj: Matrix,
    /// `d × d`
    pub cls_head: Matrix,
    pub pos: PositionalTable,
    /// Learned [BOS] row (`1 × d`); text branch only.
    pub bos: Option<Matrix>,
}

impl EncoderParams {
    pub fn input_dim(&self) -> usize {
        self.proj.rows()
    }

    pub fn dim(&self) -> usize {
        self.proj.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if self.cls_head.shape() != (d, d) {
            return Err(Error::Shape(format!("cls_head is {:?}, expected {d}x{d}", self.cls_head.shape())));
        }
        if self.pos.dim() != d {
            return Err(Error::Shape(format!("positional dim {} != {d}", self.pos.dim())));
        }
        if let Some(b) = &self.bos {
            if b.shape() != (1, d) {
                return Err(Error::Shape(format!("bos is {:?}, expected 1x{d}", b.shape())));
            }
        }
        Ok(())
    }

    /// Registers the parameters on `tape`. The positional table becomes a
    /// constant unless `train_pos` is set.
    pub fn to_tape(&self, tape: &mut GradTape, train_pos: bool) -> EncoderVars {
        let pos = self.pos.entries().clone();
        EncoderVars {
            proj: tape.param(self.proj.clone()),
            cls_head: tape.param(self.cls_head.clone()),
            pos: if train_pos { tape.param(pos) } else { tape.constant(pos) },
            bos: self.bos.as_ref().map(|b| tape.param(b.clone())),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderVars {
    pub proj: Var,
    pub cls_head: Var,
    pub pos: Var,
    pub bos: Option<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub tokens: Matrix,
    pub valid: Vec<bool>,
    pub global_index: usize,
}

impl TokenSequence {
    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    pub fn global(&self) -> &[f64] {
        self.tokens.row(self.global_index)
    }
}

/// Tape handles produced by encoding one image.
#[derive(Clone, Copy, Debug)]
pub struct ImageEncoding {
    /// `P × d` local rows.
    pub local: Var,
    /// `1 × d` [CLS] row.
    pub cls: Var,
}

/// Tape handles produced by encoding one text.
#[derive(Clone, Copy, Debug)]
pub struct TextEncoding {
    pub bos: Var,
    /// `M × d` content rows.
    pub content: Var,
    /// `1 × d` [EOS] row.
    pub eos: Var,
    pub len: usize,
}

/// Image encoder with a fresh `pos` table of `patches` rows.
pub fn init_image_encoder<R: Rng + ?Sized>(rng: &mut R, d_in: usize, d: usize, patches: usize) -> Result<EncoderParams> {
    positive_dims(&[d_in, d, patches])?;
    Ok(EncoderParams {
        proj: Matrix::gaussian(d_in, d, 1.0 / (d_in as f64).sqrt(), rng),
        cls_head: Matrix::gaussian(d, d, 1.0 / (d as f64).sqrt(), rng),
        pos: PositionalTable::new(Matrix::gaussian(patches, d, 0.02, rng))?,
        bos: None,
    })
}

/// Text encoder whose positional table is a `base_len`-row table stretched
/// with `keep` / `factor`.
pub fn init_text_encoder<R: Rng + ?Sized>(
    rng: &mut R,
    d_in: usize,
    d: usize,
    base_len: usize,
    keep: usize,
    factor: usize,
) -> Result<EncoderParams> {
    positive_dims(&[d_in, d, base_len])?;
    let proj = Matrix::gaussian(d_in, d, 1.0 / (d_in as f64).sqrt(), rng);
    let cls_head = Matrix::gaussian(d, d, 1.0 / (d as f64).sqrt(), rng);
    let base = PositionalTable::new(Matrix::gaussian(base_len, d, 0.02, rng))?;
    let bos = Matrix::gaussian(1, d, 0.02, rng);
    Ok(EncoderParams {
        proj,
        cls_head,
        pos: posembed::stretch(&base, keep, factor)?,
        bos: Some(bos),
    })
}

fn positive_dims(dims: &[usize]) -> Result<()> {
    if dims.contains(&0) {
        return Err(Error::InvalidParameter("encoder dimensions must be positive".into()));
    }
    Ok(())
}

pub fn encode_image(patches: &Matrix, params: &EncoderParams) -> Result<TokenSequence> {
    let mut tape = GradTape::new();
    let x = tape.constant(patches.clone());
    let vars = params.to_tape(&mut tape, false);
    let enc = encode_image_on(&mut tape, x, &vars)?;
    let tokens = Matrix::vstack(&[tape.value(enc.cls), tape.value(enc.local)])?;
    let n = tokens.rows();
    Ok(TokenSequence {
        tokens,
        valid: vec![true; n],
        global_index: 0,
    })
}

pub fn encode_image_on(tape: &mut GradTape, patches: Var, p: &EncoderVars) -> Result<ImageEncoding> {
    let (rows, cols) = tape.value(patches).shape();
    if rows == 0 {
        return Err(Error::EmptyTokenSequence);
    }
    if cols != tape.value(p.proj).rows() {
        return Err(Error::Shape(format!(
            "patch dim {cols} != encoder input dim {}",
            tape.value(p.proj).rows()
        )));
    }
    if rows > tape.value(p.pos).rows() {
        return Err(Error::Shape(format!(
            "{rows} patches but {} image positions",
            tape.value(p.pos).rows()
        )));
    }
    let proj = tape.matmul(patches, p.proj)?;
    let local = tape.add_rows_from(proj, p.pos, 0)?;
    let pooled = tape.mean_rows(local)?;
    let cls = tape.matmul(pooled, p.cls_head)?;
    Ok(ImageEncoding { local, cls })
}

pub fn encode_text(words: &Matrix, params: &EncoderParams, max_len: usize) -> Result<TokenSequence> {
    let mut tape = GradTape::new();
    let x = tape.constant(words.clone());
    let vars = params.to_tape(&mut tape, false);
    let enc = encode_text_on(&mut tape, x, &vars, max_len)?;
    let d = params.dim();
    let m = enc.len;
    let pad = Matrix::zeros(max_len - m - 2, d);
    let tokens = Matrix::vstack(&[tape.value(enc.bos), tape.value(enc.content), tape.value(enc.eos), &pad])?;
    let valid = (0..max_len).map(|i| i <= m + 1).collect();
    Ok(TokenSequence {
        tokens,
        valid,
        global_index: m + 1,
    })
}

pub fn encode_text_on(tape: &mut GradTape, words: Var, p: &EncoderVars, max_len: usize) -> Result<TextEncoding> {
    let bos = p
        .bos
        .ok_or_else(|| Error::InvalidParameter("text encoder has no [BOS] row".into()))?;
    let (m, cols) = tape.value(words).shape();
    if m == 0 {
        return Err(Error::EmptyTokenSequence);
    }
    if m + 2 > max_len {
        return Err(Error::CaptionTooLong);
    }
    if max_len > tape.value(p.pos).rows() {
        return Err(Error::InvalidParameter(format!(
            "context of {max_len} exceeds the {}-row positional table",
            tape.value(p.pos).rows()
        )));
    }
    if cols != tape.value(p.proj).rows() {
        return Err(Error::Shape(format!(
            "word dim {cols} != encoder input dim {}",
            tape.value(p.proj).rows()
        )));
    }
    let proj = tape.matmul(words, p.proj)?;
    let content = tape.add_rows_from(proj, p.pos, 1)?;
    let prefix = tape.vstack(&[bos, content])?;
    let pooled = tape.mean_rows(prefix)?;
    let eos = tape.matmul(pooled, p.cls_head)?;
    Ok(TextEncoding {
        bos,
        content,
        eos,
        len: m,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(42)
    }

    #[test]
    fn image_rows_and_identity_head() {
        let mut r = rng();
        let patches = Matrix::gaussian(5, 4, 1.0, &mut r);
        let params = EncoderParams {
            proj: Matrix::identity(4),
            cls_head: Matrix::identity(4),
            pos: PositionalTable::new(Matrix::zeros(5, 4)).unwrap(),
            bos: None,
        };
        let seq = encode_image(&patches, &params).unwrap();
        assert_eq!(seq.tokens.rows(), 6);
        assert_eq!(seq.global_index, 0);
        assert_eq!(seq.valid_count(), 6);
        let mean = patches.mean_rows().unwrap();
        assert!(seq.tokens.slice_rows(0, 1).unwrap().max_abs_diff(&mean) < 1e-15);
        assert_eq!(seq, encode_image(&patches, &params).unwrap());
    }

    #[test]
    fn text_layout_and_padding() {
        let mut r = rng();
        let params = init_text_encoder(&mut r, 3, 4, 16, 4, 4).unwrap();
        assert_eq!(params.pos.len(), 52);
        let words = Matrix::gaussian(4, 3, 1.0, &mut r);
        let seq = encode_text(&words, &params, 9).unwrap();
        assert_eq!(seq.tokens.rows(), 9);
        assert_eq!(seq.valid_count(), 6);
        assert_eq!(seq.global_index, 5);
        assert!(seq.tokens.slice_rows(6, 3).unwrap().data().iter().all(|v| *v == 0.0));

        let full = encode_text(&Matrix::gaussian(7, 3, 1.0, &mut r), &params, 9).unwrap();
        assert!(full.valid.iter().all(|v| *v));

        let err = encode_text(&Matrix::gaussian(8, 3, 1.0, &mut r), &params, 9).unwrap_err();
        assert_eq!(err.to_string(), "caption exceeds context");
    }

    #[test]
    fn padding_region_is_inert() {
        let mut r = rng();
        let params = init_text_encoder(&mut r, 3, 4, 16, 4, 4).unwrap();
        let words = Matrix::gaussian(3, 3, 1.0, &mut r);
        // a longer context only appends zero rows
        let a = encode_text(&words, &params, 6).unwrap();
        let b = encode_text(&words, &params, 12).unwrap();
        assert_eq!(a.tokens.slice_rows(0, 5).unwrap(), b.tokens.slice_rows(0, 5).unwrap());
    }

    #[test]
    fn encoder_gradients() {
        let mut r = rng();
        let params = init_text_encoder(&mut r, 3, 4, 8, 2, 2).unwrap();
        let words = Matrix::gaussian(3, 3, 1.0, &mut r);
        let probe = Matrix::gaussian(4, 4, 1.0, &mut r);
        let f = |ps: &[Matrix]| -> Result<(f64, Vec<Matrix>)> {
            let mut t = GradTape::new();
            let x = t.constant(words.clone());
            let vars = EncoderVars {
                proj: t.param(ps[0].clone()),
                cls_head: t.param(ps[1].clone()),
                pos: t.param(ps[2].clone()),
                bos: Some(t.param(ps[3].clone())),
            };
            let enc = encode_text_on(&mut t, x, &vars, 6)?;
            let all = t.vstack(&[enc.content, enc.eos])?;
            let g = t.gelu(all)?;
            let w = t.constant(probe.clone());
            let y = t.matmul(g, w)?;
            let n = t.normalize_rows(y)?;
            let m = t.mean_rows(n)?;
            let one = t.constant(Matrix::from_vec(1, 4, vec![1.0, -0.5, 0.25, 2.0])?);
            let out = t.matmul_t(m, one)?;
            let gr = t.backward(out)?;
            let vs = [vars.proj, vars.cls_head, vars.pos, vars.bos.unwrap()];
            Ok((t.value(out).item(), vs.iter().zip(ps).map(|(v, p)| gr.get_or_zeros(*v, p)).collect()))
        };
        let ps = [
            params.proj.clone(),
            params.cls_head.clone(),
            params.pos.entries().clone(),
            params.bos.clone().unwrap(),
        ];
        let err = grad_check(f, &ps, 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");
    }
}
