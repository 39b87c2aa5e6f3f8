use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::atrm::{self, AtrmParams, AtrmVars};
use crate::clim::{self, AlignedTokens};
use crate::corpus::Pair;
use crate::diffcore::{GradTape, Matrix, Var};
use crate::error::{Error, Result};
use crate::io::Checkpoint;
use crate::loss::{self, LossBreakdown};
use crate::posembed::PositionalTable;
use crate::toyencoder::{self, EncoderParams, EncoderVars};

use super::config::{LossKind, TrainConfig};

/// Corpus-derived sizes the model is built for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub d_in: usize,
    pub patches: usize,
    pub max_text_len: usize,
}

impl ModelDims {
    /// Text context: [BOS] + content + [EOS].
    pub fn context_len(&self) -> usize {
        self.max_text_len + 2
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Encoder,
    Atrm,
}

pub struct Slot<'a> {
    pub name: &'static str,
    pub group: ParamGroup,
    pub shape: (usize, usize),
    pub data: &'a [f64],
}

pub struct SlotMut<'a> {
    pub name: &'static str,
    pub group: ParamGroup,
    pub shape: (usize, usize),
    pub data: &'a mut [f64],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub image_encoder: EncoderParams,
    pub text_encoder: EncoderParams,
    /// Present iff image-side refinement is part of the architecture.
    pub image_atrm: Option<AtrmParams>,
    pub text_atrm: Option<AtrmParams>,
}

fn sub_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 finalizer over (seed, stream)
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) fn derived_seed(seed: u64, stream: u64) -> u64 {
    sub_seed(seed, stream)
}

impl ModelParams {
    pub fn init(cfg: &TrainConfig, dims: &ModelDims) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, 1));
        let image_encoder = toyencoder::init_image_encoder(&mut rng, dims.d_in, cfg.d, dims.patches)?;
        let text_encoder = toyencoder::init_text_encoder(
            &mut rng,
            dims.d_in,
            cfg.d,
            cfg.pos_base_len,
            cfg.pos_keep,
            cfg.pos_factor,
        )?;
        if text_encoder.pos.len() < dims.context_len() {
            return Err(Error::InvalidParameter(format!(
                "stretched positional table has {} rows, text context needs {}",
                text_encoder.pos.len(),
                dims.context_len()
            )));
        }
        // the contrastive baseline never reads refined tokens
        let refine = cfg.loss == LossKind::Triplet;
        let image_atrm = (refine && cfg.atrm_image)
            .then(|| {
                let n_out = atrm::output_count(dims.patches, cfg.ratio);
                atrm::init_atrm(sub_seed(cfg.seed, 2), cfg.d, cfg.d_k, n_out)
            })
            .transpose()?;
        let text_atrm = (refine && cfg.atrm_text)
            .then(|| {
                let n_out = atrm::output_count(dims.max_text_len, cfg.ratio);
                atrm::init_atrm(sub_seed(cfg.seed, 3), cfg.d, cfg.d_k, n_out)
            })
            .transpose()?;
        Ok(Self {
            image_encoder,
            text_encoder,
            image_atrm,
            text_atrm,
        })
    }

    pub fn dim(&self) -> usize {
        self.image_encoder.dim()
    }

    pub fn validate(&self) -> Result<()> {
        self.image_encoder.validate()?;
        self.text_encoder.validate()?;
        if self.text_encoder.bos.is_none() {
            return Err(Error::InvalidParameter("text encoder has no [BOS] row".into()));
        }
        if self.image_encoder.dim() != self.text_encoder.dim()
            || self.image_encoder.input_dim() != self.text_encoder.input_dim()
        {
            return Err(Error::Shape("image and text encoders disagree on dims".into()));
        }
        for a in self.image_atrm.iter().chain(&self.text_atrm) {
            a.validate()?;
            if a.dim() != self.dim() {
                return Err(Error::Shape("ATRM dim does not match encoder dim".into()));
            }
        }
        Ok(())
    }

    /// Every trainable tensor in a fixed order. Gradients, optimizer
    /// state and checkpoints all follow this order.
    pub fn slots(&self) -> Vec<Slot<'_>> {
        let mut out = Vec::new();
        push_encoder(&mut out, &self.image_encoder, IMAGE_NAMES);
        push_encoder(&mut out, &self.text_encoder, TEXT_NAMES);
        if let Some(a) = &self.image_atrm {
            push_atrm(&mut out, a, IMAGE_ATRM_NAMES);
        }
        if let Some(a) = &self.text_atrm {
            push_atrm(&mut out, a, TEXT_ATRM_NAMES);
        }
        out
    }

    pub fn slots_mut(&mut self) -> Vec<SlotMut<'_>> {
        let mut out = Vec::new();
        push_encoder_mut(&mut out, &mut self.image_encoder, IMAGE_NAMES);
        push_encoder_mut(&mut out, &mut self.text_encoder, TEXT_NAMES);
        if let Some(a) = &mut self.image_atrm {
            push_atrm_mut(&mut out, a, IMAGE_ATRM_NAMES);
        }
        if let Some(a) = &mut self.text_atrm {
            push_atrm_mut(&mut out, a, TEXT_ATRM_NAMES);
        }
        out
    }

    /// Parameters as standalone matrices, in slot order.
    pub fn to_matrices(&self) -> Vec<Matrix> {
        self.slots()
            .iter()
            .map(|s| Matrix::from_vec(s.shape.0, s.shape.1, s.data.to_vec()).expect("slot shape"))
            .collect()
    }

    /// Overwrites every parameter from matrices in slot order.
    pub fn set_from_matrices(&mut self, mats: &[Matrix]) -> Result<()> {
        let mut slots = self.slots_mut();
        if slots.len() != mats.len() {
            return Err(Error::Shape(format!("{} matrices for {} slots", mats.len(), slots.len())));
        }
        for (s, m) in slots.iter_mut().zip(mats) {
            if m.shape() != s.shape {
                return Err(Error::Shape(format!("{}: {:?} vs {:?}", s.name, m.shape(), s.shape)));
            }
            s.data.copy_from_slice(m.data());
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        for (s, m) in self.slots().iter().zip(self.to_matrices()) {
            c.push(s.name, m);
        }
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let encoder = |names: [&'static str; 4], text: bool| -> Result<EncoderParams> {
            Ok(EncoderParams {
                proj: c.require(names[0])?.clone(),
                cls_head: c.require(names[1])?.clone(),
                pos: PositionalTable::new(c.require(names[2])?.clone())?,
                bos: if text { Some(c.require(names[3])?.clone()) } else { None },
            })
        };
        let refinement = |names: [&'static str; 3]| -> Result<Option<AtrmParams>> {
            if c.get(names[0]).is_none() {
                return Ok(None);
            }
            let tau = c.require(names[2])?;
            if tau.shape() != (1, 1) {
                return Err(Error::Malformed(format!("{} must be 1x1", names[2])));
            }
            Ok(Some(AtrmParams {
                w_k: c.require(names[0])?.clone(),
                w_q: c.require(names[1])?.clone(),
                log_tau: tau.item(),
            }))
        };
        let model = Self {
            image_encoder: encoder(IMAGE_NAMES, false)?,
            text_encoder: encoder(TEXT_NAMES, true)?,
            image_atrm: refinement(IMAGE_ATRM_NAMES)?,
            text_atrm: refinement(TEXT_ATRM_NAMES)?,
        };
        model.validate().map_err(|e| Error::Malformed(e.to_string()))?;
        Ok(model)
    }

    /// Checks that the architecture flags of `cfg` match this model.
    pub fn check_config(&self, cfg: &TrainConfig) -> Result<()> {
        if cfg.loss == LossKind::Triplet
            && (cfg.atrm_image != self.image_atrm.is_some() || cfg.atrm_text != self.text_atrm.is_some())
        {
            return Err(Error::InvalidParameter(
                "ATRM flags do not match the model's refinement modules".into(),
            ));
        }
        Ok(())
    }

    fn register(&self, tape: &mut GradTape, train_pos: bool) -> ModelVars {
        ModelVars {
            image: self.image_encoder.to_tape(tape, train_pos),
            text: self.text_encoder.to_tape(tape, train_pos),
            image_atrm: self.image_atrm.as_ref().map(|a| a.to_tape(tape)),
            text_atrm: self.text_atrm.as_ref().map(|a| a.to_tape(tape)),
        }
    }

    /// Final token sets for one pair, as used by the scorer.
    pub fn align(&self, pair: &Pair, dims: &ModelDims, include_global: bool) -> Result<(AlignedTokens, AlignedTokens)> {
        let mut tape = GradTape::new();
        let vars = self.register(&mut tape, false);
        let sides = encode_pair(&mut tape, &vars, pair, dims, include_global, true)?;
        let grab = |set: Var, global: Var| AlignedTokens {
            tokens: tape.value(set).clone(),
            global: tape.value(global).data().to_vec(),
        };
        Ok((grab(sides.image_set, sides.image_global), grab(sides.text_set, sides.text_global)))
    }
}

const IMAGE_NAMES: [&str; 4] = ["image.proj", "image.cls_head", "image.pos", ""];
const TEXT_NAMES: [&str; 4] = ["text.proj", "text.cls_head", "text.pos", "text.bos"];
const IMAGE_ATRM_NAMES: [&str; 3] = ["image_atrm.w_k", "image_atrm.w_q", "image_atrm.log_tau"];
const TEXT_ATRM_NAMES: [&str; 3] = ["text_atrm.w_k", "text_atrm.w_q", "text_atrm.log_tau"];

fn push_encoder<'a>(out: &mut Vec<Slot<'a>>, p: &'a EncoderParams, names: [&'static str; 4]) {
    let g = ParamGroup::Encoder;
    out.push(Slot { name: names[0], group: g, shape: p.proj.shape(), data: p.proj.data() });
    out.push(Slot { name: names[1], group: g, shape: p.cls_head.shape(), data: p.cls_head.data() });
    let pos = p.pos.entries();
    out.push(Slot { name: names[2], group: g, shape: pos.shape(), data: pos.data() });
    if let Some(b) = &p.bos {
        out.push(Slot { name: names[3], group: g, shape: b.shape(), data: b.data() });
    }
}

fn push_atrm<'a>(out: &mut Vec<Slot<'a>>, a: &'a AtrmParams, names: [&'static str; 3]) {
    let g = ParamGroup::Atrm;
    out.push(Slot { name: names[0], group: g, shape: a.w_k.shape(), data: a.w_k.data() });
    out.push(Slot { name: names[1], group: g, shape: a.w_q.shape(), data: a.w_q.data() });
    out.push(Slot { name: names[2], group: g, shape: (1, 1), data: std::slice::from_ref(&a.log_tau) });
}

fn push_encoder_mut<'a>(out: &mut Vec<SlotMut<'a>>, p: &'a mut EncoderParams, names: [&'static str; 4]) {
    let g = ParamGroup::Encoder;
    let shape = p.proj.shape();
    out.push(SlotMut { name: names[0], group: g, shape, data: p.proj.data_mut() });
    let shape = p.cls_head.shape();
    out.push(SlotMut { name: names[1], group: g, shape, data: p.cls_head.data_mut() });
    let pos = p.pos.entries_mut();
    let shape = pos.shape();
    out.push(SlotMut { name: names[2], group: g, shape, data: pos.data_mut() });
    if let Some(b) = &mut p.bos {
        let shape = b.shape();
        out.push(SlotMut { name: names[3], group: g, shape, data: b.data_mut() });
    }
}

fn push_atrm_mut<'a>(out: &mut Vec<SlotMut<'a>>, a: &'a mut AtrmParams, names: [&'static str; 3]) {
    let g = ParamGroup::Atrm;
    let shape = a.w_k.shape();
    out.push(SlotMut { name: names[0], group: g, shape, data: a.w_k.data_mut() });
    let shape = a.w_q.shape();
    out.push(SlotMut { name: names[1], group: g, shape, data: a.w_q.data_mut() });
    out.push(SlotMut { name: names[2], group: g, shape: (1, 1), data: std::slice::from_mut(&mut a.log_tau) });
}

struct ModelVars {
    image: EncoderVars,
    text: EncoderVars,
    image_atrm: Option<AtrmVars>,
    text_atrm: Option<AtrmVars>,
}

impl ModelVars {
    /// Tape handles in slot order.
    fn in_slot_order(&self) -> Vec<Var> {
        let mut out = vec![self.image.proj, self.image.cls_head, self.image.pos];
        out.extend([self.text.proj, self.text.cls_head, self.text.pos]);
        out.extend(self.text.bos);
        for a in self.image_atrm.iter().chain(&self.text_atrm) {
            out.extend([a.w_k, a.w_q, a.log_tau]);
        }
        out
    }
}

struct PairSides {
    image_set: Var,
    image_global: Var,
    text_set: Var,
    text_global: Var,
}

/// Encodes both sides of `pair` and assembles the sets that take part in
/// late interaction. With `refine` false the ATRM outputs are not built.
fn encode_pair(
    tape: &mut GradTape,
    vars: &ModelVars,
    pair: &Pair,
    dims: &ModelDims,
    include_global: bool,
    refine: bool,
) -> Result<PairSides> {
    let patches = tape.constant(pair.image.clone());
    let img = toyencoder::encode_image_on(tape, patches, &vars.image)?;
    let words = tape.constant(pair.text.clone());
    let txt = toyencoder::encode_text_on(tape, words, &vars.text, dims.context_len())?;

    let image_local = match (&vars.image_atrm, refine) {
        (Some(a), true) => {
            let n = tape.value(img.local).rows();
            atrm::refine_on(tape, img.local, &vec![true; n], a)?.0
        }
        _ => img.local,
    };
    let text_local = match (&vars.text_atrm, refine) {
        (Some(a), true) => {
            let m = txt.len;
            if m > dims.max_text_len {
                return Err(Error::CaptionTooLong);
            }
            let x = if m < dims.max_text_len {
                let pad = tape.constant(Matrix::zeros(dims.max_text_len - m, tape.value(txt.content).cols()));
                tape.vstack(&[txt.content, pad])?
            } else {
                txt.content
            };
            let valid: Vec<bool> = (0..dims.max_text_len).map(|j| j < m).collect();
            atrm::refine_on(tape, x, &valid, a)?.0
        }
        _ => txt.content,
    };
    let (image_set, text_set) = if include_global {
        (tape.vstack(&[img.cls, image_local])?, tape.vstack(&[text_local, txt.eos])?)
    } else {
        (image_local, text_local)
    };
    Ok(PairSides {
        image_set,
        image_global: img.cls,
        text_set,
        text_global: txt.eos,
    })
}

/// Smallest distance, in score units, from the batch to a point where the
/// objective is not differentiable: a near tie between the top two
/// similarities of any late-interaction max, a near tie for the hardest
/// negative, or a hinge close to zero. Finite-difference checks that
/// step across such a point measure a kink instead of a derivative.
pub fn kink_margin(model: &ModelParams, batch: &[&Pair], dims: &ModelDims, cfg: &TrainConfig) -> Result<f64> {
    if !cfg.uses_fine_scores() {
        return Ok(f64::INFINITY);
    }
    let sides = batch
        .iter()
        .map(|p| model.align(p, dims, cfg.include_global))
        .collect::<Result<Vec<_>>>()?;
    let unit: Vec<(Matrix, Matrix)> = sides
        .iter()
        .map(|(v, t)| (clim::normalize_rows(&v.tokens), clim::normalize_rows(&t.tokens)))
        .collect();
    let mut margin = f64::INFINITY;
    let b = batch.len();
    let mut scores = Matrix::zeros(b, b);
    for i in 0..b {
        for j in 0..b {
            let sim = unit[i].0.matmul_t(&unit[j].1)?;
            margin = margin.min(top_gap_rows(&sim)).min(top_gap_rows(&sim.transpose()));
            scores[(i, j)] = clim::fine_score(&sides[i].0.tokens, &sides[j].1.tokens)?;
        }
    }
    for s in [scores.clone(), scores.transpose()] {
        for i in 0..b {
            let negs: Vec<f64> = (0..b).filter(|&j| j != i).map(|j| s[(i, j)]).collect();
            let hardest = negs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            margin = margin.min((cfg.alpha - s[(i, i)] + hardest).abs());
            margin = margin.min(top_gap(&negs));
        }
    }
    Ok(margin)
}

fn top_gap(v: &[f64]) -> f64 {
    let mut best = f64::NEG_INFINITY;
    let mut second = f64::NEG_INFINITY;
    for &x in v {
        if x > best {
            second = best;
            best = x;
        } else if x > second {
            second = x;
        }
    }
    best - second
}

fn top_gap_rows(m: &Matrix) -> f64 {
    m.iter_rows().map(top_gap).fold(f64::INFINITY, f64::min)
}

/// Scores and loss for one batch.
#[derive(Clone, Debug)]
pub struct BatchOutput {
    pub scores: Matrix,
    pub loss: LossBreakdown,
}

fn build_batch(
    tape: &mut GradTape,
    vars: &ModelVars,
    batch: &[&Pair],
    dims: &ModelDims,
    cfg: &TrainConfig,
) -> Result<(Var, Var, LossBreakdown)> {
    let b = batch.len();
    if b < 2 {
        return Err(Error::NoNegatives);
    }
    let fine = cfg.uses_fine_scores();
    let sides = batch
        .iter()
        .map(|p| encode_pair(tape, vars, p, dims, cfg.include_global, fine))
        .collect::<Result<Vec<_>>>()?;
    if fine {
        let vn = sides
            .iter()
            .map(|s| tape.normalize_rows(s.image_set))
            .collect::<Result<Vec<_>>>()?;
        let tn = sides
            .iter()
            .map(|s| tape.normalize_rows(s.text_set))
            .collect::<Result<Vec<_>>>()?;
        let mut cells = Vec::with_capacity(b * b);
        for &v in &vn {
            for &t in &tn {
                cells.push(clim::fine_score_on(tape, v, t)?);
            }
        }
        let scores = tape.grid(&cells, b, b)?;
        let breakdown = loss::triplet_dual(tape.value(scores), cfg.alpha)?;
        let l = loss::triplet_on(tape, scores, cfg.alpha)?;
        Ok((scores, l, breakdown))
    } else {
        let gi: Vec<Var> = sides.iter().map(|s| s.image_global).collect();
        let gt: Vec<Var> = sides.iter().map(|s| s.text_global).collect();
        let gi = tape.vstack(&gi)?;
        let gt = tape.vstack(&gt)?;
        let gi = tape.normalize_rows(gi)?;
        let gt = tape.normalize_rows(gt)?;
        let scores = tape.matmul_t(gi, gt)?;
        let breakdown = loss::global_contrastive_breakdown(tape.value(scores), cfg.temperature)?;
        let l = loss::contrastive_on(tape, scores, cfg.temperature)?;
        Ok((scores, l, breakdown))
    }
}

/// Forward pass over a batch: fine scores and dual triplet loss, or
/// coarse scores and the contrastive loss for the baseline.
pub fn forward_batch(model: &ModelParams, batch: &[&Pair], dims: &ModelDims, cfg: &TrainConfig) -> Result<BatchOutput> {
    model.check_config(cfg)?;
    let mut tape = GradTape::new();
    let vars = model.register(&mut tape, false);
    let (scores, _, loss) = build_batch(&mut tape, &vars, batch, dims, cfg)?;
    Ok(BatchOutput {
        scores: tape.value(scores).clone(),
        loss,
    })
}

/// [`forward_batch`] plus gradients of the total loss in slot order.
pub fn forward_backward(
    model: &ModelParams,
    batch: &[&Pair],
    dims: &ModelDims,
    cfg: &TrainConfig,
) -> Result<(BatchOutput, Vec<Matrix>)> {
    model.check_config(cfg)?;
    let mut tape = GradTape::new();
    let vars = model.register(&mut tape, cfg.train_pos);
    let (scores, l, loss) = build_batch(&mut tape, &vars, batch, dims, cfg)?;
    if !loss.total.is_finite() {
        return Err(Error::NonFiniteObjective);
    }
    let g = tape.backward(l)?;
    let grads = vars
        .in_slot_order()
        .into_iter()
        .map(|v| g.get_or_zeros(v, tape.value(v)))
        .collect();
    Ok((
        BatchOutput {
            scores: tape.value(scores).clone(),
            loss,
        },
        grads,
    ))
}
