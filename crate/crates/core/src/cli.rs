//! Command-line front end.
//!
//! Exit codes: 0 success, 1 usage error, 2 IO or file-format error,
//! 3 numeric failure. Every subcommand also accepts `--config FILE`, a
//! JSON object whose keys are flag names (`lr_encoder` or `lr-encoder`);
//! flags given on the command line win over the file.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::atrm::DEFAULT_RATIO;
use crate::clim::{self, DEFAULT_LAMBDA};
use crate::corpus::{generate_synthetic, PairCorpus, SyntheticConfig};
use crate::error::{Error, Result};
use crate::evalharness::{evaluate, EvalConfig};
use crate::io::{write_atomic, Checkpoint};
use crate::loss::{DEFAULT_MARGIN, DEFAULT_TEMPERATURE};
use crate::posembed::{self, PositionalTable, DEFAULT_FACTOR, DEFAULT_KEEP};
use crate::trainer::{self, dims_of, ModelParams, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_FORMAT: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

/// Threshold for `gradcheck` success.
pub const GRADCHECK_TOLERANCE: f64 = 1e-6;

#[derive(Parser, Debug)]
#[command(name = "finelip", version, about = "Fine-grained image-text alignment toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a planted synthetic pair corpus.
    #[command(args_override_self = true)]
    GenData(GenDataArgs),
    /// Train a model and write its checkpoint.
    #[command(args_override_self = true)]
    Train(TrainArgs),
    /// Evaluate retrieval recall of a checkpoint on a corpus.
    #[command(args_override_self = true)]
    Eval(EvalArgs),
    /// Check analytic gradients of the full pipeline against finite differences.
    #[command(args_override_self = true)]
    Gradcheck(GradcheckArgs),
    /// Stretch a positional table stored in a checkpoint.
    #[command(args_override_self = true)]
    StretchPe(StretchArgs),
    /// Score one image against one text.
    #[command(args_override_self = true)]
    ScorePair(ScorePairArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 320)]
    pairs: usize,
    /// Patches per image.
    #[arg(long, default_value_t = 16)]
    p: usize,
    /// Tokens per caption.
    #[arg(long, default_value_t = 12)]
    m: usize,
    /// Raw feature width.
    #[arg(long, default_value_t = 32)]
    din: usize,
    /// Planted concepts shared by each pair.
    #[arg(long, default_value_t = 6)]
    concepts: usize,
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    /// Caption tokens with no counterpart in the image.
    #[arg(long, default_value_t = 4)]
    distractors: usize,
    #[arg(long)]
    out: PathBuf,
    /// JSON file supplying any of these flags.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Mode {
    /// Refinement on both branches, late interaction, triplet loss.
    Finelip,
    /// Refinement on the image branch only.
    AtrmImage,
    /// Refinement on the text branch only.
    AtrmText,
    /// Late interaction over raw local tokens.
    ClimOnly,
    /// Global tokens with the contrastive loss.
    Baseline,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Checkpoint output path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = Mode::Finelip)]
    mode: Mode,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    /// Aggregation ratio of the refinement modules.
    #[arg(long, default_value_t = DEFAULT_RATIO)]
    ratio: f64,
    /// Triplet margin.
    #[arg(long, default_value_t = DEFAULT_MARGIN)]
    alpha: f64,
    /// Contrastive temperature (baseline mode).
    #[arg(long, default_value_t = DEFAULT_TEMPERATURE)]
    temperature: f64,
    #[arg(long, default_value_t = 1e-3)]
    lr_encoder: f64,
    #[arg(long, default_value_t = 1e-2)]
    lr_atrm: f64,
    /// Leave the global rows out of the token sets.
    #[arg(long)]
    no_global: bool,
    /// Freeze the positional tables.
    #[arg(long)]
    freeze_pos: bool,
    #[arg(long, default_value_t = 32)]
    d: usize,
    #[arg(long, default_value_t = 16)]
    dk: usize,
    /// Rows of the base text positional table before stretching.
    #[arg(long, default_value_t = 16)]
    pos_base: usize,
    #[arg(long, default_value_t = 4)]
    pos_keep: usize,
    #[arg(long, default_value_t = 4)]
    pos_factor: usize,
    /// Trailing pairs held out for per-epoch recall.
    #[arg(long, default_value_t = 0)]
    heldout: usize,
    /// JSON-lines metrics output; standard output if absent.
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Fine-score weight of the combined mode.
    #[arg(long, default_value_t = DEFAULT_LAMBDA)]
    lambda: f64,
    #[arg(long)]
    no_global: bool,
    /// Report output path; standard output if absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 8)]
    d: usize,
    #[arg(long, default_value_t = 4)]
    dk: usize,
    #[arg(long, default_value_t = 4)]
    batch: usize,
    #[arg(long, default_value_t = 12)]
    p: usize,
    #[arg(long, default_value_t = 10)]
    m: usize,
    #[arg(long, default_value_t = 8)]
    din: usize,
    #[arg(long, default_value_t = 4)]
    concepts: usize,
    #[arg(long, default_value_t = 3)]
    distractors: usize,
    #[arg(long, default_value_t = DEFAULT_RATIO)]
    ratio: f64,
    #[arg(long, default_value_t = DEFAULT_MARGIN)]
    alpha: f64,
    /// Finite-difference step.
    #[arg(long, default_value_t = 2e-4)]
    eps: f64,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct StretchArgs {
    /// Checkpoint holding the table.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Entry to stretch; may be omitted when the file has a single entry.
    #[arg(long)]
    entry: Option<String>,
    /// Leading rows copied unchanged.
    #[arg(long, default_value_t = DEFAULT_KEEP)]
    keep: usize,
    #[arg(long, default_value_t = DEFAULT_FACTOR)]
    factor: usize,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ScorePairArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Pair whose image is scored.
    #[arg(long)]
    image: usize,
    /// Pair whose text is scored.
    #[arg(long)]
    text: usize,
    #[arg(long, default_value_t = DEFAULT_LAMBDA)]
    lambda: f64,
    #[arg(long)]
    no_global: bool,
    #[arg(long)]
    config: Option<PathBuf>,
}

/// Runs the CLI on `argv` (program name first) and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let argv = match merge_config(argv) {
        Ok(a) => a,
        Err(e) => return report(&e),
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::StretchPe(a) => stretch_pe(a),
        Command::ScorePair(a) => score_pair(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => report(&e),
    }
}

fn report(e: &Error) -> i32 {
    eprintln!("error: {e}");
    exit_code(e)
}

pub fn exit_code(e: &Error) -> i32 {
    if e.is_format() {
        EXIT_FORMAT
    } else if e.is_numeric() {
        EXIT_NUMERIC
    } else {
        EXIT_USAGE
    }
}

/// Splices the keys of a `--config` JSON file in as flags right after the
/// subcommand, so explicit flags later on the line override them.
fn merge_config(argv: Vec<OsString>) -> Result<Vec<OsString>> {
    let mut path = None;
    for (i, a) in argv.iter().enumerate().skip(2) {
        let s = a.to_string_lossy();
        if s == "--config" {
            path = argv.get(i + 1).cloned();
        } else if let Some(p) = s.strip_prefix("--config=") {
            path = Some(p.into());
        }
    }
    let Some(path) = path else { return Ok(argv) };
    let text = fs::read_to_string(PathBuf::from(&path))?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    let obj = value
        .as_object()
        .ok_or_else(|| Error::Malformed("config must be a JSON object".into()))?;
    let mut extra: Vec<OsString> = Vec::new();
    for (key, v) in obj {
        let flag = format!("--{}", key.replace('_', "-"));
        match v {
            serde_json::Value::Bool(true) => extra.push(flag.into()),
            serde_json::Value::Bool(false) | serde_json::Value::Null => {}
            serde_json::Value::String(s) => {
                extra.push(flag.into());
                extra.push(s.into());
            }
            serde_json::Value::Number(n) => {
                extra.push(flag.into());
                extra.push(n.to_string().into());
            }
            _ => return Err(Error::Malformed(format!("config key `{key}` must be a scalar"))),
        }
    }
    let mut out = argv[..2.min(argv.len())].to_vec();
    out.extend(extra);
    out.extend(argv.into_iter().skip(2));
    Ok(out)
}

fn gen_data(a: GenDataArgs) -> Result<i32> {
    let corpus = generate_synthetic(&SyntheticConfig {
        seed: a.seed,
        n_pairs: a.pairs,
        patches: a.p,
        text_len: a.m,
        d_in: a.din,
        n_concepts: a.concepts,
        noise_sigma: a.noise,
        n_distractors: a.distractors,
    })?;
    corpus.save(&a.out)?;
    println!(
        "{}",
        serde_json::json!({ "pairs": corpus.len(), "fingerprint": format!("{:016x}", corpus.fingerprint()?) })
    );
    Ok(EXIT_OK)
}

fn train_config(a: &TrainArgs) -> TrainConfig {
    let base = match a.mode {
        Mode::Finelip => TrainConfig::finelip(),
        Mode::AtrmImage => TrainConfig { atrm_text: false, ..TrainConfig::finelip() },
        Mode::AtrmText => TrainConfig { atrm_image: false, ..TrainConfig::finelip() },
        Mode::ClimOnly => TrainConfig::clim_only(),
        Mode::Baseline => TrainConfig::coarse_baseline(),
    };
    TrainConfig {
        seed: a.seed,
        epochs: a.epochs,
        batch_size: a.batch,
        ratio: a.ratio,
        alpha: a.alpha,
        temperature: a.temperature,
        lr_encoder: a.lr_encoder,
        lr_atrm: a.lr_atrm,
        include_global: !a.no_global,
        train_pos: !a.freeze_pos,
        d: a.d,
        d_k: a.dk,
        pos_base_len: a.pos_base,
        pos_keep: a.pos_keep,
        pos_factor: a.pos_factor,
        heldout: a.heldout,
        ..base
    }
}

fn train(a: TrainArgs) -> Result<i32> {
    let cfg = train_config(&a);
    cfg.validate()?;
    let corpus = PairCorpus::load(&a.corpus)?;
    let mut lines = String::new();
    let to_stdout = a.metrics.is_none();
    let outcome = trainer::train_with(&cfg, &corpus, |m| {
        let line = serde_json::to_string(m).expect("metrics serialize");
        if to_stdout {
            println!("{line}");
        }
        lines.push_str(&line);
        lines.push('\n');
    })?;
    outcome.model.to_checkpoint().save(&a.out)?;
    if let Some(path) = &a.metrics {
        write_atomic(path, lines.as_bytes())?;
    }
    Ok(EXIT_OK)
}

fn load_model(path: &PathBuf) -> Result<ModelParams> {
    ModelParams::from_checkpoint(&Checkpoint::load(path)?)
}

fn eval(a: EvalArgs) -> Result<i32> {
    let cfg = EvalConfig {
        include_global: !a.no_global,
        lambda: a.lambda,
    };
    if !(0.0..=1.0).contains(&cfg.lambda) {
        return Err(Error::InvalidParameter(format!("lambda {} outside [0, 1]", cfg.lambda)));
    }
    let model = load_model(&a.checkpoint)?;
    let corpus = PairCorpus::load(&a.corpus)?;
    let json = evaluate(&model, &corpus, &cfg)?.to_json()? + "\n";
    match &a.out {
        Some(p) => write_atomic(p, json.as_bytes())?,
        None => std::io::stdout().write_all(json.as_bytes())?,
    }
    Ok(EXIT_OK)
}

fn gradcheck(a: GradcheckArgs) -> Result<i32> {
    let corpus = generate_synthetic(&SyntheticConfig {
        seed: a.seed,
        n_pairs: a.batch,
        patches: a.p,
        text_len: a.m,
        d_in: a.din,
        n_concepts: a.concepts,
        noise_sigma: 0.05,
        n_distractors: a.distractors,
    })?;
    let cfg = TrainConfig {
        seed: a.seed,
        batch_size: a.batch,
        d: a.d,
        d_k: a.dk,
        ratio: a.ratio,
        alpha: a.alpha,
        ..TrainConfig::finelip()
    };
    let dims = dims_of(&corpus);
    let err = trainer::pipeline_grad_check(&cfg, &corpus.pairs, &dims, a.eps)?;
    let model = ModelParams::init(&cfg, &dims)?;
    let batch: Vec<_> = corpus.pairs.iter().collect();
    let margin = trainer::kink_margin(&model, &batch, &dims, &cfg)?;
    let ok = err < GRADCHECK_TOLERANCE;
    println!(
        "{}",
        serde_json::json!({ "max_rel_error": err, "kink_margin": margin, "pass": ok })
    );
    if !ok && margin < 2.0 * a.eps {
        eprintln!("note: the batch lies within {margin:.1e} of a non-differentiable point; try another --seed");
    }
    Ok(if ok { EXIT_OK } else { EXIT_NUMERIC })
}

fn stretch_pe(a: StretchArgs) -> Result<i32> {
    let mut ck = Checkpoint::load(&a.input)?;
    let idx = match &a.entry {
        Some(name) => ck
            .entries
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| Error::MissingParameter(name.clone()))?,
        None if ck.entries.len() == 1 => 0,
        None => {
            return Err(Error::InvalidParameter(format!(
                "checkpoint has {} entries; pick one with --entry",
                ck.entries.len()
            )))
        }
    };
    let table = PositionalTable::new(ck.entries[idx].1.clone())?;
    let before = table.len();
    let stretched = posembed::stretch(&table, a.keep, a.factor)?;
    let after = stretched.len();
    ck.entries[idx].1 = stretched.into_matrix();
    ck.save(&a.out)?;
    println!(
        "{}",
        serde_json::json!({ "entry": ck.entries[idx].0, "rows_in": before, "rows_out": after })
    );
    Ok(EXIT_OK)
}

#[derive(Serialize)]
struct PairScores {
    fine: f64,
    coarse: f64,
    combined: f64,
}

fn score_pair(a: ScorePairArgs) -> Result<i32> {
    if !(0.0..=1.0).contains(&a.lambda) {
        return Err(Error::InvalidParameter(format!("lambda {} outside [0, 1]", a.lambda)));
    }
    let model = load_model(&a.checkpoint)?;
    let corpus = PairCorpus::load(&a.corpus)?;
    let n = corpus.len();
    for i in [a.image, a.text] {
        if i >= n {
            return Err(Error::InvalidParameter(format!("pair index {i} out of range ({n} pairs)")));
        }
    }
    let dims = dims_of(&corpus);
    let (v, _) = model.align(&corpus.pairs[a.image], &dims, !a.no_global)?;
    let (_, t) = model.align(&corpus.pairs[a.text], &dims, !a.no_global)?;
    let s = clim::score_pair(&v, &t)?;
    let out = PairScores {
        fine: s.fine,
        coarse: s.coarse,
        combined: clim::combined_score(s.fine, s.coarse, a.lambda),
    };
    println!("{}", serde_json::to_string(&out)?);
    Ok(EXIT_OK)
}
