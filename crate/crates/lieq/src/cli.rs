//! Subcommands: fixture, diagnose, allocate, quantize, eval, sweep.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use lieq_core::allocator::plan_from_scores;
use lieq_core::diagnostics::run_diagnostics;
use lieq_core::harness::{default_sweep_range, evaluate, make_fixture, scores_from_diagnostics, sweep_m};
use lieq_core::quant::quantize_model;
use lieq_core::{BucketSpec, DiagnosticsConfig, FixtureSpec, ModelCheckpoint, ScoreWeights, TokenCorpus};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::{parse_m_range, parse_ranges, parse_weights, ConfigFile, Resolver};
use crate::corpus::{load_corpus, save_corpus};
use crate::error::{Error, Result};
use crate::qformat::{load_quant, save_quant};
use crate::report::{emit_report, read_document, DiagnosticsFile, Format, PlanFile};

const DEFAULT_BUCKETS: &str = "33-128,129-512";
const DEFAULT_WEIGHTS: &str = "1/3,1/3,1/3";

#[derive(Debug, Parser)]
#[command(name = "lieq", version, about = "Layer-wise diagnostics and mixed-precision weight quantization")]
pub struct Cli {
    /// Flat key = value config file; flags given explicitly take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true, env = "LIEQ_THREADS")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a seeded synthetic model and corpus.
    Fixture(FixtureArgs),
    /// Ablation and spectral diagnostics per length bucket.
    Diagnose(DiagnoseArgs),
    /// Turn diagnostics into a bit plan.
    Allocate(AllocateArgs),
    /// Quantize a checkpoint with a bit plan.
    Quantize(QuantizeArgs),
    /// Compare FP and quantized perplexity.
    Eval(EvalArgs),
    /// Quantized perplexity as the number of high-precision layers grows.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct FixtureArgs {
    #[arg(long, default_value_t = 4)]
    pub layers: usize,
    #[arg(long, default_value_t = 64)]
    pub dim: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 128)]
    pub ff: usize,
    #[arg(long, default_value_t = 256)]
    pub vocab: usize,
    #[arg(long, default_value_t = 512)]
    pub max_seq_len: usize,
    /// Layer given low-rank, high-gain attention weights.
    #[arg(long)]
    pub hot_layer: Option<usize>,
    #[arg(long, default_value_t = 10.0)]
    pub hot_gain: f64,
    #[arg(long, default_value_t = 4)]
    pub hot_rank: usize,
    #[arg(long, default_value_t = 2.0)]
    pub logit_scale: f64,
    /// Passage length ranges of the corpus, MIN-MAX,...
    #[arg(long, default_value = DEFAULT_BUCKETS)]
    pub corpus_ranges: String,
    /// Passages generated per range.
    #[arg(long, default_value_t = 8)]
    pub corpus_passages: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
    /// Checkpoint output [default: OUT_DIR/model.ckpt]
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Corpus output [default: OUT_DIR/corpus.corp]
    #[arg(long)]
    pub corpus: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Top-k for the energy metric [default: min(8, T, d_head)]
    #[arg(long)]
    pub k: Option<usize>,
    /// Length buckets, MIN-MAX,...
    #[arg(long, default_value = DEFAULT_BUCKETS)]
    pub buckets: String,
    /// Passages sampled per bucket.
    #[arg(long, default_value_t = 100)]
    pub passages: usize,
    /// Score weights alpha,beta,gamma for the preview column.
    #[arg(long, default_value = DEFAULT_WEIGHTS)]
    pub weights: String,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
    /// [default: OUT_DIR/diagnostics.json]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AllocateArgs {
    /// [default: OUT_DIR/diagnostics.json]
    #[arg(long)]
    pub diagnostics: Option<PathBuf>,
    /// Score weights alpha,beta,gamma (non-negative, summing to 1).
    #[arg(long, default_value = DEFAULT_WEIGHTS)]
    pub weights: String,
    /// Number of high-precision layers.
    #[arg(long, default_value_t = 1)]
    pub m: usize,
    #[arg(long, default_value_t = 4)]
    pub b_hi: u8,
    #[arg(long, default_value_t = 2)]
    pub b_lo: u8,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
    /// [default: OUT_DIR/plan.json]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct QuantizeArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// [default: OUT_DIR/plan.json]
    #[arg(long)]
    pub plan: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    pub group_size: usize,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
    /// [default: OUT_DIR/model.lieqq]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// [default: OUT_DIR/model.lieqq]
    #[arg(long)]
    pub quantized: Option<PathBuf>,
    /// Attach the Spearman correlations from this diagnostics file.
    #[arg(long)]
    pub diagnostics: Option<PathBuf>,
    /// json or csv
    #[arg(long, default_value = "json")]
    pub format: String,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
    /// [default: OUT_DIR/report.FORMAT]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Scores come from this file; without it diagnostics are run first.
    #[arg(long)]
    pub diagnostics: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long, default_value = DEFAULT_BUCKETS)]
    pub buckets: String,
    #[arg(long, default_value_t = 100)]
    pub passages: usize,
    #[arg(long, default_value = DEFAULT_WEIGHTS)]
    pub weights: String,
    /// FIRST..LAST, inclusive [default: 1..min(16, L)]
    #[arg(long)]
    pub m_range: Option<String>,
    #[arg(long, default_value_t = 4)]
    pub b_hi: u8,
    #[arg(long, default_value_t = 2)]
    pub b_lo: u8,
    #[arg(long, default_value_t = 64)]
    pub group_size: usize,
    /// Receives sweep.json and sweep.csv.
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match Cli::command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(&matches) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(matches: &ArgMatches) -> Result<()> {
    let cli = Cli::from_arg_matches(matches).map_err(|e| Error::Internal(e.to_string()))?;
    let file = match &cli.config {
        Some(path) => ConfigFile::load(path)?,
        None => ConfigFile::default(),
    };
    let (_, sub) = matches.subcommand().ok_or_else(|| Error::Internal("no subcommand".into()))?;
    let r = Resolver::new(sub, &file);
    if let Some(n) = r.optional("threads", cli.threads)? {
        if n == 0 {
            return Err(Error::config("threads", "must be at least 1"));
        }
        // Fails only if a pool already exists, which is harmless.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match &cli.command {
        Command::Fixture(a) => fixture(a, &r),
        Command::Diagnose(a) => diagnose(a, &r),
        Command::Allocate(a) => allocate(a, &r),
        Command::Quantize(a) => quantize(a, &r),
        Command::Eval(a) => eval(a, &r),
        Command::Sweep(a) => sweep(a, &r),
    }
}

fn weights(r: &Resolver, flag: &str) -> Result<ScoreWeights> {
    let raw: String = r.value("weights", flag.to_string())?;
    let (a, b, g) = parse_weights(&raw).map_err(|e| Error::config("weights", e))?;
    ScoreWeights::new(a, b, g).map_err(|e| Error::config("weights", e))
}

fn diagnostics_config(r: &Resolver, seed: u64, k: Option<usize>, buckets: &str, passages: usize) -> Result<DiagnosticsConfig> {
    let raw: String = r.value("buckets", buckets.to_string())?;
    let ranges = parse_ranges(&raw).map_err(|e| Error::config("buckets", e))?;
    let passages = r.value("passages", passages)?;
    Ok(DiagnosticsConfig {
        buckets: BucketSpec::new(ranges, passages).map_err(|e| Error::config("buckets", e))?,
        k: r.optional("k", k)?,
        seed: r.value("seed", seed)?,
    })
}

fn out_path(r: &Resolver, out: &Option<PathBuf>, out_dir: &Path, default: &str) -> Result<PathBuf> {
    let dir: PathBuf = r.value("out_dir", out_dir.to_path_buf())?;
    Ok(r.optional("out", out.clone())?.unwrap_or_else(|| dir.join(default)))
}

fn load_pair(r: &Resolver, model: &Option<PathBuf>, corpus: &Option<PathBuf>) -> Result<(ModelCheckpoint, TokenCorpus)> {
    let model = load_checkpoint(&r.required("model", model.clone())?)?;
    let corpus = load_corpus(&r.required("corpus", corpus.clone())?)?;
    corpus.check_vocab(model.arch().vocab_size)?;
    Ok((model, corpus))
}

fn fixture(a: &FixtureArgs, r: &Resolver) -> Result<()> {
    let raw: String = r.value("corpus_ranges", a.corpus_ranges.clone())?;
    let spec = FixtureSpec {
        n_layers: r.value("layers", a.layers)?,
        d_model: r.value("dim", a.dim)?,
        n_heads: r.value("heads", a.heads)?,
        d_ff: r.value("ff", a.ff)?,
        vocab_size: r.value("vocab", a.vocab)?,
        max_seq_len: r.value("max_seq_len", a.max_seq_len)?,
        seed: r.value("seed", a.seed)?,
        hot_layer: r.optional("hot_layer", a.hot_layer)?,
        hot_gain: r.value("hot_gain", a.hot_gain)?,
        hot_rank: r.value("hot_rank", a.hot_rank)?,
        logit_scale: r.value("logit_scale", a.logit_scale)?,
        corpus_ranges: parse_ranges(&raw).map_err(|e| Error::config("corpus_ranges", e))?,
        passages_per_range: r.value("corpus_passages", a.corpus_passages)?,
    };
    let (model, corpus) = make_fixture(&spec)?;
    let dir: PathBuf = r.value("out_dir", a.out_dir.clone())?;
    let model_path = r.optional("model", a.model.clone())?.unwrap_or_else(|| dir.join("model.ckpt"));
    let corpus_path = r.optional("corpus", a.corpus.clone())?.unwrap_or_else(|| dir.join("corpus.corp"));
    save_checkpoint(&model, &model_path)?;
    save_corpus(&corpus, &corpus_path)?;
    println!("model   {}  checksum {:#010x}", model_path.display(), model.fingerprint());
    println!("corpus  {}  checksum {:#010x}  ({} passages)", corpus_path.display(), corpus.fingerprint(), corpus.len());
    Ok(())
}

fn print_diagnostics(buckets: &[lieq_core::LayerDiagnostics], scores: Option<&[f64]>) {
    for d in buckets {
        let p = &d.provenance;
        println!(
            "bucket {}-{}: {} passages, k={}, ppl_base={:.4}",
            p.bucket.0,
            p.bucket.1,
            p.passages.len(),
            p.k,
            d.ppl_base
        );
        println!("{:>5} {:>12} {:>10} {:>10} {:>8}", "layer", "delta_ppl", "delta_r", "delta_e", "score");
        for rec in &d.layers {
            let s = scores.map_or("-".to_string(), |s| format!("{:.4}", s[rec.layer]));
            println!(
                "{:>5} {:>12.4} {:>10.4} {:>10.4} {:>8}",
                rec.layer, rec.delta_ppl, rec.delta_r_mean, rec.delta_e_mean, s
            );
        }
        let fmt = |v: Option<f64>| v.map_or("undefined".to_string(), |x| format!("{x:.4}"));
        println!("spearman(delta_ppl, delta_r)={}  spearman(delta_ppl, delta_e)={}", fmt(d.spearman_ppl_r), fmt(d.spearman_ppl_e));
    }
}

fn diagnose(a: &DiagnoseArgs, r: &Resolver) -> Result<()> {
    let (model, corpus) = load_pair(r, &a.model, &a.corpus)?;
    let config = diagnostics_config(r, a.seed, a.k, &a.buckets, a.passages)?;
    let w = weights(r, &a.weights)?;
    let out = out_path(r, &a.out, &a.out_dir, "diagnostics.json")?;
    let buckets = run_diagnostics(&model, &corpus, &config)?;
    // A degenerate metric only hides the preview here; allocate reports it.
    let scores = scores_from_diagnostics(&buckets, &w).ok();
    print_diagnostics(&buckets, scores.as_deref());
    emit_report(&DiagnosticsFile { buckets }, &out, Format::Json)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn allocate(a: &AllocateArgs, r: &Resolver) -> Result<()> {
    let dir: PathBuf = r.value("out_dir", a.out_dir.clone())?;
    let path = r.optional("diagnostics", a.diagnostics.clone())?.unwrap_or_else(|| dir.join("diagnostics.json"));
    let diag: DiagnosticsFile = read_document(&path)?;
    let checksum = diag.model_checksum()?;
    let w = weights(r, &a.weights)?;
    let scores = scores_from_diagnostics(&diag.buckets, &w)?;
    let plan = plan_from_scores(&scores, r.value("m", a.m)?, r.value("b_hi", a.b_hi)?, r.value("b_lo", a.b_lo)?)?;
    let file = PlanFile::new(&plan, checksum, w)?;
    let out = r.optional("out", a.out.clone())?.unwrap_or_else(|| dir.join("plan.json"));
    emit_report(&file, &out, Format::Json)?;
    println!("S_hi = {:?}", plan.s_hi);
    println!("avg_bits = {:.4}  cr = {:.6}", file.avg_bits, file.cr);
    println!("wrote {}", out.display());
    Ok(())
}

fn quantize(a: &QuantizeArgs, r: &Resolver) -> Result<()> {
    let model = load_checkpoint(&r.required("model", a.model.clone())?)?;
    let dir: PathBuf = r.value("out_dir", a.out_dir.clone())?;
    let plan_path = r.optional("plan", a.plan.clone())?.unwrap_or_else(|| dir.join("plan.json"));
    let file: PlanFile = read_document(&plan_path)?;
    if file.model_checksum != model.fingerprint() {
        return Err(Error::ModelMismatch { what: "plan", expected: file.model_checksum, actual: model.fingerprint() });
    }
    let plan = file.to_plan()?;
    let q = quantize_model(&model, &plan, r.value("group_size", a.group_size)?)?;
    let out = r.optional("out", a.out.clone())?.unwrap_or_else(|| dir.join("model.lieqq"));
    save_quant(&q, &out)?;
    for (l, bytes) in q.layer_storage_bytes().iter().enumerate() {
        println!("layer {l:>3}  {:>2} bits  {bytes} bytes", q.layer_bits(l));
    }
    let total = std::fs::metadata(&out).map_err(|e| Error::io(&out, e))?.len();
    println!("wrote {} ({total} bytes)", out.display());
    Ok(())
}

fn eval(a: &EvalArgs, r: &Resolver) -> Result<()> {
    let format: Format = r.value::<String>("format", a.format.clone())?.parse()?;
    let (model, corpus) = load_pair(r, &a.model, &a.corpus)?;
    let dir: PathBuf = r.value("out_dir", a.out_dir.clone())?;
    let qpath = r.optional("quantized", a.quantized.clone())?.unwrap_or_else(|| dir.join("model.lieqq"));
    let q = load_quant(&qpath)?;
    let diag = r.optional("diagnostics", a.diagnostics.clone())?.map(|p| read_document::<DiagnosticsFile>(&p)).transpose()?;
    let start = Instant::now();
    let report = evaluate(&model, &q, &corpus, diag.as_ref().map(|d| d.buckets.as_slice()))?;
    let elapsed = start.elapsed();
    let out = r.optional("out", a.out.clone())?.unwrap_or_else(|| dir.join(format!("report.{}", format.extension())));
    emit_report(&report, &out, format)?;
    println!(
        "ppl_fp={:.4} ppl_quant={:.4} avg_bits={:.4} cr={:.4}",
        report.ppl_fp, report.ppl_quant, report.avg_bits, report.cr
    );
    println!("evaluated in {:.2}s, wrote {}", elapsed.as_secs_f64(), out.display());
    Ok(())
}

/// Clamps `(first, last)` to `0..=n_layers`, warning on stderr.
pub fn clamp_m_range(first: usize, last: usize, n_layers: usize) -> (usize, usize) {
    let clamped = (first.min(n_layers), last.min(n_layers));
    if clamped != (first, last) {
        eprintln!(
            "warning: m range {first}..{last} exceeds the {n_layers}-layer model; using {}..{}",
            clamped.0, clamped.1
        );
    }
    clamped
}

fn sweep(a: &SweepArgs, r: &Resolver) -> Result<()> {
    let (model, corpus) = load_pair(r, &a.model, &a.corpus)?;
    let w = weights(r, &a.weights)?;
    let buckets = match r.optional("diagnostics", a.diagnostics.clone())? {
        Some(path) => {
            let d: DiagnosticsFile = read_document(&path)?;
            let expected = d.model_checksum()?;
            if expected != model.fingerprint() {
                return Err(Error::ModelMismatch { what: "diagnostics", expected, actual: model.fingerprint() });
            }
            d.buckets
        }
        None => run_diagnostics(&model, &corpus, &diagnostics_config(r, a.seed, a.k, &a.buckets, a.passages)?)?,
    };
    let scores = scores_from_diagnostics(&buckets, &w)?;
    let n_layers = model.arch().n_layers;
    let (first, last) = match r.optional::<String>("m_range", a.m_range.clone())? {
        Some(raw) => parse_m_range(&raw).map_err(|e| Error::config("m_range", e))?,
        None => default_sweep_range(n_layers),
    };
    let (first, last) = clamp_m_range(first, last, n_layers);
    let m_values: Vec<usize> = (first..=last).collect();
    let result = sweep_m(
        &model,
        &corpus,
        &scores,
        &m_values,
        r.value("b_hi", a.b_hi)?,
        r.value("b_lo", a.b_lo)?,
        r.value("group_size", a.group_size)?,
    )?;
    let dir: PathBuf = r.value("out_dir", a.out_dir.clone())?;
    emit_report(&result, &dir.join("sweep.json"), Format::Json)?;
    emit_report(&result, &dir.join("sweep.csv"), Format::Csv)?;
    println!("ppl_fp={:.4}", result.ppl_fp);
    println!("{:>3} {:>9} {:>12}", "m", "avg_bits", "ppl_quant");
    for p in &result.points {
        println!("{:>3} {:>9.4} {:>12.4}", p.m, p.avg_bits, p.ppl_quant);
    }
    println!("wrote {} and {}", dir.join("sweep.json").display(), dir.join("sweep.csv").display());
    Ok(())
}
