//! Command-line surface: pattern inspection, SF-vs-TSVD comparison,
//! dataset synthesis, training, evaluation, attention-row export.
//!
//! Every command prints JSON to stdout; `--out` additionally writes the
//! same payload to a file. Exit codes: 2 bad input, 3 numeric fault,
//! 4 length mismatch.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use chordsf::chord::{build_pattern, structural_density, PatternMode};
use chordsf::data::{
    gen_adding, gen_temporal_order, load_matrix, read_adding_csv, read_order_csv,
    write_adding_csv, write_order_csv, MatrixKind, MatrixSource, PostTransform,
};
use chordsf::matrix::{fro_err, fro_norm, DenseMatrix};
use chordsf::psf::{
    evaluate, train, PsfAttnModel, PsfConfig, SeqInput, Task, TaskData, TrainConfig,
};
use chordsf::solver::{fit, SfConfig};
use chordsf::storage::{load_model, save_chain, save_model, save_tsvd, write_json};
use chordsf::tsvd::{rank_for_budget, reconstruct, tsvd, tsvd_nnz};
use chordsf::{Result, SfError};

#[derive(Parser)]
#[command(name = "chordsf", version, about = "Chord-structured sparse factorization toolkit")]
struct Cli {
    /// Worker threads; 1 (the default) guarantees bit-reproducible output.
    /// Overridden by the SF_THREADS environment variable.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Print a Chord sparsity pattern and its structural density.
    Pattern(PatternArgs),
    /// Fit a sparse-factor chain and a budget-matched TSVD to one matrix.
    Compare(CompareArgs),
    /// Truncated SVD of a square matrix.
    Tsvd(TsvdArgs),
    /// Sparse-factorization fit alone.
    Sf(SfArgs),
    /// Generate a synthetic dataset (CSV plus manifest).
    Synth(SynthArgs),
    /// Train a PSF-Attn model on a synthetic dataset.
    Train(TrainArgs),
    /// Accuracy of a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Export one row of the materialized attention matrix as CSV.
    AttnRow(AttnRowArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    PaperLiteral,
    FullCoverage,
}

impl From<ModeArg> for PatternMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::PaperLiteral => PatternMode::PaperLiteral,
            ModeArg::FullCoverage => PatternMode::FullCoverage,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    /// MatrixMarket coordinate or array file.
    Mm,
    /// Dense CSV, one row per line.
    Csv,
    /// ASCII or binary PGM image.
    Pgm,
    /// Covariance matrix of the rows of a rectangular CSV.
    CovCsv,
}

impl From<FormatArg> for MatrixKind {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Mm => MatrixKind::MatrixMarket,
            FormatArg::Csv => MatrixKind::DenseCsv,
            FormatArg::Pgm => MatrixKind::PgmImage,
            FormatArg::CovCsv => MatrixKind::CovarianceOfCsv,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Adding,
    Order,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Adding => Task::Adding,
            TaskArg::Order => Task::TemporalOrder,
        }
    }
}

#[derive(Args)]
struct InputArgs {
    /// Matrix file to load.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum)]
    format: FormatArg,
    /// Replace the matrix by its per-pixel gradient magnitude.
    #[arg(long)]
    gradient_magnitude: bool,
}

impl InputArgs {
    fn load(&self) -> Result<DenseMatrix> {
        load_matrix(&MatrixSource {
            kind: self.format.into(),
            path: self.input.clone(),
            post: if self.gradient_magnitude {
                PostTransform::GradientMagnitude
            } else {
                PostTransform::None
            },
        })
    }
}

#[derive(Args)]
struct SfFlags {
    #[arg(long, value_enum, default_value_t = ModeArg::FullCoverage)]
    mode: ModeArg,
    /// Number of factors; defaults to ceil(log2 N).
    #[arg(long)]
    m_factors: Option<usize>,
    #[arg(long, default_value_t = 20_000)]
    max_iters: usize,
    #[arg(long, default_value_t = 1e-2)]
    learning_rate: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl SfFlags {
    fn config(&self) -> SfConfig {
        SfConfig {
            m_factors: self.m_factors,
            max_iters: self.max_iters,
            learning_rate: self.learning_rate,
            seed: self.seed,
            ..SfConfig::default()
        }
    }
}

#[derive(Args)]
struct PatternArgs {
    #[arg(long)]
    n: usize,
    #[arg(long, value_enum, default_value_t = ModeArg::FullCoverage)]
    mode: ModeArg,
    /// Hop count for the density figure; defaults to ceil(log2 N).
    #[arg(long)]
    hops: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    sf: SfFlags,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TsvdArgs {
    #[command(flatten)]
    input: InputArgs,
    /// Explicit rank; mutually exclusive with --budget.
    #[arg(long, conflicts_with = "budget")]
    rank: Option<usize>,
    /// Non-zero budget translated through the equal-budget rule.
    #[arg(long)]
    budget: Option<usize>,
    /// Directory for the U/s/V arrays.
    #[arg(long)]
    save: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SfArgs {
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    sf: SfFlags,
    /// Directory for the fitted chain.
    #[arg(long)]
    save: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, value_enum)]
    task: TaskArg,
    #[arg(long)]
    n: usize,
    #[arg(long)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSV path; the manifest lands next to it with .manifest.json added.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_enum)]
    task: TaskArg,
    #[arg(long)]
    n: usize,
    #[arg(long)]
    train_data: PathBuf,
    #[arg(long)]
    eval_data: PathBuf,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 40)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    learning_rate: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 32)]
    d: usize,
    #[arg(long, default_value_t = 64)]
    hidden: usize,
    #[arg(long)]
    m_factors: Option<usize>,
    #[arg(long)]
    residual: bool,
    /// Stop early once eval accuracy reaches this fraction.
    #[arg(long)]
    stop_accuracy: Option<f64>,
    /// Checkpoint directory.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AttnRowArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Which dataset instance supplies the embedding.
    #[arg(long, default_value_t = 0)]
    instance: usize,
    #[arg(long)]
    row: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Comparison outcome at matched non-zero budgets.
#[derive(Debug, Serialize)]
struct RunReport {
    command: String,
    config: serde_json::Value,
    seed: u64,
    nnz_sf: usize,
    nnz_tsvd: usize,
    rank_r: usize,
    fro_err_sf: f64,
    fro_err_tsvd: f64,
    winner: String,
    wall_time_s: f64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let threads = std::env::var("SF_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .unwrap_or(cli.threads)
        .max(1);
    // all computation is currently single-threaded; the flag is accepted so
    // scripted callers can pin it explicitly
    let _ = threads;
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn exit_code(err: &SfError) -> u8 {
    match err {
        SfError::ShapeMismatch(_) => 4,
        SfError::NumericFault(_) => 3,
        _ => 2,
    }
}

/// Print a JSON payload and mirror it to `--out` when given. Stdout write
/// failures (e.g. a closed pipe) are ignored.
fn emit<T: Serialize>(value: &T, out: &Option<PathBuf>) -> Result<()> {
    use std::io::Write;
    let text = serde_json::to_string_pretty(value)?;
    let _ = writeln!(std::io::stdout(), "{text}");
    if let Some(path) = out {
        fs::write(path, text + "\n")?;
    }
    Ok(())
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Pattern(a) => cmd_pattern(a),
        Cmd::Compare(a) => cmd_compare(a),
        Cmd::Tsvd(a) => cmd_tsvd(a),
        Cmd::Sf(a) => cmd_sf(a),
        Cmd::Synth(a) => cmd_synth(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::AttnRow(a) => cmd_attn_row(a),
    }
}

fn cmd_pattern(a: PatternArgs) -> Result<()> {
    let pattern = build_pattern(a.n, a.mode.into())?;
    let hops = a.hops.unwrap_or_else(|| pattern.k_exp().max(1));
    let payload = json!({
        "pattern": pattern.to_json(),
        "nnz": pattern.nnz(),
        "hops": hops,
        "structural_density": structural_density(&pattern, hops),
    });
    emit(&payload, &a.out)
}

fn winner_of(err_sf: f64, err_tsvd: f64, scale: f64) -> String {
    let diff = (err_sf - err_tsvd).abs();
    let tie = diff <= 1e-9 * err_sf.max(err_tsvd) || err_sf.max(err_tsvd) <= 1e-9 * scale;
    if tie {
        "tie".into()
    } else if err_sf < err_tsvd {
        "sf".into()
    } else {
        "tsvd".into()
    }
}

fn cmd_compare(a: CompareArgs) -> Result<()> {
    let start = Instant::now();
    let x = a.input.load()?;
    let cfg = a.sf.config();
    let pattern = Arc::new(build_pattern(x.rows(), a.sf.mode.into())?);
    let (chain, report) = fit(&x, &pattern, &cfg).map_err(|fault| fault.error)?;
    let nnz_sf = chain.nnz_total();
    let r = rank_for_budget(x.rows(), nnz_sf)?;
    let t = tsvd(&x, r)?;
    let fro_err_tsvd = fro_err(&x, &reconstruct(&t))?;
    let report = RunReport {
        command: "compare".into(),
        config: serde_json::to_value(&cfg)?,
        seed: cfg.seed,
        nnz_sf,
        nnz_tsvd: tsvd_nnz(x.rows(), r),
        rank_r: r,
        fro_err_sf: report.final_fro_err,
        fro_err_tsvd,
        winner: winner_of(report.final_fro_err, fro_err_tsvd, fro_norm(&x)),
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    emit(&report, &a.out)
}

fn cmd_tsvd(a: TsvdArgs) -> Result<()> {
    let start = Instant::now();
    let x = a.input.load()?;
    let r = match (a.rank, a.budget) {
        (Some(r), _) => r,
        (None, Some(b)) => rank_for_budget(x.rows(), b)?,
        (None, None) => {
            return Err(SfError::InvalidInput("pass either --rank or --budget".into()))
        }
    };
    let t = tsvd(&x, r)?;
    let err = fro_err(&x, &reconstruct(&t))?;
    if let Some(dir) = &a.save {
        save_tsvd(dir, &t)?;
    }
    let payload = json!({
        "command": "tsvd",
        "n": x.rows(),
        "rank_r": t.r,
        "nnz_tsvd": tsvd_nnz(x.rows(), t.r),
        "fro_err": err,
        "singular_values": t.singular_values,
        "wall_time_s": start.elapsed().as_secs_f64(),
    });
    emit(&payload, &a.out)
}

fn cmd_sf(a: SfArgs) -> Result<()> {
    let x = a.input.load()?;
    let cfg = a.sf.config();
    let pattern = Arc::new(build_pattern(x.rows(), a.sf.mode.into())?);
    let (chain, report) = fit(&x, &pattern, &cfg).map_err(|fault| fault.error)?;
    if let Some(dir) = &a.save {
        save_chain(dir, &chain)?;
    }
    let payload = json!({
        "command": "sf",
        "config": cfg,
        "seed": cfg.seed,
        "n": x.rows(),
        "m": chain.m(),
        "nnz_sf": chain.nnz_total(),
        "fro_err_sf": report.final_fro_err,
        "iterations_run": report.iterations_run,
        "wall_time_s": report.wall_time_s,
    });
    emit(&payload, &a.out)
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let task: Task = a.task.into();
    match task {
        Task::Adding => write_adding_csv(&a.out, &gen_adding(a.n, a.count, a.seed)?)?,
        Task::TemporalOrder => {
            write_order_csv(&a.out, &gen_temporal_order(a.n, a.count, a.seed)?)?
        }
    }
    let manifest = json!({
        "command": "synth",
        "task": task,
        "n": a.n,
        "count": a.count,
        "seed": a.seed,
        "path": a.out,
    });
    let manifest_path = PathBuf::from(format!("{}.manifest.json", a.out.display()));
    write_json(&manifest_path, &manifest)?;
    emit(&manifest, &None)
}

fn load_task_data(task: Task, path: &PathBuf) -> Result<TaskData> {
    Ok(match task {
        Task::Adding => TaskData::Adding(read_adding_csv(path)?),
        Task::TemporalOrder => TaskData::Order(read_order_csv(path)?),
    })
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let task: Task = a.task.into();
    let psf_cfg = PsfConfig {
        n: a.n,
        d: a.d,
        d_v: a.d,
        hidden: a.hidden,
        m_factors: a.m_factors,
        mode: PatternMode::FullCoverage,
        residual: a.residual,
        seed: a.seed,
    };
    let train_cfg = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        lr: a.learning_rate,
        seed: a.seed,
        stop_accuracy: a.stop_accuracy,
    };
    let train_set = load_task_data(task, &a.train_data)?;
    let eval_set = load_task_data(task, &a.eval_data)?;
    let mut model = PsfAttnModel::new(task, &psf_cfg)?;
    let result = train(&mut model, &train_set, &eval_set, &train_cfg);
    // the model holds its last consistent parameters even on a fault
    save_model(&a.checkpoint, &model, &psf_cfg)?;
    let metrics = result?;
    let payload = json!({
        "command": "train",
        "task": task,
        "config": { "model": psf_cfg, "train": train_cfg },
        "seed": a.seed,
        "metrics": metrics,
        "final_accuracy": metrics.final_accuracy,
    });
    emit(&payload, &a.out)
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let (model, _) = load_model(&a.checkpoint)?;
    let data = load_task_data(model.task, &a.data)?;
    let accuracy = evaluate(&model, &data)?;
    let payload = json!({
        "command": "eval",
        "task": model.task,
        "count": data.len(),
        "accuracy": accuracy,
    });
    emit(&payload, &a.out)
}

fn cmd_attn_row(a: AttnRowArgs) -> Result<()> {
    let (model, _) = load_model(&a.checkpoint)?;
    let data = load_task_data(model.task, &a.data)?;
    if a.instance >= data.len() {
        return Err(SfError::IndexOutOfRange { index: a.instance, size: data.len() });
    }
    let row = match &data {
        TaskData::Adding(v) => {
            let inst = &v[a.instance];
            let feats = DenseMatrix::from_vec(
                inst.pairs.len(),
                2,
                inst.pairs.iter().flat_map(|&(x, b)| [x, b as f64]).collect(),
            )?;
            model.attention_row(SeqInput::Features(&feats), a.row)?
        }
        TaskData::Order(v) => {
            model.attention_row(SeqInput::Tokens(&v[a.instance].tokens), a.row)?
        }
    };
    let mut line = a.row.to_string();
    for v in &row {
        line.push(',');
        line.push_str(&format!("{v}"));
    }
    line.push('\n');
    {
        use std::io::Write;
        let _ = write!(std::io::stdout(), "{line}");
    }
    if let Some(path) = &a.out {
        fs::write(path, line)?;
    }
    Ok(())
}
