use std::fs::File;
use std::io::{self, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use vocabscale_cli::server::{router, AppState};
use vocabscale_cli::{load_artifacts, parse_f64, parse_u32, parse_usize};
use vocabscale_core::derivative::{derivative_pairs, fit_gamma, DERIVATIVE_LADDER};
use vocabscale_core::fertility::{
    fit_fertility, load_corpus, read_points, sweep_ratios, write_points, SWEEP_VOCAB_SIZES,
};
use vocabscale_core::isoflops::{densify, fit_power_laws, geometric_budgets, select_optima, PowerLawOptions};
use vocabscale_core::optim::HUBER_DELTA;
use vocabscale_core::parametric::{fit_params, ParamFitOptions, DEFAULT_FLOPS_FLOOR};
use vocabscale_core::predict::{loss_curve, predict, reproduce_table, MIN_VOCAB};
use vocabscale_core::scale::{read_records, write_records};
use vocabscale_core::synth::generate;
use vocabscale_core::{
    Approach, Error, FertilityFit, FlopsBudget, PredictionRequest, ShapeTable, SynthPlan,
};

/// Vocabulary size planning from scaling-law fits.
#[derive(Parser)]
#[command(name = "vocabscale", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the fertility curve f(V) from measured ratios or a corpus.
    FitFv(FitFvArgs),
    /// Train BPE tokenizers over a vocabulary sweep and measure their ratios.
    TrainTokenizers(TrainArgs),
    /// Select per-budget optima from run records and fit allocation laws.
    FitIsoflops(FitIsoflopsArgs),
    /// Fit the vocabulary-vs-model-size exponent from derivative roots.
    FitGamma(FitGammaArgs),
    /// Fit the parametric loss to run records.
    FitParametric(FitParametricArgs),
    /// Predict the optimal vocabulary size.
    PredictVocab(PredictArgs),
    /// Recompute the published predictions side by side with the originals.
    ReproduceTable(ReproduceArgs),
    /// Loss as a function of vocabulary size at a fixed budget.
    LossCurve(CurveArgs),
    /// Generate synthetic run records from a planted loss.
    SynthGenerate(SynthArgs),
    /// Serve the JSON API.
    Serve(ServeArgs),
}

#[derive(Args)]
struct ArtifactArgs {
    /// Built-in artifact preset.
    #[arg(long, default_value = "paper-2024")]
    preset: String,

    /// Directory with fertility.json, laws.json, gamma.json, ploss.json or
    /// shapes.toml overriding the preset.
    #[arg(long, env = "VOCAB_TOOLKIT_ARTIFACTS")]
    artifacts_dir: Option<PathBuf>,
}

#[derive(Args)]
struct FitFvArgs {
    /// CSV of `vocab_size,ratio` points.
    #[arg(long, conflicts_with = "corpus", required_unless_present = "corpus")]
    points: Option<PathBuf>,

    /// Text file or directory of .txt files to train and measure on.
    #[arg(long)]
    corpus: Option<PathBuf>,

    /// Comma-separated vocabulary sizes when training from a corpus.
    #[arg(long, value_delimiter = ',', value_parser = parse_usize)]
    sizes: Option<Vec<usize>>,

    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Training text: a file or a directory of .txt files.
    #[arg(long)]
    corpus: PathBuf,

    /// Held-out text to measure on. Defaults to the training corpus.
    #[arg(long)]
    eval: Option<PathBuf>,

    /// Comma-separated vocabulary sizes.
    #[arg(long, value_delimiter = ',', value_parser = parse_usize)]
    sizes: Option<Vec<usize>>,

    /// Output CSV of `vocab_size,ratio`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FitIsoflopsArgs {
    /// Run-record CSV, `-` for stdin.
    #[arg(long, default_value = "-")]
    records: PathBuf,

    /// `geometric:N` or a comma-separated list of FLOPs budgets.
    #[arg(long, default_value = "geometric:8")]
    budgets: String,

    /// Interpolate this many extra vocabulary sizes between neighbours.
    #[arg(long, value_parser = parse_usize)]
    densify: Option<usize>,

    /// Fertility fit used for record checks and densification.
    #[arg(long, default_value = "paper-2024")]
    fertility: String,

    #[arg(long, default_value_t = HUBER_DELTA, value_parser = parse_f64)]
    delta: f64,

    #[arg(long, default_value_t = 0)]
    seed: u64,

    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FitGammaArgs {
    /// Fertility fit JSON or `paper-2024`.
    #[arg(long, default_value = "paper-2024")]
    fertility: String,

    /// Shape table TOML or `default`.
    #[arg(long, default_value = "default")]
    shapes: String,

    /// Comma-separated non-vocabulary sizes to solve at.
    #[arg(long, value_delimiter = ',', value_parser = parse_f64)]
    ladder: Option<Vec<f64>>,

    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FitParametricArgs {
    /// Run-record CSV, `-` for stdin.
    #[arg(long, default_value = "-")]
    records: PathBuf,

    /// Fertility fit JSON or `paper-2024`.
    #[arg(long, default_value = "paper-2024")]
    fertility: String,

    /// Records below this many FLOPs are ignored.
    #[arg(long, default_value_t = DEFAULT_FLOPS_FLOOR, value_parser = parse_f64)]
    flops_floor: f64,

    #[arg(long, default_value_t = HUBER_DELTA, value_parser = parse_f64)]
    delta: f64,

    /// Run all 729 grid starts instead of the best 50.
    #[arg(long)]
    full_grid: bool,

    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
    approach: u8,

    #[arg(long, value_parser = parse_f64)]
    n_nv: Option<f64>,

    #[arg(long, value_parser = parse_f64)]
    flops: Option<f64>,

    /// Training characters (approach 3 only).
    #[arg(long, value_parser = parse_f64)]
    chars: Option<f64>,

    /// Embedding width. Defaults to the shape table.
    #[arg(long, value_parser = parse_u32)]
    embed_dim: Option<u32>,

    #[command(flatten)]
    artifacts: ArtifactArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Csv,
    Json,
}

#[derive(Args)]
struct ReproduceArgs {
    #[arg(long, value_enum, default_value = "text")]
    format: Format,

    #[command(flatten)]
    artifacts: ArtifactArgs,
}

#[derive(Args)]
struct CurveArgs {
    #[arg(long, value_parser = parse_f64)]
    n_nv: f64,

    #[arg(long, value_parser = parse_f64)]
    flops: f64,

    #[arg(long, value_parser = parse_f64, default_value_t = MIN_VOCAB as f64)]
    vmin: f64,

    #[arg(long, value_parser = parse_f64, default_value_t = vocabscale_cli::server::CURVE_VMAX)]
    vmax: f64,

    #[arg(long, value_parser = parse_usize, default_value_t = vocabscale_cli::server::CURVE_POINTS)]
    points: usize,

    #[arg(long, value_parser = parse_u32)]
    embed_dim: Option<u32>,

    #[arg(long, value_enum, default_value = "csv")]
    format: Format,

    #[command(flatten)]
    artifacts: ArtifactArgs,
}

#[derive(Args)]
struct SynthArgs {
    /// Plan file (JSON or TOML). Defaults to the built-in plan.
    #[arg(long)]
    plan: Option<PathBuf>,

    /// Standard deviation of additive noise on loss_u.
    #[arg(long, value_parser = parse_f64)]
    noise: Option<f64>,

    #[arg(long)]
    seed: Option<u64>,

    /// Multiplier on every rung's character budget.
    #[arg(long, value_parser = parse_f64)]
    char_scale: Option<f64>,

    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    bind: String,

    #[command(flatten)]
    artifacts: ArtifactArgs,
}

fn parse_f64_list(s: &str) -> Result<Vec<f64>, String> {
    s.split(',').filter(|p| !p.trim().is_empty()).map(parse_f64).collect()
}

/// Writes to `path`, or stdout when absent or `-`.
fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    match path {
        Some(p) if p != Path::new("-") => {
            let f = File::create(p).with_context(|| format!("creating {}", p.display()))?;
            Ok(Box::new(BufWriter::new(f)))
        }
        _ => Ok(Box::new(BufWriter::new(io::stdout().lock()))),
    }
}

fn write_json<T: Serialize>(path: Option<&Path>, value: &T) -> Result<()> {
    let mut w = output(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn input(path: &Path) -> Result<Box<dyn Read>> {
    if path == Path::new("-") {
        Ok(Box::new(io::stdin().lock()))
    } else {
        let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
        Ok(Box::new(f))
    }
}

fn fertility_arg(s: &str) -> Result<FertilityFit> {
    if s == "paper-2024" {
        Ok(FertilityFit::paper_2024())
    } else {
        Ok(FertilityFit::load(Path::new(s))?)
    }
}

fn fit_fv(a: FitFvArgs) -> Result<()> {
    let points = match (&a.points, &a.corpus) {
        (Some(p), _) => read_points(input(p)?)?,
        (None, Some(c)) => {
            let text = load_corpus(c)?;
            let sizes = a.sizes.unwrap_or_else(|| SWEEP_VOCAB_SIZES.to_vec());
            let (points, saturated) = sweep_ratios(&text, &text, &sizes)?;
            if saturated {
                eprintln!("warning: corpus saturated before the largest vocabulary size");
            }
            points
        }
        (None, None) => bail!(Error::InvalidInput("either --points or --corpus is required".into())),
    };
    let fit = fit_fertility(&points)?;
    if !fit.is_convex() {
        eprintln!("warning: fitted curve is not convex in ln V; clamp left at {}", fit.clamp_v);
    }
    write_json(a.out.as_deref(), &fit)
}

fn train_tokenizers(a: TrainArgs) -> Result<()> {
    let train = load_corpus(&a.corpus)?;
    let eval = match &a.eval {
        Some(p) => load_corpus(p)?,
        None => train.clone(),
    };
    let sizes = a.sizes.unwrap_or_else(|| SWEEP_VOCAB_SIZES.to_vec());
    let (points, saturated) = sweep_ratios(&train, &eval, &sizes)?;
    if saturated {
        eprintln!("warning: corpus saturated; largest table has {} tokens", points.last().map_or(0.0, |p| p.vocab_size));
    }
    let mut w = output(a.out.as_deref())?;
    write_points(&mut w, &points)?;
    w.flush()?;
    Ok(())
}

fn parse_budgets(spec: &str, records: &[vocabscale_core::RunRecord]) -> Result<Vec<FlopsBudget>> {
    if let Some(n) = spec.strip_prefix("geometric:") {
        let n = parse_usize(n).map_err(Error::InvalidInput)?;
        return Ok(geometric_budgets(records, n)?);
    }
    let values = parse_f64_list(spec).map_err(Error::InvalidInput)?;
    if values.is_empty() {
        bail!(Error::InvalidInput("no budgets given".into()));
    }
    Ok(values.into_iter().map(FlopsBudget::new).collect::<Result<_, _>>()?)
}

fn fit_isoflops(a: FitIsoflopsArgs) -> Result<()> {
    let fert = fertility_arg(&a.fertility)?;
    let mut records = read_records(input(&a.records)?, Some(&fert))?;
    if let Some(factor) = a.densify {
        records = densify(&records, factor, &fert)?;
    }
    let budgets = parse_budgets(&a.budgets, &records)?;
    let sel = select_optima(&records, &budgets);
    for s in &sel.skipped {
        eprintln!("skipped budget {:e}: {}", s.flops, s.reason);
    }
    let ties = sel.optima.iter().filter(|o| o.tied).count();
    if ties > 0 {
        eprintln!("{ties} budgets had tied optima; the smaller vocabulary was kept");
    }
    let laws = fit_power_laws(
        &sel.optima,
        &PowerLawOptions {
            delta: a.delta,
            seed: a.seed,
        },
    )?;
    write_json(a.out.as_deref(), &laws)
}

fn fit_gamma_cmd(a: FitGammaArgs) -> Result<()> {
    let fert = fertility_arg(&a.fertility)?;
    let shapes = if a.shapes == "default" {
        ShapeTable::default()
    } else {
        ShapeTable::load(Path::new(&a.shapes))?
    };
    let ladder = a.ladder.unwrap_or_else(|| DERIVATIVE_LADDER.to_vec());
    let pairs = derivative_pairs(&ladder, &shapes, &fert)?;
    let fit = fit_gamma(&pairs)?;
    if !fit.in_expected_range() {
        eprintln!("warning: gamma {:.4} is outside the expected (0.80, 0.86) range", fit.gamma);
    }
    write_json(a.out.as_deref(), &fit)
}

fn fit_parametric(a: FitParametricArgs) -> Result<()> {
    let fert = fertility_arg(&a.fertility)?;
    let records = read_records(input(&a.records)?, Some(&fert))?;
    let opts = ParamFitOptions {
        flops_floor: a.flops_floor,
        delta: a.delta,
        full_grid: a.full_grid,
        ..ParamFitOptions::default()
    };
    let report = fit_params(&records, &fert, &opts)?;
    eprintln!(
        "used {} records ({} below floor), {} starts, objective {:.3e}",
        report.records_used, report.records_below_floor, report.starts_run, report.objective
    );
    write_json(a.out.as_deref(), &report.loss)
}

fn predict_vocab(a: PredictArgs) -> Result<()> {
    let (art, _) = load_artifacts(&a.artifacts.preset, a.artifacts.artifacts_dir.as_deref())?;
    let req = PredictionRequest {
        approach: Approach::try_from(a.approach)?,
        n_nv: a.n_nv,
        flops: a.flops,
        chars: a.chars,
        embed_dim: a.embed_dim,
    };
    let p = predict(&req, &art)?;
    write_json(None, &p)
}

fn fmt_k(v: f64) -> String {
    format!("{:.0}K", v / 1e3)
}

fn fmt_b(v: f64) -> String {
    format!("{:.2}B", v / 1e9)
}

fn reproduce(a: ReproduceArgs) -> Result<()> {
    let (art, _) = load_artifacts(&a.artifacts.preset, a.artifacts.artifacts_dir.as_deref())?;
    let rows = reproduce_table(&art)?;
    let mut w = output(None)?;
    match a.format {
        Format::Json => {
            serde_json::to_writer_pretty(&mut w, &rows)?;
            writeln!(w)?;
        }
        Format::Csv => {
            writeln!(
                w,
                "n_nv,embed_dim,flops,approach,vocab_published,vocab_computed,vocab_rel_err,n_v_published,n_v_computed,n_v_rel_err"
            )?;
            for r in &rows {
                for i in 0..3 {
                    writeln!(
                        w,
                        "{:e},{},{:e},{},{},{},{:.4},{:e},{:e},{:.4}",
                        r.published.n_nv,
                        r.published.embed_dim,
                        r.published.flops,
                        i + 1,
                        r.published.vocab[i],
                        r.vocab[i],
                        r.vocab_rel_err[i],
                        r.published.n_v[i],
                        r.n_v[i],
                        r.n_v_rel_err[i]
                    )?;
                }
            }
        }
        Format::Text => {
            writeln!(w, "vocabulary size: published / computed (relative error)")?;
            writeln!(
                w,
                "{:>6} {:>6} {:>8}  {:>24}  {:>24}  {:>24}",
                "N_nv", "d", "FLOPs", "approach 1", "approach 2", "approach 3"
            )?;
            for r in &rows {
                let cells: Vec<String> = (0..3)
                    .map(|i| {
                        format!(
                            "{} / {} ({:+.1}%)",
                            fmt_k(r.published.vocab[i]),
                            fmt_k(r.vocab[i] as f64),
                            100.0 * r.vocab_rel_err[i]
                        )
                    })
                    .collect();
                writeln!(
                    w,
                    "{:>6} {:>6} {:>8.1e}  {:>24}  {:>24}  {:>24}",
                    format!("{:.0}B", r.published.n_nv / 1e9),
                    r.published.embed_dim,
                    r.published.flops,
                    cells[0],
                    cells[1],
                    cells[2]
                )?;
            }
            writeln!(w)?;
            writeln!(w, "vocabulary parameters: published / computed")?;
            for r in &rows {
                let cells: Vec<String> = (0..3)
                    .map(|i| format!("{} / {}", fmt_b(r.published.n_v[i]), fmt_b(r.n_v[i])))
                    .collect();
                writeln!(
                    w,
                    "{:>6}  {:>18}  {:>18}  {:>18}",
                    format!("{:.0}B", r.published.n_nv / 1e9),
                    cells[0],
                    cells[1],
                    cells[2]
                )?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn curve(a: CurveArgs) -> Result<()> {
    let (art, _) = load_artifacts(&a.artifacts.preset, a.artifacts.artifacts_dir.as_deref())?;
    let d = match a.embed_dim {
        Some(d) => d,
        None => art.shapes.embed_dim_for(a.n_nv)?,
    };
    let pts = loss_curve(&art.loss, a.n_nv, d as f64, FlopsBudget::new(a.flops)?, a.vmin, a.vmax, a.points)?;
    let mut w = output(None)?;
    match a.format {
        Format::Json => {
            serde_json::to_writer_pretty(&mut w, &pts)?;
            writeln!(w)?;
        }
        Format::Csv | Format::Text => {
            writeln!(w, "vocab,loss_u")?;
            for p in &pts {
                writeln!(w, "{},{}", p.vocab, p.loss_u)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let mut plan = match &a.plan {
        Some(p) => SynthPlan::load(p)?,
        None => SynthPlan::default(),
    };
    if let Some(n) = a.noise {
        plan.noise = n;
    }
    if let Some(s) = a.seed {
        plan.seed = s;
    }
    if let Some(s) = a.char_scale {
        plan.char_scale = s;
    }
    let records = generate(&plan)?;
    let mut w = output(a.out.as_deref())?;
    write_records(&mut w, &records)?;
    w.flush()?;
    Ok(())
}

fn serve(a: ServeArgs) -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(io::stderr)
        .init();
    let (art, source) = load_artifacts(&a.artifacts.preset, a.artifacts.artifacts_dir.as_deref())?;
    tracing::info!(preset = %source.preset, files = ?source.files, "artifacts loaded");
    let app = router(Arc::new(AppState::new(art, source)));
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(&a.bind)
            .await
            .with_context(|| format!("binding {}", a.bind))?;
        tracing::info!(addr = %listener.local_addr()?, "listening");
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        Ok(())
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::FitFv(a) => fit_fv(a),
        Command::TrainTokenizers(a) => train_tokenizers(a),
        Command::FitIsoflops(a) => fit_isoflops(a),
        Command::FitGamma(a) => fit_gamma_cmd(a),
        Command::FitParametric(a) => fit_parametric(a),
        Command::PredictVocab(a) => predict_vocab(a),
        Command::ReproduceTable(a) => reproduce(a),
        Command::LossCurve(a) => curve(a),
        Command::SynthGenerate(a) => synth(a),
        Command::Serve(a) => serve(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let solver = e.chain().any(|c| c.downcast_ref::<Error>().is_some_and(Error::is_solver_failure));
            ExitCode::from(if solver { 3 } else { 2 })
        }
    }
}
