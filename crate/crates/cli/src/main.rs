use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use diffcount::analysis::{
    convergence_order, diffused_prior_gap, trajectory_error_decomposition, verify_kl_decomposition, ConvergenceStudy,
    ErrorBudget, GaussianData, KlDecomposition, PriorKind,
};
use diffcount::counting::Counter;
use diffcount::diffusion::{NoiseSchedule, ScheduleKind};
use diffcount::experiment::{
    build_training_data, correlate, correlations_csv, correlations_text, run_sweep, table1, table1_csv, table1_text,
    train_and_save, ExperimentConfig, ExperimentReport, Variant,
};
use diffcount::metrics::failure_rates;
use diffcount::sampler::{sample, InitNoise, SamplerConfig, SolverKind};
use diffcount::score::{load_checkpoint, Biased, Gmm, GmmScore};
use diffcount::toyshape::{generate_dataset, generate_gray_dataset, read_image, write_dataset, write_pgm, CountProfile};
use diffcount::Tensor;

#[derive(Parser)]
#[command(name = "diffcount", version, about = "Diffusion sampling experiments with counting-failure evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labeled ToyShape dataset (PGM images + manifest.csv).
    GenDataset(GenDatasetArgs),
    /// Train the noise predictor described by an experiment config.
    Train(TrainArgs),
    /// Draw samples from a trained checkpoint and write them as PGM images.
    Sample(SampleArgs),
    /// Count objects in a directory of images and write per-image verdicts.
    Evaluate(EvaluateArgs),
    /// Check the KL decomposition bound, prior gap, error budget and solver orders.
    VerifyBounds(VerifyArgs),
    /// Measure a solver's convergence order on the analytic two-component mixture.
    Convergence(ConvergenceArgs),
    /// Run the configured sampling grid and write the experiment report.
    Sweep(ConfigArgs),
    /// Correlate failure rates with FID across configurations.
    Correlate(CorrelateArgs),
    /// Summarise an experiment report as seed-averaged and correlation tables.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenDatasetArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value = "paper")]
    profile: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// Gray-intensity variant; occupancy masks go to `<out>/masks`.
    #[arg(long)]
    gray: bool,
    /// Also write PNG copies.
    #[arg(long)]
    png: bool,
}

#[derive(Args)]
struct ConfigArgs {
    #[arg(long)]
    config: PathBuf,
    /// Joint image + mask model (forces the gray dataset variant).
    #[arg(long)]
    jdm: bool,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config).with_context(|| format!("reading {}", self.config.display()))?;
        if self.jdm {
            cfg.model.joint = true;
            cfg.dataset.variant = Variant::Gray;
            cfg.validate()?;
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Override the configured number of optimiser steps.
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Args)]
struct SampleArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, default_value = "solver1")]
    solver: SolverKind,
    /// Defaults to T for the ancestral sampler and 50 otherwise.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, default_value = "normal")]
    init: InitNoise,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 16)]
    n: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Directory of .pgm/.png images, judged in file-name order.
    #[arg(long)]
    images: PathBuf,
    #[arg(long, default_value = "paper")]
    profile: String,
    /// Use the gray-variant binarization threshold.
    #[arg(long)]
    gray: bool,
    /// Verdicts CSV.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, value_delimiter = ',', default_value = "10,100,1000")]
    horizons: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "0,0.05,0.1,0.2")]
    perturbations: Vec<f64>,
    /// JSON output; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ConvergenceArgs {
    #[arg(long, default_value = "solver1")]
    solver: SolverKind,
    #[arg(long, value_delimiter = ',', default_value = "8,16,32,64,128")]
    ns: Vec<usize>,
    #[arg(long, default_value_t = 64)]
    states: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSV output; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CorrelateArgs {
    #[arg(long)]
    report: PathBuf,
    /// CSV output; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    report: PathBuf,
    /// Directory for table1/table2 CSV and text files.
    #[arg(long)]
    out_dir: PathBuf,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenDataset(a) => gen_dataset(a),
        Command::Train(a) => train(a),
        Command::Sample(a) => sample_cmd(a),
        Command::Evaluate(a) => evaluate(a),
        Command::VerifyBounds(a) => verify_bounds(a),
        Command::Convergence(a) => convergence(a),
        Command::Sweep(a) => sweep(a),
        Command::Correlate(a) => correlate_cmd(a),
        Command::Report(a) => report(a),
    }
}

fn gen_dataset(a: GenDatasetArgs) -> Result<()> {
    let profile = CountProfile::by_name(&a.profile)?;
    let manifest = if a.gray {
        let d = generate_gray_dataset(a.n, &profile, a.seed, a.size)?;
        let masks = a.out.join("masks");
        fs::create_dir_all(&masks)?;
        for (i, m) in d.masks.iter().enumerate() {
            write_pgm(m, &masks.join(format!("img_{i:05}.pgm")))?;
        }
        write_dataset(&a.out, &d.images, &d.scenes, a.png)?
    } else {
        let d = generate_dataset(a.n, &profile, a.seed, a.size)?;
        write_dataset(&a.out, &d.images, &d.scenes, a.png)?
    };
    println!("{}", manifest.display());
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = a.config.load()?;
    if let Some(s) = a.steps {
        cfg.train.steps = s;
    }
    let (_, report) = train_and_save(&cfg)?;
    let summary = serde_json::json!({
        "checkpoint": cfg.checkpoint_path(),
        "initial_validation_loss": report.initial_validation_loss,
        "final_validation_loss": report.final_validation_loss,
        "curve": report.curve,
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn sample_cmd(a: SampleArgs) -> Result<()> {
    let cfg = a.config.load()?;
    let schedule = cfg.schedule()?;
    let path = cfg.checkpoint_path();
    let model = load_checkpoint(&path).with_context(|| format!("loading {}", path.display()))?;
    let steps = a.steps.unwrap_or(if a.solver == SolverKind::Ancestral { schedule.steps() } else { 50 });
    let data = if a.init == InitNoise::Diffused { build_training_data(&cfg)?.items } else { Vec::new() };
    let out = sample(&model, &SamplerConfig::new(a.solver, steps, a.init, a.seed).with_samples(a.n), &schedule, &data)?;
    let res = cfg.resolution();
    fs::create_dir_all(&a.out)?;
    let plane = res.model_pixels();
    for i in 0..out.samples.rows() {
        let row = out.samples.row(i);
        write_pgm(&res.decode(&row[..plane])?, &a.out.join(format!("sample_{i:05}.pgm")))?;
        if cfg.model.joint {
            write_pgm(&res.decode(&row[plane..2 * plane])?, &a.out.join(format!("mask_{i:05}.pgm")))?;
        }
    }
    println!("wrote {} samples to {}", out.samples.rows(), a.out.display());
    Ok(())
}

fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("pgm" | "png")))
        .filter(|p| !p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("mask_")))
        .collect();
    files.sort();
    Ok(files)
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let profile = CountProfile::by_name(&a.profile)?;
    let counter = if a.gray { Counter::gray() } else { Counter::default() };
    let files = image_files(&a.images)?;
    if files.is_empty() {
        bail!("no images in {}", a.images.display());
    }
    let mut w = csv::Writer::from_path(&a.out)?;
    w.write_record(["file", "counting_ready", "n_triangle", "n_square", "n_pentagon", "hallucination", "low_confidence"])?;
    let mut verdicts = Vec::with_capacity(files.len());
    for f in &files {
        let v = counter.judge(&read_image(f)?, &profile, None)?;
        let name = f.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        let c = v.counts.0;
        w.write_record([
            name,
            v.counting_ready.to_string(),
            c[0].to_string(),
            c[1].to_string(),
            c[2].to_string(),
            v.is_hallucination.to_string(),
            v.low_confidence.to_string(),
        ])?;
        verdicts.push(v);
    }
    w.flush()?;
    let rates = failure_rates(&verdicts)?;
    println!("{}", serde_json::to_string(&serde_json::json!({"n": rates.n, "chr": rates.chr, "ncfr": rates.ncfr, "tfr": rates.tfr}))?);
    Ok(())
}

#[derive(Serialize)]
struct PriorGap {
    horizon: usize,
    gap: f64,
}

#[derive(Serialize)]
struct BoundCheck {
    #[serde(flatten)]
    decomposition: KlDecomposition,
    gap: f64,
    holds: bool,
}

#[derive(Serialize)]
struct BudgetRow {
    solver: SolverKind,
    steps: usize,
    #[serde(flatten)]
    budget: ErrorBudget,
}

#[derive(Serialize)]
struct BoundsReport {
    bounds: Vec<BoundCheck>,
    prior_gap: Vec<PriorGap>,
    budget: Vec<BudgetRow>,
    slopes: Vec<ConvergenceStudy>,
}

const BOUND_SLACK: f64 = 1e-9;

fn verify_bounds(a: VerifyArgs) -> Result<()> {
    let data = GaussianData::default();
    let mut bounds = Vec::new();
    let mut prior_gap = Vec::new();
    for &t in &a.horizons {
        let s = NoiseSchedule::build(ScheduleKind::Linear, t, 1e-4, 0.02)?;
        let gap = diffused_prior_gap(&Tensor::from_vec(vec![data.mean]), data.var, &s)?;
        prior_gap.push(PriorGap { horizon: t, gap });
        for &p in &a.perturbations {
            for prior in [PriorKind::Standard, PriorKind::Exact] {
                let d = verify_kl_decomposition(&s, data, p, prior)?;
                let holds = d.lhs <= d.rhs + BOUND_SLACK;
                bounds.push(BoundCheck { decomposition: d, gap, holds });
            }
        }
    }
    let schedule = NoiseSchedule::linear_default();
    let gmm = Gmm::bimodal_1d();
    let perturbed = Biased::new(GmmScore::new(gmm.clone()), 1e-3);
    let mut budget = Vec::new();
    let mut slopes = Vec::new();
    for solver in [SolverKind::Solver1, SolverKind::Solver2] {
        for steps in [25, 50, 100] {
            let cfg = SamplerConfig::new(solver, steps, InitNoise::Normal, 0).with_samples(64);
            let b = trajectory_error_decomposition(&perturbed, &cfg, &gmm, 1e-3, &schedule)?;
            budget.push(BudgetRow { solver, steps, budget: b });
        }
        slopes.push(convergence_order(solver, &gmm, &schedule, &[8, 16, 32, 64, 128], 64, 0)?);
    }
    let failed = bounds.iter().filter(|b| !b.holds).count();
    let report = BoundsReport { bounds, prior_gap, budget, slopes };
    let text = serde_json::to_string_pretty(&report)?;
    match &a.out {
        Some(p) => fs::write(p, text)?,
        None => println!("{text}"),
    }
    if failed > 0 {
        bail!("{failed} bound checks failed");
    }
    Ok(())
}

fn convergence(a: ConvergenceArgs) -> Result<()> {
    let study = convergence_order(a.solver, &Gmm::bimodal_1d(), &NoiseSchedule::linear_default(), &a.ns, a.states, a.seed)?;
    let mut buf = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record(["n", "error", "slope"])?;
        for (n, e) in &study.rows {
            w.write_record([n.to_string(), e.to_string(), study.slope.to_string()])?;
        }
        w.flush()?;
    }
    write_or_print(a.out.as_deref(), &buf)
}

fn write_or_print(path: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match path {
        Some(p) => fs::write(p, bytes)?,
        None => std::io::stdout().write_all(bytes)?,
    }
    Ok(())
}

fn sweep(a: ConfigArgs) -> Result<()> {
    let cfg = a.load()?;
    let outcome = run_sweep(&cfg)?;
    print!("{}", table1_text(&table1(&outcome.report)));
    println!(
        "{} rows ({} reused) -> {}",
        outcome.report.rows.len(),
        outcome.reused,
        outcome.report_path.display()
    );
    if outcome.is_partial() {
        for f in &outcome.failures {
            eprintln!("cell {} seed {} failed: {}", f.cell.config_id(), f.cell.seed, f.error);
        }
        bail!("{} cells failed; partial report written", outcome.failures.len());
    }
    Ok(())
}

fn correlate_cmd(a: CorrelateArgs) -> Result<()> {
    let report = ExperimentReport::load(&a.report)?;
    let rows = correlate(&report);
    let mut buf = Vec::new();
    correlations_csv(&rows, &mut buf)?;
    write_or_print(a.out.as_deref(), &buf)?;
    if a.out.is_some() {
        print!("{}", correlations_text(&rows));
    }
    Ok(())
}

fn report(a: ReportArgs) -> Result<()> {
    let report = ExperimentReport::load(&a.report)?;
    if report.rows.is_empty() {
        eprintln!("warning: {} has no rows; tables are empty", a.report.display());
    }
    fs::create_dir_all(&a.out_dir)?;
    let t1 = table1(&report);
    table1_csv(&t1, fs::File::create(a.out_dir.join("table1.csv"))?)?;
    let t1_text = table1_text(&t1);
    fs::write(a.out_dir.join("table1.txt"), &t1_text)?;
    let t2 = correlate(&report);
    correlations_csv(&t2, fs::File::create(a.out_dir.join("table2.csv"))?)?;
    let t2_text = correlations_text(&t2);
    fs::write(a.out_dir.join("table2.txt"), &t2_text)?;
    print!("{t1_text}\n{t2_text}");
    Ok(())
}
