//! Command implementations.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::Serialize;
use tabicl::infer::metrics::{evaluate, Metrics};
use tabicl::infer::table::{prepare_table, read_csv, write_predictions, PreparedTable};
use tabicl::infer::{ensemble_predict, EnsembleConfig, MemoryModel};
use tabicl::prior::io::{write_dataset, write_scatter_csv, Manifest, ManifestEntry};
use tabicl::prior::sample_prior_batch;
use tabicl::tensor::Tensor;
use tabicl::train::{checkpoint, run_curriculum, CurriculumConfig, LossRecord, StepOutcome};
use tabicl::{seed, ModelConfig, TabIcl};

use crate::config::{pick, resolve_seed, sidecar_path, FileConfig, ProfileName, RunConfig};
use crate::exit::UsageError;
use crate::timing::{self, fit_time_law, median, parse_sizes, TimeLaw, TimingRecord, GAMMA};

const GEN_CHUNK: usize = 64;
pub const DEFAULT_TEST_FRACTION: f64 = 0.2;
pub const DEFAULT_REPEATS: usize = 3;
pub const MIN_TIMING_POINTS: usize = 4;

#[derive(Debug, Parser)]
#[command(name = "tabicl", version, about = "Tabular in-context learning: priors, pretraining and prediction")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Root seed; falls back to the config file, then TABICL_SEED, then 0.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// JSON file with defaults for any flag; flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads; 1 gives a fully deterministic schedule.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample synthetic datasets from the prior into TICL files.
    GenPriors(GenPriorsArgs),
    /// Run the pretraining curriculum.
    Pretrain(PretrainArgs),
    /// Predict the rows of a CSV whose target cell is empty.
    Predict(PredictArgs),
    /// Hold out labeled rows and report accuracy, AUC and log loss.
    Eval(EvalArgs),
    /// Time forward passes over table sizes and fit the runtime law.
    BenchTime(BenchTimeArgs),
}

#[derive(Debug, Args)]
pub struct GenPriorsArgs {
    #[arg(long)]
    pub count: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub min_samples: Option<usize>,
    #[arg(long)]
    pub max_samples: Option<usize>,
    #[arg(long)]
    pub min_features: Option<usize>,
    #[arg(long)]
    pub max_features: Option<usize>,
    #[arg(long)]
    pub max_classes: Option<usize>,
    /// Also write `x0,x1,label` CSVs of the first two features.
    #[arg(long)]
    pub scatter: bool,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[arg(long, value_enum)]
    pub profile: Option<ProfileName>,
    /// Output directory for checkpoints, loss log and run record.
    #[arg(long)]
    pub out: PathBuf,
    /// Print a progress line every this many steps (0 disables).
    #[arg(long, default_value_t = 10)]
    pub log_every: u64,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Number of ensemble members.
    #[arg(long)]
    pub ensemble: Option<usize>,
    /// Memory budget in MB used to chunk column and row passes.
    #[arg(long)]
    pub memory_budget: Option<f64>,
    /// JSON file with fitted memory coefficients.
    #[arg(long)]
    pub memory_model: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub target: String,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub target: String,
    /// Fraction of rows per class held out for scoring.
    #[arg(long)]
    pub test_fraction: Option<f64>,
    /// Metrics JSON path; printed to stdout either way.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Args)]
pub struct BenchTimeArgs {
    /// Comma-separated `NxM` sizes, at least four.
    #[arg(long)]
    pub sizes: String,
    /// Checkpoint to time; a freshly initialized model of the profile otherwise.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub profile: Option<ProfileName>,
    /// Timed runs per size after one discarded warm-up.
    #[arg(long)]
    pub repeats: Option<usize>,
    /// Timing CSV; the fit goes to `<out>.fit.json`.
    #[arg(long)]
    pub out: PathBuf,
}

/// Shared state resolved before any command runs.
pub struct RunContext {
    pub file: FileConfig,
    pub seed: u64,
    pub workers: Option<usize>,
}

pub fn resolve(global: &GlobalArgs) -> anyhow::Result<RunContext> {
    let file = match &global.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    let seed = resolve_seed(global.seed, file.seed)?;
    let workers = global.workers.or(file.workers);
    Ok(RunContext { file, seed, workers })
}

/// Runs a parsed command line.
pub fn run(cli: Cli) -> anyhow::Result<()> {
    let ctx = resolve(&cli.global)?;
    if ctx.workers == Some(0) {
        return Err(UsageError("--workers must be at least 1".into()).into());
    }
    let body = || match &cli.command {
        Command::GenPriors(a) => gen_priors(&ctx, a),
        Command::Pretrain(a) => pretrain(&ctx, a),
        Command::Predict(a) => predict(&ctx, a),
        Command::Eval(a) => eval(&ctx, a),
        Command::BenchTime(a) => bench_time(&ctx, a),
    };
    match ctx.workers {
        Some(w) => rayon::ThreadPoolBuilder::new()
            .num_threads(w)
            .build()
            .context("building worker pool")?
            .install(body),
        None => body(),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

pub fn gen_priors(ctx: &RunContext, a: &GenPriorsArgs) -> anyhow::Result<()> {
    if a.count == 0 {
        return Err(UsageError("--count must be at least 1".into()).into());
    }
    let mut prior = ctx.file.prior.clone().unwrap_or_default();
    prior.seed = ctx.seed;
    prior.min_samples = a.min_samples.unwrap_or(prior.min_samples);
    prior.max_samples = a.max_samples.unwrap_or(prior.max_samples);
    prior.min_features = a.min_features.unwrap_or(prior.min_features);
    prior.max_features = a.max_features.unwrap_or(prior.max_features);
    prior.max_classes = a.max_classes.unwrap_or(prior.max_classes);
    prior.validate().map_err(|e| UsageError(e.to_string()))?;
    let run = RunConfig::new("gen-priors", ctx.seed, ProfileName::Desk, ctx.workers).with_path("out", &a.out);
    run.validate()?;
    create_dir(&a.out)?;
    let mut entries = Vec::with_capacity(a.count);
    let mut start = 0u64;
    while (start as usize) < a.count {
        let size = GEN_CHUNK.min(a.count - start as usize);
        for (offset, ds) in sample_prior_batch(size, &prior, start, None)?.into_iter().enumerate() {
            let index = start + offset as u64;
            let file = format!("prior_{index:06}.ticl");
            write_dataset(BufWriter::new(File::create(a.out.join(&file))?), &ds)?;
            if a.scatter {
                write_scatter_csv(File::create(a.out.join(format!("prior_{index:06}.csv")))?, &ds)?;
            }
            entries.push(ManifestEntry {
                index,
                file,
                seed: ds.seed,
                kind: ds.kind,
                n: ds.n(),
                m: ds.m(),
                classes: ds.classes,
            });
        }
        start += size as u64;
    }
    let manifest = Manifest::new(prior, entries, Some(run.to_json()));
    write_json(&a.out.join("manifest.json"), &manifest)?;
    eprintln!(
        "wrote {} datasets to {} (tree fraction {:.3})",
        manifest.count,
        a.out.display(),
        manifest.tree_fraction
    );
    Ok(())
}

/// Curriculum from the config file if present, else the named profile.
pub fn curriculum_for(ctx: &RunContext, profile: ProfileName) -> CurriculumConfig {
    let mut c = ctx
        .file
        .curriculum
        .clone()
        .unwrap_or_else(|| CurriculumConfig::for_profile(profile.into(), ctx.seed));
    c.seed = ctx.seed;
    c
}

#[derive(Serialize)]
struct PretrainRecord<'a> {
    run: &'a RunConfig,
    curriculum: &'a CurriculumConfig,
    stages: &'a [tabicl::train::StageReport],
    steps: usize,
    seconds: f64,
}

pub fn pretrain(ctx: &RunContext, a: &PretrainArgs) -> anyhow::Result<()> {
    let profile = pick(a.profile, ctx.file.profile, ProfileName::Desk);
    let curriculum = curriculum_for(ctx, profile);
    curriculum.validate().map_err(|e| UsageError(e.to_string()))?;
    let run = RunConfig::new("pretrain", ctx.seed, profile, ctx.workers).with_path("out", &a.out);
    run.validate()?;
    create_dir(&a.out)?;
    let started = Instant::now();
    let log_every = a.log_every;
    let mut progress = |r: &LossRecord, o: &StepOutcome| {
        if log_every > 0 && (r.step + 1) % log_every == 0 {
            eprintln!(
                "stage {} step {} lr {:.3e} loss {:.4} grad {:.3}{} [{:.0}s]",
                r.stage,
                r.step + 1,
                r.lr,
                r.loss,
                o.grad_norm,
                if o.skipped { " skipped" } else { "" },
                started.elapsed().as_secs_f64()
            );
        }
    };
    let result = run_curriculum(&curriculum, Some(&a.out), run.to_json(), &mut progress)?;
    let model_path = a.out.join("model.ckpt");
    checkpoint::save(&model_path, &result.model, serde_json::json!({ "run": run.to_json(), "final": true }))?;
    let record = PretrainRecord {
        run: &run,
        curriculum: &curriculum,
        stages: &result.stages,
        steps: result.log.len(),
        seconds: started.elapsed().as_secs_f64(),
    };
    write_json(&a.out.join("run.json"), &record)?;
    for s in &result.stages {
        eprintln!(
            "stage {}: {} steps ({} skipped), held-out loss {:.4} -> {:.4}",
            s.stage, s.steps, s.skipped_steps, s.heldout_before, s.heldout_after
        );
    }
    eprintln!("wrote {}", model_path.display());
    Ok(())
}

fn ensemble_config(ctx: &RunContext, a: &ModelArgs) -> anyhow::Result<EnsembleConfig> {
    let memory_model = match &a.memory_model {
        Some(p) => MemoryModel::load(p)?,
        None => ctx.file.memory_model.unwrap_or_default(),
    };
    Ok(EnsembleConfig {
        members: pick(a.ensemble, ctx.file.ensemble, tabicl::infer::ensemble::DEFAULT_MEMBERS),
        seed: ctx.seed,
        memory_budget_mb: a.memory_budget.or(ctx.file.memory_budget_mb),
        memory_model,
    })
}

fn model_run(command: &str, ctx: &RunContext, a: &ModelArgs, ens: &EnsembleConfig) -> RunConfig {
    let mut run = RunConfig::new(command, ctx.seed, ctx.file.profile.unwrap_or_default(), ctx.workers)
        .with_path("checkpoint", &a.checkpoint);
    if let Some(p) = &a.memory_model {
        run = run.with_path("memory_model", p);
    }
    run.ensemble = Some(ens.members);
    run.memory_budget_mb = ens.memory_budget_mb;
    run
}

fn read_table(path: &Path) -> anyhow::Result<tabicl::infer::table::RawTable> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    read_csv(std::io::BufReader::new(file)).with_context(|| format!("reading {}", path.display()))
}

fn load_model(path: &Path) -> anyhow::Result<TabIcl<f32>> {
    let (model, _) = checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    Ok(model)
}

fn run_ensemble(model: &TabIcl<f32>, t: &PreparedTable, ens: &EnsembleConfig) -> anyhow::Result<tabicl::ClassProbabilities> {
    Ok(ensemble_predict(model, &t.x, &t.y_train, t.class_names.len(), ens)?)
}

pub fn predict(ctx: &RunContext, a: &PredictArgs) -> anyhow::Result<()> {
    let ens = ensemble_config(ctx, &a.model)?;
    let run = model_run("predict", ctx, &a.model, &ens)
        .with_path("input", &a.input)
        .with_path("out", &a.out);
    run.validate()?;
    let raw = read_table(&a.input)?;
    let table = prepare_table(&raw, &a.target, None)?;
    if table.test_rows.is_empty() {
        return Err(UsageError(format!("no rows with an empty {:?} cell to predict", a.target)).into());
    }
    let model = load_model(&a.model.checkpoint)?;
    let probs = run_ensemble(&model, &table, &ens)?;
    let mut w = BufWriter::new(File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?);
    write_predictions(&mut w, &table.test_rows, &probs, &table.class_names)?;
    w.flush()?;
    write_json(&sidecar_path(&a.out), &run)?;
    eprintln!("wrote {} predictions to {}", table.test_rows.len(), a.out.display());
    Ok(())
}

/// Holds out `round(fraction * count)` rows of every class, keeping at least
/// one row of each class for training.
pub fn stratified_holdout(labels: &[String], fraction: f64, seed: u64) -> Vec<usize> {
    let mut classes: Vec<&str> = labels.iter().map(String::as_str).collect();
    classes.sort_unstable();
    classes.dedup();
    let mut rng = tabicl::seed::rng(seed::derive_named(seed, "eval-split"));
    let mut test = Vec::new();
    for c in classes {
        let mut rows: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        rows.shuffle(&mut rng);
        let take = ((fraction * rows.len() as f64).round() as usize).min(rows.len() - 1);
        test.extend_from_slice(&rows[..take]);
    }
    test.sort_unstable();
    test
}

#[derive(Serialize)]
struct EvalRecord<'a> {
    #[serde(flatten)]
    metrics: Metrics,
    n_train: usize,
    n_test: usize,
    classes: usize,
    run: &'a RunConfig,
}

pub fn eval(ctx: &RunContext, a: &EvalArgs) -> anyhow::Result<()> {
    let fraction = pick(a.test_fraction, ctx.file.test_fraction, DEFAULT_TEST_FRACTION);
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(UsageError(format!("--test-fraction {fraction} must lie in (0, 1)")).into());
    }
    let ens = ensemble_config(ctx, &a.model)?;
    let mut run = model_run("eval", ctx, &a.model, &ens).with_path("input", &a.input);
    if let Some(out) = &a.out {
        run = run.with_path("out", out);
    }
    run.validate()?;
    let raw = read_table(&a.input)?;
    let t = raw
        .header
        .iter()
        .position(|h| h == &a.target)
        .ok_or_else(|| tabicl::Error::Input(format!("no column named {:?}", a.target)))?;
    let labels: Vec<String> = raw.rows.iter().map(|r| r[t].trim().to_string()).collect();
    if let Some(i) = labels.iter().position(|l| l.is_empty()) {
        return Err(tabicl::Error::Parse {
            row: i + 2,
            column: t + 1,
            message: "eval needs a label on every row".into(),
        }
        .into());
    }
    let test_rows = stratified_holdout(&labels, fraction, ctx.seed);
    if test_rows.is_empty() {
        return Err(tabicl::Error::Input("test fraction leaves no rows to score".into()).into());
    }
    let table = prepare_table(&raw, &a.target, Some(&test_rows))?;
    let y_test: Vec<usize> = table
        .y_test
        .iter()
        .map(|y| y.ok_or_else(|| tabicl::Error::Input("test label unseen in train rows".into())))
        .collect::<Result<_, _>>()?;
    let model = load_model(&a.model.checkpoint)?;
    let probs = run_ensemble(&model, &table, &ens)?;
    let record = EvalRecord {
        metrics: evaluate(&probs, &y_test)?,
        n_train: table.train_rows.len(),
        n_test: table.test_rows.len(),
        classes: table.class_names.len(),
        run: &run,
    };
    if let Some(out) = &a.out {
        write_json(out, &record)?;
    }
    println!("{}", serde_json::to_string_pretty(&record)?);
    Ok(())
}

/// A random table of `n` rows (a fifth of them, at least one, held out) with
/// two balanced classes.
pub fn timing_table(n: usize, m: usize, seed: u64) -> (Tensor<f32>, Vec<usize>) {
    let mut rng = tabicl::seed::rng(seed);
    let x = Tensor::from_fn(vec![n, m], |_| rng.random_range(-2.0f32..2.0));
    let n_test = (n / 5).max(1);
    let y = (0..n - n_test).map(|i| i % 2).collect();
    (x, y)
}

/// Median wall-clock seconds of `repeats` forward passes after one warm-up.
pub fn time_forward(model: &TabIcl<f32>, n: usize, m: usize, repeats: usize, seed: u64) -> anyhow::Result<f64> {
    let (x, y) = timing_table(n, m, seed);
    model.predict_dataset(&x, &y, 2)?;
    let mut runs = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t = Instant::now();
        std::hint::black_box(model.predict_dataset(&x, &y, 2)?);
        runs.push(t.elapsed().as_secs_f64());
    }
    Ok(median(&runs))
}

#[derive(Serialize)]
struct FitRecord<'a> {
    #[serde(flatten)]
    law: TimeLaw,
    msle: f64,
    residuals: Vec<f64>,
    run: &'a RunConfig,
}

pub fn write_timings(path: &Path, records: &[TimingRecord]) -> anyhow::Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    writeln!(w, "n,m,x,seconds")?;
    for r in records {
        writeln!(w, "{},{},{},{:.9}", r.n, r.m, r.x, r.seconds)?;
    }
    w.flush()?;
    Ok(())
}

pub fn fit_path(out: &Path) -> PathBuf {
    out.with_extension("fit.json")
}

pub fn bench_time(ctx: &RunContext, a: &BenchTimeArgs) -> anyhow::Result<()> {
    let sizes = parse_sizes(&a.sizes).map_err(UsageError)?;
    if sizes.len() < MIN_TIMING_POINTS {
        return Err(UsageError(format!("need at least {MIN_TIMING_POINTS} sizes, got {}", sizes.len())).into());
    }
    let repeats = pick(a.repeats, ctx.file.repeats, DEFAULT_REPEATS);
    if repeats == 0 {
        return Err(UsageError("--repeats must be at least 1".into()).into());
    }
    let profile = pick(a.profile, ctx.file.profile, ProfileName::Desk);
    let mut run = RunConfig::new("bench-time", ctx.seed, profile, ctx.workers).with_path("out", &a.out);
    let model = match &a.checkpoint {
        Some(p) => {
            run = run.with_path("checkpoint", p);
            load_model(p)?
        }
        None => {
            let config = match profile {
                ProfileName::Paper => ModelConfig::paper(),
                ProfileName::Desk => ModelConfig::desk(),
            };
            TabIcl::new(config, seed::derive_named(ctx.seed, "init"))?
        }
    };
    run.validate()?;
    let mut records = Vec::with_capacity(sizes.len());
    for (i, &(n, m)) in sizes.iter().enumerate() {
        let seconds = time_forward(&model, n, m, repeats, seed::derive(ctx.seed, i as u64))?;
        eprintln!("n={n} m={m} x={:.3e} {seconds:.4}s", timing::complexity(n, m));
        records.push(TimingRecord::new(n, m, seconds));
    }
    write_timings(&a.out, &records)?;
    write_json(&sidecar_path(&a.out), &run)?;
    let law = fit_time_law(&records, GAMMA).map_err(|e| tabicl::Error::Degenerate(e))?;
    let fit = FitRecord {
        law,
        msle: law.msle(&records),
        residuals: records.iter().map(|r| law.log_residual(r)).collect(),
        run: &run,
    };
    write_json(&fit_path(&a.out), &fit)?;
    println!("alpha {:.6e} beta {:.6e} gamma {GAMMA} msle {:.4e}", law.alpha, law.beta, fit.msle);
    Ok(())
}
