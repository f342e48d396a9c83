//! Command-line front end: dataset synthesis, training, evaluation, and
//! the two hyperparameter sweeps, each a subcommand that writes its
//! artifacts under `--out` and exits nonzero on any error.
//!
//! Every command is deterministic given `--seed`; omitting the flag draws
//! a seed from OS entropy and records it in the printed output and the
//! run summary. `SOCREC_THREADS` caps internal parallelism.

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::{rngs::OsRng, Rng};
use socrec::data::{generate_synthetic_dataset, load_dataset, write_dataset, Scene, SynthConfig};
use socrec::metrics::{evaluate_with, MetricReport};
use socrec::model::{sample_predictions, Checkpoint, ModelState, PredictionSet};
use socrec::rng::derive;
use socrec::training::{train, Strategy, TrainConfig, Trainer};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "socrec",
    version,
    about = "Socially-aware pedestrian trajectory forecasting"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic social-force dataset file.
    Synth(SynthArgs),
    /// Train a model and write checkpoint, loss log, and run summary.
    Train(TrainArgs),
    /// Evaluate a checkpoint: metrics plus a per-sample prediction dump.
    Eval(EvalArgs),
    /// Train and evaluate once per social-distance threshold value.
    SweepEpsilon(SweepArgs),
    /// Train and evaluate once per difficulty-threshold value.
    SweepD(SweepArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Generator settings as `key = value` lines (n_scenes, agents_min,
    /// agents_max, speed_min, speed_max, interaction).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset file to write.
    #[arg(long)]
    out: PathBuf,
    /// Generator seed; drawn from entropy when omitted.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    /// Training settings as `key = value` lines; defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training dataset file(s); scenes are concatenated.
    #[arg(long, required = true, num_args = 1..)]
    data: Vec<PathBuf>,
    /// Held-out dataset; when given, the final model is evaluated on it.
    #[arg(long)]
    holdout: Option<PathBuf>,
    /// Output directory for checkpoint, log, and summary.
    #[arg(long)]
    out: PathBuf,
    /// Run seed; overrides the config file, else drawn from entropy.
    #[arg(long)]
    seed: Option<u64>,
    /// Augmentation strategy; overrides the config file.
    #[arg(long)]
    strategy: Option<String>,
    /// Total epochs; overrides the config file.
    #[arg(long)]
    epochs: Option<usize>,
    /// Samples per scene for the holdout evaluation.
    #[arg(long)]
    k: Option<usize>,
    /// Overlap threshold in meters for the holdout evaluation.
    #[arg(long)]
    epsilon: Option<f64>,
    /// Continue training from this checkpoint instead of initializing.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint to evaluate.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset file to evaluate on.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for metrics and the prediction dump.
    #[arg(long)]
    out: PathBuf,
    /// Samples per scene.
    #[arg(long, default_value_t = 20)]
    k: usize,
    /// Overlap threshold in meters; defaults to the checkpoint's value.
    #[arg(long)]
    epsilon: Option<f64>,
    /// Sampling seed; drawn from entropy when omitted.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct SweepArgs {
    /// Comma-separated list of values to sweep over.
    #[arg(long)]
    values: String,
    /// Training settings as `key = value` lines; defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training dataset file(s).
    #[arg(long, required = true, num_args = 1..)]
    data: Vec<PathBuf>,
    /// Held-out dataset every swept model is evaluated on.
    #[arg(long)]
    holdout: PathBuf,
    /// Output directory for the combined sweep CSV.
    #[arg(long)]
    out: PathBuf,
    /// Run seed shared by every point; else drawn from entropy.
    #[arg(long)]
    seed: Option<u64>,
    /// Total epochs per point; overrides the config file.
    #[arg(long)]
    epochs: Option<usize>,
    /// Samples per scene for evaluation.
    #[arg(long, default_value_t = 20)]
    k: usize,
    /// Overlap threshold for evaluation (sweep-d only; sweep-epsilon
    /// evaluates each point at its own swept value).
    #[arg(long)]
    epsilon: Option<f64>,
}

/// Artifact paths a successful command wrote, in creation order.
struct CommandResult {
    artifacts: Vec<PathBuf>,
}

fn main() -> ExitCode {
    match run() {
        Ok(result) => {
            for path in &result.artifacts {
                println!("wrote {}", path.display());
            }
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}

fn run() -> Result<CommandResult> {
    init_thread_cap()?;
    match Cli::parse().command {
        Command::Synth(args) => cmd_synth(&args),
        Command::Train(args) => cmd_train(&args),
        Command::Eval(args) => cmd_eval(&args),
        Command::SweepEpsilon(args) => cmd_sweep(SweepKind::Epsilon, &args),
        Command::SweepD(args) => cmd_sweep(SweepKind::DifficultyThreshold, &args),
    }
}

/// Applies the `SOCREC_THREADS` cap before any parallel work starts.
fn init_thread_cap() -> Result<()> {
    let Ok(raw) = std::env::var("SOCREC_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|n| *n >= 1)
        .with_context(|| format!("SOCREC_THREADS must be a positive integer, got `{raw}`"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .context("installing the global thread pool")?;
    Ok(())
}

fn resolve_seed(flag: Option<u64>) -> u64 {
    flag.unwrap_or_else(|| OsRng.gen())
}

fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn load_scenes(paths: &[PathBuf]) -> Result<Vec<Scene>> {
    let mut scenes = Vec::new();
    for path in paths {
        let text = read_file(path)?;
        let mut batch = load_dataset(&text).with_context(|| format!("parsing {}", path.display()))?;
        scenes.append(&mut batch);
    }
    Ok(scenes)
}

fn file_label(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".to_string())
}

// ---------------------------------------------------------------- synth

fn parse_synth_config(text: &str) -> Result<SynthConfig> {
    fn num<T: std::str::FromStr>(key: &str, value: &str, line: usize) -> Result<T> {
        value
            .parse()
            .ok()
            .with_context(|| format!("config line {line}: invalid value `{value}` for `{key}`"))
    }
    let mut cfg = SynthConfig::default();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let Some((key, value)) = body.split_once('=') else {
            bail!("config line {line}: expected `key = value`, got `{body}`");
        };
        let (key, value) = (key.trim(), value.trim());
        match key {
            "n_scenes" => cfg.n_scenes = num(key, value, line)?,
            "agents_min" => cfg.agents_min = num(key, value, line)?,
            "agents_max" => cfg.agents_max = num(key, value, line)?,
            "speed_min" => cfg.speed_min = num(key, value, line)?,
            "speed_max" => cfg.speed_max = num(key, value, line)?,
            "interaction" => cfg.interaction = num(key, value, line)?,
            _ => bail!("config line {line}: unknown key `{key}`"),
        }
    }
    ensure!(cfg.n_scenes >= 1, "n_scenes must be positive");
    ensure!(
        cfg.agents_min >= 1 && cfg.agents_min <= cfg.agents_max,
        "agent range {}..{} is invalid",
        cfg.agents_min,
        cfg.agents_max
    );
    ensure!(
        cfg.speed_min > 0.0 && cfg.speed_min <= cfg.speed_max,
        "speed range {}..{} is invalid",
        cfg.speed_min,
        cfg.speed_max
    );
    ensure!(
        cfg.interaction.is_finite() && cfg.interaction >= 0.0,
        "interaction must be a non-negative number"
    );
    Ok(cfg)
}

fn cmd_synth(args: &SynthArgs) -> Result<CommandResult> {
    let cfg = match &args.config {
        Some(path) => parse_synth_config(&read_file(path)?)?,
        None => SynthConfig::default(),
    };
    let seed = resolve_seed(args.seed);
    let scenes = generate_synthetic_dataset(&cfg, seed);
    write_file(&args.out, &write_dataset(&scenes))?;
    let agents: usize = scenes.iter().map(Scene::n_agents).sum();
    println!(
        "generated {} scenes ({} agents total) with seed {}",
        scenes.len(),
        agents,
        seed
    );
    Ok(CommandResult {
        artifacts: vec![args.out.clone()],
    })
}

// ---------------------------------------------------------------- train

/// Whether the config text explicitly assigns `seed`, so entropy is only
/// used when neither the flag nor the file chose one.
fn config_sets_seed(text: &str) -> bool {
    text.lines().any(|raw| {
        let body = raw.split('#').next().unwrap_or("").trim();
        matches!(body.split_once('='), Some((key, _)) if key.trim() == "seed")
    })
}

fn load_train_config(args_config: &Option<PathBuf>) -> Result<(TrainConfig, bool)> {
    match args_config {
        Some(path) => {
            let text = read_file(path)?;
            let cfg = TrainConfig::parse(&text)
                .with_context(|| format!("parsing {}", path.display()))?;
            Ok((cfg, config_sets_seed(&text)))
        }
        None => Ok((TrainConfig::default(), false)),
    }
}

fn cmd_train(args: &TrainArgs) -> Result<CommandResult> {
    let (mut cfg, seeded_by_file) = load_train_config(&args.config)?;
    if let Some(name) = &args.strategy {
        cfg.strategy = Strategy::parse(name)
            .with_context(|| format!("unknown strategy `{name}`"))?;
    }
    if let Some(epochs) = args.epochs {
        cfg.n_epochs = epochs;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    } else if !seeded_by_file {
        cfg.seed = OsRng.gen();
    }
    cfg.validate()?;

    let scenes = load_scenes(&args.data)?;
    fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;

    let mut trainer = match &args.resume {
        Some(path) => {
            let ck = Checkpoint::from_json(&read_file(path)?)
                .with_context(|| format!("loading checkpoint {}", path.display()))?;
            Trainer::<f32>::resume(cfg.clone(), &ck)
                .with_context(|| format!("resuming from {}", path.display()))?
        }
        None => Trainer::<f32>::new(cfg.clone())?,
    };
    println!(
        "training {} scenes for {} epochs (strategy {}, seed {})",
        scenes.len(),
        cfg.n_epochs.saturating_sub(trainer.state.epoch),
        cfg.strategy.as_str(),
        cfg.seed
    );
    if cfg.strategy == Strategy::PretrainedRecon && trainer.state.epoch == 0 {
        println!(
            "pretraining the reconstruction branch for {} epochs first",
            cfg.n_epochs
        );
    }
    while trainer.state.epoch < cfg.n_epochs {
        let losses = trainer.run_epoch(&scenes)?;
        println!(
            "epoch {:>4}/{}: total {:.6} (forecast {:.6}, recon {:.6}, social {:.6})",
            trainer.state.epoch,
            cfg.n_epochs,
            losses.total,
            losses.l_f,
            losses.l_r,
            losses.l_soc_f + losses.l_soc_r
        );
    }

    let ck_path = args.out.join("checkpoint.json");
    trainer.report.checkpoint_path = Some(ck_path.display().to_string());
    write_file(&ck_path, &trainer.checkpoint().to_json())?;
    let log_path = args.out.join("training_log.csv");
    write_file(&log_path, &trainer.report.csv_log())?;
    let summary_path = args.out.join("run_summary.json");
    write_file(&summary_path, &trainer.report.summary_json(&cfg))?;
    let mut artifacts = vec![ck_path, log_path, summary_path];

    if let Some(holdout) = &args.holdout {
        let eval_scenes = load_scenes(std::slice::from_ref(holdout))?;
        let k = args.k.unwrap_or(20);
        let epsilon = args.epsilon.unwrap_or(cfg.hyper.epsilon);
        let (report, _) = run_eval(
            &trainer.state,
            &file_label(holdout),
            &eval_scenes,
            k,
            epsilon,
            cfg.seed,
        )?;
        artifacts.extend(write_metric_files(&args.out, &report)?);
        print_metrics(&report);
    }
    Ok(CommandResult { artifacts })
}

// ----------------------------------------------------------------- eval

/// Samples every scene once and reuses the draws for both the metric
/// report and the prediction dump.
fn run_eval(
    state: &ModelState<f32>,
    label: &str,
    scenes: &[Scene],
    k: usize,
    epsilon: f64,
    seed: u64,
) -> Result<(MetricReport, Vec<PredictionSet>)> {
    ensure!(k >= 1, "--k must be at least 1");
    let samples: Vec<PredictionSet> = scenes
        .iter()
        .enumerate()
        .map(|(idx, scene)| {
            let mut rng = derive(seed, "eval-scene", idx as u64);
            sample_predictions(state, scene, k, &mut rng)
                .with_context(|| format!("sampling scene {idx}"))
        })
        .collect::<Result<_>>()?;
    let report = evaluate_with(
        |idx, _| Ok(samples[idx].clone()),
        label,
        scenes,
        epsilon,
    )?;
    Ok((report, samples))
}

fn write_metric_files(out: &Path, report: &MetricReport) -> Result<Vec<PathBuf>> {
    let json_path = out.join("metrics.json");
    write_file(
        &json_path,
        &serde_json::to_string_pretty(report).context("serializing the metric report")?,
    )?;
    let csv_path = out.join("metrics.csv");
    write_file(
        &csv_path,
        &format!("{}\n{}\n", MetricReport::csv_header(), report.csv_row()),
    )?;
    Ok(vec![json_path, csv_path])
}

fn prediction_dump(scenes: &[Scene], samples: &[PredictionSet]) -> String {
    let mut out = String::from("scene_id,ped_id,sample_k,t,x,y\n");
    for (idx, (scene, preds)) in scenes.iter().zip(samples).enumerate() {
        for (k, sample) in preds.samples.iter().enumerate() {
            for (a, traj) in sample.iter().enumerate() {
                for (t, p) in traj.iter().enumerate() {
                    let _ = writeln!(
                        out,
                        "{idx},{},{k},{t},{:.6},{:.6}",
                        scene.ped_ids[a], p[0], p[1]
                    );
                }
            }
        }
    }
    out
}

fn print_metrics(report: &MetricReport) {
    let s = &report.sampled;
    println!(
        "[{}] K={}: ADE min {:.4} / mean {:.4}, FDE min {:.4} / mean {:.4}, NLL {}, overlaps {} ({:.3}%)",
        report.dataset,
        s.k,
        s.ade_min,
        s.ade_mean,
        s.fde_min,
        s.fde_mean,
        s.kde_nll
            .map(|v| format!("{v:.4}"))
            .unwrap_or_else(|| "n/a".into()),
        s.overlap_count,
        s.overlap_pct
    );
    let m = &report.mode_only;
    println!(
        "[{}] mode sample: ADE {:.4}, FDE {:.4}, overlaps {} ({:.3}%)",
        report.dataset, m.ade_mean, m.fde_mean, m.overlap_count, m.overlap_pct
    );
}

fn cmd_eval(args: &EvalArgs) -> Result<CommandResult> {
    let ck = Checkpoint::from_json(&read_file(&args.checkpoint)?)
        .with_context(|| format!("loading checkpoint {}", args.checkpoint.display()))?;
    let state = ModelState::<f32>::from_checkpoint(&ck)
        .with_context(|| format!("loading checkpoint {}", args.checkpoint.display()))?;
    let scenes = load_scenes(std::slice::from_ref(&args.data))?;
    let seed = resolve_seed(args.seed);
    let epsilon = args.epsilon.unwrap_or(ck.hyper.epsilon);
    fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;

    let (report, samples) = run_eval(
        &state,
        &file_label(&args.data),
        &scenes,
        args.k,
        epsilon,
        seed,
    )?;
    println!("evaluating with seed {seed}");
    print_metrics(&report);

    let mut artifacts = write_metric_files(&args.out, &report)?;
    let dump_path = args.out.join("predictions.csv");
    write_file(&dump_path, &prediction_dump(&scenes, &samples))?;
    artifacts.push(dump_path);
    Ok(CommandResult { artifacts })
}

// ---------------------------------------------------------------- sweeps

#[derive(Clone, Copy, PartialEq)]
enum SweepKind {
    Epsilon,
    DifficultyThreshold,
}

impl SweepKind {
    fn name(self) -> &'static str {
        match self {
            SweepKind::Epsilon => "epsilon",
            SweepKind::DifficultyThreshold => "d_threshold",
        }
    }
}

fn cmd_sweep(kind: SweepKind, args: &SweepArgs) -> Result<CommandResult> {
    let values: Vec<f64> = args
        .values
        .split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .with_context(|| format!("invalid sweep value `{}`", v.trim()))
        })
        .collect::<Result<_>>()?;
    ensure!(!values.is_empty(), "--values must list at least one number");

    let (mut cfg, seeded_by_file) = load_train_config(&args.config)?;
    if let Some(epochs) = args.epochs {
        cfg.n_epochs = epochs;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    } else if !seeded_by_file {
        cfg.seed = OsRng.gen();
    }

    let train_scenes = load_scenes(&args.data)?;
    let eval_scenes = load_scenes(std::slice::from_ref(&args.holdout))?;
    let label = file_label(&args.holdout);
    fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;

    let mut csv = format!("{},{}\n", kind.name(), MetricReport::csv_header());
    for &value in &values {
        let mut point = cfg.clone();
        match kind {
            SweepKind::Epsilon => point.hyper.epsilon = value,
            SweepKind::DifficultyThreshold => point.hyper.d_threshold = value,
        }
        point
            .validate()
            .with_context(|| format!("sweep value {value} yields an invalid config"))?;
        println!("sweep {} = {value} (seed {})", kind.name(), point.seed);
        let (state, _) = train::<f32>(&point, &train_scenes)?;
        let eval_epsilon = match kind {
            SweepKind::Epsilon => value,
            SweepKind::DifficultyThreshold => args.epsilon.unwrap_or(point.hyper.epsilon),
        };
        let (report, _) = run_eval(&state, &label, &eval_scenes, args.k, eval_epsilon, point.seed)?;
        print_metrics(&report);
        let _ = writeln!(csv, "{value},{}", report.csv_row());
    }

    let csv_path = args.out.join(format!("sweep_{}.csv", kind.name()));
    write_file(&csv_path, &csv)?;
    Ok(CommandResult {
        artifacts: vec![csv_path],
    })
}
