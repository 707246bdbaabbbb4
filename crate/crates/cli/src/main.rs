//! `ross`: data generation, training, evaluation and analysis runs.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ross::autograd::Scalar;
use ross::config::{ExperimentConfig, Precision};
use ross::container::Container;
use ross::experiment::{
    ab_run, analysis_samples, attention_study, images_tensor, load_or_generate, matched_seeds, reconstruction_study,
    saliency_study, saliency_tensor, write_arrays,
};
use ross::image::heatmap;
use ross::objectives::ObjectiveKind;
use ross::schedules::{make_beta_schedule_with, ScheduleKind, SigmaMode};
use ross::synthdata::{Dataset, DatasetSizes, Split};
use ross::trainer::Trainer;
use ross::{Result, RossError};

#[derive(Debug, Parser)]
#[command(name = "ross", version, about = "Reconstructive visual supervision experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic dataset directory.
    GenData(GenDataArgs),
    /// Train one model from an experiment config.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Compare attention focus of two checkpoints and render saliency maps.
    Analyze(AnalyzeArgs),
    /// Rebuild test images from a checkpoint's visual outputs.
    Reconstruct(ReconstructArgs),
    /// Noise schedule utilities.
    Schedules {
        #[command(subcommand)]
        command: SchedulesCommand,
    },
    /// Train several objectives with matched seeds and tabulate accuracies.
    AbRun(AbRunArgs),
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// Experiment config (TOML); defaults are used when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.seed=3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        match &self.config {
            Some(path) => ExperimentConfig::load(path, &self.overrides),
            None => ExperimentConfig::from_toml("", &self.overrides),
        }
    }
}

#[derive(Debug, Args)]
struct GenDataArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Output directory (default: `data.dir` of the config).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    train: Option<usize>,
    #[arg(long)]
    val: Option<usize>,
    #[arg(long)]
    test: Option<usize>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// `train`, `val` or `test`.
    #[arg(long, default_value = "test")]
    split: String,
    /// Write the report here as well as to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AnalyzeArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Checkpoint of the baseline run (sample `a` of the report).
    #[arg(long)]
    baseline: PathBuf,
    /// Checkpoint of the reconstructive run (sample `b`).
    #[arg(long)]
    ross: PathBuf,
    /// Output directory (default: `<output_dir>/analysis`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ReconstructArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Number of test images (default: `analysis.reconstruct_images`).
    #[arg(long)]
    count: Option<usize>,
    /// Sampling seed (default: `analysis.reconstruct_seed`).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (default: `<output_dir>/reconstruct`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum SchedulesCommand {
    /// Print `t,beta,alpha,alpha_bar,sigma` rows as CSV.
    Dump(DumpArgs),
}

#[derive(Debug, Args)]
struct DumpArgs {
    /// linear, scaled_linear, glide_softmax or geodiff_sigmoid.
    #[arg(long)]
    kind: String,
    #[arg(long)]
    steps: usize,
    #[arg(long)]
    beta_min: Option<f64>,
    #[arg(long)]
    beta_max: Option<f64>,
    /// `beta` or `posterior`.
    #[arg(long, default_value = "beta")]
    sigma: String,
    /// Write the CSV to a file instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AbRunArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Comma-separated objectives; the first is the reference arm.
    #[arg(long, default_value = "none,d_latent", value_delimiter = ',')]
    variants: Vec<String>,
    /// Number of matched seeds, counted up from `train.seed`.
    #[arg(long, default_value_t = 3)]
    seeds: usize,
    /// Output directory (default: `<output_dir>/ab`).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => {
            let cfg = a.config.load()?;
            match cfg.train.precision {
                Precision::F32 => train::<f32>(&cfg, a.resume.as_deref()),
                Precision::F64 => train::<f64>(&cfg, a.resume.as_deref()),
            }
        }
        Command::Eval(a) => {
            let cfg = a.config.load()?;
            match checkpoint_precision(&a.checkpoint)? {
                Precision::F32 => eval::<f32>(&cfg, &a),
                Precision::F64 => eval::<f64>(&cfg, &a),
            }
        }
        Command::Analyze(a) => {
            let cfg = a.config.load()?;
            match checkpoint_precision(&a.ross)? {
                Precision::F32 => analyze::<f32>(&cfg, &a),
                Precision::F64 => analyze::<f64>(&cfg, &a),
            }
        }
        Command::Reconstruct(a) => {
            let cfg = a.config.load()?;
            match checkpoint_precision(&a.checkpoint)? {
                Precision::F32 => reconstruct::<f32>(&cfg, &a),
                Precision::F64 => reconstruct::<f64>(&cfg, &a),
            }
        }
        Command::Schedules {
            command: SchedulesCommand::Dump(a),
        } => dump_schedule(&a),
        Command::AbRun(a) => {
            let cfg = a.config.load()?;
            match cfg.train.precision {
                Precision::F32 => ab::<f32>(&cfg, &a),
                Precision::F64 => ab::<f64>(&cfg, &a),
            }
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| RossError::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| RossError::io(path, e))
}

fn write_json<S: serde::Serialize>(path: &Path, value: &S) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

fn print_json<S: serde::Serialize>(value: &S) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn checkpoint_precision(path: &Path) -> Result<Precision> {
    let c = Container::load(path)?.expect_kind("checkpoint", path)?;
    match c.meta["precision"].as_str() {
        Some("f64") => Ok(Precision::F64),
        Some("f32") => Ok(Precision::F32),
        _ => Err(RossError::Format {
            path: path.to_path_buf(),
            msg: "checkpoint does not record its precision".into(),
        }),
    }
}

fn parse_split(name: &str) -> Result<Split> {
    match name {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        other => Err(RossError::UnknownKind {
            what: "split",
            value: other.to_string(),
        }),
    }
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let cfg = a.config.load()?;
    let seed = a.seed.unwrap_or(cfg.data.seed);
    let sizes = DatasetSizes {
        train: a.train.unwrap_or(cfg.data.sizes.train),
        val: a.val.unwrap_or(cfg.data.sizes.val),
        test: a.test.unwrap_or(cfg.data.sizes.test),
    };
    let dir = a.out.unwrap_or(cfg.data.dir);
    let data = Dataset::generate(seed, sizes);
    data.write_dir(&dir)?;
    eprintln!(
        "wrote {} train / {} val / {} test samples to {}",
        sizes.train,
        sizes.val,
        sizes.test,
        dir.display()
    );
    Ok(())
}

fn train<T: Scalar>(cfg: &ExperimentConfig, resume: Option<&Path>) -> Result<()> {
    create_dir(&cfg.output_dir)?;
    write_text(&cfg.output_dir.join("config.toml"), &cfg.to_toml()?)?;
    let data = load_or_generate(&cfg.data)?;
    let mut trainer = match resume {
        Some(path) => {
            let t = Trainer::<T>::load(path)?;
            if t.config != cfg.training() {
                return Err(RossError::config(format!(
                    "checkpoint {} was trained with a different config",
                    path.display()
                )));
            }
            t
        }
        None => Trainer::<T>::new(cfg.training(), data.split(Split::Train), None)?,
    };
    eprintln!(
        "training {} for {} steps ({} done) into {}",
        cfg.objective.kind,
        trainer.total_steps,
        trainer.step,
        cfg.output_dir.display()
    );
    let summary = trainer.run(&data, &cfg.output_dir)?;
    write_json(&cfg.output_dir.join("summary.json"), &summary)?;
    print_json(&summary)
}

fn eval<T: Scalar>(cfg: &ExperimentConfig, a: &EvalArgs) -> Result<()> {
    let split = parse_split(&a.split)?;
    let trainer = Trainer::<T>::load(&a.checkpoint)?;
    let data = load_or_generate(&cfg.data)?;
    let report = trainer.evaluate(data.split(split), split.name())?;
    if let Some(out) = &a.out {
        write_json(out, &report)?;
    }
    print_json(&report)
}

fn analyze<T: Scalar>(cfg: &ExperimentConfig, a: &AnalyzeArgs) -> Result<()> {
    let out = a.out.clone().unwrap_or_else(|| cfg.output_dir.join("analysis"));
    create_dir(&out)?;
    let baseline = Trainer::<T>::load(&a.baseline)?;
    let ross = Trainer::<T>::load(&a.ross)?;
    let data = load_or_generate(&cfg.data)?;
    let samples = analysis_samples(data.split(Split::Test), cfg.analysis.samples);
    let study = attention_study(&baseline.model, &ross.model, samples, cfg.analysis.layers)?;
    write_json(&out.join("attention.json"), &study)?;

    let shown = &samples[..samples.len().min(cfg.analysis.reconstruct_images.max(1))];
    let mut saliency = serde_json::Map::new();
    for (name, trainer) in [("baseline", &baseline), ("ross", &ross)] {
        let s = saliency_study(&trainer.model, shown)?;
        write_arrays(
            &out.join(format!("saliency_{name}.rsc")),
            serde_json::json!({"checkpoint": if name == "baseline" { &a.baseline } else { &a.ross }, "correct": s.correct}),
            &[("saliency", &saliency_tensor(&s.maps)?)],
        )?;
        if cfg.analysis.png {
            for (i, m) in s.maps.iter().enumerate() {
                heatmap(&m.values, m.rows, m.cols, 8).write_png(&out.join(format!("saliency_{name}_{i:03}.png")))?;
            }
        }
        saliency.insert(
            name.to_string(),
            serde_json::json!({"concentration": s.concentration, "correct": s.correct_count, "maps": s.maps.len()}),
        );
    }
    let summary = serde_json::json!({
        "attention": study.report,
        "layers": study.layers,
        "ross_mean_above_baseline": study.report.mean_b > study.report.mean_a,
        "saliency": saliency,
    });
    write_json(&out.join("report.json"), &summary)?;
    print_json(&summary)
}

fn reconstruct<T: Scalar>(cfg: &ExperimentConfig, a: &ReconstructArgs) -> Result<()> {
    let out = a.out.clone().unwrap_or_else(|| cfg.output_dir.join("reconstruct"));
    create_dir(&out)?;
    let trainer = Trainer::<T>::load(&a.checkpoint)?;
    let data = load_or_generate(&cfg.data)?;
    let test = data.split(Split::Test);
    let count = a.count.unwrap_or(cfg.analysis.reconstruct_images).min(test.len());
    let seed = a.seed.unwrap_or(cfg.analysis.reconstruct_seed);
    let study = reconstruction_study(&trainer.model, &trainer.objective, &test[..count], seed)?;
    let originals: Vec<_> = test[..count].iter().map(|s| s.image.clone()).collect();
    write_arrays(
        &out.join("reconstructions.rsc"),
        serde_json::json!({"checkpoint": a.checkpoint, "seed": seed, "mse": study.mse}),
        &[("reconstruction", &images_tensor(&study.images)?), ("input", &images_tensor(&originals)?)],
    )?;
    if cfg.analysis.png {
        for (i, (r, o)) in study.images.iter().zip(&originals).enumerate() {
            r.write_png(&out.join(format!("recon_{i:03}.png")))?;
            o.write_png(&out.join(format!("input_{i:03}.png")))?;
        }
    }
    let summary = serde_json::json!({
        "images": count,
        "seed": seed,
        "mse": study.mse,
        "mean_mse": study.mse.iter().sum::<f64>() / count.max(1) as f64,
        "fraction_below_0.05": study.fraction_below(0.05),
    });
    write_json(&out.join("report.json"), &summary)?;
    print_json(&summary)
}

fn dump_schedule(a: &DumpArgs) -> Result<()> {
    let kind: ScheduleKind = a.kind.parse()?;
    let sigma = match a.sigma.as_str() {
        "beta" => SigmaMode::Beta,
        "posterior" => SigmaMode::Posterior,
        other => {
            return Err(RossError::UnknownKind {
                what: "sigma mode",
                value: other.to_string(),
            })
        }
    };
    let (lo, hi) = kind.default_bounds();
    let schedule = make_beta_schedule_with(
        kind,
        a.steps,
        a.beta_min.unwrap_or(lo),
        a.beta_max.unwrap_or(hi),
        sigma,
    )?;
    match &a.out {
        Some(path) => write_text(path, &schedule.to_csv()),
        None => {
            print!("{}", schedule.to_csv());
            Ok(())
        }
    }
}

fn ab<T: Scalar>(cfg: &ExperimentConfig, a: &AbRunArgs) -> Result<()> {
    let variants = a
        .variants
        .iter()
        .map(|v| v.trim().parse::<ObjectiveKind>())
        .collect::<Result<Vec<_>>>()?;
    if a.seeds == 0 {
        return Err(RossError::config("--seeds must be positive"));
    }
    let out = a.out.clone().unwrap_or_else(|| cfg.output_dir.join("ab"));
    create_dir(&out)?;
    write_text(&out.join("config.toml"), &cfg.to_toml()?)?;
    let data = load_or_generate(&cfg.data)?;
    let seeds = matched_seeds(cfg, a.seeds);
    let outcome = ab_run::<T>(cfg, &data, &variants, &seeds, Some(&out), |arm| {
        eprintln!(
            "{} seed {}: test accuracy {:.4} ({:.0}s)",
            arm.variant, arm.seed, arm.test_accuracy, arm.wall_seconds
        )
    })?;
    write_json(&out.join("table.json"), &outcome.table)?;
    print_json(&outcome.table)
}
