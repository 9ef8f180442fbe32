//! Command-line front end.

pub mod config;
pub mod plot;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;

use crate::dataio::{self, Dataset, Split};
use crate::error::{Error, Result};
use crate::nets::Model;
use crate::pba::{Schedule, SearchOutcome};
use crate::pipeline::checkpoint::{self, Metadata};
use crate::pipeline::{self, EpochLog};

pub use config::RunConfig;

pub const TEACHER_SCHEDULE: &str = "teacher_schedule.txt";
pub const STUDENT_SCHEDULE: &str = "student_schedule.txt";
pub const TEACHER_CHECKPOINT: &str = "teacher.ckpt";
pub const STUDENT_CHECKPOINT: &str = "student.ckpt";

#[derive(Debug, Parser)]
#[command(name = "dfkd", version, about = "Role-wise augmentation search and distillation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// TOML run configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Override a config value, e.g. `--set student.quant_bits=4`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Search the teacher's augmentation schedule.
    SearchTeacher(RunArgs),
    /// Retrain the teacher under its schedule.
    TrainTeacher {
        #[command(flatten)]
        run: RunArgs,
        /// Defaults to the teacher schedule in the output directory.
        #[arg(long)]
        schedule: Option<PathBuf>,
    },
    /// Search the student's schedule against a frozen teacher.
    SearchStudent(RunArgs),
    /// Retrain the student under its schedule with distillation.
    DistillStudent {
        #[command(flatten)]
        run: RunArgs,
        /// Defaults to the student schedule in the output directory.
        #[arg(long)]
        schedule: Option<PathBuf>,
    },
    /// Report a checkpoint's accuracy on the validation split.
    Evaluate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Emit probability and magnitude plots for a schedule file.
    PlotSchedule {
        #[arg(long)]
        schedule: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::SearchTeacher(_) => "search-teacher",
            Command::TrainTeacher { .. } => "train-teacher",
            Command::SearchStudent(_) => "search-student",
            Command::DistillStudent { .. } => "distill-student",
            Command::Evaluate { .. } => "evaluate",
            Command::PlotSchedule { .. } => "plot-schedule",
        }
    }
}

/// 2 for configuration problems, 1 for everything else.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Incompatible(_) => 2,
        _ => 1,
    }
}

fn load_config(args: &RunArgs) -> Result<RunConfig> {
    RunConfig::load(&args.config, &args.set).map_err(|e| match e {
        Error::Io { path, source } => Error::Config(format!("{}: {source}", path.display())),
        other => other,
    })
}

fn write_file(path: &Path, body: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn prepare_output(cfg: &RunConfig, command: &str) -> Result<()> {
    std::fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
    write_file(&cfg.output_dir.join(format!("resolved_{command}.toml")), cfg.to_toml())
}

/// Training and validation splits described by `cfg`.
pub fn load_data(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    match cfg.cifar_variant() {
        None => {
            let d = &cfg.data;
            let all = dataio::synth_shapes(d.synth_train + d.synth_val, d.classes, d.image_size, d.seed)?;
            let train: Vec<usize> = (0..d.synth_train).collect();
            let val: Vec<usize> = (d.synth_train..d.synth_train + d.synth_val).collect();
            Ok((all.subset(&train, Split::Train)?, all.subset(&val, Split::Val)?))
        }
        Some(variant) => {
            let mut parts = Vec::new();
            for f in &cfg.data.train_files {
                parts.push(dataio::load_cifar_binary(f, variant, Split::Train)?);
            }
            let train = concat(&parts)?;
            let val = dataio::load_cifar_binary(&cfg.data.val_file, variant, Split::Val)?;
            Ok((train, val))
        }
    }
}

fn concat(parts: &[Dataset]) -> Result<Dataset> {
    let first = &parts[0];
    let mut shape = first.images().shape().to_vec();
    shape[0] = parts.iter().map(Dataset::len).sum();
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for p in parts {
        data.extend_from_slice(p.images().data());
        labels.extend_from_slice(p.labels());
    }
    Dataset::new(crate::tensor::Tensor::new(shape, data)?, labels, first.classes(), Split::Train)
}

pub fn metrics_tsv(log: &[EpochLog]) -> String {
    let mut s = String::from("epoch\ttrain_loss\ttask\tkd_soft\tkd_intra\tkd_inter\tlambda\tlr\tval_accuracy\n");
    for r in log {
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.epoch, r.train_loss, r.task, r.kd_soft, r.kd_intra, r.kd_inter, r.lambda, r.lr, r.val_accuracy
        );
    }
    s
}

fn search_tsv(outcome: &SearchOutcome<Model>) -> String {
    let mut s = String::from("epoch\ttrial\tfitness\tbest\n");
    for (e, row) in outcome.history.iter().enumerate() {
        for (t, f) in row.iter().enumerate() {
            let _ = writeln!(s, "{e}\t{t}\t{f}\t{}", u8::from(t == outcome.best));
        }
    }
    s
}

fn read_schedule(path: &Path) -> Result<Schedule> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(Schedule::from_text(&text)?.0)
}

fn write_search(cfg: &RunConfig, outcome: &SearchOutcome<Model>, file: &str, population: usize) -> Result<()> {
    let path = cfg.output_dir.join(file);
    write_file(&path, outcome.schedule.to_text(cfg.seed, population))?;
    let stem = file.trim_end_matches(".txt").replace("schedule", "search");
    write_file(&cfg.output_dir.join(format!("{stem}.tsv")), search_tsv(outcome))?;
    info!("wrote {}", path.display());
    Ok(())
}

fn load_teacher(cfg: &RunConfig) -> Result<Model> {
    let (teacher, meta) = checkpoint::load(cfg.teacher_path()?)?;
    info!("teacher loaded (stage {}, accuracy {:.4})", meta.stage, meta.accuracy);
    Ok(teacher)
}

fn finish_training(
    cfg: &RunConfig,
    model: &Model,
    log: &[EpochLog],
    schedule: &Schedule,
    val: &Dataset,
    stage: &str,
    ckpt: &str,
    metrics: &str,
) -> Result<()> {
    let accuracy = pipeline::evaluate(model, val)?;
    let meta = Metadata {
        stage: stage.into(),
        schedule_sha256: schedule.sha256(),
        accuracy,
        seed: cfg.seed,
    };
    checkpoint::save(&cfg.output_dir.join(ckpt), model, &meta)?;
    write_file(&cfg.output_dir.join(metrics), metrics_tsv(log))?;
    println!("{stage} accuracy {accuracy:.4}");
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    let name = cli.command.name();
    match cli.command {
        Command::SearchTeacher(args) => {
            let cfg = load_config(&args)?;
            let alpha = cfg.alpha()?;
            prepare_output(&cfg, name)?;
            let (train, _) = load_data(&cfg)?;
            let outcome = pipeline::alpha_search(&alpha, &train)?;
            write_search(&cfg, &outcome, TEACHER_SCHEDULE, alpha.search.population)
        }
        Command::TrainTeacher { run, schedule } => {
            let cfg = load_config(&run)?;
            let alpha = cfg.alpha()?;
            prepare_output(&cfg, name)?;
            let path = schedule.unwrap_or_else(|| cfg.output_dir.join(TEACHER_SCHEDULE));
            let sched = read_schedule(&path)?;
            let (train, val) = load_data(&cfg)?;
            let (model, log) = pipeline::alpha_retrain(&alpha, &sched, &train, &val)?;
            finish_training(&cfg, &model, &log, &sched, &val, "alpha", TEACHER_CHECKPOINT, "teacher_metrics.tsv")
        }
        Command::SearchStudent(args) => {
            let cfg = load_config(&args)?;
            let beta = cfg.beta()?;
            prepare_output(&cfg, name)?;
            let teacher = load_teacher(&cfg)?;
            let (train, _) = load_data(&cfg)?;
            let outcome = pipeline::beta_search(&beta, &teacher, &train)?;
            write_search(&cfg, &outcome, STUDENT_SCHEDULE, beta.search.population)
        }
        Command::DistillStudent { run, schedule } => {
            let cfg = load_config(&run)?;
            let beta = cfg.beta()?;
            prepare_output(&cfg, name)?;
            let path = schedule.unwrap_or_else(|| cfg.output_dir.join(STUDENT_SCHEDULE));
            let sched = read_schedule(&path)?;
            let teacher = load_teacher(&cfg)?;
            let (train, val) = load_data(&cfg)?;
            let (model, log) = pipeline::train_student(&beta, &teacher, &train, &val, Some(&sched))?;
            finish_training(&cfg, &model, &log, &sched, &val, "beta", STUDENT_CHECKPOINT, "student_metrics.tsv")
        }
        Command::Evaluate { run, checkpoint: path } => {
            let cfg = load_config(&run)?;
            let (model, _) = checkpoint::load(&path)?;
            let (_, val) = load_data(&cfg)?;
            let acc = pipeline::evaluate(&model, &val)?;
            println!("accuracy {acc:.6}");
            Ok(())
        }
        Command::PlotSchedule { schedule, out } => {
            let t = plot::plot_schedule(&schedule, &out)?;
            println!("plotted {} epochs into {}", t.epochs(), out.display());
            Ok(())
        }
    }
}

/// Parse arguments, run, and map the outcome to a process exit code.
pub fn main() -> i32 {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                eprintln!("  caused by: {s}");
                src = s.source();
            }
            exit_code(&e)
        }
    }
}
