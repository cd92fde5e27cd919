mod config;
mod plot;
mod report;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, ensure, Context};
use clap::{ArgGroup, Parser, Subcommand, ValueEnum};
use hrlf_core::checkpoint::{self, STUDENT_DIR, TEACHER_DIR};
use hrlf_core::data::{generate_synthetic, load_dataset, save_dataset};
use hrlf_core::eval::{run_condition_grid, run_ratio_sweep};
use hrlf_core::trainer::{train_student, train_teacher, EpochRecord};
use hrlf_core::{Dataset, NetworkBundle, Role};

use config::RunConfig;
use report::ReportFile;

const HISTORY_FILE: &str = "history.jsonl";
const RESOLVED_CONFIG: &str = "config.toml";
const REPORTS_DIR: &str = "reports";

#[derive(Debug, Parser)]
#[command(name = "hrlf", version, about = "Robust multimodal sentiment models under missing modalities")]
struct Cli {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output root. Every other path is resolved against it.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic dataset.
    GenData,
    /// Train a teacher on complete data or distill a student from one.
    Train {
        #[arg(long, value_enum)]
        role: RoleArg,
        /// Teacher checkpoint (required for `--role student`).
        #[arg(long)]
        teacher_ckpt: Option<PathBuf>,
        /// Drop a student objective; repeatable.
        #[arg(long, value_enum)]
        ablate: Vec<AblateArg>,
        /// Run directory name.
        #[arg(long)]
        name: Option<String>,
    },
    /// Evaluate a checkpoint on the configured split.
    #[command(group(ArgGroup::new("mode").required(true).multiple(true).args(["grid", "sweep"])))]
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Six missing-modality conditions plus complete input.
        #[arg(long)]
        grid: bool,
        /// Intra-modality missing ratios 0.0 to 1.0.
        #[arg(long)]
        sweep: bool,
        /// Series name used in report files and plots.
        #[arg(long)]
        name: Option<String>,
    },
    /// Render report files as SVG.
    Plot {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum RoleArg {
    Teacher,
    Student,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum AblateArg {
    Frf,
    Hmi,
    Hal,
}

impl AblateArg {
    fn tag(self) -> &'static str {
        match self {
            AblateArg::Frf => "frf",
            AblateArg::Hmi => "hmi",
            AblateArg::Hal => "hal",
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let config = RunConfig::load(cli.config.as_deref())?;
    let out = cli.out.clone().or_else(|| config.out.clone()).unwrap_or_else(|| PathBuf::from("."));
    match cli.command {
        Command::GenData => cmd_gen_data(&config, &out),
        Command::Train { role, teacher_ckpt, ablate, name } => {
            cmd_train(&config, &out, role, teacher_ckpt.as_deref(), &ablate, name)
        }
        Command::Eval { ckpt, grid, sweep, name } => cmd_eval(&config, &out, &ckpt, grid, sweep, name),
        Command::Plot { reports, output } => cmd_plot(&out, &reports, output),
    }
}

fn cmd_gen_data(config: &RunConfig, out: &Path) -> anyhow::Result<()> {
    let dir = out.join(&config.data.path);
    let dataset = generate_synthetic(&config.data.synthetic)?;
    let manifest = save_dataset(&dataset, &dir).with_context(|| format!("writing dataset to {}", dir.display()))?;
    // Read back so a zero exit means the files load.
    load_dataset(&dir).context("re-reading the written dataset")?;
    let sizes: Vec<String> = manifest.splits.iter().map(|s| format!("{}={}", s.name, s.n_samples)).collect();
    println!("dataset written to {} ({})", dir.display(), sizes.join(", "));
    Ok(())
}

fn open_dataset(config: &RunConfig, out: &Path) -> anyhow::Result<Dataset> {
    let dir = out.join(&config.data.path);
    load_dataset(&dir).with_context(|| format!("loading dataset {} (run gen-data first?)", dir.display()))
}

/// Accepts either a bundle directory or a run directory holding one.
fn resolve_bundle_dir(path: &Path, prefer: &[&str]) -> PathBuf {
    if path.join("manifest.json").exists() {
        return path.to_path_buf();
    }
    prefer.iter().map(|sub| path.join(sub)).find(|p| p.join("manifest.json").exists()).unwrap_or_else(|| path.to_path_buf())
}

fn write_history(path: &Path, history: &[EpochRecord]) -> anyhow::Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path).with_context(|| format!("creating {}", path.display()))?);
    for record in history {
        serde_json::to_writer(&mut f, record)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

fn cmd_train(
    config: &RunConfig,
    out: &Path,
    role: RoleArg,
    teacher_ckpt: Option<&Path>,
    ablate: &[AblateArg],
    name: Option<String>,
) -> anyhow::Result<()> {
    let dataset = open_dataset(config, out)?;
    match role {
        RoleArg::Teacher => {
            ensure!(ablate.is_empty(), "--ablate only applies to student training");
            ensure!(teacher_ckpt.is_none(), "--teacher-ckpt only applies to student training");
            let run_dir = out.join(name.as_deref().unwrap_or("teacher"));
            let (teacher, history) = train_teacher(&dataset, &config.model, &config.train.teacher)?;
            checkpoint::save_bundle(&teacher, &run_dir.join(TEACHER_DIR))?;
            finish_run(config, &run_dir, &history)?;
            let acc = train_accuracy(&teacher, &dataset)?;
            println!("teacher written to {} (train accuracy {acc:.4})", run_dir.display());
        }
        RoleArg::Student => {
            let Some(teacher_path) = teacher_ckpt else {
                bail!("--role student requires --teacher-ckpt");
            };
            let teacher_dir = resolve_bundle_dir(&out.join(teacher_path), &[TEACHER_DIR]);
            let teacher = checkpoint::load_bundle(&teacher_dir)
                .with_context(|| format!("loading teacher checkpoint {}", teacher_dir.display()))?;
            ensure!(teacher.role == Role::Teacher, "{} holds a student, not a teacher", teacher_dir.display());
            ensure!(
                teacher.config == config.model,
                "teacher checkpoint was trained with a different [model] section than the current config"
            );
            let mut cfg = config.train.student.clone();
            for a in ablate {
                match a {
                    AblateArg::Frf => cfg.ablation.use_frf = false,
                    AblateArg::Hmi => cfg.ablation.use_hmi = false,
                    AblateArg::Hal => cfg.ablation.use_hal = false,
                }
            }
            let default_name = {
                let mut tags: Vec<&str> = ablate.iter().map(|a| a.tag()).collect();
                tags.sort_unstable();
                tags.dedup();
                if tags.is_empty() { "student".to_string() } else { format!("student-wo-{}", tags.join("-")) }
            };
            let run_dir = out.join(name.unwrap_or(default_name));
            let run = train_student(&dataset, &teacher, &cfg)?;
            checkpoint::save_bundle(&run.student, &run_dir.join(STUDENT_DIR))?;
            checkpoint::save_auxiliary(&run.aux, run.student.d_model(), &run_dir)?;
            finish_run(config, &run_dir, &run.history)?;
            println!("student written to {}", run_dir.display());
        }
    }
    Ok(())
}

fn finish_run(config: &RunConfig, run_dir: &Path, history: &[EpochRecord]) -> anyhow::Result<()> {
    write_history(&run_dir.join(HISTORY_FILE), history)?;
    fs::write(run_dir.join(RESOLVED_CONFIG), toml::to_string(config)?)?;
    if let Some(last) = history.last() {
        println!("epoch {}: total loss {:.6}", last.epoch, last.loss.total);
    }
    Ok(())
}

fn train_accuracy(bundle: &NetworkBundle, dataset: &Dataset) -> anyhow::Result<f64> {
    let train = dataset.split("train").context("dataset has no train split")?;
    let outputs = hrlf_core::trainer::predict(bundle, train, hrlf_core::trainer::Masking::Condition(hrlf_core::TestingCondition::LAV))?;
    let labels: Vec<_> = train.iter().map(|s| s.label).collect();
    Ok(hrlf_core::eval::accuracy(&outputs, &labels, bundle.task)?)
}

fn cmd_eval(config: &RunConfig, out: &Path, ckpt: &Path, grid: bool, sweep: bool, name: Option<String>) -> anyhow::Result<()> {
    let full = out.join(ckpt);
    let dir = resolve_bundle_dir(&full, &[STUDENT_DIR, TEACHER_DIR]);
    let bundle = checkpoint::load_bundle(&dir).with_context(|| format!("loading checkpoint {}", dir.display()))?;
    let dataset = open_dataset(config, out)?;
    ensure!(
        bundle.task == dataset.task() && bundle.shapes == dataset.manifest.shapes(),
        "checkpoint {} was built for a different task or input shape than dataset {}",
        dir.display(),
        config.data.path.display()
    );
    let split = &config.eval.split;
    let samples = dataset.split(split).with_context(|| format!("dataset has no {split:?} split"))?;
    let model = name.unwrap_or_else(|| {
        full.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "model".into())
    });
    let reports = out.join(REPORTS_DIR);
    fs::create_dir_all(&reports)?;
    if grid {
        let report = run_condition_grid(&bundle, samples, config.eval.metric)?;
        let table = hrlf_core::eval::condition_table(&[(&model, &report)]);
        let record = ReportFile::Grid { model: model.clone(), report };
        record.validate()?;
        fs::write(reports.join(format!("{model}-grid.txt")), &table)?;
        record.write(&reports.join(format!("{model}-grid.json")))?;
        print!("{table}");
    }
    if sweep {
        let report = run_ratio_sweep(&bundle, samples, config.eval.metric, config.eval.sweep_condition, config.eval.sweep_seed)?;
        let table = report.to_table();
        let record = ReportFile::Sweep { model: model.clone(), report };
        record.validate()?;
        fs::write(reports.join(format!("{model}-sweep.txt")), &table)?;
        record.write(&reports.join(format!("{model}-sweep.json")))?;
        print!("{table}");
    }
    Ok(())
}

fn cmd_plot(out: &Path, paths: &[PathBuf], output: Option<PathBuf>) -> anyhow::Result<()> {
    let files = paths.iter().map(|p| ReportFile::read(&out.join(p))).collect::<anyhow::Result<Vec<_>>>()?;
    let sweeps: Vec<_> = files
        .iter()
        .filter_map(|f| match f {
            ReportFile::Sweep { model, report } => Some((model.as_str(), report)),
            ReportFile::Grid { .. } => None,
        })
        .collect();
    let grids: Vec<_> = files
        .iter()
        .filter_map(|f| match f {
            ReportFile::Grid { model, report } => Some((model.as_str(), report)),
            ReportFile::Sweep { .. } => None,
        })
        .collect();
    let (svg, default_name) = match (sweeps.is_empty(), grids.is_empty()) {
        (false, true) => (plot::sweep_curves(&sweeps), "sweep.svg"),
        (true, false) => (plot::grid_bars(&grids), "grid.svg"),
        _ => bail!("cannot mix grid and sweep reports in one plot"),
    };
    let path = out.join(output.unwrap_or_else(|| PathBuf::from("plots").join(default_name)));
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(&path, svg).with_context(|| format!("writing {}", path.display()))?;
    let names: Vec<&str> = files.iter().map(|f| f.model()).collect();
    println!("plotted {} to {}", names.join(", "), path.display());
    Ok(())
}
