use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use food_core::experiment::{
    base_stage, evaluate_checkpoint, finetune_stage, format_report, row_label, run_experiment, Artifacts,
    ExperimentConfig,
};
use food_core::metrics::{evaluate_files, read_report, write_detections, write_ground_truth, write_report};
use food_core::synthbench::{generate, read_dataset, write_dataset};
use food_core::train::{read_checkpoint, weight_average, write_checkpoint};
use food_core::{selfcheck, FoodError, Result};
use tracing_subscriber::filter::LevelFilter;

#[derive(Parser)]
#[command(
    name = "food",
    version,
    about = "Few-shot open-set detection head: data, training and evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for artifacts.
    #[arg(long, default_value = "food-out")]
    out: PathBuf,
    #[arg(long)]
    shots: Option<usize>,
    /// lp, ft, ft-gdl, lp-ft or lp-ft-gdl.
    #[arg(long)]
    variant: Option<String>,
    /// max_cond_energy, min_max_prob, min_unknown_logit or max_entropy.
    #[arg(long)]
    sampling_rule: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic benchmark.
    GenData(Common),
    /// Base training on the generated dataset.
    TrainBase(Common),
    /// Few-shot fine-tuning of the base checkpoint.
    Finetune(Common),
    /// Inference and evaluation; or score existing detection files.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, requires = "ground_truth")]
        detections: Option<PathBuf>,
        #[arg(long, requires = "detections")]
        ground_truth: Option<PathBuf>,
    },
    /// Tabulate one or more report.json files.
    Report {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
    },
    /// Full pipeline.
    Run(Common),
    /// Oracle and invariant spot checks.
    Selfcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load_config(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::from_file(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.set("seed", &s.to_string())?;
    }
    if let Some(m) = c.shots {
        cfg.set("shots", &m.to_string())?;
    }
    if let Some(v) = &c.variant {
        cfg.set("finetune_variant", v)?;
    }
    if let Some(r) = &c.sampling_rule {
        cfg.set("sampling_rule", r)
            .map_err(|e| FoodError::Config(e.to_string()))?;
    }
    cfg.sync();
    cfg.validate()?;
    Ok(cfg)
}

fn prepare(c: &Common) -> Result<(ExperimentConfig, Artifacts)> {
    let cfg = load_config(c)?;
    fs::create_dir_all(&c.out)?;
    let files = Artifacts::new(&c.out);
    fs::write(files.config(), cfg.to_text())?;
    Ok((cfg, files))
}

fn need(path: &Path, hint: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(FoodError::Format(format!(
            "{} not found; run `{hint}` first",
            path.display()
        )))
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(c) => {
            let (cfg, files) = prepare(&c)?;
            let data = generate(&cfg.benchmark).map_err(|e| e.in_stage("gen-data"))?;
            write_dataset(&data, &files.dataset())?;
            println!("wrote {}", files.dataset().display());
        }
        Command::TrainBase(c) => {
            let (cfg, files) = prepare(&c)?;
            need(&files.dataset(), "food gen-data")?;
            let data = read_dataset(&files.dataset())?;
            let ck = base_stage(&cfg, &data)?;
            write_checkpoint(&ck, &files.base_checkpoint())?;
            println!("wrote {}", files.base_checkpoint().display());
        }
        Command::Finetune(c) => {
            let (cfg, files) = prepare(&c)?;
            need(&files.dataset(), "food gen-data")?;
            need(&files.base_checkpoint(), "food train-base")?;
            let data = read_dataset(&files.dataset())?;
            let base = read_checkpoint(&files.base_checkpoint())?;
            let (ck, traj) = finetune_stage(&cfg, &data, &base)?;
            write_checkpoint(&ck, &files.finetune_checkpoint())?;
            println!("wrote {}", files.finetune_checkpoint().display());
            if cfg.use_wa {
                write_checkpoint(&weight_average(&traj)?, &files.wa_checkpoint())?;
                println!("wrote {}", files.wa_checkpoint().display());
            }
        }
        Command::Eval {
            common,
            detections,
            ground_truth,
        } => {
            let (cfg, files) = prepare(&common)?;
            let report = if let (Some(d), Some(g)) = (detections, ground_truth) {
                evaluate_files(&d, &g, &cfg.eval)?
            } else {
                need(&files.dataset(), "food gen-data")?;
                let ckpt_path = if cfg.use_wa {
                    files.wa_checkpoint()
                } else {
                    files.finetune_checkpoint()
                };
                need(&ckpt_path, "food finetune")?;
                let data = read_dataset(&files.dataset())?;
                let ck = read_checkpoint(&ckpt_path)?;
                let (dets, report) = evaluate_checkpoint(&cfg, &data, &ck)?;
                write_detections(&dets, &files.detections())?;
                write_ground_truth(&data.test_ground_truth(), &files.ground_truth())?;
                report
            };
            write_report(&report, &files.report_json())?;
            let table = format_report(&[(row_label(&cfg), report)]);
            fs::write(files.report_txt(), &table)?;
            print!("{table}");
        }
        Command::Report { reports } => {
            let mut rows = Vec::with_capacity(reports.len());
            for p in &reports {
                let label = p
                    .parent()
                    .and_then(|d| d.file_name())
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| p.display().to_string());
                rows.push((label, read_report(p)?));
            }
            print!("{}", format_report(&rows));
        }
        Command::Run(c) => {
            let cfg = load_config(&c)?;
            let out = run_experiment(&cfg, &c.out)?;
            print!("{}", format_report(&[(row_label(&cfg), out.report)]));
        }
        Command::Selfcheck { seed } => {
            let checks = selfcheck::run_all(seed)?;
            let mut failed = 0;
            for c in &checks {
                println!("{} {:<20} {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
                failed += (!c.passed) as usize;
            }
            if failed > 0 {
                return Err(FoodError::NumericFailure(format!("{failed} self-check(s) failed")));
            }
        }
    }
    Ok(())
}

fn init_logging() {
    let level = match std::env::var("FOOD_LOG").as_deref() {
        Ok("quiet") => LevelFilter::OFF,
        Ok("debug") => LevelFilter::DEBUG,
        _ => LevelFilter::INFO,
    };
    tracing_subscriber::fmt()
        .with_max_level(level)
        .with_writer(std::io::stderr)
        .with_target(false)
        .init();
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
