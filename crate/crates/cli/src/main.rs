//! `tlinv` command-line driver.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use tlinv::eval::{Defense, MetricsReport};
use tlinv::runner::{self, AttackMethod, ExperimentConfig, SweepAxis};

#[derive(Parser, Debug)]
#[command(name = "tlinv", version, about = "Query-free model inversion against transfer-learning students")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Experiment config (JSON). Defaults to the MNIST / Fashion-MNIST setup.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (checkpoints, metrics, grids, tables).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Directory holding `mnist/` and `fashion/` IDX files, used without --config.
    #[arg(long, global = true, default_value = "data")]
    data: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train (or load from cache) the teacher model.
    TrainTeacher,
    /// Fine-tune the victim student from the teacher.
    TrainStudent,
    /// Build the mask-augmented attacker dataset and write it to disk.
    Augment,
    /// Train an attack and save it under `<out>/attack-<method>`.
    Attack {
        #[arg(long)]
        method: AttackMethod,
    },
    /// Evaluate a saved attack against the student.
    Evaluate {
        #[arg(long)]
        method: Option<AttackMethod>,
        /// `none`, `top-h:<h>`, `top-h-renorm:<h>` or `temp:<t>`.
        #[arg(long)]
        defense: Option<Defense>,
    },
    /// Run one experiment per value of a single axis and write a CSV table.
    Sweep {
        #[arg(long)]
        axis: SweepAxis,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<usize>,
    },
    /// Collect every metrics JSON under the output directory into one CSV.
    Report,
}

fn config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => ExperimentConfig::mnist_fashion(&common.data),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(out) = &common.out {
        cfg.output_dir = Some(out.clone());
        if cfg.cache_dir.is_none() {
            cfg.cache_dir = Some(out.join("cache"));
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let out = cfg.output_dir.clone().unwrap_or_else(|| PathBuf::from("runs"));
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    Ok(out)
}

fn collect_reports(dir: &Path, found: &mut Vec<(PathBuf, MetricsReport)>) -> Result<()> {
    let mut entries: Vec<_> = fs::read_dir(dir)?.collect::<std::io::Result<_>>()?;
    entries.sort_by_key(|e| e.path());
    for e in entries {
        let p = e.path();
        if p.is_dir() {
            collect_reports(&p, found)?;
        } else if p
            .file_name()
            .and_then(|n| n.to_str())
            .is_some_and(|n| n.starts_with("metrics-") && n.ends_with(".json"))
        {
            let r = serde_json::from_slice(&fs::read(&p)?).with_context(|| format!("parsing {}", p.display()))?;
            found.push((p, r));
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = config(&cli.common)?;
    match cli.command {
        Command::TrainTeacher => {
            out_dir(&cfg)?;
            let data = runner::prepare_data(&cfg)?;
            let (_, acc) = runner::teacher_model(&cfg, &data)?;
            println!("teacher test accuracy {acc:.4}");
        }
        Command::TrainStudent => {
            out_dir(&cfg)?;
            let data = runner::prepare_data(&cfg)?;
            let (teacher, _) = runner::teacher_model(&cfg, &data)?;
            let (_, acc) = runner::student_model(&cfg, &data, &teacher)?;
            println!("student ({}) accuracy {acc:.4}", cfg.transfer_mode);
        }
        Command::Augment => {
            let out = out_dir(&cfg)?;
            let data = runner::prepare_data(&cfg)?;
            let (teacher, _) = runner::teacher_model(&cfg, &data)?;
            let aug = runner::augment_student_data(&cfg, &data, &teacher)?;
            let dir = out.join("augmented");
            aug.save(&dir)?;
            println!("{} augmented samples written to {}", aug.dataset.len(), dir.display());
        }
        Command::Attack { method } => {
            cfg.method = method;
            cfg.validate()?;
            let out = out_dir(&cfg)?;
            fs::write(out.join("config.json"), serde_json::to_vec_pretty(&cfg)?)?;
            let prepared = runner::prepare_attack(&cfg)?;
            let dir = out.join(format!("attack-{method}"));
            fs::create_dir_all(&dir)?;
            prepared.save(&dir)?;
            println!(
                "{method} attack saved to {} (pre-evaluation student queries: {})",
                dir.display(),
                prepared.oracle.pre_evaluation_queries()
            );
        }
        Command::Evaluate { method, defense } => {
            if let Some(m) = method {
                cfg.method = m;
            }
            let defense = defense.unwrap_or(cfg.defense);
            let out = out_dir(&cfg)?;
            let dir = out.join(format!("attack-{}", cfg.method));
            if !dir.exists() {
                bail!(
                    "no saved attack at {}; run `tlinv attack --method {}` first",
                    dir.display(),
                    cfg.method
                );
            }
            let prepared = runner::load_attack(&cfg, &dir)?;
            let ev = prepared.evaluate(defense)?;
            println!("{}", serde_json::to_string_pretty(&ev.report)?);
        }
        Command::Sweep { axis, values } => {
            let out = out_dir(&cfg)?;
            let reports = runner::run_sweep(&cfg, axis, &values)?;
            println!("{}", runner::CSV_HEADER);
            for (v, r) in values.iter().zip(&reports) {
                println!("{}", runner::csv_row(&axis.to_string(), &v.to_string(), r));
            }
            log::info!("table written to {}", out.join(format!("sweep-{axis}.csv")).display());
        }
        Command::Report => {
            let out = out_dir(&cfg)?;
            let mut found = Vec::new();
            collect_reports(&out, &mut found)?;
            if found.is_empty() {
                bail!("no metrics files under {}", out.display());
            }
            let mut table = format!("{}\n", runner::CSV_HEADER);
            for (p, r) in &found {
                let parent = p.parent().and_then(|d| d.file_name()).and_then(|n| n.to_str()).unwrap_or("");
                table.push_str(&runner::csv_row("run", parent, r));
                table.push('\n');
            }
            let path = out.join("report.csv");
            fs::write(&path, &table)?;
            print!("{table}");
        }
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    run(Cli::parse())
}
