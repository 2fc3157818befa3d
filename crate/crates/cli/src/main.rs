//! `afd` — desk-scale attention-based feature distillation.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use afd_core::config::RunConfig;
use afd_core::error::Result;
use afd_core::gradcheck::{run_scope, GradCheckScope};
use afd_core::scene::SceneConfig;
use afd_core::train::{
    run_distill, run_eval, run_gen_data, run_report, run_train_teacher, DistillMode,
};

#[derive(Parser)]
#[command(name = "afd", about = "Attention-based feature distillation at desk scale", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene dataset file.
    GenData {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
        /// Optional run config supplying the scene parameters.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train the teacher detector on its task loss.
    TrainTeacher {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a student against a frozen teacher (afd) or alone (baseline).
    Distill {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        teacher_ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        mode: String,
    },
    /// Evaluate a detector checkpoint over a dataset file.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Where to write the PR curves CSV (default: next to the checkpoint).
        #[arg(long)]
        pr_out: Option<PathBuf>,
    },
    /// Run the finite-difference gradient suites.
    Gradcheck {
        #[arg(long)]
        scope: String,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Merge metrics files from several runs into a comparison CSV.
    Report {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the default run configuration as JSON.
    DefaultConfig,
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            seed,
            count,
            out,
            config,
        } => {
            let scene_cfg = match config {
                Some(path) => RunConfig::load(&path)?.dataset.scene,
                None => SceneConfig::default(),
            };
            let (n, checksum) = run_gen_data(seed, count, &scene_cfg, &out)?;
            println!("wrote {n} scenes to {} (fnv1a {checksum:016x})", out.display());
        }
        Command::TrainTeacher { config, data, out } => {
            let cfg = RunConfig::load(&config)?;
            let val_map = run_train_teacher(&cfg, &data, &out)?;
            println!(
                "teacher done: final val_map {val_map:.4}; checkpoint and metrics in {}",
                out.display()
            );
        }
        Command::Distill {
            config,
            teacher_ckpt,
            data,
            out,
            mode,
        } => {
            let cfg = RunConfig::load(&config)?;
            let mode: DistillMode = mode.parse()?;
            let val_map = run_distill(&cfg, mode, &teacher_ckpt, &data, &out)?;
            println!(
                "{mode} student done: final val_map {val_map:.4}; outputs in {}",
                out.display()
            );
        }
        Command::Eval { ckpt, data, pr_out } => {
            let default_pr = ckpt.with_extension("pr.csv");
            let pr_path = pr_out.unwrap_or(default_pr);
            let result = run_eval(&ckpt, &data, Some(&pr_path))?;
            let per_class: Vec<serde_json::Value> = result
                .per_class
                .iter()
                .map(|(class, ap)| serde_json::json!({"class": class, "ap": ap}))
                .collect();
            let summary = serde_json::json!({"per_class": per_class, "map": result.map});
            println!("{summary}");
            eprintln!("pr curves written to {}", pr_path.display());
        }
        Command::Gradcheck { scope, seed } => {
            let scope: GradCheckScope = scope.parse()?;
            let report = run_scope(scope, seed)?;
            for c in &report.checks {
                println!(
                    "{} {:<40} rel {:.3e} abs {:.3e}",
                    if c.passed() { "PASS" } else { "FAIL" },
                    c.name,
                    c.max_rel,
                    c.max_abs
                );
            }
            report.into_result()?;
            println!("all gradient checks passed");
        }
        Command::Report { runs, out } => {
            run_report(&runs, &out)?;
            println!("report written to {}", out.display());
        }
        Command::DefaultConfig => {
            println!("{}", RunConfig::default_desk().to_json());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
