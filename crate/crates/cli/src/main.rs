use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hypercomplete::commands::{self, CompleteArgs, EvalArgs};
use hypercomplete::runconfig::RunConfig;
use hypercomplete::selftest::Options;
use hypercomplete::synthetic;
use hypercomplete::Error;

/// Point cloud completion with selective state-space encoders.
#[derive(Debug, Parser)]
#[command(name = "hypercomplete", version)]
struct Cli {
    /// Run configuration file (`key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Model preset applied before the config file: pcn, shapenet55, kitti, toy, tiny.
    #[arg(long, global = true)]
    preset: Option<String>,
    /// Overrides the model seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Complete one partial cloud.
    Complete {
        input: PathBuf,
        output: PathBuf,
        /// Trained weights; a fresh model is used when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Also write the new hyperpoints next to the output.
        #[arg(long)]
        emit_hyperpoints: bool,
        /// Append the raw input points to the completed cloud.
        #[arg(long)]
        concat_input: bool,
    },
    /// Score predictions against ground truth with matching file names.
    Eval {
        pred_dir: PathBuf,
        gt_dir: PathBuf,
        /// Partial inputs, enables fidelity.
        #[arg(long)]
        input_dir: Option<PathBuf>,
        /// Where per_shape.csv and summary.json go.
        #[arg(long, default_value = "eval")]
        out: PathBuf,
        /// F-score distance threshold (defaults to the configured phi).
        #[arg(long)]
        phi: Option<f64>,
    },
    /// Fit the model to (partial, complete) pairs.
    ToyTrain {
        /// Directory with partial/ and complete/ subtrees.
        #[arg(long)]
        shapes: Option<PathBuf>,
        /// Output directory for model.ckpt and loss.csv.
        #[arg(long, default_value = "run")]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Write synthetic (partial, complete) pairs: sphere, plane, torus, cube.
    MakeFixtures {
        #[arg(long, default_value = "fixtures")]
        out: PathBuf,
        /// Pairs per shape.
        #[arg(long, default_value_t = 2)]
        per_shape: usize,
        #[arg(long, default_value_t = 256)]
        partial_points: usize,
        #[arg(long, default_value_t = 1024)]
        complete_points: usize,
    },
    /// Run the invariant suite.
    Selftest {
        /// Plant an error in the scan kernel (negative control).
        #[arg(long, hide = true)]
        corrupt_scan: bool,
    },
}

fn run_config(cli: &Cli, toy_default: bool) -> hypercomplete::Result<RunConfig> {
    let mut text = String::new();
    if let Some(p) = &cli.preset {
        text.push_str(&format!("preset = {p}\n"));
    } else if toy_default && cli.config.is_none() {
        text.push_str("preset = toy\n");
    }
    if let Some(path) = &cli.config {
        let body = std::fs::read_to_string(path).map_err(|e| Error::Io { path: path.clone(), source: e })?;
        text.push_str(&body);
    }
    let mut rc = RunConfig::parse(&text).map_err(|e| match (&cli.config, e) {
        (Some(p), Error::Config(m)) => Error::Config(format!("{}: {m}", p.display())),
        (_, e) => e,
    })?;
    if let Some(seed) = cli.seed {
        rc.model.seed = seed;
    }
    Ok(rc)
}

fn run(cli: &Cli) -> hypercomplete::Result<bool> {
    match &cli.command {
        Command::Complete { input, output, checkpoint, emit_hyperpoints, concat_input } => {
            let rc = run_config(cli, false)?;
            let s = commands::cmd_complete(
                &rc,
                &CompleteArgs {
                    input: input.clone(),
                    output: output.clone(),
                    checkpoint: checkpoint.clone(),
                    emit_hyperpoints: *emit_hyperpoints,
                    concat_input: *concat_input,
                },
            )?;
            println!("{}: {s}", output.display());
        }
        Command::Eval { pred_dir, gt_dir, input_dir, out, phi } => {
            let rc = run_config(cli, false)?;
            let r = commands::cmd_eval(&EvalArgs {
                pred_dir: pred_dir.clone(),
                gt_dir: gt_dir.clone(),
                input_dir: input_dir.clone(),
                out_dir: out.clone(),
                phi: phi.unwrap_or(rc.model.phi),
            })?;
            let o = &r.summary.overall;
            println!(
                "{} shapes: cd_l1 {:.6} cd_l2 {:.6} f_score {:.4}; {} skipped",
                o.count, o.cd_l1, o.cd_l2, o.f_score, r.summary.warnings
            );
            for s in &r.summary.skipped {
                eprintln!("warning: skipped {}: {}", s.id, s.reason);
            }
            println!("wrote {} and {}", r.csv_path.display(), r.json_path.display());
        }
        Command::ToyTrain { shapes, out, steps } => {
            let mut rc = run_config(cli, true)?;
            if let Some(s) = shapes {
                rc.shapes_dir = Some(s.clone());
            }
            if let Some(n) = steps {
                rc.steps = *n;
            }
            let every = (rc.steps / 20).max(1);
            let r = commands::cmd_toy_train(&rc, out, |rec| {
                if rec.step % every == 0 {
                    println!("step {:>5}  loss {:.6}  cd_l2 {:.6}", rec.step, rec.loss, rec.cd_l2);
                }
            })?;
            let rep = &r.report;
            println!(
                "cd_l2 {:.6} -> {:.6} ({:.1}% lower), {} tree evaluations, {:.1}s",
                rep.baseline_cd_l2,
                rep.final_cd_l2,
                (1.0 - rep.final_cd_l2 / rep.baseline_cd_l2) * 100.0,
                rep.mst_evaluations,
                r.elapsed.as_secs_f64()
            );
            println!("wrote {} and {}", r.checkpoint.display(), r.loss_csv.display());
        }
        Command::MakeFixtures { out, per_shape, partial_points, complete_points } => {
            let seed = cli.seed.unwrap_or(7);
            let pairs = synthetic::fixture_set(*per_shape, *partial_points, *complete_points, seed)?;
            synthetic::write_fixtures(out, &pairs)?;
            println!("wrote {} pairs under {}", pairs.len(), out.display());
        }
        Command::Selftest { corrupt_scan } => {
            let out = commands::cmd_selftest(Options { corrupt_scan: *corrupt_scan })?;
            println!("{out}");
            return Ok(out.passed());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
