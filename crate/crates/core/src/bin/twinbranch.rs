use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use twinbranch::harness::bench::{bench_dr1conv, write_bench, BenchConfig};
use twinbranch::harness::eval::eval_checkpoint;
use twinbranch::harness::model::parse_tasks;
use twinbranch::harness::train::{train_toy, TrainConfig, TrainStatus};
use twinbranch::harness::verify::{bench_checks, run_verification, VerifyOptions};
use twinbranch::routing::RoutingMode;
use twinbranch::Result;

#[derive(Parser)]
#[command(name = "twinbranch", version, about = "Rank-1 dynamic convolution toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Routing {
    Learned,
    PassThrough,
    Disabled,
}

impl From<Routing> for RoutingMode {
    fn from(r: Routing) -> Self {
        match r {
            Routing::Learned => RoutingMode::Learned,
            Routing::PassThrough => RoutingMode::PassThrough,
            Routing::Disabled => RoutingMode::Disabled,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Runs every acceptance check and writes verify_report.json.
    Verify {
        #[arg(long, default_value = "out/verify")]
        out: PathBuf,
        /// Negates dr1conv outputs inside the equivalence checks.
        #[arg(long)]
        flip_dr1conv_sign: bool,
        /// Comma-separated criterion numbers; all when omitted.
        #[arg(long, value_delimiter = ',')]
        criteria: Vec<u32>,
    },
    /// Trains the toy network on synthetic scenes.
    TrainToy {
        #[arg(long, default_value = "seg,depth,det3d")]
        tasks: String,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// JSON training config; command-line flags override its fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long, value_enum)]
        routing: Option<Routing>,
        #[arg(long, default_value = "out/train")]
        out: PathBuf,
    },
    /// Scores a checkpoint on held-out scenes and renders the first few.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 8)]
        scenes: usize,
        #[arg(long, default_value_t = 2)]
        renders: usize,
        #[arg(long, default_value = "out/eval")]
        out: PathBuf,
    },
    /// Times dr1conv against the per-position dynamic kernel.
    Bench {
        #[arg(long, default_value_t = 64)]
        c: usize,
        /// Spatial size as HxW.
        #[arg(long, default_value = "128x128", value_parser = parse_hw)]
        hw: (usize, usize),
        #[arg(long, default_value_t = 3)]
        kernel: usize,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "out/bench")]
        out: PathBuf,
    },
}

fn parse_hw(s: &str) -> std::result::Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HxW, got {s:?}"))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    Ok((parse(h)?, parse(w)?))
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Verify {
            out,
            flip_dr1conv_sign,
            criteria,
        } => {
            let report = run_verification(&VerifyOptions {
                flip_dr1conv_sign,
                criteria,
            })?;
            for c in &report.checks {
                println!("{c}");
            }
            fs::create_dir_all(&out)?;
            let path = out.join("verify_report.json");
            fs::write(&path, serde_json::to_vec_pretty(&report)?)?;
            let failed = report.failures().count();
            println!(
                "{} checks, {failed} failed, {:.1}s; report at {}",
                report.checks.len(),
                report.seconds,
                path.display()
            );
            Ok(report.passed)
        }
        Command::TrainToy {
            tasks,
            steps,
            seed,
            config,
            lr,
            routing,
            out,
        } => {
            let mut cfg = match &config {
                Some(p) => TrainConfig::from_json_file(p)?,
                None => TrainConfig::default(),
            };
            cfg.tasks = parse_tasks(&tasks)?;
            if let Some(s) = steps {
                cfg.steps = s;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(l) = lr {
                cfg.learning_rate = l;
            }
            if let Some(r) = routing {
                cfg.routing = r.into();
            }
            let report = train_toy(&cfg, Some(&out))?;
            if let (Some(first), Some(last)) = (report.trace.first(), report.trace.last()) {
                println!("step {:>5}  total {:.6}", first.step, first.total);
                println!("step {:>5}  total {:.6}", last.step, last.total);
            }
            if let Some(m) = &report.final_metrics {
                println!("{}", serde_json::to_string(m)?);
            }
            println!("outputs in {}", out.display());
            match &report.status {
                TrainStatus::Completed => Ok(true),
                TrainStatus::Aborted { step, reason } => {
                    eprintln!("aborted at step {step}: {reason}");
                    Ok(false)
                }
            }
        }
        Command::Eval {
            checkpoint,
            scenes,
            renders,
            out,
        } => {
            let report = eval_checkpoint(&checkpoint, scenes, &out, renders)?;
            println!("{}", serde_json::to_string_pretty(&report.metrics)?);
            println!("{} renders, report at {}", report.renders.len(), out.join("eval_report.json").display());
            Ok(true)
        }
        Command::Bench {
            c,
            hw,
            kernel,
            repeats,
            seed,
            out,
        } => {
            let report = bench_dr1conv(&BenchConfig {
                channels: c,
                height: hw.0,
                width: hw.1,
                kernel,
                repeats,
                seed,
            })?;
            for row in &report.rows {
                println!("{:<28} median {:.6}s", row.name, row.median_s);
            }
            for check in bench_checks(&report) {
                println!("{check}");
            }
            write_bench(&report, &out)?;
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
