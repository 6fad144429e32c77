//! `softnce` command line: estimation benchmarks, training runs, sweeps,
//! and audit suites. See the library crate for the underlying machinery.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use softnce::losses::LossId;
use softnce_cli::config::{self, ExperimentConfig, KlOver, LabelTheta};
use softnce_cli::output::write_json;
use softnce_cli::runner::{run_estimate, run_sweep, run_train};
use softnce_cli::verify::{run_grad_check, run_verify, VerifyOptions};
use softnce_cli::CliError;

#[derive(Parser)]
#[command(name = "softnce")]
#[command(about = "Contrastive conditional density estimation experiments")]
#[command(version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand: config file, overrides, output dir.
#[derive(Args)]
struct ConfigArgs {
    /// JSON config file merged over the protocol defaults.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Dotted-path override, e.g. --set train.batch_size=256. Repeatable;
    /// wins over the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Output directory; wins over the config's output_dir.
    #[arg(long, value_name = "DIR")]
    output: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum NoiseFlag {
    Uniform,
    Empirical,
}

/// Flags for the experiment-running subcommands.
#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: ConfigArgs,

    /// Concurrent cells; results are merged deterministically either way.
    #[arg(long, default_value_t = 1)]
    jobs: usize,

    /// Probe set for the estimation-error KL.
    #[arg(long, value_enum)]
    kl_over: Option<KlOver>,

    /// Logit scale of the conditional labeling model.
    #[arg(long, value_enum)]
    label_theta: Option<LabelTheta>,

    /// Noise marginal for the contrastive losses.
    #[arg(long, value_enum)]
    noise: Option<NoiseFlag>,

    /// Noise-sampled extra negatives per soft-target InfoNCE batch.
    #[arg(long, value_name = "N")]
    extra_negatives: Option<usize>,
}

impl RunArgs {
    /// Dedicated flags become trailing overrides so they win over --set.
    fn resolve(&self) -> Result<ExperimentConfig, CliError> {
        let mut sets = self.common.set.clone();
        if let Some(kl_over) = self.kl_over {
            let value = match kl_over {
                KlOver::Unique => "unique",
                KlOver::Full => "full",
            };
            sets.push(format!("kl_over={value}"));
        }
        if let Some(label_theta) = self.label_theta {
            let value = match label_theta {
                LabelTheta::Unit => "unit",
                LabelTheta::Scaled => "scaled",
            };
            sets.push(format!("label_theta={value}"));
        }
        if let Some(noise) = self.noise {
            let value = match noise {
                NoiseFlag::Uniform => "uniform",
                NoiseFlag::Empirical => "empirical",
            };
            sets.push(format!("train.noise={value}"));
        }
        if let Some(extra) = self.extra_negatives {
            sets.push(format!("train.extra_negatives={extra}"));
        }
        config::resolve(self.common.config.as_deref(), &sets)
    }

    fn out_dir(&self, config: &ExperimentConfig) -> PathBuf {
        self.common
            .output
            .clone()
            .unwrap_or_else(|| config.output_dir.clone())
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train NLL and InfoNCE per (alignment, seed) and report the KL of each
    /// model's conditional from the labeling ground truth.
    Estimate(RunArgs),

    /// Train one model; write checkpoint, accuracy/calibration metrics, and
    /// reliability-diagram data.
    Train(RunArgs),

    /// Cartesian sweep over the configured axes and seeds.
    Sweep(RunArgs),

    /// Run the audit suites: smoothing bound, gradient checks, reduction and
    /// energy-form identities. Exits 0 iff everything passes.
    Verify {
        #[command(flatten)]
        common: ConfigArgs,

        /// Random joints for the smoothing-bound audit.
        #[arg(long, default_value_t = 200)]
        joints: usize,

        /// Epsilon grid size including both endpoints.
        #[arg(long, default_value_t = 11)]
        eps_grid: usize,

        /// Random instances per (loss, scoring) for the gradient suite.
        #[arg(long, default_value_t = 20)]
        instances: usize,

        #[arg(long, default_value_t = 0)]
        seed: u64,

        /// Test hook: corrupt one analytic gradient; the run must fail.
        #[arg(long, hide = true)]
        inject_fault: bool,
    },

    /// Finite-difference check of the analytic gradients.
    GradCheck {
        /// Loss to check, or "all".
        #[arg(long, default_value = "all")]
        loss: String,

        #[arg(long, default_value_t = 100)]
        instances: usize,

        #[arg(long, default_value_t = 1e-5)]
        step: f64,

        #[arg(long, default_value_t = 1e-5)]
        tolerance: f64,

        #[arg(long, default_value_t = 0)]
        seed: u64,

        /// Optional path for the JSON report.
        #[arg(long, value_name = "PATH")]
        output: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // Usage problems are config errors (exit 1); help/version exit 0.
            let code = if err.exit_code() == 0 { 0 } else { 1 };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Estimate(args) => {
            let config = args.resolve()?;
            let out_dir = args.out_dir(&config);
            let output = run_estimate(&config, args.jobs, &out_dir)?;
            let flagged = output.rows.iter().filter(|r| r.status != "ok").count();
            for row in &output.summary {
                if row.metric == "kl_median" {
                    println!(
                        "alignment {:>5.1}%  {:<8} median KL {:.6}  (n={})",
                        row.alignment_percent, row.loss_id, row.value, row.n_seeds
                    );
                }
            }
            if flagged > 0 {
                println!("{flagged} rows flagged non-finite");
            }
            println!("wrote {}", out_dir.join("estimate.csv").display());
            Ok(())
        }
        Command::Train(args) => {
            let config = args.resolve()?;
            let out_dir = args.out_dir(&config);
            let output = run_train(&config, &out_dir)?;
            println!(
                "{}: top1 {:.4}  top5 {:.4}  ece {:.4}  (best epoch {} of {})",
                output.loss_id, output.top1, output.top5, output.ece,
                output.best_epoch, output.epochs_run
            );
            println!("wrote {}", out_dir.join("train_metrics.json").display());
            Ok(())
        }
        Command::Sweep(args) => {
            let config = args.resolve()?;
            let out_dir = args.out_dir(&config);
            let rows = run_sweep(&config, args.jobs, &out_dir)?;
            println!("{} rows", rows.len());
            println!("wrote {}", out_dir.join("sweep.csv").display());
            Ok(())
        }
        Command::Verify {
            common,
            joints,
            eps_grid,
            instances,
            seed,
            inject_fault,
        } => {
            let config = config::resolve(common.config.as_deref(), &common.set)?;
            let out_dir = common.output.unwrap_or_else(|| config.output_dir.clone());
            let options = VerifyOptions {
                joints,
                eps_grid,
                instances,
                seed,
                inject_fault,
            };
            let report = run_verify(&options)?;
            for suite in &report.suites {
                println!(
                    "{:<20} checks {:>6}  failures {:>3}  worst {:.3e}",
                    suite.name, suite.checks, suite.failures, suite.worst
                );
            }
            std::fs::create_dir_all(&out_dir)?;
            let report_path = out_dir.join("verify_report.json");
            write_json(&report_path, &report)?;
            println!("wrote {}", report_path.display());
            if report.passed {
                println!("PASS");
                Ok(())
            } else {
                Err(CliError::Audit("verify suites failed".into()))
            }
        }
        Command::GradCheck {
            loss,
            instances,
            step,
            tolerance,
            seed,
            output,
        } => {
            let losses: Vec<LossId> = if loss == "all" {
                LossId::ALL.to_vec()
            } else {
                vec![loss
                    .parse()
                    .map_err(|_| CliError::Config(format!("unknown loss {loss:?}")))?]
            };
            let report = run_grad_check(&losses, instances, step, tolerance, seed)?;
            for row in &report.rows {
                println!(
                    "{:<12} {:<7} instances {:>4}  max rel error {:.3e}  {}",
                    row.loss,
                    row.scoring,
                    row.instances,
                    row.max_rel_error,
                    if row.passed { "ok" } else { "FAIL" }
                );
            }
            if let Some(path) = output {
                write_json(&path, &report)?;
                println!("wrote {}", path.display());
            }
            if report.passed {
                Ok(())
            } else {
                Err(CliError::Audit(format!(
                    "gradient check exceeded tolerance {tolerance:e}"
                )))
            }
        }
    }
}
