//! Command-line interface for coherent-risk experiments.
//!
//! Exit codes: 0 success, 1 config error, 2 numerical failure, 3 tolerance
//! breach (grad-check).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use coherent_risk::error::RiskError;
use coherent_risk::harness::{
    cmd_bench_assets, cmd_critic, cmd_eval_risk, cmd_grad_check, cmd_optimize, ExperimentConfig,
};

#[derive(Parser)]
#[command(name = "crisk", about = "Coherent-risk policy gradient experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(clap::Args)]
struct Common {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output path; the config's "output" field, else stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Output format where both are supported.
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
}

#[derive(Subcommand)]
enum Command {
    /// Asset-selection benchmark: per-iteration selection probabilities.
    BenchAssets(Common),
    /// Finite-difference validation of the configured exact estimator.
    GradCheck(Common),
    /// SGD on the configured objective; writes the trace and final theta.
    Optimize(Common),
    /// Risk-sensitive value function for the configured policy parameter.
    Critic(Common),
    /// Risk value and saddle data for an inline distribution.
    EvalRisk(Common),
}

fn emit(common: &Common, cfg: &ExperimentConfig, text: &str) -> Result<(), RiskError> {
    let path = common
        .out
        .clone()
        .or_else(|| cfg.output.clone().map(PathBuf::from));
    match path {
        Some(p) => std::fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), RiskError> {
    match &cli.command {
        Command::BenchAssets(c) => {
            let cfg = load(c)?;
            let csv = cmd_bench_assets(&cfg, c.seed)?;
            let text = match c.format {
                Format::Csv => csv,
                Format::Json => csv_to_json(&csv)?,
            };
            emit(c, &cfg, &text)
        }
        Command::GradCheck(c) => {
            let cfg = load(c)?;
            let report = cmd_grad_check(&cfg, c.seed)?;
            let text = serde_json::to_string_pretty(&report).map_err(RiskError::from)? + "\n";
            emit(c, &cfg, &text)?;
            if report.pass {
                Ok(())
            } else {
                Err(RiskError::ToleranceBreach(format!(
                    "max relative deviation {:.3e} exceeds {:.1e}",
                    report.max_rel_dev, report.tol
                )))
            }
        }
        Command::Optimize(c) => {
            let cfg = load(c)?;
            let result = cmd_optimize(&cfg, c.seed)?;
            let csv = result.trace.to_csv();
            let text = match c.format {
                Format::Csv => csv,
                Format::Json => csv_to_json(&csv)?,
            };
            emit(c, &cfg, &text)?;
            // Final parameter next to the trace when writing to a file.
            if let Some(p) = c
                .out
                .clone()
                .or_else(|| cfg.output.clone().map(PathBuf::from))
            {
                let mut theta_path = p.into_os_string();
                theta_path.push(".theta.json");
                std::fs::write(
                    theta_path,
                    serde_json::to_string_pretty(&result.final_theta).map_err(RiskError::from)?,
                )?;
            }
            if let Some(reason) = &result.trace.aborted {
                return Err(RiskError::InvalidMdp(format!("run aborted: {reason}")));
            }
            Ok(())
        }
        Command::Critic(c) => {
            let cfg = load(c)?;
            let json = cmd_critic(&cfg, c.seed)?;
            emit(c, &cfg, &(json + "\n"))
        }
        Command::EvalRisk(c) => {
            let cfg = load(c)?;
            let report = cmd_eval_risk(&cfg)?;
            let text = match c.format {
                Format::Json => {
                    serde_json::to_string_pretty(&report).map_err(RiskError::from)? + "\n"
                }
                Format::Csv => {
                    let mut s = String::from("objective,rho,lam_p\n");
                    s.push_str(&format!(
                        "{},{},{}\n",
                        report.objective,
                        report.rho,
                        report.lam_p.map_or(String::new(), |v| v.to_string())
                    ));
                    s
                }
            };
            emit(c, &cfg, &text)
        }
    }
}

fn load(common: &Common) -> Result<ExperimentConfig, RiskError> {
    let text = std::fs::read_to_string(&common.config)?;
    ExperimentConfig::from_json(&text)
}

fn csv_to_json(csv: &str) -> Result<String, RiskError> {
    let mut lines = csv.trim().lines();
    let header: Vec<&str> = lines.next().unwrap_or("").split(',').collect();
    let rows: Vec<Vec<f64>> = lines
        .map(|l| {
            l.split(',')
                .map(|v| v.parse().unwrap_or(f64::NAN))
                .collect()
        })
        .collect();
    let doc = serde_json::json!({ "columns": header, "rows": rows });
    Ok(serde_json::to_string_pretty(&doc).map_err(RiskError::from)? + "\n")
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
