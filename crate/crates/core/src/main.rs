//! Command-line interface: `simulate`, `ppcurve`, `predict` and `verify`
//! subcommands over the Monte Carlo harness.
//!
//! Exit codes: 0 success, 1 failed verification, 2 validation error,
//! 3 capability error, 4 cost refusal, 5 i/o error.

use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use hdboot::harness::{
    emit_report, pp_curve, predict, report_to_csv, run_experiment, run_verification, Design,
    ExperimentConfig, Marginal, MethodSpec, RejectionReport, ReportFormat,
};
use hdboot::numeric::fmt_sig;
use hdboot::{Error, Result};

#[derive(Parser)]
#[command(
    name = "hdboot",
    about = "Bootstrap tests for high-dimensional max statistics and their coverage predictions",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate rejection rates for the configured bootstrap methods.
    Simulate(RunArgs),
    /// Rejection-rate sweep over an increasing alpha grid (P-P curve data).
    Ppcurve(RunArgs),
    /// Theory-side rejection predictions for the configured design.
    Predict(RunArgs),
    /// Run the built-in oracle suites (weight moments, Stein identities,
    /// small-dimension integral cross-checks, univariate reduction).
    Verify,
}

#[derive(Args, Clone)]
struct RunArgs {
    /// JSON config file mirroring the experiment configuration; command-line
    /// flags override file values.
    #[arg(long)]
    config: Option<String>,
    /// copula1 | copula2 | factor | iid-spherical
    #[arg(long)]
    design: Option<String>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    d: Option<usize>,
    /// asym | sym
    #[arg(long)]
    marginal: Option<String>,
    /// gaussian | mammen | rademacher | beta:NU | empirical | double:NU,B2
    /// (repeatable)
    #[arg(long = "method")]
    methods: Vec<String>,
    /// First-level bootstrap replications.
    #[arg(long)]
    b: Option<usize>,
    /// Significance level (repeatable; increasing grid for ppcurve).
    #[arg(long = "alpha")]
    alphas: Vec<f64>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Floating-point work budget in fused multiply-adds.
    #[arg(long)]
    budget: Option<f64>,
    /// Attach theory predictions to the simulation report.
    #[arg(long, default_value_t = false)]
    predict: bool,
    /// Output file; stdout when omitted.
    #[arg(long)]
    out: Option<String>,
    /// csv | json
    #[arg(long, default_value = "csv")]
    format: String,
}

impl RunArgs {
    fn to_config(&self) -> Result<ExperimentConfig> {
        let mut cfg: ExperimentConfig = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
                    path: path.clone(),
                    source: e,
                })?;
                serde_json::from_str(&text)
                    .map_err(|e| Error::validation(format!("config parse error: {e}")))?
            }
            None => ExperimentConfig {
                design: Design::CopulaII,
                rho: 0.2,
                n: 200,
                d: 400,
                marginal: Marginal::Asymmetric,
                methods: Vec::new(),
                alphas: Vec::new(),
                b: hdboot::harness::DEFAULT_B,
                trials: 1000,
                seed: 1,
                threads: None,
                budget: None,
                factor_u: None,
                factor_v: None,
                iid_law: None,
                aux_rows: None,
                include_predictions: false,
            },
        };
        if let Some(s) = &self.design {
            cfg.design = s.parse()?;
        }
        if let Some(v) = self.rho {
            cfg.rho = v;
        }
        if let Some(v) = self.n {
            cfg.n = v;
        }
        if let Some(v) = self.d {
            cfg.d = v;
        }
        if let Some(s) = &self.marginal {
            cfg.marginal = s.parse()?;
        }
        if !self.methods.is_empty() {
            cfg.methods = self
                .methods
                .iter()
                .map(|s| s.parse::<MethodSpec>())
                .collect::<Result<_>>()?;
        }
        if let Some(v) = self.b {
            cfg.b = v;
        }
        if !self.alphas.is_empty() {
            cfg.alphas = self.alphas.clone();
        }
        if let Some(v) = self.trials {
            cfg.trials = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if self.threads.is_some() {
            cfg.threads = self.threads;
        }
        if self.budget.is_some() {
            cfg.budget = self.budget;
        }
        if self.predict {
            cfg.include_predictions = true;
        }
        Ok(cfg)
    }

    fn deliver(&self, report: &RejectionReport) -> Result<()> {
        let format: ReportFormat = self.format.parse()?;
        match &self.out {
            Some(path) => emit_report(report, format, path),
            None => {
                let body = match format {
                    ReportFormat::Csv => report_to_csv(report),
                    ReportFormat::Json => hdboot::harness::report_to_json(report),
                };
                print!("{body}");
                Ok(())
            }
        }
    }
}

fn run() -> Result<i32> {
    let cli = Cli::parse();
    match cli.command {
        Command::Simulate(args) => {
            let cfg = args.to_config()?;
            let report = run_experiment(&cfg)?;
            args.deliver(&report)?;
            Ok(0)
        }
        Command::Ppcurve(args) => {
            let cfg = args.to_config()?;
            let report = pp_curve(&cfg)?;
            args.deliver(&report)?;
            Ok(0)
        }
        Command::Predict(args) => {
            let cfg = args.to_config()?;
            let rows = predict(&cfg)?;
            println!("method,alpha,predicted");
            for row in rows {
                println!(
                    "{},{},{}",
                    row.method,
                    fmt_sig(row.alpha, 6),
                    fmt_sig(row.predicted, 6)
                );
            }
            Ok(0)
        }
        Command::Verify => {
            let checks = run_verification();
            let mut ok = true;
            for c in &checks {
                if c.passed {
                    println!("ok   {}", c.name);
                } else {
                    println!("FAIL {}: {}", c.name, c.detail);
                    ok = false;
                }
            }
            Ok(if ok { 0 } else { 1 })
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => ExitCode::from(code as u8),
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
