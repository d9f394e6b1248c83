// SPDX-License-Identifier: MIT OR Apache-2.0

//! `airlens`: run scenarios, attribute heads, rectify decoding, check the
//! random-walk theory and render attention heatmaps.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use airlens::harness::pipeline::{self, Format};
use airlens::harness::{emit_heatmap, execute, resolve_sensitive_heads, RunConfig, ScenarioKind};
use airlens::Error;
use clap::{Parser, Subcommand, ValueEnum};

/// Environment variable overriding the output directory (below `--out`).
const OUT_ENV: &str = "AIRLENS_OUT";

#[derive(Parser, Debug)]
#[command(name = "airlens", version, about = "Attention imbalance analysis and rectification on a toy transformer")]
struct Cli {
    /// TOML run configuration; every key is optional.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory (overrides AIRLENS_OUT and output.dir).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Seed for the model, prompts, shuffles and theory sampling.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// random | planted-text-bias | planted-hallucination-head
    #[arg(long, global = true, value_name = "NAME")]
    scenario: Option<String>,
    /// Table format for per-token and per-head results.
    #[arg(long, global = true, value_enum, default_value_t = FormatArg::Csv)]
    format: FormatArg,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FormatArg {
    Json,
    Csv,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Baseline decode, TAI, threshold, flagged tokens and attention dumps.
    Simulate,
    /// Erasure attribution of every head; writes selection.json.
    Attribute,
    /// Paired baseline and rectified decodes.
    Rectify {
        /// Sensitive heads: a selection.json or a JSON list of {layer, head}.
        #[arg(long, value_name = "FILE")]
        heads: Option<PathBuf>,
    },
    /// Moment, variance and propagation-probability checks plus rho sweeps.
    Theory,
    /// Render a CSV attention dump as SVG.
    Heatmap {
        input: PathBuf,
        /// Defaults to INPUT with an .svg extension.
        output: Option<PathBuf>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Io(_) => 4,
        _ => 3,
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, Error> {
    let mut cfg = match &cli.config {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
            RunConfig::from_toml_str(&text)?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(name) = &cli.scenario {
        cfg.scenario.kind =
            ScenarioKind::parse(name).ok_or_else(|| Error::Config(format!("unknown scenario {name:?}")))?;
    }
    if let Some(dir) = &cli.out {
        cfg.output.dir = dir.clone();
    } else if let Some(dir) = std::env::var_os(OUT_ENV).filter(|v| !v.is_empty()) {
        cfg.output.dir = PathBuf::from(dir);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn report(dir: &Path, what: &str) {
    println!("{what}; artifacts in {}", dir.display());
}

fn run(cli: &Cli) -> Result<(), Error> {
    let format = match cli.format {
        FormatArg::Json => Format::Json,
        FormatArg::Csv => Format::Csv,
    };
    if let Command::Heatmap { input, output } = &cli.command {
        let text = std::fs::read_to_string(input)?;
        let svg = emit_heatmap(&text)?;
        let out = output.clone().unwrap_or_else(|| input.with_extension("svg"));
        airlens::harness::output::write_atomic(&out, svg.as_bytes())?;
        println!("wrote {}", out.display());
        return Ok(());
    }
    let cfg = load_config(cli)?;
    let dir = cfg.output.dir.clone();
    match &cli.command {
        Command::Simulate => {
            let s = execute(&dir, || pipeline::run_simulate(&cfg, format))?;
            report(
                &dir,
                &format!(
                    "simulate: threshold {:.6}, {} flagged, {} labeled",
                    s.report.threshold,
                    s.report.flagged.len(),
                    s.report.labeled.len()
                ),
            );
        }
        Command::Attribute => {
            let s = execute(&dir, || pipeline::run_attribute(&cfg, format))?;
            let top: Vec<String> = s.ranking.order.iter().take(5).map(|h| h.to_string()).collect();
            report(
                &dir,
                &format!(
                    "attribute: top heads {}; {} head(s) above the null quantile",
                    top.join(" "),
                    s.exceeding_null.len()
                ),
            );
        }
        Command::Rectify { heads } => {
            let sensitive = resolve_sensitive_heads(&cfg, heads.as_deref(), &dir)?;
            let s = execute(&dir, || pipeline::run_rectify(&cfg, sensitive))?;
            let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.6}"));
            report(
                &dir,
                &format!(
                    "rectify: mean MAI(text, visual) {} -> {}, flagged {} -> {}",
                    fmt(s.mean_mai_baseline),
                    fmt(s.mean_mai_air),
                    s.flagged_baseline,
                    s.flagged_air
                ),
            );
        }
        Command::Theory => {
            let s = execute(&dir, || pipeline::run_theory(&cfg))?;
            let groups: Vec<String> = s.groups.iter().map(|(g, a)| format!("{g}={a}")).collect();
            report(&dir, &format!("theory: {}", groups.join(" ")));
        }
        Command::Heatmap { .. } => unreachable!("handled above"),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            match &e {
                Error::Io(io) => eprintln!("airlens: I/O error: {io}"),
                _ => eprintln!("airlens: {e}"),
            }
            ExitCode::from(exit_code(&e))
        }
    }
}
