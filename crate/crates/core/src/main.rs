use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use purekv::harness::{load_config, render_report, run_experiment, run_validation, ReportFormat};
use purekv::masks::{build_mask, PatternSpec, TokenLayout};
use purekv::{Error, Result};

#[derive(Parser)]
#[command(name = "purekv", version, about = "Cross-layer KV-cache compression experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment grid and emit a metrics report.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum, default_value = "json")]
        format: ReportFormat,
        /// Write to this file instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the model and workload seeds.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run only the cross-layer rank-correlation validation.
    Validate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print a sparsity mask as a 0/1 grid.
    Mask {
        /// `T,P,prefix,suffix`
        #[arg(long)]
        layout: String,
        /// dense, local[:W], atrous[:S], spatial, temporal, spatial_temporal
        #[arg(long)]
        pattern: String,
    },
}

fn parse_layout(s: &str) -> Result<TokenLayout> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Config(format!("bad layout `{s}`, expected T,P,prefix,suffix")))?;
    match parts[..] {
        [t, p, prefix, suffix] => TokenLayout::uniform(prefix, t, p, suffix),
        _ => Err(Error::Config(format!(
            "bad layout `{s}`, expected T,P,prefix,suffix"
        ))),
    }
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run {
            config,
            format,
            out,
            seed,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(seed) = seed {
                cfg = cfg.with_seed(seed);
            }
            let report = run_experiment(&cfg)?;
            match out {
                Some(path) => purekv::harness::emit_report(&report, format, &path)?,
                None => print!("{}", render_report(&report, format)?),
            }
        }
        Command::Validate { config, seed } => {
            let mut cfg = load_config(&config)?;
            if let Some(seed) = seed {
                cfg = cfg.with_seed(seed);
            }
            let entries = run_validation(&cfg)?;
            let text = serde_json::to_string_pretty(&entries)
                .map_err(|e| Error::Runtime(e.to_string()))?;
            println!("{text}");
        }
        Command::Mask { layout, pattern } => {
            let layout = parse_layout(&layout)?;
            let pattern = pattern.parse::<PatternSpec>()?.resolve(&layout);
            print!("{}", build_mask(&layout, &pattern)?.to_text_grid());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 1 } else { 2 })
        }
    }
}
