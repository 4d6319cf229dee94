//! `softmask`: continual domain-adaptive pre-training experiments.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use softmask_cli::{cmd_importance, cmd_report, cmd_run};
use softmask_lm::config::Method;
use softmask_lm::importance::LossKind;

#[derive(Parser)]
#[command(
    name = "softmask",
    about = "Soft-masked continual pre-training on synthetic domain sequences",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

fn parse_method(s: &str) -> Result<Method, String> {
    Method::parse(s).ok_or_else(|| {
        format!("unknown method `{s}` (expected das, ncl, wo-contrast, wo-softmask, wo-init, or random-importance)")
    })
}

fn parse_loss_kind(s: &str) -> Result<String, String> {
    match s {
        "proxy_kl" | "mlm" => Ok(s.to_string()),
        _ => Err(format!("unknown loss kind `{s}` (expected proxy_kl or mlm)")),
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured methods over the configured seeds and write
    /// results.json / results.csv.
    Run {
        /// JSON run configuration.
        #[arg(long)]
        config: PathBuf,
        /// Override the config's method list (repeatable).
        #[arg(long = "method", value_parser = parse_method)]
        methods: Vec<Method>,
        /// Override the config's seed list (repeatable).
        #[arg(long = "seed")]
        seeds: Vec<u64>,
        /// Report directory; defaults to the config's output_dir, then
        /// $SOFTMASK_OUT/softmask-results, then ./softmask-results.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Measure unit importance of a checkpoint over a corpus file.
    Importance {
        /// Model checkpoint (JSON).
        #[arg(long)]
        checkpoint: PathBuf,
        /// Whitespace-tokenized UTF-8 corpus, one sequence per line.
        #[arg(long)]
        corpus: PathBuf,
        /// Loss to differentiate: proxy_kl (label-free) or mlm.
        #[arg(long, default_value = "proxy_kl", value_parser = parse_loss_kind)]
        loss_kind: String,
        /// Mask probability for the mlm loss kind.
        #[arg(long, default_value_t = 0.15)]
        mask_prob: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Snapshot output path.
        #[arg(long)]
        out: PathBuf,
        /// Units to print per layer.
        #[arg(long, default_value_t = 5)]
        top_k: usize,
    },
    /// Re-render the summary for a previously written results directory.
    Report {
        /// Directory containing results.json.
        #[arg(long)]
        dir: PathBuf,
        /// Also write an SVG accuracy plot.
        #[arg(long)]
        plot: bool,
    },
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Run { config, methods, seeds, out } => {
            cmd_run(&config, &methods, &seeds, out.as_deref())
        }
        Command::Importance { checkpoint, corpus, loss_kind, mask_prob, seed, out, top_k } => {
            let kind = match loss_kind.as_str() {
                "mlm" => LossKind::Mlm { mask_prob },
                _ => LossKind::ProxyKl,
            };
            cmd_importance(&checkpoint, &corpus, kind, seed, &out, top_k)
        }
        Command::Report { dir, plot } => cmd_report(&dir, plot),
    };
    ExitCode::from(code as u8)
}
