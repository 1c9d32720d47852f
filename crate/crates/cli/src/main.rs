use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use multigran_core::metrics::render_table;
use multigran_core::objectives::Ablation;
use multigran_core::pipeline::{
    cmd_evaluate, cmd_explain, cmd_generate, cmd_train_explainers, cmd_train_verifier, RunConfig,
};
use multigran_core::{Error, Result};

/// Token and sentence rationale extraction for claim verification.
#[derive(Debug, Parser)]
#[command(name = "multigran", version)]
struct Cli {
    /// JSON run configuration; defaults apply to missing fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for model initialization and training.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides the config).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the synthetic train/dev/test splits and vocabulary.
    Generate,
    /// Train the verifier.
    TrainVerifier {
        /// Continue from the saved checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Train token and sentence explainers against the frozen verifier.
    TrainExplainers {
        /// Drop one loss term.
        #[arg(long, value_parser = parse_ablation)]
        ablate: Option<Ablation>,
    },
    /// Score rationales on a split.
    Evaluate {
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long, value_parser = parse_ablation)]
        ablate: Option<Ablation>,
    },
    /// Render rationales as HTML and text.
    Explain {
        #[arg(long, default_value = "test")]
        split: String,
        /// JSONL file of instances to explain instead of the split.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        limit: usize,
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long, value_parser = parse_ablation)]
        ablate: Option<Ablation>,
    },
}

fn parse_ablation(s: &str) -> std::result::Result<Ablation, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = config(cli)?;
    match &cli.command {
        Command::Generate => {
            let s = cmd_generate(&cfg)?;
            for (name, n) in &s.counts {
                println!("{name}: {n} instances");
            }
            println!("wrote {}", s.dir.display());
        }
        Command::TrainVerifier { resume } => {
            let s = cmd_train_verifier(&cfg, *resume)?;
            for e in &s.log.epochs {
                println!("epoch {:>3}  loss {:.4}  dev acc {:.4}", e.epoch, e.train_loss, e.dev_accuracy);
            }
            println!("best dev accuracy {:.4} (epoch {})", s.dev_accuracy, s.log.best_epoch);
            println!("wrote {}", s.checkpoint.display());
        }
        Command::TrainExplainers { ablate } => {
            let s = cmd_train_explainers(&cfg, *ablate)?;
            println!("epoch  total    fidelity consistency sal-sent sal-tok  l0");
            for e in &s.log.epochs {
                let c = e.components;
                println!(
                    "{:>5}  {:.4}   {:.4}   {:.4}      {:.4}   {:.4}   {:.3}",
                    e.epoch, e.total, c.fidelity, c.consistency, c.salience_sentence, c.salience_token, c.l0
                );
            }
            println!("verifier hash {} (unchanged)", s.verifier_hash_after);
            println!("wrote {}", s.checkpoint.display());
        }
        Command::Evaluate { split, tau, ablate } => {
            let o = cmd_evaluate(&cfg, split, *ablate, *tau)?;
            print!("{}", render_table(&o.report));
            if o.report.token_spearman.is_none() && o.report.token_f1.is_none() {
                println!("token agreement omitted: no gold token labels");
            }
            println!("wrote {}", o.path.display());
        }
        Command::Explain { split, input, limit, tau, ablate } => {
            let o = cmd_explain(&cfg, split, input.as_deref(), *ablate, *tau, *limit)?;
            print!("{}", o.terminal);
            if o.empty > 0 {
                log::warn!("{} instance(s) have an empty rationale", o.empty);
            }
            println!("wrote {}", o.html_path.display());
        }
    }
    Ok(())
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => e.exit(),
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("error code=2 kind=usage: {}", one_line(first));
            return ExitCode::from(2);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error code={} kind={}: {}", e.exit_code(), e.kind(), one_line(&e.to_string()));
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
