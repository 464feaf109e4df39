use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dtml::experiment::{
    cmd_ablate, cmd_convert, cmd_eval, cmd_generate, cmd_train, exit_code, ExperimentConfig,
    Overrides,
};
use dtml::trainer::Variant;
use dtml::{DtmlError, Result};

#[derive(Parser)]
#[command(name = "dtml", version, about = "Dual-task mutual learning for 3D segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset and its manifest.
    Generate(Common),
    /// Train both networks.
    Train(Common),
    /// Score a checkpoint on the test partition.
    Eval(Common),
    /// Run the ablation matrix over several seeds.
    Ablate(Common),
    /// Convert between masks and signed distance maps.
    Convert(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// dtml, ms_only or md_only.
    #[arg(long, value_parser = parse_variant)]
    variant: Option<Variant>,
    #[arg(long)]
    k: Option<f64>,
    #[arg(long)]
    threshold: Option<f64>,
}

fn parse_variant(s: &str) -> std::result::Result<Variant, String> {
    Variant::parse(s).ok_or_else(|| format!("unknown variant {s:?}"))
}

fn resolve(c: &Common) -> Result<ExperimentConfig> {
    let overrides = Overrides {
        seed: c.seed,
        out_dir: c.out.clone(),
        variant: c.variant,
        k: c.k,
        threshold: c.threshold,
        num_workers: None,
    }
    .with_env()?;
    ExperimentConfig::load(&c.config)
        .map_err(|e| match e {
            DtmlError::IoFailure { .. } => DtmlError::InvalidConfig(e.to_string()),
            e => e,
        })?
        .resolve(&overrides)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(c) => {
            let m = cmd_generate(&resolve(&c)?)?;
            println!(
                "labeled {} unlabeled {} test {}",
                m.labeled.len(),
                m.unlabeled.len(),
                m.test.len()
            );
        }
        Command::Train(c) => {
            let s = cmd_train(&resolve(&c)?)?;
            println!("{}", serde_json::to_string(&s).expect("summary serializes"));
        }
        Command::Eval(c) => {
            let r = cmd_eval(&resolve(&c)?)?;
            println!(
                "dice {:.4}±{:.4} jaccard {:.4} asd {:.3} hd95 {:.3}",
                r.mean.dice, r.std.dice, r.mean.jaccard, r.mean.asd, r.mean.hd95
            );
        }
        Command::Ablate(c) => {
            let cfg = resolve(&c)?;
            for row in cmd_ablate(&cfg, c.variant)?.rows {
                println!("{:<22} dice {:.4}±{:.4}", row.label(), row.mean.dice, row.std.dice);
            }
        }
        Command::Convert(c) => {
            let out = cmd_convert(&resolve(&c)?)?;
            println!("{}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
