use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use orewatch::pipeline::{run_stage, PipelineConfig, Stage};

/// Label-free ore/waste mapping of hyperspectral mine-face imagery.
#[derive(Debug, Parser)]
#[command(name = "orewatch", version)]
struct Cli {
    /// synth | train-sae | encode | cluster | extract | pretrain-cnn |
    /// train-cnn | classify | eval | report | all
    stage: String,

    /// `key = value` run configuration; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Run seed, propagated to every stage.
    #[arg(long)]
    seed: Option<u64>,

    /// Run directory for artifacts and manifests.
    #[arg(long)]
    out: Option<PathBuf>,

    /// Override one config key, e.g. `--set cnn.epochs=50`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Print the resolved configuration and exit.
    #[arg(long)]
    print_config: bool,
}

fn resolve(cli: &Cli) -> Result<PipelineConfig, String> {
    let mut config = match &cli.config {
        Some(p) => PipelineConfig::read(p).map_err(|e| e.to_string())?,
        None => PipelineConfig::default(),
    };
    for kv in &cli.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| format!("--set expects KEY=VALUE, got {kv:?}"))?;
        config.set(k.trim(), v).map_err(|m| format!("--set {}: {m}", k.trim()))?;
    }
    if let Some(seed) = cli.seed {
        config.set_seed(seed);
    }
    if let Some(out) = &cli.out {
        config.out_dir = out.clone();
    }
    config.validate().map_err(|e| e.to_string())?;
    Ok(config)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let stage: Stage = match cli.stage.parse() {
        Ok(s) => s,
        Err(e) => {
            eprintln!("orewatch: {e}");
            return ExitCode::from(2);
        }
    };
    let config = match resolve(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("orewatch: configuration: {e}");
            return ExitCode::from(2);
        }
    };
    if cli.print_config {
        print!("{}", config.to_text());
        return ExitCode::SUCCESS;
    }
    match run_stage(stage, &config) {
        Ok(done) => {
            for o in done {
                println!("{:<13} {:>9.2} s", o.stage.name(), o.manifest.seconds);
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("orewatch {stage}: {e}");
            ExitCode::FAILURE
        }
    }
}
