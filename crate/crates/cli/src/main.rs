use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use textkg::commands::{cmd_build_kg, cmd_caption, cmd_evaluate, cmd_gen_synthetic, cmd_grad_check, cmd_train};
use textkg::config::RunConfig;
use textkg::metrics::EvalMode;
use textkg::synth::{SynthParams, CONFIG_FILE, HELDOUT_FILE};

#[derive(Parser)]
#[command(name = "textkg", version, about = "Knowledge-augmented two-stream video captioning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; defaults are used when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Output directory (overrides paths.out_dir).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    no_video: bool,
    #[arg(long, global = true)]
    no_regions: bool,
    #[arg(long, global = true)]
    no_text: bool,
    #[arg(long, global = true)]
    no_general_kg: bool,
    #[arg(long, global = true)]
    no_specific_kg: bool,
    #[arg(long, global = true)]
    no_knowledge_selection: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Mine transcript knowledge, merge it with the general graph and write kg.tsv.
    BuildKg,
    /// Train a model and write its checkpoint.
    Train,
    /// Greedy-decode a caption for every clip of a manifest.
    Caption {
        /// Directory written by `train` (default: the output directory).
        #[arg(long, value_name = "DIR")]
        checkpoint: Option<PathBuf>,
        /// Manifest to caption (default: paths.manifest).
        #[arg(long, value_name = "PATH")]
        manifest: Option<PathBuf>,
    },
    /// Score a predictions file against a manifest's captions.
    Evaluate {
        #[arg(long, value_name = "PATH")]
        predictions: PathBuf,
        #[arg(long, value_name = "PATH")]
        manifest: Option<PathBuf>,
        #[arg(long, default_value = "micro", value_name = "micro|paragraph")]
        mode: EvalMode,
    },
    /// Write a deterministic synthetic corpus.
    GenSynthetic {
        #[arg(long, default_value_t = 4)]
        videos: usize,
        #[arg(long, default_value_t = 2)]
        clips: usize,
        #[arg(long, default_value_t = 16)]
        heldout: usize,
        #[arg(long, default_value_t = 24)]
        train_objects: usize,
        #[arg(long, default_value_t = 16)]
        novel_objects: usize,
        #[arg(long, default_value_t = 8)]
        colors: usize,
    },
    /// Finite-difference check of every parameter gradient on a tiny model.
    GradCheck,
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let cwd = std::env::current_dir().context("current directory")?;
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig {
            base_dir: cwd.clone(),
            ..RunConfig::default()
        },
    };
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.paths.out_dir = cwd.join(out);
    }
    let sw = &mut cfg.train.ablation;
    sw.use_video &= !common.no_video;
    sw.use_regions &= !common.no_regions;
    sw.use_text &= !common.no_text;
    sw.use_general_kg &= !common.no_general_kg;
    sw.use_specific_kg &= !common.no_specific_kg;
    sw.use_knowledge_selection &= !common.no_knowledge_selection;
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    if let Command::GenSynthetic {
        videos,
        clips,
        heldout,
        train_objects,
        novel_objects,
        colors,
    } = cli.command
    {
        let params = SynthParams {
            seed: cli.common.seed.unwrap_or(0),
            videos,
            clips_per_video: clips,
            heldout_clips: heldout,
            train_objects,
            novel_objects,
            colors,
            ..SynthParams::default()
        };
        let out = cli.common.out.clone().unwrap_or_else(|| PathBuf::from("synthetic"));
        let corpus = cmd_gen_synthetic(&params, &out)?;
        println!("clips\t{}", corpus.manifest.clip_count());
        println!("heldout\t{}", out.join(HELDOUT_FILE).display());
        println!("config\t{}", out.join(CONFIG_FILE).display());
        return Ok(());
    }
    let cfg = load_config(&cli.common)?;
    let manifest_or = |m: &Option<PathBuf>| -> Result<PathBuf> {
        Ok(match m {
            Some(p) => p.clone(),
            None => cfg.manifest_path()?,
        })
    };
    match &cli.command {
        Command::BuildKg => {
            let (_, stats) = cmd_build_kg(&cfg)?;
            print!("{}", stats.to_text());
        }
        Command::Train => {
            let (_, report) = cmd_train(&cfg)?;
            println!("steps\t{}", report.steps);
            if let Some(loss) = report.epoch_losses.last() {
                println!("final_loss\t{loss}");
            }
            if let Some(p) = &report.checkpoint {
                println!("checkpoint\t{}", p.display());
            }
        }
        Command::Caption { checkpoint, manifest } => {
            let dir = checkpoint.clone().unwrap_or_else(|| cfg.out_dir());
            let (path, _) = cmd_caption(&cfg, &dir, &manifest_or(manifest)?)?;
            println!("predictions\t{}", path.display());
        }
        Command::Evaluate {
            predictions,
            manifest,
            mode,
        } => {
            let report = cmd_evaluate(predictions, &manifest_or(manifest)?, *mode, &cfg.out_dir())?;
            print!("{}", report.to_table());
        }
        Command::GradCheck => {
            let report = cmd_grad_check(&cfg, None)?;
            print!("{}", report.to_text());
        }
        Command::GenSynthetic { .. } => unreachable!("handled above"),
    }
    Ok(())
}

fn one_line(err: &anyhow::Error) -> String {
    format!("{err:#}").replace(['\n', '\r'], " ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            eprintln!("{}", first.trim());
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", one_line(&e));
            ExitCode::FAILURE
        }
    }
}
