mod commands;
mod config;
mod error;
mod manifest;
mod scene_dir;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use epimask::matcher::TrainStage;
use epimask::Pixel;

use commands::{EvalArgs, MaskArgs, MatchArgs, TrainArgs};
use config::RunConfig;
use error::CliError;

#[derive(Parser)]
#[command(name = "epimask", version, about = "Epipolar-masked matching experiments on synthetic satellite pairs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Run config (JSON, `schema: 1`). Missing fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config field by dotted path, e.g. `--set matcher.gamma=0.6`.
    #[arg(long = "set", value_name = "PATH=VALUE")]
    overrides: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    Base,
    Lora,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic stereo pair with world-point maps and cameras.
    Scene {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export epipolar band, line and coarse-mask panels for one left pixel.
    Mask {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        left: PathBuf,
        #[arg(long)]
        right: PathBuf,
        #[arg(long, default_value_t = 64)]
        p: usize,
        #[arg(long, default_value_t = 4)]
        r_c: usize,
        /// Band width in pixels; pixels with `d_sym < b / 2` are admissible.
        #[arg(long)]
        b: f64,
        /// Left pixel as `row,col`. Defaults to the patch center.
        #[arg(long, value_parser = parse_pixel)]
        pixel: Option<Pixel>,
        /// Multiply the fundamental matrix by this factor before masking.
        #[arg(long, default_value_t = 1.0)]
        f_scale: f64,
        /// Scene directory for the ground-truth panel.
        #[arg(long)]
        scene: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Match a scene with trained weights and score the result.
    Match {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        /// Keep the K most confident matches (overrides `eval.top_k`).
        #[arg(long)]
        top_k: Option<usize>,
        /// Write the strongest K keys of every coarse attention query.
        #[arg(long, value_name = "K")]
        dump_attention: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the toy matcher on scene directories.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long = "scene", required = true)]
        scenes: Vec<PathBuf>,
        #[arg(long, value_enum)]
        stage: Option<StageArg>,
        /// Base weights to start from. Required for `--stage lora`.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Checkpoint to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-evaluate a matches CSV against a scene.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        matches: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every backward pass.
    Gradcheck {
        /// Print the reports as JSON instead of text.
        #[arg(long)]
        json: bool,
    },
}

fn parse_pixel(s: &str) -> Result<Pixel, String> {
    let (r, c) = s.split_once(',').ok_or("expected row,col")?;
    let r: f64 = r.trim().parse().map_err(|e| format!("row: {e}"))?;
    let c: f64 = c.trim().parse().map_err(|e| format!("col: {e}"))?;
    Ok(Pixel::new(r, c))
}

fn load(cfg: &ConfigArgs, extra: &[String]) -> Result<RunConfig, CliError> {
    let mut all = cfg.overrides.clone();
    all.extend_from_slice(extra);
    RunConfig::load(cfg.config.as_deref(), &all)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Scene { cfg, out } => commands::cmd_scene(&load(&cfg, &[])?, &out),
        Command::Mask { cfg, left, right, p, r_c, b, pixel, f_scale, scene, out } => {
            let rc = load(&cfg, &[])?;
            commands::cmd_mask(&rc, &MaskArgs { left, right, p, r_c, b, pixel, f_scale, scene }, &out)
        }
        Command::Match { cfg, scene, weights, top_k, dump_attention, out } => {
            let extra: Vec<String> = top_k.map(|k| format!("eval.top_k={k}")).into_iter().collect();
            let check_config = cfg.config.is_some() || cfg.overrides.iter().any(|o| o.starts_with("matcher."));
            let rc = load(&cfg, &extra)?;
            commands::cmd_match(&rc, &MatchArgs { scene, weights, check_config, dump_attention }, &out)
        }
        Command::Train { cfg, scenes, stage, init, resume, out } => {
            let extra: Vec<String> = stage
                .map(|s| match s {
                    StageArg::Base => TrainStage::Base,
                    StageArg::Lora => TrainStage::Lora,
                })
                .map(|s| format!("train.stage={}", serde_json::to_string(&s).expect("stage serializes")))
                .into_iter()
                .collect();
            let rc = load(&cfg, &extra)?;
            commands::cmd_train(&rc, &TrainArgs { scenes, init, resume }, &out)
        }
        Command::Eval { cfg, matches, scene, out } => commands::cmd_eval(&load(&cfg, &[])?, &EvalArgs { matches, scene }, &out),
        Command::Gradcheck { json } => {
            let (results, text) = commands::cmd_gradcheck()?;
            if json {
                println!("{}", serde_json::to_string_pretty(&results).expect("reports serialize"));
            } else {
                print!("{text}");
            }
            match results.iter().find(|r| !r.report.passed) {
                Some(r) => Err(CliError::Numerical(format!("gradient check `{}` failed", r.name))),
                None => Ok(()),
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
