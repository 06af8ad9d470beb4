#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;
mod data;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use region_extract::network::ConicalScheme;

use commands::{ablate, evaluate, extract, features, simulate, train};
use error::{CliError, Result};

#[derive(Parser)]
#[command(name = "rsx", version, about = "Region-customizable sound extraction toolkit")]
struct Cli {
    /// Worker threads for scene generation, evaluation and ablation rows.
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate scenes and write WAVs plus a JSON-lines manifest.
    Simulate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        scenes: usize,
        #[arg(long)]
        seed: u64,
        /// Overrides the configured scene profile.
        #[arg(long)]
        profile: Option<String>,
        /// Corpus root with speech/ and noise/ WAV folders (default: $RSX_CORPUS).
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Skip audio; scenes are re-simulated from the manifest when needed.
        #[arg(long)]
        manifest_only: bool,
    },
    /// Train a model on simulated scenes or a manifest.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Checkpoint path.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
        /// CSV loss log.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Extract a query region from a multichannel WAV.
    Extract {
        /// One A and/or one D checkpoint; conical queries need both.
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(long)]
        input: PathBuf,
        /// e.g. "az:-30..30", "dist:0..0.9", "cone:az:-150..-90,dist:0..1.5", "ring:0.5..1.1".
        #[arg(long, allow_hyphen_values = true)]
        query: String,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value = "intersection")]
        scheme: String,
    },
    /// Score a system on a manifest; writes <out>.csv and <out>.json.
    Evaluate {
        #[arg(long)]
        manifest: PathBuf,
        /// model, das, irm-mvdr, csm-mvdr or mixture.
        #[arg(long)]
        system: String,
        #[arg(long = "checkpoint")]
        checkpoints: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "intersection")]
        scheme: String,
    },
    /// Train and evaluate toy models over an ablation grid.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// sampling, aggregation, mics or diameter.
        #[arg(long)]
        dimension: String,
        /// Array family for the mics grid: linear or circular.
        #[arg(long, default_value = "linear")]
        array: String,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        repeats: Option<usize>,
        #[arg(long)]
        eval_scenes: Option<usize>,
        /// Output prefix for .md, .csv and .json tables.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Dump IPD/ILD features of a multichannel WAV.
    Features {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Array preset or position file.
        #[arg(long, default_value = "circ8_5cm")]
        array: String,
        /// Microphone subset, comma separated.
        #[arg(long, value_delimiter = ',')]
        pairs: Option<Vec<usize>>,
    },
}

fn parse_scheme(s: &str) -> Result<ConicalScheme> {
    match s {
        "intersection" | "a-and-d" => Ok(ConicalScheme::Intersection),
        "d-then-a" => Ok(ConicalScheme::DistanceThenAngle),
        "a-then-d" => Ok(ConicalScheme::AngleThenDistance),
        other => Err(CliError::Config(format!(
            "unknown conical scheme '{other}' (intersection, d-then-a, a-then-d)"
        ))),
    }
}

fn print_json(value: &impl serde::Serialize) {
    match serde_json::to_string_pretty(value) {
        Ok(s) => println!("{s}"),
        Err(e) => log::warn!("cannot render summary: {e}"),
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(jobs) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build_global()
            .map_err(|e| CliError::Config(format!("--jobs: {e}")))?;
    }
    match cli.command {
        Command::Simulate {
            config,
            out,
            scenes,
            seed,
            profile,
            corpus,
            manifest_only,
        } => {
            let mut args = simulate::SimulateArgs {
                config,
                out,
                scenes,
                seed,
                corpus,
                manifest_only,
            };
            let summary = match profile {
                None => simulate::run(&args)?,
                Some(p) => {
                    let profile: config::Profile = p.parse()?;
                    let mut cfg = config::Config::load(args.config.as_deref())?;
                    cfg.simulation.profile = profile;
                    let tmp = args.out.join(".rsx-config.toml");
                    std::fs::create_dir_all(&args.out)
                        .map_err(|e| CliError::Data(format!("{}: {e}", args.out.display())))?;
                    let text = toml::to_string(&cfg).map_err(|e| CliError::Config(e.to_string()))?;
                    commands::train::write_atomic(&tmp, text.as_bytes())?;
                    args.config = Some(tmp.clone());
                    let result = simulate::run(&args);
                    let _ = std::fs::remove_file(&tmp);
                    result?
                }
            };
            print_json(&summary);
        }
        Command::Train {
            config,
            seed,
            steps,
            manifest,
            out,
            resume,
            log,
            corpus,
        } => {
            let rows = train::run(&train::TrainArgs {
                config,
                seed,
                steps,
                manifest,
                out,
                resume,
                log,
                corpus,
            })?;
            if let (Some(first), Some(last)) = (rows.first(), rows.last()) {
                print_json(&serde_json::json!({
                    "steps": rows.len(),
                    "final_step": last.step,
                    "first_loss": first.loss,
                    "final_loss": last.loss,
                    "final_smoothed": last.smoothed,
                }));
            }
        }
        Command::Extract {
            checkpoints,
            input,
            query,
            output,
            scheme,
        } => {
            let scheme = parse_scheme(&scheme)?;
            let n = extract::run(&extract::ExtractArgs {
                checkpoints,
                input,
                query,
                output: output.clone(),
                scheme,
            })?;
            print_json(&serde_json::json!({ "output": output, "samples": n }));
        }
        Command::Evaluate {
            manifest,
            system,
            checkpoints,
            out,
            scheme,
        } => {
            let args = evaluate::EvaluateArgs {
                manifest,
                system: system.parse()?,
                checkpoints,
                out,
                scheme: parse_scheme(&scheme)?,
            };
            let report = evaluate::run(&args)?;
            print_json(&report.summary_json());
        }
        Command::Ablate {
            config,
            dimension,
            array,
            seed,
            steps,
            repeats,
            eval_scenes,
            out,
            corpus,
        } => {
            let args = ablate::AblateArgs {
                config,
                dimension: dimension.parse()?,
                family: array.parse()?,
                seed,
                steps,
                repeats,
                eval_scenes,
                out,
                corpus,
            };
            let rows = ablate::run(&args)?;
            print!("{}", ablate::markdown(&rows));
        }
        Command::Features {
            input,
            out,
            array,
            pairs,
        } => {
            let shape = features::run(&features::FeaturesArgs {
                input,
                out: out.clone(),
                array,
                pairs,
            })?;
            print_json(&serde_json::json!({ "output": out, "shape": shape }));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
