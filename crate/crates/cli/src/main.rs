//! `cotlab`: runs training, evaluation, constructions, numerical checks and
//! looped-transformer flows from JSON configuration files.

mod config;
mod error;
mod eval;
mod looped;
mod table;
mod train;
mod verify;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::Value;

use crate::config::{ConstructSection, RunConfig};
use crate::error::{CliError, CliResult};
use crate::table::Format;

#[derive(Parser, Debug)]
#[command(name = "cotlab", version, about = "Chain-of-thought linear self-attention experiments")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct GlobalArgs {
    /// Output directory, created if missing.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    /// Replaces the seed of every run in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Caps the number of worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    format: Format,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model; writes a trajectory, a checkpoint and a summary per run.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate checkpoints with chain-of-thought rollouts.
    Eval {
        #[arg(long)]
        config: PathBuf,
        /// Replaces the checkpoint list of the configuration.
        #[arg(long)]
        checkpoint: Vec<PathBuf>,
    },
    /// Write the gradient-descent construction as a checkpoint.
    Construct {
        #[arg(long, conflicts_with_all = ["d", "n", "eta"])]
        config: Option<PathBuf>,
        #[arg(long, requires_all = ["n", "eta"])]
        d: Option<usize>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        eta: Option<f64>,
        #[arg(long, default_value = "construction")]
        run_id: String,
    },
    /// Run named numerical checks; exits with 1 when any fails.
    Verify {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Check to run; repeatable. Overrides the configuration's list.
        #[arg(long)]
        check: Vec<String>,
    },
    /// Gradient flow of the looped transformer.
    Loop {
        #[arg(long)]
        config: PathBuf,
    },
    /// List subcommands and checks, or recipes with the claims they target.
    List {
        #[arg(long)]
        recipes: bool,
        #[arg(long, default_value = "recipes")]
        dir: PathBuf,
    },
}

fn section<'a, T>(run: &'a RunConfig, value: &'a Option<T>, name: &str) -> CliResult<&'a T> {
    value
        .as_ref()
        .ok_or_else(|| CliError::Usage(format!("run {} has no {name:?} section", run.run_id)))
}

fn list_recipes(dir: &Path) -> CliResult<()> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    entries.sort();
    for path in entries {
        let text = std::fs::read_to_string(&path)?;
        let v: Value = serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        let claim = v.get("claim").and_then(Value::as_str).unwrap_or("(no claim)");
        let name = path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        println!("{name}\t{claim}");
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    let g = &cli.global;
    if let Some(t) = g.threads {
        if t == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    let prepare_out = || -> CliResult<()> {
        std::fs::create_dir_all(&g.out).map_err(|e| CliError::Usage(format!("cannot create {}: {e}", g.out.display())))
    };
    match &cli.command {
        Command::Train { config } => {
            let runs = config::load(config)?;
            let mut cfgs = Vec::new();
            for r in &runs {
                let mut cfg = section(r, &r.train, "train")?.clone();
                if let Some(s) = g.seed {
                    cfg.seed = s;
                }
                cfg.validate()?;
                cfgs.push(cfg);
            }
            prepare_out()?;
            for (r, cfg) in runs.iter().zip(&cfgs) {
                train::run_train(r, cfg, &g.out, g.format)?;
            }
        }
        Command::Eval { config, checkpoint } => {
            let runs = config::load(config)?;
            let mut sections = Vec::new();
            for r in &runs {
                let mut s = section(r, &r.eval, "eval")?.clone();
                if !checkpoint.is_empty() {
                    s.checkpoints = checkpoint.clone();
                }
                if let Some(seed) = g.seed {
                    s.seed = seed;
                }
                sections.push(s);
            }
            prepare_out()?;
            for (r, s) in runs.iter().zip(&sections) {
                eval::run_eval(r, s, &g.out, g.format)?;
            }
        }
        Command::Construct {
            config,
            d,
            n,
            eta,
            run_id,
        } => {
            let runs = match (config, d, n, eta) {
                (Some(path), ..) => config::load(path)?,
                (None, Some(d), Some(n), Some(eta)) => vec![RunConfig {
                    run_id: run_id.clone(),
                    claim: None,
                    train: None,
                    eval: None,
                    construct: Some(ConstructSection {
                        d: *d,
                        n: *n,
                        eta: *eta,
                        k: 0,
                    }),
                    verify: None,
                    looped: None,
                }],
                _ => return Err(CliError::Usage("construct needs --config or all of --d, --n, --eta".into())),
            };
            for r in &runs {
                section(r, &r.construct, "construct")?;
            }
            prepare_out()?;
            for r in &runs {
                train::run_construct(r, r.construct.as_ref().expect("checked"), &g.out)?;
            }
        }
        Command::Verify { config, check } => {
            let mut runs = match config {
                Some(path) => config::load(path)?,
                None => vec![RunConfig {
                    run_id: "verify".into(),
                    claim: None,
                    train: None,
                    eval: None,
                    construct: None,
                    verify: None,
                    looped: None,
                }],
            };
            if !check.is_empty() {
                for r in &mut runs {
                    let seed = r.verify.as_ref().map_or(0, |v| v.seed);
                    r.verify = Some(config::VerifySection {
                        checks: check.clone(),
                        seed,
                    });
                }
            }
            for r in &runs {
                for name in r.verify.iter().flat_map(|v| &v.checks) {
                    if !verify::check_names().contains(&name.as_str()) {
                        return Err(CliError::Usage(format!(
                            "unknown check {name:?}; known: {}",
                            verify::check_names().join(", ")
                        )));
                    }
                }
            }
            prepare_out()?;
            let mut failures = Vec::new();
            for r in &runs {
                match verify::run_verify_config(r, &g.out, g.format, g.seed) {
                    Err(CliError::Failed(m)) => failures.push(m),
                    other => other?,
                }
            }
            if !failures.is_empty() {
                return Err(CliError::Failed(failures.join("; ")));
            }
        }
        Command::Loop { config } => {
            let runs = config::load(config)?;
            let mut sections = Vec::new();
            for r in &runs {
                let mut s = section(r, &r.looped, "loop")?.clone();
                if let Some(seed) = g.seed {
                    s.seed = seed;
                }
                sections.push(s);
            }
            prepare_out()?;
            for (r, s) in runs.iter().zip(&sections) {
                looped::run_loop(r, s, &g.out, g.format)?;
            }
        }
        Command::List { recipes, dir } => {
            if *recipes {
                list_recipes(dir)?;
            } else {
                println!("subcommands: train, eval, construct, verify, loop, list");
                println!("checks:");
                for (name, about, _) in verify::CHECKS {
                    println!("  {name:<18} {about}");
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.global.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code())
        }
    }
}
