//! Command-line front end.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::env::Environment;
use crate::orchestrator::{
    merge_pareto, replay, run_vortex, sweep_lambda, write_archive_csv, BackendKind, RunConfig,
    RunError,
};

#[derive(Debug, Parser)]
#[command(name = "vortex", version, about = "Reward-shaped planning for restless bandits")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Execute one run.
    Run(RunArgs),
    /// Run the analytic backend once per lambda and filter the final points.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated weights.
        #[arg(long, value_delimiter = ',', required = true)]
        lambdas: Vec<f64>,
    },
    /// Load an environment file and report it.
    ValidateEnv { path: String },
    /// Replay a recorded run through the scripted backend.
    Replay { dir: PathBuf },
    /// Merge the archives of several runs and keep the non-dominated points.
    Pareto {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        /// Output CSV; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    backend: Option<BackendKind>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Draw a fresh environment stream for every episode.
    #[arg(long)]
    no_crn: bool,
    /// Shaping script for the scripted backend.
    #[arg(long)]
    script: Option<PathBuf>,
}

impl RunArgs {
    fn config(&self) -> Result<RunConfig, RunError> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(k) = self.episodes {
            cfg.episodes = k;
        }
        if let Some(b) = self.backend {
            cfg.backend = b;
        }
        if let Some(l) = self.lambda {
            cfg.lambda = l;
        }
        if let Some(o) = &self.out {
            cfg.out = Some(o.clone());
        }
        if self.no_crn {
            cfg.crn = false;
        }
        if let Some(s) = &self.script {
            cfg.script = Some(s.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parses `argv` (including the program name) and runs the command.
/// Returns the process exit status.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(msg) => {
            eprintln!("error: {}", msg.replace('\n', " "));
            1
        }
    }
}

fn execute(command: Command) -> Result<(), String> {
    let s = |e: RunError| e.to_string();
    match command {
        Command::Run(args) => {
            let cfg = args.config().map_err(s)?;
            let r = run_vortex(&cfg).map_err(s)?;
            for e in &r.episodes {
                println!("k={} U={:.4} C={:.6} J={:.6}", e.k, e.utility, e.divergence, e.objective);
            }
            if r.stopped_early() {
                println!("stopped early after {} episodes", r.episodes.len());
            }
            if let Some(o) = &cfg.out {
                println!("wrote {}", o.display());
            }
        }
        Command::Sweep { run, lambdas } => {
            let cfg = run.config().map_err(s)?;
            let sweep = sweep_lambda(&cfg, &lambdas).map_err(s)?;
            println!("lambda,U,C,error");
            for p in &sweep.points {
                let num = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
                println!(
                    "{},{},{},{}",
                    p.lambda,
                    num(p.utility),
                    num(p.divergence),
                    p.error.as_deref().unwrap_or("")
                );
            }
            if let Some(o) = &cfg.out {
                write_archive_csv(&sweep.archive, o.join("sweep_pareto.csv")).map_err(s)?;
            }
            if sweep.points.iter().all(|p| p.error.is_some()) {
                return Err("every run in the sweep failed".into());
            }
        }
        Command::ValidateEnv { path } => {
            let env = Environment::resolve(&path).map_err(|e| e.to_string())?;
            print!("{}", env.summary());
        }
        Command::Replay { dir } => {
            let report = replay(&dir).map_err(s)?;
            match report.first_mismatch {
                None => println!("replayed {} episodes: identical", report.episodes),
                Some(k) => return Err(format!("replay diverges at episode {k}")),
            }
        }
        Command::Pareto { dirs, out } => {
            let archive = merge_pareto(&dirs).map_err(s)?;
            match out {
                Some(p) => {
                    write_archive_csv(&archive, &p).map_err(s)?;
                    println!("{} non-dominated points written to {}", archive.points.len(), p.display());
                }
                None => {
                    println!("source,k,U,C");
                    for p in &archive.points {
                        println!("{},{},{},{}", p.tag, p.shaping_id, p.utility, p.divergence);
                    }
                }
            }
        }
    }
    Ok(())
}
