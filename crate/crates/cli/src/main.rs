use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use winojoint_cli::commands;
use winojoint_cli::config::{Engine, RunConfig};
use winojoint_cli::{CliError, Result};

#[derive(Parser)]
#[command(name = "winojoint", about = "Joint spatial/Winograd sparse training, compression and deployment")]
struct Cli {
    /// key = value run configuration
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// spatial | winograd
    #[arg(long, global = true)]
    engine: Option<String>,
    #[arg(long, global = true)]
    delta: Option<f64>,
    /// Winograd-domain sparsity percentage
    #[arg(long, global = true)]
    swd: Option<f64>,
    /// spatial-domain sparsity percentage
    #[arg(long, global = true)]
    ssd: Option<f64>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Pretrain, then train with the sparsity regularizers.
    Train {
        /// continue from this checkpoint
        #[arg(long)]
        resume: Option<PathBuf>,
        /// stop after this many iterations (checkpoint is still written)
        #[arg(long)]
        max_iters: Option<u64>,
    },
    /// Quantize a checkpoint, fine-tune the codebook and write a container.
    Compress { checkpoint: PathBuf },
    /// Decode a container back to a checkpoint.
    Decompress { container: PathBuf },
    /// Prune a decoded container and evaluate it with a sparse engine.
    Deploy { container: PathBuf },
    /// Cross-domain accuracy and quantization sweep tables.
    Report { checkpoint: PathBuf },
    /// Dataset-free sanity checks.
    Selftest,
}

fn config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match (&cli.config, cli.seed) {
        (Some(path), _) => RunConfig::load(path)?,
        (None, Some(seed)) => RunConfig::with_seed(seed),
        (None, None) => return Err(CliError::Config("either --config or --seed is required".into())),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(e) = &cli.engine {
        cfg.engine = Engine::parse(e).ok_or_else(|| CliError::Config(format!("unknown engine `{e}`")))?;
    }
    if let Some(d) = cli.delta {
        cfg.delta = d;
    }
    if let Some(s) = cli.swd {
        cfg.s_wd = s;
    }
    if let Some(s) = cli.ssd {
        cfg.s_sd = s;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    if let Cmd::Selftest = cli.cmd {
        let mut failed = 0;
        for (name, ok) in commands::selftest(cli.seed.unwrap_or(1))? {
            println!("{} {name}", if ok { "PASS" } else { "FAIL" });
            failed += usize::from(!ok);
        }
        return if failed == 0 { Ok(()) } else { Err(CliError::Numeric(format!("{failed} self-test(s) failed"))) };
    }
    let cfg = config(cli)?;
    match &cli.cmd {
        Cmd::Train { resume, max_iters } => {
            let ck = commands::cmd_train(&cfg, resume.as_deref(), *max_iters)?;
            println!("checkpoint {} at iteration {}", cfg.out.join("checkpoint.wspc").display(), ck.iteration);
        }
        Cmd::Compress { checkpoint } => {
            let out = commands::cmd_compress(&cfg, checkpoint)?;
            println!("{} bytes, compression ratio {:.2}", out.container.len(), out.ratio);
        }
        Cmd::Decompress { container } => {
            let net = commands::cmd_decompress(&cfg, container)?;
            println!("{} parameters -> {}", net.num_params(), cfg.out.join("decompressed.wspc").display());
        }
        Cmd::Deploy { container } => {
            let out = commands::cmd_deploy(&cfg, container)?;
            println!("{} accuracy {:.2}%", cfg.engine.name(), out.evaluation.accuracy());
        }
        Cmd::Report { checkpoint } => {
            commands::cmd_report(&cfg, checkpoint)?;
            println!("tables written to {}", cfg.out.display());
        }
        Cmd::Selftest => unreachable!(),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
