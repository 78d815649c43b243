use clap::{Parser, Subcommand};
use porf::commands::{cmd_ablate, cmd_eval, cmd_refine, cmd_render, cmd_synth, Overrides};
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "porf",
    about = "Camera-pose refinement: a shared pose residual field jointly optimized with an SDF renderer under colour and epipolar supervision"
)]
struct Cli {
    /// Worker threads (default: hardware parallelism).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Synthesize a benchmark dataset (poses, images, correspondences).
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Refine camera poses by joint optimization.
    Refine {
        #[arg(long)]
        config: PathBuf,
        /// baseline | porf | baseline_eg | full
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        iterations: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Align a trajectory to ground truth and report ATE.
    Eval {
        est: PathBuf,
        gt: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run all four ablation modes under one seed and budget.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        iterations: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render frames with a trained checkpoint and report PSNR.
    Render {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        poses: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("PORF_LOG", "info")).init();
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
        {
            eprintln!("error: could not configure {threads} threads: {e}");
            std::process::exit(2);
        }
    }
    let result = match cli.cmd {
        Cmd::Synth { config, seed, out } => cmd_synth(
            &config,
            &Overrides {
                seed,
                out,
                ..Overrides::default()
            },
        ),
        Cmd::Refine {
            config,
            mode,
            iterations,
            seed,
            out,
        } => cmd_refine(
            &config,
            &Overrides {
                mode,
                iterations,
                seed,
                out,
            },
        ),
        Cmd::Eval { est, gt, out } => cmd_eval(&est, &gt, out.as_deref()).map(|_| ()),
        Cmd::Ablate {
            config,
            iterations,
            seed,
            out,
        } => cmd_ablate(
            &config,
            &Overrides {
                iterations,
                seed,
                out,
                ..Overrides::default()
            },
        )
        .map(|_| ()),
        Cmd::Render {
            config,
            poses,
            checkpoint,
            out,
        } => cmd_render(
            &config,
            &poses,
            &checkpoint,
            &Overrides {
                out,
                ..Overrides::default()
            },
        )
        .map(|_| ()),
    };
    if let Err(err) = result {
        eprintln!("error: {err}");
        std::process::exit(err.exit_code());
    }
}
