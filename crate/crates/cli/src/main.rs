mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "senca", version, about = "Spatial transcriptomics region segmentation")]
struct Cli {
    /// Overrides the seed of the config or synthetic spec.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic sample with ground-truth regions.
    Synth {
        /// `key = value` spec file; defaults when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the shared encoder and write the latent embeddings.
    Train {
        /// `key = value` config file; defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory with spots.tsv, expression.tsv and embeddings.f32 or image.ppm.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Ward clustering of a latent matrix.
    Segment {
        #[arg(long)]
        latent: PathBuf,
        #[arg(long)]
        k: usize,
        /// Spot table giving row ids; defaults to spots.tsv beside the latent.
        #[arg(long)]
        spots: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Adjusted Rand index between two label files.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Wilcoxon marker genes per cluster.
    Markers {
        #[arg(long)]
        expression: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long, default_value_t = 10)]
        top: usize,
        #[arg(long)]
        out: PathBuf,
        /// Treat the expression file as already log-normalised.
        #[arg(long)]
        no_normalize: bool,
        /// Report Benjamini–Hochberg adjusted p-values.
        #[arg(long)]
        bh: bool,
    },
}

fn init_threads() -> Result<(), String> {
    let Ok(raw) = std::env::var("SENCA_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("SENCA_THREADS must be a positive integer, got {raw:?}"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Err(e) = init_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(1);
    }
    let result = match cli.command {
        Command::Synth { spec, out } => commands::synth(spec.as_deref(), &out, cli.seed),
        Command::Train { config, data, out } => {
            commands::train(config.as_deref(), &data, &out, cli.seed)
        }
        Command::Segment {
            latent,
            k,
            spots,
            out,
        } => commands::segment(&latent, k, spots.as_deref(), &out),
        Command::Evaluate { pred, truth, out } => commands::evaluate(&pred, &truth, &out),
        Command::Markers {
            expression,
            labels,
            top,
            out,
            no_normalize,
            bh,
        } => commands::markers(&expression, &labels, top, &out, !no_normalize, bh),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            ExitCode::from(1)
        }
    }
}
