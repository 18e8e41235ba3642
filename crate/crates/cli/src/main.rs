use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use coeffcast::pipeline::{self, Mode, RunConfig};
use coeffcast::vqvae::StreamKind;
use coeffcast::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "coeffcast", version, about = "Audio-driven 3D face coefficient generation")]
struct Cli {
    /// JSON run configuration; flags below override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Start from the reduced desk-scale preset instead of the full-size defaults.
    #[arg(long, global = true, conflicts_with = "config")]
    desk: bool,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// full | no_disentangle | no_window | neither
    #[arg(long, global = true)]
    mode: Option<Mode>,
    /// Sets the epoch count of both VQ-VAE and predictor training.
    #[arg(long, global = true)]
    epochs: Option<usize>,
    /// Run output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Dataset directory holding manifest.jsonl.
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset into the dataset directory.
    Synth {
        #[arg(long)]
        clips: Option<usize>,
        #[arg(long)]
        frames: Option<usize>,
    },
    /// Causally smooth a .coeff file or a directory of them.
    Smooth {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        window: Option<usize>,
    },
    /// Train the VQ-VAE(s) required by the mode.
    TrainVqvae {
        /// Train only this stream: head | mouth_detail | joint.
        #[arg(long)]
        stream: Option<StreamKind>,
    },
    /// Train the predictor(s) against frozen VQ-VAE checkpoints.
    TrainPredictor,
    /// Generate coefficients for the evaluation split from audio.
    Infer,
    /// Score predictions against ground truth.
    Eval {
        /// Prediction directory (default: <out>/predictions).
        #[arg(long)]
        pred: Option<PathBuf>,
        /// Ground-truth directory matched by file name (default: dataset split).
        #[arg(long)]
        gt: Option<PathBuf>,
    },
    /// Write one OBJ mesh per frame of a .coeff file.
    ExportMesh {
        #[arg(long)]
        coeff: PathBuf,
        #[arg(long)]
        mesh_dir: PathBuf,
        /// Exaggerate detail displacement for inspection.
        #[arg(long)]
        detail_debug_gain: Option<f64>,
    },
    /// train-vqvae, train-predictor, infer and eval in one go.
    Run,
    /// Run every ablation mode into subdirectories of the output directory.
    Ablate,
    /// Print the effective configuration as JSON.
    Config,
}

/// Prints a line to stdout. A closed pipe (e.g. `| head`) ends output
/// quietly instead of panicking.
macro_rules! emit {
    ($($arg:tt)*) => {{
        use std::io::Write;
        match writeln!(std::io::stdout(), $($arg)*) {
            Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => return Ok(()),
            r => r.map_err(|e| Error::io("<stdout>", e))?,
        }
    }};
}

fn effective_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None if cli.desk => RunConfig::desk_scale(),
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(m) = cli.mode {
        cfg.mode = m;
    }
    if let Some(e) = cli.epochs {
        // The learning-rate decay follows the epoch budget.
        for t in [&mut cfg.vq_train, &mut cfg.predictor_train] {
            t.epochs = e;
            t.schedule.decay_epochs = e;
        }
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    if let Some(d) = &cli.dataset {
        cfg.dataset = d.clone();
    }
    Ok(cfg)
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("COEFFCAST_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Config(format!("COEFFCAST_THREADS must be a positive integer, got '{v}'")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    let mut cfg = effective_config(&cli)?;
    match cli.command {
        Command::Synth { clips, frames } => {
            if let Some(c) = clips {
                cfg.synth.clips = c;
            }
            if let Some(f) = frames {
                cfg.synth.frames = f;
            }
            let m = pipeline::cmd_synth(&cfg)?;
            emit!("wrote {} clips to {}", m.entries.len(), cfg.dataset.display());
        }
        Command::Smooth { input, output, window } => {
            if let Some(w) = window {
                cfg.smoothing_window = w;
            }
            let files = pipeline::cmd_smooth(&cfg, &input, &output)?;
            emit!("smoothed {} file(s)", files.len());
        }
        Command::TrainVqvae { stream } => {
            for r in pipeline::cmd_train_vqvae(&cfg, stream)? {
                emit!(
                    "{}: train {:.6} (mean baseline {:.6}), utilization {:.3}",
                    r.stream.name(),
                    r.train.final_train.reconstruction,
                    r.mean_baseline_train,
                    r.train.codebook_utilization
                );
            }
        }
        Command::TrainPredictor => {
            for r in pipeline::cmd_train_predictor(&cfg)? {
                emit!(
                    "{}: train {:.6} (zero baseline {:.6})",
                    r.stream.name(),
                    r.train.final_train.total,
                    r.train.zero_baseline_train.total
                );
            }
        }
        Command::Infer => {
            let files = pipeline::cmd_infer(&cfg)?;
            emit!("wrote {} prediction(s) to {}", files.len(), cfg.predictions_dir().display());
        }
        Command::Eval { pred, gt } => {
            let report = pipeline::cmd_eval(&cfg, pred.as_deref(), gt.as_deref())?;
            emit!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::ExportMesh {
            coeff,
            mesh_dir,
            detail_debug_gain,
        } => {
            let files = pipeline::cmd_export_mesh(&cfg, &coeff, &mesh_dir, detail_debug_gain)?;
            emit!("wrote {} mesh(es) to {}", files.len(), mesh_dir.display());
        }
        Command::Run => {
            let report = pipeline::run_pipeline(&cfg)?;
            emit!("{}", serde_json::to_string_pretty(&report.eval)?);
        }
        Command::Ablate => {
            for r in pipeline::run_ablation(&cfg, &Mode::ALL)? {
                emit!("{}: {}", r.mode, serde_json::to_string(&r.eval)?);
            }
        }
        Command::Config => {
            cfg.validate()?;
            emit!("{}", serde_json::to_string_pretty(&cfg)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error kind={} msg={:?}", e.kind(), msg);
            ExitCode::FAILURE
        }
    }
}
