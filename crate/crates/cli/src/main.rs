use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mirrorpose::synth::NoiseSpec;
use mirrorpose_cli::commands::{
    cmd_calibrate, cmd_evaluate, cmd_synth, cmd_triangulate, evaluation_csv, suite_pairs, DetectionOptions, Source,
    SynthOptions,
};
use mirrorpose_cli::config::FileConfig;
use mirrorpose_cli::io::{write_atomic, write_json};
use mirrorpose_cli::{CliError, CliResult};

#[derive(Parser)]
#[command(name = "mirrorpose", version, about = "Camera-mirror calibration from human pose")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Detection {
    /// Image width for OpenPose directory input (default 2·cx).
    #[arg(long)]
    image_width: Option<f64>,
    /// Frame rate for OpenPose directory input.
    #[arg(long, default_value_t = 30.0)]
    frame_rate: f64,
}

impl Detection {
    fn options(&self) -> DetectionOptions {
        DetectionOptions { image_width: self.image_width, frame_rate: self.frame_rate }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Clone, Copy, ValueEnum)]
enum SourceArg {
    Init,
    Full,
    Baseline1,
    Baseline2,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate the virtual camera from a pose sequence.
    Calibrate {
        /// Pose sequence JSON, or a directory of OpenPose frame files.
        #[arg(long)]
        poses: PathBuf,
        #[arg(long)]
        intrinsics: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Ground-truth document; adds per-stage errors to the report.
        #[arg(long)]
        ground_truth: Option<PathBuf>,
        #[arg(long)]
        skip_refine: bool,
        #[arg(long)]
        skip_ransac: bool,
        #[arg(long)]
        baseline2: bool,
        /// RANSAC seed.
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        detection: Detection,
    },
    /// Generate synthetic scenes with ground truth.
    Synth {
        #[arg(long)]
        out_dir: PathBuf,
        /// Number of scenes (default 1).
        #[arg(long)]
        suite: Option<usize>,
        #[arg(long, default_value_t = 100)]
        frames: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = NoiseSpec::default().mean)]
        noise_mean: f64,
        #[arg(long, default_value_t = NoiseSpec::default().std)]
        noise_std: f64,
        #[arg(long, default_value_t = 0.0)]
        dropout: f64,
    },
    /// Compare calibration reports with ground truth.
    Evaluate {
        /// Directory holding <scene>.report.json and <scene>.truth.json.
        #[arg(long, conflicts_with_all = ["report", "truth"])]
        suite: Option<PathBuf>,
        #[arg(long, requires = "truth")]
        report: Vec<PathBuf>,
        #[arg(long, requires = "report")]
        truth: Vec<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Json)]
        format: Format,
        #[arg(long)]
        out: PathBuf,
    },
    /// Triangulate the observed joints with a reported camera.
    Triangulate {
        #[arg(long)]
        poses: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        intrinsics: PathBuf,
        #[arg(long, value_enum, default_value_t = SourceArg::Full)]
        source: SourceArg,
        #[arg(long)]
        ground_truth: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        detection: Detection,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Calibrate {
            poses,
            intrinsics,
            config,
            out,
            ground_truth,
            skip_refine,
            skip_ransac,
            baseline2,
            seed,
            detection,
        } => {
            let file = match config {
                Some(p) => FileConfig::load(&p)?,
                None => FileConfig::default(),
            };
            let mut cfg = file.calibration()?;
            cfg.skip_refine |= skip_refine;
            cfg.skip_ransac |= skip_ransac;
            cfg.baseline2 |= baseline2;
            if let Some(s) = seed {
                cfg.ransac.rng_seed = s;
            }
            let report = cmd_calibrate(&poses, &intrinsics, &cfg, &detection.options(), ground_truth.as_deref())?;
            write_json(&out, &report)
        }
        Command::Synth { out_dir, suite, frames, seed, noise_mean, noise_std, dropout } => {
            std::fs::create_dir_all(&out_dir)
                .map_err(|e| CliError::Io { path: out_dir.display().to_string(), message: e.to_string() })?;
            let noise = NoiseSpec { mean: noise_mean, std: noise_std, dropout };
            cmd_synth(&out_dir, &SynthOptions { scenes: suite, frames, seed, noise }).map(|_| ())
        }
        Command::Evaluate { suite, report, truth, format, out } => {
            let pairs = match suite {
                Some(dir) => suite_pairs(&dir)?,
                None => {
                    if report.len() != truth.len() || report.is_empty() {
                        return Err(CliError::Config("give matching --report/--truth pairs or --suite".into()));
                    }
                    report
                        .into_iter()
                        .zip(truth)
                        .map(|(r, t)| {
                            let name = r.file_name().and_then(|n| n.to_str()).unwrap_or("scene");
                            let name = name.strip_suffix(".report.json").unwrap_or(name).to_string();
                            (name, r, t)
                        })
                        .collect()
                }
            };
            let ev = cmd_evaluate(&pairs)?;
            match format {
                Format::Json => write_json(&out, &ev),
                Format::Csv => write_atomic(&out, &evaluation_csv(&ev)?),
            }
        }
        Command::Triangulate { poses, report, intrinsics, source, ground_truth, out, detection } => {
            let source = match source {
                SourceArg::Init => Source::Init,
                SourceArg::Full => Source::Full,
                SourceArg::Baseline1 => Source::Baseline1,
                SourceArg::Baseline2 => Source::Baseline2,
            };
            let doc =
                cmd_triangulate(&poses, &report, &intrinsics, source, ground_truth.as_deref(), &detection.options())?;
            if let Some(mm) = doc.pa_mpjpe_mm {
                println!("PA-MPJPE {mm:.3} mm");
            }
            write_json(&out, &doc)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
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
