use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;
use swinfi::csiprep::{frame_windows, parse_capture, preprocess, usable_mask, write_capture, CsiFrame};
use swinfi::model::SwinFi;
use swinfi::pipeline::{
    ablation_preset, cloud_decode_stream, edge_encode_stream, evaluate_classifier, evaluate_reconstruction,
    load_checkpoint, load_data, run_experiment_grid, table_one_preset, to_batch, train_autoencoder, train_classifier,
    write_grid_csv, Checkpoint, Db, PipelineError, PreparedData, RunConfig,
};
use swinfi::syndata::generate_capture;

#[derive(Parser)]
#[command(
    name = "swinfi",
    version,
    about = "Compress, reconstruct and classify Wi-Fi CSI with a windowed transformer autoencoder"
)]
struct Cli {
    /// Run configuration (TOML). Defaults to the built-in overfit preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Record zero wall time so repeated runs produce identical output.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Table1,
    Ablation,
}

#[derive(Subcommand)]
enum Command {
    /// Print the effective configuration as TOML.
    Config,
    /// Write one synthetic capture per class.
    Synth {
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Preprocess captures and summarise the frames they yield.
    Prep {
        #[arg(required = true)]
        captures: Vec<PathBuf>,
    },
    /// Train the autoencoder and write the best checkpoint.
    TrainAe {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Resume from this checkpoint.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Train the classification head on a frozen encoder.
    TrainCls {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Encode frames of a split into a feature-image stream file.
    Encode {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Encode at most this many frames.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Decode a feature-image stream; with --reference, report NMSE against
    /// the split it was encoded from.
    Decode {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        classify: bool,
        #[arg(long, value_enum)]
        reference: Option<SplitArg>,
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Reconstruction NMSE and accuracy of a checkpoint on a split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Train and evaluate a grid of model configurations.
    Grid {
        #[arg(long, value_enum)]
        preset: Preset,
        /// CSV results table; also printed as JSON lines on stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        classify: bool,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig, PipelineError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::overfit_preset(0),
    };
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
        cfg.classifier.seed = seed;
        cfg.data.split_seed = seed;
        if let Some(s) = &mut cfg.data.synth {
            s.seed = seed;
        }
    }
    cfg.deterministic |= cli.deterministic;
    Ok(cfg)
}

fn open_checkpoint(path: &Path, cfg: &RunConfig) -> Result<(SwinFi<f32>, Checkpoint), PipelineError> {
    let ck = load_checkpoint(path)?;
    let model = ck.to_model(Some(cfg.model.digest()))?;
    Ok((model, ck))
}

/// Data with the checkpoint's standardisation.
fn data_for(cfg: &RunConfig, ck: &Checkpoint) -> Result<PreparedData, PipelineError> {
    let mut data = load_data(cfg)?;
    if let Some(stats) = &ck.norm_stats {
        data.norm_stats = stats.clone();
    }
    Ok(data)
}

fn split_frames(data: &PreparedData, split: SplitArg, limit: Option<usize>) -> Vec<CsiFrame> {
    let frames = match split {
        SplitArg::Train => &data.train,
        SplitArg::Val => &data.val,
        SplitArg::Test => &data.test,
    };
    frames.iter().take(limit.unwrap_or(usize::MAX)).cloned().collect()
}

fn print(v: serde_json::Value) {
    println!("{v}");
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    let mut cfg = load_config(&cli)?;
    match cli.command {
        Command::Config => print!("{}", cfg.to_toml()?),
        Command::Synth { out_dir } => {
            let spec = cfg
                .data
                .synth
                .as_ref()
                .ok_or_else(|| PipelineError::Config("configuration has no synth section".into()))?;
            spec.validate()?;
            std::fs::create_dir_all(&out_dir)?;
            for class in 0..spec.n_classes {
                let path = out_dir.join(format!("class{class:02}.csi"));
                write_capture(&generate_capture(spec, class)?, &path)?;
                print(json!({ "class": class, "path": path }));
            }
        }
        Command::Prep { captures } => {
            for path in captures {
                let capture = parse_capture(&path)?;
                let mask = usable_mask(capture.n_subcarriers)?;
                let processed = preprocess(&capture, &mask)?;
                let frames = frame_windows(&processed, cfg.data.frame_len, cfg.data.stride)?;
                print(json!({
                    "path": path,
                    "label": capture.label,
                    "packets": capture.n_packets(),
                    "antennas": capture.n_antennas,
                    "subcarriers": capture.n_subcarriers,
                    "usable_subcarriers": mask.iter().filter(|&&u| u).count(),
                    "raw_bandwidth_bps": capture.raw_bandwidth(),
                    "frames": frames.len(),
                }));
            }
        }
        Command::TrainAe { out, metrics, init } => {
            if out.is_some() {
                cfg.io.checkpoint = out;
            }
            if metrics.is_some() {
                cfg.io.metrics = metrics;
            }
            let data = load_data(&cfg)?;
            let init = init.map(|p| open_checkpoint(&p, &cfg).map(|(m, _)| m)).transpose()?;
            let outcome = train_autoencoder(&cfg, &data, init)?;
            print(json!({
                "steps": outcome.steps_run,
                "best_step": outcome.best_step,
                "best_nmse_db": Db(outcome.best_nmse_db),
                "reached_target": outcome.reached_target,
                "checkpoint": cfg.io.checkpoint,
            }));
        }
        Command::TrainCls {
            checkpoint,
            out,
            metrics,
        } => {
            if out.is_some() {
                cfg.io.classifier_checkpoint = out;
            }
            if metrics.is_some() {
                cfg.io.metrics = metrics;
            }
            let (model, ck) = open_checkpoint(&checkpoint, &cfg)?;
            let data = data_for(&cfg, &ck)?;
            let outcome = train_classifier(&cfg, &data, model)?;
            print(json!({
                "test_accuracy_pct": outcome.test_accuracy_pct,
                "confusion": outcome.confusion,
                "checkpoint": cfg.io.classifier_checkpoint,
            }));
        }
        Command::Encode {
            checkpoint,
            out,
            split,
            limit,
        } => {
            let (model, ck) = open_checkpoint(&checkpoint, &cfg)?;
            let data = data_for(&cfg, &ck)?;
            let frames = split_frames(&data, split, limit);
            let batch = to_batch::<f32>(&frames, data.mode, &data.norm_stats, cfg.model.input)?;
            let sink = BufWriter::new(File::create(&out)?);
            let stats = edge_encode_stream(&model, &batch.data, 0, sink)?;
            print(serde_json::to_value(&stats).expect("stats serialise"));
        }
        Command::Decode {
            checkpoint,
            input,
            classify,
            reference,
            limit,
        } => {
            let (model, ck) = open_checkpoint(&checkpoint, &cfg)?;
            let source = BufReader::new(File::open(&input)?);
            let outcome = match reference {
                Some(split) => {
                    let data = data_for(&cfg, &ck)?;
                    let frames = split_frames(&data, split, limit);
                    if frames.is_empty() {
                        return Err(PipelineError::Config("reference split is empty".into()));
                    }
                    let batch = to_batch::<f32>(&frames, data.mode, &data.norm_stats, cfg.model.input)?;
                    let extent = [frames[0].n_subcarriers, cfg.data.frame_len];
                    cloud_decode_stream(&model, source, classify, Some((&batch, extent)))?
                }
                None => cloud_decode_stream(&model, source, classify, None)?,
            };
            print(json!({
                "frames": outcome.frame_ids.len(),
                "warnings": outcome.warnings,
                "report": outcome.report,
            }));
        }
        Command::Eval { checkpoint, split } => {
            let (model, ck) = open_checkpoint(&checkpoint, &cfg)?;
            let data = data_for(&cfg, &ck)?;
            let frames = split_frames(&data, split, None);
            if frames.is_empty() {
                return Err(PipelineError::Config("evaluation split is empty".into()));
            }
            let batch = to_batch::<f32>(&frames, data.mode, &data.norm_stats, cfg.model.input)?;
            let extent = [frames[0].n_subcarriers, cfg.data.frame_len];
            let (nmse, nmse_usable) = evaluate_reconstruction(&model, &batch, extent)?;
            let (acc, confusion) = evaluate_classifier(&model, &batch, data.n_classes)?;
            print(json!({
                "frames": frames.len(),
                "nmse_db": Db(nmse),
                "nmse_db_usable": Db(nmse_usable),
                "accuracy_pct": acc,
                "confusion": confusion,
            }));
        }
        Command::Grid { preset, out, classify } => {
            let n_classes = data_classes(&cfg);
            let cells = match preset {
                Preset::Table1 => table_one_preset(n_classes),
                Preset::Ablation => ablation_preset(cfg.model.in_channels, n_classes),
            };
            let rows = run_experiment_grid(&cfg, &cells, classify, |row| {
                print(serde_json::to_value(row).expect("row serialises"));
            });
            if let Some(path) = out {
                write_grid_csv(&rows, BufWriter::new(File::create(path)?))?;
            }
        }
    }
    Ok(())
}

fn data_classes(cfg: &RunConfig) -> usize {
    cfg.data.synth.as_ref().map_or(cfg.model.n_classes, |s| s.n_classes)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
