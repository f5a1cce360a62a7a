//! Command-line interface: synthetic scene generation, training,
//! evaluation and flow visualization.

use clap::{Args, Parser, Subcommand};
use evflow::error::Error;
use evflow::event::slice_stream;
use evflow::io::{
    list_sequence_dirs, read_flow, read_sequence_dir, write_events_text, write_sequence_dir,
    StoredSequence,
};
use evflow::synth::Emission;
use evflow::train::{
    evaluate, load_checkpoint, make_synth_eval_set, predict_sequence, save_checkpoint,
    sequence_seed, synth_sequence, write_loss_csv_row, write_metrics_csv, EvalSequenceData,
    SceneParams, TrainConfig, Trainer, LOSS_CSV_HEADER,
};
use evflow::viz::visualize_flow;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "evflow", about = "Event-based optical flow at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct SceneArgs {
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[arg(long, default_value_t = 0.05)]
    interval: f64,
    #[arg(long, default_value_t = 6)]
    segments: usize,
    #[arg(long, default_value_t = 6)]
    segment_len: usize,
    #[arg(long, default_value_t = 600.0)]
    event_rate: f64,
    /// poisson or uniform
    #[arg(long, default_value = "poisson")]
    emission: String,
    #[arg(long, default_value_t = 0.2)]
    speed_min: f64,
    #[arg(long, default_value_t = 3.0)]
    speed_max: f64,
}

impl SceneArgs {
    fn to_params(&self) -> Result<SceneParams, Error> {
        let emission = match self.emission.as_str() {
            "poisson" => Emission::Poisson,
            "uniform" => Emission::Uniform,
            other => {
                return Err(Error::Config(format!(
                    "emission must be poisson or uniform, got {other}"
                )))
            }
        };
        Ok(SceneParams {
            height: self.height,
            width: self.width,
            interval: self.interval,
            segments: self.segments,
            segment_len: self.segment_len,
            event_rate: self.event_rate,
            emission,
            speed_min: self.speed_min,
            speed_max: self.speed_max,
        })
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic event sequences with ground-truth flow.
    Gen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        sequences: usize,
        #[arg(long, default_value_t = 10)]
        length: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        interval_multiplier: usize,
        /// Also write the text event format next to the binary one.
        #[arg(long)]
        text: bool,
        #[command(flatten)]
        scene: SceneArgs,
    },
    /// Train from a config file; writes a loss CSV and a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset directory or on-the-fly scenes.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory (one subdirectory per sequence).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Number of synthetic sequences when no dataset is given.
        #[arg(long, default_value_t = 16)]
        synth: usize,
        #[arg(long, default_value_t = 1)]
        interval_multiplier: usize,
        #[arg(long, default_value_t = 123)]
        seed: u64,
        /// Output CSV path (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render flow fields to color-wheel PNGs.
    Viz {
        /// Checkpoint to run over a dataset directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// A single stored flow file to render instead.
        #[arg(long)]
        flow: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn sequences_from_dir(dir: &PathBuf) -> Result<Vec<EvalSequenceData>, Error> {
    let mut out = Vec::new();
    for sub in list_sequence_dirs(dir)? {
        let stored = read_sequence_dir(&sub)?;
        out.push(stored_to_eval(&stored)?);
    }
    Ok(out)
}

fn stored_to_eval(stored: &StoredSequence) -> Result<EvalSequenceData, Error> {
    let len = stored.gts.len();
    let mut volumes = slice_stream(&stored.events, stored.interval, stored.sensor)?;
    let k_first = if volumes.is_empty() {
        0
    } else {
        (volumes[0].t_start / stored.interval).round() as usize
    };
    let mut padded = Vec::with_capacity(len);
    for k in 0..k_first.min(len) {
        padded.push(evflow::event::EventVolume::new(
            vec![],
            k as f64 * stored.interval,
            (k + 1) as f64 * stored.interval,
            stored.sensor,
        )?);
    }
    padded.extend(volumes.drain(..));
    while padded.len() < len {
        let k = padded.len();
        padded.push(evflow::event::EventVolume::new(
            vec![],
            k as f64 * stored.interval,
            (k + 1) as f64 * stored.interval,
            stored.sensor,
        )?);
    }
    padded.truncate(len);
    Ok(EvalSequenceData {
        volumes: padded,
        gts: stored.gts.iter().cloned().map(Some).collect(),
    })
}

fn run() -> Result<(), Error> {
    let cli = Cli::parse();
    match cli.command {
        Command::Gen {
            out,
            sequences,
            length,
            seed,
            interval_multiplier,
            text,
            scene,
        } => {
            let params = scene.to_params()?;
            std::fs::create_dir_all(&out)?;
            for i in 0..sequences {
                let scene_seed = sequence_seed(seed, 0, i);
                let (volumes, gts) =
                    synth_sequence(scene_seed, &params, length, interval_multiplier)?;
                let events: Vec<_> = volumes
                    .iter()
                    .flat_map(|v| v.events().iter().cloned())
                    .collect();
                let dir = out.join(format!("seq_{i:04}"));
                write_sequence_dir(
                    &dir,
                    &StoredSequence {
                        sensor: evflow::event::SensorSize::new(params.height, params.width),
                        events: events.clone(),
                        interval: params.interval * interval_multiplier as f64,
                        gts,
                    },
                )?;
                if text {
                    write_events_text(&dir.join("events.txt"), &events)?;
                }
            }
            println!("wrote {sequences} sequences to {}", out.display());
            Ok(())
        }
        Command::Train { config, out } => {
            let mut cfg = TrainConfig::from_file(&config)?;
            cfg.apply_env_seed()?;
            std::fs::create_dir_all(&out)?;
            let mut log = BufWriter::new(File::create(out.join("loss.csv"))?);
            writeln!(log, "{LOSS_CSV_HEADER}")?;
            let mut trainer = Trainer::new(cfg)?;
            let mut log_err = None;
            trainer.run(|step, b| {
                if let Err(e) = write_loss_csv_row(&mut log, step, b) {
                    log_err.get_or_insert(e);
                }
            })?;
            if let Some(e) = log_err {
                return Err(e);
            }
            let ckpt = out.join("ckpt.evck");
            save_checkpoint(&ckpt, &trainer)?;
            println!(
                "trained {} steps; checkpoint at {}",
                trainer.step,
                ckpt.display()
            );
            Ok(())
        }
        Command::Eval {
            checkpoint,
            data,
            synth,
            interval_multiplier,
            seed,
            out,
        } => {
            if !(interval_multiplier == 1 || interval_multiplier == 4) {
                return Err(Error::Config(
                    "interval_multiplier must be 1 or 4".to_string(),
                ));
            }
            let trainer = load_checkpoint(&checkpoint)?;
            let seqs = match data {
                Some(dir) => sequences_from_dir(&dir)?,
                None => {
                    let mut p = trainer.cfg.scene.clone();
                    p.speed_min = 0.75;
                    if interval_multiplier == 4 {
                        // Keep trajectories inside the sensor over the
                        // longer windows.
                        p.speed_max = p.speed_max.min(1.4);
                    }
                    make_synth_eval_set(
                        &p,
                        synth,
                        trainer.cfg.sequence_length,
                        seed,
                        interval_multiplier,
                    )?
                }
            };
            let report = evaluate(&trainer.model, &seqs)?;
            match out {
                Some(path) => {
                    let mut f = BufWriter::new(File::create(path)?);
                    write_metrics_csv(&report, &mut f)?;
                }
                None => {
                    let mut stdout = std::io::stdout().lock();
                    write_metrics_csv(&report, &mut stdout)?;
                }
            }
            Ok(())
        }
        Command::Viz {
            checkpoint,
            data,
            flow,
            out,
        } => {
            std::fs::create_dir_all(&out)?;
            match (checkpoint, data, flow) {
                (None, None, Some(flow_path)) => {
                    let gt = read_flow(&flow_path)?;
                    let png = out.join("flow.png");
                    visualize_flow(&gt.flow, &png)?;
                    println!("wrote {}", png.display());
                    Ok(())
                }
                (Some(ckpt), Some(dir), None) => {
                    let trainer = load_checkpoint(&ckpt)?;
                    let seqs = sequences_from_dir(&dir)?;
                    for (si, seq) in seqs.iter().enumerate() {
                        let flows = predict_sequence(&trainer.model, &seq.volumes)?;
                        for (vi, f) in flows.iter().enumerate() {
                            visualize_flow(f, &out.join(format!("seq{si:03}_vol{vi:03}.png")))?;
                        }
                    }
                    println!("wrote renderings to {}", out.display());
                    Ok(())
                }
                _ => Err(Error::Config(
                    "viz needs either --flow FILE or both --checkpoint and --data".to_string(),
                )),
            }
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => ExitCode::from(2),
                Error::NonFiniteLoss { .. } => ExitCode::from(3),
                _ => ExitCode::from(1),
            }
        }
    }
}
