use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mage_core::config::RunConfig;
use mage_core::dataio::{
    extract_condition, fit_normstats, load_motion_set, synth_dataset_with_meta, write_dataset, MotionKind,
    SparseCondition,
};
use mage_core::diffusion::make_schedule;
use mage_core::metrics::{aggregate, evaluate};
use mage_core::model::Mage;
use mage_core::pipeline::{
    bench, mean_pose_baseline, rest_pose_baseline, stream_generate, write_positions_csv, InferenceConfig,
};
use mage_core::skeleton::SkeletonDef;
use mage_core::training::{load_checkpoint, prepare_windows, save_checkpoint, train, Checkpoint};
use mage_core::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

/// Per-frame latency of 4-step DDIM on a V100, for comparison with `bench`.
const REFERENCE_MS_PER_FRAME: f64 = 0.36;

#[derive(Parser)]
#[command(name = "mage", version, about = "Full-body motion from head and wrist tracking")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a procedural motion dataset.
    Synth {
        #[arg(long, default_value = "mixed")]
        kind: MotionKind,
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[arg(long, default_value_t = 120)]
        frames: usize,
        #[arg(long, default_value_t = 60.0)]
        fps: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory; a manifest.toml is written inside.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write a checkpoint.
    Train {
        /// Dataset directory, manifest file, or single motion file.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out_checkpoint: PathBuf,
        /// JSON-lines training log.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Reconstruct full-body motion from observations.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Observation file, or a motion file to extract observations from.
        #[arg(long)]
        conditions: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also write global joint positions as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Score a checkpoint against ground-truth clips.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// JSON-lines report; stdout when omitted.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Time windowed sampling.
    Bench {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 10)]
        iterations: usize,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

enum Failure {
    Args(String),
    Data(Error),
    Checkpoint(Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Args(_) => 2,
            Failure::Data(_) => 3,
            Failure::Checkpoint(_) => 4,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Args(m) => write!(f, "invalid arguments: {m}"),
            Failure::Data(e) => write!(f, "data error: {e}"),
            Failure::Checkpoint(e) => write!(f, "checkpoint error: {e}"),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidArgument(m) | Error::InvalidConfig(m) => Failure::Args(m),
            Error::CorruptCheckpoint(_) | Error::ConfigMismatch(_) => Failure::Checkpoint(e),
            e => Failure::Data(e),
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Data(e.into())
    }
}

type Outcome = std::result::Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("mage: {f}");
            ExitCode::from(f.code())
        }
    }
}

fn run(cmd: Cmd) -> Outcome {
    let skel = SkeletonDef::default();
    match cmd {
        Cmd::Synth { kind, count, frames, fps, seed, out } => {
            if count == 0 {
                return Err(Failure::Args("--count must be positive".into()));
            }
            let made = synth_dataset_with_meta(kind, count, frames, fps, seed)?;
            let kinds: Vec<String> = made.iter().map(|(_, m)| m.kind.to_string()).collect();
            let clips: Vec<_> = made.into_iter().map(|(c, _)| c).collect();
            let manifest = write_dataset(&out, &clips, &kinds)?;
            println!("{}", json!({"clips": count, "frames": frames, "manifest": manifest}));
            Ok(())
        }
        Cmd::Train { data, config, steps, seed, out_checkpoint, log } => {
            let mut cfg = run_config(config.as_deref())?;
            if let Some(s) = steps {
                cfg.train.steps = s;
            }
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            cfg.validate()?;
            let clips = load_motion_set(&data)?;
            let norm = fit_normstats(&clips, &skel)?;
            let windows = prepare_windows(&clips, &skel, &norm, cfg.model.window, cfg.train.history)?;
            let schedule = make_schedule(cfg.model.t_max, cfg.model.schedule)?;
            let mut model = Mage::new(cfg.model.clone(), &mut ChaCha8Rng::seed_from_u64(cfg.train.seed))?;
            let mut log_file = log.as_deref().map(create).transpose()?;
            let history = train(
                &mut model,
                &schedule,
                &windows,
                &cfg.train,
                log_file.as_mut().map(|w| w as &mut dyn Write),
            )?;
            let ckpt = Checkpoint {
                model,
                norm,
                schedule,
                steps_trained: history.len(),
            };
            save_checkpoint(&out_checkpoint, &ckpt).map_err(Failure::Checkpoint)?;
            let last = history.last().map_or(f64::NAN, |l| l.l_obj);
            println!(
                "{}",
                json!({"steps": history.len(), "windows": windows.len(), "first_l_obj": history[0].l_obj, "final_l_obj": last, "checkpoint": out_checkpoint})
            );
            Ok(())
        }
        Cmd::Sample { checkpoint, conditions, seed, out, config, csv } => {
            let (ckpt, inf) = open_checkpoint(&checkpoint, config.as_deref())?;
            let cond = SparseCondition::load_any(&conditions, &skel)?;
            let res = stream_generate(&ckpt, &cond, &inf, seed, &skel)?;
            res.clip.save(&out)?;
            if let Some(p) = csv {
                write_positions_csv(&res.clip, &skel, create(&p)?)?;
            }
            println!("{}", json!({"frames": res.clip.len(), "windows": res.windows.len(), "out": out}));
            Ok(())
        }
        Cmd::Eval { checkpoint, data, report, seed, config } => {
            let (ckpt, inf) = open_checkpoint(&checkpoint, config.as_deref())?;
            let regions = match config.as_deref() {
                Some(p) => RunConfig::load(p)?.regions,
                None => Default::default(),
            };
            let clips = load_motion_set(&data)?;
            let mut out: Box<dyn Write> = match &report {
                Some(p) => Box::new(create(p)?),
                None => Box::new(io::stdout().lock()),
            };
            let (mut per, mut rest, mut mean) = (Vec::new(), Vec::new(), Vec::new());
            for (i, gt) in clips.iter().enumerate() {
                let cond = extract_condition(gt, &skel);
                let pred = stream_generate(&ckpt, &cond, &inf, seed.wrapping_add(i as u64), &skel)?;
                let r = evaluate(&pred.clip, gt, &skel, &regions)?;
                writeln!(out, "{}", json!({"clip": i, "report": r}))?;
                per.push(r);
                rest.push(evaluate(&rest_pose_baseline(&cond, &skel)?, gt, &skel, &regions)?);
                mean.push(evaluate(&mean_pose_baseline(&cond, &ckpt.norm, &skel)?, gt, &skel, &regions)?);
            }
            writeln!(
                out,
                "{}",
                json!({
                    "summary": aggregate(&per)?,
                    "rest_pose_baseline": aggregate(&rest)?,
                    "mean_pose_baseline": aggregate(&mean)?,
                    "clips": clips.len(),
                })
            )?;
            out.flush()?;
            Ok(())
        }
        Cmd::Bench { checkpoint, iterations, config } => {
            let (ckpt, inf) = open_checkpoint(&checkpoint, config.as_deref())?;
            let r = bench(&ckpt, &inf, iterations, 0)?;
            println!(
                "{}",
                json!({"report": r, "reference_v100_ms_per_frame": REFERENCE_MS_PER_FRAME})
            );
            Ok(())
        }
    }
}

fn run_config(path: Option<&Path>) -> std::result::Result<RunConfig, Failure> {
    match path {
        None => Ok(RunConfig::desk()),
        Some(p) => RunConfig::load(p).map_err(|e| Failure::Args(format!("{}: {e}", p.display()))),
    }
}

/// Loads a checkpoint; with a config file, its model section must match.
fn open_checkpoint(path: &Path, config: Option<&Path>) -> std::result::Result<(Checkpoint, InferenceConfig), Failure> {
    let ckpt = load_checkpoint(path).map_err(Failure::Checkpoint)?;
    let inf = match config {
        Some(p) => {
            let cfg = run_config(Some(p))?;
            ckpt.ensure_config(&cfg.model).map_err(Failure::Checkpoint)?;
            cfg.inference
        }
        None => InferenceConfig {
            window: ckpt.model.config().window,
            history: InferenceConfig::default().history.min(ckpt.model.config().window / 2),
            ..InferenceConfig::default()
        },
    };
    Ok((ckpt, inf))
}

fn create(path: &Path) -> std::result::Result<BufWriter<File>, Failure> {
    Ok(BufWriter::new(File::create(path)?))
}
