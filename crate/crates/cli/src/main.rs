use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use pwtp::config::RunConfig;
use pwtp::datagen::{make_dataset, Dataset, LabeledClip};
use pwtp::io;
use pwtp::numeric::gradcheck::grad_check;
use pwtp::numeric::{NormMode, Rng, Tensor};
use pwtp::objectives::JointMode;
use pwtp::pwtp::{pwtp_forward, PwtpParams};
use pwtp::recognizer::{HeadParams, InputMode};
use pwtp::train::{self, JointLossObjective};

const GRADCHECK_TOL: f64 = 1e-4;

#[derive(Parser)]
#[command(
    name = "pwtp",
    version,
    about = "Pixel-wise temporal projection toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// Run configuration; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ConfigArg {
    fn load(&self) -> Result<RunConfig> {
        match &self.config {
            Some(p) => RunConfig::load(p).with_context(|| format!("reading {}", p.display())),
            None => Ok(RunConfig::default()),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic confounded dataset.
    GenData {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the projector on ENoPR alone.
    TrainUnsup {
        #[command(flatten)]
        config: ConfigArg,
        /// Dataset directory from gen-data; generated from the config when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Checkpoint to write.
        #[arg(long)]
        out: PathBuf,
        /// CSV log (step,enopr,lr); defaults to the checkpoint path with a .csv extension.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Train projector and recognizer jointly.
    TrainJoint {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// CSV log (step,enopr,loss2,alpha).
        #[arg(long)]
        log: Option<PathBuf>,
        /// separate | constant:<alpha> | mgda | sched:<gamma>,<lambda>
        #[arg(long)]
        mode: Option<JointMode>,
        /// da | rgb
        #[arg(long)]
        input: Option<InputMode>,
        /// Start the projector from this checkpoint's theta1.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Write one dynamic-appearance image per segment of a frame directory.
    Extract {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory of frame_00001.ppm, frame_00002.ppm, ...
        #[arg(long)]
        frames: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print top-1 accuracy of a trained checkpoint.
    Eval {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Which split to score.
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        input: Option<InputMode>,
    },
    /// Compare analytic gradients with central differences on random clips.
    Gradcheck {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, default_value_t = 8)]
        height: usize,
        #[arg(long, default_value_t = 8)]
        width: usize,
        #[arg(long, default_value_t = 2)]
        clips: usize,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
    },
}

fn dataset(cfg: &RunConfig, dir: Option<&Path>) -> Result<Dataset> {
    match dir {
        Some(d) => io::read_dataset(d).with_context(|| format!("reading dataset {}", d.display())),
        None => Ok(make_dataset(&cfg.data)?),
    }
}

fn log_path(out: &Path, log: Option<PathBuf>) -> PathBuf {
    log.unwrap_or_else(|| out.with_extension("csv"))
}

fn check_frames(clips: &[LabeledClip], cfg: &RunConfig) -> Result<()> {
    let Some(first) = clips.first() else {
        bail!("dataset split is empty");
    };
    let shape = first.clip.shape();
    if shape[1] != cfg.pwtp.frames {
        bail!(
            "clips have {} frames per segment, config T = {}",
            shape[1],
            cfg.pwtp.frames
        );
    }
    Ok(())
}

fn gen_data(config: ConfigArg, out: PathBuf) -> Result<()> {
    let cfg = config.load()?;
    let ds = make_dataset(&cfg.data)?;
    io::write_dataset(&out, &ds)?;
    println!(
        "wrote {} train and {} test clips to {}",
        ds.train.len(),
        ds.test.len(),
        out.display()
    );
    Ok(())
}

fn train_unsup(
    config: ConfigArg,
    data: Option<PathBuf>,
    out: PathBuf,
    log: Option<PathBuf>,
) -> Result<()> {
    let cfg = config.load()?;
    let ds = dataset(&cfg, data.as_deref())?;
    check_frames(&ds.train, &cfg)?;
    let mut params = PwtpParams::init(&cfg.pwtp, 3, &mut Rng::substream(cfg.train.seed, 1))?;
    let rows = train::train_unsupervised(&mut params, &cfg.pwtp, &cfg.train, &ds.train, |_| {})?;
    io::save_checkpoint(&out, &params, None)?;
    fs::write(log_path(&out, log), train::unsup_csv(&rows))?;
    let last = rows.last().map_or(f64::NAN, |r| r.enopr);
    println!("enopr={last}");
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn train_joint(
    config: ConfigArg,
    data: Option<PathBuf>,
    out: PathBuf,
    log: Option<PathBuf>,
    mode: Option<JointMode>,
    input: Option<InputMode>,
    init: Option<PathBuf>,
) -> Result<()> {
    let cfg = config.load()?;
    let mode = mode.unwrap_or(cfg.mode);
    let input = input.unwrap_or(cfg.input);
    let ds = dataset(&cfg, data.as_deref())?;
    check_frames(&ds.train, &cfg)?;
    let theta1 = match init {
        Some(p) => {
            let t = io::theta1(&io::load_checkpoint(&p)?)?;
            t.check_config(&cfg.pwtp)?;
            t
        }
        None => PwtpParams::init(&cfg.pwtp, 3, &mut Rng::substream(cfg.train.seed, 1))?,
    };
    let theta2 = HeadParams::init(3, cfg.data.classes, &mut Rng::substream(cfg.train.seed, 2))?;
    let outcome = train::train_joint(
        theta1,
        theta2,
        &cfg.pwtp,
        &cfg.train,
        mode,
        input,
        &ds.train,
        |_| {},
    )?;
    io::save_checkpoint(&out, &outcome.theta1, Some(&outcome.theta2))?;
    fs::write(log_path(&out, log), train::joint_csv(&outcome.log))?;
    let acc = train::accuracy(
        Some(&outcome.theta1),
        &outcome.theta2,
        &cfg.pwtp,
        &ds.test,
        input,
    )?;
    println!("mode={mode} input={input} test_accuracy={acc}");
    Ok(())
}

fn extract(config: ConfigArg, checkpoint: PathBuf, frames: PathBuf, out: PathBuf) -> Result<()> {
    let cfg = config.load()?;
    let params = io::theta1(&io::load_checkpoint(&checkpoint)?)?;
    params.check_config(&cfg.pwtp)?;
    let video = io::read_frames(&frames)?;
    let [n, h, w, c] = *video.shape() else {
        unreachable!("read_frames returns [T, H, W, 3]")
    };
    let t = cfg.pwtp.frames;
    if n % t != 0 {
        bail!("{n} frames do not split into segments of T = {t}");
    }
    let clip = Tensor::new(&[n / t, t, h, w, c], video.into_data())?;
    let decomposition = pwtp_forward(&clip, &params, &cfg.pwtp, NormMode::Running)?;
    fs::create_dir_all(&out)?;
    for (i, seg) in decomposition.segments.iter().enumerate() {
        let path = out.join(format!("da_{:05}.ppm", i + 1));
        fs::write(&path, io::export_da(&seg.da)?)?;
    }
    println!("wrote {} images to {}", n / t, out.display());
    Ok(())
}

fn eval(
    config: ConfigArg,
    checkpoint: PathBuf,
    data: Option<PathBuf>,
    split: String,
    input: Option<InputMode>,
) -> Result<()> {
    let cfg = config.load()?;
    let input = input.unwrap_or(cfg.input);
    let set = io::load_checkpoint(&checkpoint)?;
    let head = io::theta2(&set).context("checkpoint has no recognizer (theta2) parameters")?;
    let projector = io::theta1(&set)?;
    projector.check_config(&cfg.pwtp)?;
    let ds = dataset(&cfg, data.as_deref())?;
    let clips = match split.as_str() {
        "train" => &ds.train,
        "test" => &ds.test,
        other => bail!("unknown split {other:?}; expected train or test"),
    };
    let acc = train::accuracy(Some(&projector), &head, &cfg.pwtp, clips, input)?;
    println!("accuracy={acc}");
    Ok(())
}

fn gradcheck(
    config: ConfigArg,
    height: usize,
    width: usize,
    clips: usize,
    step: f64,
) -> Result<bool> {
    let cfg = config.load()?;
    let seed = cfg.train.seed;
    let params = PwtpParams::init(&cfg.pwtp, 3, &mut Rng::substream(seed, 1))?;
    let head = HeadParams::init(3, cfg.data.classes, &mut Rng::substream(seed, 2))?;
    let mut rng = Rng::substream(seed, 3);
    let shape = [cfg.data.segments, cfg.pwtp.frames, height, width, 3];
    let probe: Vec<LabeledClip> = (0..clips.max(1))
        .map(|i| LabeledClip {
            clip: Tensor::from_fn(&shape, |_| rng.next_f64()),
            label: i % cfg.data.classes,
            background_id: 0,
            glyph_id: None,
            motion_mask: vec![false; shape[0] * height * width],
        })
        .collect();
    let stacked = Tensor::stack(&probe.iter().map(|c| c.clip.clone()).collect::<Vec<_>>())?;
    let segments = probe.len() * shape[0];
    let mut enopr = train::EnoprObjective {
        cfg: cfg.pwtp.clone(),
        template: params.clone(),
        clip: stacked.reshape(&[segments, shape[1], height, width, 3])?,
    };
    let e1 = grad_check(&mut enopr, &params.trainable(), step)?;
    let mut joint = JointLossObjective {
        cfg: cfg.pwtp.clone(),
        template: params.clone(),
        clips: probe,
        classes: cfg.data.classes,
        smoothing: cfg.train.label_smoothing,
    };
    let e2 = grad_check(
        &mut joint,
        &JointLossObjective::params(&params, &head),
        step,
    )?;
    let worst = e1.max(e2);
    println!("enopr_rel_error={e1:e}");
    println!("joint_rel_error={e2:e}");
    println!("max_rel_error={worst:e}");
    Ok(worst < GRADCHECK_TOL)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenData { config, out } => gen_data(config, out)?,
        Command::TrainUnsup {
            config,
            data,
            out,
            log,
        } => train_unsup(config, data, out, log)?,
        Command::TrainJoint {
            config,
            data,
            out,
            log,
            mode,
            input,
            init,
        } => train_joint(config, data, out, log, mode, input, init)?,
        Command::Extract {
            config,
            checkpoint,
            frames,
            out,
        } => extract(config, checkpoint, frames, out)?,
        Command::Eval {
            config,
            checkpoint,
            data,
            split,
            input,
        } => eval(config, checkpoint, data, split, input)?,
        Command::Gradcheck {
            config,
            height,
            width,
            clips,
            step,
        } => return gradcheck(config, height, width, clips, step),
    }
    Ok(true)
}

fn main() -> ExitCode {
    // clap exits with status 2 on usage errors
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
