//! Command-line front end: `generate`, `train`, `eval`, `viz`, `flops`.
//!
//! Settings come from a plain `key = value` file; `#` starts a comment and
//! later keys override earlier ones. Flags override the file.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::data::{generate, ClassSet, Dataset, Split, SyntheticSpec};
use crate::error::{MooseError, Result};
use crate::fusion::FusionMode;
use crate::model::{count_flops, count_params, Aggregation, Moose, MooseConfig};
use crate::training::{evaluate, prepare_all, train, write_metrics, TrainConfig};
use crate::viz::{render_clip, VizOptions};

/// Everything one run needs. All randomness derives from `model.seed`.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: MooseConfig,
    pub train: TrainConfig,
    pub synthetic: SyntheticSpec,
    pub clips_per_class: usize,
    pub data: PathBuf,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let synthetic = SyntheticSpec::default();
        RunConfig {
            model: MooseConfig {
                num_classes: synthetic.classes.classes().len(),
                ..MooseConfig::default()
            },
            train: TrainConfig::default(),
            synthetic,
            clips_per_class: 100,
            data: PathBuf::from("data"),
            out: PathBuf::from("runs"),
        }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| MooseError::invalid(format!("bad value `{value}` for `{key}`")))
}

impl RunConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let t = &mut self.train;
        let s = &mut self.synthetic;
        match key {
            "num_classes" => {
                return Err(MooseError::invalid(
                    "`num_classes` follows from `classes` and cannot be set",
                ));
            }
            "lr_max" => t.lr_max = parse_value(key, value)?,
            "lr_min" => t.lr_min = parse_value(key, value)?,
            "epochs" => t.epochs = parse_value(key, value)?,
            "momentum" => t.momentum = parse_value(key, value)?,
            "weight_decay" => t.weight_decay = parse_value(key, value)?,
            "batch_size" => t.batch_size = parse_value(key, value)?,
            "patience" => t.patience = parse_value(key, value)?,
            "flip" => t.flip = parse_value(key, value)?,
            "classes" => {
                s.classes = ClassSet::from_name(value).ok_or_else(|| {
                    MooseError::invalid(format!(
                        "unknown class set `{value}` (directions|reversal|all)"
                    ))
                })?
            }
            "clips_per_class" => self.clips_per_class = parse_value(key, value)?,
            "blob_radius" => s.blob_radius = parse_value(key, value)?,
            "speed" => s.speed = parse_value(key, value)?,
            "noise" => s.noise_sigma = parse_value(key, value)?,
            "data" => self.data = PathBuf::from(value),
            "out" => self.out = PathBuf::from(value),
            _ => return self.model.set(key, value),
        }
        Ok(true)
    }

    /// Copies shared settings (clip geometry, class count, seed) into the
    /// sub-configs.
    fn sync(&mut self) {
        let m = &self.model;
        self.synthetic.frames = m.frames;
        self.synthetic.channels = m.channels;
        self.synthetic.width = m.width;
        self.synthetic.height = m.height;
        self.train.seed = m.seed;
        self.model.num_classes = self.synthetic.classes.classes().len();
    }
}

/// Parses the `key = value` format; errors name the offending line.
pub fn parse_config_str(text: &str) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    for (n, raw) in text.lines().enumerate() {
        let err = |msg: String| MooseError::Config { line: n + 1, msg };
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() || value.is_empty() {
            return Err(err(format!("expected `key = value`, got `{line}`")));
        }
        match cfg.set(key, value) {
            Ok(true) => {}
            Ok(false) => return Err(err(format!("unknown key `{key}`"))),
            Err(e) => return Err(err(e.to_string())),
        }
    }
    cfg.sync();
    Ok(cfg)
}

pub fn parse_config(path: impl AsRef<Path>) -> Result<RunConfig> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)
        .map_err(|e| MooseError::invalid(format!("cannot read config {}: {e}", path.display())))?;
    parse_config_str(&text)
}

#[derive(Debug, Parser)]
#[command(
    name = "moose",
    version,
    about = "Two-pathway video transformer on synthetic motion clips"
)]
#[command(arg_required_else_help = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset to disk.
    Generate(Flags),
    /// Train on a generated dataset; writes a checkpoint and metrics.csv.
    Train(Flags),
    /// Print top-1 / top-5 accuracy of a checkpoint on one split.
    Eval(Flags),
    /// Render fusion-attention heatmaps for one clip.
    Viz(Flags),
    /// Print parameter and multiply-accumulate counts for the config.
    Flops(Flags),
}

#[derive(Debug, Args, Clone, Default)]
pub struct Flags {
    /// `key = value` settings file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory (dataset root for `generate`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Checkpoint directory.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Clip id for `viz`.
    #[arg(long)]
    pub clip: Option<String>,
    /// Dataset split.
    #[arg(long, value_parser = ["train", "val", "test"])]
    pub split: Option<String>,
    #[arg(long, value_parser = ["flow_prior", "visual_prior", "bidirectional"])]
    pub fusion: Option<String>,
    #[arg(long, value_parser = ["mean", "causal"])]
    pub agg: Option<String>,
}

impl Flags {
    fn run_config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => parse_config(p)?,
            None => RunConfig::default(),
        };
        if let Some(f) = &self.fusion {
            cfg.model.fusion = f.parse::<FusionMode>()?;
        }
        if let Some(a) = &self.agg {
            cfg.model.aggregation = a.parse::<Aggregation>()?;
        }
        Ok(cfg)
    }

    fn split(&self) -> Result<Split> {
        self.split.as_deref().unwrap_or("val").parse()
    }
}

/// Failure of a subcommand: usage problems exit 2, everything else 1.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(MooseError),
}

impl From<MooseError> for CliError {
    fn from(e: MooseError) -> Self {
        CliError::Runtime(e)
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

fn require<'a, T>(v: &'a Option<T>, flag: &str, cmd: &str) -> std::result::Result<&'a T, CliError> {
    v.as_ref()
        .ok_or_else(|| CliError::Usage(format!("`{cmd}` requires --{flag}")))
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    Dataset::load(path)
        .map_err(|e| MooseError::Dataset(format!("{} (run `moose generate` first?)", e)))
}

/// Runs one parsed command, writing its report to `out`.
pub fn run(cli: Cli, out: &mut impl std::io::Write) -> std::result::Result<(), CliError> {
    let io = |e: std::io::Error| CliError::Runtime(e.into());
    match cli.command {
        Command::Generate(flags) => {
            let cfg = flags.run_config()?;
            let root = flags.out.clone().unwrap_or(cfg.data.clone());
            let ds = generate(&cfg.synthetic, cfg.clips_per_class, cfg.model.seed)?;
            ds.save(&root)?;
            writeln!(
                out,
                "wrote {} clips ({} train, {} val, {} test) to {}",
                ds.len(),
                ds.train.len(),
                ds.val.len(),
                ds.test.len(),
                root.display()
            )
            .map_err(io)?;
        }
        Command::Train(flags) => {
            let cfg = flags.run_config()?;
            let dir = flags.out.clone().unwrap_or(cfg.out.clone());
            let ds = load_dataset(&cfg.data)?;
            let mut model_cfg = cfg.model.clone();
            model_cfg.num_classes = ds.num_classes();
            let mut model = Moose::new(model_cfg)?;
            let mut log = Vec::new();
            let report = train(&mut model, &ds, &cfg.train, |r| {
                log.push(format!(
                    "epoch {:>3}  loss {:.4}  train {:.3}  val {:.3}  lr {:.5}",
                    r.epoch, r.train_loss, r.train_top1, r.val_top1, r.lr
                ));
            })?;
            for line in log {
                writeln!(out, "{line}").map_err(io)?;
            }
            fs::create_dir_all(&dir).map_err(io)?;
            write_metrics(dir.join("metrics.csv"), &report.records)?;
            model.save(dir.join("checkpoint"))?;
            writeln!(
                out,
                "best val_top1 {} at epoch {}; checkpoint in {}",
                report.best_val_top1,
                report.best_epoch,
                dir.join("checkpoint").display()
            )
            .map_err(io)?;
        }
        Command::Eval(flags) => {
            let ckpt = require(&flags.checkpoint, "checkpoint", "eval")?;
            let cfg = flags.run_config()?;
            let split = flags.split()?;
            let model = Moose::load(ckpt)?;
            let ds = load_dataset(&cfg.data)?;
            let clips = prepare_all(&model, ds.split(split))?;
            let e = evaluate(&model, &clips, cfg.train.batch_size)?;
            writeln!(
                out,
                "split: {split}\ntop1: {}\ntop5: {}\nloss: {}",
                e.top1, e.top5, e.loss
            )
            .map_err(io)?;
        }
        Command::Viz(flags) => {
            let ckpt = require(&flags.checkpoint, "checkpoint", "viz")?;
            let id = require(&flags.clip, "clip", "viz")?;
            let cfg = flags.run_config()?;
            let dir = flags.out.clone().unwrap_or(cfg.out.join("viz"));
            let model = Moose::load(ckpt)?;
            let ds = load_dataset(&cfg.data)?;
            let (_, clip) = ds.find(id).ok_or_else(|| {
                MooseError::Dataset(format!("no clip `{id}` in {}", cfg.data.display()))
            })?;
            let files = render_clip(&model, clip, &dir, &VizOptions::default())?;
            writeln!(
                out,
                "wrote {} images to {}",
                files.len(),
                dir.join(id).display()
            )
            .map_err(io)?;
        }
        Command::Flops(flags) => {
            let cfg = flags.run_config()?;
            cfg.model.validate()?;
            writeln!(
                out,
                "params: {}\nmacs: {}",
                count_params(&cfg.model),
                count_flops(&cfg.model)
            )
            .map_err(io)?;
        }
    }
    Ok(())
}
