//! Command-line pipeline. Every command reads and writes files only, and
//! drops the resolved configuration into its output directory.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{
    derive_seed, generate_phantom, load_volume, save_volume, Domain, DomainDataset, PhantomConfig,
    PhantomStyle, Split, Volume,
};
use crate::error::{config, format, Error, Result};
use crate::metrics::{
    export_report, score_bscan, write_rows_csv, Method, MetricRow, MetricsReport,
};
use crate::noise::{adapt_traditional, TraditionalParams};
use crate::segmenter::{train_reference_segmenter, MiniUNet, Segmenter, SegmenterTrainConfig};
use crate::trainer::{adapt_volume, fit, fit_from, Direction, TrainConfig, TrainState};

pub const RESOLVED_CONFIG: &str = "resolved_config.toml";
pub const VOLUME_EXT: &str = "octvol";

/// Phantom dataset layout: how many volumes per split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSetConfig {
    pub train_volumes: usize,
    pub test_volumes: usize,
    /// Geometry and noise; `style` and `n_volumes` are set per split.
    pub base: PhantomConfig,
}

impl Default for PhantomSetConfig {
    fn default() -> Self {
        Self {
            train_volumes: 10,
            test_volumes: 3,
            base: PhantomConfig::default(),
        }
    }
}

/// Every parameter block of the pipeline, in one file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// When set, overrides the seed of every block.
    pub seed: Option<u64>,
    pub phantom: PhantomSetConfig,
    pub traditional: TraditionalParams,
    pub segmenter: SegmenterTrainConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::MissingInput(format!("config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| config(format!("{}: {e}", path.display())))
    }

    /// Apply a seed override and propagate `seed` into every block.
    pub fn resolve(mut self, seed: Option<u64>) -> Self {
        if seed.is_some() {
            self.seed = seed;
        }
        if let Some(s) = self.seed {
            self.phantom.base.seed = s;
            self.traditional.seed = s;
            self.segmenter.seed = s;
            self.train.seed = s;
        }
        self
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| config(format!("serializing config: {e}")))
    }

    pub fn write_to(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(RESOLVED_CONFIG), self.to_toml()?)?;
        Ok(())
    }
}

/// Process exit code for an error category.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::MissingInput(_) => 3,
        Error::Format(_) => 4,
        Error::Contract(_) => 5,
        Error::Divergence { .. } => 6,
        Error::Io(_) => 7,
    }
}

/// All `.octvol` files of a directory (or a single file), sorted by name.
pub fn load_volumes(path: &Path) -> Result<Vec<Volume>> {
    if path.is_file() {
        return Ok(vec![load_volume(path)?]);
    }
    if !path.is_dir() {
        return Err(Error::MissingInput(format!(
            "{} does not exist",
            path.display()
        )));
    }
    let mut files: Vec<PathBuf> = fs::read_dir(path)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == VOLUME_EXT))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::MissingInput(format!(
            "no .{VOLUME_EXT} files in {}",
            path.display()
        )));
    }
    files.iter().map(load_volume).collect()
}

pub fn save_volumes(dir: &Path, vols: &[Volume]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for v in vols {
        save_volume(dir.join(format!("{}.{VOLUME_EXT}", v.id)), v)?;
    }
    Ok(())
}

fn domain_dir(root: &Path, d: Domain, split: Split) -> PathBuf {
    let split = match split {
        Split::Train => "train",
        Split::Test => "test",
    };
    root.join(d.to_string()).join(split)
}

pub fn load_dataset(root: &Path, d: Domain, split: Split) -> Result<DomainDataset> {
    DomainDataset::new(d, split, load_volumes(&domain_dir(root, d, split))?)
}

/// Generate train and test phantoms for both domains under
/// `<out>/{A,B}/{train,test}`.
pub fn cmd_phantom(run: &RunConfig, out: &Path) -> Result<()> {
    let p = &run.phantom;
    for domain in [Domain::A, Domain::B] {
        for (split, n, tag) in [
            (Split::Train, p.train_volumes, 0u64),
            (Split::Test, p.test_volumes, 1),
        ] {
            if n == 0 {
                continue;
            }
            let cfg = PhantomConfig {
                seed: derive_seed(&[p.base.seed, domain as u64, tag]),
                n_volumes: n,
                style: PhantomStyle::for_domain(domain),
                ..p.base.clone()
            };
            let vols = generate_phantom(&cfg)?;
            save_volumes(&domain_dir(out, domain, split), &vols)?;
            info!("wrote {n} {domain} {split:?} volumes");
        }
    }
    run.write_to(out)
}

pub fn cmd_adapt_traditional(run: &RunConfig, input: &Path, out: &Path) -> Result<Vec<Volume>> {
    let vols = load_volumes(input)?
        .iter()
        .map(|v| adapt_traditional(v, &run.traditional))
        .collect::<Result<Vec<_>>>()?;
    save_volumes(out, &vols)?;
    run.write_to(out)?;
    Ok(vols)
}

pub fn cmd_train_segmenter(run: &RunConfig, data: &Path, out: &Path) -> Result<MiniUNet> {
    let ds = DomainDataset::new(Domain::A, Split::Train, load_volumes(data)?)?;
    let net = train_reference_segmenter(&ds, &run.segmenter)?;
    fs::create_dir_all(out)?;
    net.to_checkpoint().save(out.join("segmenter.ckpt"))?;
    run.write_to(out)?;
    Ok(net)
}

pub fn load_segmenter(path: &Path) -> Result<MiniUNet> {
    if !path.exists() {
        return Err(Error::MissingInput(format!(
            "segmenter checkpoint {}",
            path.display()
        )));
    }
    MiniUNet::from_checkpoint(&Checkpoint::load(path)?)
}

/// Train on `<data>/A/train` and `<data>/B/train`, optionally resuming.
pub fn cmd_train_cyclegan(
    run: &RunConfig,
    data: &Path,
    segmenter: &Path,
    out: &Path,
    resume: Option<&Path>,
) -> Result<PathBuf> {
    let a = load_dataset(data, Domain::A, Split::Train)?;
    let b = load_dataset(data, Domain::B, Split::Train)?;
    let s = load_segmenter(segmenter)?;
    run.write_to(out)?;
    let result = match resume {
        Some(path) => {
            let mut state = TrainState::from_checkpoint(&Checkpoint::load(path)?)?;
            state.config.epochs = run.train.epochs;
            fit_from(state, &a, &b, &s, Some(out))?
        }
        None => fit(&run.train, &a, &b, &s, Some(out))?,
    };
    result
        .checkpoints
        .last()
        .cloned()
        .ok_or_else(|| format("training finished without writing a checkpoint"))
}

pub fn cmd_adapt(
    checkpoint: &Path,
    input: &Path,
    dir: Direction,
    out: &Path,
    run: &RunConfig,
) -> Result<Vec<Volume>> {
    if !checkpoint.exists() {
        return Err(Error::MissingInput(format!(
            "checkpoint {}",
            checkpoint.display()
        )));
    }
    let c = Checkpoint::load(checkpoint)?;
    let vols = load_volumes(input)?
        .iter()
        .map(|v| adapt_volume(&c, v, dir))
        .collect::<Result<Vec<_>>>()?;
    save_volumes(out, &vols)?;
    run.write_to(out)?;
    Ok(vols)
}

/// Write each input volume with its masks replaced by the segmentation.
pub fn cmd_segment(segmenter: &Path, input: &Path, out: &Path, run: &RunConfig) -> Result<()> {
    let s = load_segmenter(segmenter)?;
    let vols = load_volumes(input)?;
    let segmented = vols
        .iter()
        .map(|v| {
            let masks = crate::segmenter::segment_volume(&s, v)?;
            Volume::new(v.id.clone(), v.domain, v.bscans().to_vec(), Some(masks))
        })
        .collect::<Result<Vec<_>>>()?;
    save_volumes(out, &segmented)?;
    run.write_to(out)
}

/// Segment every B-scan and score it against the volume's masks.
pub fn evaluate_volumes(
    s: &dyn Segmenter,
    method: Method,
    vols: &[Volume],
) -> Result<Vec<MetricRow>> {
    let mut rows = Vec::new();
    for v in vols {
        let masks = v.masks().ok_or_else(|| {
            Error::MissingInput(format!("volume {} has no ground-truth masks", v.id))
        })?;
        for (i, (img, gt)) in v.bscans().iter().zip(masks).enumerate() {
            let probs = s.predict_probs(img)?;
            rows.push(score_bscan(
                method,
                &v.id,
                i,
                &probs.labels(),
                probs.retina(),
                gt,
            )?);
        }
    }
    Ok(rows)
}

pub fn cmd_evaluate(
    segmenter: &Path,
    input: &Path,
    method: Method,
    out: &Path,
    run: &RunConfig,
) -> Result<Vec<MetricRow>> {
    let s = load_segmenter(segmenter)?;
    let rows = evaluate_volumes(&s, method, &load_volumes(input)?)?;
    fs::create_dir_all(out)?;
    write_rows_csv(&rows, out.join("rows.csv"))?;
    let report = MetricsReport::build(rows.clone(), &[method])?;
    fs::write(out.join("table.txt"), report.table())?;
    run.write_to(out)?;
    Ok(rows)
}

/// Segment the three variants of the test split and write one report.
pub fn cmd_compare(
    segmenter: &Path,
    variants: &[(Method, PathBuf)],
    out: &Path,
    run: &RunConfig,
) -> Result<MetricsReport> {
    let s = load_segmenter(segmenter)?;
    let mut rows = Vec::new();
    for (method, dir) in variants {
        let vols = load_volumes(dir)?;
        rows.extend(evaluate_volumes(&s, *method, &vols)?);
        info!("evaluated {method}: {} volumes", vols.len());
    }
    let methods: Vec<Method> = variants.iter().map(|(m, _)| *m).collect();
    let report = MetricsReport::build(rows, &methods)?;
    export_report(&report, out)?;
    run.write_to(out)?;
    Ok(report)
}

#[derive(Parser, Debug)]
#[command(
    name = "oct-adapt",
    version,
    about = "OCT B-scan domain adaptation and evaluation"
)]
pub struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed applied to every configuration block.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug)]
pub struct OutArg {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum DirectionArg {
    A2b,
    B2a,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum MethodArg {
    Unprocessed,
    Traditional,
    Cyclegan,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Unprocessed => Method::Unprocessed,
            MethodArg::Traditional => Method::Traditional,
            MethodArg::Cyclegan => Method::Cyclegan,
        }
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate synthetic train/test volumes for both domains.
    Phantom {
        #[command(flatten)]
        out: OutArg,
        #[arg(long)]
        train_volumes: Option<usize>,
        #[arg(long)]
        test_volumes: Option<usize>,
        #[arg(long)]
        bscans: Option<usize>,
        /// Square B-scan side.
        #[arg(long)]
        size: Option<usize>,
    },
    /// Rule-based noise adaptation of every volume in a directory.
    AdaptTraditional {
        #[arg(long)]
        input: PathBuf,
        #[command(flatten)]
        out: OutArg,
        #[arg(long)]
        noise_mu: Option<f32>,
        #[arg(long)]
        noise_sigma: Option<f32>,
    },
    /// Train the reference segmenter on masked domain-A volumes.
    TrainSegmenter {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        out: OutArg,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Train the CycleGAN on `<data>/A/train` and `<data>/B/train`.
    TrainCyclegan {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        segmenter: PathBuf,
        #[command(flatten)]
        out: OutArg,
        #[arg(long)]
        epochs: Option<usize>,
        /// Continue from a training checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Translate volumes with a trained generator.
    Adapt {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value = "b2a")]
        direction: DirectionArg,
        #[command(flatten)]
        out: OutArg,
    },
    /// Segment volumes, writing predicted masks.
    Segment {
        #[arg(long)]
        segmenter: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[command(flatten)]
        out: OutArg,
    },
    /// Score one variant against its ground-truth masks.
    Evaluate {
        #[arg(long)]
        segmenter: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum)]
        method: MethodArg,
        #[command(flatten)]
        out: OutArg,
    },
    /// Compare unprocessed, traditional and CycleGAN variants.
    Compare {
        #[arg(long)]
        segmenter: PathBuf,
        #[arg(long)]
        unprocessed: PathBuf,
        #[arg(long)]
        traditional: PathBuf,
        #[arg(long)]
        cyclegan: PathBuf,
        #[command(flatten)]
        out: OutArg,
    },
}

/// Execute a parsed command line.
pub fn run(cli: Cli) -> Result<()> {
    let base = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let mut rc = base.resolve(cli.seed);
    match cli.command {
        Command::Phantom {
            out,
            train_volumes,
            test_volumes,
            bscans,
            size,
        } => {
            let p = &mut rc.phantom;
            p.train_volumes = train_volumes.unwrap_or(p.train_volumes);
            p.test_volumes = test_volumes.unwrap_or(p.test_volumes);
            p.base.bscans_per_volume = bscans.unwrap_or(p.base.bscans_per_volume);
            if let Some(s) = size {
                p.base.height = s;
                p.base.width = s;
            }
            cmd_phantom(&rc, &out.out)
        }
        Command::AdaptTraditional {
            input,
            out,
            noise_mu,
            noise_sigma,
        } => {
            let t = &mut rc.traditional;
            t.noise_mu = noise_mu.unwrap_or(t.noise_mu);
            t.noise_sigma = noise_sigma.unwrap_or(t.noise_sigma);
            cmd_adapt_traditional(&rc, &input, &out.out).map(drop)
        }
        Command::TrainSegmenter { data, out, steps } => {
            rc.segmenter.steps = steps.unwrap_or(rc.segmenter.steps);
            cmd_train_segmenter(&rc, &data, &out.out).map(drop)
        }
        Command::TrainCyclegan {
            data,
            segmenter,
            out,
            epochs,
            resume,
        } => {
            rc.train.epochs = epochs.unwrap_or(rc.train.epochs);
            let path = cmd_train_cyclegan(&rc, &data, &segmenter, &out.out, resume.as_deref())?;
            info!("final checkpoint {}", path.display());
            Ok(())
        }
        Command::Adapt {
            checkpoint,
            input,
            direction,
            out,
        } => {
            let dir = match direction {
                DirectionArg::A2b => Direction::A2B,
                DirectionArg::B2a => Direction::B2A,
            };
            cmd_adapt(&checkpoint, &input, dir, &out.out, &rc).map(drop)
        }
        Command::Segment {
            segmenter,
            input,
            out,
        } => cmd_segment(&segmenter, &input, &out.out, &rc),
        Command::Evaluate {
            segmenter,
            input,
            method,
            out,
        } => cmd_evaluate(&segmenter, &input, method.into(), &out.out, &rc).map(drop),
        Command::Compare {
            segmenter,
            unprocessed,
            traditional,
            cyclegan,
            out,
        } => {
            let variants = [
                (Method::Unprocessed, unprocessed),
                (Method::Traditional, traditional),
                (Method::Cyclegan, cyclegan),
            ];
            let report = cmd_compare(&segmenter, &variants, &out.out, &rc)?;
            eprint!("{}", report.table());
            Ok(())
        }
    }
}

/// Parse arguments, run, and map the outcome to an exit code.
pub fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
