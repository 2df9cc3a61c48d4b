//! `ctrlgan`: toy data generation, training, translation and evaluation.
//!
//! Exit codes: 0 success, 2 invalid input or configuration, 3 numeric
//! abort, 1 anything else.

mod config;
mod grid;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ctrlgan_core::data::{load_paired_dataset, load_png, save_png, write_toy_dataset, Split};
use ctrlgan_core::metrics::{evaluate_pairs, Metric};
use ctrlgan_core::networks::{ConvStackExtractor, FeatureExtractor};
use ctrlgan_core::training::{
    generate_targets, load_generator, train, translate_with, AblationRow, Preset, RunOutput, TrainState,
};
use ctrlgan_core::{Error, ImageTensor, LossWeights, StructureMap, ToyDatasetSpec};

use crate::config::RunConfigFile;

const OUT_ENV: &str = "CTRLGAN_OUT";
const DEFAULT_OUT_ROOT: &str = "runs";

#[derive(Parser, Debug)]
#[command(name = "ctrlgan", version, about = "Structure-conditioned image-to-image translation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the synthetic shape dataset.
    Toydata(ToydataArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Translate one image into one output per structure map.
    Translate(TranslateArgs),
    /// Score a checkpoint on a dataset split.
    Eval(EvalArgs),
}

#[derive(Args, Debug)]
struct OutArg {
    /// Output directory. Defaults to `$CTRLGAN_OUT/<command>-<timestamp>-seed<seed>`
    /// (`runs/` when the variable is unset).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ToydataArgs {
    #[arg(long, default_value_t = 16)]
    pairs: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Held-out pairs; 0 picks a quarter of `--pairs`.
    #[arg(long, default_value_t = 0)]
    test_pairs: usize,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset root containing `train/pairs.csv`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Continue from a checkpoint; its configuration is used, with
    /// `--epochs` / `--max-steps` still applied.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    preset: Option<Preset>,
    #[arg(long)]
    ablation: Option<AblationRow>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long = "batch")]
    batch_size: Option<usize>,
    #[arg(long)]
    max_steps: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    beta1: Option<f64>,
    #[arg(long)]
    beta2: Option<f64>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    #[arg(long)]
    lambda_color: Option<f64>,
    #[arg(long)]
    lambda_cyc: Option<f64>,
    #[arg(long)]
    lambda_con: Option<f64>,
    #[arg(long)]
    lambda_vgg: Option<f64>,
    #[arg(long)]
    lambda_tv: Option<f64>,
    #[arg(long)]
    res_blocks: Option<usize>,
    #[arg(long)]
    gen_channels: Option<usize>,
    #[arg(long)]
    disc_channels: Option<usize>,
    #[arg(long)]
    structure_channels: Option<usize>,
    /// Random left-right flips.
    #[arg(long)]
    flip: bool,
    /// Reflect-pad-and-crop augmentation margin in pixels.
    #[arg(long)]
    crop_pad: Option<usize>,
    /// Resolve and print the configuration without training.
    #[arg(long)]
    dry_run: bool,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args, Debug)]
struct TranslateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    image: PathBuf,
    /// One or more target structure rasters.
    #[arg(long = "structure", num_args = 1.., required = true)]
    structures: Vec<PathBuf>,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Without a checkpoint the ground truth is scored against itself.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Comma-separated subset of psnr,ssim,sd,fid,frd.
    #[arg(long, default_value = "psnr,ssim,sd,fid,frd")]
    metrics: String,
    #[arg(long, default_value_t = 255.0)]
    data_range: f64,
    /// Feature-extractor weights file; the fixed-seed toy stack otherwise.
    #[arg(long)]
    extractor: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    extractor_seed: u64,
    /// Structure channels when no checkpoint fixes them.
    #[arg(long, default_value_t = 3)]
    structure_channels: usize,
    /// Also write per-pair values.
    #[arg(long)]
    per_pair: bool,
    /// Write a grid raster with input / structure / output / ground truth
    /// panels per sample.
    #[arg(long)]
    grid: bool,
    #[command(flatten)]
    out: OutArg,
}

fn run_dir(out: &OutArg, command: &str, seed: u64) -> PathBuf {
    out.out.clone().unwrap_or_else(|| {
        let root = std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_ROOT));
        let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
        root.join(format!("{command}-{stamp}-seed{seed}"))
    })
}

fn cmd_toydata(a: &ToydataArgs) -> anyhow::Result<()> {
    let spec = ToyDatasetSpec::new(a.pairs, a.size, a.seed).with_test_pairs(a.test_pairs);
    spec.validate()?;
    let dir = run_dir(&a.out, "toydata", a.seed);
    let ds = write_toy_dataset(&spec, &dir)?;
    println!("wrote {} train / {} test pairs to {}", ds.train.len(), ds.test.len(), dir.display());
    Ok(())
}

fn apply_overrides(file: &mut RunConfigFile, a: &TrainArgs) {
    let t = &mut file.train;
    if let Some(p) = a.preset {
        t.preset = p;
    }
    let lambda_flags = [a.lambda_color, a.lambda_cyc, a.lambda_con, a.lambda_vgg, a.lambda_tv];
    if lambda_flags.iter().any(Option::is_some) {
        // start from the chosen preset's values, then switch to custom
        let base = match t.preset {
            Preset::Gesture => Some(LossWeights::gesture()),
            Preset::Crossview => Some(LossWeights::crossview()),
            Preset::Custom => None,
        };
        if let Some(b) = base {
            [t.weights.lambda_color, t.weights.lambda_cyc, t.weights.lambda_con, t.weights.lambda_vgg, t.weights.lambda_tv] =
                [b.lambda_color, b.lambda_cyc, b.lambda_con, b.lambda_vgg, b.lambda_tv];
        }
        t.preset = Preset::Custom;
    }
    let w = &mut t.weights;
    for (flag, slot) in [
        (a.lambda_color, &mut w.lambda_color),
        (a.lambda_cyc, &mut w.lambda_cyc),
        (a.lambda_con, &mut w.lambda_con),
        (a.lambda_vgg, &mut w.lambda_vgg),
        (a.lambda_tv, &mut w.lambda_tv),
    ] {
        if let Some(v) = flag {
            *slot = v;
        }
    }
    if let Some(v) = a.ablation {
        t.ablation = v;
    }
    if let Some(v) = a.epochs {
        t.epochs = v;
    }
    if let Some(v) = a.batch_size {
        t.batch_size = v;
    }
    if a.max_steps.is_some() {
        t.max_steps = a.max_steps;
    }
    if let Some(v) = a.seed {
        t.seed = v;
    }
    if let Some(v) = a.lr {
        t.lr = v;
    }
    if let Some(v) = a.beta1 {
        t.beta1 = v;
    }
    if let Some(v) = a.beta2 {
        t.beta2 = v;
    }
    if let Some(v) = a.checkpoint_every {
        t.checkpoint_every = v;
    }
    if let Some(v) = a.res_blocks {
        t.model.num_res_blocks = v;
    }
    if let Some(v) = a.gen_channels {
        t.model.gen_base_channels = v;
    }
    if let Some(v) = a.disc_channels {
        t.model.disc_base_channels = v;
    }
    if let Some(v) = a.structure_channels {
        t.model.structure_channels = v;
        file.data.structure_channels = v;
    }
    if a.flip {
        t.augmentation.flip = true;
    }
    if let Some(v) = a.crop_pad {
        t.augmentation.crop_pad = v;
    }
    if let Some(d) = &a.data {
        file.data.root = Some(d.clone());
    }
}

fn cmd_train(a: &TrainArgs) -> anyhow::Result<()> {
    let mut file = match &a.config {
        Some(p) => RunConfigFile::load(p)?,
        None => RunConfigFile::default(),
    };
    apply_overrides(&mut file, a);
    let mut state = match &a.resume {
        Some(ckpt) => {
            let mut s = TrainState::load(ckpt)?;
            if let Some(e) = a.epochs {
                s.config.epochs = e;
            }
            if a.max_steps.is_some() {
                s.config.max_steps = a.max_steps;
            }
            file.train = s.config.clone();
            s
        }
        None => TrainState::new(file.train.clone())?,
    };
    let resolved = state.resolved();
    if a.dry_run {
        println!("{}", file.to_toml());
        println!("# resolved\n# weights = {:?}", resolved.weights);
        println!("# use_structure = {}, discriminators = {:?}", resolved.use_structure, resolved.discriminators);
        return Ok(());
    }
    let root = file.data.root.clone().ok_or_else(|| Error::Config("no dataset: pass --data or set data.root".into()))?;
    let dataset = load_paired_dataset(&root, Split::Train, file.data.load_options())?;
    let out = RunOutput { dir: run_dir(&a.out, "train", state.config.seed) };
    std::fs::create_dir_all(&out.dir)?;
    std::fs::write(out.dir.join("config.toml"), file.to_toml())?;
    log::info!(
        "training {:?} on {} pairs from {}, output {}",
        state.config.ablation,
        dataset.len(),
        root.display(),
        out.dir.display()
    );
    let result = train(&mut state, &dataset, Some(&out), |step, r| {
        if step == 1 || step % 50 == 0 {
            log::info!("step {step}: total_g {:.4} total_d {:.4} l1_y {:.4}", r.total_g, r.total_d, r.l1_y);
        }
    });
    if let Err(Error::NonFiniteLoss { term, report }) = &result {
        eprintln!("numeric abort at step {}: term `{term}` is not finite", state.step + 1);
        eprintln!("{report:#?}");
    }
    result?;
    println!("trained {} steps; checkpoint {}", state.step, out.checkpoint().display());
    Ok(())
}

fn file_stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "structure".into())
}

fn cmd_translate(a: &TranslateArgs) -> anyhow::Result<()> {
    let g = load_generator(&a.checkpoint)?;
    let image = ImageTensor::from_rgb8(&load_png(&a.image)?)?;
    let channels = g.config().structure_channels.max(1);
    let structures = a
        .structures
        .iter()
        .map(|p| Ok(StructureMap::from_rgb8(&load_png(p)?, channels, Default::default())?))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let outputs = translate_with(&g, &image, &structures)?;
    let dir = run_dir(&a.out, "translate", 0);
    std::fs::create_dir_all(&dir)?;
    for (i, (out, p)) in outputs.iter().zip(&a.structures).enumerate() {
        let path = dir.join(format!("{i:03}_{}.png", file_stem(p)));
        save_png(&out.to_rgb8(0), &path)?;
        println!("{}", path.display());
    }
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> anyhow::Result<()> {
    let metrics = Metric::parse_list(&a.metrics)?;
    let split: Split = a.split.parse()?;
    let generator = a.checkpoint.as_deref().map(load_generator).transpose()?;
    let channels = generator
        .as_ref()
        .map(|g| g.config().structure_channels)
        .filter(|&c| c > 0)
        .unwrap_or(a.structure_channels);
    let opts = ctrlgan_core::data::LoadOptions { structure_channels: channels, ..Default::default() };
    let samples = load_paired_dataset(&a.data, split, opts)?;
    if samples.is_empty() {
        return Err(Error::Validation("dataset split is empty".into()).into());
    }
    let generated = match &generator {
        Some(g) => generate_targets(g, &samples)?,
        None => samples.iter().map(|s| s.y.clone()).collect(),
    };
    let real: Vec<ImageTensor> = samples.iter().map(|s| s.y.clone()).collect();
    let extractor: Box<dyn FeatureExtractor> = match &a.extractor {
        Some(p) => Box::new(ConvStackExtractor::load(p)?),
        None => Box::new(ConvStackExtractor::toy(a.extractor_seed)),
    };
    let report = evaluate_pairs(&real, &generated, extractor.as_ref(), &metrics, a.data_range)?;
    for w in &report.warnings {
        log::warn!("{w}");
    }
    let dir = run_dir(&a.out, "eval", 0);
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("metrics.csv"), report.to_csv())?;
    if !report.warnings.is_empty() {
        std::fs::write(dir.join("warnings.txt"), report.warnings.join("\n") + "\n")?;
    }
    if a.per_pair {
        std::fs::write(dir.join("per_pair.csv"), report.per_pair_csv())?;
    }
    if a.grid {
        let img = grid::render(&samples, &generated)?;
        save_png(&img, &dir.join("grid.png"))?;
    }
    print!("{}", report.to_csv());
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            if e.is_numeric() {
                return 3;
            }
            if e.is_validation() {
                return 2;
            }
        }
    }
    1
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Toydata(a) => cmd_toydata(a),
        Command::Train(a) => cmd_train(a),
        Command::Translate(a) => cmd_translate(a),
        Command::Eval(a) => cmd_eval(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
