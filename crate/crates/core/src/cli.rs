//! Command-line front end: `synth`, `pretrain`, `train`, `eval`, `report`, `compare`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::IxDyn;

use crate::backbone::{
    load_backbone, pretrain_on_base, read_metadata, save_backbone, BackboneSpec, PretrainConfig, ToyBackbone,
};
use crate::benchmark::BenchmarkPreset;
use crate::data::{generate_synthetic_dataset, load_dataset, save_dataset};
use crate::engine::{evaluate, train, Checkpoint, EvalEpisode, EvalOptions, FeatureBank, TrainConfig, TrainOptions};
use crate::evaluation::{
    compare_harness, format_reports, heatmap_panels, render_visuals, save_png, write_dump, CompareMode, EvalReport,
    HarnessData, IouMode, ReportFormat, SharedSetup,
};

#[derive(Debug, Parser)]
#[command(name = "frinet", version, about = "Few-shot rotation-invariant segmentation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the synthetic oriented-shapes dataset to disk.
    Synth(SynthArgs),
    /// Pretrain the toy backbone on the base classes of one fold.
    Pretrain(PretrainArgs),
    /// Meta-train the matcher, head and fusion with a frozen backbone.
    Train(TrainArgs),
    /// Evaluate a checkpoint on novel-class episodes.
    Eval(EvalArgs),
    /// Collect evaluation reports from a directory into one table.
    Report(ReportArgs),
    /// Run a comparison harness end to end on a synthetic or stored dataset.
    Compare(CompareArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub images: Option<usize>,
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Generate the all-orientation evaluation pool instead of the training pool.
    #[arg(long)]
    pub test_pool: bool,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[arg(long)]
    pub fold: usize,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Images are resized to this side length on load.
    #[arg(long)]
    pub input_size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub fold: usize,
    #[arg(long)]
    pub shots: usize,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub backbone: PathBuf,
    /// Flat `key = value` file; unset keys keep their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum IouModeArg {
    Pooled,
    PerEpisodeMean,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub episodes: usize,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub report: PathBuf,
    /// Overrides the dataset recorded in the checkpoint.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub shots: Option<usize>,
    #[arg(long, value_enum, default_value = "pooled")]
    pub iou_mode: IouModeArg,
    /// Write each episode's relation weights per branch.
    #[arg(long)]
    pub dump_relations: Option<PathBuf>,
    /// Write each episode's unrotated branch logits and fused logits.
    #[arg(long)]
    pub dump_branches: Option<PathBuf>,
    /// Write each episode's predicted and ground-truth masks plus an episode index.
    #[arg(long)]
    pub dump_masks: Option<PathBuf>,
    /// Render PNGs for the first episode here.
    #[arg(long)]
    pub visuals: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FormatArg {
    Json,
    Csv,
    Md,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long, value_enum, default_value = "md")]
    pub format: FormatArg,
    /// Write here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Baseline,
    RotationAug,
    Frinet,
    Ablation,
    OrientationSweep,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[arg(long, value_enum)]
    pub mode: ModeArg,
    /// Stored dataset; the synthetic benchmark is generated when absent.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Stored evaluation dataset; defaults to `--dataset` when that is given.
    #[arg(long)]
    pub test_dataset: Option<PathBuf>,
    /// One stored backbone per fold, in `--folds` order; pretrained on the fly when absent.
    #[arg(long)]
    pub backbone: Vec<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    pub folds: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    pub seeds: Vec<u64>,
    #[arg(long)]
    pub episodes: Option<usize>,
    #[arg(long)]
    pub eval_seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Pretrain(a) => pretrain(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Report(a) => report(a),
        Command::Compare(a) => compare(a),
    }
}

fn synth(a: SynthArgs) -> anyhow::Result<()> {
    let preset = BenchmarkPreset::default();
    let mut cfg = if a.test_pool {
        preset.test_synthetic
    } else {
        preset.synthetic
    };
    if let Some(seed) = a.seed {
        cfg.rng_seed = seed;
    }
    if let Some(n) = a.images {
        cfg.num_images = n;
    }
    if let Some(s) = a.size {
        cfg.image_size = s;
    }
    if let Some(c) = a.classes {
        cfg.shape_classes = c;
    }
    let ds = generate_synthetic_dataset(&cfg)?;
    save_dataset(&ds, &a.out)?;
    println!("wrote {} images to {}", ds.len(), a.out.display());
    Ok(())
}

fn pretrain(a: PretrainArgs) -> anyhow::Result<()> {
    let preset = BenchmarkPreset::default();
    let size = a.input_size.unwrap_or(preset.synthetic.image_size);
    let ds = load_dataset(&a.dataset, size)?;
    let split = ds.split(a.fold)?;
    let mut bb = ToyBackbone::random(preset.backbone.clone(), a.seed);
    let cfg = PretrainConfig {
        epochs: a.epochs.unwrap_or(preset.pretrain.epochs),
        seed: a.seed,
        ..preset.pretrain.clone()
    };
    let outcome = pretrain_on_base(&mut bb, &ds, split, &cfg)?;
    save_backbone(&bb, &a.out, Some(a.fold), Some(outcome.pixel_accuracy))?;
    println!(
        "fold {}: {} images, final loss {:.4}, pixel accuracy {:.4}; wrote {}",
        a.fold,
        outcome.images_used,
        outcome.epoch_losses.last().copied().unwrap_or(f64::NAN),
        outcome.pixel_accuracy,
        a.out.display()
    );
    Ok(())
}

fn backbone_spec(path: &Path) -> anyhow::Result<BackboneSpec> {
    let meta = read_metadata(path).with_context(|| format!("reading backbone metadata for {}", path.display()))?;
    Ok(BackboneSpec {
        name: meta.name,
        channels: meta.channels,
        stride: meta.stride,
        frozen: true,
        weights_uri: path.to_path_buf(),
    })
}

fn load_config(path: Option<&Path>) -> anyhow::Result<TrainConfig> {
    Ok(match path {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    })
}

fn train_cmd(a: TrainArgs) -> anyhow::Result<()> {
    let mut config = load_config(a.config.as_deref())?;
    config.fold = a.fold;
    config.shots = a.shots;
    config.validate()?;
    let ds = load_dataset(&a.dataset, config.input_size)?;
    let split = ds.split(a.fold)?;
    let spec = backbone_spec(&a.backbone)?;
    let bb = load_backbone(&spec)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    config.save(&a.out.join("train.cfg"))?;
    let mut opts = TrainOptions {
        backbone_spec: Some(spec),
        checkpoint_dir: Some(a.out.clone()),
        dataset_uri: Some(a.dataset.clone()),
        ..TrainOptions::default()
    };
    let outcome = train(&ds, split, &config, &bb, &mut opts)?;
    println!(
        "trained {} epochs; final loss {:.5}; checkpoint {}",
        outcome.epoch_losses.len(),
        outcome.epoch_losses.last().copied().unwrap_or(f64::NAN),
        a.out.join("last.safetensors").display()
    );
    Ok(())
}

fn dump_dir(dir: &Option<PathBuf>) -> anyhow::Result<()> {
    if let Some(d) = dir {
        fs::create_dir_all(d).with_context(|| format!("creating {}", d.display()))?;
    }
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> anyhow::Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let Some(spec) = ckpt.backbone.clone() else {
        bail!("checkpoint does not reference a stored backbone");
    };
    let bb = load_backbone(&spec)?;
    if bb.weight_checksum() != ckpt.backbone_checksum {
        bail!("backbone at {} changed since training", spec.weights_uri.display());
    }
    let dataset_path = a
        .dataset
        .clone()
        .or_else(|| ckpt.dataset.clone())
        .context("no dataset given and none recorded in the checkpoint")?;
    let ds = load_dataset(&dataset_path, ckpt.config.input_size)?;
    let split = ds.split(ckpt.config.fold)?;
    let model = ckpt.to_model()?;
    let options = EvalOptions {
        num_episodes: a.episodes,
        seed: a.seed,
        iou_mode: match a.iou_mode {
            IouModeArg::Pooled => IouMode::Pooled,
            IouModeArg::PerEpisodeMean => IouMode::PerEpisodeMean,
        },
        shots: a.shots,
    };
    for d in [&a.dump_relations, &a.dump_branches, &a.dump_masks] {
        dump_dir(d)?;
    }
    let mut index_csv = String::from("episode,target_class\n");
    let mut observer = |e: EvalEpisode<'_>| -> crate::error::Result<()> {
        let i = e.index;
        if let Some(dir) = &a.dump_relations {
            for (r, rel) in e.output.relations.iter() {
                let deg = r.degrees();
                write_dump(
                    &dir.join(format!("ep{i:05}_relations_r{deg}.frnt")),
                    &rel.weights.clone().into_dyn(),
                )?;
                save_png(
                    &heatmap_panels(&rel.weights, 4),
                    &dir.join(format!("ep{i:05}_relations_r{deg}.png")),
                )?;
            }
            for (r, scores) in e.output.scores.iter() {
                write_dump(
                    &dir.join(format!("ep{i:05}_scores_r{}.frnt", r.degrees())),
                    &scores.maps.clone().into_dyn(),
                )?;
            }
        }
        if let Some(dir) = &a.dump_branches {
            for (r, b) in e.output.branches.iter() {
                write_dump(
                    &dir.join(format!("ep{i:05}_branch_r{}.frnt", r.degrees())),
                    &b.data.clone().into_dyn(),
                )?;
            }
            write_dump(
                &dir.join(format!("ep{i:05}_fused.frnt")),
                &e.output.fused.data.clone().into_dyn(),
            )?;
        }
        if let Some(dir) = &a.dump_masks {
            let as_f32 = |m: &ndarray::Array2<u8>| {
                m.mapv(f32::from)
                    .into_shape_with_order(IxDyn(&[m.nrows(), m.ncols()]))
                    .expect("2-d")
            };
            write_dump(&dir.join(format!("ep{i:05}_pred.frnt")), &as_f32(e.prediction))?;
            write_dump(&dir.join(format!("ep{i:05}_gt.frnt")), &as_f32(&e.episode.query.mask))?;
            let _ = writeln!(index_csv, "{i},{}", e.episode.target_class);
        }
        if i == 0 {
            if let Some(dir) = &a.visuals {
                render_visuals(e.episode, e.output, e.prediction, dir)?;
            }
        }
        Ok(())
    };
    let mut bank = FeatureBank::new();
    let report = evaluate(
        &ds,
        split,
        &ckpt.config,
        &model,
        &bb,
        &mut bank,
        &options,
        Some(&mut observer),
    )?;
    if let Some(dir) = &a.dump_masks {
        let p = dir.join("episodes.csv");
        fs::write(&p, index_csv).with_context(|| format!("writing {}", p.display()))?;
    }
    if let Some(parent) = a.report.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(&a.report, report.to_json()).with_context(|| format!("writing {}", a.report.display()))?;
    println!(
        "mIoU {:.2} over {} episodes ({})",
        report.miou_percent(),
        report.num_episodes,
        report.status
    );
    Ok(())
}

/// Every `*.json` file under `dir` that parses as an evaluation report, by file name.
pub fn collect_reports(dir: &Path) -> anyhow::Result<Vec<(String, EvalReport)>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    let mut out = Vec::new();
    for p in paths {
        let text = fs::read_to_string(&p)?;
        match EvalReport::from_json(&text) {
            Ok(r) => out.push((p.file_stem().unwrap_or_default().to_string_lossy().into_owned(), r)),
            Err(e) => log::warn!("skipping {}: {e}", p.display()),
        }
    }
    if out.is_empty() {
        bail!("no evaluation reports in {}", dir.display());
    }
    Ok(out)
}

fn report(a: ReportArgs) -> anyhow::Result<()> {
    let reports = collect_reports(&a.input)?;
    let format = match a.format {
        FormatArg::Json => ReportFormat::Json,
        FormatArg::Csv => ReportFormat::Csv,
        FormatArg::Md => ReportFormat::Markdown,
    };
    let text = format_reports(&reports, format);
    match a.out {
        Some(p) => fs::write(&p, text).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{text}"),
    }
    Ok(())
}

fn compare(a: CompareArgs) -> anyhow::Result<()> {
    let preset = BenchmarkPreset::default();
    let mut base = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None => preset.train.clone(),
    };
    base.validate()?;
    let ds = match &a.dataset {
        Some(p) => load_dataset(p, base.input_size)?,
        None => generate_synthetic_dataset(&preset.synthetic)?,
    };
    let test = match (&a.test_dataset, &a.dataset) {
        (Some(p), _) => load_dataset(p, base.input_size)?,
        (None, Some(_)) => ds.clone(),
        (None, None) => generate_synthetic_dataset(&preset.test_synthetic)?,
    };
    if !a.backbone.is_empty() && a.backbone.len() != a.folds.len() {
        bail!(
            "give one --backbone per fold ({} folds, {} backbones)",
            a.folds.len(),
            a.backbone.len()
        );
    }
    let mut backbones = Vec::with_capacity(a.folds.len());
    for (i, &fold) in a.folds.iter().enumerate() {
        let bb = match a.backbone.get(i) {
            Some(p) => load_backbone(&backbone_spec(p)?)?,
            None => preset.pretrained_backbone(&ds, fold)?,
        };
        backbones.push(bb);
    }
    base.fold = a.folds[0];
    let shared = SharedSetup {
        base,
        folds: a.folds.clone(),
        seeds: a.seeds.clone(),
        eval: EvalOptions {
            num_episodes: a.episodes.unwrap_or(preset.eval_episodes),
            seed: a.eval_seed.unwrap_or(preset.eval_seed),
            ..EvalOptions::default()
        },
    };
    let mode = match a.mode {
        ModeArg::Baseline => CompareMode::Baseline,
        ModeArg::RotationAug => CompareMode::RotationAug,
        ModeArg::Frinet => CompareMode::Frinet,
        ModeArg::Ablation => CompareMode::MethodAblation,
        ModeArg::OrientationSweep => CompareMode::OrientationSweep,
    };
    let folds = a.folds.clone();
    let report = compare_harness(
        mode,
        HarnessData {
            train: &ds,
            test: &test,
        },
        &shared,
        |fold| {
            let i = folds.iter().position(|&f| f == fold).expect("fold listed");
            Ok(&backbones[i])
        },
    )?;
    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join("comparison.md"), report.to_markdown())?;
    fs::write(a.out.join("comparison.csv"), report.to_csv())?;
    print!("{}", report.to_markdown());
    Ok(())
}
