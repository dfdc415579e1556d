//! Command-line front end: `crop`, `synth`, `train` and `eval`.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, load_checkpoint_for};
use crate::data::{
    crop_patches, create_dir, generate_synthetic_pair, labels_dir, load_image, load_label, load_split, save_image,
    save_label, split_dataset, write_domain, write_manifest, manifest_path, images_dir, Domain, LabelMap, PatchSpec,
    RasterImage, SceneSpec, ShiftSpec,
};
use crate::error::{Error, Result};
use crate::metrics::{colorize, ConfusionCounts, ResultTable, TableFormat, UndefinedPolicy};
use crate::runner::{evaluate, run_training, RunOptions, TensorSet, CHECKPOINT_DIR};
use crate::tensor::Tensor;
use crate::trainer::{predict, TrainConfig, TrainState};

#[derive(Debug, Parser)]
#[command(name = "uda", version, about = "Domain-adaptive semantic segmentation toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Tile large rasters into patches and write train/test manifests.
    Crop(CommonArgs),
    /// Generate the synthetic two-domain dataset.
    Synth(CommonArgs),
    /// Train the full pipeline and evaluate on the target test split.
    Train(CommonArgs),
    /// Evaluate a checkpoint and export predictions.
    Eval(CommonArgs),
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// TOML configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory; every artifact is written below it.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the seed in the configuration.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Record the run as deterministic (single-threaded, fixed ordering).
    #[arg(long)]
    pub deterministic: bool,
    /// Comma-separated components to disable: ps, f_adv, l_adv, st.
    #[arg(long, value_delimiter = ',')]
    pub ablate: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CropConfig {
    /// Directory with `images/*.png` and optionally `labels/*.png`.
    pub input: PathBuf,
    pub domain: Domain,
    pub patch: PatchSpec,
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for CropConfig {
    fn default() -> Self {
        CropConfig {
            input: PathBuf::new(),
            domain: Domain::Source,
            patch: PatchSpec::default(),
            train_fraction: 0.7,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub seed: u64,
    pub images: usize,
    pub classes: usize,
    pub train_fraction: f64,
    pub shift: ShiftSpec,
    pub scene: SceneSpec,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            images: 500,
            classes: 4,
            train_fraction: 0.8,
            shift: ShiftSpec::default(),
            scene: SceneSpec::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainRunConfig {
    /// Dataset root in the `synth`/`crop` layout.
    pub data: PathBuf,
    pub checkpoint_every: usize,
    pub eval_batch: usize,
    /// Continue from `<out>/checkpoint` when it exists.
    pub resume: bool,
    pub deterministic: bool,
    pub policy: UndefinedPolicy,
    pub train: TrainConfig,
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        TrainRunConfig {
            data: PathBuf::new(),
            checkpoint_every: 100,
            eval_batch: 4,
            resume: false,
            deterministic: false,
            policy: UndefinedPolicy::Exclude,
            train: TrainConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub data: PathBuf,
    pub checkpoint: PathBuf,
    pub domain: Domain,
    pub split: String,
    pub policy: UndefinedPolicy,
    pub batch: usize,
    pub export_predictions: bool,
    pub colorize: bool,
    /// Also write the three raw class-agnostic maps and their mean.
    pub export_maps: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            data: PathBuf::new(),
            checkpoint: PathBuf::new(),
            domain: Domain::Target,
            split: "test".into(),
            policy: UndefinedPolicy::Exclude,
            batch: 4,
            export_predictions: true,
            colorize: true,
            export_maps: false,
        }
    }
}

fn read_config<C: DeserializeOwned + Default>(path: Option<&Path>) -> Result<C> {
    match path {
        None => Ok(C::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", p.display(), e)))
        }
    }
}

fn write_config<C: Serialize>(dir: &Path, name: &str, cfg: &C) -> Result<()> {
    let text = toml::to_string_pretty(cfg).map_err(|e| Error::Serde(e.to_string()))?;
    let path = dir.join(name);
    fs::write(&path, text).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn require_dir(path: &Path, what: &str) -> Result<()> {
    if path.as_os_str().is_empty() {
        return Err(Error::Config(format!("{} is not set", what)));
    }
    if !path.is_dir() {
        return Err(Error::Config(format!("{} {} is not a directory", what, path.display())));
    }
    Ok(())
}

fn check_fraction(f: f64) -> Result<()> {
    if f > 0.0 && f < 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("train_fraction {} must lie strictly between 0 and 1", f)))
    }
}

fn png_stems(dir: &Path) -> Result<Vec<String>> {
    let mut stems = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                stems.push(stem.to_string());
            }
        }
    }
    stems.sort();
    Ok(stems)
}

/// Number of patches written per source image, in manifest order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CropSummary {
    pub per_image: Vec<(String, usize)>,
    pub total: usize,
    pub train: usize,
    pub test: usize,
}

pub fn cmd_crop(args: &CommonArgs) -> Result<CropSummary> {
    let mut cfg: CropConfig = read_config(args.config.as_deref())?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    require_dir(&cfg.input, "input")?;
    cfg.patch.validate().map_err(|e| Error::Config(e.to_string()))?;
    check_fraction(cfg.train_fraction)?;
    let in_images = cfg.input.join("images");
    require_dir(&in_images, "input images directory")?;
    let in_labels = cfg.input.join("labels");
    let stems = png_stems(&in_images)?;
    if stems.is_empty() {
        return Err(Error::Config(format!("no PNG images in {}", in_images.display())));
    }
    let mut inputs = Vec::with_capacity(stems.len());
    for stem in &stems {
        let image = load_image(&in_images.join(format!("{}.png", stem)))?;
        if image.height < cfg.patch.patch_size || image.width < cfg.patch.patch_size {
            return Err(Error::InvalidArgument(format!(
                "{} is {}×{}, smaller than the {}-pixel patch",
                stem, image.height, image.width, cfg.patch.patch_size
            )));
        }
        let label_path = in_labels.join(format!("{}.png", stem));
        let label = if label_path.is_file() { Some(load_label(&label_path)?) } else { None };
        inputs.push((stem.clone(), image, label));
    }

    let (idir, ldir) = (images_dir(&args.out, cfg.domain), labels_dir(&args.out, cfg.domain));
    create_dir(&idir)?;
    let mut all = Vec::new();
    let mut per_image = Vec::new();
    for (stem, image, label) in &inputs {
        let patches = crop_patches(image, label.as_ref(), &cfg.patch)?;
        let per_row = cfg.patch.count_along(image.width);
        for (k, (patch, plabel)) in patches.iter().enumerate() {
            let name = format!("{}_r{:03}_c{:03}", stem, k / per_row, k % per_row);
            save_image(&idir.join(format!("{}.png", name)), patch)?;
            if let Some(l) = plabel {
                create_dir(&ldir)?;
                save_label(&ldir.join(format!("{}.png", name)), l)?;
            }
            all.push(name);
        }
        per_image.push((stem.clone(), patches.len()));
    }
    let (train, test) = split_dataset(&all, cfg.train_fraction, cfg.seed)?;
    write_manifest(&manifest_path(&args.out, cfg.domain, "train"), &train)?;
    write_manifest(&manifest_path(&args.out, cfg.domain, "test"), &test)?;
    write_config(&args.out, "crop.toml", &cfg)?;
    Ok(CropSummary {
        total: all.len(),
        train: train.len(),
        test: test.len(),
        per_image,
    })
}

#[derive(Serialize)]
struct SynthRecord<'a> {
    seed: u64,
    images: usize,
    classes: usize,
    shift: &'a ShiftSpec,
    scene: &'a SceneSpec,
    train: usize,
    test: usize,
}

pub fn cmd_synth(args: &CommonArgs) -> Result<()> {
    let mut cfg: SynthConfig = read_config(args.config.as_deref())?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    check_fraction(cfg.train_fraction)?;
    cfg.shift.validate().map_err(|e| Error::Config(e.to_string()))?;
    if cfg.images < 2 || !(2..=255).contains(&cfg.classes) {
        return Err(Error::Config("synth needs at least 2 images and 2..=255 classes".into()));
    }
    let (source, target) = generate_synthetic_pair(cfg.seed, cfg.images, cfg.classes, &cfg.shift, &cfg.scene)
        .map_err(|e| Error::Config(e.to_string()))?;
    let stems: Vec<String> = source.iter().map(|s| s.stem.clone()).collect();
    let (train, test) = split_dataset(&stems, cfg.train_fraction, cfg.seed)?;
    write_domain(&args.out, Domain::Source, &source, &train, &test)?;
    write_domain(&args.out, Domain::Target, &target, &train, &test)?;
    let record = SynthRecord {
        seed: cfg.seed,
        images: cfg.images,
        classes: cfg.classes,
        shift: &cfg.shift,
        scene: &cfg.scene,
        train: train.len(),
        test: test.len(),
    };
    let text = serde_json::to_string_pretty(&record).map_err(|e| Error::Serde(e.to_string()))?;
    write_text(&args.out.join("synth.json"), &(text + "\n"))?;
    write_config(&args.out, "synth.toml", &cfg)
}

fn labeled_set(root: &Path, domain: Domain, split: &str, classes: usize) -> Result<(Vec<String>, TensorSet<f32>)> {
    let items = load_split(root, domain, split, true)?;
    let pairs: Vec<(&RasterImage, &LabelMap)> = items
        .iter()
        .map(|(_, i, l)| (i, l.as_ref().expect("labels requested")))
        .collect();
    let stems = items.iter().map(|(s, _, _)| s.clone()).collect();
    Ok((stems, TensorSet::from_labeled(&pairs, classes)?))
}

fn train_config(args: &CommonArgs) -> Result<TrainRunConfig> {
    let mut cfg: TrainRunConfig = read_config(args.config.as_deref())?;
    if let Some(s) = args.seed {
        cfg.train.seed = s;
    }
    if args.deterministic {
        cfg.deterministic = true;
    }
    let names: Vec<&str> = args.ablate.iter().map(String::as_str).collect();
    cfg.train.ablation = cfg.train.ablation.without(&names)?;
    cfg.train.validate()?;
    require_dir(&cfg.data, "data")?;
    for domain in [Domain::Source, Domain::Target] {
        let m = manifest_path(&cfg.data, domain, "train");
        if !m.is_file() {
            return Err(Error::Config(format!("missing manifest {}", m.display())));
        }
    }
    if cfg.eval_batch == 0 {
        return Err(Error::Config("eval_batch must be at least 1".into()));
    }
    Ok(cfg)
}

pub fn cmd_train(args: &CommonArgs, mut log: impl FnMut(&str)) -> Result<()> {
    let cfg = train_config(args)?;
    let tc = &cfg.train;
    let (_, source) = labeled_set(&cfg.data, Domain::Source, "train", tc.num_classes)?;
    let target_items = load_split(&cfg.data, Domain::Target, "train", false)?;
    let target = TensorSet::from_images(&target_items.iter().map(|(_, i, _)| i).collect::<Vec<_>>())?;
    let (h, w) = (target_items[0].1.height, target_items[0].1.width);
    if source.images.iter().chain(&target.images).any(|t| t.shape()[2..] != [h, w]) {
        return Err(Error::InvalidArgument("all training images must share one patch size".into()));
    }

    create_dir(&args.out)?;
    let ckpt = args.out.join(CHECKPOINT_DIR);
    let mut state = if cfg.resume && ckpt.join(crate::checkpoint::MANIFEST).is_file() {
        log(&format!("resuming from {}", ckpt.display()));
        load_checkpoint_for::<f32>(&ckpt, tc)?
    } else {
        TrainState::new(tc)?
    };
    write_config(&args.out, "config.toml", &cfg)?;
    let opts = RunOptions {
        out_dir: Some(args.out.clone()),
        checkpoint_every: Some(cfg.checkpoint_every),
        stop_at: None,
    };
    let every = (tc.steps / 20).max(1) as u64;
    run_training(&mut state, tc, &source, &target, &opts, |r| {
        if (r.step + 1) % every == 0 {
            log(&format!("step {} {}", r.step + 1, r.to_json()));
        }
    })?;

    let test_manifest = manifest_path(&cfg.data, Domain::Target, "test");
    if test_manifest.is_file() && labels_dir(&cfg.data, Domain::Target).is_dir() {
        let (_, test) = labeled_set(&cfg.data, Domain::Target, "test", tc.num_classes)?;
        if !test.is_empty() {
            let counts = evaluate(&state, tc, &test, cfg.eval_batch)?;
            let table = emit_results(&args.out, "final", &counts, cfg.policy)?;
            log(&table);
        }
    }
    Ok(())
}

fn emit_results(out: &Path, name: &str, counts: &ConfusionCounts, policy: UndefinedPolicy) -> Result<String> {
    let classes = (0..counts.num_classes()).map(|k| format!("class{}", k)).collect();
    let mut table = ResultTable::new(classes);
    table.push(name, counts.evaluate(policy))?;
    let text = table.emit(TableFormat::Text)?;
    write_text(&out.join("metrics.txt"), &text)?;
    write_text(&out.join("metrics.json"), &(table.emit(TableFormat::Json)? + "\n"))?;
    Ok(text)
}

fn map_to_image(t: &Tensor<f32>, b: usize, ch: usize) -> Result<RasterImage> {
    let (_, c, h, w) = t.dims4()?;
    let plane = &t.data()[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
    let pixels = plane
        .iter()
        .flat_map(|&v| {
            let g = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            [g, g, g]
        })
        .collect();
    RasterImage::new(h, w, pixels)
}

pub fn cmd_eval(args: &CommonArgs) -> Result<String> {
    let cfg: EvalConfig = read_config(args.config.as_deref())?;
    require_dir(&cfg.data, "data")?;
    require_dir(&cfg.checkpoint, "checkpoint")?;
    if cfg.batch == 0 {
        return Err(Error::Config("batch must be at least 1".into()));
    }
    let m = manifest_path(&cfg.data, cfg.domain, &cfg.split);
    if !m.is_file() {
        return Err(Error::Config(format!("missing manifest {}", m.display())));
    }
    let (mut tc, state) = load_checkpoint::<f32>(&cfg.checkpoint)?;
    if !args.ablate.is_empty() {
        let names: Vec<&str> = args.ablate.iter().map(String::as_str).collect();
        tc.ablation = tc.ablation.without(&names)?;
    }
    let (stems, set) = labeled_set(&cfg.data, cfg.domain, &cfg.split, tc.num_classes)?;

    create_dir(&args.out)?;
    let pred_dir = args.out.join("predictions");
    let map_dir = args.out.join("maps");
    if cfg.export_predictions {
        create_dir(&pred_dir)?;
    }
    if cfg.export_maps {
        create_dir(&map_dir)?;
    }
    let mut counts = ConfusionCounts::new(tc.num_classes);
    let idx: Vec<usize> = (0..set.len()).collect();
    for chunk in idx.chunks(cfg.batch) {
        let images = set.batch(chunk)?;
        let (_, _, h, w) = images.dims4()?;
        let pred = predict(&state, &tc, &images)?;
        for (k, &i) in chunk.iter().enumerate() {
            let classes = pred.classes[k * h * w..(k + 1) * h * w].to_vec();
            counts.accumulate(&classes, &set.labels[i])?;
            let stem = &stems[i];
            if cfg.export_predictions {
                let label = LabelMap::new(h, w, classes)?;
                save_label(&pred_dir.join(format!("{}.png", stem)), &label)?;
                if cfg.colorize {
                    save_image(&pred_dir.join(format!("{}_color.png", stem)), &colorize(&label)?)?;
                }
            }
            if cfg.export_maps {
                for ch in 0..3 {
                    save_image(&map_dir.join(format!("{}_raw{}.png", stem, ch)), &map_to_image(&pred.maps.raw, k, ch)?)?;
                }
                save_image(
                    &map_dir.join(format!("{}_integrated.png", stem)),
                    &map_to_image(&pred.maps.integrated, k, 0)?,
                )?;
            }
        }
    }
    write_config(&args.out, "eval.toml", &cfg)?;
    emit_results(&args.out, "eval", &counts, cfg.policy)
}

/// Dispatches a parsed command line, printing human-readable progress.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Crop(a) => {
            let s = cmd_crop(&a)?;
            for (stem, n) in &s.per_image {
                println!("{}: {} patches", stem, n);
            }
            println!("total {} patches ({} train, {} test)", s.total, s.train, s.test);
        }
        Command::Synth(a) => {
            cmd_synth(&a)?;
            println!("synthetic dataset written to {}", a.out.display());
        }
        Command::Train(a) => cmd_train(&a, |line| println!("{}", line))?,
        Command::Eval(a) => print!("{}", cmd_eval(&a)?),
    }
    Ok(())
}
