//! `pim`: curation, training, evaluation, k-fold, ablation and Grad-CAM
//! explanation from the command line.
//!
//! Exit codes: 0 success, 1 configuration error, 2 data error, 3 numeric
//! failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use pim_core::curation::fixtures::{synthetic_config, synthetic_table, write_fixture};
use pim_core::curation::{self, AugmentedSet, CurationConfig, Manifest, Split};
use pim_core::gradcam::{CamLayer, DEFAULT_ALPHA};
use pim_core::harness::ablate::{
    fpn_variants, ladder_variants, nsel_variants, parse_nsel, run_variants, LadderSettings, FPN_REFERENCE,
    NSEL_REFERENCE,
};
use pim_core::harness::explain::{explain_image, ExplainInput};
use pim_core::harness::run::{write_report, RUN_CONFIG_FILE};
use pim_core::harness::{
    evaluate, kfold, load_checkpoint, save_run, train, AblationAxis, Checkpoint, Dataset, RunConfig, VariantData,
};
use pim_core::image_io::{load_gray, resize_bilinear};
use pim_core::{Error, ErrorKind, Result, Tensor};

#[derive(Parser)]
#[command(
    name = "pim",
    version,
    about = "Plug-in module experiments for fine-grained image recognition"
)]
struct Cli {
    /// Log filter, e.g. `info` or `pim_core=debug`.
    #[arg(long, global = true, default_value = "info")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand.
#[derive(Args, Clone)]
struct Common {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Build a balanced, augmented dataset from an annotation table.
    Curate(CurateArgs),
    /// Write a synthetic annotation table, its images, and a matching
    /// `curation.toml`.
    Synth(SynthArgs),
    /// Train on a curated manifest.
    Train(TrainArgs),
    /// Score a trained run on one split.
    Eval(EvalArgs),
    /// Stratified k-fold cross-validation.
    Kfold(KfoldArgs),
    /// Sweep selection sizes, FPN width, or the improvement ladder.
    Ablate(AblateArgs),
    /// Grad-CAM heatmaps for images.
    Explain(ExplainArgs),
}

#[derive(Args)]
struct CurateArgs {
    #[command(flatten)]
    common: Common,
    /// CSV with columns image_id, image_path, objects, projection.
    #[arg(long)]
    annotations: PathBuf,
    /// Directory the image paths are relative to.
    #[arg(long)]
    images: PathBuf,
    /// a1, a2, a3, a4, original or custom. Defaults to the config, else a2.
    #[arg(long)]
    set: Option<AugmentedSet>,
    /// Keep augmentation families on one side of every split.
    #[arg(long, action = clap::ArgAction::Set)]
    leakage_safe: Option<bool>,
    /// Side length of the written images.
    #[arg(long)]
    resolution: Option<usize>,
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    common: Common,
    /// Side length of the generated images.
    #[arg(long, default_value_t = 64)]
    size: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Curated manifest; overrides `manifest` in the config.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Start from the small synthetic-experiment configuration instead of
    /// the full-size default.
    #[arg(long)]
    toy: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Which {
    /// Best validation epoch.
    Best,
    /// Last epoch.
    Final,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// Directory written by `train`.
    #[arg(long)]
    run: PathBuf,
    /// Defaults to the manifest the run was trained on.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// train, val, test1 or test2. Defaults to the run's `eval_split`.
    #[arg(long)]
    split: Option<Split>,
    #[arg(long, value_enum, default_value = "best")]
    checkpoint: Which,
}

#[derive(Args)]
struct KfoldArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long, default_value_t = 10)]
    epochs_per_fold: usize,
    /// Manifest splits pooled before folding.
    #[arg(long, value_delimiter = ',', default_value = "train,val")]
    splits: Vec<Split>,
    #[arg(long)]
    toy: bool,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    common: Common,
    /// n_sel, fpn_size or ladder.
    #[arg(long)]
    axis: AblationAxis,
    /// Manifest of the augmented set (every row except the ladder's first).
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Manifest of the originals-only set, for the ladder's first row.
    #[arg(long)]
    original_manifest: Option<PathBuf>,
    /// Values to sweep, separated by `;`: `2048,512,128,32;256,128,64,32`
    /// for n_sel, `512;1024` for fpn_size. Defaults to the published sweep.
    #[arg(long)]
    values: Option<String>,
    #[arg(long)]
    toy: bool,
}

#[derive(Args)]
struct ExplainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    run: PathBuf,
    /// Grayscale PNG files to explain.
    #[arg(long, num_args = 1..)]
    image: Vec<PathBuf>,
    /// Explain images of a manifest split instead.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, default_value = "test1")]
    split: Split,
    /// At most this many manifest images.
    #[arg(long, default_value_t = 8)]
    limit: usize,
    /// Class names to explain; the predicted class when absent.
    #[arg(long = "class", num_args = 1..)]
    classes: Vec<String>,
    /// backbone0..3 or fpn0..3.
    #[arg(long, default_value = "backbone3")]
    layer: CamLayer,
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    alpha: f64,
    #[arg(long, value_enum, default_value = "best")]
    checkpoint: Which,
}

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Config => 1,
        ErrorKind::Data => 2,
        ErrorKind::Numeric => 3,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return if usage { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    env_logger::Builder::new()
        .parse_filters(&cli.log)
        .format_timestamp(None)
        .init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.kind()))
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Curate(a) => curate(a),
        Command::Synth(a) => synth(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Kfold(a) => kfold_cmd(a),
        Command::Ablate(a) => ablate_cmd(a),
        Command::Explain(a) => explain_cmd(a),
    }
}

fn required_out(common: &Common) -> Result<&Path> {
    common
        .out
        .as_deref()
        .ok_or_else(|| Error::Config("--out is required".into()))
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn curate(a: CurateArgs) -> Result<()> {
    let out = required_out(&a.common)?;
    let mut cfg = match &a.common.config {
        Some(p) => CurationConfig::from_toml(&read_text(p)?)?,
        None => CurationConfig::preset(a.set.unwrap_or_default()),
    };
    if let Some(set) = a.set {
        // A preset replaces the targets but keeps the file's other choices.
        let preset = CurationConfig::preset(set);
        cfg.set = set;
        cfg.fracture_target = preset.fracture_target;
    }
    if let Some(s) = a.common.seed {
        cfg.seed = s;
    }
    if let Some(l) = a.leakage_safe {
        cfg.leakage_safe = l;
    }
    if let Some(r) = a.resolution {
        cfg.resolution = r;
    }
    cfg.validate()?;
    let summary = curation::curate(&a.annotations, &a.images, out, &cfg)?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let out = required_out(&a.common)?;
    let seed = a.common.seed.unwrap_or(0);
    let records = synthetic_table();
    write_fixture(out, &records, a.size, seed)?;
    let cfg = CurationConfig {
        resolution: a.size,
        ..synthetic_config(seed, true)
    };
    write_text(&out.join("curation.toml"), &cfg.to_toml()?)?;
    println!(
        "wrote {} records to {}",
        records.len(),
        out.join("annotations.csv").display()
    );
    Ok(())
}

fn run_config(common: &Common, toy: bool) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None if toy => RunConfig::toy(),
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn manifest_path(flag: Option<PathBuf>, cfg: &RunConfig) -> Result<PathBuf> {
    flag.or_else(|| cfg.manifest.clone())
        .ok_or_else(|| Error::Config("no manifest: pass --manifest or set `manifest` in the config".into()))
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let out = required_out(&a.common)?.to_path_buf();
    let mut cfg = run_config(&a.common, a.toy)?;
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    let manifest = manifest_path(a.manifest, &cfg)?;
    cfg.manifest = Some(std::path::absolute(&manifest).map_err(|e| Error::Config(e.to_string()))?);
    let train_set = Dataset::from_manifest(&manifest, Split::Train, cfg.resolution)?;
    let val_set = Dataset::from_manifest(&manifest, Split::Val, cfg.resolution)?;
    let outcome = train(&cfg, &train_set, Some(&val_set))?;
    save_run(&out, &cfg, &train_set.classes, &outcome)?;
    if let Some(e) = outcome.epochs.last() {
        println!(
            "epoch {}: train loss {:.4}, train accuracy {:.4}, val accuracy {}",
            e.epoch,
            e.train_loss,
            e.train_accuracy,
            e.val_accuracy.map_or("-".into(), |v| format!("{v:.4}"))
        );
    }
    println!("best epoch {}; run written to {}", outcome.best_epoch, out.display());
    Ok(())
}

fn params(ckpt: &Checkpoint, which: Which) -> &pim_core::params::ParamStore {
    match which {
        Which::Best => &ckpt.best,
        Which::Final => &ckpt.last,
    }
}

fn trained_config(run: &Path) -> Result<RunConfig> {
    RunConfig::load(&run.join(RUN_CONFIG_FILE))
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.run)?;
    let cfg = trained_config(&a.run)?;
    let manifest = manifest_path(a.manifest, &cfg)?;
    let split = match a.split {
        Some(s) => s,
        None => cfg.eval_split.parse()?,
    };
    let data = Dataset::from_manifest(&manifest, split, ckpt.info.model.backbone.input_resolution)?;
    if data.classes != ckpt.info.classes {
        return Err(Error::Data(format!(
            "manifest classes {:?} differ from the run's {:?}",
            data.classes, ckpt.info.classes
        )));
    }
    let (report, loss) = evaluate(params(&ckpt, a.checkpoint), &ckpt.info.model, &data, cfg.batch_size)?;
    let out = a.common.out.clone().unwrap_or_else(|| a.run.clone());
    write_report(&out, &split.to_string(), &report)?;
    println!(
        "{split}: accuracy {:.4}, loss {loss:.4}, {} images",
        report.accuracy, report.total
    );
    for c in &report.per_class {
        let f = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
        println!(
            "  {}: sensitivity {}, specificity {}, precision {}, f1 {}",
            c.class,
            f(c.sensitivity),
            f(c.specificity),
            f(c.precision),
            f(c.f1)
        );
    }
    Ok(())
}

fn pooled(manifest: &Path, splits: &[Split], resolution: usize) -> Result<Dataset> {
    let mut parts = splits.iter().map(|&s| Dataset::from_manifest(manifest, s, resolution));
    let first = parts
        .next()
        .ok_or_else(|| Error::Config("no splits to pool".into()))??;
    let classes = first.classes.clone();
    let mut examples = first.examples;
    for part in parts {
        examples.extend(part?.examples);
    }
    Dataset::new(classes, examples)
}

fn kfold_cmd(a: KfoldArgs) -> Result<()> {
    let out = required_out(&a.common)?;
    let cfg = run_config(&a.common, a.toy)?;
    let manifest = manifest_path(a.manifest, &cfg)?;
    let data = pooled(&manifest, &a.splits, cfg.resolution)?;
    let report = kfold(&cfg, &data, a.k, a.epochs_per_fold)?;
    std::fs::create_dir_all(out).map_err(|e| Error::Data(format!("{}: {e}", out.display())))?;
    let text = report.render();
    write_text(&out.join("kfold.txt"), &text)?;
    write_text(
        &out.join("kfold.json"),
        &(serde_json::to_string_pretty(&report)? + "\n"),
    )?;
    print!("{text}");
    Ok(())
}

fn ablate_cmd(a: AblateArgs) -> Result<()> {
    let out = required_out(&a.common)?;
    let cfg = run_config(&a.common, a.toy)?;
    let variants = match a.axis {
        AblationAxis::NSel => {
            let values = match &a.values {
                Some(v) => v.split(';').map(parse_nsel).collect::<Result<Vec<_>>>()?,
                None => NSEL_REFERENCE.iter().map(|r| r.0).collect(),
            };
            nsel_variants(&cfg, &values)
        }
        AblationAxis::FpnSize => {
            let values = match &a.values {
                Some(v) => v
                    .split(';')
                    .map(|s| {
                        s.trim()
                            .parse::<usize>()
                            .map_err(|e| Error::Config(format!("bad FPN size {s:?}: {e}")))
                    })
                    .collect::<Result<Vec<_>>>()?,
                None => FPN_REFERENCE.iter().map(|r| r.0).collect(),
            };
            fpn_variants(&cfg, &values)
        }
        AblationAxis::Ladder => ladder_variants(&cfg, &LadderSettings::default()),
    };
    let main = a.manifest.clone().or_else(|| cfg.manifest.clone());
    let optional = |m: &Path, s: Split| Dataset::from_manifest(m, s, cfg.resolution).ok();
    let table = run_variants(a.axis, cfg.seed, &variants, |v| {
        let m = match v.set {
            AugmentedSet::Original => a.original_manifest.as_ref(),
            _ => main.as_ref(),
        }
        .ok_or_else(|| Error::Data(format!("no manifest for the {} set", v.set)))?;
        Ok(VariantData {
            train: Dataset::from_manifest(m, Split::Train, v.config.resolution)?,
            val: optional(m, Split::Val),
            test1: optional(m, Split::Test1),
            test2: optional(m, Split::Test2),
        })
    });
    std::fs::create_dir_all(out).map_err(|e| Error::Data(format!("{}: {e}", out.display())))?;
    let text = table.render();
    write_text(&out.join(format!("ablation_{}.tsv", a.axis)), &text)?;
    write_text(
        &out.join(format!("ablation_{}.json", a.axis)),
        &(serde_json::to_string_pretty(&table)? + "\n"),
    )?;
    print!("{text}");
    Ok(())
}

struct ToExplain {
    id: String,
    model_input: Tensor,
    display: Tensor,
}

fn square(img: Tensor, r: usize) -> Result<Tensor> {
    if img.shape() == [r, r] {
        Ok(img)
    } else {
        resize_bilinear(&img, r, r)
    }
}

fn explain_cmd(a: ExplainArgs) -> Result<()> {
    let out = required_out(&a.common)?;
    let ckpt = load_checkpoint(&a.run)?;
    let r = ckpt.info.model.backbone.input_resolution;
    let mut items = Vec::new();
    for path in &a.image {
        let img = square(load_gray(path)?, r)?;
        let id = path
            .file_stem()
            .map_or_else(|| "image".into(), |s| s.to_string_lossy().into_owned());
        items.push(ToExplain {
            id,
            model_input: img.clone(),
            display: img,
        });
    }
    if let Some(m) = &a.manifest {
        let data = Dataset::from_manifest(m, a.split, r)?;
        let manifest = Manifest::read(m)?;
        let dir = m.parent().unwrap_or(Path::new("."));
        for ex in data.examples.into_iter().take(a.limit) {
            let rec = manifest
                .split(a.split)
                .find(|rec| rec.image_id == ex.id)
                .ok_or_else(|| Error::Data(format!("{} missing from manifest", ex.id)))?;
            items.push(ToExplain {
                display: square(load_gray(&dir.join(&rec.image_path))?, r)?,
                id: ex.id,
                model_input: ex.image,
            });
        }
    }
    if items.is_empty() {
        return Err(Error::Config("nothing to explain: pass --image or --manifest".into()));
    }
    let requested: Vec<Option<usize>> = if a.classes.is_empty() {
        vec![None]
    } else {
        a.classes
            .iter()
            .map(|name| {
                ckpt.info
                    .classes
                    .iter()
                    .position(|c| c == name)
                    .map(Some)
                    .ok_or_else(|| Error::Config(format!("unknown class {name:?}, run has {:?}", ckpt.info.classes)))
            })
            .collect::<Result<_>>()?
    };
    let mut written = 0;
    for item in &items {
        let input = ExplainInput {
            image_id: &item.id,
            model_input: &item.model_input,
            display: &item.display,
        };
        let files = explain_image(
            params(&ckpt, a.checkpoint),
            &ckpt.info.model,
            &ckpt.info.classes,
            &input,
            &requested,
            a.layer,
            a.alpha,
            out,
        )?;
        for f in &files {
            println!("{}", f.heatmap.display());
        }
        written += files.len();
    }
    println!("{written} heatmaps in {}", out.display());
    Ok(())
}
