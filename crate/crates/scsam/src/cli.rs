use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use scsam_core::emdata::LabeledSlice;
use scsam_core::encoder::{hex, EncoderKind, EncoderPair};
use scsam_core::engine::config::{component_sweep, fusion_sweep, lambda_sweep};
use scsam_core::engine::{
    evaluate, prepare, run_ablation, train_from, Checkpoint, Dataset, EmbeddingSource, EngineConfig, Model, OnTheFly,
    PreparedSlice, Progress,
};
use scsam_core::nn::Adam;
use scsam_core::Error;

use crate::cache::{cache_root, load_pair, load_weights, EmbeddingCache};
use crate::config::RunConfig;
use crate::dataset::{read_image, write_mask, SplitName};
use crate::error::{create_dir, write_atomic, CliError, Result};
use crate::runs::{load_checkpoint, read_jsonl, save_checkpoint, RunLogger, CHECKPOINT_NAME, EPOCHS_NAME};
use crate::viz::{self, Projector};

#[derive(Debug, Parser)]
#[command(name = "scsam", version, about = "Organelle segmentation from frozen SAM- and MAE-style embeddings")]
pub struct Cli {
    /// More log output (repeat for debug/trace).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    /// Only warnings and errors.
    #[arg(short, long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Encode every slice once and store the embeddings in a cache directory.
    Precompute(PrecomputeArgs),
    /// Train the alignment, fusion, prompt and decoder stack.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Write the binary mask of one class for one image.
    Predict(PredictArgs),
    /// Render similarity maps, overlays, embedding scatters or Dice curves.
    Visualize(VisualizeArgs),
    /// Train and score one model per setting of an ablation sweep.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Run config (TOML, or JSON such as a resolved_config.json). Defaults
    /// to the synthetic smoke setup.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override one config value, e.g. `--set train.lr=0.002`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Slices kept per cell, centred on the volume midpoint.
    #[arg(long, value_name = "N")]
    pub slices_per_cell: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum EncoderChoice {
    Sam,
    Mae,
    /// Both synthetic encoders from the config.
    Synthetic,
}

#[derive(Debug, Args)]
pub struct PrecomputeArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long, value_enum)]
    pub encoder: EncoderChoice,
    /// Encoder weights (JSON) for `sam` or `mae`; otherwise the config's
    /// encoder is used.
    #[arg(long, value_name = "PATH")]
    pub weights: Option<PathBuf>,
    /// Cache root. Falls back to $SCSAM_CACHE.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Run directory for the checkpoint, logs and resolved config.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Embedding cache root. Falls back to $SCSAM_CACHE, else encodes on the fly.
    #[arg(long, value_name = "DIR")]
    pub cache: Option<PathBuf>,
    /// Continue from a checkpoint written with the same config.
    #[arg(long, value_name = "FILE")]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Data config and `data.*` overrides; the model config comes from the checkpoint.
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "val")]
    pub split: SplitName,
    #[arg(long, value_name = "DIR")]
    pub cache: Option<PathBuf>,
    /// Directory for metrics.json; the report is always printed.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    /// Grayscale image (8- or 16-bit).
    #[arg(long, value_name = "FILE")]
    pub image: PathBuf,
    /// Class name, one of the checkpoint's classes.
    #[arg(long = "class", value_name = "NAME")]
    pub class: String,
    /// Output mask (PNG, 0/255).
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum VisualKind {
    Similarity,
    Overlay,
    EmbeddingScatter,
    DiceCurve,
}

#[derive(Debug, Args)]
pub struct VisualizeArgs {
    #[arg(long, value_enum)]
    pub kind: VisualKind,
    #[arg(long, value_name = "FILE")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    pub image: Option<PathBuf>,
    /// Training run directory or its epochs.jsonl (for dice-curve).
    #[arg(long, value_name = "PATH")]
    pub log: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "tsne")]
    pub projector: Projector,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Points per embedding source in a scatter.
    #[arg(long, default_value_t = 256)]
    pub points: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Sweep {
    /// Full model without sparse prompts, dense prompts, the alignment loss or the prompt residual.
    Components,
    /// FAFM, concatenation and cross-attention fusion.
    Fusion,
    /// Alignment loss weight 0.1, 0.2 and 0.3.
    Lambda,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long, value_enum)]
    pub sweep: Sweep,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub cache: Option<PathBuf>,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Precompute(a) => precompute(a),
        Command::Train(a) => train(a).map(|_| ()),
        Command::Eval(a) => eval(a).map(|_| ()),
        Command::Predict(a) => predict(a),
        Command::Visualize(a) => visualize(a).map(|_| ()),
        Command::Ablate(a) => ablate(a).map(|_| ()),
    }
}

pub fn resolve(args: &ConfigArgs) -> Result<RunConfig> {
    let base = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::smoke(),
    };
    let mut cfg = base.with_overrides(&args.overrides)?;
    if let Some(n) = args.slices_per_cell {
        cfg.data.set_slices_per_cell(n);
    }
    cfg.engine.validate()?;
    Ok(cfg)
}

fn eval_items(engine: &EngineConfig, slices: &[LabeledSlice]) -> Result<Vec<PreparedSlice>> {
    let mut plain = engine.clone();
    plain.train.augment = None;
    Ok(prepare(&plain, slices)?)
}

/// Pairs prepared slices with embeddings from the cache (if one is
/// configured) or from the encoders.
pub fn gather(engine: &EngineConfig, items: Vec<PreparedSlice>, cache: Option<&Path>) -> Result<Dataset> {
    match cache_root(cache) {
        Some(root) => {
            let cache = EmbeddingCache::new(root);
            match load_pair(engine) {
                Ok(pair) => cache.check_against(&pair)?,
                Err(e) => log::warn!("cannot verify cache against the configured encoders: {e}"),
            }
            let mut src = cache.source()?;
            Dataset::gather(engine, items, &mut src).map_err(|e| src.take_error().unwrap_or(e.into()))
        }
        None => {
            let mut src = OnTheFly {
                encoders: load_pair(engine)?,
            };
            Ok(Dataset::gather(engine, items, &mut src)?)
        }
    }
}

fn precompute(a: PrecomputeArgs) -> Result<()> {
    let cfg = resolve(&a.config)?;
    let root = cache_root(a.out.as_deref()).ok_or_else(|| CliError::Usage("precompute needs --out or $SCSAM_CACHE".into()))?;
    let encoders = match a.encoder {
        EncoderChoice::Synthetic => {
            for h in [&cfg.engine.encoders.sam, &cfg.engine.encoders.mae] {
                if h.kind != EncoderKind::Synthetic {
                    return Err(Error::Validation(format!(
                        "--encoder synthetic needs synthetic encoders in the config, {} is {:?}",
                        h.role.extension(),
                        h.kind
                    ))
                    .into());
                }
            }
            let pair = load_pair(&cfg.engine)?;
            vec![pair.sam, pair.mae]
        }
        EncoderChoice::Sam | EncoderChoice::Mae => {
            let (role, handle) = if a.encoder == EncoderChoice::Sam {
                (scsam_core::encoder::EncoderRole::Sam, &cfg.engine.encoders.sam)
            } else {
                (scsam_core::encoder::EncoderRole::Mae, &cfg.engine.encoders.mae)
            };
            let enc = match &a.weights {
                Some(p) => load_weights(p, role)?,
                None => crate::cache::load_encoder(handle)?,
            };
            if enc.handle().output_shape() != handle.output_shape() {
                return Err(Error::Validation(format!(
                    "{} weights produce {:?} grids, the config expects {:?}",
                    role.extension(),
                    enc.handle().output_shape(),
                    handle.output_shape()
                ))
                .into());
            }
            vec![enc]
        }
    };
    let items = prepare(&cfg.engine, &cfg.data.load_all()?)?;
    let cache = EmbeddingCache::new(&root);
    for enc in &encoders {
        let n = cache.precompute(enc, &items)?;
        log::info!(
            "wrote {n} {} embeddings to {} (encoder {})",
            enc.handle().role.extension(),
            root.display(),
            hex(&enc.fingerprint())
        );
    }
    cfg.write_resolved(&root)
}

/// What a finished training run reports.
#[derive(Debug, Clone, serde::Serialize)]
pub struct TrainSummary {
    pub progress: Progress,
    pub trainable_parameters: usize,
    pub encoder_fingerprint_before: Option<String>,
    pub encoder_fingerprint_after: Option<String>,
    pub final_train_dice: Option<f64>,
    pub checkpoint: PathBuf,
}

fn pair_fingerprint(engine: &EngineConfig) -> Option<[u8; 32]> {
    load_pair(engine).ok().map(|p: EncoderPair| p.fingerprint())
}

pub fn train(a: TrainArgs) -> Result<TrainSummary> {
    let cfg = resolve(&a.config)?;
    create_dir(&a.out)?;
    cfg.write_resolved(&a.out)?;
    let before = pair_fingerprint(&cfg.engine);
    let slices = cfg.data.load(SplitName::Train)?;
    let items = prepare(&cfg.engine, &slices)?;
    let data = gather(&cfg.engine, items, a.cache.as_deref())?;
    log::info!("training on {}", data.describe());

    let (mut model, mut adam, start) = match &a.resume {
        Some(p) => {
            let ck = load_checkpoint(p)?;
            if ck.config_hash() != cfg.engine.hash() {
                return Err(Error::Validation(format!(
                    "{} was trained with a different config (hash {} vs {})",
                    p.display(),
                    hex(&ck.config_hash()),
                    hex(&cfg.engine.hash())
                ))
                .into());
            }
            let adam = ck.optimizer.unwrap_or_else(|| Adam::new(cfg.engine.train.adam(), &ck.model.store));
            (ck.model, adam, ck.progress)
        }
        None => {
            let model = Model::new(&cfg.engine)?;
            let adam = Adam::new(cfg.engine.train.adam(), &model.store);
            (model, adam, Progress::default())
        }
    };
    let trainable = model.count_trainable();
    log::info!("trainable parameters: {trainable}");
    for (group, n) in model.group_sizes() {
        log::debug!("  {group}: {n}");
    }

    let mut logger = RunLogger::create(&a.out)?;
    let outcome = match train_from(&mut model, &mut adam, start, &data, &mut logger) {
        Ok(o) => o,
        Err(e) => {
            let report = json!({
                "error": e.to_string(),
                "recent_steps": logger.recent_steps(),
            });
            write_atomic(
                &a.out.join("failure.json"),
                serde_json::to_string_pretty(&report).expect("json").as_bytes(),
            )?;
            return Err(e.into());
        }
    };
    logger.finish()?;

    let after = pair_fingerprint(&cfg.engine);
    if before != after {
        return Err(Error::Validation("encoder weights changed during training".into()).into());
    }
    if let Some(fp) = after {
        log::info!("encoder fingerprint {} (unchanged)", hex(&fp));
    }
    let checkpoint = a.out.join(CHECKPOINT_NAME);
    save_checkpoint(
        &checkpoint,
        &Checkpoint {
            model,
            optimizer: Some(adam),
            progress: outcome.progress,
            encoder_fingerprint: data.fingerprint,
        },
    )?;
    let summary = TrainSummary {
        progress: outcome.progress,
        trainable_parameters: trainable,
        encoder_fingerprint_before: before.map(|f| hex(&f)),
        encoder_fingerprint_after: after.map(|f| hex(&f)),
        final_train_dice: outcome.log.epochs.last().map(|e| e.train_dice),
        checkpoint,
    };
    write_atomic(
        &a.out.join("summary.json"),
        serde_json::to_string_pretty(&summary).expect("json").as_bytes(),
    )?;
    log::info!(
        "done at epoch {} step {}; train dice {:?}",
        summary.progress.epoch,
        summary.progress.step,
        summary.final_train_dice
    );
    Ok(summary)
}

fn check_fingerprint(ck: &Checkpoint, data: &Dataset) -> Result<()> {
    if let (Some(want), Some(got)) = (ck.encoder_fingerprint, data.fingerprint) {
        if want != got {
            return Err(Error::Validation(format!(
                "checkpoint was trained on embeddings from encoders {}, these come from {}",
                hex(&want),
                hex(&got)
            ))
            .into());
        }
    }
    Ok(())
}

pub fn eval(a: EvalArgs) -> Result<scsam_core::metrics::MetricsReport> {
    if let Some(k) = a.config.overrides.iter().find(|o| !o.starts_with("data.")) {
        return Err(CliError::Usage(format!(
            "eval takes only data.* overrides (the model config comes from the checkpoint): {k}"
        )));
    }
    let ck = load_checkpoint(&a.checkpoint)?;
    let mut cfg = resolve(&a.config)?;
    cfg.engine = ck.config().clone();
    let items = eval_items(&cfg.engine, &cfg.data.load(a.split)?)?;
    let data = gather(&cfg.engine, items, a.cache.as_deref())?;
    check_fingerprint(&ck, &data)?;
    let report = evaluate(&ck.model, &data)?;
    for (class, n) in &report.skipped {
        log::warn!("class {class} had no mask in {n} slices");
    }
    let text = serde_json::to_string_pretty(&report).expect("json");
    println!("{text}");
    if let Some(dir) = &a.out {
        create_dir(dir)?;
        cfg.write_resolved(dir)?;
        write_atomic(&dir.join("metrics.json"), text.as_bytes())?;
    }
    Ok(report)
}

/// A checkpoint, an image and everything the model computed for it.
struct Scene {
    checkpoint: Checkpoint,
    image: scsam_core::grid::Image,
    item: PreparedSlice,
    sam: scsam_core::grid::FeatureGrid,
    mae: scsam_core::grid::FeatureGrid,
}

fn scene(checkpoint: &Path, image: &Path) -> Result<Scene> {
    let ck = load_checkpoint(checkpoint)?;
    let img = read_image(image)?;
    let slice = LabeledSlice {
        image: img.clone(),
        masks: BTreeMap::new(),
        cell_id: image.file_stem().map_or("image".into(), |s| s.to_string_lossy().into_owned()),
        slice_index: 0,
    };
    let item = eval_items(ck.config(), &[slice])?.remove(0);
    let encoders = load_pair(ck.config())?;
    if let Some(want) = ck.encoder_fingerprint {
        if want != encoders.fingerprint() {
            return Err(Error::Validation(format!(
                "checkpoint was trained with encoders {}, the configured ones are {}",
                hex(&want),
                hex(&encoders.fingerprint())
            ))
            .into());
        }
    }
    let (sam, mae) = OnTheFly { encoders }.embeddings(&item)?;
    Ok(Scene {
        checkpoint: ck,
        image: img,
        item,
        sam,
        mae,
    })
}

fn predict(a: PredictArgs) -> Result<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let classes = ck.config().model.classes.clone();
    let Some(k) = classes.iter().position(|c| *c == a.class) else {
        return Err(CliError::Usage(format!(
            "unknown class {:?}; valid classes: {}",
            a.class,
            classes.join(", ")
        )));
    };
    drop(ck);
    let s = scene(&a.checkpoint, &a.image)?;
    let mask = s.checkpoint.model.predict_mask(&s.sam, &s.mae, &s.item.letterbox, k)?;
    write_mask(&a.out, &mask)?;
    let cfg_path = a.out.with_extension("config.json");
    write_atomic(&cfg_path, s.checkpoint.config().to_json().as_bytes())?;
    log::info!("{} mask ({} px) written to {}", a.class, mask.area(), a.out.display());
    Ok(())
}

fn need<'a>(what: &'a Option<PathBuf>, kind: VisualKind, flag: &str, artifact: &str) -> Result<&'a PathBuf> {
    what.as_ref()
        .ok_or_else(|| CliError::Usage(format!("visualize {kind:?} needs {flag} ({artifact})")))
}

pub fn visualize(a: VisualizeArgs) -> Result<Vec<PathBuf>> {
    create_dir(&a.out)?;
    let mut written = Vec::new();
    if a.kind == VisualKind::DiceCurve {
        let log = need(&a.log, a.kind, "--log", "a training run directory or its epochs.jsonl")?;
        let path = if log.is_dir() { log.join(EPOCHS_NAME) } else { log.clone() };
        let epochs = read_jsonl(&path)?;
        let out = a.out.join("dice_curve.svg");
        let n = viz::dice_curve_svg(&epochs, &out)?;
        log::info!("{n} epochs plotted to {}", out.display());
        written.push(out);
        return Ok(written);
    }
    let ck = need(&a.checkpoint, a.kind, "--checkpoint", "a trained model")?;
    let image = need(&a.image, a.kind, "--image", "a grayscale image")?;
    let s = scene(ck, image)?;
    let model = &s.checkpoint.model;
    write_atomic(&a.out.join("model_config.json"), model.config.to_json().as_bytes())?;
    let inf = model.infer(&s.sam, &s.mae)?;
    match a.kind {
        VisualKind::Similarity => {
            written = viz::similarity_maps(model, &inf, &s.image, &s.item.letterbox, &a.out)?;
        }
        VisualKind::Overlay => {
            let masks: Vec<_> = model
                .classes()
                .iter()
                .enumerate()
                .map(|(k, c)| {
                    let m = scsam_core::engine::model::restore_mask(&inf.logits[k], &s.item.letterbox, model.config.train.threshold);
                    (c.clone(), m)
                })
                .collect();
            let out = a.out.join("overlay.png");
            viz::overlay(&s.image, &masks, &out)?;
            written.push(out);
        }
        VisualKind::EmbeddingScatter => {
            let dim = s.sam.channels().max(s.mae.channels());
            let mut stats = serde_json::Map::new();
            let stages = [
                ("pre", &s.sam, &s.mae, dim),
                ("post", &inf.aligned_sam, &inf.aligned_mae, inf.aligned_sam.channels()),
            ];
            for (stage, a_grid, b_grid, d) in stages {
                let pa = viz::grid_points(a_grid, a.points, d);
                let pb = viz::grid_points(b_grid, a.points, d);
                let all: Vec<Vec<f64>> = pa.iter().chain(&pb).cloned().collect();
                let y = viz::project(&all, a.projector, a.seed);
                let (ya, yb) = y.split_at(pa.len());
                let sep = viz::separation(ya, yb);
                let out = a.out.join(format!("scatter_{stage}.svg"));
                let title = format!("{stage}-alignment embeddings ({:?})", a.projector);
                viz::scatter_svg(&title, &[("SAM", ya), ("MAE", yb)], &out)?;
                log::info!(
                    "{stage}: centre distance {:.3}, spread {:.3}, separated {}",
                    sep.center_distance,
                    sep.spread,
                    sep.separated
                );
                stats.insert(stage.into(), serde_json::to_value(sep).expect("json"));
                written.push(out);
            }
            let out = a.out.join("scatter.json");
            write_atomic(&out, serde_json::to_string_pretty(&stats).expect("json").as_bytes())?;
            written.push(out);
        }
        VisualKind::DiceCurve => unreachable!("handled above"),
    }
    Ok(written)
}

pub fn ablate(a: AblateArgs) -> Result<scsam_core::engine::AblationTable> {
    let cfg = resolve(&a.config)?;
    create_dir(&a.out)?;
    cfg.write_resolved(&a.out)?;
    let rows = match a.sweep {
        Sweep::Components => component_sweep(&cfg.engine),
        Sweep::Fusion => fusion_sweep(&cfg.engine),
        Sweep::Lambda => lambda_sweep(&cfg.engine),
    };
    let train_items = prepare(&cfg.engine, &cfg.data.load(SplitName::Train)?)?;
    let train_set = gather(&cfg.engine, train_items, a.cache.as_deref())?;
    let eval_items = eval_items(&cfg.engine, &cfg.data.load(SplitName::Val)?)?;
    let eval_set = gather(&cfg.engine, eval_items, a.cache.as_deref())?;
    let table = run_ablation(&rows, &train_set, &eval_set);
    let text = table.render();
    print!("{text}");
    write_atomic(&a.out.join("table.txt"), text.as_bytes())?;
    write_atomic(
        &a.out.join("table.json"),
        serde_json::to_string_pretty(&table).expect("json").as_bytes(),
    )?;
    let configs: BTreeMap<&str, &EngineConfig> = rows.iter().map(|(n, c)| (n.as_str(), c)).collect();
    write_atomic(
        &a.out.join("row_configs.json"),
        serde_json::to_string_pretty(&configs).expect("json").as_bytes(),
    )?;
    if !table.is_complete() {
        log::warn!("some ablation rows failed; see table.txt");
    }
    Ok(table)
}
