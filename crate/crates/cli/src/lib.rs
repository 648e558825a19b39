//! The `rocpose` command line: dataset synthesis, the two training
//! stages, evaluation, and the inference-configuration ablation grid.
//!
//! Every subcommand takes `--config <file>` with the same keys as its
//! flags (JSON, kebab-case); explicit flags win over the file, the file
//! wins over built-in defaults. All writes stay inside `--out`.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use rocpose_core::decoder::{DecoderConfig, GenerationConfig, Order, Sampling, Scheduler};
use rocpose_core::encoders::EncoderConfig;
use rocpose_core::fusion::{FusionConfig, ValueSource};
use rocpose_core::metrics::{PoseErrorReport, SampleErrors};
use rocpose_core::pipeline::{
    estimate_pose_pair, reproject_mask_iou, PoseEstimate, PoseModel, SampleRecord, TokenSource,
};
use rocpose_core::synth::{
    self, DatasetConfig, DatasetManifest, ManifestEntry, ObjectSpec, SceneSample, Split,
};
use rocpose_core::tokenizer::{Tokenizer, TokenizerConfig};
use rocpose_core::trainer::{self, TrainConfig};

#[derive(Parser, Debug)]
#[command(
    name = "rocpose",
    version,
    about = "One-reference 6D pose estimation via tokenized object-coordinate maps"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic RGB-D dataset with exact ground truth.
    Synth(SynthArgs),
    /// Train the coordinate-map tokenizer on ground-truth query maps.
    TrainTokenizer(TrainTokenizerArgs),
    /// Train encoders, fusion, and the token decoder against a frozen tokenizer.
    TrainMain(TrainMainArgs),
    /// Evaluate a trained model on one dataset split.
    Eval(EvalArgs),
    /// Sweep the inference-configuration grid and tabulate quality/runtime.
    Ablate(AblateArgs),
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::TrainTokenizer(args) => cmd_train_tokenizer(args),
        Command::TrainMain(args) => cmd_train_main(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Ablate(args) => cmd_ablate(args),
    }
}

fn read_overrides<T: serde::de::DeserializeOwned + Default>(path: &Option<PathBuf>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p)
                .with_context(|| format!("reading config file {}", p.display()))?;
            serde_json::from_str(&text)
                .with_context(|| format!("parsing config file {}", p.display()))
        }
    }
}

/// Flag beats file beats default.
fn pick<T>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}

fn parse_scheduler(s: &str) -> std::result::Result<Scheduler, String> {
    match s {
        "linear" => Ok(Scheduler::Linear),
        "cosine" => Ok(Scheduler::Cosine),
        other => Err(format!("unknown scheduler `{other}` (expected linear|cosine)")),
    }
}

fn parse_order(s: &str) -> std::result::Result<Order, String> {
    match s {
        "random" => Ok(Order::Random),
        "raster" => Ok(Order::Raster),
        other => Err(format!("unknown order `{other}` (expected random|raster)")),
    }
}

fn parse_sampling(s: &str) -> std::result::Result<Sampling, String> {
    if s == "argmax" {
        return Ok(Sampling::Argmax);
    }
    if let Some(tau) = s.strip_prefix("temp:") {
        let tau: f64 = tau
            .parse()
            .map_err(|_| format!("bad temperature `{tau}`"))?;
        if !(tau.is_finite() && tau > 0.0) {
            return Err(format!("temperature {tau} must be positive and finite"));
        }
        return Ok(Sampling::Temperature(tau));
    }
    Err(format!(
        "unknown sampling `{s}` (expected argmax or temp:<tau>)"
    ))
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        other => Err(format!("unknown split `{other}` (expected train|val|test)")),
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

// ---------------------------------------------------------------- synth

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Dataset root to create.
    #[arg(long)]
    pub out: PathBuf,
    /// Number of objects (first three are box / composite / cylinder).
    #[arg(long)]
    pub objects: Option<usize>,
    /// Reference/query pairs per object, split 80/10/10.
    #[arg(long)]
    pub pairs: Option<usize>,
    /// Square image side in pixels.
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// JSON file with the same keys as the flags.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Default, serde::Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
struct SynthOverrides {
    objects: Option<usize>,
    pairs: Option<usize>,
    size: Option<usize>,
    seed: Option<u64>,
}

/// The toy object templates, cycled when more objects are requested.
fn object_specs(count: usize) -> Result<Vec<ObjectSpec>> {
    if count == 0 {
        bail!("--objects must be at least 1");
    }
    let base = DatasetConfig::toy().objects;
    let mut specs = Vec::with_capacity(count);
    for i in 0..count {
        let template = &base[i % base.len()];
        if i < base.len() {
            specs.push(template.clone());
        } else {
            specs.push(ObjectSpec {
                id: format!("{}{}", template.id, i / base.len() + 1),
                kind: template.kind,
                seed: template.seed.wrapping_add(1000 * (i / base.len()) as u64),
            });
        }
    }
    Ok(specs)
}

pub fn cmd_synth(args: SynthArgs) -> Result<()> {
    let file: SynthOverrides = read_overrides(&args.config)?;
    let objects = pick(args.objects, file.objects, 3);
    let pairs = pick(args.pairs, file.pairs, 200);
    let size = pick(args.size, file.size, 128);
    let seed = pick(args.seed, file.seed, 0);
    if pairs == 0 {
        bail!("--pairs must be at least 1");
    }

    let mut config = DatasetConfig::toy();
    config.objects = object_specs(objects)?;
    let tenth = pairs / 10;
    config.train_per_object = pairs - 2 * tenth;
    config.val_per_object = tenth;
    config.test_per_object = tenth;
    config.image_width = size;
    config.image_height = size;
    config.focal = 1.25 * size as f64;

    let manifest = synth::generate_dataset(&config, seed, &args.out)?;
    println!(
        "wrote {} samples ({} objects x {} pairs) to {}",
        manifest.entries.len(),
        manifest.objects.len(),
        config.samples_per_object(),
        args.out.display()
    );
    Ok(())
}

// ------------------------------------------------------- train-tokenizer

#[derive(Args, Debug)]
pub struct TrainTokenizerArgs {
    /// Dataset root (from `synth`).
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for the checkpoint and loss curve.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Held-out metric cadence in iterations.
    #[arg(long)]
    pub eval_interval: Option<usize>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Default, serde::Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
struct TrainTokenizerOverrides {
    iters: Option<usize>,
    batch: Option<usize>,
    lr: Option<f64>,
    seed: Option<u64>,
    eval_interval: Option<usize>,
}

fn load_split(root: &Path, manifest: &DatasetManifest, split: Split) -> Result<Vec<SceneSample>> {
    manifest
        .entries_for(split)
        .map(|e| Ok(synth::load_sample(root, e)?))
        .collect()
}

pub fn cmd_train_tokenizer(args: TrainTokenizerArgs) -> Result<()> {
    let file: TrainTokenizerOverrides = read_overrides(&args.config)?;
    let config = TrainConfig {
        batch_size: pick(args.batch, file.batch, 8),
        iterations: pick(args.iters, file.iters, 4000),
        peak_lr: pick(args.lr, file.lr, 1e-3),
        warmup_frac: 0.05,
        background_prob: 0.0,
        corruption_prob: 0.0,
        seed: pick(args.seed, file.seed, 0),
        eval_interval: pick(args.eval_interval, file.eval_interval, 250),
    };
    let manifest = synth::load_manifest(&args.data)?;
    // Both coordinate maps of every training pair are tokenizer material;
    // full samples are dropped as soon as their maps are out, so peak
    // memory is the map set rather than the dataset.
    let mut train = Vec::new();
    for entry in manifest.entries_for(Split::Train) {
        let sample = synth::load_sample(&args.data, entry)?;
        train.push(sample.roc_query);
        train.push(sample.roc_reference);
    }
    let mut heldout = Vec::new();
    for entry in manifest.entries_for(Split::Val) {
        heldout.push(synth::load_sample(&args.data, entry)?.roc_query);
    }
    println!(
        "training tokenizer: {} train / {} held-out maps, {} iterations",
        train.len(),
        heldout.len(),
        config.iterations
    );
    let start = Instant::now();
    let (tokenizer, log) =
        trainer::train_tokenizer(&train, &heldout, TokenizerConfig::default(), &config)?;
    fs::create_dir_all(&args.out)?;
    tokenizer.save(&args.out)?;
    log.write_csv(&args.out.join("tokenizer_curve.csv"))?;
    println!(
        "done in {:.1}s; final loss {:.5}, held-out MSE {:?}",
        start.elapsed().as_secs_f64(),
        log.last_loss().unwrap_or(f64::NAN),
        log.last_heldout()
    );
    Ok(())
}

// ------------------------------------------------------------ train-main

#[derive(Args, Debug)]
pub struct TrainMainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Directory holding the trained tokenizer checkpoint.
    #[arg(long)]
    pub tokenizer: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Transformer width shared by encoders, fusion, and decoder.
    #[arg(long)]
    pub width: Option<usize>,
    /// Encoder/fusion block count (the decoder gets two more).
    #[arg(long)]
    pub blocks: Option<usize>,
    #[arg(long)]
    pub background_prob: Option<f64>,
    #[arg(long)]
    pub corruption_prob: Option<f64>,
    #[arg(long)]
    pub eval_interval: Option<usize>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Default, serde::Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
struct TrainMainOverrides {
    iters: Option<usize>,
    batch: Option<usize>,
    lr: Option<f64>,
    seed: Option<u64>,
    width: Option<usize>,
    blocks: Option<usize>,
    background_prob: Option<f64>,
    corruption_prob: Option<f64>,
    eval_interval: Option<usize>,
}

pub fn cmd_train_main(args: TrainMainArgs) -> Result<()> {
    let file: TrainMainOverrides = read_overrides(&args.config)?;
    let tokenizer = Tokenizer::load(&args.tokenizer)
        .with_context(|| format!("loading tokenizer from {}", args.tokenizer.display()))?;
    let width = pick(args.width, file.width, 128);
    let blocks = pick(args.blocks, file.blocks, 4);
    let config = TrainConfig {
        batch_size: pick(args.batch, file.batch, 8),
        iterations: pick(args.iters, file.iters, 6000),
        peak_lr: pick(args.lr, file.lr, 3e-4),
        warmup_frac: 0.05,
        background_prob: pick(args.background_prob, file.background_prob, 0.5),
        corruption_prob: pick(args.corruption_prob, file.corruption_prob, 0.5),
        seed: pick(args.seed, file.seed, 0),
        eval_interval: pick(args.eval_interval, file.eval_interval, 500),
    };
    let tok_cfg = *tokenizer.config();
    let encoder = EncoderConfig {
        width,
        heads: 4,
        blocks,
        patch: tok_cfg.downsample,
    };
    let fusion = FusionConfig {
        width,
        heads: 4,
        blocks,
        values: ValueSource::RocPlusRgb,
    };
    let decoder = DecoderConfig {
        width,
        heads: 4,
        blocks: blocks + 2,
        vocab: tok_cfg.codebook_size,
        code_dim: tok_cfg.latent_dim,
    };

    let manifest = synth::load_manifest(&args.data)?;
    let train = load_split(&args.data, &manifest, Split::Train)?;
    let heldout = load_split(&args.data, &manifest, Split::Val)?;
    println!(
        "training main network: width {width}, {blocks}+{} blocks, {} train samples, {} iterations",
        blocks + 2,
        train.len(),
        config.iterations
    );
    let start = Instant::now();
    let (model, log) =
        trainer::train_main(&train, &heldout, &tokenizer, encoder, fusion, decoder, &config)?;
    fs::create_dir_all(&args.out)?;
    model.save(&args.out)?;
    log.write_csv(&args.out.join("main_curve.csv"))?;
    println!(
        "done in {:.1}s; final loss {:.4}, held-out NLL {:?}",
        start.elapsed().as_secs_f64(),
        log.last_loss().unwrap_or(f64::NAN),
        log.last_heldout()
    );
    Ok(())
}

// ------------------------------------------------------------------ eval

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub tokenizer: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Dataset split to evaluate: train|val|test.
    #[arg(long)]
    pub split: Option<String>,
    /// Substitute ground-truth tokens (teacher-forced upper bound).
    #[arg(long)]
    pub oracle_tokens: bool,
    #[arg(long)]
    pub steps: Option<usize>,
    /// linear|cosine
    #[arg(long)]
    pub scheduler: Option<String>,
    /// random|raster
    #[arg(long)]
    pub order: Option<String>,
    /// argmax or temp:<tau>
    #[arg(long)]
    pub sampling: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Evaluate at most this many samples.
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Default, serde::Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
struct EvalOverrides {
    split: Option<String>,
    oracle_tokens: Option<bool>,
    steps: Option<usize>,
    scheduler: Option<String>,
    order: Option<String>,
    sampling: Option<String>,
    seed: Option<u64>,
    limit: Option<usize>,
}

struct EvalSetup {
    manifest: DatasetManifest,
    tokenizer: Tokenizer,
    model: PoseModel,
}

fn load_eval_setup(data: &Path, tokenizer: &Path, model: &Path) -> Result<EvalSetup> {
    let manifest = synth::load_manifest(data)?;
    let tokenizer = Tokenizer::load(tokenizer)
        .with_context(|| format!("loading tokenizer from {}", tokenizer.display()))?;
    let model = PoseModel::load(model)
        .with_context(|| format!("loading model from {}", model.display()))?;
    model.check_compatible(tokenizer.config())?;
    Ok(EvalSetup {
        manifest,
        tokenizer,
        model,
    })
}

/// One evaluated sample: error metrics plus the on-disk record.
struct EvalOutcome {
    errors: SampleErrors,
    record: SampleRecord,
}

fn evaluate_sample(
    setup: &EvalSetup,
    root: &Path,
    entry: &ManifestEntry,
    points: &[nalgebra::Vector3<f64>],
    diameter: f64,
    source_of: impl Fn(&SceneSample) -> Result<TokenSource>,
    gen_config: Option<GenerationConfig>,
) -> Result<EvalOutcome> {
    let sample = synth::load_sample(root, entry)?;
    let source = source_of(&sample)?;
    let start = Instant::now();
    let est: PoseEstimate = match estimate_pose_pair(
        &setup.model,
        &setup.tokenizer,
        (&sample.query).into(),
        (&sample.reference).into(),
        &sample.t_ro,
        &sample.intrinsics,
        &source,
    ) {
        Ok(est) => est,
        // Too few predicted-valid pixels to solve for a pose: score the
        // sample as a miss under an identity relative pose instead of
        // aborting the whole run.
        Err(rocpose_core::Error::InsufficientCorrespondences { .. }) => {
            let t_rq = rocpose_core::geometry::RigidTransform::identity();
            PoseEstimate {
                t_rq,
                t_qo: rocpose_core::geometry::compose_absolute(&t_rq, &sample.t_ro),
                roc_pred: rocpose_core::geometry::RocMap::new_invalid(
                    sample.query.mask.width(),
                    sample.query.mask.height(),
                ),
                tokens: rocpose_core::tokenizer::TokenGrid::new(1, 1, 1, vec![0])?,
            }
        }
        Err(other) => return Err(other.into()),
    };
    let timing_ms = start.elapsed().as_secs_f64() * 1e3;
    // A wildly wrong pose can put every reference point behind the query
    // camera; that is a score of zero, not a crash.
    let miou = reproject_mask_iou(
        &est.t_rq,
        &sample.reference.depth,
        &sample.reference.mask,
        &sample.intrinsics,
        &sample.query.mask,
    )
    .unwrap_or(0.0);
    let errors = SampleErrors::compute(&entry.dir, points, diameter, &sample.t_qo, &est.t_qo)?;
    let record = SampleRecord {
        sample_id: entry.dir.clone(),
        t_rq: est.t_rq.to_rows_3x4(),
        t_qo: est.t_qo.to_rows_3x4(),
        miou,
        gen_config,
        timing_ms,
    };
    Ok(EvalOutcome { errors, record })
}

pub fn cmd_eval(args: EvalArgs) -> Result<()> {
    let file: EvalOverrides = read_overrides(&args.config)?;
    let split = parse_split(&pick(args.split.clone(), file.split, "test".into()))
        .map_err(anyhow::Error::msg)?;
    let oracle = args.oracle_tokens || file.oracle_tokens.unwrap_or(false);
    let seed = pick(args.seed, file.seed, 0);
    let gen = GenerationConfig {
        steps: pick(args.steps, file.steps, 16),
        scheduler: parse_scheduler(&pick(args.scheduler.clone(), file.scheduler, "cosine".into()))
            .map_err(anyhow::Error::msg)?,
        order: parse_order(&pick(args.order.clone(), file.order, "random".into()))
            .map_err(anyhow::Error::msg)?,
        sampling: parse_sampling(&pick(args.sampling.clone(), file.sampling, "argmax".into()))
            .map_err(anyhow::Error::msg)?,
        seed,
    };
    gen.validate()?;
    let limit = args.limit.or(file.limit);

    let setup = load_eval_setup(&args.data, &args.tokenizer, &args.model)?;
    let entries: Vec<&ManifestEntry> = setup
        .manifest
        .entries_for(split)
        .take(limit.unwrap_or(usize::MAX))
        .collect();
    if entries.is_empty() {
        bail!("split {split:?} holds no samples");
    }

    let mut outcomes = Vec::with_capacity(entries.len());
    for (i, entry) in entries.iter().enumerate() {
        let record = setup.manifest.object(&entry.object_id)?;
        let points =
            synth::load_object_points(&args.data, &setup.manifest, &entry.object_id)?;
        let per_sample = GenerationConfig {
            seed: seed ^ splitmix(i as u64),
            ..gen
        };
        let outcome = evaluate_sample(
            &setup,
            &args.data,
            entry,
            &points,
            record.diameter,
            |sample| {
                Ok(if oracle {
                    TokenSource::Oracle(setup.tokenizer.tokenize(&sample.roc_query)?)
                } else {
                    TokenSource::Generate(per_sample)
                })
            },
            (!oracle).then_some(per_sample),
        )?;
        outcomes.push(outcome);
    }

    let report = PoseErrorReport::aggregate(
        outcomes.iter().map(|o| o.errors.clone()).collect(),
    )?;
    fs::create_dir_all(&args.out)?;
    let mut jsonl = String::new();
    for o in &outcomes {
        jsonl.push_str(&serde_json::to_string(&o.record)?);
        jsonl.push('\n');
    }
    fs::write(args.out.join("samples.jsonl"), jsonl)?;
    fs::write(
        args.out.join("report.json"),
        serde_json::to_vec_pretty(&report)?,
    )?;
    fs::write(args.out.join("report.txt"), report.table())?;
    print!("{}", report.table());
    Ok(())
}

// ---------------------------------------------------------------- ablate

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub tokenizer: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub split: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Samples per grid cell.
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Default, serde::Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
struct AblateOverrides {
    split: Option<String>,
    seed: Option<u64>,
    limit: Option<usize>,
}

/// One grid cell of the ablation table.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct AblationRow {
    pub steps: usize,
    pub scheduler: Scheduler,
    pub order: Order,
    pub sampling: Sampling,
    pub recall_add: f64,
    pub recall_adds: f64,
    pub auc_add: f64,
    pub auc_adds: f64,
    /// Mean wall time per sample; excluded from determinism comparisons.
    pub runtime_ms: f64,
}

pub const ABLATION_STEPS: [usize; 4] = [1, 4, 16, 64];

fn sampling_label(s: &Sampling) -> String {
    match s {
        Sampling::Argmax => "argmax".into(),
        Sampling::Temperature(tau) => format!("temp:{tau}"),
    }
}

pub fn cmd_ablate(args: AblateArgs) -> Result<()> {
    let file: AblateOverrides = read_overrides(&args.config)?;
    let split = parse_split(&pick(args.split.clone(), file.split, "test".into()))
        .map_err(anyhow::Error::msg)?;
    let seed = pick(args.seed, file.seed, 0);
    let limit = args.limit.or(file.limit);

    let setup = load_eval_setup(&args.data, &args.tokenizer, &args.model)?;
    let entries: Vec<&ManifestEntry> = setup
        .manifest
        .entries_for(split)
        .take(limit.unwrap_or(usize::MAX))
        .collect();
    if entries.is_empty() {
        bail!("split {split:?} holds no samples");
    }

    let mut rows = Vec::new();
    for steps in ABLATION_STEPS {
        for scheduler in [Scheduler::Linear, Scheduler::Cosine] {
            for order in [Order::Random, Order::Raster] {
                for sampling in [Sampling::Argmax, Sampling::Temperature(1.0)] {
                    let mut errors = Vec::with_capacity(entries.len());
                    let mut elapsed_ms = 0.0f64;
                    for (i, entry) in entries.iter().enumerate() {
                        let record = setup.manifest.object(&entry.object_id)?;
                        let points = synth::load_object_points(
                            &args.data,
                            &setup.manifest,
                            &entry.object_id,
                        )?;
                        let gen = GenerationConfig {
                            steps,
                            scheduler,
                            order,
                            sampling,
                            seed: seed ^ splitmix(i as u64),
                        };
                        let outcome = evaluate_sample(
                            &setup,
                            &args.data,
                            entry,
                            &points,
                            record.diameter,
                            |_| Ok(TokenSource::Generate(gen)),
                            Some(gen),
                        )?;
                        elapsed_ms += outcome.record.timing_ms;
                        errors.push(outcome.errors);
                    }
                    let report = PoseErrorReport::aggregate(errors)?;
                    rows.push(AblationRow {
                        steps,
                        scheduler,
                        order,
                        sampling,
                        recall_add: report.recall_add,
                        recall_adds: report.recall_adds,
                        auc_add: report.auc_add,
                        auc_adds: report.auc_adds,
                        runtime_ms: elapsed_ms / entries.len() as f64,
                    });
                }
            }
        }
    }

    fs::create_dir_all(&args.out)?;
    fs::write(
        args.out.join("ablation.json"),
        serde_json::to_vec_pretty(&rows)?,
    )?;
    let mut tsv = String::from(
        "steps\tscheduler\torder\tsampling\trecall_add\trecall_adds\tauc_add\tauc_adds\truntime_ms\n",
    );
    for row in &rows {
        tsv.push_str(&format!(
            "{}\t{:?}\t{:?}\t{}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.2}\n",
            row.steps,
            row.scheduler,
            row.order,
            sampling_label(&row.sampling),
            row.recall_add,
            row.recall_adds,
            row.auc_add,
            row.auc_adds,
            row.runtime_ms
        ));
    }
    fs::write(args.out.join("ablation.tsv"), &tsv)?;
    print!("{tsv}");
    Ok(())
}
