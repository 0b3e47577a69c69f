//! `cmn` — dataset generation, training, evaluation, ablations, and
//! attention statistics for the class-prototype memory network.
//!
//! Exit codes: 0 on success, 2 for validation/usage errors, 3 when training
//! hits a non-finite loss.

mod config;

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use cmn_core::data::{
    generate, load_csv, save_csv, similarity_stats_from_means, Dataset, DatasetMeta, SplitTag,
};
use cmn_core::error::Error as CoreError;
use cmn_core::experiments::{
    ablate, attention_cumsum, config_digest, evaluate, train_run, write_ablation_report,
    write_run_metrics, Variant,
};
use cmn_core::network::{Checkpoint, ReadModeSpec, TrainConfig};
use cmn_core::{Similarity, SCHEMA_VERSION};

use config::{resolve, ResolvedConfig};

#[derive(Parser)]
#[command(
    name = "cmn",
    version,
    about = "Class-prototype memory network: synthetic data, training, ablations"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// JSON config file (fields override preset values; flags override both)
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Named preset: fine-grained | coarse
    #[arg(long, global = true, value_name = "NAME")]
    preset: Option<String>,

    /// Seed override (data seed for gen-data, training seed otherwise)
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Suppress progress output
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic train/test dataset pair with a metadata sidecar
    GenData(GenDataArgs),
    /// Train one variant; writes metrics, a checkpoint, and a memory CSV
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split
    Eval(EvalArgs),
    /// Run the read-mode ablation grid across seeds
    Ablate(AblateArgs),
    /// Cumulative attention distribution of a trained checkpoint
    AttnStats(AttnStatsArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    num_classes: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    attribute_pool: Option<usize>,
    #[arg(long)]
    attrs_per_class: Option<usize>,
    #[arg(long)]
    shared_fraction: Option<f64>,
    #[arg(long)]
    unique_strength: Option<f64>,
    #[arg(long)]
    jitter_std: Option<f64>,
    #[arg(long)]
    noise_std: Option<f64>,
    #[arg(long)]
    train_per_class: Option<usize>,
    #[arg(long)]
    test_per_class: Option<usize>,
}

impl GenDataArgs {
    fn apply(&self, cfg: &mut ResolvedConfig) {
        let d = &mut cfg.data;
        if let Some(v) = self.num_classes {
            d.num_classes = v;
        }
        if let Some(v) = self.dim {
            d.dim = v;
        }
        if let Some(v) = self.attribute_pool {
            d.attribute_pool = v;
        }
        if let Some(v) = self.attrs_per_class {
            d.attrs_per_class = v;
        }
        if let Some(v) = self.shared_fraction {
            d.shared_fraction = v;
        }
        if let Some(v) = self.unique_strength {
            d.unique_strength = v;
        }
        if let Some(v) = self.jitter_std {
            d.jitter_std = v;
        }
        if let Some(v) = self.noise_std {
            d.noise_std = v;
        }
        if let Some(v) = self.train_per_class {
            d.train_per_class = v;
        }
        if let Some(v) = self.test_per_class {
            d.test_per_class = v;
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Baseline,
    Cmn,
    RandomModule,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReadModeArg {
    Attention,
    Equal,
    Topk,
    Predicted,
}

#[derive(Clone, Copy, ValueEnum)]
enum SimilarityArg {
    Cosine,
    Dot,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

/// Training hyperparameter overrides shared by `train` and `ablate`.
#[derive(Args)]
struct TrainFlags {
    /// Hidden layer widths, e.g. 64,32 (the last is the feature dim)
    #[arg(long, value_delimiter = ',')]
    hidden_dims: Option<Vec<usize>>,
    /// Backbone learning rate
    #[arg(long)]
    lr: Option<f64>,
    /// Multiplier on the newly added layers' learning rate
    #[arg(long)]
    lr_multiplier: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr_decay_factor: Option<f64>,
    #[arg(long)]
    lr_decay_epoch: Option<usize>,
    /// Memory update rate, in (0, 1)
    #[arg(long)]
    beta: Option<f64>,
    /// Attention softmax temperature
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    read_mode: Option<ReadModeArg>,
    #[arg(long)]
    similarity: Option<SimilarityArg>,
    /// Treat attention weights as constants in the backward pass
    #[arg(long)]
    no_backprop_attention: bool,
    /// Write the memory before the optimizer step instead of after it
    #[arg(long)]
    write_before_step: bool,
    /// Slot std for the random-module variant (default 1/sqrt(D))
    #[arg(long)]
    random_memory_scale: Option<f64>,
}

impl TrainFlags {
    fn apply(&self, cfg: &mut TrainConfig, topk: Option<usize>) -> Result<(), CliError> {
        if let Some(v) = &self.hidden_dims {
            cfg.hidden_dims = v.clone();
        }
        if let Some(v) = self.lr {
            cfg.lr_backbone = v;
        }
        if let Some(v) = self.lr_multiplier {
            cfg.lr_multiplier_new = v;
        }
        if let Some(v) = self.momentum {
            cfg.momentum = v;
        }
        if let Some(v) = self.weight_decay {
            cfg.weight_decay = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.lr_decay_factor {
            cfg.lr_decay_factor = v;
        }
        if let Some(v) = self.lr_decay_epoch {
            cfg.lr_decay_epoch = v;
        }
        if let Some(v) = self.beta {
            cfg.beta = v;
        }
        if let Some(v) = self.tau {
            cfg.tau = v;
        }
        if let Some(v) = self.similarity {
            cfg.similarity = match v {
                SimilarityArg::Cosine => Similarity::Cosine,
                SimilarityArg::Dot => Similarity::Dot,
            };
        }
        if let Some(mode) = self.read_mode {
            cfg.read_mode = match mode {
                ReadModeArg::Attention => ReadModeSpec::Attention,
                ReadModeArg::Equal => ReadModeSpec::Equal,
                ReadModeArg::Predicted => ReadModeSpec::Predicted,
                ReadModeArg::Topk => {
                    let k = topk
                        .or(match cfg.read_mode {
                            ReadModeSpec::TopK { k } => Some(k),
                            _ => None,
                        })
                        .ok_or_else(|| {
                            CliError::usage("--read-mode topk requires --topk <K>")
                        })?;
                    ReadModeSpec::TopK { k }
                }
            };
        } else if let Some(k) = topk {
            cfg.read_mode = ReadModeSpec::TopK { k };
        }
        if self.no_backprop_attention {
            cfg.backprop_through_attention = false;
        }
        if self.write_before_step {
            cfg.write_after_step = false;
        }
        if let Some(v) = self.random_memory_scale {
            cfg.random_memory_scale = Some(v);
        }
        Ok(())
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Directory holding train.csv, test.csv, and meta.json
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "cmn")]
    variant: VariantArg,
    /// k for --read-mode topk
    #[arg(long)]
    topk: Option<usize>,
    #[command(flatten)]
    flags: TrainFlags,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    /// Comma-separated training seeds
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
    seeds: Vec<u64>,
    /// Comma-separated top-k grid (each k adds a cmn(topk k) variant)
    #[arg(long, value_delimiter = ',')]
    topk: Option<Vec<usize>>,
    #[command(flatten)]
    flags: TrainFlags,
}

#[derive(Args)]
struct AttnStatsArgs {
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
}

// ---------------------------------------------------------------------------
// Error plumbing
// ---------------------------------------------------------------------------

pub struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        CliError {
            code: 2,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.message)
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        let code = match e {
            // Numerical failure mid-training is its own exit code so
            // scripted sweeps can tell it apart from bad arguments.
            CoreError::NonFinite { .. } => 3,
            _ => 2,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let ctx = Ctx {
        config: cli.config,
        preset: cli.preset,
        seed: cli.seed,
        out: cli.out,
        quiet: cli.quiet,
    };
    match cli.command {
        Command::GenData(args) => cmd_gen_data(&ctx, args),
        Command::Train(args) => cmd_train(&ctx, args),
        Command::Eval(args) => cmd_eval(&ctx, args),
        Command::Ablate(args) => cmd_ablate(&ctx, args),
        Command::AttnStats(args) => cmd_attn_stats(&ctx, args),
    }
}

struct Ctx {
    config: Option<PathBuf>,
    preset: Option<String>,
    seed: Option<u64>,
    out: Option<PathBuf>,
    quiet: bool,
}

impl Ctx {
    fn resolve(&self) -> Result<ResolvedConfig, CliError> {
        resolve(self.preset.as_deref(), self.config.as_deref())
    }

    fn out_dir(&self) -> Result<&Path, CliError> {
        self.out
            .as_deref()
            .ok_or_else(|| CliError::usage("--out <DIR> is required for this command"))
    }

    fn say(&self, text: impl fmt::Display) {
        if !self.quiet {
            println!("{text}");
        }
    }
}

fn threads_from_env() -> Result<Option<usize>, CliError> {
    match std::env::var("CMN_THREADS") {
        Ok(v) => {
            let n: usize = v
                .parse()
                .map_err(|_| CliError::usage(format!("CMN_THREADS={v:?} is not a number")))?;
            Ok(Some(n.max(1)))
        }
        Err(_) => Ok(None),
    }
}

fn load_dataset_dir(dir: &Path) -> Result<(Dataset, Dataset, Option<DatasetMeta>), CliError> {
    let meta_path = dir.join("meta.json");
    let meta = if meta_path.exists() {
        Some(DatasetMeta::load(&meta_path)?)
    } else {
        None
    };
    let declared = meta.as_ref().map(|m| m.num_classes);
    let mut train = load_csv(&dir.join("train.csv"), declared, SplitTag::Train)?;
    let mut test = load_csv(&dir.join("test.csv"), declared, SplitTag::Test)?;
    if declared.is_none() {
        let classes = train.num_classes.max(test.num_classes);
        train.num_classes = classes;
        test.num_classes = classes;
    }
    Ok((train, test, meta))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("value serializes");
    std::fs::write(path, text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

fn cmd_gen_data(ctx: &Ctx, args: GenDataArgs) -> Result<(), CliError> {
    let mut cfg = ctx.resolve()?;
    args.apply(&mut cfg);
    if let Some(seed) = ctx.seed {
        cfg.data.seed = seed;
    }
    let out = ctx.out_dir()?;

    let (train, test, means) = generate(&cfg.data)?;
    let report = similarity_stats_from_means(&means)?;

    std::fs::create_dir_all(out).map_err(|e| CliError::usage(format!("{}: {e}", out.display())))?;
    save_csv(&train, &out.join("train.csv"))?;
    save_csv(&test, &out.join("test.csv"))?;
    let meta = DatasetMeta {
        schema_version: SCHEMA_VERSION,
        num_classes: cfg.data.num_classes,
        dim: cfg.data.dim,
        train_samples: train.len(),
        test_samples: test.len(),
        generator: Some(cfg.data.clone()),
    };
    meta.save(&out.join("meta.json"))?;

    ctx.say(format!(
        "wrote {} train / {} test samples ({} classes, dim {}) to {}",
        train.len(),
        test.len(),
        cfg.data.num_classes,
        cfg.data.dim,
        out.display()
    ));
    ctx.say(format!(
        "class-mean cosine similarity: mean {:.4}, max {:.4}",
        report.mean_offdiag, report.max_offdiag
    ));
    ctx.say(format!("config digest: {}", config_digest(&cfg.data)));
    Ok(())
}

fn cmd_train(ctx: &Ctx, args: TrainArgs) -> Result<(), CliError> {
    let mut cfg = ctx.resolve()?;
    args.flags.apply(&mut cfg.train, args.topk)?;
    if let Some(seed) = ctx.seed {
        cfg.train.seed = seed;
    }
    let out = ctx.out_dir()?;
    let (train, test, _) = load_dataset_dir(&args.data)?;

    let variant = match args.variant {
        VariantArg::Baseline => Variant::Baseline,
        VariantArg::Cmn => Variant::Cmn(cfg.train.read_mode),
        VariantArg::RandomModule => Variant::RandomModule,
    };

    let outcome = train_run(&train, &test, &cfg.train, variant)?;

    if !ctx.quiet {
        for rec in &outcome.metrics.per_epoch {
            println!(
                "epoch {:>3}  loss {:.4}  train_acc {:.4}  test_acc {:.4}  lr {:.5}",
                rec.epoch, rec.train_loss, rec.train_acc, rec.test_acc, rec.lr
            );
        }
    }

    std::fs::create_dir_all(out).map_err(|e| CliError::usage(format!("{}: {e}", out.display())))?;
    write_run_metrics(&outcome.metrics, out)?;
    let checkpoint = Checkpoint {
        read_mode: outcome.metrics.summary.config.read_mode,
        similarity: outcome.metrics.summary.config.similarity,
        model: outcome.model,
        memory: outcome.memory,
    };
    checkpoint.save(&out.join("model.cmnw"))?;
    std::fs::write(out.join("memory.csv"), checkpoint.memory.to_csv())
        .map_err(|e| CliError::usage(format!("memory.csv: {e}")))?;

    ctx.say(format!(
        "{}: final test accuracy {} (digest {})",
        outcome.metrics.summary.variant,
        outcome.metrics.summary.final_test_accuracy,
        outcome.metrics.summary.config_digest
    ));
    Ok(())
}

#[derive(Serialize)]
struct EvalConfig<'a> {
    schema_version: u32,
    checkpoint: &'a Path,
    data: &'a Path,
    split: &'a str,
}

fn cmd_eval(ctx: &Ctx, args: EvalArgs) -> Result<(), CliError> {
    let checkpoint = Checkpoint::load(&args.checkpoint)?;
    let (train, test, _) = load_dataset_dir(&args.data)?;
    let (dataset, split) = match args.split {
        SplitArg::Train => (&train, "train"),
        SplitArg::Test => (&test, "test"),
    };
    let accuracy = evaluate(
        &checkpoint.model,
        &checkpoint.memory,
        dataset,
        checkpoint.read_mode,
        checkpoint.similarity,
    )?;
    let digest = config_digest(&EvalConfig {
        schema_version: SCHEMA_VERSION,
        checkpoint: &args.checkpoint,
        data: &args.data,
        split,
    });
    // Exact shortest-round-trip accuracy so scripts can compare bitwise.
    println!("accuracy: {accuracy}");
    ctx.say(format!("split: {split}, config digest: {digest}"));
    Ok(())
}

fn cmd_ablate(ctx: &Ctx, args: AblateArgs) -> Result<(), CliError> {
    let mut cfg = ctx.resolve()?;
    args.flags.apply(&mut cfg.train, None)?;
    if let Some(seed) = ctx.seed {
        cfg.train.seed = seed;
    }
    let out = ctx.out_dir()?;
    let (train, test, _) = load_dataset_dir(&args.data)?;
    let k_grid = args.topk.clone().unwrap_or_default();

    let report = ablate(
        &train,
        &test,
        &cfg.train,
        &args.seeds,
        &k_grid,
        threads_from_env()?,
    )?;

    std::fs::create_dir_all(out).map_err(|e| CliError::usage(format!("{}: {e}", out.display())))?;
    write_ablation_report(&report, &out.join("ablation.json"))?;

    if !ctx.quiet {
        println!(
            "{:<16} {:>8} {:>8} {:>10}  per-seed",
            "variant", "mean", "std", "vs base"
        );
        for v in &report.variants {
            let accs: Vec<String> = v
                .per_seed
                .iter()
                .map(|s| format!("{:.3}", s.accuracy))
                .collect();
            println!(
                "{:<16} {:>8.4} {:>8.4} {:>+10.4}  [{}]",
                v.variant,
                v.mean,
                v.std,
                v.mean_diff_vs_baseline,
                accs.join(", ")
            );
        }
    }
    ctx.say(format!("config digest: {}", report.config_digest));
    Ok(())
}

#[derive(Serialize)]
struct AttnStatsOutput<'a> {
    schema_version: u32,
    checkpoint: &'a Path,
    data: &'a Path,
    split: &'a str,
    config_digest: String,
    /// Average mass captured by the top ceil(C/2) prototypes.
    top_half_mass: f64,
    curve: &'a [f64],
}

fn cmd_attn_stats(ctx: &Ctx, args: AttnStatsArgs) -> Result<(), CliError> {
    let checkpoint = Checkpoint::load(&args.checkpoint)?;
    let (train, test, _) = load_dataset_dir(&args.data)?;
    let (dataset, split) = match args.split {
        SplitArg::Train => (&train, "train"),
        SplitArg::Test => (&test, "test"),
    };
    let out = ctx.out_dir()?;

    let curve = attention_cumsum(
        &checkpoint.model,
        &checkpoint.memory,
        dataset,
        checkpoint.read_mode,
        checkpoint.similarity,
    )?;
    let half = curve.len().div_ceil(2);
    let top_half_mass = curve[half - 1];
    let digest = config_digest(&EvalConfig {
        schema_version: SCHEMA_VERSION,
        checkpoint: &args.checkpoint,
        data: &args.data,
        split,
    });

    std::fs::create_dir_all(out).map_err(|e| CliError::usage(format!("{}: {e}", out.display())))?;
    write_json(
        &out.join("attn_stats.json"),
        &AttnStatsOutput {
            schema_version: SCHEMA_VERSION,
            checkpoint: &args.checkpoint,
            data: &args.data,
            split,
            config_digest: digest.clone(),
            top_half_mass,
            curve: &curve,
        },
    )?;

    ctx.say(format!(
        "top half of prototypes carries {:.3} of the attention mass; curve ends at {}",
        top_half_mass,
        curve.last().unwrap()
    ));
    ctx.say(format!("config digest: {digest}"));
    Ok(())
}
