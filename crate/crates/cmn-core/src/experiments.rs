//! Training and evaluation loops, the read-mode ablation suite, attention
//! distribution statistics, and metrics persistence.
//!
//! Everything here is deterministic given `(config, data)`: model init,
//! per-epoch shuffles, and the random memory each come from fixed substreams
//! of the config seed, and the shuffle stream depends only on `(seed,
//! epoch)` so every variant of an ablation consumes identical batch
//! sequences. Independent `(variant, seed)` runs are parallelized with
//! rayon; results are collected in job order so the report does not depend
//! on scheduling.

use std::fs;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::memory::{CategoricalMemory, Similarity};
use crate::network::{
    apply_sgd, backward, forward, lr_at, Gradients, MlpModel, OptimizerState, ReadModeSpec,
    TrainConfig,
};
use crate::numerics::{Matrix, Rng};
use crate::SCHEMA_VERSION;

/// Substream ids of the config seed. Model init, predictor init, and the
/// random memory draw from separate streams so enabling one never shifts
/// another; shuffles use `STREAM_SHUFFLE_BASE + epoch`.
pub const STREAM_MODEL: u64 = 0;
pub const STREAM_PREDICTOR: u64 = 1;
pub const STREAM_RANDOM_MEMORY: u64 = 2;
pub const STREAM_SHUFFLE_BASE: u64 = 1000;

/// What to train: the plain network, the network with the memory module, or
/// the fixed randomly initialized module.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// No memory writes; the memory stays uninitialized, so reads are
    /// zero-response and the network trains exactly like one without the
    /// module.
    Baseline,
    /// Memory module with the given read mode, written every batch.
    Cmn(ReadModeSpec),
    /// Random frozen memory: reads happen, writes never do.
    RandomModule,
}

impl Variant {
    pub fn label(&self) -> String {
        match self {
            Variant::Baseline => "baseline".into(),
            Variant::Cmn(mode) => format!("cmn_{}", mode.label()),
            Variant::RandomModule => "random_module".into(),
        }
    }
}

/// One epoch's metrics. `lr` is the backbone rate in effect that epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    pub lr: f64,
    pub schema_version: u32,
}

/// Final summary of a run, echoing the fully resolved config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub schema_version: u32,
    pub variant: String,
    pub seed: u64,
    pub config_digest: String,
    /// Digest of the shuffled sample order across all epochs; equal digests
    /// mean two runs consumed identical batch sequences.
    pub batch_order_digest: String,
    pub final_test_accuracy: f64,
    pub wall_clock_secs: f64,
    /// Averaged cumulative attention curve on the test split after the
    /// final epoch; absent when no slot is eligible (e.g. the baseline).
    pub attention_cumsum: Option<Vec<f64>>,
    pub config: TrainConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunMetrics {
    pub per_epoch: Vec<EpochRecord>,
    pub summary: RunSummary,
}

pub struct TrainOutcome {
    pub model: MlpModel,
    pub memory: CategoricalMemory,
    pub metrics: RunMetrics,
}

/// Hex SHA-256 of a value's canonical JSON; stamped into outputs so runs can
/// be matched to their resolved configuration.
pub fn config_digest<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_string(value).expect("config serializes");
    let mut hasher = Sha256::new();
    hasher.update(json.as_bytes());
    to_hex(&hasher.finalize())
}

fn to_hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, &v) in xs.iter().enumerate() {
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    best
}

/// Clamps a top-k mode to the current number of eligible slots. During
/// memory warm-up fewer slots are eligible than the configured k; reading
/// over the eligible subset keeps training total, and the clamp disappears
/// once every class has been written.
fn effective_mode(spec: ReadModeSpec, memory: &CategoricalMemory) -> ReadModeSpec {
    match spec {
        ReadModeSpec::TopK { k } => {
            let eligible = memory.eligible_count();
            if eligible == 0 {
                spec
            } else {
                ReadModeSpec::TopK { k: k.min(eligible) }
            }
        }
        other => other,
    }
}

fn check_dataset_pair(train: &Dataset, test: &Dataset, config: &TrainConfig) -> Result<()> {
    if train.is_empty() {
        return Err(Error::InvalidArgument("training split is empty".into()));
    }
    if train.dim() != test.dim() || train.num_classes != test.num_classes {
        return Err(Error::InvalidArgument(format!(
            "train ({} classes, dim {}) and test ({} classes, dim {}) disagree",
            train.num_classes,
            train.dim(),
            test.num_classes,
            test.dim()
        )));
    }
    config.validate()
}

/// Fraction of samples whose argmax logit matches the label (ties broken by
/// lower class index). The memory is read-only here; evaluation never
/// mutates it.
pub fn evaluate(
    model: &MlpModel,
    memory: &CategoricalMemory,
    dataset: &Dataset,
    mode: ReadModeSpec,
    metric: Similarity,
) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot evaluate on an empty dataset".into(),
        ));
    }
    let mode = effective_mode(mode, memory);
    let mut correct = 0usize;
    for row in 0..dataset.len() {
        let out = forward(model, memory, dataset.features.row(row), mode, metric)?;
        if argmax(&out.logits) == dataset.labels[row] {
            correct += 1;
        }
    }
    Ok(correct as f64 / dataset.len() as f64)
}

/// The inner loop shared by every variant: seeded shuffling, per-batch
/// backward with summed gradients, one optimizer step per batch, and (when
/// enabled) one batch write into the memory. Returns per-epoch records and
/// the batch-order digest.
pub fn train_loop(
    model: &mut MlpModel,
    memory: &mut CategoricalMemory,
    writes_enabled: bool,
    train: &Dataset,
    test: &Dataset,
    config: &TrainConfig,
) -> Result<(Vec<EpochRecord>, String)> {
    let mut state = OptimizerState::new(model);
    let mut records = Vec::with_capacity(config.epochs);
    let mut order_digest = Sha256::new();
    let n = train.len();

    for epoch in 0..config.epochs {
        let (lr_backbone, lr_new) = lr_at(epoch, config);
        let mut order: Vec<usize> = (0..n).collect();
        Rng::substream(config.seed, STREAM_SHUFFLE_BASE + epoch as u64).shuffle(&mut order);
        for &i in &order {
            order_digest.update((i as u64).to_le_bytes());
        }

        let mut epoch_loss = 0.0;
        let mut correct = 0usize;
        for (batch_idx, batch) in order.chunks(config.batch_size).enumerate() {
            let mut batch_config = config.clone();
            batch_config.read_mode = effective_mode(config.read_mode, memory);

            let mut grads = Gradients::zeros_like(model);
            let mut features = Matrix::zeros(batch.len(), model.feature_dim());
            let mut labels = Vec::with_capacity(batch.len());
            for (slot, &row) in batch.iter().enumerate() {
                let out = backward(
                    model,
                    memory,
                    train.features.row(row),
                    train.labels[row],
                    &batch_config,
                )?;
                if !out.loss.is_finite() {
                    return Err(Error::NonFinite {
                        what: "training loss",
                        epoch,
                        batch: batch_idx,
                    });
                }
                epoch_loss += out.loss;
                if argmax(&out.logits) == train.labels[row] {
                    correct += 1;
                }
                features.row_mut(slot).copy_from_slice(&out.feature);
                labels.push(train.labels[row]);
                grads.accumulate(&out.grads);
            }

            if config.write_after_step {
                apply_sgd(
                    model,
                    &grads,
                    &mut state,
                    lr_backbone,
                    lr_new,
                    config.momentum,
                    config.weight_decay,
                )?;
                if writes_enabled {
                    memory.batch_write(&features, &labels)?;
                }
            } else {
                if writes_enabled {
                    memory.batch_write(&features, &labels)?;
                }
                apply_sgd(
                    model,
                    &grads,
                    &mut state,
                    lr_backbone,
                    lr_new,
                    config.momentum,
                    config.weight_decay,
                )?;
            }
        }

        let test_acc = evaluate(model, memory, test, config.read_mode, config.similarity)?;
        records.push(EpochRecord {
            epoch,
            train_loss: epoch_loss / n as f64,
            train_acc: correct as f64 / n as f64,
            test_acc,
            lr: lr_backbone,
            schema_version: SCHEMA_VERSION,
        });
    }
    Ok((records, to_hex(&order_digest.finalize())))
}

/// Trains one variant from scratch and returns the model, memory, and
/// metrics. The variant's read mode (for `Cmn`) overrides the config's, and
/// the summary echoes the effective config.
pub fn train_run(
    train: &Dataset,
    test: &Dataset,
    config: &TrainConfig,
    variant: Variant,
) -> Result<TrainOutcome> {
    check_dataset_pair(train, test, config)?;
    let started = Instant::now();

    let mut effective = config.clone();
    if let Variant::Cmn(mode) = variant {
        effective.read_mode = mode;
    }

    let mut model = MlpModel::new(
        train.dim(),
        &effective.hidden_dims,
        train.num_classes,
        &mut Rng::substream(effective.seed, STREAM_MODEL),
    )?;
    if effective.read_mode == ReadModeSpec::Predicted {
        model.enable_predictor(&mut Rng::substream(effective.seed, STREAM_PREDICTOR));
    }
    let feature_dim = model.feature_dim();

    let mut memory = match variant {
        Variant::RandomModule => {
            let scale = effective
                .random_memory_scale
                .unwrap_or(1.0 / (feature_dim as f64).sqrt());
            CategoricalMemory::new_random_with(
                train.num_classes,
                feature_dim,
                scale,
                effective.beta,
                effective.tau,
                &mut Rng::substream(effective.seed, STREAM_RANDOM_MEMORY),
            )?
        }
        _ => CategoricalMemory::new(train.num_classes, feature_dim, effective.beta, effective.tau)?,
    };
    let writes_enabled = matches!(variant, Variant::Cmn(_));

    let (per_epoch, batch_order_digest) = train_loop(
        &mut model,
        &mut memory,
        writes_enabled,
        train,
        test,
        &effective,
    )?;

    let final_test_accuracy = match per_epoch.last() {
        Some(last) => last.test_acc,
        None => evaluate(&model, &memory, test, effective.read_mode, effective.similarity)?,
    };
    let attention_cumsum_curve = if memory.eligible_count() > 0 {
        Some(attention_cumsum(
            &model,
            &memory,
            test,
            effective.read_mode,
            effective.similarity,
        )?)
    } else {
        None
    };

    let summary = RunSummary {
        schema_version: SCHEMA_VERSION,
        variant: variant.label(),
        seed: effective.seed,
        config_digest: config_digest(&effective),
        batch_order_digest,
        final_test_accuracy,
        wall_clock_secs: started.elapsed().as_secs_f64(),
        attention_cumsum: attention_cumsum_curve,
        config: effective,
    };
    Ok(TrainOutcome {
        model,
        memory,
        metrics: RunMetrics {
            per_epoch,
            summary,
        },
    })
}

/// Per-sample: sort the read weights descending and cumulative-sum; the
/// returned curve is the average over all samples. Entry `k - 1` is the
/// mass carried by the top k prototypes; the last entry is 1 up to
/// accumulated rounding.
pub fn attention_cumsum(
    model: &MlpModel,
    memory: &CategoricalMemory,
    dataset: &Dataset,
    mode: ReadModeSpec,
    metric: Similarity,
) -> Result<Vec<f64>> {
    if memory.eligible_count() == 0 {
        return Err(Error::InvalidArgument(
            "attention statistics need at least one eligible slot".into(),
        ));
    }
    if dataset.is_empty() {
        return Err(Error::InvalidArgument(
            "attention statistics need a nonempty dataset".into(),
        ));
    }
    let mode = effective_mode(mode, memory);
    let c = memory.num_classes();
    let mut curve = vec![0.0; c];
    for row in 0..dataset.len() {
        let out = forward(model, memory, dataset.features.row(row), mode, metric)?;
        let mut weights = out.read.weights;
        weights.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let mut acc = 0.0;
        for (slot, w) in weights.iter().enumerate() {
            acc += w;
            curve[slot] += acc;
        }
    }
    for v in curve.iter_mut() {
        *v /= dataset.len() as f64;
    }
    Ok(curve)
}

// ---------------------------------------------------------------------------
// Ablation suite
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedAccuracy {
    pub seed: u64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantStats {
    pub variant: String,
    pub per_seed: Vec<SeedAccuracy>,
    pub mean: f64,
    /// Sample standard deviation across seeds.
    pub std: f64,
    pub mean_diff_vs_baseline: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub schema_version: u32,
    pub config_digest: String,
    pub seeds: Vec<u64>,
    pub variants: Vec<VariantStats>,
}

impl AblationReport {
    pub fn variant(&self, label: &str) -> Option<&VariantStats> {
        self.variants.iter().find(|v| v.variant == label)
    }
}

fn mean_and_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, std)
}

/// Runs the full variant grid — baseline, attention, equal, predicted,
/// random module, and `cmn(topk k)` for each k in `k_grid` — across every
/// seed on identical data, in parallel. `threads` caps the worker count;
/// `None` uses rayon's default.
pub fn ablate(
    train: &Dataset,
    test: &Dataset,
    base_config: &TrainConfig,
    seeds: &[u64],
    k_grid: &[usize],
    threads: Option<usize>,
) -> Result<AblationReport> {
    if seeds.len() < 2 {
        return Err(Error::InvalidArgument(
            "ablation needs at least 2 seeds".into(),
        ));
    }
    check_dataset_pair(train, test, base_config)?;

    let mut variants = vec![
        Variant::Baseline,
        Variant::Cmn(ReadModeSpec::Attention),
        Variant::Cmn(ReadModeSpec::Equal),
        Variant::Cmn(ReadModeSpec::Predicted),
        Variant::RandomModule,
    ];
    for &k in k_grid {
        variants.push(Variant::Cmn(ReadModeSpec::TopK { k }));
    }

    let jobs: Vec<(Variant, u64)> = variants
        .iter()
        .flat_map(|&v| seeds.iter().map(move |&s| (v, s)))
        .collect();
    let run_one = |&(variant, seed): &(Variant, u64)| -> Result<(String, u64, f64, String)> {
        let mut config = base_config.clone();
        config.seed = seed;
        let outcome = train_run(train, test, &config, variant)?;
        Ok((
            variant.label(),
            seed,
            outcome.metrics.summary.final_test_accuracy,
            outcome.metrics.summary.batch_order_digest,
        ))
    };
    let results: Vec<(String, u64, f64, String)> = match threads {
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t.max(1))
            .build()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?
            .install(|| jobs.par_iter().map(run_one).collect::<Result<Vec<_>>>())?,
        None => jobs.par_iter().map(run_one).collect::<Result<Vec<_>>>()?,
    };

    // Controlled comparison: per seed, every variant must have consumed the
    // same shuffled batch sequence.
    for &seed in seeds {
        let digests: Vec<&String> = results
            .iter()
            .filter(|(_, s, _, _)| *s == seed)
            .map(|(_, _, _, d)| d)
            .collect();
        if digests.windows(2).any(|w| w[0] != w[1]) {
            return Err(Error::InvalidArgument(format!(
                "variants consumed different batch sequences for seed {seed}"
            )));
        }
    }

    let baseline_accs: Vec<f64> = results
        .iter()
        .filter(|(label, _, _, _)| label == "baseline")
        .map(|(_, _, acc, _)| *acc)
        .collect();
    let baseline_mean = baseline_accs.iter().sum::<f64>() / baseline_accs.len() as f64;

    let variant_stats = variants
        .iter()
        .map(|v| {
            let label = v.label();
            let per_seed: Vec<SeedAccuracy> = results
                .iter()
                .filter(|(l, _, _, _)| *l == label)
                .map(|(_, seed, acc, _)| SeedAccuracy {
                    seed: *seed,
                    accuracy: *acc,
                })
                .collect();
            let accs: Vec<f64> = per_seed.iter().map(|s| s.accuracy).collect();
            let (mean, std) = mean_and_std(&accs);
            VariantStats {
                variant: label,
                per_seed,
                mean,
                std,
                mean_diff_vs_baseline: mean - baseline_mean,
            }
        })
        .collect();

    Ok(AblationReport {
        schema_version: SCHEMA_VERSION,
        config_digest: config_digest(base_config),
        seeds: seeds.to_vec(),
        variants: variant_stats,
    })
}

// ---------------------------------------------------------------------------
// Metrics persistence
// ---------------------------------------------------------------------------

/// Writes `metrics.jsonl` (one epoch record per line) and `summary.json`
/// into `dir`.
pub fn write_run_metrics(metrics: &RunMetrics, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut jsonl = String::new();
    for record in &metrics.per_epoch {
        jsonl.push_str(&serde_json::to_string(record).expect("epoch record serializes"));
        jsonl.push('\n');
    }
    let jsonl_path = dir.join("metrics.jsonl");
    fs::write(&jsonl_path, jsonl).map_err(|e| Error::io(jsonl_path.clone(), e))?;
    let summary_path = dir.join("summary.json");
    let summary =
        serde_json::to_string_pretty(&metrics.summary).expect("summary serializes");
    fs::write(&summary_path, summary).map_err(|e| Error::io(summary_path.clone(), e))
}

/// Reads back what [`write_run_metrics`] wrote, validating the schema
/// version of every record.
pub fn read_run_metrics(dir: &Path) -> Result<RunMetrics> {
    let jsonl_path = dir.join("metrics.jsonl");
    let text = fs::read_to_string(&jsonl_path).map_err(|e| Error::io(jsonl_path.clone(), e))?;
    let mut per_epoch = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let record: EpochRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            location: format!("{} line {}", jsonl_path.display(), idx + 1),
            message: e.to_string(),
        })?;
        if record.schema_version != SCHEMA_VERSION {
            return Err(Error::Parse {
                location: format!("{} line {}", jsonl_path.display(), idx + 1),
                message: format!("unsupported schema_version {}", record.schema_version),
            });
        }
        per_epoch.push(record);
    }
    let summary_path = dir.join("summary.json");
    let text = fs::read_to_string(&summary_path).map_err(|e| Error::io(summary_path.clone(), e))?;
    let summary: RunSummary = serde_json::from_str(&text).map_err(|e| Error::Parse {
        location: format!("{}", summary_path.display()),
        message: e.to_string(),
    })?;
    if summary.schema_version != SCHEMA_VERSION {
        return Err(Error::Parse {
            location: format!("{}", summary_path.display()),
            message: format!("unsupported schema_version {}", summary.schema_version),
        });
    }
    Ok(RunMetrics { per_epoch, summary })
}

pub fn write_ablation_report(report: &AblationReport, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(report).expect("report serializes");
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_ablation_report(path: &Path) -> Result<AblationReport> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let report: AblationReport = serde_json::from_str(&text).map_err(|e| Error::Parse {
        location: format!("{}", path.display()),
        message: e.to_string(),
    })?;
    if report.schema_version != SCHEMA_VERSION {
        return Err(Error::Parse {
            location: format!("{}", path.display()),
            message: format!("unsupported schema_version {}", report.schema_version),
        });
    }
    Ok(report)
}
