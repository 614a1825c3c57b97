//! Training engine: the five run modes (self-distillation pretraining,
//! hybrid pretraining with a supervised term, fine-tuning, linear probing,
//! supervised baseline) behind one recipe type and one `run` entry point.
//!
//! Determinism contract: given the same recipe, seed, and dataset, a run
//! produces bit-identical parameters, losses, and log records (wall time
//! excepted), and a run resumed from a checkpoint written after epoch `e`
//! continues exactly as the uninterrupted run would have. All stochasticity
//! is derived from (seed, purpose, absolute indices), so nothing about RNG
//! state needs to be saved.

pub mod log;
pub mod optim;

pub use log::{EpochRecord, RunHeader, RunLog, RUN_LOG_VERSION};
pub use optim::AdamW;

use crate::augment::{self, FinetuneAugment, Image, PretrainAugment};
use crate::data::{save_score_table, MultiLabelDataset};
use crate::error::{CoreError, Result};
use crate::metrics::{evaluate_scores, rankme, MetricReport, RANKME_EPS};
use crate::model::{
    backbone_forward, classify, init_params, patch_tokens_tensor, project, Checkpoint,
    ModelConfig, NetKind, ParamSet, VitLayout,
};
use crate::objectives::{dino_loss, hybrid_loss, pos_weights, weighted_bce, CiwTable, DinoState};
use crate::rng::{derive_rng, view_rng};
use crate::schedules::{ema_update, CosineTau, MultiStep, WarmupCosine};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Pretrain,
    Hybrid,
    Finetune,
    Probe,
    Supervised,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Pretrain => "pretrain",
            Mode::Hybrid => "hybrid",
            Mode::Finetune => "finetune",
            Mode::Probe => "probe",
            Mode::Supervised => "supervised",
        }
    }

    /// Modes that train by teacher-student distillation (two views, EMA).
    pub fn self_distilled(self) -> bool {
        matches!(self, Mode::Pretrain | Mode::Hybrid)
    }

    /// Modes whose loss reads the label matrix.
    pub fn uses_labels(self) -> bool {
        !matches!(self, Mode::Pretrain)
    }

    /// Modes that start from a pretrained backbone checkpoint.
    pub fn needs_init_checkpoint(self) -> bool {
        matches!(self, Mode::Finetune | Mode::Probe)
    }

    pub fn net_kind(self) -> NetKind {
        match self {
            Mode::Pretrain => NetKind::pretrain(),
            Mode::Hybrid => NetKind::hybrid(),
            _ => NetKind::classifier(),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Mode {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Mode> {
        match s {
            "pretrain" => Ok(Mode::Pretrain),
            "hybrid" => Ok(Mode::Hybrid),
            "finetune" => Ok(Mode::Finetune),
            "probe" => Ok(Mode::Probe),
            "supervised" => Ok(Mode::Supervised),
            other => Err(CoreError::invalid("mode", format!("unknown mode {other:?}"))),
        }
    }
}

/// Everything a training run depends on besides the dataset itself.
/// Learning rates are expressed per 256 samples of batch and scaled by
/// `batch_size / 256` at run time.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainRecipe {
    pub mode: Mode,
    pub model: ModelConfig,
    pub seed: u64,
    pub epochs: usize,
    /// Linear lr warmup span for the self-distilled modes (epochs).
    pub warmup_epochs: usize,
    pub batch_size: usize,
    /// Warmup-cosine schedule endpoints for self-distilled modes.
    pub warmup_start_lr: f64,
    pub base_lr_per_256: f64,
    pub min_lr: f64,
    /// Multistep schedule for the supervised-family modes.
    pub finetune_lr_per_256: f64,
    pub milestones: Vec<usize>,
    pub gamma: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub student_temp: f64,
    pub teacher_temp: f64,
    /// Prototype-logit center momentum; 1.0 disables centering entirely
    /// (the center stays at its zero initialization).
    pub center_momentum: f64,
    pub tau_base: f64,
    pub tau_final: f64,
    /// Weight of the supervised BCE term in hybrid mode.
    pub lambda: f64,
    /// Decision threshold for validation metrics.
    pub threshold: f64,
    /// Fraction of the dataset held out for validation by seeded split.
    pub validation_fraction: f64,
    /// Fraction of the labelled training pool actually used by the modes
    /// that read labels. Pretraining always sees the full pool.
    pub data_fraction: f64,
    pub pretrain_augment: PretrainAugment,
    pub finetune_augment: FinetuneAugment,
    /// Augmentation worker threads (1 = in-line).
    pub workers: usize,
    /// Epoch cadence for rewriting `ckpt-latest.bin` when an output
    /// directory is given. The final checkpoint is always written.
    pub checkpoint_every: usize,
    /// Halt once this many epochs have completed; the returned checkpoint
    /// can seed a resumed run. Used to exercise the resume contract.
    pub stop_after_epoch: Option<usize>,
    /// Cap on the number of held-out embeddings used for the per-epoch
    /// effective-rank readout in self-distilled modes.
    pub rankme_samples: usize,
}

impl TrainRecipe {
    /// Mode-appropriate defaults: 35 epochs with 10 warmup for the
    /// self-distilled modes, 45 epochs with milestones at 15 and 35 for the
    /// supervised family, batch 64, and the standard temperature, EMA, and
    /// optimizer constants.
    pub fn new(mode: Mode, model: ModelConfig, seed: u64) -> TrainRecipe {
        let image_size = model.image_size;
        let self_distilled = mode.self_distilled();
        TrainRecipe {
            mode,
            model,
            seed,
            epochs: if self_distilled { 35 } else { 45 },
            warmup_epochs: if self_distilled { 10 } else { 0 },
            batch_size: 64,
            warmup_start_lr: 3e-5,
            base_lr_per_256: 5e-5,
            min_lr: 1e-6,
            finetune_lr_per_256: 5e-4,
            milestones: vec![15, 35],
            gamma: 0.1,
            weight_decay: 0.04,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            student_temp: 0.1,
            teacher_temp: 0.04,
            center_momentum: 0.9,
            tau_base: 0.996,
            tau_final: 0.999,
            lambda: if mode == Mode::Hybrid { 1.0 } else { 0.0 },
            threshold: 0.5,
            validation_fraction: 0.1,
            data_fraction: 1.0,
            pretrain_augment: PretrainAugment::defaults(image_size),
            finetune_augment: FinetuneAugment::defaults(image_size),
            workers: 1,
            checkpoint_every: 5,
            stop_after_epoch: None,
            rankme_samples: 256,
        }
    }

    /// Learning rate after scaling by batch size.
    pub fn absolute_base_lr(&self) -> f64 {
        self.base_lr_per_256 * self.batch_size as f64 / 256.0
    }

    pub fn absolute_finetune_lr(&self) -> f64 {
        self.finetune_lr_per_256 * self.batch_size as f64 / 256.0
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.epochs == 0 {
            return Err(CoreError::invalid("recipe", "epochs must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(CoreError::invalid("recipe", "batch size must be >= 1"));
        }
        if self.mode.self_distilled() {
            if self.batch_size < 2 {
                return Err(CoreError::invalid(
                    "recipe",
                    "self-distilled modes need batch size >= 2 (the center is a batch statistic)",
                ));
            }
            if self.warmup_epochs >= self.epochs {
                return Err(CoreError::invalid(
                    "recipe",
                    format!("warmup epochs {} must be < epochs {}", self.warmup_epochs, self.epochs),
                ));
            }
        }
        for (name, v) in [
            ("warmup_start_lr", self.warmup_start_lr),
            ("base_lr_per_256", self.base_lr_per_256),
            ("min_lr", self.min_lr),
            ("finetune_lr_per_256", self.finetune_lr_per_256),
            ("lambda", self.lambda),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(CoreError::invalid("recipe", format!("{name} must be finite and >= 0")));
            }
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(CoreError::invalid("recipe", "threshold must lie in (0, 1)"));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(CoreError::invalid("recipe", "validation fraction must lie in (0, 1)"));
        }
        if !(self.data_fraction > 0.0 && self.data_fraction <= 1.0) {
            return Err(CoreError::invalid("recipe", "data fraction must lie in (0, 1]"));
        }
        if self.workers == 0 {
            return Err(CoreError::invalid("recipe", "workers must be >= 1"));
        }
        if self.checkpoint_every == 0 {
            return Err(CoreError::invalid("recipe", "checkpoint cadence must be >= 1"));
        }
        if self.rankme_samples < 2 {
            return Err(CoreError::invalid("recipe", "rankme samples must be >= 2"));
        }
        if let Some(stop) = self.stop_after_epoch {
            if stop == 0 || stop > self.epochs {
                return Err(CoreError::invalid(
                    "recipe",
                    format!("stop_after_epoch {stop} must lie in 1..={}", self.epochs),
                ));
            }
        }
        if self.pretrain_augment.out_size != self.model.image_size
            || self.finetune_augment.out_size != self.model.image_size
        {
            return Err(CoreError::invalid(
                "recipe",
                "augmentation out_size must equal the model image size",
            ));
        }
        self.pretrain_augment.validate()?;
        self.finetune_augment.validate()?;
        // Constructor-validated pieces, checked here so a hand-built recipe
        // fails fast rather than mid-run.
        MultiStep::new(self.absolute_finetune_lr(), self.milestones.clone(), self.gamma)?;
        DinoState::<f32>::new(
            self.model.prototypes.max(1),
            self.student_temp as f32,
            self.teacher_temp as f32,
            self.center_momentum as f32,
        )?;
        CosineTau::new(self.tau_base, self.tau_final, self.epochs.max(1))?;
        Ok(())
    }
}

/// Seeded validation split. The shuffle depends only on (seed, n), so every
/// mode run with the same seed on the same dataset sees the same held-out
/// set; both halves keep the original row order.
pub fn split_dataset(
    full: &MultiLabelDataset,
    validation_fraction: f64,
    seed: u64,
) -> Result<(MultiLabelDataset, MultiLabelDataset)> {
    if !(validation_fraction > 0.0 && validation_fraction < 1.0) {
        return Err(CoreError::invalid("split", "validation fraction must lie in (0, 1)"));
    }
    let n = full.len();
    if n < 2 {
        return Err(CoreError::invalid("split", "need at least 2 samples to split"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut derive_rng(seed, "val-split", &[n as u64]));
    let val_count = ((validation_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let mut in_val = vec![false; n];
    for &i in &order[..val_count] {
        in_val[i] = true;
    }
    let pick = |want_val: bool| {
        let entries = full
            .entries()
            .iter()
            .enumerate()
            .filter(|(i, _)| in_val[*i] == want_val)
            .map(|(_, e)| e.clone())
            .collect();
        MultiLabelDataset::from_parts(
            full.root().to_path_buf(),
            full.class_codes().to_vec(),
            entries,
        )
    };
    Ok((pick(false)?, pick(true)?))
}

/// One epoch's batch order: a seeded shuffle chunked into batches. Every
/// sample appears exactly once per epoch; the final batch may be short.
fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut derive_rng(seed, "epoch-shuffle", &[epoch as u64]));
    order.chunks(batch_size).map(|c| c.to_vec()).collect()
}

/// Map a fallible per-sample function over indices, optionally on worker
/// threads. Results always come back in input order, so worker count never
/// affects values.
fn parallel_map<T, F>(indices: &[usize], workers: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync,
{
    if workers <= 1 || indices.len() <= 1 {
        return indices.iter().map(|&i| f(i)).collect();
    }
    let chunk = indices.len().div_ceil(workers);
    let parts: Vec<Result<Vec<T>>> = std::thread::scope(|s| {
        let f = &f;
        let handles: Vec<_> = indices
            .chunks(chunk)
            .map(|ch| s.spawn(move || ch.iter().map(|&i| f(i)).collect()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("augmentation worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(indices.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Two augmented global views per sample, stacked into two patch-token
/// batches of shape `(B*tokens, patch_dim)`.
fn pretrain_batch(
    ds: &MultiLabelDataset,
    model: &ModelConfig,
    aug: &PretrainAugment,
    seed: u64,
    epoch: usize,
    indices: &[usize],
    workers: usize,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let pairs = parallel_map(indices, workers, |i| {
        let img = ds.load_image(i)?;
        augment::make_global_views(&img, aug, seed, i as u64, epoch as u64)
    })?;
    let (va, vb): (Vec<Image>, Vec<Image>) = pairs.into_iter().unzip();
    Ok((patch_tokens_tensor(&va, model)?, patch_tokens_tensor(&vb, model)?))
}

/// One augmented view per sample for the supervised family.
fn labelled_batch(
    ds: &MultiLabelDataset,
    model: &ModelConfig,
    aug: &FinetuneAugment,
    seed: u64,
    epoch: usize,
    indices: &[usize],
    workers: usize,
) -> Result<Tensor<f32>> {
    let imgs = parallel_map(indices, workers, |i| {
        let img = ds.load_image(i)?;
        let mut rng = view_rng(seed, i as u64, epoch as u64, 0);
        augment::finetune_augment(&img, aug, &mut rng)
    })?;
    patch_tokens_tensor(&imgs, model)
}

/// Label rows for a batch as a constant `(B, C)` tensor of 0/1 targets.
fn batch_targets(ds: &MultiLabelDataset, indices: &[usize]) -> Result<Tensor<f32>> {
    let c = ds.num_classes();
    let mut data = Vec::with_capacity(indices.len() * c);
    for &i in indices {
        data.extend(ds.labels_row(i).iter().map(|&l| l as f32));
    }
    Tensor::constant(data, indices.len(), c)
}

/// Deterministic resize + normalize inputs for evaluation passes.
fn eval_batch(
    ds: &MultiLabelDataset,
    model: &ModelConfig,
    mean: [f32; 3],
    std: [f32; 3],
    indices: &[usize],
    workers: usize,
) -> Result<Tensor<f32>> {
    let imgs = parallel_map(indices, workers, |i| {
        let img = ds.load_image(i)?;
        augment::eval_transform(&img, model.image_size, mean, std)
    })?;
    patch_tokens_tensor(&imgs, model)
}

/// Class weights aligned to the dataset's class order; absent table means
/// uniform weight 1 per class.
fn aligned_ciw(ds: &MultiLabelDataset, table: Option<&CiwTable>) -> Result<CiwTable> {
    match table {
        None => CiwTable::new(ds.class_codes().to_vec(), vec![1.0; ds.num_classes()]),
        Some(t) => {
            let weights = ds
                .class_codes()
                .iter()
                .map(|code| {
                    t.codes()
                        .iter()
                        .position(|x| x == code)
                        .map(|i| t.weights()[i])
                        .ok_or_else(|| {
                            CoreError::invalid(
                                "class weights",
                                format!("no weight supplied for class {code}"),
                            )
                        })
                })
                .collect::<Result<Vec<f64>>>()?;
            CiwTable::new(ds.class_codes().to_vec(), weights)
        }
    }
}

/// Copy backbone parameters out of a checkpoint, preferring the EMA teacher
/// arrays when present. Heads (projector, classifier) are left untouched.
/// Returns the prefix that was used.
pub fn load_backbone(params: &mut ParamSet, ckpt: &Checkpoint) -> Result<&'static str> {
    let prefix =
        if ckpt.arrays.iter().any(|a| a.name.starts_with("teacher.")) { "teacher." } else { "student." };
    for entry in params.entries_mut() {
        if !entry.name.starts_with("backbone.") {
            continue;
        }
        let name = format!("{prefix}{}", entry.name);
        let arr = ckpt
            .array(&name)
            .ok_or_else(|| CoreError::invalid("load backbone", format!("checkpoint lacks {name}")))?;
        if arr.rows != entry.rows || arr.cols != entry.cols {
            return Err(CoreError::shape(
                "load backbone",
                format!("{name}: {}x{} vs {}x{}", arr.rows, arr.cols, entry.rows, entry.cols),
            ));
        }
        entry.data.copy_from_slice(&arr.data);
    }
    Ok(prefix)
}

/// The backbone fields that must agree for a checkpoint to be loadable into
/// a recipe's model (head sizes may differ).
fn check_backbone_compat(recipe_model: &ModelConfig, ckpt_model: &ModelConfig) -> Result<()> {
    let same = recipe_model.image_size == ckpt_model.image_size
        && recipe_model.patch_size == ckpt_model.patch_size
        && recipe_model.embed_dim == ckpt_model.embed_dim
        && recipe_model.depth == ckpt_model.depth
        && recipe_model.heads == ckpt_model.heads
        && recipe_model.mlp_ratio == ckpt_model.mlp_ratio;
    if !same {
        return Err(CoreError::invalid(
            "load backbone",
            "checkpoint backbone architecture does not match the recipe model",
        ));
    }
    Ok(())
}

/// Initial parameters and trainable mask for the supervised family.
/// Finetune and probe copy the pretrained backbone; the classifier is always
/// freshly initialized from the recipe seed. Probe freezes everything except
/// the classifier.
fn supervised_init(
    recipe: &TrainRecipe,
    init_from: Option<&Checkpoint>,
) -> Result<(ParamSet, Vec<bool>)> {
    let mut params = init_params(&recipe.model, NetKind::classifier(), recipe.seed)?;
    match (recipe.mode.needs_init_checkpoint(), init_from) {
        (true, Some(ckpt)) => {
            check_backbone_compat(&recipe.model, &ckpt.config)?;
            load_backbone(&mut params, ckpt)?;
        }
        (true, None) => {
            return Err(CoreError::invalid(
                "run",
                format!("{} mode requires a pretrained checkpoint", recipe.mode),
            ));
        }
        (false, Some(_)) => {
            return Err(CoreError::invalid(
                "run",
                "supervised mode trains from scratch and takes no initial checkpoint",
            ));
        }
        (false, None) => {}
    }
    let mask = match recipe.mode {
        Mode::Probe => {
            params.entries().iter().map(|e| e.name.starts_with("classifier.")).collect()
        }
        _ => vec![true; params.entries().len()],
    };
    Ok((params, mask))
}

/// Per-run datasets and label plumbing shared by all modes.
struct RunData {
    train: MultiLabelDataset,
    val: MultiLabelDataset,
    ciw: CiwTable,
    pos_w: Vec<f32>,
}

fn prepare_data(recipe: &TrainRecipe, inputs: &RunInputs) -> Result<RunData> {
    let (train_pool, val) = match inputs.val {
        Some(v) => (inputs.dataset.clone(), v.clone()),
        None => split_dataset(inputs.dataset, recipe.validation_fraction, recipe.seed)?,
    };
    if recipe.mode.uses_labels() && recipe.model.num_classes != train_pool.num_classes() {
        return Err(CoreError::invalid(
            "run",
            format!(
                "model has {} classes but the dataset has {}",
                recipe.model.num_classes,
                train_pool.num_classes()
            ),
        ));
    }
    let train = if recipe.mode == Mode::Pretrain {
        train_pool
    } else {
        train_pool.subsample(recipe.data_fraction, recipe.seed)?
    };
    if train.is_empty() {
        return Err(CoreError::invalid("run", "empty training split"));
    }
    if val.is_empty() {
        return Err(CoreError::invalid("run", "empty validation split"));
    }
    let ciw = aligned_ciw(&train, inputs.ciw)?;
    let pos_w: Vec<f32> = pos_weights(&ciw).into_iter().map(|w| w as f32).collect();
    Ok(RunData { train, val, ciw, pos_w })
}

pub struct RunInputs<'a> {
    pub dataset: &'a MultiLabelDataset,
    /// Explicit validation set; when absent a seeded split carves one out.
    pub val: Option<&'a MultiLabelDataset>,
    pub ciw: Option<&'a CiwTable>,
    /// Pretrained checkpoint whose backbone seeds finetune/probe runs.
    pub init_from: Option<&'a Checkpoint>,
    /// Mid-run checkpoint of this same recipe to continue from.
    pub resume_from: Option<&'a Checkpoint>,
    /// When set, the run maintains `runlog.jsonl`, `ckpt-latest.bin`, and
    /// `ckpt-final.bin` in this directory.
    pub out_dir: Option<&'a Path>,
}

impl<'a> RunInputs<'a> {
    pub fn new(dataset: &'a MultiLabelDataset) -> RunInputs<'a> {
        RunInputs { dataset, val: None, ciw: None, init_from: None, resume_from: None, out_dir: None }
    }
}

pub struct RunOutput {
    pub log: RunLog,
    /// Full state at the point the run stopped (normally the final epoch).
    pub checkpoint: Checkpoint,
    /// Validation report from the last completed epoch (supervised family).
    pub final_metrics: Option<MetricReport>,
    /// Loss of every optimizer step, in order, across the whole run.
    pub step_losses: Vec<f64>,
}

pub fn run(recipe: &TrainRecipe, inputs: RunInputs) -> Result<RunOutput> {
    recipe.validate()?;
    if inputs.resume_from.is_some() && inputs.init_from.is_some() {
        return Err(CoreError::invalid(
            "run",
            "resume_from already carries the full state; init_from must be absent",
        ));
    }
    let data = prepare_data(recipe, &inputs)?;
    if recipe.mode.self_distilled() {
        run_self_distilled(recipe, &data, &inputs)
    } else {
        run_supervised(recipe, &data, &inputs)
    }
}

fn check_resume_header(recipe: &TrainRecipe, ckpt: &Checkpoint, spe: usize) -> Result<usize> {
    if ckpt.mode != recipe.mode.as_str() {
        return Err(CoreError::invalid(
            "resume",
            format!("checkpoint mode {} does not match recipe mode {}", ckpt.mode, recipe.mode),
        ));
    }
    if ckpt.seed != recipe.seed {
        return Err(CoreError::invalid(
            "resume",
            format!("checkpoint seed {} does not match recipe seed {}", ckpt.seed, recipe.seed),
        ));
    }
    if ckpt.config != recipe.model {
        return Err(CoreError::invalid("resume", "checkpoint model config differs from recipe"));
    }
    let done = ckpt.epoch as usize;
    if done >= recipe.epochs {
        return Err(CoreError::invalid(
            "resume",
            format!("checkpoint already covers {done} of {} epochs", recipe.epochs),
        ));
    }
    if ckpt.step != (done * spe) as u64 {
        return Err(CoreError::invalid(
            "resume",
            format!(
                "checkpoint step {} is not {done} epochs of {spe} steps; was it written by a \
                 different data split?",
                ckpt.step
            ),
        ));
    }
    Ok(done)
}

fn check_finite(loss: f64, mode: Mode, epoch: usize, step: u64) -> Result<()> {
    if !loss.is_finite() {
        return Err(CoreError::invalid(
            "training",
            format!("non-finite loss {loss} in {mode} at epoch {epoch}, step {step}"),
        ));
    }
    Ok(())
}

fn write_artifacts(
    out_dir: Option<&Path>,
    log: &RunLog,
    ckpt: &Checkpoint,
    is_cadence: bool,
    is_last: bool,
) -> Result<()> {
    let Some(dir) = out_dir else { return Ok(()) };
    log.save(&dir.join("runlog.jsonl"))?;
    if is_cadence || is_last {
        ckpt.save(&dir.join("ckpt-latest.bin"))?;
    }
    if is_last {
        ckpt.save(&dir.join("ckpt-final.bin"))?;
    }
    Ok(())
}

fn run_self_distilled(recipe: &TrainRecipe, data: &RunData, inputs: &RunInputs) -> Result<RunOutput> {
    let cfg = &recipe.model;
    let kind = recipe.mode.net_kind();
    let n = data.train.len();
    let spe = n.div_ceil(recipe.batch_size);
    let total_steps = recipe.epochs * spe;
    let warmup_steps = recipe.warmup_epochs * spe;
    let lr_sched = WarmupCosine::new(
        recipe.warmup_start_lr,
        recipe.absolute_base_lr(),
        recipe.min_lr,
        warmup_steps,
        total_steps,
    )?;
    let tau_sched = CosineTau::new(recipe.tau_base, recipe.tau_final, total_steps)?;

    let template = init_params(cfg, kind, recipe.seed)?;
    let mut state = DinoState::<f32>::new(
        cfg.prototypes,
        recipe.student_temp as f32,
        recipe.teacher_temp as f32,
        recipe.center_momentum as f32,
    )?;
    let (mut student, mut teacher, mut opt, start_epoch);
    match inputs.resume_from {
        Some(ckpt) => {
            let done = check_resume_header(recipe, ckpt, spe)?;
            student = ckpt.extract_param_set("student.", &template)?;
            teacher = ckpt.extract_param_set("teacher.", &template)?;
            opt = AdamW::new(
                &student,
                vec![true; student.entries().len()],
                recipe.beta1,
                recipe.beta2,
                recipe.adam_eps,
                recipe.weight_decay,
            )?;
            opt.restore_state(ckpt, &student, ckpt.step)?;
            let center = ckpt.array("state.center").ok_or_else(|| {
                CoreError::invalid("resume", "checkpoint lacks the prototype center")
            })?;
            if center.data.len() != state.center.len() {
                return Err(CoreError::shape(
                    "resume",
                    format!("center has {} entries, model {}", center.data.len(), state.center.len()),
                ));
            }
            state.center.copy_from_slice(&center.data);
            start_epoch = done;
        }
        None => {
            student = template.clone();
            teacher = student.clone();
            opt = AdamW::new(
                &student,
                vec![true; student.entries().len()],
                recipe.beta1,
                recipe.beta2,
                recipe.adam_eps,
                recipe.weight_decay,
            )?;
            start_epoch = 0;
        }
    }
    let layout = VitLayout::from_params(&student, cfg)?;

    let mut log = RunLog::new(RunHeader {
        log_version: RUN_LOG_VERSION,
        mode: recipe.mode.as_str().into(),
        seed: recipe.seed,
        epochs: recipe.epochs,
        steps_per_epoch: spe,
        train_samples: n,
        val_samples: data.val.len(),
    });
    let mut step_losses = Vec::new();
    let lambda = recipe.lambda as f32;

    for epoch in start_epoch..recipe.epochs {
        let t0 = Instant::now();
        let mut epoch_losses = Vec::with_capacity(spe);
        for indices in epoch_batches(n, recipe.batch_size, recipe.seed, epoch) {
            let b = indices.len();
            let (va, vb) = pretrain_batch(
                &data.train,
                cfg,
                &recipe.pretrain_augment,
                recipe.seed,
                epoch,
                &indices,
                recipe.workers,
            )?;
            let student_t = student.leaf_tensors::<f32>();
            let teacher_t = teacher.const_tensors::<f32>();

            let s_emb_a = backbone_forward(cfg, &layout, &student_t, &va, b)?;
            let s_emb_b = backbone_forward(cfg, &layout, &student_t, &vb, b)?;
            let s_logits = [
                project(cfg, &layout, &student_t, &s_emb_a)?,
                project(cfg, &layout, &student_t, &s_emb_b)?,
            ];
            let t_logits = [
                project(cfg, &layout, &teacher_t, &backbone_forward(cfg, &layout, &teacher_t, &va, b)?)?,
                project(cfg, &layout, &teacher_t, &backbone_forward(cfg, &layout, &teacher_t, &vb, b)?)?,
            ];
            let distill = dino_loss(&s_logits, &t_logits, &state)?;
            let loss = if recipe.mode == Mode::Hybrid {
                let class_logits = classify(&layout, &student_t, &s_emb_a)?;
                let targets = batch_targets(&data.train, &indices)?;
                let bce = weighted_bce(&class_logits, &targets, &data.pos_w)?;
                hybrid_loss(&distill, &bce, lambda)?
            } else {
                distill
            };
            let loss_value = loss.item() as f64;
            check_finite(loss_value, recipe.mode, epoch, opt.steps())?;
            loss.backward()?;
            let grads: Vec<Option<Vec<f32>>> = student_t.iter().map(|t| t.take_grad()).collect();

            let k = opt.steps() as usize;
            let lr = lr_sched.lr_at(k);
            let tau = tau_sched.tau_at(k) as f32;
            opt.step(&mut student, &grads, lr)?;
            for (te, se) in teacher.entries_mut().iter_mut().zip(student.entries()) {
                debug_assert_eq!(te.name, se.name);
                ema_update(&mut te.data, &se.data, tau);
            }
            let mut teacher_rows = Vec::with_capacity(2 * b * cfg.prototypes);
            teacher_rows.extend_from_slice(t_logits[0].values());
            teacher_rows.extend_from_slice(t_logits[1].values());
            state.update_center(&teacher_rows, 2 * b)?;

            epoch_losses.push(loss_value);
            step_losses.push(loss_value);
        }

        let rank = {
            let limit = recipe.rankme_samples.min(data.val.len());
            let (emb, rows, dim) = embed_dataset(
                cfg,
                &student,
                &data.val,
                limit,
                recipe.batch_size,
                recipe.workers,
                recipe.pretrain_augment.mean,
                recipe.pretrain_augment.std,
            )?;
            rankme(&emb, rows, dim, RANKME_EPS)?
        };
        let last_step = opt.steps() - 1;
        log.push(EpochRecord {
            epoch,
            steps_done: opt.steps() as usize,
            mean_loss: epoch_losses.iter().sum::<f64>() / epoch_losses.len() as f64,
            lr: lr_sched.lr_at(last_step as usize),
            tau: Some(tau_sched.tau_at(last_step as usize)),
            rankme: Some(rank),
            val_f2_ciw: None,
            val_f1_normal: None,
            wall_time_s: t0.elapsed().as_secs_f64(),
        });

        let done = epoch + 1;
        let stop = recipe.stop_after_epoch == Some(done);
        let last = done == recipe.epochs || stop;
        let cadence = done % recipe.checkpoint_every == 0;
        if cadence || last {
            let ckpt = snapshot_self_distilled(recipe, done as u64, &opt, &student, &teacher, &state)?;
            write_artifacts(inputs.out_dir, &log, &ckpt, cadence, last)?;
            if last {
                return Ok(RunOutput { log, checkpoint: ckpt, final_metrics: None, step_losses });
            }
        } else if let Some(dir) = inputs.out_dir {
            log.save(&dir.join("runlog.jsonl"))?;
        }
    }
    unreachable!("the final epoch always returns");
}

fn snapshot_self_distilled(
    recipe: &TrainRecipe,
    epochs_done: u64,
    opt: &AdamW,
    student: &ParamSet,
    teacher: &ParamSet,
    state: &DinoState<f32>,
) -> Result<Checkpoint> {
    let mut ckpt = Checkpoint::new(
        recipe.mode.as_str(),
        epochs_done,
        opt.steps(),
        recipe.seed,
        recipe.model.clone(),
    );
    ckpt.push_param_set("student.", student)?;
    ckpt.push_param_set("teacher.", teacher)?;
    opt.push_state(&mut ckpt, student)?;
    ckpt.push_array("state.center", 1, state.center.len(), state.center.clone())?;
    Ok(ckpt)
}

fn run_supervised(recipe: &TrainRecipe, data: &RunData, inputs: &RunInputs) -> Result<RunOutput> {
    let cfg = &recipe.model;
    let n = data.train.len();
    let spe = n.div_ceil(recipe.batch_size);
    let sched = MultiStep::new(recipe.absolute_finetune_lr(), recipe.milestones.clone(), recipe.gamma)?;

    let (mut params, mask, start_epoch);
    match inputs.resume_from {
        Some(ckpt) => {
            let done = check_resume_header(recipe, ckpt, spe)?;
            let (template, m) = supervised_init(
                recipe,
                // The resumed state already contains the loaded backbone, so
                // the template only provides layout and the trainable mask.
                if recipe.mode.needs_init_checkpoint() { Some(ckpt) } else { None },
            )?;
            params = ckpt.extract_param_set("student.", &template)?;
            mask = m;
            start_epoch = done;
        }
        None => {
            let (p, m) = supervised_init(recipe, inputs.init_from)?;
            params = p;
            mask = m;
            start_epoch = 0;
        }
    }
    let mut opt = AdamW::new(
        &params,
        mask.clone(),
        recipe.beta1,
        recipe.beta2,
        recipe.adam_eps,
        recipe.weight_decay,
    )?;
    if let Some(ckpt) = inputs.resume_from {
        opt.restore_state(ckpt, &params, ckpt.step)?;
    }
    let layout = VitLayout::from_params(&params, cfg)?;

    let mut log = RunLog::new(RunHeader {
        log_version: RUN_LOG_VERSION,
        mode: recipe.mode.as_str().into(),
        seed: recipe.seed,
        epochs: recipe.epochs,
        steps_per_epoch: spe,
        train_samples: n,
        val_samples: data.val.len(),
    });
    let mut step_losses = Vec::new();
    let val_labels: Vec<u8> = data.val.entries().iter().flat_map(|e| e.labels.clone()).collect();

    for epoch in start_epoch..recipe.epochs {
        let t0 = Instant::now();
        let lr = sched.lr_at(epoch);
        let mut epoch_losses = Vec::with_capacity(spe);
        for indices in epoch_batches(n, recipe.batch_size, recipe.seed, epoch) {
            let b = indices.len();
            let tokens = labelled_batch(
                &data.train,
                cfg,
                &recipe.finetune_augment,
                recipe.seed,
                epoch,
                &indices,
                recipe.workers,
            )?;
            let targets = batch_targets(&data.train, &indices)?;
            let net: Vec<Tensor<f32>> = params
                .entries()
                .iter()
                .zip(&mask)
                .map(|(e, &trainable)| {
                    let data = e.data.clone();
                    if trainable {
                        Tensor::leaf(data, e.rows, e.cols)
                    } else {
                        Tensor::constant(data, e.rows, e.cols)
                    }
                })
                .collect::<Result<_>>()?;
            let emb = backbone_forward(cfg, &layout, &net, &tokens, b)?;
            let logits = classify(&layout, &net, &emb)?;
            let loss = weighted_bce(&logits, &targets, &data.pos_w)?;
            let loss_value = loss.item() as f64;
            check_finite(loss_value, recipe.mode, epoch, opt.steps())?;
            loss.backward()?;
            let grads: Vec<Option<Vec<f32>>> = net.iter().map(|t| t.take_grad()).collect();
            opt.step(&mut params, &grads, lr)?;
            epoch_losses.push(loss_value);
            step_losses.push(loss_value);
        }

        let scores = score_dataset(
            cfg,
            &params,
            &data.val,
            recipe.batch_size,
            recipe.workers,
            recipe.finetune_augment.mean,
            recipe.finetune_augment.std,
        )?;
        let report = evaluate_scores(
            &scores,
            &val_labels,
            data.val.len(),
            data.val.num_classes(),
            data.val.class_codes(),
            data.ciw.weights(),
            recipe.threshold,
        )?;
        log.push(EpochRecord {
            epoch,
            steps_done: opt.steps() as usize,
            mean_loss: epoch_losses.iter().sum::<f64>() / epoch_losses.len() as f64,
            lr,
            tau: None,
            rankme: None,
            val_f2_ciw: Some(report.f2_ciw),
            val_f1_normal: Some(report.f1_normal),
            wall_time_s: t0.elapsed().as_secs_f64(),
        });

        let done = epoch + 1;
        let stop = recipe.stop_after_epoch == Some(done);
        let last = done == recipe.epochs || stop;
        let cadence = done % recipe.checkpoint_every == 0;
        if cadence || last {
            let mut ckpt = Checkpoint::new(
                recipe.mode.as_str(),
                done as u64,
                opt.steps(),
                recipe.seed,
                cfg.clone(),
            );
            ckpt.push_param_set("student.", &params)?;
            opt.push_state(&mut ckpt, &params)?;
            write_artifacts(inputs.out_dir, &log, &ckpt, cadence, last)?;
            if last {
                if let Some(dir) = inputs.out_dir {
                    save_val_tables(dir, &data.val, &scores)?;
                }
                return Ok(RunOutput {
                    log,
                    checkpoint: ckpt,
                    final_metrics: Some(report),
                    step_losses,
                });
            }
        } else if let Some(dir) = inputs.out_dir {
            log.save(&dir.join("runlog.jsonl"))?;
        }
    }
    unreachable!("the final epoch always returns");
}

/// Final-epoch validation scores and matching binary labels in the shared
/// score/label CSV schema, so the run's predictions can be re-scored by the
/// standalone evaluation flow.
fn save_val_tables(dir: &Path, val: &MultiLabelDataset, scores: &[f64]) -> Result<()> {
    let paths: Vec<String> = val.entries().iter().map(|e| e.rel_path.clone()).collect();
    let labels: Vec<f64> = val
        .entries()
        .iter()
        .flat_map(|e| e.labels.iter().map(|&v| v as f64))
        .collect();
    save_score_table(&dir.join("val-predictions.csv"), val.class_codes(), &paths, scores)?;
    save_score_table(&dir.join("val-labels.csv"), val.class_codes(), &paths, &labels)
}

/// Class-token embeddings of up to `limit` samples under the deterministic
/// evaluation transform. Returns row-major f64 data with its (rows, dim).
pub fn embed_dataset(
    cfg: &ModelConfig,
    params: &ParamSet,
    ds: &MultiLabelDataset,
    limit: usize,
    batch_size: usize,
    workers: usize,
    mean: [f32; 3],
    std: [f32; 3],
) -> Result<(Vec<f64>, usize, usize)> {
    let rows = limit.min(ds.len());
    if rows == 0 {
        return Err(CoreError::invalid("embed", "no samples to embed"));
    }
    let layout = VitLayout::from_params(params, cfg)?;
    let tensors = params.const_tensors::<f32>();
    let indices: Vec<usize> = (0..rows).collect();
    let mut out = Vec::with_capacity(rows * cfg.embed_dim);
    for chunk in indices.chunks(batch_size.max(1)) {
        let tokens = eval_batch(ds, cfg, mean, std, chunk, workers)?;
        let emb = backbone_forward(cfg, &layout, &tensors, &tokens, chunk.len())?;
        out.extend(emb.values().iter().map(|&v| v as f64));
    }
    Ok((out, rows, cfg.embed_dim))
}

fn sigmoid64(x: f32) -> f64 {
    let x = x as f64;
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Per-class probabilities for every sample, row-major `(n, C)`, under the
/// deterministic evaluation transform.
pub fn score_dataset(
    cfg: &ModelConfig,
    params: &ParamSet,
    ds: &MultiLabelDataset,
    batch_size: usize,
    workers: usize,
    mean: [f32; 3],
    std: [f32; 3],
) -> Result<Vec<f64>> {
    if ds.is_empty() {
        return Err(CoreError::invalid("score", "empty dataset"));
    }
    let layout = VitLayout::from_params(params, cfg)?;
    let tensors = params.const_tensors::<f32>();
    let indices: Vec<usize> = (0..ds.len()).collect();
    let mut scores = Vec::with_capacity(ds.len() * cfg.num_classes);
    for chunk in indices.chunks(batch_size.max(1)) {
        let tokens = eval_batch(ds, cfg, mean, std, chunk, workers)?;
        let emb = backbone_forward(cfg, &layout, &tensors, &tokens, chunk.len())?;
        let logits = classify(&layout, &tensors, &emb)?;
        scores.extend(logits.values().iter().map(|&v| sigmoid64(v)));
    }
    Ok(scores)
}

/// Score a labelled dataset with a classifier parameter set and produce the
/// full metric report plus the raw scores.
pub fn evaluate_params(
    cfg: &ModelConfig,
    params: &ParamSet,
    ds: &MultiLabelDataset,
    ciw: Option<&CiwTable>,
    threshold: f64,
    batch_size: usize,
    workers: usize,
    mean: [f32; 3],
    std: [f32; 3],
) -> Result<(MetricReport, Vec<f64>)> {
    if cfg.num_classes != ds.num_classes() {
        return Err(CoreError::invalid(
            "evaluate",
            format!("model has {} classes, dataset {}", cfg.num_classes, ds.num_classes()),
        ));
    }
    let aligned = aligned_ciw(ds, ciw)?;
    let scores = score_dataset(cfg, params, ds, batch_size, workers, mean, std)?;
    let labels: Vec<u8> = ds.entries().iter().flat_map(|e| e.labels.clone()).collect();
    let report = evaluate_scores(
        &scores,
        &labels,
        ds.len(),
        ds.num_classes(),
        ds.class_codes(),
        aligned.weights(),
        threshold,
    )?;
    Ok((report, scores))
}

/// Rebuild the trained parameter set stored in a checkpoint (the `student.`
/// arrays) for evaluation or embedding export.
pub fn params_from_checkpoint(ckpt: &Checkpoint) -> Result<ParamSet> {
    let mode: Mode = ckpt.mode.parse()?;
    let template = init_params(&ckpt.config, mode.net_kind(), ckpt.seed)?;
    ckpt.extract_param_set("student.", &template)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{generate_synthetic, SynthSpec};
    use std::path::PathBuf;

    fn synth_dir(name: &str) -> PathBuf {
        std::env::temp_dir().join(format!("engine-test-{name}-{}", std::process::id()))
    }

    fn tiny_dataset(name: &str, n: usize, seed: u64) -> MultiLabelDataset {
        let dir = synth_dir(name);
        std::fs::create_dir_all(&dir).unwrap();
        generate_synthetic(&SynthSpec::default_desk(n, 32, seed), &dir).unwrap()
    }

    fn tiny_recipe(mode: Mode, seed: u64) -> TrainRecipe {
        let mut r = TrainRecipe::new(mode, ModelConfig::vit_mu(6), seed);
        r.epochs = 2;
        r.warmup_epochs = 1;
        r.batch_size = 8;
        r.validation_fraction = 0.25;
        r.rankme_samples = 8;
        r.checkpoint_every = 1;
        r
    }

    fn ckpt_bits_equal(a: &Checkpoint, b: &Checkpoint) -> bool {
        a.mode == b.mode
            && a.epoch == b.epoch
            && a.step == b.step
            && a.seed == b.seed
            && a.arrays.len() == b.arrays.len()
            && a.arrays.iter().zip(&b.arrays).all(|(x, y)| {
                x.name == y.name
                    && x.rows == y.rows
                    && x.cols == y.cols
                    && x.data.iter().zip(&y.data).all(|(p, q)| p.to_bits() == q.to_bits())
            })
    }

    #[test]
    fn split_is_disjoint_exhaustive_and_mode_stable() {
        let ds = tiny_dataset("split", 40, 3);
        let (train, val) = split_dataset(&ds, 0.25, 9).unwrap();
        assert_eq!(train.len() + val.len(), 40);
        assert_eq!(val.len(), 10);
        let t: std::collections::HashSet<&str> =
            train.entries().iter().map(|e| e.rel_path.as_str()).collect();
        for e in val.entries() {
            assert!(!t.contains(e.rel_path.as_str()), "val row leaked into train");
        }
        let (train2, val2) = split_dataset(&ds, 0.25, 9).unwrap();
        assert_eq!(train.entries(), train2.entries());
        assert_eq!(val.entries(), val2.entries());
        let (_, val3) = split_dataset(&ds, 0.25, 10).unwrap();
        assert_ne!(val.entries(), val3.entries(), "different seed moves the split");
    }

    #[test]
    fn epoch_batches_cover_every_sample_once() {
        for (n, b) in [(20, 8), (16, 16), (5, 8), (21, 7)] {
            let batches = epoch_batches(n, b, 11, 4);
            let mut seen: Vec<usize> = batches.iter().flatten().copied().collect();
            seen.sort_unstable();
            assert_eq!(seen, (0..n).collect::<Vec<_>>(), "n={n} b={b}");
        }
        assert_ne!(
            epoch_batches(20, 8, 11, 0),
            epoch_batches(20, 8, 11, 1),
            "epochs reshuffle"
        );
        assert_eq!(epoch_batches(20, 8, 11, 0), epoch_batches(20, 8, 11, 0));
    }

    #[test]
    fn parallel_map_matches_serial_and_propagates_errors() {
        let idx: Vec<usize> = (0..23).collect();
        let f = |i: usize| -> Result<u64> { Ok((i as u64) * 7 + 1) };
        let serial = parallel_map(&idx, 1, f).unwrap();
        let parallel = parallel_map(&idx, 4, f).unwrap();
        assert_eq!(serial, parallel);
        let failing = |i: usize| -> Result<u64> {
            if i == 13 {
                Err(CoreError::invalid("test", "boom"))
            } else {
                Ok(0)
            }
        };
        assert!(parallel_map(&idx, 3, failing).is_err());
    }

    #[test]
    fn pretrain_batches_are_worker_count_invariant() {
        let ds = tiny_dataset("workers", 12, 5);
        let cfg = ModelConfig::vit_mu(6);
        let aug = PretrainAugment::defaults(32);
        let idx: Vec<usize> = (0..12).collect();
        let (a1, b1) = pretrain_batch(&ds, &cfg, &aug, 7, 0, &idx, 1).unwrap();
        let (a3, b3) = pretrain_batch(&ds, &cfg, &aug, 7, 0, &idx, 3).unwrap();
        let bits = |t: &Tensor<f32>| t.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a1), bits(&a3));
        assert_eq!(bits(&b1), bits(&b3));
    }

    #[test]
    fn pretrain_run_logs_schedules_exactly() {
        let ds = tiny_dataset("pretrain-log", 24, 21);
        let recipe = tiny_recipe(Mode::Pretrain, 33);
        let out = run(&recipe, RunInputs::new(&ds)).unwrap();
        assert_eq!(out.log.records.len(), 2);
        let n_train = out.log.header.train_samples;
        let spe = n_train.div_ceil(recipe.batch_size);
        assert_eq!(out.log.header.steps_per_epoch, spe);
        let lr_sched = WarmupCosine::new(
            recipe.warmup_start_lr,
            recipe.absolute_base_lr(),
            recipe.min_lr,
            recipe.warmup_epochs * spe,
            recipe.epochs * spe,
        )
        .unwrap();
        let tau_sched = CosineTau::new(recipe.tau_base, recipe.tau_final, recipe.epochs * spe).unwrap();
        for rec in &out.log.records {
            let last = rec.steps_done - 1;
            assert_eq!(rec.lr, lr_sched.lr_at(last), "epoch {}", rec.epoch);
            assert_eq!(rec.tau, Some(tau_sched.tau_at(last)));
            assert!(rec.mean_loss.is_finite());
            let r = rec.rankme.unwrap();
            assert!(r >= 1.0 && r.is_finite());
            assert!(rec.val_f2_ciw.is_none());
        }
        assert_eq!(out.step_losses.len(), recipe.epochs * spe);
        // Checkpoint carries every array family.
        for prefix in ["student.backbone", "teacher.backbone", "student.projector", "opt.m.", "opt.v."] {
            assert!(
                out.checkpoint.arrays.iter().any(|a| a.name.starts_with(prefix)),
                "missing {prefix}"
            );
        }
        assert!(out.checkpoint.array("state.center").is_some());
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let ds = tiny_dataset("determinism", 20, 2);
        let recipe = tiny_recipe(Mode::Pretrain, 5);
        let a = run(&recipe, RunInputs::new(&ds)).unwrap();
        let b = run(&recipe, RunInputs::new(&ds)).unwrap();
        assert_eq!(a.log.canonical_jsonl(), b.log.canonical_jsonl());
        let la: Vec<u64> = a.step_losses.iter().map(|x| x.to_bits()).collect();
        let lb: Vec<u64> = b.step_losses.iter().map(|x| x.to_bits()).collect();
        assert_eq!(la, lb);
        assert!(ckpt_bits_equal(&a.checkpoint, &b.checkpoint));
    }

    #[test]
    fn hybrid_with_zero_lambda_matches_pretrain_losses_bitwise() {
        let ds = tiny_dataset("hybrid-zero", 20, 14);
        let pre = tiny_recipe(Mode::Pretrain, 8);
        let mut hyb = tiny_recipe(Mode::Hybrid, 8);
        hyb.lambda = 0.0;
        let a = run(&pre, RunInputs::new(&ds)).unwrap();
        let b = run(&hyb, RunInputs::new(&ds)).unwrap();
        assert_eq!(a.step_losses.len(), b.step_losses.len());
        for (x, y) in a.step_losses.iter().zip(&b.step_losses) {
            assert_eq!(x.to_bits(), y.to_bits(), "{x} vs {y}");
        }
    }

    #[test]
    fn resume_reproduces_the_uninterrupted_run() {
        let ds = tiny_dataset("resume", 20, 6);
        let mut full = tiny_recipe(Mode::Pretrain, 9);
        full.epochs = 4;
        full.warmup_epochs = 1;
        let whole = run(&full, RunInputs::new(&ds)).unwrap();

        let mut head = full.clone();
        head.stop_after_epoch = Some(2);
        let first = run(&head, RunInputs::new(&ds)).unwrap();
        assert_eq!(first.log.records.len(), 2);
        assert_eq!(first.checkpoint.epoch, 2);

        let mut inputs = RunInputs::new(&ds);
        inputs.resume_from = Some(&first.checkpoint);
        let rest = run(&full, inputs).unwrap();
        assert_eq!(rest.log.records.len(), 2, "resume covers the remaining epochs");

        let mut stitched = first.log.clone();
        stitched.records.extend(rest.log.records.clone());
        assert_eq!(stitched.canonical_jsonl(), whole.log.canonical_jsonl());
        assert!(ckpt_bits_equal(&rest.checkpoint, &whole.checkpoint));

        let mut tail_losses = first.step_losses.clone();
        tail_losses.extend(rest.step_losses.clone());
        assert_eq!(
            tail_losses.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            whole.step_losses.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn frozen_tau_keeps_teacher_at_init() {
        let ds = tiny_dataset("tau-frozen", 16, 7);
        let mut recipe = tiny_recipe(Mode::Pretrain, 12);
        recipe.epochs = 1;
        recipe.warmup_epochs = 0;
        recipe.tau_base = 1.0;
        recipe.tau_final = 1.0;
        let out = run(&recipe, RunInputs::new(&ds)).unwrap();
        let init = init_params(&recipe.model, NetKind::pretrain(), recipe.seed).unwrap();
        for e in init.entries() {
            let arr = out.checkpoint.array(&format!("teacher.{}", e.name)).unwrap();
            assert!(
                arr.data.iter().zip(&e.data).all(|(a, b)| a.to_bits() == b.to_bits()),
                "teacher entry {} moved despite tau = 1",
                e.name
            );
            let student = out.checkpoint.array(&format!("student.{}", e.name)).unwrap();
            assert!(
                student.data.iter().zip(&e.data).any(|(a, b)| a.to_bits() != b.to_bits()),
                "student entry {} never moved",
                e.name
            );
        }
    }

    #[test]
    fn probe_freezes_backbone_and_loss_decreases() {
        let ds = tiny_dataset("probe", 24, 18);
        let mut pre = tiny_recipe(Mode::Pretrain, 4);
        pre.epochs = 1;
        pre.warmup_epochs = 0;
        let pretrained = run(&pre, RunInputs::new(&ds)).unwrap();

        let mut probe = tiny_recipe(Mode::Probe, 4);
        probe.epochs = 4;
        probe.finetune_lr_per_256 = 0.5;
        probe.finetune_augment = FinetuneAugment::identity(32);
        let mut inputs = RunInputs::new(&ds);
        inputs.init_from = Some(&pretrained.checkpoint);
        let out = run(&probe, inputs).unwrap();

        for a in out.checkpoint.arrays.iter().filter(|a| a.name.starts_with("student.backbone")) {
            let src = pretrained
                .checkpoint
                .array(&a.name.replace("student.", "teacher."))
                .unwrap();
            assert!(
                a.data.iter().zip(&src.data).all(|(x, y)| x.to_bits() == y.to_bits()),
                "frozen backbone array {} changed",
                a.name
            );
        }
        assert!(
            out.checkpoint.arrays.iter().any(|a| a.name == "opt.m.classifier.weight"),
            "optimizer state exists for the classifier"
        );
        assert!(
            !out.checkpoint.arrays.iter().any(|a| a.name == "opt.m.backbone.embed.weight"),
            "no optimizer state for frozen entries"
        );
        let first = out.log.records.first().unwrap().mean_loss;
        let last = out.log.records.last().unwrap().mean_loss;
        assert!(last < first, "probe loss should fall: {first} -> {last}");
        assert!(out.final_metrics.is_some());
    }

    #[test]
    fn finetune_loads_teacher_backbone_and_fresh_classifier() {
        let ds = tiny_dataset("finetune-init", 20, 25);
        let mut pre = tiny_recipe(Mode::Hybrid, 5);
        pre.epochs = 1;
        pre.warmup_epochs = 0;
        let pretrained = run(&pre, RunInputs::new(&ds)).unwrap();

        let ft = tiny_recipe(Mode::Finetune, 5);
        let (params, mask) = supervised_init(&ft, Some(&pretrained.checkpoint)).unwrap();
        assert!(mask.iter().all(|&t| t), "finetune trains everything");
        let fresh = init_params(&ft.model, NetKind::classifier(), ft.seed).unwrap();
        for e in params.entries() {
            if e.name.starts_with("backbone.") {
                let src = pretrained.checkpoint.array(&format!("teacher.{}", e.name)).unwrap();
                assert!(
                    e.data.iter().zip(&src.data).all(|(x, y)| x.to_bits() == y.to_bits()),
                    "{} should come from the teacher",
                    e.name
                );
            } else {
                let init = fresh.entries()[fresh.index_of(&e.name).unwrap()].data.clone();
                assert!(
                    e.data.iter().zip(&init).all(|(x, y)| x.to_bits() == y.to_bits()),
                    "{} should be freshly initialized",
                    e.name
                );
                let stored = pretrained.checkpoint.array(&format!("student.{}", e.name)).unwrap();
                assert!(
                    e.data.iter().zip(&stored.data).any(|(x, y)| x.to_bits() != y.to_bits()),
                    "{} must differ from the checkpoint's classifier",
                    e.name
                );
            }
        }
    }

    #[test]
    fn supervised_gradients_reach_every_trainable_parameter() {
        let ds = tiny_dataset("sup-grads", 16, 31);
        let recipe = tiny_recipe(Mode::Supervised, 2);
        let (train, _) = split_dataset(&ds, 0.25, recipe.seed).unwrap();
        let (params, mask) = supervised_init(&recipe, None).unwrap();
        let layout = VitLayout::from_params(&params, &recipe.model).unwrap();
        let indices: Vec<usize> = (0..recipe.batch_size.min(train.len())).collect();
        let tokens = labelled_batch(
            &train,
            &recipe.model,
            &recipe.finetune_augment,
            recipe.seed,
            0,
            &indices,
            1,
        )
        .unwrap();
        let targets = batch_targets(&train, &indices).unwrap();
        let net = params.leaf_tensors::<f32>();
        let emb = backbone_forward(&recipe.model, &layout, &net, &tokens, indices.len()).unwrap();
        let logits = classify(&layout, &net, &emb).unwrap();
        let pos_w = vec![1.0f32; train.num_classes()];
        let loss = weighted_bce(&logits, &targets, &pos_w).unwrap();
        loss.backward().unwrap();
        for (t, e) in net.iter().zip(params.entries()) {
            let g = t.take_grad();
            assert!(g.is_some(), "no gradient reached {}", e.name);
            assert!(g.unwrap().iter().all(|x| x.is_finite()), "{} has non-finite grads", e.name);
        }
        assert_eq!(mask.len(), params.entries().len());
    }

    #[test]
    fn supervised_run_records_val_metrics_every_epoch() {
        let ds = tiny_dataset("sup-metrics", 20, 40);
        let mut recipe = tiny_recipe(Mode::Supervised, 3);
        recipe.epochs = 2;
        let out = run(&recipe, RunInputs::new(&ds)).unwrap();
        assert_eq!(out.log.records.len(), 2);
        for rec in &out.log.records {
            assert!(rec.val_f2_ciw.is_some());
            assert!(rec.val_f1_normal.is_some());
            assert!(rec.tau.is_none());
            assert!(rec.rankme.is_none());
            let sched = MultiStep::new(
                recipe.absolute_finetune_lr(),
                recipe.milestones.clone(),
                recipe.gamma,
            )
            .unwrap();
            assert_eq!(rec.lr, sched.lr_at(rec.epoch));
        }
        let report = out.final_metrics.unwrap();
        assert_eq!(report.class_codes.len(), 6);
        assert!(report.f2_ciw >= 0.0 && report.f2_ciw <= 100.0);
    }

    #[test]
    fn run_rejects_bad_wiring() {
        let ds = tiny_dataset("wiring", 16, 50);
        let mut r = tiny_recipe(Mode::Pretrain, 1);
        r.batch_size = 1;
        assert!(run(&r, RunInputs::new(&ds)).is_err(), "batch 1 pretraining");

        let ft = tiny_recipe(Mode::Finetune, 1);
        assert!(run(&ft, RunInputs::new(&ds)).is_err(), "finetune without checkpoint");

        let sup = tiny_recipe(Mode::Supervised, 1);
        let mut pre = tiny_recipe(Mode::Pretrain, 1);
        pre.epochs = 1;
        pre.warmup_epochs = 0;
        let ck = run(&pre, RunInputs::new(&ds)).unwrap();
        let mut inputs = RunInputs::new(&ds);
        inputs.init_from = Some(&ck.checkpoint);
        assert!(run(&sup, inputs).is_err(), "supervised rejects init checkpoint");

        let mut wrong_seed = tiny_recipe(Mode::Pretrain, 2);
        wrong_seed.epochs = 4;
        let mut inputs = RunInputs::new(&ds);
        inputs.resume_from = Some(&ck.checkpoint);
        assert!(run(&wrong_seed, inputs).is_err(), "resume with mismatched seed");

        let mut bad = tiny_recipe(Mode::Pretrain, 1);
        bad.validation_fraction = 1.0;
        assert!(bad.validate().is_err());
        bad.validation_fraction = 0.1;
        bad.data_fraction = 0.0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn non_finite_loss_aborts_with_context() {
        let err = check_finite(f64::NAN, Mode::Pretrain, 3, 17).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("epoch 3") && msg.contains("step 17"), "{msg}");
        assert!(check_finite(5.0, Mode::Pretrain, 0, 0).is_ok());
    }

    #[test]
    fn evaluate_params_zero_classifier_scores_half() {
        let ds = tiny_dataset("eval-zero", 12, 60);
        let cfg = ModelConfig::vit_mu(6);
        let mut params = init_params(&cfg, NetKind::classifier(), 2).unwrap();
        for e in params.entries_mut() {
            if e.name.starts_with("classifier.") {
                e.data.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let (report, scores) = evaluate_params(
            &cfg,
            &params,
            &ds,
            None,
            0.5,
            8,
            1,
            [0.0; 3],
            [1.0; 3],
        )
        .unwrap();
        assert!(scores.iter().all(|&s| (s - 0.5).abs() < 1e-12));
        assert_eq!(report.samples, 12);
        // Threshold 0.5 with score exactly 0.5 predicts positive everywhere:
        // recall 1 for every class that has a positive.
        assert!(report.per_class_f2.iter().all(|&f| (0.0..=1.0).contains(&f)));
    }

    #[test]
    fn params_from_checkpoint_round_trips_the_student() {
        let ds = tiny_dataset("params-rt", 16, 70);
        let mut pre = tiny_recipe(Mode::Pretrain, 6);
        pre.epochs = 1;
        pre.warmup_epochs = 0;
        let out = run(&pre, RunInputs::new(&ds)).unwrap();
        let params = params_from_checkpoint(&out.checkpoint).unwrap();
        for e in params.entries() {
            let arr = out.checkpoint.array(&format!("student.{}", e.name)).unwrap();
            assert!(e.data.iter().zip(&arr.data).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn out_dir_writes_log_and_checkpoints() {
        let ds = tiny_dataset("outdir", 16, 80);
        let mut recipe = tiny_recipe(Mode::Supervised, 7);
        recipe.epochs = 2;
        recipe.checkpoint_every = 1;
        let dir = synth_dir("outdir-run");
        std::fs::create_dir_all(&dir).unwrap();
        let mut inputs = RunInputs::new(&ds);
        inputs.out_dir = Some(&dir);
        let out = run(&recipe, inputs).unwrap();
        let log = RunLog::load(&dir.join("runlog.jsonl")).unwrap();
        assert_eq!(log.canonical_jsonl(), out.log.canonical_jsonl());
        let final_ck = Checkpoint::load(&dir.join("ckpt-final.bin")).unwrap();
        assert!(ckpt_bits_equal(&final_ck, &out.checkpoint));
        let latest = Checkpoint::load(&dir.join("ckpt-latest.bin")).unwrap();
        assert!(ckpt_bits_equal(&latest, &out.checkpoint));

        let preds = crate::data::load_score_table(&dir.join("val-predictions.csv")).unwrap();
        let labels = crate::data::load_label_table(&dir.join("val-labels.csv")).unwrap();
        assert_eq!(preds.paths, labels.paths);
        assert_eq!(preds.codes, labels.codes);
        assert_eq!(preds.scores.len(), preds.paths.len() * preds.codes.len());
        let report = out.final_metrics.unwrap();
        let rescored = evaluate_scores(
            &preds.scores,
            &labels.labels,
            preds.paths.len(),
            preds.codes.len(),
            &preds.codes,
            &vec![1.0; preds.codes.len()],
            recipe.threshold,
        )
        .unwrap();
        assert_eq!(rescored.f2_ciw, report.f2_ciw);
        assert_eq!(rescored.f1_normal, report.f1_normal);
        std::fs::remove_dir_all(&dir).ok();
    }
}
