//! Run configuration files. The TOML schema mirrors the training recipe
//! with every key optional; anything omitted falls back to the recipe
//! defaults for the chosen mode and model. Unknown keys are rejected. The
//! materialized form, with every value spelled out and paths made absolute,
//! is echoed into the run directory so a run can be reproduced from that
//! copy alone.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use dino_forge_core::data::{load_dataset, MultiLabelDataset};
use dino_forge_core::engine::{Mode, TrainRecipe};
use dino_forge_core::model::ModelConfig;
use dino_forge_core::objectives::CiwTable;

use crate::CliError;

#[derive(Debug, Default, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfigFile {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub version: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub run: Option<RunSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub schedule: Option<ScheduleSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub augment: Option<AugmentSections>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<DataSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output: Option<OutputSection>,
}

#[derive(Debug, Default, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mode: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warmup_epochs: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weight_decay: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta2: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub adam_eps: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub validation_fraction: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data_fraction: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint_every: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stop_after_epoch: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rankme_samples: Option<usize>,
}

#[derive(Debug, Default, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warmup_start_lr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub base_lr_per_256: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub min_lr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub finetune_lr_per_256: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub milestones: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub student_temp: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub teacher_temp: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub center_momentum: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau_base: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau_final: Option<f64>,
}

#[derive(Debug, Default, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// Starting point: `vit-mu` (default), `vit-t16`, or `vit-s16`. Input
    /// only; the echo spells out every field instead.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    /// Defaults to the class count of the dataset CSV.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub num_classes: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub image_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub patch_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub embed_dim: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub depth: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub heads: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mlp_ratio: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub projector_hidden: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub projector_out: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prototypes: Option<usize>,
}

#[derive(Debug, Default, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentSections {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pretrain: Option<PretrainSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub finetune: Option<FinetuneSection>,
}

#[derive(Debug, Default, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub crop_scale: Option<(f64, f64)>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub crop_ratio: Option<(f64, f64)>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub brightness: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub contrast: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub saturation: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hue: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grayscale_p: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub blur_p: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub blur_sigma: Option<(f64, f64)>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub equalize_p: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub solarize_p: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub solarize_threshold: Option<f32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hflip_p: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean: Option<[f32; 3]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub std: Option<[f32; 3]>,
}

#[derive(Debug, Default, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub brightness: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub contrast: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub saturation: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hue: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hflip_p: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub equalize_p: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub autocontrast_p: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rotation_deg: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub erase_p: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub erase_scale: Option<(f64, f64)>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub erase_ratio: Option<(f64, f64)>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean: Option<[f32; 3]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub std: Option<[f32; 3]>,
}

#[derive(Debug, Default, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Dataset index CSV; relative paths resolve against the config file.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset_csv: Option<String>,
    /// Image directory; defaults to the dataset CSV's directory.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub image_root: Option<String>,
    /// Explicit validation split; without it a seeded split is carved from
    /// the dataset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_csv: Option<String>,
    /// Class-importance weights; without it every class weighs 1.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ciw_csv: Option<String>,
    /// Pretrained checkpoint for finetune/probe backbone initialization.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub init_checkpoint: Option<String>,
}

#[derive(Debug, Default, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    /// Base directory that run directories are created under.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<String>,
}

/// Command-line overrides that take precedence over the config file.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub fraction: Option<f64>,
    pub threshold: Option<f64>,
    pub out: Option<PathBuf>,
    pub init_from: Option<PathBuf>,
}

/// A fully materialized run: the concrete recipe, its loaded inputs, and
/// the echo config describing exactly this run.
pub struct Prepared {
    pub recipe: TrainRecipe,
    pub dataset: MultiLabelDataset,
    pub val: Option<MultiLabelDataset>,
    pub ciw: Option<CiwTable>,
    pub init_from: Option<PathBuf>,
    pub out_base: PathBuf,
    pub echo: RunConfigFile,
}

macro_rules! set {
    ($dst:expr, $src:expr) => {
        if let Some(v) = $src {
            $dst = v;
        }
    };
}

fn absolutize(base: &Path, raw: &str) -> PathBuf {
    let p = Path::new(raw);
    let joined = if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
    std::path::absolute(&joined).unwrap_or(joined)
}

fn path_string(p: &Path) -> String {
    p.display().to_string()
}

/// Worker cap from `DINO_FORGE_THREADS`, if set.
fn thread_cap() -> Result<Option<usize>, CliError> {
    match std::env::var("DINO_FORGE_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(Some(n)),
            _ => Err(CliError::config(format!(
                "DINO_FORGE_THREADS must be a positive integer, got {v:?}"
            ))),
        },
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(CliError::config(format!("DINO_FORGE_THREADS: {e}"))),
    }
}

fn build_model(section: &ModelSection, dataset_classes: usize) -> Result<ModelConfig, CliError> {
    let num_classes = section.num_classes.unwrap_or(dataset_classes);
    let preset = section.preset.as_deref().unwrap_or("vit-mu");
    let mut model = match preset {
        "vit-mu" => ModelConfig::vit_mu(num_classes),
        "vit-t16" => ModelConfig::vit_t16(num_classes),
        "vit-s16" => ModelConfig::vit_s16(num_classes),
        other => {
            return Err(CliError::config(format!(
                "unknown model preset {other:?} (expected vit-mu, vit-t16, or vit-s16)"
            )))
        }
    };
    set!(model.image_size, section.image_size);
    set!(model.patch_size, section.patch_size);
    set!(model.embed_dim, section.embed_dim);
    set!(model.depth, section.depth);
    set!(model.heads, section.heads);
    set!(model.mlp_ratio, section.mlp_ratio);
    set!(model.projector_hidden, section.projector_hidden);
    set!(model.projector_out, section.projector_out);
    set!(model.prototypes, section.prototypes);
    Ok(model)
}

fn apply_run(recipe: &mut TrainRecipe, s: &RunSection) {
    set!(recipe.epochs, s.epochs);
    set!(recipe.warmup_epochs, s.warmup_epochs);
    set!(recipe.batch_size, s.batch_size);
    set!(recipe.weight_decay, s.weight_decay);
    set!(recipe.beta1, s.beta1);
    set!(recipe.beta2, s.beta2);
    set!(recipe.adam_eps, s.adam_eps);
    set!(recipe.lambda, s.lambda);
    set!(recipe.threshold, s.threshold);
    set!(recipe.validation_fraction, s.validation_fraction);
    set!(recipe.data_fraction, s.data_fraction);
    set!(recipe.workers, s.workers);
    set!(recipe.checkpoint_every, s.checkpoint_every);
    if s.stop_after_epoch.is_some() {
        recipe.stop_after_epoch = s.stop_after_epoch;
    }
    set!(recipe.rankme_samples, s.rankme_samples);
}

fn apply_schedule(recipe: &mut TrainRecipe, s: &ScheduleSection) {
    set!(recipe.warmup_start_lr, s.warmup_start_lr);
    set!(recipe.base_lr_per_256, s.base_lr_per_256);
    set!(recipe.min_lr, s.min_lr);
    set!(recipe.finetune_lr_per_256, s.finetune_lr_per_256);
    set!(recipe.milestones, s.milestones.clone());
    set!(recipe.gamma, s.gamma);
    set!(recipe.student_temp, s.student_temp);
    set!(recipe.teacher_temp, s.teacher_temp);
    set!(recipe.center_momentum, s.center_momentum);
    set!(recipe.tau_base, s.tau_base);
    set!(recipe.tau_final, s.tau_final);
}

fn apply_pretrain_augment(recipe: &mut TrainRecipe, s: &PretrainSection) {
    let a = &mut recipe.pretrain_augment;
    set!(a.out_size, s.out_size);
    set!(a.crop_scale, s.crop_scale);
    set!(a.crop_ratio, s.crop_ratio);
    set!(a.brightness, s.brightness);
    set!(a.contrast, s.contrast);
    set!(a.saturation, s.saturation);
    set!(a.hue, s.hue);
    set!(a.grayscale_p, s.grayscale_p);
    set!(a.blur_p, s.blur_p);
    set!(a.blur_sigma, s.blur_sigma);
    set!(a.equalize_p, s.equalize_p);
    set!(a.solarize_p, s.solarize_p);
    set!(a.solarize_threshold, s.solarize_threshold);
    set!(a.hflip_p, s.hflip_p);
    set!(a.mean, s.mean);
    set!(a.std, s.std);
}

fn apply_finetune_augment(recipe: &mut TrainRecipe, s: &FinetuneSection) {
    let a = &mut recipe.finetune_augment;
    set!(a.out_size, s.out_size);
    set!(a.brightness, s.brightness);
    set!(a.contrast, s.contrast);
    set!(a.saturation, s.saturation);
    set!(a.hue, s.hue);
    set!(a.hflip_p, s.hflip_p);
    set!(a.equalize_p, s.equalize_p);
    set!(a.autocontrast_p, s.autocontrast_p);
    set!(a.rotation_deg, s.rotation_deg);
    set!(a.erase_p, s.erase_p);
    set!(a.erase_scale, s.erase_scale);
    set!(a.erase_ratio, s.erase_ratio);
    set!(a.mean, s.mean);
    set!(a.std, s.std);
}

fn build_echo(
    recipe: &TrainRecipe,
    dataset_csv: &Path,
    image_root: &Path,
    val_csv: Option<&Path>,
    ciw_csv: Option<&Path>,
    init_from: Option<&Path>,
    out_base: &Path,
) -> RunConfigFile {
    let pa = &recipe.pretrain_augment;
    let fa = &recipe.finetune_augment;
    let m = &recipe.model;
    RunConfigFile {
        version: Some(1),
        run: Some(RunSection {
            mode: Some(recipe.mode.as_str().to_string()),
            seed: Some(recipe.seed),
            epochs: Some(recipe.epochs),
            warmup_epochs: Some(recipe.warmup_epochs),
            batch_size: Some(recipe.batch_size),
            weight_decay: Some(recipe.weight_decay),
            beta1: Some(recipe.beta1),
            beta2: Some(recipe.beta2),
            adam_eps: Some(recipe.adam_eps),
            lambda: Some(recipe.lambda),
            threshold: Some(recipe.threshold),
            validation_fraction: Some(recipe.validation_fraction),
            data_fraction: Some(recipe.data_fraction),
            workers: Some(recipe.workers),
            checkpoint_every: Some(recipe.checkpoint_every),
            stop_after_epoch: recipe.stop_after_epoch,
            rankme_samples: Some(recipe.rankme_samples),
        }),
        schedule: Some(ScheduleSection {
            warmup_start_lr: Some(recipe.warmup_start_lr),
            base_lr_per_256: Some(recipe.base_lr_per_256),
            min_lr: Some(recipe.min_lr),
            finetune_lr_per_256: Some(recipe.finetune_lr_per_256),
            milestones: Some(recipe.milestones.clone()),
            gamma: Some(recipe.gamma),
            student_temp: Some(recipe.student_temp),
            teacher_temp: Some(recipe.teacher_temp),
            center_momentum: Some(recipe.center_momentum),
            tau_base: Some(recipe.tau_base),
            tau_final: Some(recipe.tau_final),
        }),
        model: Some(ModelSection {
            preset: None,
            num_classes: Some(m.num_classes),
            image_size: Some(m.image_size),
            patch_size: Some(m.patch_size),
            embed_dim: Some(m.embed_dim),
            depth: Some(m.depth),
            heads: Some(m.heads),
            mlp_ratio: Some(m.mlp_ratio),
            projector_hidden: Some(m.projector_hidden),
            projector_out: Some(m.projector_out),
            prototypes: Some(m.prototypes),
        }),
        augment: Some(AugmentSections {
            pretrain: Some(PretrainSection {
                out_size: Some(pa.out_size),
                crop_scale: Some(pa.crop_scale),
                crop_ratio: Some(pa.crop_ratio),
                brightness: Some(pa.brightness),
                contrast: Some(pa.contrast),
                saturation: Some(pa.saturation),
                hue: Some(pa.hue),
                grayscale_p: Some(pa.grayscale_p),
                blur_p: Some(pa.blur_p),
                blur_sigma: Some(pa.blur_sigma),
                equalize_p: Some(pa.equalize_p),
                solarize_p: Some(pa.solarize_p),
                solarize_threshold: Some(pa.solarize_threshold),
                hflip_p: Some(pa.hflip_p),
                mean: Some(pa.mean),
                std: Some(pa.std),
            }),
            finetune: Some(FinetuneSection {
                out_size: Some(fa.out_size),
                brightness: Some(fa.brightness),
                contrast: Some(fa.contrast),
                saturation: Some(fa.saturation),
                hue: Some(fa.hue),
                hflip_p: Some(fa.hflip_p),
                equalize_p: Some(fa.equalize_p),
                autocontrast_p: Some(fa.autocontrast_p),
                rotation_deg: Some(fa.rotation_deg),
                erase_p: Some(fa.erase_p),
                erase_scale: Some(fa.erase_scale),
                erase_ratio: Some(fa.erase_ratio),
                mean: Some(fa.mean),
                std: Some(fa.std),
            }),
        }),
        data: Some(DataSection {
            dataset_csv: Some(path_string(dataset_csv)),
            image_root: Some(path_string(image_root)),
            val_csv: val_csv.map(path_string),
            ciw_csv: ciw_csv.map(path_string),
            init_checkpoint: init_from.map(path_string),
        }),
        output: Some(OutputSection { dir: Some(path_string(out_base)) }),
    }
}

/// Load a config file and materialize a concrete run from it: recipe
/// defaults for the subcommand's mode, file values over those, flag
/// overrides on top, then validation.
pub fn materialize(mode: Mode, config_path: &Path, ov: &Overrides) -> Result<Prepared, CliError> {
    let raw = std::fs::read_to_string(config_path)
        .map_err(|e| CliError::config(format!("{}: {e}", config_path.display())))?;
    let file: RunConfigFile = toml::from_str(&raw)
        .map_err(|e| CliError::config(format!("{}: {e}", config_path.display())))?;
    if let Some(v) = file.version {
        if v != 1 {
            return Err(CliError::config(format!("unsupported config version {v} (expected 1)")));
        }
    }
    let base_dir = config_path.parent().unwrap_or(Path::new("."));

    let run = file.run.unwrap_or_default();
    let schedule = file.schedule.unwrap_or_default();
    let model_section = file.model.unwrap_or_default();
    let augment = file.augment.unwrap_or_default();
    let data = file.data.unwrap_or_default();
    let output = file.output.unwrap_or_default();

    if let Some(stated) = &run.mode {
        let parsed: Mode = stated
            .parse()
            .map_err(|e: dino_forge_core::CoreError| CliError::config(e.to_string()))?;
        if parsed != mode {
            return Err(CliError::config(format!(
                "config file says mode = {stated:?} but the subcommand is {mode}"
            )));
        }
    }
    let seed = ov.seed.or(run.seed).unwrap_or(0);

    let dataset_csv = data
        .dataset_csv
        .as_deref()
        .ok_or_else(|| CliError::config("data.dataset_csv is required"))?;
    let dataset_csv = absolutize(base_dir, dataset_csv);
    let image_root = match data.image_root.as_deref() {
        Some(root) => absolutize(base_dir, root),
        None => dataset_csv.parent().unwrap_or(Path::new(".")).to_path_buf(),
    };
    let dataset = load_dataset(&dataset_csv, &image_root)?;
    let val_csv = data.val_csv.as_deref().map(|p| absolutize(base_dir, p));
    let val = val_csv.as_deref().map(|p| load_dataset(p, &image_root)).transpose()?;
    let ciw_csv = data.ciw_csv.as_deref().map(|p| absolutize(base_dir, p));
    let ciw = ciw_csv.as_deref().map(CiwTable::from_csv_path).transpose()?;

    let model = build_model(&model_section, dataset.num_classes())?;
    let mut recipe = TrainRecipe::new(mode, model, seed);
    apply_run(&mut recipe, &run);
    apply_schedule(&mut recipe, &schedule);
    if let Some(s) = &augment.pretrain {
        apply_pretrain_augment(&mut recipe, s);
    }
    if let Some(s) = &augment.finetune {
        apply_finetune_augment(&mut recipe, s);
    }
    set!(recipe.data_fraction, ov.fraction);
    set!(recipe.threshold, ov.threshold);
    if let Some(cap) = thread_cap()? {
        recipe.workers = recipe.workers.min(cap);
    }
    recipe.validate()?;

    let init_from = match (&ov.init_from, &data.init_checkpoint) {
        (Some(p), _) => Some(std::path::absolute(p).unwrap_or_else(|_| p.clone())),
        (None, Some(p)) => Some(absolutize(base_dir, p)),
        (None, None) => None,
    };
    let out_base = match (&ov.out, &output.dir) {
        (Some(p), _) => p.clone(),
        (None, Some(d)) => PathBuf::from(d),
        (None, None) => PathBuf::from("runs"),
    };
    let out_base = std::path::absolute(&out_base).unwrap_or(out_base);

    let echo = build_echo(
        &recipe,
        &dataset_csv,
        &image_root,
        val_csv.as_deref(),
        ciw_csv.as_deref(),
        init_from.as_deref(),
        &out_base,
    );
    Ok(Prepared { recipe, dataset, val, ciw, init_from, out_base, echo })
}

impl RunConfigFile {
    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string_pretty(self)
            .map_err(|e| CliError::runtime(format!("serializing config echo: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use dino_forge_core::data::synth::{generate_synthetic, SynthSpec};

    fn write(path: &Path, contents: &str) {
        std::fs::write(path, contents).unwrap();
    }

    fn synth_dir() -> (tempfile::TempDir, PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        std::fs::create_dir_all(&data).unwrap();
        generate_synthetic(&SynthSpec::default_desk(8, 32, 11), &data).unwrap();
        (dir, data)
    }

    fn recipe_json(recipe: &TrainRecipe) -> String {
        serde_json::to_string(recipe).unwrap()
    }

    fn err_of(result: Result<Prepared, CliError>) -> CliError {
        match result {
            Ok(_) => panic!("expected an error"),
            Err(e) => e,
        }
    }

    #[test]
    fn minimal_config_materializes_defaults() {
        let (dir, data) = synth_dir();
        let cfg = dir.path().join("run.toml");
        write(&cfg, "[data]\ndataset_csv = \"data/labels.csv\"\n");
        let prepared = materialize(Mode::Pretrain, &cfg, &Overrides::default()).unwrap();
        let expected =
            TrainRecipe::new(Mode::Pretrain, ModelConfig::vit_mu(6), 0);
        expected.validate().unwrap();
        assert_eq!(recipe_json(&prepared.recipe), recipe_json(&expected));
        assert_eq!(prepared.dataset.len(), 8);
        assert_eq!(prepared.dataset.root(), data.as_path());
        assert!(prepared.val.is_none());
        assert!(prepared.ciw.is_none());
        assert!(prepared.out_base.ends_with("runs"));
    }

    #[test]
    fn overrides_beat_config_values() {
        let (dir, _data) = synth_dir();
        let cfg = dir.path().join("run.toml");
        write(
            &cfg,
            "[run]\nseed = 3\ndata_fraction = 1.0\nthreshold = 0.5\n\n[data]\ndataset_csv = \"data/labels.csv\"\n",
        );
        let ov = Overrides {
            seed: Some(9),
            fraction: Some(0.5),
            threshold: Some(0.25),
            ..Overrides::default()
        };
        let prepared = materialize(Mode::Finetune, &cfg, &ov).unwrap();
        assert_eq!(prepared.recipe.seed, 9);
        assert_eq!(prepared.recipe.data_fraction, 0.5);
        assert_eq!(prepared.recipe.threshold, 0.25);
    }

    #[test]
    fn echo_rematerializes_identically() {
        let (dir, _data) = synth_dir();
        let cfg = dir.path().join("run.toml");
        write(
            &cfg,
            concat!(
                "[run]\nseed = 5\nepochs = 3\nwarmup_epochs = 1\nbatch_size = 4\n\n",
                "[schedule]\nbase_lr_per_256 = 1e-4\n\n",
                "[model]\ndepth = 2\nheads = 2\nembed_dim = 32\n\n",
                "[augment.pretrain]\nblur_p = 0.0\n\n",
                "[augment.finetune]\nrotation_deg = 0.0\n\n",
                "[data]\ndataset_csv = \"data/labels.csv\"\n",
            ),
        );
        let first = materialize(Mode::Hybrid, &cfg, &Overrides::default()).unwrap();
        let echo_path = dir.path().join("echo.toml");
        write(&echo_path, &first.echo.to_toml().unwrap());
        let second = materialize(Mode::Hybrid, &echo_path, &Overrides::default()).unwrap();
        assert_eq!(recipe_json(&first.recipe), recipe_json(&second.recipe));
        assert_eq!(first.out_base, second.out_base);
    }

    #[test]
    fn rejects_unknown_keys_and_wrong_modes() {
        let (dir, _data) = synth_dir();
        let cfg = dir.path().join("run.toml");
        write(&cfg, "[run]\nlearning_rate = 0.1\n\n[data]\ndataset_csv = \"data/labels.csv\"\n");
        let err = err_of(materialize(Mode::Pretrain, &cfg, &Overrides::default()));
        assert!(err.to_string().contains("learning_rate"), "{err}");

        write(&cfg, "[run]\nmode = \"probe\"\n\n[data]\ndataset_csv = \"data/labels.csv\"\n");
        let err = err_of(materialize(Mode::Pretrain, &cfg, &Overrides::default()));
        assert!(err.to_string().contains("probe"), "{err}");

        write(&cfg, "[model]\npreset = \"resnet\"\n\n[data]\ndataset_csv = \"data/labels.csv\"\n");
        let err = err_of(materialize(Mode::Pretrain, &cfg, &Overrides::default()));
        assert!(err.to_string().contains("resnet"), "{err}");

        write(&cfg, "version = 7\n\n[data]\ndataset_csv = \"data/labels.csv\"\n");
        let err = err_of(materialize(Mode::Pretrain, &cfg, &Overrides::default()));
        assert!(err.to_string().contains("version"), "{err}");
    }

    #[test]
    fn partial_augment_keeps_model_sized_defaults() {
        let (dir, _data) = synth_dir();
        let cfg = dir.path().join("run.toml");
        write(
            &cfg,
            "[augment.pretrain]\nhflip_p = 0.0\n\n[data]\ndataset_csv = \"data/labels.csv\"\n",
        );
        let prepared = materialize(Mode::Pretrain, &cfg, &Overrides::default()).unwrap();
        assert_eq!(prepared.recipe.pretrain_augment.out_size, 32);
        assert_eq!(prepared.recipe.pretrain_augment.hflip_p, 0.0);
        assert_eq!(prepared.recipe.pretrain_augment.blur_p, 0.3);
    }

    #[test]
    fn missing_dataset_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("run.toml");
        write(&cfg, "[run]\nseed = 1\n");
        let err = err_of(materialize(Mode::Pretrain, &cfg, &Overrides::default()));
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("dataset_csv"), "{err}");
    }
}
