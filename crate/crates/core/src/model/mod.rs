//! Vision-transformer backbone, projection head with weight-normalized
//! prototype layer, and linear classifier head.
//!
//! Parameters live in a [`ParamSet`]: a flat list of named `f32` arrays in a
//! fixed canonical order. Forward passes run over a list of [`Tensor`]s
//! aligned with that order; [`VitLayout`] resolves names to indices once and
//! validates shapes.

pub mod checkpoint;
mod forward;

pub use checkpoint::{Checkpoint, NamedArray};
pub use forward::{backbone_forward, backbone_tokens, classify, project, LN_EPS};

use crate::augment::Image;
use crate::error::{CoreError, Result};
use crate::rng;
use crate::tensor::{Element, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

/// Architecture hyperparameters for backbone and heads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: f64,
    #[serde(default = "default_projector_hidden")]
    pub projector_hidden: usize,
    #[serde(default = "default_projector_out")]
    pub projector_out: usize,
    #[serde(default = "default_prototypes")]
    pub prototypes: usize,
    pub num_classes: usize,
}

fn default_mlp_ratio() -> f64 {
    4.0
}
fn default_projector_hidden() -> usize {
    2048
}
fn default_projector_out() -> usize {
    256
}
fn default_prototypes() -> usize {
    32_768
}

impl ModelConfig {
    /// ViT-T/16: 224px, patch 16, width 192, depth 12, 3 heads.
    pub fn vit_t16(num_classes: usize) -> ModelConfig {
        ModelConfig {
            image_size: 224,
            patch_size: 16,
            embed_dim: 192,
            depth: 12,
            heads: 3,
            mlp_ratio: 4.0,
            projector_hidden: 2048,
            projector_out: 256,
            prototypes: 32_768,
            num_classes,
        }
    }

    /// ViT-S/16: 224px, patch 16, width 384, depth 12, 6 heads.
    pub fn vit_s16(num_classes: usize) -> ModelConfig {
        ModelConfig {
            embed_dim: 384,
            heads: 6,
            ..ModelConfig::vit_t16(num_classes)
        }
    }

    /// Desk-scale ViT-µ: 32px, patch 4, width 64, depth 4, 4 heads,
    /// 256 prototypes.
    pub fn vit_mu(num_classes: usize) -> ModelConfig {
        ModelConfig {
            image_size: 32,
            patch_size: 4,
            embed_dim: 64,
            depth: 4,
            heads: 4,
            mlp_ratio: 4.0,
            projector_hidden: 2048,
            projector_out: 256,
            prototypes: 256,
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("embed_dim", self.embed_dim),
            ("depth", self.depth),
            ("heads", self.heads),
            ("projector_hidden", self.projector_hidden),
            ("projector_out", self.projector_out),
            ("prototypes", self.prototypes),
            ("num_classes", self.num_classes),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(CoreError::invalid("model config", format!("{name} must be positive")));
            }
        }
        if self.image_size % self.patch_size != 0 {
            return Err(CoreError::invalid(
                "model config",
                format!("image_size {} not divisible by patch_size {}", self.image_size, self.patch_size),
            ));
        }
        if self.embed_dim % self.heads != 0 {
            return Err(CoreError::invalid(
                "model config",
                format!("embed_dim {} not divisible by heads {}", self.embed_dim, self.heads),
            ));
        }
        if !(self.mlp_ratio > 0.0 && self.mlp_ratio.is_finite()) {
            return Err(CoreError::invalid("model config", "mlp_ratio must be positive"));
        }
        if self.mlp_hidden() == 0 {
            return Err(CoreError::invalid("model config", "mlp hidden width rounds to zero"));
        }
        Ok(())
    }

    /// Patch tokens per image (no class token).
    pub fn tokens(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    /// Flattened patch length: patch_size² · 3 channels.
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    /// MLP hidden width inside each transformer block.
    pub fn mlp_hidden(&self) -> usize {
        (self.embed_dim as f64 * self.mlp_ratio).round() as usize
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }
}

/// Which heads a network carries on top of the backbone.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetKind {
    pub projector: bool,
    pub classifier: bool,
}

impl NetKind {
    /// Backbone + projection head (self-distillation pretraining).
    pub fn pretrain() -> NetKind {
        NetKind { projector: true, classifier: false }
    }

    /// Backbone + classifier head (fine-tuning, probing, supervised).
    pub fn classifier() -> NetKind {
        NetKind { projector: false, classifier: true }
    }

    /// Backbone + both heads (hybrid pretraining).
    pub fn hybrid() -> NetKind {
        NetKind { projector: true, classifier: true }
    }
}

/// One named parameter array with its 2-D shape and weight-decay flag.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
    /// Whether AdamW applies weight decay (true for weight matrices only).
    pub decay: bool,
}

/// Ordered collection of named parameters; the order is the canonical layout
/// used by forward passes, optimizers, and checkpoints.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> ParamSet {
        ParamSet::default()
    }

    pub fn push(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        data: Vec<f32>,
        decay: bool,
    ) -> Result<()> {
        let name = name.into();
        if data.len() != rows * cols {
            return Err(CoreError::shape(
                "param",
                format!("{name}: {} values for {rows}x{cols}", data.len()),
            ));
        }
        if self.index.contains_key(&name) {
            return Err(CoreError::invalid("param", format!("duplicate name {name}")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry { name, rows, cols, data, decay });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.index_of(name).map(|i| &self.entries[i])
    }

    /// Total scalar parameter count.
    pub fn total_params(&self) -> usize {
        self.entries.iter().map(|e| e.data.len()).sum()
    }

    /// Trainable tensors in layout order (gradients enabled).
    pub fn leaf_tensors<E: Element>(&self) -> Vec<Tensor<E>> {
        self.entries
            .iter()
            .map(|e| {
                Tensor::leaf(convert::<E>(&e.data), e.rows, e.cols)
                    .expect("entry shape validated at insert")
            })
            .collect()
    }

    /// Frozen tensors in layout order (no gradients, ops over them fold).
    pub fn const_tensors<E: Element>(&self) -> Vec<Tensor<E>> {
        self.entries
            .iter()
            .map(|e| {
                Tensor::constant(convert::<E>(&e.data), e.rows, e.cols)
                    .expect("entry shape validated at insert")
            })
            .collect()
    }

    /// All values concatenated in layout order.
    pub fn flat_values(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.total_params());
        for e in &self.entries {
            out.extend_from_slice(&e.data);
        }
        out
    }

    /// Split one flat `(1, total)` tensor into per-entry tensors by slicing,
    /// so a whole network can hang off a single leaf (used by gradient
    /// checking).
    pub fn tensors_from_flat<E: Element>(&self, flat: &Tensor<E>) -> Result<Vec<Tensor<E>>> {
        let total = self.total_params();
        if flat.shape() != (1, total) {
            return Err(CoreError::shape(
                "tensors_from_flat",
                format!("expected (1, {total}), got {:?}", flat.shape()),
            ));
        }
        let mut out = Vec::with_capacity(self.entries.len());
        let mut offset = 0;
        for e in &self.entries {
            let n = e.rows * e.cols;
            out.push(flat.slice(0..1, offset..offset + n)?.reshape(e.rows, e.cols)?);
            offset += n;
        }
        Ok(out)
    }

    /// Overwrite values from another set with identical layout.
    pub fn copy_values_from(&mut self, other: &ParamSet) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(CoreError::shape("copy_values", "entry count mismatch"));
        }
        for (dst, src) in self.entries.iter_mut().zip(&other.entries) {
            if dst.name != src.name || dst.rows != src.rows || dst.cols != src.cols {
                return Err(CoreError::shape(
                    "copy_values",
                    format!("layout mismatch at {} vs {}", dst.name, src.name),
                ));
            }
            dst.data.copy_from_slice(&src.data);
        }
        Ok(())
    }
}

fn convert<E: Element>(data: &[f32]) -> Vec<E> {
    data.iter().map(|&v| E::from_f64(v as f64)).collect()
}

/// Standard normal via Box-Muller, rejected outside ±2σ, scaled by `std`.
fn trunc_normal(rng: &mut ChaCha8Rng, std: f64) -> f32 {
    loop {
        let u1: f64 = rng.random();
        let u2: f64 = rng.random();
        let z = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
        if z.abs() <= 2.0 {
            return (z * std) as f32;
        }
    }
}

fn init_weight(seed: u64, name: &str, rows: usize, cols: usize) -> Vec<f32> {
    let mut rng = rng::init_rng(seed, name);
    (0..rows * cols).map(|_| trunc_normal(&mut rng, 0.02)).collect()
}

/// Build a freshly initialized network: truncated-normal (std 0.02) weights,
/// zero biases, unit layer-norm gains. Each array draws from its own named
/// stream, so adding or removing heads never shifts other arrays' values.
pub fn init_params(cfg: &ModelConfig, kind: NetKind, seed: u64) -> Result<ParamSet> {
    cfg.validate()?;
    let d = cfg.embed_dim;
    let pd = cfg.patch_dim();
    let t1 = cfg.tokens() + 1;
    let h = cfg.mlp_hidden();
    let mut p = ParamSet::new();

    let weight = |p: &mut ParamSet, name: String, rows: usize, cols: usize| -> Result<()> {
        let data = init_weight(seed, &name, rows, cols);
        p.push(name, rows, cols, data, true)
    };
    let zeros = |p: &mut ParamSet, name: String, rows: usize, cols: usize| -> Result<()> {
        p.push(name, rows, cols, vec![0.0; rows * cols], false)
    };
    let ones = |p: &mut ParamSet, name: String, rows: usize, cols: usize| -> Result<()> {
        p.push(name, rows, cols, vec![1.0; rows * cols], false)
    };

    weight(&mut p, "backbone.embed.weight".into(), pd, d)?;
    zeros(&mut p, "backbone.embed.bias".into(), 1, d)?;
    let cls = init_weight(seed, "backbone.cls_token", 1, d);
    p.push("backbone.cls_token", 1, d, cls, false)?;
    let pos = init_weight(seed, "backbone.pos_embed", t1, d);
    p.push("backbone.pos_embed", t1, d, pos, false)?;

    for b in 0..cfg.depth {
        ones(&mut p, format!("backbone.blocks.{b}.norm1.weight"), 1, d)?;
        zeros(&mut p, format!("backbone.blocks.{b}.norm1.bias"), 1, d)?;
        weight(&mut p, format!("backbone.blocks.{b}.attn.qkv.weight"), d, 3 * d)?;
        zeros(&mut p, format!("backbone.blocks.{b}.attn.qkv.bias"), 1, 3 * d)?;
        weight(&mut p, format!("backbone.blocks.{b}.attn.proj.weight"), d, d)?;
        zeros(&mut p, format!("backbone.blocks.{b}.attn.proj.bias"), 1, d)?;
        ones(&mut p, format!("backbone.blocks.{b}.norm2.weight"), 1, d)?;
        zeros(&mut p, format!("backbone.blocks.{b}.norm2.bias"), 1, d)?;
        weight(&mut p, format!("backbone.blocks.{b}.mlp.fc1.weight"), d, h)?;
        zeros(&mut p, format!("backbone.blocks.{b}.mlp.fc1.bias"), 1, h)?;
        weight(&mut p, format!("backbone.blocks.{b}.mlp.fc2.weight"), h, d)?;
        zeros(&mut p, format!("backbone.blocks.{b}.mlp.fc2.bias"), 1, d)?;
    }
    ones(&mut p, "backbone.norm.weight".into(), 1, d)?;
    zeros(&mut p, "backbone.norm.bias".into(), 1, d)?;

    if kind.projector {
        let ph = cfg.projector_hidden;
        let po = cfg.projector_out;
        weight(&mut p, "projector.fc1.weight".into(), d, ph)?;
        zeros(&mut p, "projector.fc1.bias".into(), 1, ph)?;
        weight(&mut p, "projector.fc2.weight".into(), ph, ph)?;
        zeros(&mut p, "projector.fc2.bias".into(), 1, ph)?;
        weight(&mut p, "projector.fc3.weight".into(), ph, po)?;
        zeros(&mut p, "projector.fc3.bias".into(), 1, po)?;
        weight(&mut p, "prototypes.weight".into(), cfg.prototypes, po)?;
    }
    if kind.classifier {
        weight(&mut p, "classifier.weight".into(), d, cfg.num_classes)?;
        zeros(&mut p, "classifier.bias".into(), 1, cfg.num_classes)?;
    }
    Ok(p)
}

/// Indices of one block's parameters inside the layout order.
#[derive(Debug, Clone, Copy)]
pub(crate) struct BlockIdx {
    pub norm1_w: usize,
    pub norm1_b: usize,
    pub qkv_w: usize,
    pub qkv_b: usize,
    pub proj_w: usize,
    pub proj_b: usize,
    pub norm2_w: usize,
    pub norm2_b: usize,
    pub fc1_w: usize,
    pub fc1_b: usize,
    pub fc2_w: usize,
    pub fc2_b: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ProjectorIdx {
    pub fc1_w: usize,
    pub fc1_b: usize,
    pub fc2_w: usize,
    pub fc2_b: usize,
    pub fc3_w: usize,
    pub fc3_b: usize,
    pub prototypes: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ClassifierIdx {
    pub weight: usize,
    pub bias: usize,
}

/// Name-resolved, shape-checked view of a [`ParamSet`] for forward passes.
#[derive(Debug, Clone)]
pub struct VitLayout {
    pub(crate) embed_w: usize,
    pub(crate) embed_b: usize,
    pub(crate) cls: usize,
    pub(crate) pos: usize,
    pub(crate) blocks: Vec<BlockIdx>,
    pub(crate) norm_w: usize,
    pub(crate) norm_b: usize,
    pub(crate) projector: Option<ProjectorIdx>,
    pub(crate) classifier: Option<ClassifierIdx>,
}

impl VitLayout {
    pub fn from_params(params: &ParamSet, cfg: &ModelConfig) -> Result<VitLayout> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        let find = |name: &str, rows: usize, cols: usize| -> Result<usize> {
            let i = params.index_of(name).ok_or_else(|| {
                CoreError::invalid("layout", format!("missing parameter {name}"))
            })?;
            let e = &params.entries()[i];
            if (e.rows, e.cols) != (rows, cols) {
                return Err(CoreError::shape(
                    "layout",
                    format!("{name}: expected {rows}x{cols}, found {}x{}", e.rows, e.cols),
                ));
            }
            Ok(i)
        };

        let mut blocks = Vec::with_capacity(cfg.depth);
        for b in 0..cfg.depth {
            let h = cfg.mlp_hidden();
            blocks.push(BlockIdx {
                norm1_w: find(&format!("backbone.blocks.{b}.norm1.weight"), 1, d)?,
                norm1_b: find(&format!("backbone.blocks.{b}.norm1.bias"), 1, d)?,
                qkv_w: find(&format!("backbone.blocks.{b}.attn.qkv.weight"), d, 3 * d)?,
                qkv_b: find(&format!("backbone.blocks.{b}.attn.qkv.bias"), 1, 3 * d)?,
                proj_w: find(&format!("backbone.blocks.{b}.attn.proj.weight"), d, d)?,
                proj_b: find(&format!("backbone.blocks.{b}.attn.proj.bias"), 1, d)?,
                norm2_w: find(&format!("backbone.blocks.{b}.norm2.weight"), 1, d)?,
                norm2_b: find(&format!("backbone.blocks.{b}.norm2.bias"), 1, d)?,
                fc1_w: find(&format!("backbone.blocks.{b}.mlp.fc1.weight"), d, h)?,
                fc1_b: find(&format!("backbone.blocks.{b}.mlp.fc1.bias"), 1, h)?,
                fc2_w: find(&format!("backbone.blocks.{b}.mlp.fc2.weight"), h, d)?,
                fc2_b: find(&format!("backbone.blocks.{b}.mlp.fc2.bias"), 1, d)?,
            });
        }

        let projector = if params.index_of("projector.fc1.weight").is_some() {
            let ph = cfg.projector_hidden;
            let po = cfg.projector_out;
            Some(ProjectorIdx {
                fc1_w: find("projector.fc1.weight", d, ph)?,
                fc1_b: find("projector.fc1.bias", 1, ph)?,
                fc2_w: find("projector.fc2.weight", ph, ph)?,
                fc2_b: find("projector.fc2.bias", 1, ph)?,
                fc3_w: find("projector.fc3.weight", ph, po)?,
                fc3_b: find("projector.fc3.bias", 1, po)?,
                prototypes: find("prototypes.weight", cfg.prototypes, po)?,
            })
        } else {
            None
        };
        let classifier = if params.index_of("classifier.weight").is_some() {
            Some(ClassifierIdx {
                weight: find("classifier.weight", d, cfg.num_classes)?,
                bias: find("classifier.bias", 1, cfg.num_classes)?,
            })
        } else {
            None
        };

        Ok(VitLayout {
            embed_w: find("backbone.embed.weight", cfg.patch_dim(), d)?,
            embed_b: find("backbone.embed.bias", 1, d)?,
            cls: find("backbone.cls_token", 1, d)?,
            pos: find("backbone.pos_embed", cfg.tokens() + 1, d)?,
            blocks,
            norm_w: find("backbone.norm.weight", 1, d)?,
            norm_b: find("backbone.norm.bias", 1, d)?,
            projector,
            classifier,
        })
    }

    pub fn has_projector(&self) -> bool {
        self.projector.is_some()
    }

    pub fn has_classifier(&self) -> bool {
        self.classifier.is_some()
    }
}

/// Flattened patch tokens of one image: `tokens` rows of length `dim`,
/// row-major patch order, each row the patch's pixels in HWC order.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchTokens {
    pub tokens: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

/// Cut an image into non-overlapping `patch_size` squares.
pub fn patchify(img: &Image, patch_size: usize) -> Result<PatchTokens> {
    if patch_size == 0 || img.height % patch_size != 0 || img.width % patch_size != 0 {
        return Err(CoreError::invalid(
            "patchify",
            format!("{}x{} not divisible by patch {patch_size}", img.height, img.width),
        ));
    }
    let rows = img.height / patch_size;
    let cols = img.width / patch_size;
    let dim = patch_size * patch_size * 3;
    let mut data = Vec::with_capacity(rows * cols * dim);
    for py in 0..rows {
        for px in 0..cols {
            for dy in 0..patch_size {
                for dx in 0..patch_size {
                    for c in 0..3 {
                        data.push(img.get(py * patch_size + dy, px * patch_size + dx, c));
                    }
                }
            }
        }
    }
    Ok(PatchTokens { tokens: rows * cols, dim, data })
}

/// Stack a batch of images into one `(batch·tokens, patch_dim)` constant
/// tensor ready for the patch-embedding matmul.
pub fn patch_tokens_tensor<E: Element>(
    images: &[Image],
    cfg: &ModelConfig,
) -> Result<Tensor<E>> {
    if images.is_empty() {
        return Err(CoreError::invalid("patch batch", "empty image batch"));
    }
    let mut data = Vec::with_capacity(images.len() * cfg.tokens() * cfg.patch_dim());
    for img in images {
        if img.height != cfg.image_size || img.width != cfg.image_size {
            return Err(CoreError::shape(
                "patch batch",
                format!(
                    "image {}x{} does not match config {}",
                    img.height, img.width, cfg.image_size
                ),
            ));
        }
        let p = patchify(img, cfg.patch_size)?;
        data.extend(p.data.iter().map(|&v| E::from_f64(v as f64)));
    }
    Tensor::constant(data, images.len() * cfg.tokens(), cfg.patch_dim())
}

/// Exact scalar parameter count from the architecture formula (independent
/// of any materialized [`ParamSet`]).
pub fn count_params(cfg: &ModelConfig, include_heads: bool) -> usize {
    let d = cfg.embed_dim;
    let pd = cfg.patch_dim();
    let t1 = cfg.tokens() + 1;
    let h = cfg.mlp_hidden();
    let per_block = 2 * d          // norm1
        + d * 3 * d + 3 * d        // qkv
        + d * d + d                // attention projection
        + 2 * d                    // norm2
        + d * h + h                // mlp fc1
        + h * d + d; // mlp fc2
    let backbone = pd * d + d      // patch embed
        + d                        // class token
        + t1 * d                   // positional embeddings
        + cfg.depth * per_block
        + 2 * d; // final norm
    if !include_heads {
        return backbone;
    }
    let ph = cfg.projector_hidden;
    let po = cfg.projector_out;
    let heads = d * ph + ph
        + ph * ph + ph
        + ph * po + po
        + cfg.prototypes * po
        + d * cfg.num_classes + cfg.num_classes;
    backbone + heads
}
