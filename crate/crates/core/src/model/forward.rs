//! Differentiable forward passes: backbone, projection head, classifier.
//!
//! All functions take the tensor list produced by
//! [`ParamSet::leaf_tensors`]/[`ParamSet::const_tensors`]
//! (crate::model::ParamSet) in layout order together with the matching
//! [`VitLayout`]. With constant tensors the graph folds away and the pass is
//! inference-only.

use super::{ModelConfig, VitLayout};
use crate::error::{CoreError, Result};
use crate::tensor::{Element, Tensor};

/// Layer-norm epsilon used throughout the backbone.
pub const LN_EPS: f64 = 1e-6;

/// Full token matrix `(batch·(tokens+1), embed_dim)` after the final layer
/// norm; each sample's class token is its first row.
pub fn backbone_tokens<E: Element>(
    cfg: &ModelConfig,
    layout: &VitLayout,
    params: &[Tensor<E>],
    patch_tokens: &Tensor<E>,
    batch: usize,
) -> Result<Tensor<E>> {
    let t = cfg.tokens();
    if batch == 0 {
        return Err(CoreError::invalid("backbone", "empty batch"));
    }
    if patch_tokens.shape() != (batch * t, cfg.patch_dim()) {
        return Err(CoreError::shape(
            "backbone",
            format!(
                "patch tokens {:?}, expected ({}, {})",
                patch_tokens.shape(),
                batch * t,
                cfg.patch_dim()
            ),
        ));
    }
    let eps = E::from_f64(LN_EPS);

    // Patch embedding, then prepend the class token per sample.
    let embedded = patch_tokens.matmul(&params[layout.embed_w])?.add_rows(&params[layout.embed_b])?;
    let cls = &params[layout.cls];
    let mut parts = Vec::with_capacity(batch);
    for s in 0..batch {
        parts.push(cls.clone());
        parts.push(embedded.slice_rows(s * t..(s + 1) * t)?);
    }
    let mut x = Tensor::concat_rows(&parts)?.add_rows(&params[layout.pos])?;

    let scale = E::from_f64(1.0 / (cfg.head_dim() as f64).sqrt());
    let dh = cfg.head_dim();
    for blk in &layout.blocks {
        let normed = x.layer_norm(&params[blk.norm1_w], &params[blk.norm1_b], eps)?;
        let qkv = normed.matmul(&params[blk.qkv_w])?.add_rows(&params[blk.qkv_b])?;
        let attn_out = qkv
            .multi_head_attention(batch, cfg.heads, dh, scale)?
            .matmul(&params[blk.proj_w])?
            .add_rows(&params[blk.proj_b])?;
        x = x.add(&attn_out)?;

        let normed2 = x.layer_norm(&params[blk.norm2_w], &params[blk.norm2_b], eps)?;
        let mlp = normed2
            .matmul(&params[blk.fc1_w])?
            .add_rows(&params[blk.fc1_b])?
            .gelu()
            .matmul(&params[blk.fc2_w])?
            .add_rows(&params[blk.fc2_b])?;
        x = x.add(&mlp)?;
    }
    x.layer_norm(&params[layout.norm_w], &params[layout.norm_b], eps)
}

/// Class-token embeddings `(batch, embed_dim)`.
pub fn backbone_forward<E: Element>(
    cfg: &ModelConfig,
    layout: &VitLayout,
    params: &[Tensor<E>],
    patch_tokens: &Tensor<E>,
    batch: usize,
) -> Result<Tensor<E>> {
    let tokens = backbone_tokens(cfg, layout, params, patch_tokens, batch)?;
    let tp = cfg.tokens() + 1;
    let mut cls_rows = Vec::with_capacity(batch);
    for s in 0..batch {
        cls_rows.push(tokens.slice_rows(s * tp..s * tp + 1)?);
    }
    Tensor::concat_rows(&cls_rows)
}

/// Projection head: three-layer MLP, L2-normalized bottleneck, then the
/// weight-normalized prototype layer (unit-norm rows, magnitude 1). Output
/// `(batch, prototypes)`.
pub fn project<E: Element>(
    cfg: &ModelConfig,
    layout: &VitLayout,
    params: &[Tensor<E>],
    embeddings: &Tensor<E>,
) -> Result<Tensor<E>> {
    let proj = layout
        .projector
        .ok_or_else(|| CoreError::invalid("project", "network has no projection head"))?;
    if embeddings.cols() != cfg.embed_dim {
        return Err(CoreError::shape(
            "project",
            format!("embedding dim {}, expected {}", embeddings.cols(), cfg.embed_dim),
        ));
    }
    let eps = E::from_f64(1e-6);
    let z = embeddings
        .matmul(&params[proj.fc1_w])?
        .add_rows(&params[proj.fc1_b])?
        .gelu()
        .matmul(&params[proj.fc2_w])?
        .add_rows(&params[proj.fc2_b])?
        .gelu()
        .matmul(&params[proj.fc3_w])?
        .add_rows(&params[proj.fc3_b])?
        .row_l2_normalize(eps);
    let unit_prototypes = params[proj.prototypes].row_l2_normalize(eps);
    z.matmul(&unit_prototypes.transpose())
}

/// Linear classifier over embeddings; output `(batch, num_classes)`.
pub fn classify<E: Element>(
    layout: &VitLayout,
    params: &[Tensor<E>],
    embeddings: &Tensor<E>,
) -> Result<Tensor<E>> {
    let head = layout
        .classifier
        .ok_or_else(|| CoreError::invalid("classify", "network has no classifier head"))?;
    embeddings.matmul(&params[head.weight])?.add_rows(&params[head.bias])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::Image;
    use crate::model::{init_params, patch_tokens_tensor, NetKind, ParamSet};
    use crate::rng::derive_rng;
    use rand::Rng;

    fn random_images(cfg: &ModelConfig, n: usize, seed: u64) -> Vec<Image> {
        let mut rng = derive_rng(seed, "model-test-images", &[n as u64]);
        (0..n)
            .map(|_| {
                let data = (0..cfg.image_size * cfg.image_size * 3)
                    .map(|_| rng.random_range(0.0..1.0f32))
                    .collect();
                Image::new(cfg.image_size, cfg.image_size, data).unwrap()
            })
            .collect()
    }

    fn forward_f32(cfg: &ModelConfig, params: &ParamSet, images: &[Image]) -> Tensor<f32> {
        let layout = VitLayout::from_params(params, cfg).unwrap();
        let tensors = params.const_tensors::<f32>();
        let patches = patch_tokens_tensor::<f32>(images, cfg).unwrap();
        backbone_forward(cfg, &layout, &tensors, &patches, images.len()).unwrap()
    }

    #[test]
    fn tiny_backbone_output_shape() {
        let cfg = ModelConfig::vit_t16(17);
        let params = init_params(&cfg, NetKind { projector: false, classifier: false }, 5).unwrap();
        let out = forward_f32(&cfg, &params, &random_images(&cfg, 2, 1));
        assert_eq!(out.shape(), (2, 192));
        assert!(out.values().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn small_backbone_output_shape() {
        let cfg = ModelConfig::vit_s16(17);
        let params = init_params(&cfg, NetKind { projector: false, classifier: false }, 5).unwrap();
        let out = forward_f32(&cfg, &params, &random_images(&cfg, 2, 2));
        assert_eq!(out.shape(), (2, 384));
    }

    #[test]
    fn micro_backbone_output_shape() {
        let cfg = ModelConfig::vit_mu(6);
        let params = init_params(&cfg, NetKind { projector: false, classifier: false }, 5).unwrap();
        let out = forward_f32(&cfg, &params, &random_images(&cfg, 3, 3));
        assert_eq!(out.shape(), (3, 64));
    }

    #[test]
    fn batch_permutation_swaps_output_rows() {
        let cfg = ModelConfig::vit_mu(6);
        let params = init_params(&cfg, NetKind { projector: false, classifier: false }, 9).unwrap();
        let images = random_images(&cfg, 2, 4);
        let fwd = forward_f32(&cfg, &params, &images);
        let swapped: Vec<Image> = vec![images[1].clone(), images[0].clone()];
        let rev = forward_f32(&cfg, &params, &swapped);
        let d = cfg.embed_dim;
        for j in 0..d {
            assert!((fwd.values()[j] - rev.values()[d + j]).abs() < 1e-5);
            assert!((fwd.values()[d + j] - rev.values()[j]).abs() < 1e-5);
        }
    }

    #[test]
    fn zero_pos_embed_constant_image_keeps_patch_tokens_identical() {
        let cfg = ModelConfig::vit_mu(6);
        let mut params = init_params(&cfg, NetKind { projector: false, classifier: false }, 6).unwrap();
        let pos = params.index_of("backbone.pos_embed").unwrap();
        params.entries_mut()[pos].data.fill(0.0);
        let layout = VitLayout::from_params(&params, &cfg).unwrap();
        let tensors = params.const_tensors::<f32>();
        let images = vec![Image::filled(32, 32, 0.4)];
        let patches = patch_tokens_tensor::<f32>(&images, &cfg).unwrap();
        let tokens = backbone_tokens(&cfg, &layout, &tensors, &patches, 1).unwrap();
        let d = cfg.embed_dim;
        let first_patch = &tokens.values()[d..2 * d];
        for t in 2..=cfg.tokens() {
            let row = &tokens.values()[t * d..(t + 1) * d];
            for (a, b) in row.iter().zip(first_patch) {
                assert!((a - b).abs() < 1e-5, "token {t} diverged: {a} vs {b}");
            }
        }
    }

    #[test]
    fn projection_output_shapes_and_zero_input_guard() {
        let cfg = ModelConfig::vit_mu(6);
        let params = init_params(&cfg, NetKind::pretrain(), 7).unwrap();
        let layout = VitLayout::from_params(&params, &cfg).unwrap();
        let tensors = params.const_tensors::<f32>();
        let embeddings = Tensor::constant(vec![0.1; 2 * 64], 2, 64).unwrap();
        let logits = project(&cfg, &layout, &tensors, &embeddings).unwrap();
        assert_eq!(logits.shape(), (2, 256));
        // Unit-norm prototype rows and unit-norm inputs keep logits in [-1, 1].
        assert!(logits.values().iter().all(|v| v.is_finite() && v.abs() <= 1.0 + 1e-5));

        let zero = Tensor::constant(vec![0.0; 64], 1, 64).unwrap();
        let z_logits = project(&cfg, &layout, &tensors, &zero).unwrap();
        assert!(z_logits.values().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn default_prototype_count_in_small_config() {
        let mut cfg = ModelConfig::vit_mu(6);
        cfg.prototypes = 32_768;
        assert_eq!(cfg.prototypes, ModelConfig::vit_s16(6).prototypes);
        // Shape check without materializing a 32k-row head: the layout math
        // only depends on the config value.
        let small = ModelConfig::vit_mu(6);
        let params = init_params(&small, NetKind::pretrain(), 2).unwrap();
        let layout = VitLayout::from_params(&params, &small).unwrap();
        let tensors = params.const_tensors::<f32>();
        let e = Tensor::constant(vec![0.2; 64], 1, 64).unwrap();
        assert_eq!(project(&small, &layout, &tensors, &e).unwrap().cols(), small.prototypes);
    }

    #[test]
    fn classifier_shapes_and_zero_weights() {
        let cfg = ModelConfig::vit_mu(17);
        let mut params = init_params(&cfg, NetKind::classifier(), 8).unwrap();
        let w = params.index_of("classifier.weight").unwrap();
        params.entries_mut()[w].data.fill(0.0);
        let layout = VitLayout::from_params(&params, &cfg).unwrap();
        let tensors = params.const_tensors::<f32>();
        let e = Tensor::constant(vec![0.3; 2 * 64], 2, 64).unwrap();
        let logits = classify(&layout, &tensors, &e).unwrap();
        assert_eq!(logits.shape(), (2, 17));
        for &v in logits.values() {
            assert_eq!(v, 0.0);
            let sigmoid = 1.0 / (1.0 + (-v).exp());
            assert_eq!(sigmoid, 0.5);
        }
    }

    #[test]
    fn frozen_backbone_trains_only_the_classifier() {
        let cfg = ModelConfig::vit_mu(3);
        let params = init_params(&cfg, NetKind::classifier(), 10).unwrap();
        let layout = VitLayout::from_params(&params, &cfg).unwrap();
        // Backbone constants, classifier leaves: the probe contract.
        let mut tensors = params.const_tensors::<f32>();
        let wi = params.index_of("classifier.weight").unwrap();
        let bi = params.index_of("classifier.bias").unwrap();
        for i in [wi, bi] {
            let e = &params.entries()[i];
            tensors[i] = Tensor::leaf(e.data.clone(), e.rows, e.cols).unwrap();
        }
        let images = random_images(&cfg, 2, 11);
        let patches = patch_tokens_tensor::<f32>(&images, &cfg).unwrap();
        let emb = backbone_forward(&cfg, &layout, &tensors, &patches, 2).unwrap();
        assert!(!emb.needs_grad(), "frozen backbone must fold to a constant");
        let logits = classify(&layout, &tensors, &emb).unwrap();
        logits.mean_all().backward().unwrap();
        assert!(tensors[wi].grad().is_some());
        assert!(tensors[bi].grad().is_some());
        let qkv = params.index_of("backbone.blocks.0.attn.qkv.weight").unwrap();
        assert!(tensors[qkv].grad().is_none());
    }

    #[test]
    fn mismatched_patch_tokens_rejected() {
        let cfg = ModelConfig::vit_mu(6);
        let params = init_params(&cfg, NetKind { projector: false, classifier: false }, 1).unwrap();
        let layout = VitLayout::from_params(&params, &cfg).unwrap();
        let tensors = params.const_tensors::<f32>();
        let bad = Tensor::constant(vec![0.0; 10 * 48], 10, 48).unwrap();
        assert!(backbone_forward(&cfg, &layout, &tensors, &bad, 1).is_err());
    }
}
