//! Packaged numerics verification: one finite-difference gradient check per
//! differentiable primitive plus two composed model-level checks (a tiny
//! transformer checked at every parameter coordinate, and the desk-scale
//! model with the distillation loss checked at a seeded sample of
//! coordinates). The CLI `gradcheck` command runs this and prints one line
//! per case.

use crate::augment::Image;
use crate::error::Result;
use crate::model::{
    backbone_forward, init_params, patch_tokens_tensor, project, ModelConfig, NetKind, VitLayout,
};
use crate::objectives::{dino_loss, DinoState};
use crate::rng::derive_rng;
use crate::tensor::gradcheck::{
    check_fn, random_input, GradCheckCase, GradCheckReport, GradCheckSettings,
};
use crate::tensor::Tensor;
use rand::Rng;

/// Coordinates sampled for the desk-scale composed check. Each coordinate
/// costs two forward passes of the desk model, about 0.3s on one core, so
/// the full budget is sized to keep the whole suite under five minutes.
const FULL_SAMPLED_COORDS: usize = 600;
const QUICK_SAMPLED_COORDS: usize = 256;

fn basic() -> GradCheckSettings {
    GradCheckSettings::default()
}

fn split2(
    x: &Tensor<f64>,
    r1: usize,
    c1: usize,
    r2: usize,
    c2: usize,
) -> Result<(Tensor<f64>, Tensor<f64>)> {
    let a = x.slice(0..1, 0..r1 * c1)?.reshape(r1, c1)?;
    let b = x.slice(0..1, r1 * c1..r1 * c1 + r2 * c2)?.reshape(r2, c2)?;
    Ok((a, b))
}

fn primitive_cases() -> Result<Vec<GradCheckCase>> {
    let mut cases = Vec::new();

    cases.push(check_fn("matmul", &random_input(101, 0, 20), 1, 20, &basic(), |x| {
        let (a, b) = split2(x, 3, 4, 4, 2)?;
        a.matmul(&b)
    })?);

    cases.push(check_fn("add", &random_input(102, 0, 24), 1, 24, &basic(), |x| {
        let (a, b) = split2(x, 3, 4, 3, 4)?;
        a.add(&b)
    })?);

    cases.push(check_fn("sub", &random_input(103, 0, 24), 1, 24, &basic(), |x| {
        let (a, b) = split2(x, 3, 4, 3, 4)?;
        a.sub(&b)
    })?);

    cases.push(check_fn("mul", &random_input(104, 0, 24), 1, 24, &basic(), |x| {
        let (a, b) = split2(x, 3, 4, 3, 4)?;
        a.mul(&b)
    })?);

    cases.push(check_fn("scale", &random_input(105, 0, 20), 4, 5, &basic(), |x| {
        Ok(x.scale(1.7))
    })?);

    cases.push(check_fn("add_rows", &random_input(106, 0, 20), 1, 20, &basic(), |x| {
        let (m, bias) = split2(x, 3, 5, 1, 5)?;
        m.add_rows(&bias)
    })?);

    cases.push(check_fn("gelu", &random_input(107, 0, 24), 4, 6, &basic(), |x| Ok(x.gelu()))?);

    cases.push(check_fn("layer_norm", &random_input(108, 0, 48), 1, 48, &basic(), |x| {
        let m = x.slice(0..1, 0..32)?.reshape(4, 8)?;
        let gamma = x.slice(0..1, 32..40)?;
        let beta = x.slice(0..1, 40..48)?;
        m.layer_norm(&gamma, &beta, 1e-6)
    })?);

    cases.push(check_fn("softmax", &random_input(109, 0, 21), 3, 7, &basic(), |x| {
        x.softmax_t(0.1)
    })?);

    cases.push(check_fn("log_softmax", &random_input(110, 0, 21), 3, 7, &basic(), |x| {
        x.log_softmax_t(0.04)
    })?);

    cases.push(check_fn("log", &random_input(111, 0, 12), 3, 4, &basic(), |x| {
        let shift = Tensor::constant(vec![1.5; 12], 3, 4)?;
        x.mul(x)?.add(&shift)?.ln()
    })?);

    cases.push(check_fn("exp", &random_input(112, 0, 15), 3, 5, &basic(), |x| Ok(x.exp()))?);

    cases.push(check_fn("sum", &random_input(113, 0, 18), 3, 6, &basic(), |x| Ok(x.sum_all()))?);

    cases.push(check_fn("mean", &random_input(114, 0, 18), 3, 6, &basic(), |x| {
        Ok(x.mean_all())
    })?);

    cases.push(check_fn("row_sum", &random_input(115, 0, 18), 3, 6, &basic(), |x| {
        Ok(x.row_sum())
    })?);

    cases.push(check_fn("concat_rows", &random_input(116, 0, 24), 1, 24, &basic(), |x| {
        let (a, b) = split2(x, 2, 6, 2, 6)?;
        Tensor::concat_rows(&[a, b])
    })?);

    cases.push(check_fn("concat_cols", &random_input(117, 0, 18), 1, 18, &basic(), |x| {
        let (a, b) = split2(x, 3, 4, 3, 2)?;
        Tensor::concat_cols(&[a, b])
    })?);

    cases.push(check_fn("slice", &random_input(118, 0, 24), 4, 6, &basic(), |x| {
        x.slice(1..3, 2..5)
    })?);

    cases.push(check_fn("transpose_reshape", &random_input(119, 0, 12), 3, 4, &basic(), |x| {
        Ok(x.transpose().reshape(2, 6)?.gelu())
    })?);

    cases.push(check_fn("row_l2_normalize", &random_input(120, 0, 20), 5, 4, &basic(), |x| {
        Ok(x.row_l2_normalize(1e-6))
    })?);

    let mut rng = derive_rng(121, "suite-bce", &[]);
    let targets: Vec<f64> = (0..12).map(|_| if rng.random_range(0.0..1.0) < 0.4 { 1.0 } else { 0.0 }).collect();
    let weights: Vec<f64> = (0..4).map(|_| rng.random_range(0.5..4.0)).collect();
    cases.push(check_fn("weighted_bce", &random_input(121, 0, 12), 3, 4, &basic(), move |x| {
        let t = Tensor::constant(targets.clone(), 3, 4)?;
        let w = Tensor::constant(weights.clone(), 1, 4)?;
        x.weighted_bce_mean(&t, &w)
    })?);

    Ok(cases)
}

fn random_images(n: usize, size: usize, seed: u64) -> Result<Vec<Image>> {
    let mut rng = derive_rng(seed, "suite-images", &[n as u64, size as u64]);
    (0..n)
        .map(|_| {
            let data: Vec<f32> = (0..size * size * 3).map(|_| rng.random_range(0.0..1.0)).collect();
            Image::new(size, size, data)
        })
        .collect()
}

/// Seeded offset applied to every parameter before a composed check. At the
/// 0.02-scale training init the projector bottleneck has norm around 1e-4,
/// which puts its l2 normalization near the singular point (finite
/// differences then see third derivatives of order 1/norm^3), while
/// attention weights see gradients near the central-difference noise floor.
/// The offset moves the check to a generic operating point with O(1)
/// activations; the backward pass being verified is the same.
fn jittered_flat(params: &crate::model::ParamSet, seed: u64) -> Vec<f64> {
    let mut flat: Vec<f64> = params.flat_values().iter().map(|&v| v as f64).collect();
    let mut rng = derive_rng(seed, "suite-jitter", &[flat.len() as u64]);
    for v in flat.iter_mut() {
        *v += rng.random_range(-0.3..0.3);
    }
    flat
}

/// Seeded coefficients for a linear anchor term added to the composed
/// objective. Some coordinates have a structurally zero gradient (the key
/// bias cancels under softmax's shift invariance), where finite differences
/// measure only rounding noise of the loss; the anchor gives every
/// coordinate an O(1) gradient component without adding curvature, so
/// truncation error is unchanged and wiring mistakes in the backward pass
/// still appear as the same absolute disagreement.
fn anchor_coeffs(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = derive_rng(seed, "suite-anchor", &[n as u64]);
    (0..n)
        .map(|_| {
            let mag = rng.random_range(0.5..1.5);
            if rng.random_range(0..2u32) == 1 {
                mag
            } else {
                -mag
            }
        })
        .collect()
}

/// Gradient of the distillation loss, plus a seeded linear anchor, with
/// respect to every student parameter, with the teacher's logits held
/// constant. `sampled` limits the check to a seeded coordinate subset;
/// `None` checks all coordinates.
fn composed_case(
    name: &str,
    cfg: &ModelConfig,
    batch: usize,
    sampled: Option<usize>,
    seed: u64,
) -> Result<GradCheckCase> {
    let student = init_params(cfg, NetKind::pretrain(), seed)?;
    let teacher = init_params(cfg, NetKind::pretrain(), seed ^ 0x9e37_79b9)?;
    let layout = VitLayout::from_params(&student, cfg)?;

    let va = random_images(batch, cfg.image_size, seed)?;
    let vb = random_images(batch, cfg.image_size, seed ^ 1)?;
    let ta = patch_tokens_tensor::<f64>(&va, cfg)?;
    let tb = patch_tokens_tensor::<f64>(&vb, cfg)?;

    let t_flat = jittered_flat(&teacher, seed ^ 0x7ea);
    let t_base = Tensor::constant(t_flat.clone(), 1, t_flat.len())?;
    let teacher_t = teacher.tensors_from_flat(&t_base)?;
    let t_logits = [
        project(cfg, &layout, &teacher_t, &backbone_forward(cfg, &layout, &teacher_t, &ta, batch)?)?,
        project(cfg, &layout, &teacher_t, &backbone_forward(cfg, &layout, &teacher_t, &tb, batch)?)?,
    ];

    let mut rng = derive_rng(seed, "suite-center", &[cfg.prototypes as u64]);
    let center: Vec<f64> = (0..cfg.prototypes).map(|_| rng.random_range(-0.1..0.1)).collect();
    let state = DinoState {
        center,
        student_temp: 0.1,
        teacher_temp: 0.04,
        center_momentum: 0.9,
    };

    let flat = jittered_flat(&student, seed ^ 0x57d);
    let n = flat.len();
    let anchor = anchor_coeffs(n, seed);
    let settings = GradCheckSettings { max_coords: sampled, seed: seed ^ 0x51, ..basic() };
    let cfg = cfg.clone();
    check_fn(name, &flat, 1, n, &settings, move |x| {
        let tensors = student.tensors_from_flat(x)?;
        let ea = backbone_forward(&cfg, &layout, &tensors, &ta, batch)?;
        let eb = backbone_forward(&cfg, &layout, &tensors, &tb, batch)?;
        let s_logits = [
            project(&cfg, &layout, &tensors, &ea)?,
            project(&cfg, &layout, &tensors, &eb)?,
        ];
        let loss = dino_loss(&s_logits, &t_logits, &state)?;
        let r = Tensor::constant(anchor.clone(), 1, n)?;
        loss.add(&x.mul(&r)?.sum_all())
    })
}

/// A transformer small enough to gradient-check at every coordinate.
fn micro_config() -> ModelConfig {
    ModelConfig {
        image_size: 8,
        patch_size: 4,
        embed_dim: 16,
        depth: 1,
        heads: 2,
        mlp_ratio: 4.0,
        projector_hidden: 24,
        projector_out: 8,
        prototypes: 12,
        num_classes: 2,
    }
}

/// Every primitive plus the composed checks. `quick` shrinks only the
/// sampled-coordinate budget of the desk-scale case; coverage is identical.
pub fn standard_suite(quick: bool) -> Result<GradCheckReport> {
    let mut report = GradCheckReport::default();
    report.cases.extend(primitive_cases()?);
    report.cases.push(composed_case("vit_micro_dino_all_coords", &micro_config(), 2, None, 0xA11)?);
    let sampled = if quick { QUICK_SAMPLED_COORDS } else { FULL_SAMPLED_COORDS };
    report.cases.push(composed_case(
        "vit_mu_dino_sampled",
        &ModelConfig::vit_mu(6),
        2,
        Some(sampled),
        0xB22,
    )?);
    Ok(report)
}
