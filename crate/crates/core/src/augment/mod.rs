//! Stochastic image pipelines: the pretraining view generator, the
//! fine-tuning augmentation, and the deterministic eval transform.
//!
//! Every pipeline consumes a caller-supplied RNG stream and is pure given
//! that stream, so identical seed material always reproduces the same
//! output no matter how samples are scheduled across workers. Random draws
//! happen in the fixed order the transforms are listed in, one gate draw
//! per probabilistic transform.

pub mod image;

pub use image::Image;

use crate::error::{CoreError, Result};
use crate::rng;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Pretraining view pipeline: random resized crop, color jitter, grayscale,
/// Gaussian blur, equalize, solarize, horizontal flip, normalize.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainAugment {
    /// Output spatial size (square).
    pub out_size: usize,
    /// Crop area fraction range for the random resized crop.
    pub crop_scale: (f64, f64),
    /// Crop aspect-ratio range (w/h), sampled log-uniformly.
    pub crop_ratio: (f64, f64),
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    /// Hue shift bound in turns (fraction of the color circle), at most 0.5.
    pub hue: f64,
    pub grayscale_p: f64,
    pub blur_p: f64,
    pub blur_sigma: (f64, f64),
    pub equalize_p: f64,
    pub solarize_p: f64,
    pub solarize_threshold: f32,
    pub hflip_p: f64,
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for PretrainAugment {
    fn default() -> Self {
        PretrainAugment::defaults(224)
    }
}

impl PretrainAugment {
    pub fn defaults(out_size: usize) -> Self {
        PretrainAugment {
            out_size,
            crop_scale: (0.5, 1.0),
            crop_ratio: (3.0 / 4.0, 4.0 / 3.0),
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.2,
            hue: 0.1,
            grayscale_p: 0.15,
            blur_p: 0.3,
            blur_sigma: (0.1, 1.0),
            equalize_p: 0.3,
            solarize_p: 0.3,
            solarize_threshold: 0.5,
            hflip_p: 0.5,
            mean: IMAGENET_MEAN,
            std: IMAGENET_STD,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.out_size == 0 {
            return Err(CoreError::invalid("augment", "out_size must be positive"));
        }
        check_range01("crop_scale", self.crop_scale)?;
        check_positive_range("crop_ratio", self.crop_ratio)?;
        check_positive_range("blur_sigma", self.blur_sigma)?;
        for (name, p) in [
            ("grayscale_p", self.grayscale_p),
            ("blur_p", self.blur_p),
            ("equalize_p", self.equalize_p),
            ("solarize_p", self.solarize_p),
            ("hflip_p", self.hflip_p),
        ] {
            check_prob(name, p)?;
        }
        for (name, s) in [
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("saturation", self.saturation),
        ] {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(CoreError::invalid("augment", format!("{name} must be >= 0")));
            }
        }
        if !(self.hue >= 0.0 && self.hue <= 0.5) {
            return Err(CoreError::invalid("augment", "hue must be in [0, 0.5]"));
        }
        if self.std.iter().any(|&s| s <= 0.0) {
            return Err(CoreError::invalid("augment", "std entries must be positive"));
        }
        Ok(())
    }
}

/// Fine-tuning pipeline: full resize, color jitter, horizontal flip,
/// equalize, autocontrast, small rotation, random erasing, normalize.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneAugment {
    pub out_size: usize,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
    pub hflip_p: f64,
    pub equalize_p: f64,
    pub autocontrast_p: f64,
    /// Rotation angle bound in degrees; the angle is sampled uniformly in
    /// `[-rotation_deg, rotation_deg]` and always applied.
    pub rotation_deg: f64,
    pub erase_p: f64,
    /// Erased-area fraction range of the whole image.
    pub erase_scale: (f64, f64),
    /// Erased-region aspect-ratio range (w/h), sampled log-uniformly.
    pub erase_ratio: (f64, f64),
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for FinetuneAugment {
    fn default() -> Self {
        FinetuneAugment::defaults(224)
    }
}

impl FinetuneAugment {
    pub fn defaults(out_size: usize) -> Self {
        FinetuneAugment {
            out_size,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.2,
            hue: 0.1,
            hflip_p: 0.5,
            equalize_p: 0.3,
            autocontrast_p: 0.3,
            rotation_deg: 5.0,
            erase_p: 0.5,
            erase_scale: (0.01, 0.05),
            erase_ratio: (0.1, 1.0),
            mean: IMAGENET_MEAN,
            std: IMAGENET_STD,
        }
    }

    /// All probabilities zero, jitter strengths zero, no rotation: the
    /// pipeline reduces to resize + normalize.
    pub fn identity(out_size: usize) -> Self {
        FinetuneAugment {
            out_size,
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            hue: 0.0,
            hflip_p: 0.0,
            equalize_p: 0.0,
            autocontrast_p: 0.0,
            rotation_deg: 0.0,
            erase_p: 0.0,
            erase_scale: (0.01, 0.05),
            erase_ratio: (0.1, 1.0),
            mean: IMAGENET_MEAN,
            std: IMAGENET_STD,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.out_size == 0 {
            return Err(CoreError::invalid("augment", "out_size must be positive"));
        }
        check_range01("erase_scale", self.erase_scale)?;
        check_positive_range("erase_ratio", self.erase_ratio)?;
        for (name, p) in [
            ("hflip_p", self.hflip_p),
            ("equalize_p", self.equalize_p),
            ("autocontrast_p", self.autocontrast_p),
            ("erase_p", self.erase_p),
        ] {
            check_prob(name, p)?;
        }
        for (name, s) in [
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("saturation", self.saturation),
        ] {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(CoreError::invalid("augment", format!("{name} must be >= 0")));
            }
        }
        if !(self.hue >= 0.0 && self.hue <= 0.5) {
            return Err(CoreError::invalid("augment", "hue must be in [0, 0.5]"));
        }
        if !(self.rotation_deg >= 0.0 && self.rotation_deg.is_finite()) {
            return Err(CoreError::invalid("augment", "rotation_deg must be >= 0"));
        }
        if self.std.iter().any(|&s| s <= 0.0) {
            return Err(CoreError::invalid("augment", "std entries must be positive"));
        }
        Ok(())
    }
}

pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

fn check_prob(name: &str, p: f64) -> Result<()> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(CoreError::invalid("augment", format!("{name} must be in [0,1], got {p}")))
    }
}

fn check_range01(name: &str, r: (f64, f64)) -> Result<()> {
    if r.0 > 0.0 && r.0 <= r.1 && r.1 <= 1.0 {
        Ok(())
    } else {
        Err(CoreError::invalid("augment", format!("{name} must satisfy 0 < lo <= hi <= 1")))
    }
}

fn check_positive_range(name: &str, r: (f64, f64)) -> Result<()> {
    if r.0 > 0.0 && r.0 <= r.1 && r.1.is_finite() {
        Ok(())
    } else {
        Err(CoreError::invalid("augment", format!("{name} must satisfy 0 < lo <= hi")))
    }
}

/// Which probabilistic transforms fired while building a pretraining view.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PretrainTrace {
    pub grayscale: bool,
    pub blur: bool,
    pub equalize: bool,
    pub solarize: bool,
    pub hflip: bool,
}

/// Which probabilistic transforms fired while fine-tune augmenting.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct FinetuneTrace {
    pub hflip: bool,
    pub equalize: bool,
    pub autocontrast: bool,
    pub erase: bool,
    pub angle_deg: f64,
    /// Actual erased-area fraction; 0 when no erase happened.
    pub erase_area_frac: f64,
}

#[inline]
fn uniform_or_const(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if lo < hi {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Sample a crop rectangle covering a `crop_scale` fraction of the area with
/// a log-uniform aspect ratio; after ten failed attempts fall back to the
/// largest centered crop with the aspect clamped into range.
fn sample_resized_crop(
    h: usize,
    w: usize,
    scale: (f64, f64),
    ratio: (f64, f64),
    rng: &mut ChaCha8Rng,
) -> (usize, usize, usize, usize) {
    let area = (h * w) as f64;
    for _ in 0..10 {
        let target = area * uniform_or_const(rng, scale.0, scale.1);
        let aspect = uniform_or_const(rng, ratio.0.ln(), ratio.1.ln()).exp();
        let cw = (target * aspect).sqrt().round() as usize;
        let ch = (target / aspect).sqrt().round() as usize;
        if cw >= 1 && ch >= 1 && cw <= w && ch <= h {
            let y0 = rng.random_range(0..=h - ch);
            let x0 = rng.random_range(0..=w - cw);
            return (y0, x0, ch, cw);
        }
    }
    let in_ratio = w as f64 / h as f64;
    let (ch, cw) = if in_ratio < ratio.0 {
        let cw = w;
        (((cw as f64 / ratio.0).round() as usize).clamp(1, h), cw)
    } else if in_ratio > ratio.1 {
        let ch = h;
        (ch, ((ch as f64 * ratio.1).round() as usize).clamp(1, w))
    } else {
        (h, w)
    };
    ((h - ch) / 2, (w - cw) / 2, ch, cw)
}

/// Apply brightness, contrast, saturation, then hue, each with a factor
/// drawn from the configured strength. Zero-strength components are skipped
/// entirely (no draw, no-op).
fn color_jitter(
    img: Image,
    brightness: f64,
    contrast: f64,
    saturation: f64,
    hue: f64,
    rng: &mut ChaCha8Rng,
) -> Image {
    let mut out = img;
    if brightness > 0.0 {
        let f = rng.random_range((1.0 - brightness).max(0.0)..1.0 + brightness);
        out = image::adjust_brightness(&out, f as f32);
    }
    if contrast > 0.0 {
        let f = rng.random_range((1.0 - contrast).max(0.0)..1.0 + contrast);
        out = image::adjust_contrast(&out, f as f32);
    }
    if saturation > 0.0 {
        let f = rng.random_range((1.0 - saturation).max(0.0)..1.0 + saturation);
        out = image::adjust_saturation(&out, f as f32);
    }
    if hue > 0.0 {
        let s = rng.random_range(-hue..hue);
        out = image::adjust_hue(&out, s as f32);
    }
    out
}

/// One augmented global view for self-distillation pretraining.
pub fn pretrain_view(img: &Image, cfg: &PretrainAugment, rng: &mut ChaCha8Rng) -> Result<Image> {
    pretrain_view_traced(img, cfg, rng).map(|(v, _)| v)
}

pub fn pretrain_view_traced(
    img: &Image,
    cfg: &PretrainAugment,
    rng: &mut ChaCha8Rng,
) -> Result<(Image, PretrainTrace)> {
    cfg.validate()?;
    if img.height < 2 || img.width < 2 {
        return Err(CoreError::invalid(
            "pretrain_view",
            format!("image {}x{} too small, need at least 2x2", img.height, img.width),
        ));
    }
    let mut trace = PretrainTrace::default();

    let (y0, x0, ch, cw) =
        sample_resized_crop(img.height, img.width, cfg.crop_scale, cfg.crop_ratio, rng);
    let mut out = image::resize_bicubic_region(
        img,
        y0 as f32,
        x0 as f32,
        ch as f32,
        cw as f32,
        cfg.out_size,
        cfg.out_size,
    )?;

    out = color_jitter(out, cfg.brightness, cfg.contrast, cfg.saturation, cfg.hue, rng);

    if rng.random_range(0.0..1.0) < cfg.grayscale_p {
        trace.grayscale = true;
        out = image::grayscale(&out);
    }
    if rng.random_range(0.0..1.0) < cfg.blur_p {
        trace.blur = true;
        let sigma = uniform_or_const(rng, cfg.blur_sigma.0, cfg.blur_sigma.1);
        out = image::gaussian_blur(&out, sigma as f32)?;
    }
    if rng.random_range(0.0..1.0) < cfg.equalize_p {
        trace.equalize = true;
        out = image::equalize(&out);
    }
    if rng.random_range(0.0..1.0) < cfg.solarize_p {
        trace.solarize = true;
        out = image::solarize(&out, cfg.solarize_threshold);
    }
    if rng.random_range(0.0..1.0) < cfg.hflip_p {
        trace.hflip = true;
        out = image::hflip(&out);
    }

    let out = image::normalize(&out, cfg.mean, cfg.std)?;
    Ok((out, trace))
}

/// Supervised-training augmentation over the full (uncropped) image.
pub fn finetune_augment(img: &Image, cfg: &FinetuneAugment, rng: &mut ChaCha8Rng) -> Result<Image> {
    finetune_augment_traced(img, cfg, rng).map(|(v, _)| v)
}

pub fn finetune_augment_traced(
    img: &Image,
    cfg: &FinetuneAugment,
    rng: &mut ChaCha8Rng,
) -> Result<(Image, FinetuneTrace)> {
    cfg.validate()?;
    let mut trace = FinetuneTrace::default();

    let mut out = image::resize_bicubic(img, cfg.out_size, cfg.out_size)?;
    out = color_jitter(out, cfg.brightness, cfg.contrast, cfg.saturation, cfg.hue, rng);

    if rng.random_range(0.0..1.0) < cfg.hflip_p {
        trace.hflip = true;
        out = image::hflip(&out);
    }
    if rng.random_range(0.0..1.0) < cfg.equalize_p {
        trace.equalize = true;
        out = image::equalize(&out);
    }
    if rng.random_range(0.0..1.0) < cfg.autocontrast_p {
        trace.autocontrast = true;
        out = image::autocontrast(&out);
    }
    if cfg.rotation_deg > 0.0 {
        let angle = rng.random_range(-cfg.rotation_deg..cfg.rotation_deg);
        trace.angle_deg = angle;
        out = image::rotate(&out, angle as f32);
    }
    if rng.random_range(0.0..1.0) < cfg.erase_p {
        let area = (out.height * out.width) as f64;
        for _ in 0..10 {
            let frac = uniform_or_const(rng, cfg.erase_scale.0, cfg.erase_scale.1);
            let aspect = uniform_or_const(rng, cfg.erase_ratio.0.ln(), cfg.erase_ratio.1.ln()).exp();
            let target = area * frac;
            let eh = (target / aspect).sqrt().round() as usize;
            let ew = (target * aspect).sqrt().round() as usize;
            if eh < 1 || ew < 1 || eh > out.height || ew > out.width {
                continue;
            }
            // Rounding may push the realized fraction outside the configured
            // band; only such rectangles are rejected.
            let got = (eh * ew) as f64 / area;
            if got < cfg.erase_scale.0 || got > cfg.erase_scale.1 {
                continue;
            }
            let y0 = rng.random_range(0..=out.height - eh);
            let x0 = rng.random_range(0..=out.width - ew);
            out = image::erase(&out, y0, x0, eh, ew);
            trace.erase = true;
            trace.erase_area_frac = got;
            break;
        }
    }

    let out = image::normalize(&out, cfg.mean, cfg.std)?;
    Ok((out, trace))
}

/// Deterministic resize + normalize used for validation and embedding dumps.
pub fn eval_transform(img: &Image, out_size: usize, mean: [f32; 3], std: [f32; 3]) -> Result<Image> {
    let resized = image::resize_bicubic(img, out_size, out_size)?;
    image::normalize(&resized, mean, std)
}

/// The two independent full-resolution global views for one sample. View
/// streams are derived from (seed, sample, epoch, view), so each view is
/// reproducible regardless of batch order or worker scheduling.
pub fn make_global_views(
    img: &Image,
    cfg: &PretrainAugment,
    seed: u64,
    sample: u64,
    epoch: u64,
) -> Result<(Image, Image)> {
    let mut rng_a = rng::view_rng(seed, sample, epoch, 0);
    let mut rng_b = rng::view_rng(seed, sample, epoch, 1);
    let a = pretrain_view(img, cfg, &mut rng_a)?;
    let b = pretrain_view(img, cfg, &mut rng_b)?;
    Ok((a, b))
}
