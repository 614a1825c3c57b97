//! Deterministic raster operations on float RGB images.
//!
//! All operations are pure functions. Pixels live in HWC order; values are
//! in `[0, 1]` before normalization and every op that could overshoot clamps
//! back into that range.

use crate::error::{CoreError, Result};

/// H x W x 3 image, row-major HWC, `f32` channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Image> {
        if data.len() != height * width * 3 {
            return Err(CoreError::shape(
                "image",
                format!("{} values for {height} x {width} x 3", data.len()),
            ));
        }
        Ok(Image { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Image {
        Image { height, width, data: vec![value; height * width * 3] }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * 3 + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * 3 + c] = v;
    }

    /// Rec. 601 luma of one pixel.
    #[inline]
    pub fn luma(&self, y: usize, x: usize) -> f32 {
        0.299 * self.get(y, x, 0) + 0.587 * self.get(y, x, 1) + 0.114 * self.get(y, x, 2)
    }
}

#[inline]
fn clamp01(v: f32) -> f32 {
    v.clamp(0.0, 1.0)
}

/// Catmull-Rom cubic kernel (`a = -0.5`), the classic bicubic weight.
fn cubic_weight(x: f32) -> f32 {
    const A: f32 = -0.5;
    let x = x.abs();
    if x < 1.0 {
        (A + 2.0) * x * x * x - (A + 3.0) * x * x + 1.0
    } else if x < 2.0 {
        A * x * x * x - 5.0 * A * x * x + 8.0 * A * x - 4.0 * A
    } else {
        0.0
    }
}

/// Bicubic resample of a source rectangle (`sy0..sy0+sh`, `sx0..sx0+sw`) to
/// `oh x ow`. Source taps outside the image clamp to the edge; outputs clamp
/// to `[0, 1]`.
pub fn resize_bicubic_region(
    img: &Image,
    sy0: f32,
    sx0: f32,
    sh: f32,
    sw: f32,
    oh: usize,
    ow: usize,
) -> Result<Image> {
    if oh == 0 || ow == 0 || sh <= 0.0 || sw <= 0.0 {
        return Err(CoreError::invalid("resize", "empty source or target"));
    }
    let mut out = Image::filled(oh, ow, 0.0);
    let scale_y = sh / oh as f32;
    let scale_x = sw / ow as f32;
    let h = img.height as isize;
    let w = img.width as isize;
    for oy in 0..oh {
        // Pixel-center mapping: output center (oy + 0.5) lands at the
        // corresponding source center.
        let src_y = sy0 + (oy as f32 + 0.5) * scale_y - 0.5;
        let y_base = src_y.floor() as isize;
        let fy = src_y - y_base as f32;
        let wy: [f32; 4] = [
            cubic_weight(fy + 1.0),
            cubic_weight(fy),
            cubic_weight(fy - 1.0),
            cubic_weight(fy - 2.0),
        ];
        for ox in 0..ow {
            let src_x = sx0 + (ox as f32 + 0.5) * scale_x - 0.5;
            let x_base = src_x.floor() as isize;
            let fx = src_x - x_base as f32;
            let wx: [f32; 4] = [
                cubic_weight(fx + 1.0),
                cubic_weight(fx),
                cubic_weight(fx - 1.0),
                cubic_weight(fx - 2.0),
            ];
            let mut acc = [0.0f32; 3];
            for (i, &wyv) in wy.iter().enumerate() {
                let sy = (y_base - 1 + i as isize).clamp(0, h - 1) as usize;
                for (j, &wxv) in wx.iter().enumerate() {
                    let sx = (x_base - 1 + j as isize).clamp(0, w - 1) as usize;
                    let weight = wyv * wxv;
                    for (ch, a) in acc.iter_mut().enumerate() {
                        *a += weight * img.get(sy, sx, ch);
                    }
                }
            }
            for (ch, a) in acc.iter().enumerate() {
                out.set(oy, ox, ch, clamp01(*a));
            }
        }
    }
    Ok(out)
}

pub fn resize_bicubic(img: &Image, oh: usize, ow: usize) -> Result<Image> {
    resize_bicubic_region(img, 0.0, 0.0, img.height as f32, img.width as f32, oh, ow)
}

pub fn hflip(img: &Image) -> Image {
    let mut out = Image::filled(img.height, img.width, 0.0);
    for y in 0..img.height {
        for x in 0..img.width {
            for c in 0..3 {
                out.set(y, x, c, img.get(y, img.width - 1 - x, c));
            }
        }
    }
    out
}

pub fn adjust_brightness(img: &Image, factor: f32) -> Image {
    let data = img.data.iter().map(|&v| clamp01(v * factor)).collect();
    Image { height: img.height, width: img.width, data }
}

/// Blend toward the mean luma of the whole image.
pub fn adjust_contrast(img: &Image, factor: f32) -> Image {
    let mut mean = 0.0f64;
    for y in 0..img.height {
        for x in 0..img.width {
            mean += img.luma(y, x) as f64;
        }
    }
    mean /= (img.height * img.width) as f64;
    let mean = mean as f32;
    let data = img.data.iter().map(|&v| clamp01(mean + factor * (v - mean))).collect();
    Image { height: img.height, width: img.width, data }
}

/// Blend each pixel toward its own luma.
pub fn adjust_saturation(img: &Image, factor: f32) -> Image {
    let mut out = img.clone();
    for y in 0..img.height {
        for x in 0..img.width {
            let l = img.luma(y, x);
            for c in 0..3 {
                out.set(y, x, c, clamp01(l + factor * (img.get(y, x, c) - l)));
            }
        }
    }
    out
}

fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        (b - r) / delta + 2.0
    } else {
        (r - g) / delta + 4.0
    } / 6.0;
    let s = if max == 0.0 { 0.0 } else { delta / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let c = v * s;
    let x = c * (1.0 - (h6.rem_euclid(2.0) - 1.0).abs());
    let m = v - c;
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    (r + m, g + m, b + m)
}

/// Rotate hue by `shift` turns (fraction of the full circle).
pub fn adjust_hue(img: &Image, shift: f32) -> Image {
    let mut out = img.clone();
    for y in 0..img.height {
        for x in 0..img.width {
            let (h, s, v) = rgb_to_hsv(img.get(y, x, 0), img.get(y, x, 1), img.get(y, x, 2));
            let (r, g, b) = hsv_to_rgb(h + shift, s, v);
            out.set(y, x, 0, clamp01(r));
            out.set(y, x, 1, clamp01(g));
            out.set(y, x, 2, clamp01(b));
        }
    }
    out
}

pub fn grayscale(img: &Image) -> Image {
    let mut out = img.clone();
    for y in 0..img.height {
        for x in 0..img.width {
            let l = clamp01(img.luma(y, x));
            for c in 0..3 {
                out.set(y, x, c, l);
            }
        }
    }
    out
}

/// Separable Gaussian blur; kernel radius `ceil(3σ)`, edges replicate.
pub fn gaussian_blur(img: &Image, sigma: f32) -> Result<Image> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(CoreError::invalid("gaussian_blur", format!("sigma {sigma}")));
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    let denom = 2.0 * sigma * sigma;
    for i in -radius..=radius {
        kernel.push((-(i * i) as f32 / denom).exp());
    }
    let total: f32 = kernel.iter().sum();
    for k in kernel.iter_mut() {
        *k /= total;
    }

    let (h, w) = (img.height as isize, img.width as isize);
    let mut horizontal = Image::filled(img.height, img.width, 0.0);
    for y in 0..img.height {
        for x in 0..img.width {
            let mut acc = [0.0f32; 3];
            for (i, &kv) in kernel.iter().enumerate() {
                let sx = (x as isize + i as isize - radius).clamp(0, w - 1) as usize;
                for (c, a) in acc.iter_mut().enumerate() {
                    *a += kv * img.get(y, sx, c);
                }
            }
            for (c, a) in acc.iter().enumerate() {
                horizontal.set(y, x, c, *a);
            }
        }
    }
    let mut out = Image::filled(img.height, img.width, 0.0);
    for y in 0..img.height {
        for x in 0..img.width {
            let mut acc = [0.0f32; 3];
            for (i, &kv) in kernel.iter().enumerate() {
                let sy = (y as isize + i as isize - radius).clamp(0, h - 1) as usize;
                for (c, a) in acc.iter_mut().enumerate() {
                    *a += kv * horizontal.get(sy, x, c);
                }
            }
            for (c, a) in acc.iter().enumerate() {
                out.set(y, x, c, clamp01(*a));
            }
        }
    }
    Ok(out)
}

fn channel_histogram(img: &Image, c: usize) -> [u32; 256] {
    let mut hist = [0u32; 256];
    for y in 0..img.height {
        for x in 0..img.width {
            let q = (img.get(y, x, c) * 255.0).round().clamp(0.0, 255.0) as usize;
            hist[q] += 1;
        }
    }
    hist
}

/// Histogram equalization per channel on 256 bins of the `[0,1]` range,
/// using the classic CDF remap `lut[i] = 255·(cdf[i] − cdf_min)/(N − cdf_min)`.
pub fn equalize(img: &Image) -> Image {
    let mut out = img.clone();
    let total = (img.height * img.width) as u32;
    for c in 0..3 {
        let hist = channel_histogram(img, c);
        let mut cdf = [0u32; 256];
        let mut run = 0u32;
        for i in 0..256 {
            run += hist[i];
            cdf[i] = run;
        }
        let cdf_min = cdf.iter().copied().find(|&v| v > 0).unwrap_or(0);
        if cdf_min == total {
            continue; // constant channel stays as-is
        }
        let denom = (total - cdf_min) as f32;
        let mut lut = [0f32; 256];
        for i in 0..256 {
            let v = (cdf[i].saturating_sub(cdf_min)) as f32 / denom;
            lut[i] = (v * 255.0).round() / 255.0;
        }
        for y in 0..img.height {
            for x in 0..img.width {
                let q = (img.get(y, x, c) * 255.0).round().clamp(0.0, 255.0) as usize;
                out.set(y, x, c, clamp01(lut[q]));
            }
        }
    }
    out
}

/// Stretch each channel so its occupied 256-bin range spans `[0,1]`.
pub fn autocontrast(img: &Image) -> Image {
    let mut out = img.clone();
    for c in 0..3 {
        let hist = channel_histogram(img, c);
        let lo = hist.iter().position(|&v| v > 0).unwrap_or(0);
        let hi = hist.iter().rposition(|&v| v > 0).unwrap_or(0);
        if hi <= lo {
            continue;
        }
        let span = (hi - lo) as f32;
        for y in 0..img.height {
            for x in 0..img.width {
                let q = (img.get(y, x, c) * 255.0).round().clamp(0.0, 255.0) as f32;
                out.set(y, x, c, clamp01((q - lo as f32) / span));
            }
        }
    }
    out
}

/// Invert every value at or above the threshold.
pub fn solarize(img: &Image, threshold: f32) -> Image {
    let data = img
        .data
        .iter()
        .map(|&v| if v >= threshold { clamp01(1.0 - v) } else { v })
        .collect();
    Image { height: img.height, width: img.width, data }
}

/// Rotate about the image center by `angle_deg`, bilinear sampling,
/// out-of-bounds filled with 0.
pub fn rotate(img: &Image, angle_deg: f32) -> Image {
    let mut out = Image::filled(img.height, img.width, 0.0);
    let theta = angle_deg.to_radians();
    let (sin_t, cos_t) = theta.sin_cos();
    let cy = (img.height as f32 - 1.0) / 2.0;
    let cx = (img.width as f32 - 1.0) / 2.0;
    let h = img.height as isize;
    let w = img.width as isize;
    for y in 0..img.height {
        for x in 0..img.width {
            // Inverse rotation of the output coordinate.
            let dy = y as f32 - cy;
            let dx = x as f32 - cx;
            let src_y = cy + dy * cos_t - dx * sin_t;
            let src_x = cx + dy * sin_t + dx * cos_t;
            let y0 = src_y.floor() as isize;
            let x0 = src_x.floor() as isize;
            let fy = src_y - y0 as f32;
            let fx = src_x - x0 as f32;
            let mut acc = [0.0f32; 3];
            let sample = |yy: isize, xx: isize, wgt: f32, acc: &mut [f32; 3]| {
                if yy >= 0 && yy < h && xx >= 0 && xx < w {
                    for (c, a) in acc.iter_mut().enumerate() {
                        *a += wgt * img.get(yy as usize, xx as usize, c);
                    }
                }
            };
            sample(y0, x0, (1.0 - fy) * (1.0 - fx), &mut acc);
            sample(y0, x0 + 1, (1.0 - fy) * fx, &mut acc);
            sample(y0 + 1, x0, fy * (1.0 - fx), &mut acc);
            sample(y0 + 1, x0 + 1, fy * fx, &mut acc);
            for (c, a) in acc.iter().enumerate() {
                out.set(y, x, c, clamp01(*a));
            }
        }
    }
    out
}

/// Zero-fill the rectangle `(y0..y0+h, x0..x0+w)`.
pub fn erase(img: &Image, y0: usize, x0: usize, h: usize, w: usize) -> Image {
    let mut out = img.clone();
    for y in y0..(y0 + h).min(img.height) {
        for x in x0..(x0 + w).min(img.width) {
            for c in 0..3 {
                out.set(y, x, c, 0.0);
            }
        }
    }
    out
}

/// Per-channel standardization `(v − mean)/std`; output leaves `[0,1]`.
pub fn normalize(img: &Image, mean: [f32; 3], std: [f32; 3]) -> Result<Image> {
    if std.iter().any(|&s| s <= 0.0) {
        return Err(CoreError::invalid("normalize", "std must be positive"));
    }
    let mut out = img.clone();
    for v in out.data.chunks_exact_mut(3) {
        for c in 0..3 {
            v[c] = (v[c] - mean[c]) / std[c];
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_rng;
    use rand::Rng;

    fn random_image(h: usize, w: usize, seed: u64) -> Image {
        let mut rng = derive_rng(seed, "raster-test", &[h as u64, w as u64]);
        let data = (0..h * w * 3).map(|_| rng.random_range(0.0..1.0f32)).collect();
        Image::new(h, w, data).unwrap()
    }

    #[test]
    fn resize_identity_when_sizes_match() {
        let img = random_image(9, 7, 1);
        let out = resize_bicubic(&img, 9, 7).unwrap();
        for (a, b) in img.data.iter().zip(&out.data) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn resize_constant_image_stays_constant() {
        let img = Image::filled(8, 8, 0.37);
        let out = resize_bicubic(&img, 5, 13).unwrap();
        for v in &out.data {
            assert!((v - 0.37).abs() < 1e-5);
        }
    }

    #[test]
    fn hflip_involution() {
        let img = random_image(6, 11, 2);
        assert_eq!(hflip(&hflip(&img)).data, img.data);
    }

    #[test]
    fn brightness_scales_and_clamps() {
        let img = Image::new(1, 2, vec![0.5, 0.5, 0.5, 0.9, 0.9, 0.9]).unwrap();
        let out = adjust_brightness(&img, 1.5);
        assert!((out.get(0, 0, 0) - 0.75).abs() < 1e-6);
        assert_eq!(out.get(0, 1, 0), 1.0);
    }

    #[test]
    fn contrast_factor_one_is_identity() {
        let img = random_image(5, 5, 3);
        let out = adjust_contrast(&img, 1.0);
        for (a, b) in img.data.iter().zip(&out.data) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn saturation_zero_is_grayscale() {
        let img = random_image(4, 4, 4);
        let desat = adjust_saturation(&img, 0.0);
        let gray = grayscale(&img);
        for (a, b) in desat.data.iter().zip(&gray.data) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn hue_full_turn_is_identity() {
        let img = random_image(4, 4, 5);
        let out = adjust_hue(&img, 1.0);
        for (a, b) in img.data.iter().zip(&out.data) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn blur_preserves_constant_images_and_mass() {
        let img = Image::filled(7, 7, 0.42);
        let out = gaussian_blur(&img, 0.8).unwrap();
        for v in &out.data {
            assert!((v - 0.42).abs() < 1e-5);
        }
    }

    #[test]
    fn equalize_spreads_two_level_histogram() {
        // Half dark, half mid-gray; equalization pushes levels apart.
        let mut data = vec![0.2f32; 4 * 4 * 3];
        for i in 0..(2 * 4 * 3) {
            data[i] = 0.3;
        }
        let img = Image::new(4, 4, data).unwrap();
        let out = equalize(&img);
        let lo = out.get(3, 0, 0);
        let hi = out.get(0, 0, 0);
        assert!(lo < hi);
        assert!((hi - 1.0).abs() < 1e-6, "top level maps to 1, got {hi}");
    }

    #[test]
    fn equalize_constant_image_unchanged() {
        let img = Image::filled(5, 5, 0.6);
        assert_eq!(equalize(&img).data, img.data);
    }

    #[test]
    fn autocontrast_stretches_range() {
        let img = Image::new(1, 3, vec![0.3; 3].into_iter().chain(vec![0.5; 3]).chain(vec![0.7; 3]).collect()).unwrap();
        let out = autocontrast(&img);
        assert!((out.get(0, 0, 0) - 0.0).abs() < 1e-6);
        assert!((out.get(0, 2, 0) - 1.0).abs() < 1e-6);
        assert!((out.get(0, 1, 0) - 0.5).abs() < 2e-2);
    }

    #[test]
    fn solarize_inverts_above_threshold() {
        let img = Image::new(1, 2, vec![0.2, 0.2, 0.2, 0.8, 0.8, 0.8]).unwrap();
        let out = solarize(&img, 0.5);
        assert_eq!(out.get(0, 0, 0), 0.2);
        assert!((out.get(0, 1, 0) - 0.2).abs() < 1e-6);
    }

    #[test]
    fn rotate_zero_is_identity() {
        let img = random_image(8, 8, 6);
        let out = rotate(&img, 0.0);
        for (a, b) in img.data.iter().zip(&out.data) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn erase_zeroes_the_rectangle_only() {
        let img = Image::filled(6, 6, 0.5);
        let out = erase(&img, 1, 2, 2, 3);
        let mut zeroed = 0;
        for y in 0..6 {
            for x in 0..6 {
                let inside = (1..3).contains(&y) && (2..5).contains(&x);
                let v = out.get(y, x, 0);
                if inside {
                    assert_eq!(v, 0.0);
                    zeroed += 1;
                } else {
                    assert_eq!(v, 0.5);
                }
            }
        }
        assert_eq!(zeroed, 6);
    }

    #[test]
    fn normalize_matches_definition() {
        let img = Image::filled(2, 2, 0.5);
        let out = normalize(&img, [0.485, 0.456, 0.406], [0.229, 0.224, 0.225]).unwrap();
        assert!((out.get(0, 0, 0) - (0.5 - 0.485) / 0.229).abs() < 1e-6);
        assert!((out.get(0, 0, 1) - (0.5 - 0.456) / 0.224).abs() < 1e-6);
    }
}
