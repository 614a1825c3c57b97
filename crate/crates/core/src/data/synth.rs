//! Seeded synthetic multi-label defect dataset generator.
//!
//! Images imitate sewer-inspection frames at desk scale: a gray circular
//! pipe background with per-class procedural defect glyphs. Labels always
//! match exactly what was drawn. Output layout: `images/NNNNN.png`,
//! `labels.csv`, `spec.json`.

use super::{load_dataset, save_png, MultiLabelDataset};
use crate::augment::Image;
use crate::error::{CoreError, Result};
use crate::rng::derive_rng;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

/// Procedural defect glyph families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DefectShape {
    /// Bright filled disc near the image center (the designated
    /// easy-to-separate class: its presence shifts center-region intensity).
    Blob,
    /// Dark jagged polyline across the frame.
    CrackLine,
    /// Bright annulus at a random position.
    Ring,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthClass {
    pub code: String,
    pub shape: DefectShape,
    /// Probability a defective sample carries this class.
    pub prevalence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub samples: usize,
    pub image_size: usize,
    pub classes: Vec<SynthClass>,
    /// Fraction of samples with all-zero labels; the exact count is
    /// `round(normal_fraction · samples)`.
    pub normal_fraction: f64,
    /// Uniform pixel noise amplitude.
    pub noise: f64,
    pub seed: u64,
}

impl SynthSpec {
    /// Six classes cycling through the three glyph families.
    pub fn default_desk(samples: usize, image_size: usize, seed: u64) -> SynthSpec {
        let shapes = [DefectShape::Blob, DefectShape::CrackLine, DefectShape::Ring];
        let codes = ["BL", "CR", "RG", "BL2", "CR2", "RG2"];
        let classes = codes
            .iter()
            .enumerate()
            .map(|(i, code)| SynthClass {
                code: code.to_string(),
                shape: shapes[i % 3],
                prevalence: 0.3,
            })
            .collect();
        SynthSpec { samples, image_size, classes, normal_fraction: 0.3, noise: 0.03, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            return Err(CoreError::invalid("synth spec", "samples must be positive"));
        }
        if self.image_size < 8 {
            return Err(CoreError::invalid("synth spec", "image_size must be at least 8"));
        }
        if self.classes.is_empty() {
            return Err(CoreError::invalid("synth spec", "no classes"));
        }
        let mut seen = std::collections::HashSet::new();
        for c in &self.classes {
            if c.code.is_empty() || c.code.contains(',') || !seen.insert(&c.code) {
                return Err(CoreError::invalid("synth spec", format!("bad class code {:?}", c.code)));
            }
            if !(c.prevalence > 0.0 && c.prevalence < 1.0) {
                return Err(CoreError::invalid(
                    "synth spec",
                    format!("{}: prevalence must be in (0,1)", c.code),
                ));
            }
        }
        if !(0.0..1.0).contains(&self.normal_fraction) {
            return Err(CoreError::invalid("synth spec", "normal_fraction must be in [0,1)"));
        }
        if !(0.0..=0.5).contains(&self.noise) {
            return Err(CoreError::invalid("synth spec", "noise must be in [0, 0.5]"));
        }
        Ok(())
    }
}

/// Radius of the fixed center region a Blob glyph brightens; a mean-intensity
/// statistic over this disc separates the Blob class.
pub fn blob_region_radius(image_size: usize) -> f64 {
    image_size as f64 / 5.0
}

fn draw_background(size: usize, rng: &mut ChaCha8Rng, noise: f64) -> Image {
    let mut img = Image::filled(size, size, 0.0);
    let c = (size as f32 - 1.0) / 2.0;
    let rmax = c * std::f32::consts::SQRT_2 + 1e-3;
    let base = 0.55 + rng.random_range(-0.05..0.05f32);
    for y in 0..size {
        for x in 0..size {
            let r = ((y as f32 - c).powi(2) + (x as f32 - c).powi(2)).sqrt() / rmax;
            // Darken toward the rim like a pipe interior lit from the camera.
            let v = base - 0.35 * r * r + rng.random_range(-noise..=noise) as f32;
            for ch in 0..3 {
                img.set(y, x, ch, v.clamp(0.0, 1.0));
            }
        }
    }
    img
}

fn add_at(img: &mut Image, y: isize, x: isize, delta: f32) {
    if y >= 0 && x >= 0 && (y as usize) < img.height && (x as usize) < img.width {
        for c in 0..3 {
            let v = img.get(y as usize, x as usize, c) + delta;
            img.set(y as usize, x as usize, c, v.clamp(0.0, 1.0));
        }
    }
}

fn draw_blob(img: &mut Image, rng: &mut ChaCha8Rng) {
    let size = img.height as f64;
    let c = (size - 1.0) / 2.0;
    let jitter = size / 16.0;
    let cy = c + rng.random_range(-jitter..jitter);
    let cx = c + rng.random_range(-jitter..jitter);
    let radius = size / 7.0 + rng.random_range(0.0..size / 20.0);
    let gain = 0.35 + rng.random_range(0.0..0.1f32);
    for y in 0..img.height {
        for x in 0..img.width {
            let d = ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)).sqrt();
            if d < radius {
                // Soft falloff at the boundary.
                let w = (1.0 - (d / radius).powi(4)) as f32;
                add_at(img, y as isize, x as isize, gain * w);
            }
        }
    }
}

fn draw_crack(img: &mut Image, rng: &mut ChaCha8Rng) {
    let size = img.height as f64;
    let mut y = rng.random_range(0.1 * size..0.9 * size);
    let mut x = 0.0f64;
    let mut dir = rng.random_range(-0.5..0.5f64);
    let depth = -(0.3 + rng.random_range(0.0..0.1f32));
    while x < size {
        let yi = y.round() as isize;
        let xi = x.round() as isize;
        add_at(img, yi, xi, depth);
        add_at(img, yi + 1, xi, depth * 0.5);
        dir += rng.random_range(-0.25..0.25f64);
        dir = dir.clamp(-1.0, 1.0);
        y = (y + dir).clamp(0.0, size - 1.0);
        x += 1.0;
    }
}

fn draw_ring(img: &mut Image, rng: &mut ChaCha8Rng) {
    let size = img.height as f64;
    let cy = rng.random_range(0.25 * size..0.75 * size);
    let cx = rng.random_range(0.25 * size..0.75 * size);
    let radius = size / 6.0 + rng.random_range(0.0..size / 12.0);
    let thickness = (size / 24.0).max(1.0);
    let gain = 0.25 + rng.random_range(0.0..0.1f32);
    for y in 0..img.height {
        for x in 0..img.width {
            let d = ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)).sqrt();
            if (d - radius).abs() < thickness {
                add_at(img, y as isize, x as isize, gain);
            }
        }
    }
}

fn render_sample(spec: &SynthSpec, labels: &[u8], rng: &mut ChaCha8Rng) -> Image {
    let mut img = draw_background(spec.image_size, rng, spec.noise);
    for (c, &on) in labels.iter().enumerate() {
        if on == 0 {
            continue;
        }
        match spec.classes[c].shape {
            DefectShape::Blob => draw_blob(&mut img, rng),
            DefectShape::CrackLine => draw_crack(&mut img, rng),
            DefectShape::Ring => draw_ring(&mut img, rng),
        }
    }
    img
}

/// Decide every sample's label vector. Normal samples are chosen by a seeded
/// shuffle so their count is exact; each defective sample draws classes by
/// prevalence and falls back to one uniformly chosen class if all miss.
fn assign_labels(spec: &SynthSpec) -> Vec<Vec<u8>> {
    let n = spec.samples;
    let c = spec.classes.len();
    let normal_count = (spec.normal_fraction * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut derive_rng(spec.seed, "synth-normals", &[n as u64]));
    let mut is_normal = vec![false; n];
    for &i in order.iter().take(normal_count) {
        is_normal[i] = true;
    }
    (0..n)
        .map(|i| {
            if is_normal[i] {
                return vec![0u8; c];
            }
            let mut rng = derive_rng(spec.seed, "synth-labels", &[i as u64]);
            let mut labels: Vec<u8> = (0..c)
                .map(|j| (rng.random_range(0.0..1.0) < spec.classes[j].prevalence) as u8)
                .collect();
            if labels.iter().all(|&v| v == 0) {
                labels[rng.random_range(0..c)] = 1;
            }
            labels
        })
        .collect()
}

/// Generate the dataset on disk and load it back through the validating
/// loader. Fully deterministic in (spec, seed).
pub fn generate_synthetic(spec: &SynthSpec, out_dir: &Path) -> Result<MultiLabelDataset> {
    spec.validate()?;
    let images_dir = out_dir.join("images");
    std::fs::create_dir_all(&images_dir).map_err(|e| CoreError::io(&images_dir, e))?;

    let labels = assign_labels(spec);
    let csv_path = out_dir.join("labels.csv");
    let file = std::fs::File::create(&csv_path).map_err(|e| CoreError::io(&csv_path, e))?;
    let mut csv = std::io::BufWriter::new(file);
    let io_err = |e: std::io::Error| CoreError::io(&csv_path, e);
    let codes: Vec<&str> = spec.classes.iter().map(|c| c.code.as_str()).collect();
    writeln!(csv, "path,{}", codes.join(",")).map_err(io_err)?;
    for (i, row) in labels.iter().enumerate() {
        let rel = format!("images/{i:05}.png");
        let mut rng = derive_rng(spec.seed, "synth-render", &[i as u64]);
        let img = render_sample(spec, row, &mut rng);
        save_png(&out_dir.join(&rel), &img)?;
        let fields: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(csv, "{rel},{}", fields.join(",")).map_err(io_err)?;
    }
    csv.flush().map_err(io_err)?;

    let spec_path = out_dir.join("spec.json");
    let spec_json = serde_json::to_string_pretty(spec)
        .map_err(|e| CoreError::invalid("synth spec", format!("serialization: {e}")))?;
    std::fs::write(&spec_path, spec_json + "\n").map_err(|e| CoreError::io(&spec_path, e))?;

    load_dataset(&csv_path, out_dir)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec_with_blob_first(n: usize, seed: u64) -> SynthSpec {
        SynthSpec {
            samples: n,
            image_size: 32,
            classes: vec![
                SynthClass { code: "BL".into(), shape: DefectShape::Blob, prevalence: 0.4 },
                SynthClass { code: "CR".into(), shape: DefectShape::CrackLine, prevalence: 0.4 },
                SynthClass { code: "RG".into(), shape: DefectShape::Ring, prevalence: 0.4 },
            ],
            normal_fraction: 0.3,
            noise: 0.03,
            seed,
        }
    }

    #[test]
    fn exact_normal_count() {
        let dir = tempfile::tempdir().unwrap();
        let mut spec = spec_with_blob_first(200, 5);
        spec.normal_fraction = 0.5;
        let ds = generate_synthetic(&spec, dir.path()).unwrap();
        assert_eq!(ds.len(), 200);
        let normals = ds
            .entries()
            .iter()
            .filter(|e| e.labels.iter().all(|&v| v == 0))
            .count();
        assert_eq!(normals, 100);
    }

    #[test]
    fn defective_samples_have_at_least_one_label() {
        let dir = tempfile::tempdir().unwrap();
        let mut spec = spec_with_blob_first(150, 6);
        // Low prevalence exercises the forced-one fallback.
        for c in spec.classes.iter_mut() {
            c.prevalence = 0.05;
        }
        let ds = generate_synthetic(&spec, dir.path()).unwrap();
        let normals = (spec.normal_fraction * 150.0).round() as usize;
        let defective = ds
            .entries()
            .iter()
            .filter(|e| e.labels.iter().any(|&v| v == 1))
            .count();
        assert_eq!(defective, 150 - normals);
    }

    #[test]
    fn same_spec_and_seed_identical_files() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let spec = spec_with_blob_first(20, 7);
        generate_synthetic(&spec, dir_a.path()).unwrap();
        generate_synthetic(&spec, dir_b.path()).unwrap();
        let csv_a = std::fs::read(dir_a.path().join("labels.csv")).unwrap();
        let csv_b = std::fs::read(dir_b.path().join("labels.csv")).unwrap();
        assert_eq!(csv_a, csv_b);
        for i in [0, 7, 19] {
            let a = std::fs::read(dir_a.path().join(format!("images/{i:05}.png"))).unwrap();
            let b = std::fs::read(dir_b.path().join(format!("images/{i:05}.png"))).unwrap();
            assert_eq!(a, b, "image {i} differs");
        }
        let different = SynthSpec { seed: 8, ..spec };
        let dir_c = tempfile::tempdir().unwrap();
        generate_synthetic(&different, dir_c.path()).unwrap();
        let img_a = std::fs::read(dir_a.path().join("images/00000.png")).unwrap();
        let img_c = std::fs::read(dir_c.path().join("images/00000.png")).unwrap();
        assert_ne!(img_a, img_c);
    }

    #[test]
    fn center_intensity_statistic_separates_the_blob_class() {
        let dir = tempfile::tempdir().unwrap();
        let spec = spec_with_blob_first(200, 9);
        let ds = generate_synthetic(&spec, dir.path()).unwrap();
        let radius = blob_region_radius(spec.image_size);
        let c = (spec.image_size as f64 - 1.0) / 2.0;

        // Hand-rolled baseline: mean intensity over the fixed center disc,
        // thresholded at the midpoint of the class-conditional means.
        let stats: Vec<(f64, bool)> = (0..ds.len())
            .map(|i| {
                let img = ds.load_image(i).unwrap();
                let mut sum = 0.0f64;
                let mut count = 0usize;
                for y in 0..img.height {
                    for x in 0..img.width {
                        let d = ((y as f64 - c).powi(2) + (x as f64 - c).powi(2)).sqrt();
                        if d < radius {
                            sum += img.luma(y, x) as f64;
                            count += 1;
                        }
                    }
                }
                (sum / count as f64, ds.labels_row(i)[0] == 1)
            })
            .collect();
        let mean_of = |positive: bool| {
            let vals: Vec<f64> =
                stats.iter().filter(|s| s.1 == positive).map(|s| s.0).collect();
            vals.iter().sum::<f64>() / vals.len() as f64
        };
        let threshold = (mean_of(true) + mean_of(false)) / 2.0;
        let correct = stats
            .iter()
            .filter(|(stat, label)| (*stat > threshold) == *label)
            .count();
        let accuracy = correct as f64 / stats.len() as f64;
        assert!(accuracy > 0.9, "blob separability only {accuracy}");
    }

    #[test]
    fn spec_validation_rejects_bad_fields() {
        let mut s = spec_with_blob_first(10, 1);
        s.normal_fraction = 1.0;
        assert!(s.validate().is_err());
        let mut s = spec_with_blob_first(10, 1);
        s.classes[0].prevalence = 0.0;
        assert!(s.validate().is_err());
        let mut s = spec_with_blob_first(10, 1);
        s.classes[1].code = "BL".into();
        assert!(s.validate().is_err());
        let mut s = spec_with_blob_first(10, 1);
        s.image_size = 4;
        assert!(s.validate().is_err());
    }

    #[test]
    fn spec_json_echo_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let spec = spec_with_blob_first(10, 2);
        generate_synthetic(&spec, dir.path()).unwrap();
        let text = std::fs::read_to_string(dir.path().join("spec.json")).unwrap();
        let back: SynthSpec = serde_json::from_str(&text).unwrap();
        assert_eq!(back, spec);
    }
}
