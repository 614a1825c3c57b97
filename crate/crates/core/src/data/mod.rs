//! Dataset ingestion and on-disk table formats.
//!
//! A dataset is a CSV index `path,<code1>,...,<codeC>` with binary labels
//! plus an image root directory of PNG files. Score tables reuse the same
//! schema with real-valued entries. Embedding dumps are a small text format
//! (`dim = D` header, one whitespace-separated row per line).

pub mod synth;

use crate::augment::Image;
use crate::error::{CoreError, Result};
use crate::rng::derive_rng;
use rand::seq::SliceRandom;
use rand::Rng;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetEntry {
    /// Path as written in the CSV, resolved against the image root.
    pub rel_path: String,
    pub labels: Vec<u8>,
}

/// CSV-indexed multi-label image dataset.
#[derive(Debug, Clone)]
pub struct MultiLabelDataset {
    root: PathBuf,
    class_codes: Vec<String>,
    entries: Vec<DatasetEntry>,
}

impl MultiLabelDataset {
    pub(crate) fn from_parts(
        root: PathBuf,
        class_codes: Vec<String>,
        entries: Vec<DatasetEntry>,
    ) -> Result<MultiLabelDataset> {
        if class_codes.is_empty() {
            return Err(CoreError::invalid("dataset", "no class codes"));
        }
        for e in &entries {
            if e.labels.len() != class_codes.len() {
                return Err(CoreError::shape(
                    "dataset",
                    format!("{}: {} labels for {} classes", e.rel_path, e.labels.len(), class_codes.len()),
                ));
            }
        }
        Ok(MultiLabelDataset { root, class_codes, entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn class_codes(&self) -> &[String] {
        &self.class_codes
    }

    pub fn num_classes(&self) -> usize {
        self.class_codes.len()
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn entries(&self) -> &[DatasetEntry] {
        &self.entries
    }

    pub fn labels_row(&self, i: usize) -> &[u8] {
        &self.entries[i].labels
    }

    /// Row-major `(len, num_classes)` label matrix as floats.
    pub fn label_matrix(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.len() * self.num_classes());
        for e in &self.entries {
            out.extend(e.labels.iter().map(|&v| v as f32));
        }
        out
    }

    pub fn positives_per_class(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.num_classes()];
        for e in &self.entries {
            for (c, &v) in e.labels.iter().enumerate() {
                counts[c] += v as usize;
            }
        }
        counts
    }

    pub fn image_path(&self, i: usize) -> PathBuf {
        self.root.join(&self.entries[i].rel_path)
    }

    pub fn load_image(&self, i: usize) -> Result<Image> {
        load_png(&self.image_path(i))
    }

    /// Seeded selection of `ceil(fraction · len)` samples, keeping at least
    /// one positive per represented class while slots remain. The result
    /// preserves the original index order; the selection depends only on the
    /// label index, the fraction, and the seed.
    pub fn subsample(&self, fraction: f64, seed: u64) -> Result<MultiLabelDataset> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(CoreError::invalid(
                "subsample",
                format!("fraction must be in (0, 1], got {fraction}"),
            ));
        }
        if self.is_empty() {
            return Err(CoreError::invalid("subsample", "empty dataset"));
        }
        if fraction == 1.0 {
            return Ok(self.clone());
        }
        let n = self.len();
        let target = ((fraction * n as f64).ceil() as usize).clamp(1, n);
        let mut rng = derive_rng(seed, "subsample", &[n as u64, target as u64]);
        let mut selected = vec![false; n];
        let mut count = 0usize;

        // Stratification pass: cover each class that has positives.
        for c in 0..self.num_classes() {
            if count >= target {
                break;
            }
            let covered = (0..n).any(|i| selected[i] && self.entries[i].labels[c] == 1);
            if covered {
                continue;
            }
            let positives: Vec<usize> =
                (0..n).filter(|&i| !selected[i] && self.entries[i].labels[c] == 1).collect();
            if positives.is_empty() {
                continue;
            }
            let pick = positives[rng.random_range(0..positives.len())];
            selected[pick] = true;
            count += 1;
        }

        // Fill the remaining slots uniformly at random.
        let mut rest: Vec<usize> = (0..n).filter(|&i| !selected[i]).collect();
        rest.shuffle(&mut rng);
        for &i in rest.iter().take(target - count) {
            selected[i] = true;
        }

        let entries: Vec<DatasetEntry> = (0..n)
            .filter(|&i| selected[i])
            .map(|i| self.entries[i].clone())
            .collect();
        MultiLabelDataset::from_parts(self.root.clone(), self.class_codes.clone(), entries)
    }
}

fn parse_header(record: &csv::StringRecord, path: &Path) -> Result<Vec<String>> {
    let mut fields = record.iter();
    match fields.next() {
        Some("path") => {}
        other => {
            return Err(CoreError::malformed(
                path,
                format!("header must start with `path`, got {other:?}"),
            ))
        }
    }
    let codes: Vec<String> = fields.map(str::to_string).collect();
    if codes.is_empty() {
        return Err(CoreError::malformed(path, "header has no class codes"));
    }
    for c in &codes {
        if c.is_empty() {
            return Err(CoreError::malformed(path, "empty class code in header"));
        }
    }
    if codes.iter().collect::<std::collections::HashSet<_>>().len() != codes.len() {
        return Err(CoreError::malformed(path, "duplicate class codes in header"));
    }
    Ok(codes)
}

fn read_rows<T>(
    path: &Path,
    mut parse: impl FnMut(&str, usize) -> Result<T>,
) -> Result<(Vec<String>, Vec<String>, Vec<Vec<T>>)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| CoreError::malformed(path, e.to_string()))?;
    let mut records = reader.records();
    let header = match records.next() {
        Some(Ok(r)) => r,
        Some(Err(e)) => return Err(CoreError::malformed(path, e.to_string())),
        None => return Err(CoreError::malformed(path, "empty file")),
    };
    let codes = parse_header(&header, path)?;
    let mut paths = Vec::new();
    let mut rows = Vec::new();
    for (idx, record) in records.enumerate() {
        let row_no = idx + 2; // header is row 1
        let record = record.map_err(|e| CoreError::malformed(path, format!("row {row_no}: {e}")))?;
        if record.len() != codes.len() + 1 {
            return Err(CoreError::malformed(
                path,
                format!("row {row_no}: {} fields, expected {}", record.len(), codes.len() + 1),
            ));
        }
        let rel = record.get(0).unwrap_or("");
        if rel.is_empty() {
            return Err(CoreError::malformed(path, format!("row {row_no}: empty path")));
        }
        let mut values = Vec::with_capacity(codes.len());
        for field in record.iter().skip(1) {
            values.push(parse(field, row_no)?);
        }
        paths.push(rel.to_string());
        rows.push(values);
    }
    if rows.is_empty() {
        return Err(CoreError::malformed(path, "empty dataset (header only)"));
    }
    Ok((codes, paths, rows))
}

/// Binary label table: same schema as the dataset index, no file checks.
#[derive(Debug, Clone)]
pub struct LabelTable {
    pub codes: Vec<String>,
    pub paths: Vec<String>,
    /// Row-major `(paths.len(), codes.len())`.
    pub labels: Vec<u8>,
}

pub fn load_label_table(path: &Path) -> Result<LabelTable> {
    let (codes, paths, rows) = read_rows(path, |field, row_no| match field {
        "0" => Ok(0u8),
        "1" => Ok(1u8),
        other => Err(CoreError::malformed(
            path,
            format!("row {row_no}: label {other:?} is not 0 or 1"),
        )),
    })?;
    let labels = rows.into_iter().flatten().collect();
    Ok(LabelTable { codes, paths, labels })
}

/// Real-valued score table with the dataset CSV schema.
#[derive(Debug, Clone)]
pub struct ScoreTable {
    pub codes: Vec<String>,
    pub paths: Vec<String>,
    /// Row-major `(paths.len(), codes.len())`.
    pub scores: Vec<f64>,
}

pub fn load_score_table(path: &Path) -> Result<ScoreTable> {
    let (codes, paths, rows) = read_rows(path, |field, row_no| {
        field
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| {
                CoreError::malformed(path, format!("row {row_no}: bad score {field:?}"))
            })
    })?;
    let scores = rows.into_iter().flatten().collect();
    Ok(ScoreTable { codes, paths, scores })
}

pub fn save_score_table(
    path: &Path,
    codes: &[String],
    paths: &[String],
    scores: &[f64],
) -> Result<()> {
    if scores.len() != codes.len() * paths.len() {
        return Err(CoreError::shape(
            "score table",
            format!("{} scores for {} rows x {} classes", scores.len(), paths.len(), codes.len()),
        ));
    }
    let file = std::fs::File::create(path).map_err(|e| CoreError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e: std::io::Error| CoreError::io(path, e);
    writeln!(w, "path,{}", codes.join(",")).map_err(io_err)?;
    for (i, p) in paths.iter().enumerate() {
        let row: Vec<String> = scores[i * codes.len()..(i + 1) * codes.len()]
            .iter()
            .map(|v| format!("{v}"))
            .collect();
        writeln!(w, "{p},{}", row.join(",")).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

/// Load a dataset index and verify every referenced image file exists.
pub fn load_dataset(csv_path: &Path, image_root: &Path) -> Result<MultiLabelDataset> {
    let table = load_label_table(csv_path)?;
    let c = table.codes.len();
    let mut entries = Vec::with_capacity(table.paths.len());
    for (i, rel) in table.paths.iter().enumerate() {
        let full = image_root.join(rel);
        if !full.is_file() {
            return Err(CoreError::malformed(
                csv_path,
                format!("row {}: image file {} not found", i + 2, full.display()),
            ));
        }
        entries.push(DatasetEntry {
            rel_path: rel.clone(),
            labels: table.labels[i * c..(i + 1) * c].to_vec(),
        });
    }
    MultiLabelDataset::from_parts(image_root.to_path_buf(), table.codes, entries)
}

/// Decode a PNG into float RGB in `[0, 1]`.
pub fn load_png(path: &Path) -> Result<Image> {
    let decoded = image::open(path)
        .map_err(|e| CoreError::malformed(path, format!("png decode: {e}")))?;
    let rgb = decoded.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let data = rgb.into_raw().iter().map(|&v| v as f32 / 255.0).collect();
    Image::new(h, w, data)
}

/// Quantize to 8-bit and write a PNG.
pub fn save_png(path: &Path, img: &Image) -> Result<()> {
    let bytes: Vec<u8> = img
        .data
        .iter()
        .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    let buffer = image::RgbImage::from_raw(img.width as u32, img.height as u32, bytes)
        .ok_or_else(|| CoreError::invalid("save_png", "buffer size mismatch"))?;
    buffer.save(path).map_err(|e| CoreError::malformed(path, format!("png encode: {e}")))
}

/// Write an embedding matrix: `dim = D` header, one row per line.
pub fn save_embeddings(path: &Path, values: &[f32], n: usize, d: usize) -> Result<()> {
    if values.len() != n * d || n == 0 || d == 0 {
        return Err(CoreError::shape(
            "embeddings",
            format!("{} values for {n}x{d}", values.len()),
        ));
    }
    let file = std::fs::File::create(path).map_err(|e| CoreError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e: std::io::Error| CoreError::io(path, e);
    writeln!(w, "dim={d}").map_err(io_err)?;
    for row in values.chunks(d) {
        let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        writeln!(w, "{}", line.join(",")).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

/// Read an embedding dump back as `(values, n, d)`.
pub fn load_embeddings(path: &Path) -> Result<(Vec<f64>, usize, usize)> {
    let file = std::fs::File::open(path).map_err(|e| CoreError::io(path, e))?;
    let reader = BufReader::new(file);
    let mut lines = reader.lines();
    let header = match lines.next() {
        Some(Ok(l)) => l,
        Some(Err(e)) => return Err(CoreError::io(path, e)),
        None => return Err(CoreError::malformed(path, "empty file")),
    };
    let d: usize = header
        .replace(' ', "")
        .strip_prefix("dim=")
        .and_then(|v| v.parse().ok())
        .filter(|&v| v > 0)
        .ok_or_else(|| CoreError::malformed(path, format!("bad header {header:?}")))?;
    let mut values = Vec::new();
    let mut n = 0usize;
    for (idx, line) in lines.enumerate() {
        let line = line.map_err(|e| CoreError::io(path, e))?;
        if line.is_empty() {
            continue;
        }
        let row: Vec<f64> = line
            .split(',')
            .map(|tok| tok.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| CoreError::malformed(path, format!("line {}: {e}", idx + 2)))?;
        if row.len() != d {
            return Err(CoreError::malformed(
                path,
                format!("line {}: {} values, expected {d}", idx + 2, row.len()),
            ));
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::malformed(path, format!("line {}: non-finite value", idx + 2)));
        }
        values.extend(row);
        n += 1;
    }
    if n == 0 {
        return Err(CoreError::malformed(path, "no embedding rows"));
    }
    Ok((values, n, d))
}
