//! Versioned checkpoint container.
//!
//! Layout: a text header, one blank line, then named binary arrays.
//!
//! ```text
//! dino-forge-checkpoint
//! format_version = 1
//! mode = pretrain
//! epoch = 3
//! step = 120
//! seed = 42
//! config = {...one-line JSON ModelConfig...}
//!
//! tensor <name> <rows> <cols>
//! <rows·cols little-endian f32 values>
//! ...
//! end
//! ```
//!
//! Each `tensor` line is followed by exactly `rows·cols·4` raw bytes and a
//! newline. Array names carry a network prefix (`student.`, `teacher.`,
//! `opt.m.`, ...) so several parameter sets share one file.

use super::{ModelConfig, ParamSet};
use crate::error::{CoreError, Result};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "dino-forge-checkpoint";

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub mode: String,
    pub epoch: u64,
    pub step: u64,
    pub seed: u64,
    pub config: ModelConfig,
    pub arrays: Vec<NamedArray>,
}

impl Checkpoint {
    pub fn new(mode: impl Into<String>, epoch: u64, step: u64, seed: u64, config: ModelConfig) -> Self {
        Checkpoint { mode: mode.into(), epoch, step, seed, config, arrays: Vec::new() }
    }

    pub fn push_array(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        data: Vec<f32>,
    ) -> Result<()> {
        let name = name.into();
        if name.is_empty() || name.contains(char::is_whitespace) {
            return Err(CoreError::invalid("checkpoint", format!("bad array name {name:?}")));
        }
        if rows == 0 || cols == 0 || data.len() != rows * cols {
            return Err(CoreError::shape(
                "checkpoint",
                format!("{name}: {} values for {rows}x{cols}", data.len()),
            ));
        }
        if self.arrays.iter().any(|a| a.name == name) {
            return Err(CoreError::invalid("checkpoint", format!("duplicate array {name}")));
        }
        self.arrays.push(NamedArray { name, rows, cols, data });
        Ok(())
    }

    /// Append every entry of a parameter set under `prefix`.
    pub fn push_param_set(&mut self, prefix: &str, params: &ParamSet) -> Result<()> {
        for e in params.entries() {
            self.push_array(format!("{prefix}{}", e.name), e.rows, e.cols, e.data.clone())?;
        }
        Ok(())
    }

    pub fn array(&self, name: &str) -> Option<&NamedArray> {
        self.arrays.iter().find(|a| a.name == name)
    }

    /// Rebuild a parameter set whose layout (names, shapes, decay flags)
    /// comes from `template` and whose values come from the arrays stored
    /// under `prefix`.
    pub fn extract_param_set(&self, prefix: &str, template: &ParamSet) -> Result<ParamSet> {
        let mut out = template.clone();
        for e in out.entries_mut() {
            let stored = format!("{prefix}{}", e.name);
            let arr = self.array(&stored).ok_or_else(|| {
                CoreError::invalid("checkpoint", format!("missing array {stored}"))
            })?;
            if (arr.rows, arr.cols) != (e.rows, e.cols) {
                return Err(CoreError::shape(
                    "checkpoint",
                    format!(
                        "{stored}: stored {}x{}, expected {}x{}",
                        arr.rows, arr.cols, e.rows, e.cols
                    ),
                ));
            }
            e.data.copy_from_slice(&arr.data);
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| CoreError::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io_err = |e: std::io::Error| CoreError::io(path, e);
        let config_json = serde_json::to_string(&self.config)
            .map_err(|e| CoreError::invalid("checkpoint", format!("config serialization: {e}")))?;
        writeln!(w, "{MAGIC}").map_err(io_err)?;
        writeln!(w, "format_version = {FORMAT_VERSION}").map_err(io_err)?;
        writeln!(w, "mode = {}", self.mode).map_err(io_err)?;
        writeln!(w, "epoch = {}", self.epoch).map_err(io_err)?;
        writeln!(w, "step = {}", self.step).map_err(io_err)?;
        writeln!(w, "seed = {}", self.seed).map_err(io_err)?;
        writeln!(w, "config = {config_json}").map_err(io_err)?;
        writeln!(w).map_err(io_err)?;
        let mut buf = Vec::with_capacity(1 << 16);
        for a in &self.arrays {
            writeln!(w, "tensor {} {} {}", a.name, a.rows, a.cols).map_err(io_err)?;
            for chunk in a.data.chunks(1 << 14) {
                buf.clear();
                for v in chunk {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
                w.write_all(&buf).map_err(io_err)?;
            }
            writeln!(w).map_err(io_err)?;
        }
        writeln!(w, "end").map_err(io_err)?;
        w.flush().map_err(io_err)
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let file = File::open(path).map_err(|e| CoreError::io(path, e))?;
        let mut r = BufReader::new(file);
        let bad = |detail: String| CoreError::malformed(path, detail);

        let magic = read_line(&mut r, path)?;
        if magic != MAGIC {
            return Err(bad(format!("not a checkpoint file (first line {magic:?})")));
        }
        let version: u32 = parse_kv(&read_line(&mut r, path)?, "format_version", path)?;
        if version != FORMAT_VERSION {
            return Err(bad(format!("unsupported format_version {version}")));
        }
        let mode = parse_kv_raw(&read_line(&mut r, path)?, "mode", path)?;
        let epoch: u64 = parse_kv(&read_line(&mut r, path)?, "epoch", path)?;
        let step: u64 = parse_kv(&read_line(&mut r, path)?, "step", path)?;
        let seed: u64 = parse_kv(&read_line(&mut r, path)?, "seed", path)?;
        let config_json = parse_kv_raw(&read_line(&mut r, path)?, "config", path)?;
        let config: ModelConfig = serde_json::from_str(&config_json)
            .map_err(|e| bad(format!("config JSON: {e}")))?;
        let blank = read_line(&mut r, path)?;
        if !blank.is_empty() {
            return Err(bad(format!("expected blank line after header, got {blank:?}")));
        }

        let mut ckpt = Checkpoint::new(mode, epoch, step, seed, config);
        loop {
            let line = read_line(&mut r, path)?;
            if line == "end" {
                break;
            }
            let rest = line
                .strip_prefix("tensor ")
                .ok_or_else(|| bad(format!("expected tensor or end, got {line:?}")))?;
            let mut parts = rest.split_whitespace();
            let name = parts.next().ok_or_else(|| bad("tensor line missing name".into()))?;
            let rows: usize = parts
                .next()
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| bad(format!("bad rows in tensor line {line:?}")))?;
            let cols: usize = parts
                .next()
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| bad(format!("bad cols in tensor line {line:?}")))?;
            if parts.next().is_some() {
                return Err(bad(format!("trailing tokens in tensor line {line:?}")));
            }
            if rows == 0 || cols == 0 {
                return Err(bad(format!("{name}: zero-sized array")));
            }
            let mut bytes = vec![0u8; rows * cols * 4];
            r.read_exact(&mut bytes)
                .map_err(|e| bad(format!("{name}: truncated payload ({e})")))?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let nl = read_line(&mut r, path)?;
            if !nl.is_empty() {
                return Err(bad(format!("{name}: expected newline after payload")));
            }
            ckpt.push_array(name, rows, cols, data)?;
        }
        Ok(ckpt)
    }
}

fn read_line(r: &mut impl Read, path: &Path) -> Result<String> {
    // Byte-at-a-time line read; header lines are short and payload reads
    // bypass this entirely.
    let mut bytes = Vec::new();
    let mut one = [0u8; 1];
    loop {
        match r.read(&mut one) {
            Ok(0) => {
                if bytes.is_empty() {
                    return Err(CoreError::malformed(path, "unexpected end of file"));
                }
                break;
            }
            Ok(_) => {
                if one[0] == b'\n' {
                    break;
                }
                bytes.push(one[0]);
                if bytes.len() > 1 << 20 {
                    return Err(CoreError::malformed(path, "header line over 1MB"));
                }
            }
            Err(e) => return Err(CoreError::io(path, e)),
        }
    }
    String::from_utf8(bytes).map_err(|_| CoreError::malformed(path, "non-UTF8 header line"))
}

fn parse_kv_raw(line: &str, key: &str, path: &Path) -> Result<String> {
    line.strip_prefix(key)
        .and_then(|rest| rest.strip_prefix(" = "))
        .map(str::to_string)
        .ok_or_else(|| CoreError::malformed(path, format!("expected `{key} = ...`, got {line:?}")))
}

fn parse_kv<T: std::str::FromStr>(line: &str, key: &str, path: &Path) -> Result<T> {
    let raw = parse_kv_raw(line, key, path)?;
    raw.parse()
        .map_err(|_| CoreError::malformed(path, format!("bad value for {key}: {raw:?}")))
}
