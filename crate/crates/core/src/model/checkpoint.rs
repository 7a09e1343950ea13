//! Checkpoints: a flat little-endian `f64` blob plus a text manifest.
//!
//! Manifest layout:
//!
//! ```text
//! #model in_channels=3 widths=8,16,16,32 feat=16 num_classes=3 head=tsconv level_split=24 prefilter=0.05
//! backbone.c1.w	9x3x8	0	<sha256 hex>
//! ...
//! ```
//!
//! Each entry lists the parameter name, shape, byte offset into the blob and
//! the SHA-256 of its bytes.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{HeadKind, ModelConfig, ParamStore, TsConvModel};
use crate::autodiff::Tensor;

pub const PARAMS_FILE: &str = "params.bin";
pub const MANIFEST_FILE: &str = "manifest.txt";

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("checksum mismatch for {0}")]
    Checksum(String),
    #[error("checkpoint does not match the model: {0}")]
    Mismatch(String),
}

fn to_bytes(t: &Tensor) -> Vec<u8> {
    t.data().iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::with_capacity(bytes.len() * 2), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn config_line(c: &ModelConfig) -> String {
    format!(
        "#model in_channels={} widths={} feat={} num_classes={} head={} level_split={} prefilter={}",
        c.in_channels,
        c.widths.map(|w| w.to_string()).join(","),
        c.feat,
        c.num_classes,
        c.head.as_str(),
        c.level_split,
        c.prefilter
    )
}

fn parse_config(line: &str) -> Result<ModelConfig, String> {
    let mut c = ModelConfig::default();
    for kv in line.trim_start_matches("#model").split_whitespace() {
        let (k, v) = kv.split_once('=').ok_or_else(|| format!("expected key=value, got {kv}"))?;
        let bad = |_| format!("bad value for {k}: {v}");
        match k {
            "in_channels" => c.in_channels = v.parse().map_err(bad)?,
            "feat" => c.feat = v.parse().map_err(bad)?,
            "num_classes" => c.num_classes = v.parse().map_err(bad)?,
            "level_split" => c.level_split = v.parse().map_err(|_| format!("bad value for {k}: {v}"))?,
            "prefilter" => c.prefilter = v.parse().map_err(|_| format!("bad value for {k}: {v}"))?,
            "head" => c.head = HeadKind::parse(v).ok_or_else(|| format!("unknown head {v}"))?,
            "widths" => {
                let ws: Vec<usize> = v.split(',').map(str::parse).collect::<Result<_, _>>().map_err(bad)?;
                c.widths = ws.try_into().map_err(|_| "widths needs four values".to_string())?;
            }
            _ => return Err(format!("unknown key {k}")),
        }
    }
    c.validate()?;
    Ok(c)
}

pub fn save_checkpoint(model: &TsConvModel, dir: &Path) -> Result<(), ManifestError> {
    fs::create_dir_all(dir)?;
    let mut blob = Vec::with_capacity(model.params.num_scalars() * 8);
    let mut manifest = config_line(&model.config);
    manifest.push('\n');
    for (name, t) in model.params.iter() {
        let bytes = to_bytes(t);
        let shape: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        let _ = writeln!(manifest, "{name}\t{}\t{}\t{}", shape.join("x"), blob.len(), hex(&Sha256::digest(&bytes)));
        blob.extend_from_slice(&bytes);
    }
    fs::write(dir.join(PARAMS_FILE), blob)?;
    fs::write(dir.join(MANIFEST_FILE), manifest)?;
    Ok(())
}

/// Reads a checkpoint, verifying every checksum and the parameter layout.
/// With `expected`, the stored model configuration must match it.
pub fn load_checkpoint(dir: &Path, expected: Option<&ModelConfig>) -> Result<TsConvModel, ManifestError> {
    let manifest = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let blob = fs::read(dir.join(PARAMS_FILE))?;
    let mut lines = manifest.lines().enumerate();
    let config = match lines.next() {
        Some((_, l)) if l.starts_with("#model") => parse_config(l).map_err(|msg| ManifestError::Parse { line: 1, msg })?,
        _ => return Err(ManifestError::Parse { line: 1, msg: "missing #model header".into() }),
    };
    if let Some(want) = expected {
        if *want != config {
            return Err(ManifestError::Mismatch(format!("stored `{}`, requested `{}`", config_line(&config), config_line(want))));
        }
    }
    let mut store = ParamStore::new();
    for (i, line) in lines {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| ManifestError::Parse { line: lineno, msg };
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 4 {
            return Err(err(format!("expected 4 tab-separated fields, got {}", f.len())));
        }
        let shape: Vec<usize> = f[1]
            .split('x')
            .map(str::parse)
            .collect::<Result<_, _>>()
            .map_err(|_| err(format!("bad shape {}", f[1])))?;
        let offset: usize = f[2].parse().map_err(|_| err(format!("bad offset {}", f[2])))?;
        let n: usize = shape.iter().product();
        let bytes = blob
            .get(offset..offset + n * 8)
            .ok_or_else(|| err(format!("{} bytes at offset {offset} exceed the blob", n * 8)))?;
        if hex(&Sha256::digest(bytes)) != f[3] {
            return Err(ManifestError::Checksum(f[0].to_string()));
        }
        let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        store.insert(f[0], Tensor::new(shape, data));
    }
    TsConvModel::from_params(config, store).map_err(ManifestError::Mismatch)
}
