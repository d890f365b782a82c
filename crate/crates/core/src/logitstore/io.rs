//! CSV logit files and JSON pool manifests.
//!
//! A logit file holds one (model, split) pair:
//!
//! ```text
//! episode_id,y_true,z_0,z_1,...,z_{K-1}
//! 0,3,0.125,-1.5,...
//! ```
//!
//! Floats are written with the shortest representation that parses back to
//! the same `f64`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

use super::{LogitMatrix, LogitRecord, Pool, PoolManifest};

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

pub fn read_logit_csv(path: &Path, model_id: &str, split: &str, shots: usize) -> Result<LogitMatrix> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| parse_err(path, 0, e.to_string()))?;

    let mut rows = reader.records();
    let header = match rows.next() {
        Some(h) => h.map_err(|e| parse_err(path, 1, e.to_string()))?,
        None => return Err(parse_err(path, 1, "empty file, header expected")),
    };
    if header.len() < 4 || &header[0] != "episode_id" || &header[1] != "y_true" {
        return Err(parse_err(path, 1, "header must be `episode_id,y_true,z_0,...`"));
    }
    let k = header.len() - 2;
    for (c, name) in header.iter().skip(2).enumerate() {
        if name != format!("z_{c}") {
            return Err(parse_err(path, 1, format!("expected column z_{c}, found `{name}`")));
        }
    }

    let mut matrix = LogitMatrix::from_records(model_id, split, k, shots, [])?;
    for row in rows {
        let row = row.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_err(path, line, e.to_string())
        })?;
        let line = row.position().map_or(0, |p| p.line() as usize);
        if row.len() != k + 2 {
            return Err(Error::InconsistentK {
                context: format!("{}:{line}", path.display()),
                expected: k,
                found: row.len().saturating_sub(2),
            });
        }
        let episode_id: u64 = row[0]
            .parse()
            .map_err(|_| parse_err(path, line, format!("bad episode_id `{}`", &row[0])))?;
        let y_true: usize = row[1]
            .parse()
            .map_err(|_| parse_err(path, line, format!("bad y_true `{}`", &row[1])))?;
        let logits = row
            .iter()
            .skip(2)
            .map(|v| {
                v.parse::<f64>()
                    .map_err(|_| parse_err(path, line, format!("bad logit `{v}`")))
            })
            .collect::<Result<Vec<f64>>>()?;
        matrix
            .push(LogitRecord {
                episode_id,
                y_true,
                logits,
            })
            .map_err(|e| match e {
                Error::InvalidRecord(msg) => parse_err(path, line, msg),
                other => other,
            })?;
    }
    Ok(matrix)
}

pub fn write_logit_csv(matrix: &LogitMatrix, path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    write!(out, "episode_id,y_true")?;
    for c in 0..matrix.k() {
        write!(out, ",z_{c}")?;
    }
    writeln!(out)?;
    for e in 0..matrix.len() {
        write!(out, "{},{}", matrix.episode_ids()[e], matrix.labels()[e])?;
        for v in matrix.row(e) {
            write!(out, ",{v}")?;
        }
        writeln!(out)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<PoolManifest> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| parse_err(path, e.line(), e.to_string()))
}

/// Loads and validates every logit file a manifest references.
pub fn ingest(manifest_path: &Path) -> Result<Pool> {
    let manifest = read_manifest(manifest_path)?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));

    let mut tags: Vec<&String> = manifest.models.iter().flat_map(|m| m.files.keys()).collect();
    tags.sort();
    tags.dedup();

    let mut splits: BTreeMap<String, Vec<LogitMatrix>> = BTreeMap::new();
    for tag in tags {
        let mut matrices = Vec::with_capacity(manifest.models.len());
        for model in &manifest.models {
            let rel = model.files.get(tag).ok_or_else(|| {
                Error::InvalidManifest(format!("model {} has no file for split {tag}", model.model_id))
            })?;
            let path = base.join(rel);
            let matrix = read_logit_csv(&path, &model.model_id, tag, manifest.shots)?;
            if matrix.k() != manifest.k {
                return Err(Error::InconsistentK {
                    context: path.display().to_string(),
                    expected: manifest.k,
                    found: matrix.k(),
                });
            }
            matrices.push(matrix);
        }
        if let Some(&declared) = manifest.episode_counts.get(tag) {
            let found = matrices.first().map_or(0, LogitMatrix::len);
            if declared != found {
                return Err(Error::InvalidManifest(format!(
                    "split {tag}: manifest declares {declared} episodes, files hold {found}"
                )));
            }
        }
        splits.insert(tag.clone(), matrices);
    }
    Pool::new(manifest, splits)
}

fn file_stem(model_id: &str) -> String {
    model_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
        .collect()
}

/// Writes one CSV per (model, split) plus `manifest.json` into `dir`.
/// Returns the manifest path.
pub fn write_pool(pool: &Pool, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let mut manifest = pool.manifest().clone();
    for (i, model) in manifest.models.iter_mut().enumerate() {
        model.files.clear();
        for tag in pool.split_tags() {
            let name = format!("{}_{}.csv", file_stem(&model.model_id), tag);
            write_logit_csv(&pool.split(tag)?[i], &dir.join(&name))?;
            model.files.insert(tag.to_string(), PathBuf::from(name));
        }
    }
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(path)
}
