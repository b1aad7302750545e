//! Conversion of a directory of record files into a corpus file.
//!
//! The directory holds `header.json` (`{"dimension", "categories",
//! "concepts"}`) and any number of `*.jsonl` files (one record per line) or
//! `*.json` files (one record or an array of records). Records are validated
//! together and written sorted by id.

use std::fs;
use std::path::{Path, PathBuf};

use refineir::{Corpus, CorpusHeader, Error, ImageRecord, Result};
use serde::Deserialize;

pub const HEADER_FILE: &str = "header.json";

#[derive(Deserialize)]
#[serde(untagged)]
enum OneOrMany {
    Many(Vec<ImageRecord>),
    One(Box<ImageRecord>),
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_owned(),
        source,
    })
}

fn malformed(path: &Path, line: usize, what: &'static str, e: impl std::fmt::Display) -> Error {
    Error::Malformed {
        line,
        what,
        message: format!("{}: {e}", path.display()),
    }
}

/// Record files in `dir`, sorted by name.
fn record_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|source| Error::Io {
        path: dir.to_owned(),
        source,
    })?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry
            .map_err(|source| Error::Io {
                path: dir.to_owned(),
                source,
            })?
            .path();
        let is_records = matches!(
            path.extension().and_then(|e| e.to_str()),
            Some("json" | "jsonl")
        );
        if path.is_file() && is_records && path.file_name().is_some_and(|n| n != HEADER_FILE) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

fn parse_file(path: &Path, out: &mut Vec<ImageRecord>) -> Result<()> {
    let text = read(path)?;
    if path.extension().is_some_and(|e| e == "jsonl") {
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            out.push(serde_json::from_str(line).map_err(|e| malformed(path, n + 1, "record", e))?);
        }
        return Ok(());
    }
    match serde_json::from_str(&text).map_err(|e| malformed(path, e.line(), "record", e))? {
        OneOrMany::Many(recs) => out.extend(recs),
        OneOrMany::One(rec) => out.push(*rec),
    }
    Ok(())
}

/// Reads, validates and normalizes every record under `dir`.
pub fn ingest_dir(dir: impl AsRef<Path>) -> Result<Corpus> {
    let dir = dir.as_ref();
    let header_path = dir.join(HEADER_FILE);
    let header: CorpusHeader = serde_json::from_str(&read(&header_path)?)
        .map_err(|e| malformed(&header_path, e.line(), "header", e))?;
    let mut records = Vec::new();
    for file in record_files(dir)? {
        parse_file(&file, &mut records)?;
    }
    records.sort_by(|a, b| a.id.cmp(&b.id));
    Corpus::new(header, records)
}
