//! Turning CLI path arguments into a sorted, deduplicated CIF corpus.

use std::fs;
use std::path::{Path, PathBuf};

use pddkit::cif;
use pddkit::geometry::PeriodicSet;

use crate::run::{io_error, CliError};

pub struct CifFile {
    pub path: PathBuf,
    pub bytes: Vec<u8>,
    /// Output stem, unique across the corpus.
    pub stem: String,
}

fn is_cif(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("cif"))
}

/// Expands files and directories (one level, `.cif` only) into a corpus
/// sorted by path. Processing order is therefore independent of shell
/// globbing and filesystem iteration order.
pub fn collect_cif_files(inputs: &[PathBuf]) -> Result<Vec<CifFile>, CliError> {
    let mut paths = Vec::new();
    for input in inputs {
        let meta = fs::metadata(input).map_err(|e| io_error("cannot stat", input, e))?;
        if meta.is_dir() {
            let entries = fs::read_dir(input).map_err(|e| io_error("cannot list", input, e))?;
            for entry in entries {
                let entry = entry.map_err(|e| io_error("cannot list", input, e))?;
                let path = entry.path();
                if path.is_file() && is_cif(&path) {
                    paths.push(path);
                }
            }
        } else {
            paths.push(input.clone());
        }
    }
    paths.sort();
    paths.dedup();
    if paths.is_empty() {
        return Err(CliError::Usage("no CIF inputs found".into()));
    }

    let mut files = Vec::with_capacity(paths.len());
    let mut seen = std::collections::HashMap::new();
    for path in paths {
        let bytes = fs::read(&path).map_err(|e| io_error("cannot read", &path, e))?;
        let base = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("input")
            .to_string();
        let n = seen.entry(base.clone()).or_insert(0usize);
        *n += 1;
        let stem = if *n == 1 { base } else { format!("{base}-{n}") };
        files.push(CifFile { path, bytes, stem });
    }
    Ok(files)
}

pub fn parse_set(file: &CifFile) -> Result<PeriodicSet, String> {
    let text = String::from_utf8_lossy(&file.bytes);
    let doc = cif::parse_cif(&text).map_err(|e| e.to_string())?;
    cif::to_periodic_set(&doc).map_err(|e| e.to_string())
}
