//! Per-run plumbing: the output directory, the manifest, and the error
//! type that maps onto the exit-code contract (0 success, 2 input or
//! validation error, 3 numerical failure).

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug)]
pub enum CliError {
    /// Bad input or configuration; exits with code 2.
    Usage(String),
    /// A numerical failure inside an otherwise valid run; exits with code 3.
    Numeric(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Numeric(m) => f.write_str(m),
        }
    }
}

pub fn io_error(context: &str, path: &Path, err: std::io::Error) -> CliError {
    CliError::Usage(format!("{context} {}: {err}", path.display()))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct InputFile {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize)]
struct Phase {
    name: String,
    seconds: f64,
}

/// What it takes to reproduce a run: the command, the fully resolved
/// configuration, hashes of every input, the tool version, and the seed.
/// Timings are carried for reporting but are not part of the reproducible
/// surface.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    command: String,
    version: String,
    config: serde_json::Value,
    seed: Option<u64>,
    inputs: Vec<InputFile>,
    timings: Vec<Phase>,
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value, seed: Option<u64>) -> Self {
        RunManifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config,
            seed,
            inputs: Vec::new(),
            timings: Vec::new(),
        }
    }

    pub fn add_input(&mut self, path: &Path, bytes: &[u8]) {
        self.inputs.push(InputFile {
            path: path.display().to_string(),
            sha256: sha256_hex(bytes),
        });
    }

    pub fn inputs(&self) -> &[InputFile] {
        &self.inputs
    }

    pub fn record_phase(&mut self, name: &str, started: Instant) {
        self.timings.push(Phase {
            name: name.to_string(),
            seconds: started.elapsed().as_secs_f64(),
        });
    }

    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(self).expect("manifest serialization");
        write_file(dir, "manifest.json", &text)
    }
}

/// The per-run output directory: `--out` verbatim when given, otherwise
/// `<command>-<utc timestamp>-<hash8>` in the working directory, where the
/// hash covers the command and the input contents.
pub fn out_dir(
    flag: Option<&PathBuf>,
    command: &str,
    inputs: &[InputFile],
) -> Result<PathBuf, CliError> {
    let dir = match flag {
        Some(d) => d.clone(),
        None => {
            let mut hasher = Sha256::new();
            hasher.update(command.as_bytes());
            for f in inputs {
                hasher.update(f.sha256.as_bytes());
            }
            let digest: String = hasher
                .finalize()
                .iter()
                .map(|b| format!("{b:02x}"))
                .collect();
            let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ");
            PathBuf::from(format!("pddkit-{command}-{stamp}-{}", &digest[..8]))
        }
    };
    fs::create_dir_all(&dir).map_err(|e| io_error("cannot create output directory", &dir, e))?;
    Ok(dir)
}

pub fn write_file(dir: &Path, name: &str, contents: &str) -> Result<(), CliError> {
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| io_error("cannot write", &path, e))
}

pub fn read_to_string(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| io_error("cannot read", path, e))
}
