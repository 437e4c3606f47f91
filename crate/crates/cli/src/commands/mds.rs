//! `pddkit mds`: project a distance matrix CSV (as written by `dist
//! --matrix`) into 2 or 3 dimensions.

use std::path::PathBuf;
use std::time::Instant;

use clap::Args;

use pddkit::mds::{classical_mds, embedding_to_csv};

use crate::run::{out_dir, read_to_string, write_file, CliError, RunManifest};

#[derive(Debug, Args)]
pub struct MdsArgs {
    /// Distance matrix CSV: header row of ids, one labelled row per id.
    pub distances: PathBuf,
    #[arg(long, value_parser = clap::value_parser!(u8).range(2..=3))]
    pub dims: u8,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_matrix(text: &str) -> Result<(Vec<String>, Vec<Vec<f64>>), CliError> {
    let bad = |msg: String| CliError::Usage(format!("distance CSV: {msg}"));
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| bad("empty file".into()))?;
    let ids: Vec<String> = header.split(',').skip(1).map(str::to_string).collect();
    if ids.is_empty() {
        return Err(bad("header has no ids".into()));
    }
    let mut matrix = Vec::with_capacity(ids.len());
    for (i, line) in lines.filter(|l| !l.trim().is_empty()).enumerate() {
        let mut cells = line.split(',');
        let label = cells.next().unwrap_or("");
        if i >= ids.len() {
            return Err(bad(format!("more rows than header ids ({})", ids.len())));
        }
        if label != ids[i] {
            return Err(bad(format!(
                "row {} is labelled {label:?}, header says {:?}",
                i + 2,
                ids[i]
            )));
        }
        let row: Result<Vec<f64>, _> = cells
            .map(|c| {
                c.trim()
                    .parse::<f64>()
                    .map_err(|_| bad(format!("bad number {c:?} in row {}", i + 2)))
            })
            .collect();
        let row = row?;
        if row.len() != ids.len() {
            return Err(bad(format!(
                "row {} has {} values, expected {}",
                i + 2,
                row.len(),
                ids.len()
            )));
        }
        matrix.push(row);
    }
    if matrix.len() != ids.len() {
        return Err(bad(format!(
            "{} rows for {} header ids",
            matrix.len(),
            ids.len()
        )));
    }
    Ok((ids, matrix))
}

pub fn run(args: &MdsArgs) -> Result<(), CliError> {
    let started = Instant::now();
    let text = read_to_string(&args.distances)?;
    let mut manifest =
        RunManifest::new("mds", serde_json::json!({"dims": args.dims}), None);
    manifest.add_input(&args.distances, text.as_bytes());
    let (ids, matrix) = parse_matrix(&text)?;
    manifest.record_phase("ingest", started);

    let compute = Instant::now();
    let embedding =
        classical_mds(&matrix, args.dims as usize).map_err(|e| CliError::Usage(e.to_string()))?;
    manifest.record_phase("compute", compute);

    println!("stress {}", embedding.stress);
    let dir = out_dir(args.out.as_ref(), "mds", manifest.inputs())?;
    write_file(&dir, "embedding.csv", &embedding_to_csv(&ids, &embedding))?;
    manifest.write(&dir)?;
    println!("wrote embedding.csv to {}", dir.display());
    Ok(())
}
