//! `pddkit dist`: earth mover's distance between two PDD files, or the
//! full pairwise matrix over a directory of them.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::Args;

use pddkit::metric::{distance_matrix, distance_matrix_to_csv, emd};
use pddkit::pdd::Pdd;

use crate::run::{io_error, out_dir, write_file, CliError, RunManifest};

#[derive(Debug, Args)]
pub struct DistArgs {
    /// Exactly two PDD JSON files (omit when using --matrix).
    pub files: Vec<PathBuf>,
    /// Directory of PDD JSON files; writes the pairwise distance matrix.
    #[arg(long, conflicts_with = "files")]
    pub matrix: Option<PathBuf>,
    /// Also emit the optimal transport plan as JSON.
    #[arg(long)]
    pub emit_plan: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn load_pdd(path: &Path) -> Result<(Pdd, Vec<u8>), CliError> {
    let bytes = fs::read(path).map_err(|e| io_error("cannot read", path, e))?;
    let p: Pdd = serde_json::from_slice(&bytes)
        .map_err(|e| CliError::Usage(format!("{}: not a PDD JSON file: {e}", path.display())))?;
    Ok((p, bytes))
}

fn run_matrix(dir_path: &Path, args: &DistArgs) -> Result<(), CliError> {
    let started = Instant::now();
    let entries = fs::read_dir(dir_path).map_err(|e| io_error("cannot list", dir_path, e))?;
    let json: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| e.eq_ignore_ascii_case("json"))
        })
        .collect();
    // Prefer `.pdd.json` artifacts so a pdd output directory works as-is;
    // otherwise take every JSON file except run manifests.
    let pdd_named: Vec<PathBuf> = json
        .iter()
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.ends_with(".pdd.json"))
        })
        .cloned()
        .collect();
    let mut paths = if pdd_named.len() >= 2 {
        pdd_named
    } else {
        json.into_iter()
            .filter(|p| p.file_name().and_then(|n| n.to_str()) != Some("manifest.json"))
            .collect()
    };
    paths.sort();
    if paths.len() < 2 {
        return Err(CliError::Usage(format!(
            "--matrix needs at least two PDD JSON files, found {} in {}",
            paths.len(),
            dir_path.display()
        )));
    }
    let mut manifest = RunManifest::new("dist", serde_json::json!({"mode": "matrix"}), None);
    let mut pdds = Vec::with_capacity(paths.len());
    for path in &paths {
        let (p, bytes) = load_pdd(path)?;
        manifest.add_input(path, &bytes);
        pdds.push(p);
    }
    manifest.record_phase("ingest", started);

    let compute = Instant::now();
    let matrix = distance_matrix(&pdds).map_err(|e| CliError::Usage(e.to_string()))?;
    manifest.record_phase("compute", compute);

    let ids: Vec<String> = pdds.iter().map(|p| p.id.clone()).collect();
    let dir = out_dir(args.out.as_ref(), "dist", manifest.inputs())?;
    write_file(&dir, "distances.csv", &distance_matrix_to_csv(&ids, &matrix))?;
    manifest.write(&dir)?;
    println!(
        "wrote {}x{} distance matrix to {}",
        ids.len(),
        ids.len(),
        dir.display()
    );
    Ok(())
}

pub fn run(args: &DistArgs) -> Result<(), CliError> {
    if let Some(dir) = &args.matrix {
        return run_matrix(dir, args);
    }
    if args.files.len() != 2 {
        return Err(CliError::Usage(format!(
            "expected exactly two PDD files or --matrix <dir>, got {} file(s)",
            args.files.len()
        )));
    }
    let started = Instant::now();
    let mut manifest = RunManifest::new("dist", serde_json::json!({"mode": "pair"}), None);
    let (a, bytes_a) = load_pdd(&args.files[0])?;
    manifest.add_input(&args.files[0], &bytes_a);
    let (b, bytes_b) = load_pdd(&args.files[1])?;
    manifest.add_input(&args.files[1], &bytes_b);
    manifest.record_phase("ingest", started);

    let compute = Instant::now();
    let plan = emd(&a, &b).map_err(|e| CliError::Usage(e.to_string()))?;
    manifest.record_phase("compute", compute);

    println!("{}", plan.cost);
    if args.emit_plan {
        println!(
            "{}",
            serde_json::to_string_pretty(&plan).expect("plan serialization")
        );
    }
    let dir = out_dir(args.out.as_ref(), "dist", manifest.inputs())?;
    let summary = serde_json::json!({"a": a.id, "b": b.id, "cost": plan.cost});
    write_file(
        &dir,
        "dist.json",
        &serde_json::to_string_pretty(&summary).expect("summary serialization"),
    )?;
    if args.emit_plan {
        write_file(
            &dir,
            "plan.json",
            &serde_json::to_string_pretty(&plan).expect("plan serialization"),
        )?;
    }
    manifest.write(&dir)?;
    Ok(())
}
