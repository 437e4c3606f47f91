//! `pddkit pdd` and `pddkit amd`: batch invariant computation over a CIF
//! corpus, parallel across files, in sorted path order.

use std::path::PathBuf;
use std::time::Instant;

use clap::{ArgAction, Args, ValueEnum};
use rayon::prelude::*;

use pddkit::pdd::{amd, pdd};

use crate::ingest::{collect_cif_files, parse_set, CifFile};
use crate::run::{out_dir, write_file, CliError, RunManifest};

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Format {
    Json,
    Csv,
}

#[derive(Debug, Args)]
pub struct PddArgs {
    /// CIF files or directories of CIF files.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    /// Neighbours per row.
    #[arg(long, default_value_t = 15)]
    pub k: usize,
    /// Collapse tolerance (chebyshev, in distance units).
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    /// Keep rows of different species apart when collapsing.
    #[arg(long, default_value_t = true, action = ArgAction::Set, num_args = 1)]
    pub species_aware: bool,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    pub format: Format,
    /// Output directory (default: fresh timestamp+hash directory).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn compute_pdd(file: &CifFile, args: &PddArgs) -> Result<String, String> {
    let set = parse_set(file)?;
    let p = pdd(&set, args.k, args.tol, args.species_aware).map_err(|e| e.to_string())?;
    Ok(match args.format {
        Format::Json => {
            let mut s = serde_json::to_string_pretty(&p).map_err(|e| e.to_string())?;
            s.push('\n');
            s
        }
        Format::Csv => p.to_csv_string(),
    })
}

pub fn run(args: &PddArgs) -> Result<(), CliError> {
    let started = Instant::now();
    let files = collect_cif_files(&args.inputs)?;
    let mut manifest = RunManifest::new(
        "pdd",
        serde_json::json!({
            "k": args.k,
            "tol": args.tol,
            "species_aware": args.species_aware,
            "format": format!("{:?}", args.format).to_lowercase(),
        }),
        None,
    );
    for f in &files {
        manifest.add_input(&f.path, &f.bytes);
    }
    let dir = out_dir(args.out.as_ref(), "pdd", manifest.inputs())?;
    manifest.record_phase("ingest", started);

    let compute = Instant::now();
    let results: Vec<Result<String, String>> =
        files.par_iter().map(|f| compute_pdd(f, args)).collect();
    manifest.record_phase("compute", compute);

    let ext = match args.format {
        Format::Json => "pdd.json",
        Format::Csv => "pdd.csv",
    };
    let mut failed = 0;
    for (f, result) in files.iter().zip(&results) {
        match result {
            Ok(contents) => write_file(&dir, &format!("{}.{ext}", f.stem), contents)?,
            Err(msg) => {
                failed += 1;
                eprintln!("{}: {msg}", f.path.display());
                write_file(&dir, &format!("{}.errors", f.stem), &format!("{msg}\n"))?;
            }
        }
    }
    manifest.write(&dir)?;
    println!(
        "wrote {} PDD file(s) to {}",
        files.len() - failed,
        dir.display()
    );
    if failed > 0 {
        return Err(CliError::Usage(format!(
            "{failed} input(s) failed; see .errors sidecars in {}",
            dir.display()
        )));
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct AmdArgs {
    /// CIF files or directories of CIF files.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(long, default_value_t = 15)]
    pub k: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    #[arg(long, default_value_t = true, action = ArgAction::Set, num_args = 1)]
    pub species_aware: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn run_amd(args: &AmdArgs) -> Result<(), CliError> {
    let started = Instant::now();
    let files = collect_cif_files(&args.inputs)?;
    let mut manifest = RunManifest::new(
        "amd",
        serde_json::json!({
            "k": args.k,
            "tol": args.tol,
            "species_aware": args.species_aware,
        }),
        None,
    );
    for f in &files {
        manifest.add_input(&f.path, &f.bytes);
    }
    let dir = out_dir(args.out.as_ref(), "amd", manifest.inputs())?;
    manifest.record_phase("ingest", started);

    let compute = Instant::now();
    let results: Vec<Result<(String, Vec<f64>), String>> = files
        .par_iter()
        .map(|f| {
            let set = parse_set(f)?;
            let p = pdd(&set, args.k, args.tol, args.species_aware).map_err(|e| e.to_string())?;
            Ok((p.id.clone(), amd(&p)))
        })
        .collect();
    manifest.record_phase("compute", compute);

    let mut csv = String::from("id");
    for i in 1..=args.k {
        csv.push_str(&format!(",amd_{i}"));
    }
    csv.push('\n');
    let mut failed = 0;
    for (f, result) in files.iter().zip(&results) {
        match result {
            Ok((id, values)) => {
                csv.push_str(id);
                for v in values {
                    csv.push_str(&format!(",{v}"));
                }
                csv.push('\n');
            }
            Err(msg) => {
                failed += 1;
                eprintln!("{}: {msg}", f.path.display());
                write_file(&dir, &format!("{}.errors", f.stem), &format!("{msg}\n"))?;
            }
        }
    }
    write_file(&dir, "amd.csv", &csv)?;
    manifest.write(&dir)?;
    println!(
        "wrote amd.csv ({} row(s)) to {}",
        files.len() - failed,
        dir.display()
    );
    if failed > 0 {
        return Err(CliError::Usage(format!(
            "{failed} input(s) failed; see .errors sidecars in {}",
            dir.display()
        )));
    }
    Ok(())
}
