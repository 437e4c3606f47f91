//! `pddkit predict`: run a trained checkpoint over CIF files, inverting
//! the stored column normalization and target shift.

use std::path::PathBuf;
use std::time::Instant;

use clap::Args;

use pddkit::pdd::pdd;
use pddkit::pst::{predict, Checkpoint};

use crate::ingest::{collect_cif_files, parse_set};
use crate::run::{out_dir, read_to_string, write_file, CliError, RunManifest};

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// CIF files or directories of CIF files.
    #[arg(required = true)]
    pub cifs: Vec<PathBuf>,
    /// PDD collapse tolerance; any value works, the model is insensitive
    /// to row splitting, but 1e-4 matches the training default.
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn run(args: &PredictArgs) -> Result<(), CliError> {
    let started = Instant::now();
    let text = read_to_string(&args.checkpoint)?;
    let checkpoint = Checkpoint::from_json(&text)
        .map_err(|e| CliError::Usage(format!("{}: {e}", args.checkpoint.display())))?;
    // A table or a 118-wide embedding means the model was trained with
    // species; otherwise ingest structure-only.
    let species_aware =
        checkpoint.embedding.is_some() || checkpoint.config.species_dim == 118;
    let files = collect_cif_files(&args.cifs)?;

    let mut manifest = RunManifest::new(
        "predict",
        serde_json::json!({
            "tol": args.tol,
            "species_aware": species_aware,
            "model": checkpoint.config,
        }),
        Some(checkpoint.config.seed),
    );
    manifest.add_input(&args.checkpoint, text.as_bytes());
    for f in &files {
        manifest.add_input(&f.path, &f.bytes);
    }
    manifest.record_phase("ingest", started);

    let compute = Instant::now();
    let mut ids = Vec::with_capacity(files.len());
    let mut pdds = Vec::with_capacity(files.len());
    for f in &files {
        let set =
            parse_set(f).map_err(|e| CliError::Usage(format!("{}: {e}", f.path.display())))?;
        let p = pdd(&set, checkpoint.config.k, args.tol, species_aware)
            .map_err(|e| CliError::Usage(format!("{}: {e}", f.path.display())))?;
        ids.push(set.id);
        pdds.push(p);
    }
    let predictions =
        predict(&checkpoint, &pdds).map_err(|e| CliError::Usage(e.to_string()))?;
    manifest.record_phase("predict", compute);

    let mut csv = String::from("id,prediction\n");
    for (id, value) in ids.iter().zip(&predictions) {
        csv.push_str(&format!("{id},{value}\n"));
    }
    let dir = out_dir(args.out.as_ref(), "predict", manifest.inputs())?;
    write_file(&dir, "predictions.csv", &csv)?;
    manifest.write(&dir)?;
    println!(
        "wrote {} prediction(s) to {}",
        predictions.len(),
        dir.display()
    );
    Ok(())
}
