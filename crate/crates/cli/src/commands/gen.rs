//! `pddkit gen`: write a seeded corpus of random CIF files for demos,
//! benchmarks, and training smoke tests.

use std::path::PathBuf;
use std::time::Instant;

use clap::Args;

use pddkit::cif::write_cif;
use pddkit::geometry::random_periodic_set;

use crate::run::{out_dir, write_file, CliError, RunManifest};

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long, default_value_t = 10)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Motif sizes cycle through min..=max.
    #[arg(long, default_value_t = 1)]
    pub motif_min: usize,
    #[arg(long, default_value_t = 4)]
    pub motif_max: usize,
    /// 0 keeps cells cubic; larger values shear and scale them.
    #[arg(long, default_value_t = 0.3)]
    pub distortion: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn run(args: &GenArgs) -> Result<(), CliError> {
    if args.count == 0 {
        return Err(CliError::Usage("--count must be at least 1".into()));
    }
    if args.motif_min == 0 || args.motif_min > args.motif_max {
        return Err(CliError::Usage(
            "need 1 <= motif-min <= motif-max".into(),
        ));
    }
    let mut manifest = RunManifest::new(
        "gen",
        serde_json::json!({
            "count": args.count,
            "motif_min": args.motif_min,
            "motif_max": args.motif_max,
            "distortion": args.distortion,
        }),
        Some(args.seed),
    );
    let started = Instant::now();
    let dir = out_dir(args.out.as_ref(), "gen", manifest.inputs())?;
    let span = args.motif_max - args.motif_min + 1;
    for i in 0..args.count {
        let m = args.motif_min + i % span;
        let set = random_periodic_set(args.seed.wrapping_add(i as u64), m, args.distortion)
            .map_err(|e| CliError::Usage(e.to_string()))?;
        write_file(&dir, &format!("{}.cif", set.id), &write_cif(&set))?;
    }
    manifest.record_phase("generate", started);
    manifest.write(&dir)?;
    println!("wrote {} CIF file(s) to {}", args.count, dir.display());
    Ok(())
}
