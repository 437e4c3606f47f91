//! `pddkit train`: fit the set transformer on a CIF corpus with scalar
//! targets. Model and optimizer settings resolve as CLI flag > config file
//! > built-in default.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{ArgAction, Args};
use rayon::prelude::*;
use serde::Deserialize;

use pddkit::pdd::pdd;
use pddkit::pst::{train, DatasetRecord, EmbeddingTable, PstConfig, PstError, TrainOpts};

use crate::ingest::{collect_cif_files, parse_set};
use crate::run::{out_dir, read_to_string, write_file, CliError, RunManifest};

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// CIF files or directories of CIF files.
    #[arg(required = true)]
    pub cifs: Vec<PathBuf>,
    /// Targets CSV with `id,value` rows (header optional).
    #[arg(long)]
    pub targets: PathBuf,
    /// TOML config file with [model], [train], and [ingest] sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Per-element embedding CSV (`element,<col>,...`); implies
    /// species-aware ingestion.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub k: Option<usize>,
    /// PDD collapse tolerance used during ingestion.
    #[arg(long)]
    pub tol: Option<f64>,
    /// Subtract the dataset mean from targets (predictions add it back).
    #[arg(long, action = ArgAction::Set, num_args = 1)]
    pub shift_targets: Option<bool>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    #[serde(default)]
    model: ModelSection,
    #[serde(default)]
    train: TrainSection,
    #[serde(default)]
    ingest: IngestSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelSection {
    d_model: Option<usize>,
    heads: Option<usize>,
    encoders: Option<usize>,
    attention_dropout: Option<f64>,
    dropout: Option<f64>,
    k: Option<usize>,
    species_dim: Option<usize>,
    seed: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainSection {
    epochs: Option<usize>,
    lr: Option<f64>,
    weight_decay: Option<f64>,
    shift_targets: Option<bool>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct IngestSection {
    tol: Option<f64>,
    species_aware: Option<bool>,
}

pub struct Resolved {
    pub config: PstConfig,
    pub opts: TrainOpts,
    pub tol: f64,
    pub species_aware: bool,
}

/// Applies file values over the defaults, then flags over the file.
fn resolve(args: &TrainArgs) -> Result<Resolved, CliError> {
    let file: FileConfig = match &args.config {
        Some(path) => toml::from_str(&read_to_string(path)?)
            .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?,
        None => FileConfig::default(),
    };
    let mut config = PstConfig::default();
    let m = &file.model;
    config.d_model = m.d_model.unwrap_or(config.d_model);
    config.heads = m.heads.unwrap_or(config.heads);
    config.encoders = m.encoders.unwrap_or(config.encoders);
    config.attention_dropout = m.attention_dropout.unwrap_or(config.attention_dropout);
    config.dropout = m.dropout.unwrap_or(config.dropout);
    config.species_dim = m.species_dim.unwrap_or(config.species_dim);
    config.k = args.k.or(m.k).unwrap_or(config.k);
    config.seed = args.seed.or(m.seed).unwrap_or(config.seed);

    let mut opts = TrainOpts::default();
    let t = &file.train;
    opts.epochs = args.epochs.or(t.epochs).unwrap_or(opts.epochs);
    opts.lr = args.lr.or(t.lr).unwrap_or(opts.lr);
    opts.weight_decay = t.weight_decay.unwrap_or(opts.weight_decay);
    opts.shift_targets = args
        .shift_targets
        .or(t.shift_targets)
        .unwrap_or(opts.shift_targets);

    if opts.epochs == 0 {
        return Err(CliError::Usage("epochs must be at least 1".into()));
    }
    let tol = args.tol.or(file.ingest.tol).unwrap_or(1e-4);
    let species_aware = file.ingest.species_aware.unwrap_or(true);
    if args.embeddings.is_some() && !species_aware {
        return Err(CliError::Usage(
            "--embeddings requires species-aware ingestion".into(),
        ));
    }
    Ok(Resolved {
        config,
        opts,
        tol,
        species_aware,
    })
}

fn parse_targets(text: &str, path: &Path) -> Result<BTreeMap<String, f64>, CliError> {
    let bad = |msg: String| CliError::Usage(format!("{}: {msg}", path.display()));
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if cells.len() != 2 {
            return Err(bad(format!("line {}: expected `id,value`", i + 1)));
        }
        let value = match cells[1].parse::<f64>() {
            Ok(v) if v.is_finite() => v,
            _ if i == 0 => continue, // header row
            _ => return Err(bad(format!("line {}: bad value {:?}", i + 1, cells[1]))),
        };
        if out.insert(cells[0].to_string(), value).is_some() {
            return Err(bad(format!("duplicate target id {:?}", cells[0])));
        }
    }
    if out.is_empty() {
        return Err(bad("no targets".into()));
    }
    Ok(out)
}

fn to_cli_error(e: PstError) -> CliError {
    match e {
        PstError::NonFiniteLoss { .. } | PstError::NonFiniteActivation { .. } => {
            CliError::Numeric(e.to_string())
        }
        other => CliError::Usage(other.to_string()),
    }
}

pub fn run(args: &TrainArgs) -> Result<(), CliError> {
    let started = Instant::now();
    let resolved = resolve(args)?;
    let files = collect_cif_files(&args.cifs)?;
    let targets_text = read_to_string(&args.targets)?;
    let targets = parse_targets(&targets_text, &args.targets)?;
    let table = match &args.embeddings {
        Some(path) => {
            let text = read_to_string(path)?;
            let table = EmbeddingTable::from_csv(&text)
                .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
            if table.dim != resolved.config.species_dim {
                return Err(CliError::Usage(format!(
                    "embedding table has dim {}, model species_dim is {}",
                    table.dim, resolved.config.species_dim
                )));
            }
            Some((path.clone(), text, table))
        }
        None => None,
    };

    let mut manifest = RunManifest::new(
        "train",
        serde_json::json!({
            "model": resolved.config,
            "train": resolved.opts,
            "ingest": {"tol": resolved.tol, "species_aware": resolved.species_aware},
        }),
        Some(resolved.config.seed),
    );
    for f in &files {
        manifest.add_input(&f.path, &f.bytes);
    }
    manifest.add_input(&args.targets, targets_text.as_bytes());
    if let Some((path, text, _)) = &table {
        manifest.add_input(path, text.as_bytes());
    }
    manifest.record_phase("ingest", started);

    let compute = Instant::now();
    let pdds: Vec<Result<(String, pddkit::pdd::Pdd), String>> = files
        .par_iter()
        .map(|f| {
            let set = parse_set(f).map_err(|e| format!("{}: {e}", f.path.display()))?;
            let p = pdd(&set, resolved.config.k, resolved.tol, resolved.species_aware)
                .map_err(|e| format!("{}: {e}", f.path.display()))?;
            Ok((set.id, p))
        })
        .collect();
    let mut records = Vec::with_capacity(pdds.len());
    let mut missing = Vec::new();
    for p in pdds {
        let (id, p) = p.map_err(CliError::Usage)?;
        match targets.get(&id) {
            Some(&target) => records.push(DatasetRecord {
                id,
                pdd: p,
                target,
            }),
            None => missing.push(id),
        }
    }
    if !missing.is_empty() {
        return Err(CliError::Usage(format!(
            "missing target ids: {}",
            missing.join(", ")
        )));
    }
    manifest.record_phase("pdd", compute);

    let fit = Instant::now();
    let (checkpoint, history) = train(
        &records,
        &resolved.config,
        &resolved.opts,
        table.map(|(_, _, t)| t),
    )
    .map_err(to_cli_error)?;
    manifest.record_phase("train", fit);

    let dir = out_dir(args.out.as_ref(), "train", manifest.inputs())?;
    write_file(&dir, "checkpoint.json", &checkpoint.to_json())?;
    let mut csv = String::from("epoch,train_mae,val_mae\n");
    for h in &history {
        csv.push_str(&format!("{},{},{}\n", h.epoch, h.train_mae, h.val_mae));
    }
    write_file(&dir, "history.csv", &csv)?;
    manifest.write(&dir)?;
    let last = history.last().expect("at least one epoch");
    println!(
        "trained on {} structure(s) for {} epoch(s); final val MAE {}",
        records.len(),
        history.len(),
        last.val_mae
    );
    println!("wrote checkpoint.json and history.csv to {}", dir.display());
    Ok(())
}
