//! `pddkit bench`: wall-clock medians for PDD and EMD over growing motif
//! sizes, plus a log-log scaling exponent fit. Reports, asserts nothing.

use std::path::PathBuf;
use std::time::Instant;

use clap::Args;

use pddkit::geometry::random_periodic_set;
use pddkit::metric::emd;
use pddkit::pdd::pdd;

use crate::run::{out_dir, write_file, CliError, RunManifest};

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Motif sizes to measure.
    #[arg(long, value_delimiter = ',', default_value = "2,4,8,16")]
    pub sizes: Vec<usize>,
    #[arg(long, default_value_t = 15)]
    pub k: usize,
    /// Timed repetitions per size (median and spread are reported).
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn median_and_spread(mut times: Vec<f64>) -> (f64, f64) {
    times.sort_by(f64::total_cmp);
    let n = times.len();
    let median = if n % 2 == 1 {
        times[n / 2]
    } else {
        (times[n / 2 - 1] + times[n / 2]) / 2.0
    };
    (median, times[n - 1] - times[0])
}

/// Least-squares slope of log(t) against log(m).
fn fit_exponent(sizes: &[usize], medians: &[f64]) -> f64 {
    let n = sizes.len() as f64;
    let xs: Vec<f64> = sizes.iter().map(|&m| (m as f64).ln()).collect();
    let ys: Vec<f64> = medians.iter().map(|&t| t.max(1e-12).ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let cov: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    cov / var
}

pub fn run(args: &BenchArgs) -> Result<(), CliError> {
    if args.sizes.len() < 2 || args.sizes.contains(&0) {
        return Err(CliError::Usage(
            "--sizes needs at least two positive motif sizes".into(),
        ));
    }
    if args.repeats == 0 {
        return Err(CliError::Usage("--repeats must be at least 1".into()));
    }
    let mut manifest = RunManifest::new(
        "bench",
        serde_json::json!({"sizes": args.sizes, "k": args.k, "repeats": args.repeats}),
        Some(args.seed),
    );
    let run_start = Instant::now();

    let mut csv = String::from("m,k,pdd_median_s,pdd_spread_s,emd_median_s,emd_spread_s\n");
    let mut pdd_medians = Vec::new();
    let mut emd_medians = Vec::new();
    for &m in &args.sizes {
        let a = random_periodic_set(args.seed.wrapping_add(2 * m as u64), m, 0.3)
            .map_err(|e| CliError::Usage(e.to_string()))?;
        let b = random_periodic_set(args.seed.wrapping_add(2 * m as u64 + 1), m, 0.3)
            .map_err(|e| CliError::Usage(e.to_string()))?;

        let mut pdd_times = Vec::with_capacity(args.repeats);
        for _ in 0..args.repeats {
            let t = Instant::now();
            let _ = pdd(&a, args.k, 1e-4, false).map_err(|e| CliError::Usage(e.to_string()))?;
            pdd_times.push(t.elapsed().as_secs_f64());
        }
        let pa = pdd(&a, args.k, 0.0, false).map_err(|e| CliError::Usage(e.to_string()))?;
        let pb = pdd(&b, args.k, 0.0, false).map_err(|e| CliError::Usage(e.to_string()))?;
        let mut emd_times = Vec::with_capacity(args.repeats);
        for _ in 0..args.repeats {
            let t = Instant::now();
            let _ = emd(&pa, &pb).map_err(|e| CliError::Usage(e.to_string()))?;
            emd_times.push(t.elapsed().as_secs_f64());
        }

        let (pdd_median, pdd_spread) = median_and_spread(pdd_times);
        let (emd_median, emd_spread) = median_and_spread(emd_times);
        csv.push_str(&format!(
            "{m},{},{pdd_median},{pdd_spread},{emd_median},{emd_spread}\n",
            args.k
        ));
        pdd_medians.push(pdd_median);
        emd_medians.push(emd_median);
    }
    manifest.record_phase("measure", run_start);

    let pdd_exp = fit_exponent(&args.sizes, &pdd_medians);
    let emd_exp = fit_exponent(&args.sizes, &emd_medians);
    println!("pdd scaling exponent {pdd_exp:.2}");
    println!("emd scaling exponent {emd_exp:.2}");

    let dir = out_dir(args.out.as_ref(), "bench", manifest.inputs())?;
    write_file(&dir, "bench.csv", &csv)?;
    manifest.write(&dir)?;
    println!("wrote bench.csv to {}", dir.display());
    Ok(())
}
