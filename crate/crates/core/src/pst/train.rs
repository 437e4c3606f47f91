//! Dataset plumbing and the optimizer for the set transformer.
//!
//! Everything here is deterministic given the config seed: the train/val
//! split, the per-epoch shuffles, the dropout streams, and the AdamW
//! updates. Checkpoints serialize every tensor through JSON and reload
//! bit for bit.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{forward, Dropout, EncoderParams, PstConfig, PstError, PstInput, PstParams};
use crate::cif::elements;
use crate::pdd::Pdd;

/// Per-column min/max of the distance rows, fitted on the whole training
/// set and reapplied verbatim at inference time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl NormStats {
    pub fn fit<'a, I>(rows: I) -> Result<NormStats, PstError>
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        let mut min: Vec<f64> = Vec::new();
        let mut max: Vec<f64> = Vec::new();
        let mut seen = false;
        for row in rows {
            if !seen {
                min = row.to_vec();
                max = row.to_vec();
                seen = true;
                continue;
            }
            if row.len() != min.len() {
                return Err(PstError::ShapeMismatch(format!(
                    "rows of width {} and {} in the same dataset",
                    min.len(),
                    row.len()
                )));
            }
            for (j, &v) in row.iter().enumerate() {
                min[j] = min[j].min(v);
                max[j] = max[j].max(v);
            }
        }
        if !seen {
            return Err(PstError::EmptyDataset);
        }
        Ok(NormStats { min, max })
    }

    /// (x - min) / (max - min) per column; a column with zero spread maps
    /// to 0 so constant features stay inert instead of dividing by zero.
    pub fn apply(&self, row: &[f64]) -> Result<Vec<f64>, PstError> {
        if row.len() != self.min.len() {
            return Err(PstError::ShapeMismatch(format!(
                "row width {} vs normalization width {}",
                row.len(),
                self.min.len()
            )));
        }
        Ok(row
            .iter()
            .enumerate()
            .map(|(j, &v)| {
                let span = self.max[j] - self.min[j];
                if span > 0.0 {
                    (v - self.min[j]) / span
                } else {
                    0.0
                }
            })
            .collect())
    }
}

/// Fits column normalization over every row of every record.
pub fn normalize_columns(records: &[DatasetRecord]) -> Result<NormStats, PstError> {
    NormStats::fit(
        records
            .iter()
            .flat_map(|r| r.pdd.rows.iter().map(|row| row.as_slice())),
    )
}

/// Learned or tabulated per-element vectors, keyed by atomic number.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTable {
    pub dim: usize,
    pub rows: BTreeMap<u8, Vec<f64>>,
}

impl EmbeddingTable {
    /// Parses `element,<col>,...` CSV. The element cell may be a symbol
    /// ("Fe") or an atomic number ("26").
    pub fn from_csv(text: &str) -> Result<EmbeddingTable, PstError> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines
            .next()
            .ok_or_else(|| PstError::ShapeMismatch("empty embedding table".into()))?;
        let dim = header.split(',').count().saturating_sub(1);
        if dim == 0 {
            return Err(PstError::ShapeMismatch(
                "embedding table header has no value columns".into(),
            ));
        }
        let mut rows = BTreeMap::new();
        for (lineno, line) in lines.enumerate() {
            let mut cells = line.split(',').map(str::trim);
            let key = cells.next().unwrap_or("");
            let z = key
                .parse::<u8>()
                .ok()
                .filter(|z| (1..=118).contains(z))
                .or_else(|| elements::species_from_symbol(key))
                .ok_or_else(|| {
                    PstError::ShapeMismatch(format!(
                        "embedding table row {}: unknown element {key:?}",
                        lineno + 2
                    ))
                })?;
            let values: Result<Vec<f64>, _> = cells
                .map(|c| {
                    c.parse::<f64>()
                        .ok()
                        .filter(|v| v.is_finite())
                        .ok_or_else(|| {
                            PstError::ShapeMismatch(format!(
                                "embedding table row {}: bad value {c:?}",
                                lineno + 2
                            ))
                        })
                })
                .collect();
            let values = values?;
            if values.len() != dim {
                return Err(PstError::ShapeMismatch(format!(
                    "embedding table row {}: {} values, header declares {dim}",
                    lineno + 2,
                    values.len()
                )));
            }
            rows.insert(z, values);
        }
        if rows.is_empty() {
            return Err(PstError::ShapeMismatch("embedding table has no rows".into()));
        }
        Ok(EmbeddingTable { dim, rows })
    }
}

/// The composition vector for one element: a table lookup when a table is
/// given, otherwise a one-hot over the 118 elements.
pub fn species_embedding(z: u8, table: Option<&EmbeddingTable>) -> Result<Vec<f64>, PstError> {
    match table {
        Some(t) => t
            .rows
            .get(&z)
            .cloned()
            .ok_or(PstError::MissingElement(z)),
        None => {
            if !(1..=118).contains(&z) {
                return Err(PstError::MissingElement(z));
            }
            let mut v = vec![0.0; 118];
            v[z as usize - 1] = 1.0;
            Ok(v)
        }
    }
}

/// Turns one PDD into model input: normalized rows, the PDD weights
/// (renormalized defensively, a no-op when they already sum to 1), and a
/// species embedding per row. A species-free PDD gets all-zero composition
/// vectors, which is the structure-only mode.
pub fn build_input(
    pdd: &Pdd,
    stats: &NormStats,
    table: Option<&EmbeddingTable>,
    config: &PstConfig,
) -> Result<PstInput, PstError> {
    if pdd.k != config.k {
        return Err(PstError::ShapeMismatch(format!(
            "PDD has k = {}, model expects k = {}",
            pdd.k, config.k
        )));
    }
    let rows: Result<Vec<Vec<f64>>, _> = pdd.rows.iter().map(|r| stats.apply(r)).collect();
    let rows = rows?;
    let mut weights = pdd.weights.clone();
    let total: f64 = weights.iter().sum();
    if !(total.is_finite() && total > 0.0) {
        return Err(PstError::AllZeroWeights);
    }
    for w in &mut weights {
        *w /= total;
    }
    let species_embed = match &pdd.species {
        Some(zs) => {
            let expected = table.map(|t| t.dim).unwrap_or(118);
            if expected != config.species_dim {
                return Err(PstError::ShapeMismatch(format!(
                    "species embedding width {expected} vs config.species_dim {}",
                    config.species_dim
                )));
            }
            zs.iter()
                .map(|&z| species_embedding(z, table))
                .collect::<Result<Vec<_>, _>>()?
        }
        None => vec![vec![0.0; config.species_dim]; rows.len()],
    };
    Ok(PstInput::unpadded(rows, weights, species_embed))
}

#[derive(Debug, Clone)]
pub struct DatasetRecord {
    pub id: String,
    pub pdd: Pdd,
    pub target: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainOpts {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Subtract the dataset mean from targets before fitting; predictions
    /// add it back.
    pub shift_targets: bool,
}

impl Default for TrainOpts {
    fn default() -> Self {
        TrainOpts {
            epochs: 100,
            lr: 1e-3,
            weight_decay: 1e-5,
            shift_targets: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_mae: f64,
    pub val_mae: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EncoderJson {
    ln_gain: Vec<f64>,
    ln_bias: Vec<f64>,
    w_q: Vec<Vec<f64>>,
    w_k: Vec<Vec<f64>>,
    w_v: Vec<Vec<f64>>,
    slp_w: Vec<Vec<f64>>,
    slp_b: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ParamsJson {
    w_s: Vec<Vec<f64>>,
    w_c: Vec<Vec<f64>>,
    encoders: Vec<EncoderJson>,
    head_w: Vec<f64>,
    head_b: f64,
}

fn mat_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| m.row(i).iter().copied().collect())
        .collect()
}

fn rows_to_mat(rows: &[Vec<f64>], name: &str) -> Result<DMatrix<f64>, PstError> {
    let nrows = rows.len();
    let ncols = rows.first().map(|r| r.len()).unwrap_or(0);
    if nrows == 0 || ncols == 0 || rows.iter().any(|r| r.len() != ncols) {
        return Err(PstError::InvalidCheckpoint(format!(
            "{name} is empty or ragged"
        )));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

fn params_to_json(p: &PstParams) -> ParamsJson {
    ParamsJson {
        w_s: mat_to_rows(&p.w_s),
        w_c: mat_to_rows(&p.w_c),
        encoders: p
            .encoders
            .iter()
            .map(|e| EncoderJson {
                ln_gain: e.ln_gain.iter().copied().collect(),
                ln_bias: e.ln_bias.iter().copied().collect(),
                w_q: mat_to_rows(&e.w_q),
                w_k: mat_to_rows(&e.w_k),
                w_v: mat_to_rows(&e.w_v),
                slp_w: mat_to_rows(&e.slp_w),
                slp_b: e.slp_b.iter().copied().collect(),
            })
            .collect(),
        head_w: p.head_w.iter().copied().collect(),
        head_b: p.head_b,
    }
}

fn params_from_json(j: &ParamsJson) -> Result<PstParams, PstError> {
    Ok(PstParams {
        w_s: rows_to_mat(&j.w_s, "w_s")?,
        w_c: rows_to_mat(&j.w_c, "w_c")?,
        encoders: j
            .encoders
            .iter()
            .enumerate()
            .map(|(i, e)| {
                Ok(EncoderParams {
                    ln_gain: DVector::from_row_slice(&e.ln_gain),
                    ln_bias: DVector::from_row_slice(&e.ln_bias),
                    w_q: rows_to_mat(&e.w_q, &format!("encoder {i} w_q"))?,
                    w_k: rows_to_mat(&e.w_k, &format!("encoder {i} w_k"))?,
                    w_v: rows_to_mat(&e.w_v, &format!("encoder {i} w_v"))?,
                    slp_w: rows_to_mat(&e.slp_w, &format!("encoder {i} slp_w"))?,
                    slp_b: DVector::from_row_slice(&e.slp_b),
                })
            })
            .collect::<Result<Vec<_>, PstError>>()?,
        head_w: DVector::from_row_slice(&j.head_w),
        head_b: j.head_b,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointJson {
    config: PstConfig,
    params: ParamsJson,
    norm: NormStats,
    target_shift: f64,
    embedding: Option<EmbeddingTable>,
}

/// A trained model plus everything needed to reproduce its predictions:
/// config, tensors, column normalization, and the target shift.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: PstConfig,
    pub params: PstParams,
    pub norm: NormStats,
    pub target_shift: f64,
    pub embedding: Option<EmbeddingTable>,
}

impl Checkpoint {
    pub fn to_json(&self) -> String {
        let j = CheckpointJson {
            config: self.config.clone(),
            params: params_to_json(&self.params),
            norm: self.norm.clone(),
            target_shift: self.target_shift,
            embedding: self.embedding.clone(),
        };
        serde_json::to_string_pretty(&j).expect("checkpoint serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Checkpoint, PstError> {
        let j: CheckpointJson = serde_json::from_str(text)
            .map_err(|e| PstError::InvalidCheckpoint(e.to_string()))?;
        let params = params_from_json(&j.params)?;
        params
            .validate(&j.config)
            .map_err(|e| PstError::InvalidCheckpoint(e.to_string()))?;
        if j.norm.min.len() != j.config.k || j.norm.max.len() != j.config.k {
            return Err(PstError::InvalidCheckpoint(format!(
                "normalization width {} vs k = {}",
                j.norm.min.len(),
                j.config.k
            )));
        }
        Ok(Checkpoint {
            config: j.config,
            params,
            norm: j.norm,
            target_shift: j.target_shift,
            embedding: j.embedding,
        })
    }
}

fn mae(
    inputs: &[PstInput],
    targets: &[f64],
    idx: &[usize],
    params: &PstParams,
    config: &PstConfig,
) -> Result<f64, PstError> {
    let mut total = 0.0;
    for &i in idx {
        let (pred, _) = forward(&inputs[i], params, config, &Dropout::Off)?;
        total += (pred - targets[i]).abs();
    }
    Ok(total / idx.len() as f64)
}

/// Trains with AdamW (betas 0.9/0.999, eps 1e-8, decoupled weight decay)
/// under a cosine learning-rate schedule, minimizing mean absolute error.
/// The 90/10 train/validation split, the batch order, and the dropout
/// masks all derive from `config.seed`, so a rerun reproduces the same
/// checkpoint byte for byte.
pub fn train(
    records: &[DatasetRecord],
    config: &PstConfig,
    opts: &TrainOpts,
    table: Option<EmbeddingTable>,
) -> Result<(Checkpoint, Vec<EpochStats>), PstError> {
    if records.is_empty() {
        return Err(PstError::EmptyDataset);
    }
    config.validate()?;
    if !(opts.lr.is_finite() && opts.lr > 0.0) || !(opts.weight_decay.is_finite()) {
        return Err(PstError::ShapeMismatch(
            "learning rate must be positive and finite".into(),
        ));
    }

    let norm = normalize_columns(records)?;
    let target_shift = if opts.shift_targets {
        records.iter().map(|r| r.target).sum::<f64>() / records.len() as f64
    } else {
        0.0
    };
    let targets: Vec<f64> = records.iter().map(|r| r.target - target_shift).collect();
    if targets.iter().any(|t| !t.is_finite()) {
        return Err(PstError::ShapeMismatch("non-finite target".into()));
    }
    let inputs: Vec<PstInput> = records
        .iter()
        .map(|r| build_input(&r.pdd, &norm, table.as_ref(), config))
        .collect::<Result<_, _>>()?;

    let n = records.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut split_rng = ChaCha8Rng::seed_from_u64(config.seed);
    split_rng.set_stream(1);
    order.shuffle(&mut split_rng);
    let val_len = if n >= 2 { (n / 10).max(1) } else { 0 };
    let val_idx: Vec<usize> = order[..val_len].to_vec();
    let train_idx: Vec<usize> = order[val_len..].to_vec();

    let params = PstParams::init(config)?;
    let mut flat = params.flatten();
    let mut m = vec![0.0; flat.len()];
    let mut v = vec![0.0; flat.len()];
    let (b1, b2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
    let batch_size = if train_idx.len() < 5000 { 32 } else { 64 };
    let mut history = Vec::with_capacity(opts.epochs);
    let mut adam_t = 0u32;
    let mut dropout_step = 0u64;

    for epoch in 0..opts.epochs {
        let lr = opts.lr
            * 0.5
            * (1.0 + (std::f64::consts::PI * epoch as f64 / opts.epochs as f64).cos());
        let mut epoch_order = train_idx.clone();
        let mut epoch_rng = ChaCha8Rng::seed_from_u64(config.seed);
        epoch_rng.set_stream(2 + epoch as u64);
        epoch_order.shuffle(&mut epoch_rng);

        for (batch_no, batch) in epoch_order.chunks(batch_size).enumerate() {
            let params = PstParams::from_flat(config, &flat)?;
            let r_max = batch.iter().map(|&i| inputs[i].rows.len()).max().unwrap();
            let mut grad_acc = vec![0.0; flat.len()];
            let mut batch_loss = 0.0;
            for &i in batch {
                let mut input = inputs[i].clone();
                input.pad_to(r_max, config.k, config.species_dim);
                let dropout = Dropout::Seeded {
                    seed: config.seed,
                    step: dropout_step,
                };
                dropout_step += 1;
                // d/dpred of |pred - y|, averaged over the batch.
                let (pred, _) = forward(&input, &params, config, &dropout)?;
                let sign = (pred - targets[i]).signum() * f64::from((pred - targets[i]) != 0.0);
                let upstream = sign / batch.len() as f64;
                let (_, grads) = super::backward(&input, &params, config, &dropout, upstream)?;
                for (acc, g) in grad_acc.iter_mut().zip(grads.flatten()) {
                    *acc += g;
                }
                batch_loss += (pred - targets[i]).abs() / batch.len() as f64;
            }
            if !batch_loss.is_finite() {
                return Err(PstError::NonFiniteLoss {
                    epoch,
                    batch: batch_no,
                });
            }
            adam_t += 1;
            let bc1 = 1.0 - b1.powi(adam_t as i32);
            let bc2 = 1.0 - b2.powi(adam_t as i32);
            for j in 0..flat.len() {
                flat[j] -= lr * opts.weight_decay * flat[j];
                m[j] = b1 * m[j] + (1.0 - b1) * grad_acc[j];
                v[j] = b2 * v[j] + (1.0 - b2) * grad_acc[j] * grad_acc[j];
                flat[j] -= lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + eps);
            }
        }

        let params = PstParams::from_flat(config, &flat)?;
        let train_mae = mae(&inputs, &targets, &train_idx, &params, config)?;
        let val_mae = if val_idx.is_empty() {
            train_mae
        } else {
            mae(&inputs, &targets, &val_idx, &params, config)?
        };
        history.push(EpochStats {
            epoch,
            train_mae,
            val_mae,
        });
    }

    Ok((
        Checkpoint {
            config: config.clone(),
            params: PstParams::from_flat(config, &flat)?,
            norm,
            target_shift,
            embedding: table,
        },
        history,
    ))
}

/// Runs a checkpoint on a batch of PDDs, inverting the target shift.
pub fn predict(checkpoint: &Checkpoint, pdds: &[Pdd]) -> Result<Vec<f64>, PstError> {
    pdds.iter()
        .map(|p| {
            let input = build_input(
                p,
                &checkpoint.norm,
                checkpoint.embedding.as_ref(),
                &checkpoint.config,
            )?;
            let (pred, _) = forward(&input, &checkpoint.params, &checkpoint.config, &Dropout::Off)?;
            Ok(pred + checkpoint.target_shift)
        })
        .collect()
}
