//! Pointwise distance distributions.
//!
//! The PDD of a periodic set with an m-point motif is an m x k matrix whose
//! i-th row holds the sorted distances from motif point i to its k nearest
//! neighbours in the *infinite* set, plus a weight per row. Rows within a
//! tolerance of each other (chebyshev metric, single linkage) are collapsed
//! into one row carrying the summed weight, and rows are ordered
//! lexicographically, which makes the result independent of motif order and
//! unit-cell choice.

use crate::geometry::{covering_radius_upper_bound, PeriodicSet};
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use std::collections::BinaryHeap;

#[derive(Debug, thiserror::Error)]
pub enum PddError {
    #[error("k must be >= 1")]
    InvalidK,
    #[error("tolerance must be finite and >= 0, got {0}")]
    InvalidTolerance(f64),
    #[error("invalid distance rows: {0}")]
    InvalidRows(String),
    #[error("invalid pdd: {0}")]
    InvalidPdd(String),
}

/// Max-heap entry so a `BinaryHeap` keeps the k smallest squared distances.
#[derive(PartialEq)]
struct MaxDist(f64);

impl Eq for MaxDist {}

impl PartialOrd for MaxDist {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for MaxDist {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

/// Visits every integer offset with chebyshev norm exactly `s`.
fn for_each_shell_offset(s: i64, mut f: impl FnMut(i64, i64, i64)) {
    if s == 0 {
        f(0, 0, 0);
        return;
    }
    for a in [-s, s] {
        for b in -s..=s {
            for c in -s..=s {
                f(a, b, c);
            }
        }
    }
    for b in [-s, s] {
        for a in (-s + 1)..s {
            for c in -s..=s {
                f(a, b, c);
            }
        }
    }
    for c in [-s, s] {
        for a in (-s + 1)..s {
            for b in (-s + 1)..s {
                f(a, b, c);
            }
        }
    }
}

/// Sorted distances from each motif point to its k nearest neighbours in the
/// infinite periodic set (the point itself excluded, other motif copies and
/// lattice translates included). Returns an m x k matrix.
///
/// Lattice translates are visited shell by shell in the chebyshev norm of
/// their integer coordinates. A translate in shell s can reach no closer than
/// `s * min_plane_spacing - cell_diameter`, so once every point's k-th best
/// distance beats that bound for the next shell the search is complete.
pub fn knn_distances(set: &PeriodicSet, k: usize) -> Result<Vec<Vec<f64>>, PddError> {
    if k == 0 {
        return Err(PddError::InvalidK);
    }
    let m = set.motif.len();
    let carts = set.cartesian_motif();
    let lambda = set.basis.min_plane_spacing();
    let diam = set.basis.cell_diameter();
    let [v1, v2, v3] = set.basis.vectors();
    let mut heaps: Vec<BinaryHeap<MaxDist>> =
        (0..m).map(|_| BinaryHeap::with_capacity(k + 1)).collect();

    let mut s: i64 = 0;
    loop {
        for_each_shell_offset(s, |a, b, c| {
            let t = a as f64 * v1 + b as f64 * v2 + c as f64 * v3;
            for j in 0..m {
                let base = carts[j] + t;
                for i in 0..m {
                    if s == 0 && i == j {
                        continue;
                    }
                    let d2 = (base - carts[i]).norm_squared();
                    let heap = &mut heaps[i];
                    if heap.len() < k {
                        heap.push(MaxDist(d2));
                    } else if d2 < heap.peek().expect("heap is full").0 {
                        heap.push(MaxDist(d2));
                        heap.pop();
                    }
                }
            }
        });
        if heaps.iter().all(|h| h.len() == k) {
            let bound = (s + 1) as f64 * lambda - diam;
            if bound > 0.0
                && heaps
                    .iter()
                    .all(|h| h.peek().expect("heap is full").0 < bound * bound)
            {
                break;
            }
        }
        s += 1;
        assert!(s <= 100_000, "neighbour shell expansion failed to terminate");
    }

    Ok(heaps
        .into_iter()
        .map(|h| {
            let mut row: Vec<f64> = h.into_iter().map(|d| d.0.sqrt()).collect();
            row.sort_by(f64::total_cmp);
            row
        })
        .collect())
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self { parent: (0..n).collect() }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.parent[ra.max(rb)] = ra.min(rb);
        }
    }
}

fn chebyshev(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn lex_cmp(a: &[f64], b: &[f64]) -> Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.total_cmp(y) {
            Ordering::Equal => continue,
            other => return other,
        }
    }
    Ordering::Equal
}

fn validate_rows(rows: &[Vec<f64>], species: Option<&[u8]>) -> Result<(), PddError> {
    if rows.is_empty() {
        return Err(PddError::InvalidRows("no rows".into()));
    }
    let k = rows[0].len();
    if k == 0 {
        return Err(PddError::InvalidK);
    }
    for (i, row) in rows.iter().enumerate() {
        if row.len() != k {
            return Err(PddError::InvalidRows(format!(
                "row {i} has {} entries, expected {k}",
                row.len()
            )));
        }
        for (j, x) in row.iter().enumerate() {
            if !(x.is_finite() && *x >= 0.0) {
                return Err(PddError::InvalidRows(format!(
                    "row {i} entry {j} is {x}, expected a finite non-negative distance"
                )));
            }
            if j > 0 && row[j - 1] > *x {
                return Err(PddError::InvalidRows(format!(
                    "row {i} is not sorted ascending at entry {j}"
                )));
            }
        }
    }
    if let Some(sp) = species {
        if sp.len() != rows.len() {
            return Err(PddError::InvalidRows(format!(
                "{} rows but {} species labels",
                rows.len(),
                sp.len()
            )));
        }
    }
    Ok(())
}

/// Groups row indices by single-linkage closure of "chebyshev distance within
/// `tolerance`" (and equal species when labels are given). Groups are listed
/// by their smallest member, members ascending.
pub fn collapse_partition(
    rows: &[Vec<f64>],
    species: Option<&[u8]>,
    tolerance: f64,
) -> Result<Vec<Vec<usize>>, PddError> {
    if !(tolerance.is_finite() && tolerance >= 0.0) {
        return Err(PddError::InvalidTolerance(tolerance));
    }
    validate_rows(rows, species)?;
    let n = rows.len();
    let mut uf = UnionFind::new(n);
    for i in 0..n {
        for j in (i + 1)..n {
            let same_species = species.is_none_or(|sp| sp[i] == sp[j]);
            if same_species && chebyshev(&rows[i], &rows[j]) <= tolerance {
                uf.union(i, j);
            }
        }
    }
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); n];
    for i in 0..n {
        let r = uf.find(i);
        groups[r].push(i);
    }
    Ok(groups.into_iter().filter(|g| !g.is_empty()).collect())
}

/// A collapsed pointwise distance distribution.
///
/// Invariants: every weight is positive and they sum to 1 (within 1e-12 of
/// float rounding); every row is sorted ascending; rows are ordered
/// lexicographically; `species` is present exactly when the collapse was
/// species-aware.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PddJson")]
pub struct Pdd {
    pub id: String,
    pub k: usize,
    pub tolerance: f64,
    pub weights: Vec<f64>,
    pub rows: Vec<Vec<f64>>,
    pub species: Option<Vec<u8>>,
}

#[derive(Deserialize)]
struct PddJson {
    id: String,
    k: usize,
    tolerance: f64,
    weights: Vec<f64>,
    rows: Vec<Vec<f64>>,
    species: Option<Vec<u8>>,
}

impl TryFrom<PddJson> for Pdd {
    type Error = PddError;

    fn try_from(j: PddJson) -> Result<Self, PddError> {
        if j.rows.len() != j.weights.len() {
            return Err(PddError::InvalidPdd(format!(
                "{} rows but {} weights",
                j.rows.len(),
                j.weights.len()
            )));
        }
        if j.rows.first().map(Vec::len) != Some(j.k) {
            return Err(PddError::InvalidPdd(format!(
                "k is {} but rows have {:?} entries",
                j.k,
                j.rows.first().map(Vec::len)
            )));
        }
        validate_rows(&j.rows, j.species.as_deref())?;
        if !(j.tolerance.is_finite() && j.tolerance >= 0.0) {
            return Err(PddError::InvalidTolerance(j.tolerance));
        }
        if j.weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(PddError::InvalidPdd("weights must be positive".into()));
        }
        let total: f64 = j.weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(PddError::InvalidPdd(format!("weights sum to {total}, expected 1")));
        }
        Ok(Pdd {
            id: j.id,
            k: j.k,
            tolerance: j.tolerance,
            weights: j.weights,
            rows: j.rows,
            species: j.species,
        })
    }
}

impl Pdd {
    /// Collapses raw per-point distance rows (uniform weight each) into a
    /// PDD. Pass per-point species labels to make the collapse species-aware;
    /// the returned distribution then carries one label per collapsed row.
    pub fn from_distance_rows(
        id: impl Into<String>,
        rows: Vec<Vec<f64>>,
        species: Option<Vec<u8>>,
        tolerance: f64,
    ) -> Result<Pdd, PddError> {
        let groups = collapse_partition(&rows, species.as_deref(), tolerance)?;
        let n = rows.len();
        let k = rows[0].len();

        struct Entry {
            weight: f64,
            row: Vec<f64>,
            species: Option<u8>,
            first: usize,
        }
        let mut entries: Vec<Entry> = groups
            .iter()
            .map(|g| {
                // Uniform input weights make the weighted mean a plain mean.
                let mut row = vec![0.0; k];
                for &i in g {
                    for (acc, x) in row.iter_mut().zip(&rows[i]) {
                        *acc += x;
                    }
                }
                for acc in &mut row {
                    *acc /= g.len() as f64;
                }
                Entry {
                    weight: g.len() as f64 / n as f64,
                    row,
                    species: species.as_ref().map(|sp| sp[g[0]]),
                    first: g[0],
                }
            })
            .collect();
        entries.sort_by(|a, b| {
            lex_cmp(&a.row, &b.row)
                .then_with(|| a.species.cmp(&b.species))
                .then_with(|| a.first.cmp(&b.first))
        });

        Ok(Pdd {
            id: id.into(),
            k,
            tolerance,
            weights: entries.iter().map(|e| e.weight).collect(),
            species: species.is_some().then(|| {
                entries.iter().map(|e| e.species.expect("species-aware")).collect()
            }),
            rows: entries.into_iter().map(|e| e.row).collect(),
        })
    }

    /// Number of collapsed rows.
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// CSV rendering: a header, then one line per row with the weight first,
    /// the k distances next and the species label last when present.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("weight");
        for i in 1..=self.k {
            out.push_str(&format!(",d_{i}"));
        }
        if self.species.is_some() {
            out.push_str(",species");
        }
        out.push('\n');
        for (i, row) in self.rows.iter().enumerate() {
            out.push_str(&format!("{}", self.weights[i]));
            for d in row {
                out.push_str(&format!(",{d}"));
            }
            if let Some(sp) = &self.species {
                out.push_str(&format!(",{}", sp[i]));
            }
            out.push('\n');
        }
        out
    }
}

/// The pointwise distance distribution of a periodic set.
pub fn pdd(
    set: &PeriodicSet,
    k: usize,
    tolerance: f64,
    species_aware: bool,
) -> Result<Pdd, PddError> {
    let rows = knn_distances(set, k)?;
    let species = species_aware.then(|| set.motif.species.clone());
    Pdd::from_distance_rows(set.id.clone(), rows, species, tolerance)
}

/// Average minimum distance vector: the weighted mean of each PDD column.
pub fn amd(p: &Pdd) -> Vec<f64> {
    let mut out = vec![0.0; p.k];
    for (w, row) in p.weights.iter().zip(&p.rows) {
        for (acc, x) in out.iter_mut().zip(row) {
            *acc += w * x;
        }
    }
    out
}

/// True when every motif point's k-th neighbour distance exceeds twice the
/// covering radius bound of the lattice, the regime in which k is guaranteed
/// large enough to make the PDD generically complete.
pub fn generic_k_upper_bound(set: &PeriodicSet, k: usize) -> Result<bool, PddError> {
    let rows = knn_distances(set, k)?;
    let bound = 2.0 * covering_radius_upper_bound(&set.basis);
    Ok(rows.iter().all(|row| row[k - 1] > bound))
}

/// Smallest k whose collapse partition already equals the partition at
/// `k_max`. Growing k only refines the partition, so the answer certifies
/// that columns beyond it change no groupings up to `k_max`.
pub fn stable_k(
    set: &PeriodicSet,
    k_max: usize,
    tolerance: f64,
    species_aware: bool,
) -> Result<usize, PddError> {
    let rows = knn_distances(set, k_max)?;
    let species = species_aware.then(|| set.motif.species.clone());
    let target = collapse_partition(&rows, species.as_deref(), tolerance)?;
    for k in 1..k_max {
        let prefix: Vec<Vec<f64>> = rows.iter().map(|r| r[..k].to_vec()).collect();
        if collapse_partition(&prefix, species.as_deref(), tolerance)? == target {
            return Ok(k);
        }
    }
    Ok(k_max)
}
