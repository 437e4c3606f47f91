//! Shared oracles for integration tests.
//!
//! Everything here recomputes expected values from first principles and must
//! stay independent of the library code paths it checks: the brute-force
//! neighbour search enumerates a fixed supercell instead of expanding shells,
//! and the transport oracle enumerates basic feasible solutions instead of
//! running a flow algorithm.

#![allow(dead_code)]

use pddkit::{Pdd, PeriodicSet};

pub fn assert_close(a: f64, b: f64, tol: f64, what: &str) {
    assert!((a - b).abs() <= tol, "{what}: {a} vs {b} (tol {tol})");
}

/// Asserts two PDDs are entrywise equal within `tol` as weighted row
/// multisets. Lexicographic order is only defined up to exact ties, and rows
/// tied in exact arithmetic (e.g. mutual nearest neighbours sharing their
/// first column) may swap under float noise, so rows are matched by the
/// permutation minimising the worst chebyshev row distance instead of by
/// position. Row counts are small enough to brute-force.
pub fn assert_pdd_equal(a: &Pdd, b: &Pdd, tol: f64, what: &str) {
    assert_eq!(a.len(), b.len(), "{what}: row counts {} vs {}", a.len(), b.len());
    let n = a.len();
    assert!(n <= 9, "{what}: brute-force matcher is for small PDDs");
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = f64::INFINITY;
    permute(&mut perm, 0, &mut |p| {
        let mut worst: f64 = 0.0;
        for (i, &j) in p.iter().enumerate() {
            let dw = (a.weights[i] - b.weights[j]).abs();
            let dr = a.rows[i]
                .iter()
                .zip(&b.rows[j])
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max);
            let sp = match (&a.species, &b.species) {
                (Some(sa), Some(sb)) if sa[i] != sb[j] => f64::INFINITY,
                _ => 0.0,
            };
            worst = worst.max(dw).max(dr).max(sp);
        }
        best = best.min(worst);
    });
    assert!(best <= tol, "{what}: best row matching is off by {best} (tol {tol})");
}

fn permute(perm: &mut Vec<usize>, at: usize, f: &mut impl FnMut(&[usize])) {
    if at == perm.len() {
        f(perm);
        return;
    }
    for i in at..perm.len() {
        perm.swap(at, i);
        permute(perm, at + 1, f);
        perm.swap(at, i);
    }
}

/// k nearest neighbour distances per motif point, found by brute force over a
/// 9 x 9 x 9 block of cells centred on the home cell.
pub fn brute_force_knn(set: &PeriodicSet, k: usize) -> Vec<Vec<f64>> {
    let carts = set.cartesian_motif();
    let [v1, v2, v3] = set.basis.vectors();
    let mut rows = Vec::with_capacity(carts.len());
    for (i, xi) in carts.iter().enumerate() {
        let mut ds: Vec<f64> = Vec::with_capacity(729 * carts.len());
        for a in -4i64..=4 {
            for b in -4i64..=4 {
                for c in -4i64..=4 {
                    let t = a as f64 * v1 + b as f64 * v2 + c as f64 * v3;
                    for (j, xj) in carts.iter().enumerate() {
                        if a == 0 && b == 0 && c == 0 && i == j {
                            continue;
                        }
                        ds.push((xj + t - xi).norm());
                    }
                }
            }
        }
        ds.sort_by(f64::total_cmp);
        assert!(ds.len() >= k, "oracle block too small for k = {k}");
        ds.truncate(k);
        rows.push(ds);
    }
    rows
}

/// A random collapsed distribution with `r` rows of length `k`: positive
/// normalised weights, each row sorted ascending.
pub fn random_pdd(rng: &mut impl rand::Rng, r: usize, k: usize) -> Pdd {
    let mut weights: Vec<f64> = (0..r).map(|_| rng.random_range(0.1..1.0)).collect();
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    let rows = (0..r)
        .map(|_| {
            let mut row: Vec<f64> = (0..k).map(|_| rng.random_range(0.5..4.0)).collect();
            row.sort_by(f64::total_cmp);
            row
        })
        .collect();
    Pdd {
        id: "random".into(),
        k,
        tolerance: 0.0,
        weights,
        rows,
        species: None,
    }
}

/// Minimum transport cost between weight vectors `a` and `b` under `cost`,
/// found by enumerating every basic feasible solution: vertices of the
/// transportation polytope are supported on spanning trees of the complete
/// bipartite graph, so trying all edge subsets of size `na + nb - 1` and
/// solving each tree by leaf elimination visits every vertex. Exponential,
/// fine for na, nb <= 4.
pub fn transport_cost_oracle(a: &[f64], b: &[f64], cost: &[Vec<f64>]) -> f64 {
    let (na, nb) = (a.len(), b.len());
    assert!(na <= 4 && nb <= 4, "oracle is for tiny instances only");
    let edges: Vec<(usize, usize)> = (0..na)
        .flat_map(|i| (0..nb).map(move |j| (i, j)))
        .collect();
    let need = na + nb - 1;
    let mut best = f64::INFINITY;
    let mut chosen = Vec::with_capacity(need);

    #[allow(clippy::too_many_arguments)]
    fn visit(
        edges: &[(usize, usize)],
        start: usize,
        need: usize,
        chosen: &mut Vec<(usize, usize)>,
        a: &[f64],
        b: &[f64],
        cost: &[Vec<f64>],
        best: &mut f64,
    ) {
        if chosen.len() == need {
            if let Some(c) = tree_cost(chosen, a, b, cost) {
                if c < *best {
                    *best = c;
                }
            }
            return;
        }
        if edges.len() - start < need - chosen.len() {
            return;
        }
        chosen.push(edges[start]);
        visit(edges, start + 1, need, chosen, a, b, cost, best);
        chosen.pop();
        visit(edges, start + 1, need, chosen, a, b, cost, best);
    }

    visit(&edges, 0, need, &mut chosen, a, b, cost, &mut best);
    assert!(best.is_finite(), "no feasible tree found");
    best
}

/// Solves the unique flow on a candidate spanning tree by repeatedly
/// saturating leaves; returns its cost if the flow is feasible (and the edge
/// set is actually a tree).
fn tree_cost(edges: &[(usize, usize)], a: &[f64], b: &[f64], cost: &[Vec<f64>]) -> Option<f64> {
    let (na, nb) = (a.len(), b.len());
    let n = na + nb; // sources 0..na, sinks na..na+nb
    let mut remaining: Vec<f64> = a.iter().copied().chain(b.iter().copied()).collect();
    let mut adjacent: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (e, &(i, j)) in edges.iter().enumerate() {
        adjacent[i].push(e);
        adjacent[na + j].push(e);
    }
    let mut done = vec![false; edges.len()];
    let mut degree: Vec<usize> = adjacent.iter().map(Vec::len).collect();
    let mut total = 0.0;
    for _ in 0..edges.len() {
        // A tree always has a leaf; a cyclic edge set runs out of them.
        let leaf = (0..n).find(|&v| degree[v] == 1)?;
        let &e = adjacent[leaf].iter().find(|&&e| !done[e])?;
        let (i, j) = edges[e];
        let flow = remaining[leaf];
        if flow < -1e-9 {
            return None;
        }
        let other = if leaf == i { na + j } else { i };
        remaining[other] -= flow;
        remaining[leaf] = 0.0;
        total += flow * cost[i][j];
        done[e] = true;
        degree[leaf] -= 1;
        degree[other] -= 1;
    }
    // All supply and demand must be consumed.
    remaining.iter().all(|r| r.abs() <= 1e-9).then_some(total)
}
