//! Earth mover's distance between collapsed distance distributions.
//!
//! Comparing two PDDs is a balanced transportation problem: row weights are
//! supplies and demands, and the ground cost between two rows is the
//! chebyshev distance. Solved exactly with successive shortest paths, so the
//! result is the true optimum rather than a Sinkhorn-style approximation.

use crate::pdd::Pdd;
use rayon::prelude::*;
use std::cmp::Ordering;
use std::collections::BinaryHeap;

#[derive(Debug, thiserror::Error)]
pub enum MetricError {
    #[error("rows have different lengths: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("PDDs have different k: {0} vs {1}")]
    KMismatch(usize, usize),
}

/// Ground metrics between PDD rows. The earth mover's distance inherits the
/// metric axioms from whichever one is used; chebyshev is the default
/// throughout because it matches the collapse tolerance semantics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroundMetric {
    Chebyshev,
    Euclidean,
    Manhattan,
}

impl GroundMetric {
    pub fn distance(&self, a: &[f64], b: &[f64]) -> Result<f64, MetricError> {
        if a.len() != b.len() {
            return Err(MetricError::LengthMismatch(a.len(), b.len()));
        }
        Ok(match self {
            GroundMetric::Chebyshev => a
                .iter()
                .zip(b)
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max),
            GroundMetric::Euclidean => a
                .iter()
                .zip(b)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt(),
            GroundMetric::Manhattan => a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum(),
        })
    }
}

/// Chebyshev distance between two equal-length rows.
pub fn ground_distance(a: &[f64], b: &[f64]) -> Result<f64, MetricError> {
    GroundMetric::Chebyshev.distance(a, b)
}

/// An optimal transport plan: every entry moves `mass > 0` from row `i` of
/// the first distribution to row `j` of the second, the per-row sums match
/// the two weight vectors, and `cost` is the mass-weighted total ground
/// distance.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TransportPlan {
    pub cost: f64,
    pub flows: Vec<(usize, usize, f64)>,
}

/// Exact earth mover's distance between two PDDs with equal k.
///
/// The solve runs in a canonical argument order (swapping back afterwards),
/// which makes `emd(p, q)` and `emd(q, p)` bitwise identical.
pub fn emd(p: &Pdd, q: &Pdd) -> Result<TransportPlan, MetricError> {
    emd_with_metric(p, q, GroundMetric::Chebyshev)
}

pub fn emd_with_metric(p: &Pdd, q: &Pdd, metric: GroundMetric) -> Result<TransportPlan, MetricError> {
    if p.k != q.k {
        return Err(MetricError::KMismatch(p.k, q.k));
    }
    let swap = canonical_order(p, q) == Ordering::Greater;
    let (p, q) = if swap { (q, p) } else { (p, q) };
    let mut cost = vec![vec![0.0; q.len()]; p.len()];
    for (i, ri) in p.rows.iter().enumerate() {
        for (j, rj) in q.rows.iter().enumerate() {
            cost[i][j] = metric.distance(ri, rj)?;
        }
    }
    let mut plan = min_cost_transport(&p.weights, &q.weights, &cost);
    if swap {
        for f in &mut plan.flows {
            *f = (f.1, f.0, f.2);
        }
        plan.flows.sort_by_key(|f| (f.0, f.1));
    }
    Ok(plan)
}

fn canonical_order(p: &Pdd, q: &Pdd) -> Ordering {
    let rows = |a: &Pdd| a.rows.iter().flatten().copied().collect::<Vec<_>>();
    let key = |a: &Pdd| (a.len(), rows(a), a.weights.clone());
    let (kp, kq) = (key(p), key(q));
    kp.0.cmp(&kq.0)
        .then_with(|| lex(&kp.1, &kq.1))
        .then_with(|| lex(&kp.2, &kq.2))
}

fn lex(a: &[f64], b: &[f64]) -> Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.total_cmp(y) {
            Ordering::Equal => continue,
            other => return other,
        }
    }
    a.len().cmp(&b.len())
}

/// Masses below this are treated as fully delivered; keeps the augmenting
/// loop finite under float arithmetic.
const MASS_EPS: f64 = 1e-12;

#[derive(PartialEq)]
struct HeapEntry {
    dist: f64,
    node: usize,
}

impl Eq for HeapEntry {}

impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        // Reversed so BinaryHeap pops the smallest distance first.
        other
            .dist
            .total_cmp(&self.dist)
            .then_with(|| other.node.cmp(&self.node))
    }
}

/// Successive shortest paths with Johnson potentials on the dense bipartite
/// transportation graph. Exact optimum up to float rounding; supplies and
/// demands must balance.
fn min_cost_transport(a: &[f64], b: &[f64], cost: &[Vec<f64>]) -> TransportPlan {
    let (na, nb) = (a.len(), b.len());
    let sa: f64 = a.iter().sum();
    let sb: f64 = b.iter().sum();
    assert!(
        (sa - sb).abs() <= 1e-9,
        "transport problem must balance: {sa} vs {sb}"
    );

    // Nodes: 0..na sources, na..na+nb sinks, then a virtual source/target.
    let s = na + nb;
    let t = na + nb + 1;
    let n = na + nb + 2;
    let mut supply_left = a.to_vec();
    let mut demand_left = b.to_vec();
    let mut flow = vec![vec![0.0; nb]; na];
    let mut pi = vec![0.0; n];
    let mut total_left = sa.min(sb);

    while total_left > MASS_EPS {
        // Dijkstra over reduced costs; parents record the arc taken.
        let mut dist = vec![f64::INFINITY; n];
        let mut parent: Vec<usize> = vec![usize::MAX; n];
        let mut heap = BinaryHeap::new();
        dist[s] = 0.0;
        heap.push(HeapEntry { dist: 0.0, node: s });
        while let Some(HeapEntry { dist: d, node: u }) = heap.pop() {
            if d > dist[u] {
                continue;
            }
            if u == t {
                break;
            }
            let relax =
                |v: usize, rc: f64, heap: &mut BinaryHeap<HeapEntry>, dist: &mut Vec<f64>, parent: &mut Vec<usize>| {
                    // Potentials keep reduced costs non-negative up to float
                    // rounding; clamp the dust so Dijkstra stays valid.
                    let nd = d + rc.max(0.0);
                    if nd < dist[v] {
                        dist[v] = nd;
                        parent[v] = u;
                        heap.push(HeapEntry { dist: nd, node: v });
                    }
                };
            if u == s {
                for i in 0..na {
                    if supply_left[i] > MASS_EPS {
                        relax(i, pi[s] - pi[i], &mut heap, &mut dist, &mut parent);
                    }
                }
            } else if u < na {
                for j in 0..nb {
                    relax(na + j, cost[u][j] + pi[u] - pi[na + j], &mut heap, &mut dist, &mut parent);
                }
            } else if u < na + nb {
                let j = u - na;
                if demand_left[j] > MASS_EPS {
                    relax(t, pi[u] - pi[t], &mut heap, &mut dist, &mut parent);
                }
                for i in 0..na {
                    if flow[i][j] > MASS_EPS {
                        relax(i, -cost[i][j] + pi[u] - pi[i], &mut heap, &mut dist, &mut parent);
                    }
                }
            }
        }
        if !dist[t].is_finite() {
            // Residual imbalance below float noise; nothing left to route.
            break;
        }
        for v in 0..n {
            pi[v] += dist[v].min(dist[t]);
        }

        // Bottleneck along the path.
        let mut delta = total_left;
        let mut v = t;
        while v != s {
            let u = parent[v];
            if u == s {
                delta = delta.min(supply_left[v]);
            } else if v == t {
                delta = delta.min(demand_left[u - na]);
            } else if u < na {
                // forward arc, unbounded
            } else {
                delta = delta.min(flow[v][u - na]);
            }
            v = u;
        }

        let mut v = t;
        while v != s {
            let u = parent[v];
            if u == s {
                supply_left[v] -= delta;
            } else if v == t {
                demand_left[u - na] -= delta;
            } else if u < na {
                flow[u][v - na] += delta;
            } else {
                flow[v][u - na] -= delta;
            }
            v = u;
        }
        total_left -= delta;
    }

    let mut flows = Vec::new();
    let mut total = 0.0;
    for i in 0..na {
        for j in 0..nb {
            if flow[i][j] > 0.0 {
                flows.push((i, j, flow[i][j]));
                total += flow[i][j] * cost[i][j];
            }
        }
    }
    TransportPlan { cost: total, flows }
}

/// Pairwise EMD matrix; symmetric with a zero diagonal. Upper-triangle cells
/// are independent, so they run in parallel.
pub fn distance_matrix(pdds: &[Pdd]) -> Result<Vec<Vec<f64>>, MetricError> {
    let n = pdds.len();
    for p in pdds.iter().skip(1) {
        if p.k != pdds[0].k {
            return Err(MetricError::KMismatch(pdds[0].k, p.k));
        }
    }
    let pairs: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
        .collect();
    let costs: Vec<((usize, usize), f64)> = pairs
        .par_iter()
        .map(|&(i, j)| emd(&pdds[i], &pdds[j]).map(|p| ((i, j), p.cost)))
        .collect::<Result<_, _>>()?;
    let mut matrix = vec![vec![0.0; n]; n];
    for ((i, j), c) in costs {
        matrix[i][j] = c;
        matrix[j][i] = c;
    }
    Ok(matrix)
}

/// CSV rendering of a distance matrix: a header row of ids, then one row per
/// structure with its id in the first column.
pub fn distance_matrix_to_csv(ids: &[String], matrix: &[Vec<f64>]) -> String {
    let mut out = String::from("id");
    for id in ids {
        out.push(',');
        out.push_str(id);
    }
    out.push('\n');
    for (id, row) in ids.iter().zip(matrix) {
        out.push_str(id);
        for x in row {
            out.push_str(&format!(",{x}"));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pdd_from(weights: Vec<f64>, rows: Vec<Vec<f64>>) -> Pdd {
        Pdd {
            id: "test".into(),
            k: rows[0].len(),
            tolerance: 0.0,
            weights,
            rows,
            species: None,
        }
    }

    #[test]
    fn ground_distance_of_worked_rows_is_0_4() {
        let d = ground_distance(&[2.481, 2.481], &[2.881, 2.881]).unwrap();
        assert!((d - 0.4).abs() <= 1e-12, "{d}");
    }

    #[test]
    fn ground_distance_rejects_ragged_rows() {
        assert!(matches!(
            ground_distance(&[1.0], &[1.0, 2.0]),
            Err(MetricError::LengthMismatch(1, 2))
        ));
    }

    #[test]
    fn self_distance_is_zero_with_diagonal_plan() {
        let p = pdd_from(vec![0.25, 0.75], vec![vec![1.0, 2.0], vec![3.0, 4.0]]);
        let r = emd(&p, &p).unwrap();
        assert_eq!(r.cost, 0.0);
        assert_eq!(r.flows, vec![(0, 0, 0.25), (1, 1, 0.75)]);
    }

    #[test]
    fn singleton_emd_equals_ground_distance() {
        let p = pdd_from(vec![1.0], vec![vec![2.481, 2.481]]);
        let q = pdd_from(vec![1.0], vec![vec![2.881, 2.881]]);
        let r = emd(&p, &q).unwrap();
        assert!((r.cost - 0.4).abs() <= 1e-12);
        assert_eq!(r.flows.len(), 1);
    }

    #[test]
    fn split_mass_routes_to_both_rows() {
        let p = pdd_from(vec![1.0], vec![vec![0.0]]);
        let q = pdd_from(vec![0.3, 0.7], vec![vec![1.0], vec![3.0]]);
        let r = emd(&p, &q).unwrap();
        assert!((r.cost - 2.4).abs() <= 1e-12, "{}", r.cost);
        assert_eq!(r.flows.len(), 2);
        for &(i, j, m) in &r.flows {
            assert_eq!(i, 0);
            let want = if j == 0 { 0.3 } else { 0.7 };
            assert!((m - want).abs() <= 1e-12);
        }
    }

    #[test]
    fn crossing_flows_are_beaten_by_sorted_assignment() {
        // Two rows each; the identity assignment costs 0.2, the crossing 1.8.
        let p = pdd_from(vec![0.5, 0.5], vec![vec![1.0], vec![2.0]]);
        let q = pdd_from(vec![0.5, 0.5], vec![vec![1.1], vec![2.1]]);
        let r = emd(&p, &q).unwrap();
        assert!((r.cost - 0.1).abs() <= 1e-12, "{}", r.cost);
    }

    #[test]
    fn k_mismatch_is_reported() {
        let p = pdd_from(vec![1.0], vec![vec![1.0, 2.0]]);
        let q = pdd_from(vec![1.0], vec![vec![1.0]]);
        match emd(&p, &q) {
            Err(MetricError::KMismatch(2, 1)) => {}
            other => panic!("expected KMismatch, got {other:?}"),
        }
    }

    #[test]
    fn argument_order_does_not_change_the_cost_bitwise() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let build = |rng: &mut rand_chacha::ChaCha8Rng| {
                let r = rng.random_range(1..5usize);
                let mut weights: Vec<f64> = (0..r).map(|_| rng.random_range(0.1..1.0)).collect();
                let total: f64 = weights.iter().sum();
                weights.iter_mut().for_each(|w| *w /= total);
                let rows = (0..r)
                    .map(|_| {
                        let mut row: Vec<f64> = (0..3).map(|_| rng.random_range(0.5..4.0)).collect();
                        row.sort_by(f64::total_cmp);
                        row
                    })
                    .collect();
                pdd_from(weights, rows)
            };
            let p = build(&mut rng);
            let q = build(&mut rng);
            let pq = emd(&p, &q).unwrap();
            let qp = emd(&q, &p).unwrap();
            assert_eq!(pq.cost, qp.cost, "costs must match bitwise");
            let mut flipped: Vec<_> = qp.flows.iter().map(|&(i, j, m)| (j, i, m)).collect();
            flipped.sort_by_key(|f| (f.0, f.1));
            assert_eq!(pq.flows, flipped);
        }
    }

    #[test]
    fn plan_marginals_conserve_mass() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let (na, nb) = (rng.random_range(1..6), rng.random_range(1..6));
            let norm = |mut w: Vec<f64>| {
                let t: f64 = w.iter().sum();
                w.iter_mut().for_each(|x| *x /= t);
                w
            };
            let a = norm((0..na).map(|_| rng.random_range(0.05..1.0)).collect());
            let b = norm((0..nb).map(|_| rng.random_range(0.05..1.0)).collect());
            let cost: Vec<Vec<f64>> = (0..na)
                .map(|_| (0..nb).map(|_| rng.random_range(0.0..3.0)).collect())
                .collect();
            let plan = min_cost_transport(&a, &b, &cost);
            let mut out = vec![0.0; na];
            let mut into = vec![0.0; nb];
            for &(i, j, m) in &plan.flows {
                assert!(m > 0.0);
                out[i] += m;
                into[j] += m;
            }
            for (x, y) in out.iter().zip(&a) {
                assert!((x - y).abs() <= 1e-9, "source marginal {x} vs {y}");
            }
            for (x, y) in into.iter().zip(&b) {
                assert!((x - y).abs() <= 1e-9, "sink marginal {x} vs {y}");
            }
            let recomputed: f64 = plan.flows.iter().map(|&(i, j, m)| m * cost[i][j]).sum();
            assert!((recomputed - plan.cost).abs() <= 1e-9);
        }
    }

    #[test]
    fn distance_matrix_is_symmetric_zero_diagonal() {
        let pdds = vec![
            pdd_from(vec![1.0], vec![vec![1.0]]),
            pdd_from(vec![1.0], vec![vec![2.0]]),
            pdd_from(vec![0.5, 0.5], vec![vec![1.0], vec![2.0]]),
        ];
        let m = distance_matrix(&pdds).unwrap();
        for (i, row) in m.iter().enumerate() {
            assert_eq!(row[i], 0.0);
            for (j, &v) in row.iter().enumerate() {
                assert_eq!(v, m[j][i]);
            }
        }
        assert!((m[0][1] - 1.0).abs() <= 1e-12);
        assert!((m[0][2] - 0.5).abs() <= 1e-12);

        let csv = distance_matrix_to_csv(
            &["a".into(), "b".into(), "c".into()],
            &m,
        );
        assert!(csv.starts_with("id,a,b,c\n"));
        assert!(csv.lines().count() == 4);
    }
}
