//! Classical (Torgerson) multidimensional scaling.
//!
//! Projects a symmetric distance matrix to low-dimensional coordinates via
//! the double-centred Gram matrix `B = -1/2 J D∘D J` and its top
//! eigenpairs. Distances that are exactly euclidean in `dims` dimensions are
//! reproduced; otherwise negative eigenvalues are clamped to zero (their axes
//! dropped) and the residual shows up in the stress.

use nalgebra::DMatrix;

#[derive(Debug, thiserror::Error)]
pub enum MdsError {
    #[error("distance matrix is not symmetric: {0}")]
    NotSymmetric(String),
    #[error("negative distance at ({i}, {j})")]
    NegativeDistance { i: usize, j: usize },
    #[error("invalid dimension count: {0}")]
    InvalidDims(String),
}

/// A low-dimensional embedding. Coordinates are centred on the origin, and
/// each axis is flipped so its largest-magnitude entry is positive, making
/// the output deterministic.
#[derive(Debug, Clone)]
pub struct Embedding {
    /// n x dims coordinates.
    pub coords: Vec<Vec<f64>>,
    /// sqrt(sum (d - d_hat)^2 / sum d^2) over unordered pairs; 0 for an
    /// exact reconstruction (and for the degenerate all-zero matrix).
    pub stress: f64,
}

pub fn classical_mds(dist: &[Vec<f64>], dims: usize) -> Result<Embedding, MdsError> {
    let n = dist.len();
    if dims == 0 {
        return Err(MdsError::InvalidDims("dims must be >= 1".into()));
    }
    if dims > n {
        return Err(MdsError::InvalidDims(format!("dims {dims} exceeds {n} points")));
    }
    for (i, row) in dist.iter().enumerate() {
        if row.len() != n {
            return Err(MdsError::NotSymmetric(format!(
                "row {i} has {} entries in a {n}-point matrix",
                row.len()
            )));
        }
        for (j, &d) in row.iter().enumerate() {
            if !(d.is_finite() && d >= 0.0) {
                return Err(MdsError::NegativeDistance { i, j });
            }
            if (d - dist[j][i]).abs() > 1e-9 {
                return Err(MdsError::NotSymmetric(format!(
                    "entries ({i},{j}) and ({j},{i}) differ: {d} vs {}",
                    dist[j][i]
                )));
            }
        }
        if dist[i][i] > 1e-9 {
            return Err(MdsError::NotSymmetric(format!(
                "diagonal entry {i} is {}, expected 0",
                dist[i][i]
            )));
        }
    }

    let d2: Vec<Vec<f64>> = dist
        .iter()
        .map(|row| row.iter().map(|d| d * d).collect())
        .collect();
    let row_mean: Vec<f64> = d2.iter().map(|r| r.iter().sum::<f64>() / n as f64).collect();
    let grand = row_mean.iter().sum::<f64>() / n as f64;
    let b = DMatrix::from_fn(n, n, |i, j| {
        -0.5 * (d2[i][j] - row_mean[i] - row_mean[j] + grand)
    });

    let eig = b.symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .total_cmp(&eig.eigenvalues[a])
            .then(a.cmp(&b))
    });

    let mut coords = vec![vec![0.0; dims]; n];
    for (axis, &e) in order.iter().take(dims).enumerate() {
        let scale = eig.eigenvalues[e].max(0.0).sqrt();
        for (i, row) in coords.iter_mut().enumerate() {
            row[axis] = eig.eigenvectors[(i, e)] * scale;
        }
    }

    for axis in 0..dims {
        let mean = coords.iter().map(|c| c[axis]).sum::<f64>() / n as f64;
        let mut extreme = 0usize;
        for i in 0..n {
            coords[i][axis] -= mean;
            if coords[i][axis].abs() > coords[extreme][axis].abs() {
                extreme = i;
            }
        }
        if coords[extreme][axis] < 0.0 {
            for c in coords.iter_mut() {
                c[axis] = -c[axis];
            }
        }
    }

    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            let d_hat = coords[i]
                .iter()
                .zip(&coords[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            num += (dist[i][j] - d_hat) * (dist[i][j] - d_hat);
            den += dist[i][j] * dist[i][j];
        }
    }
    let stress = if den > 0.0 { (num / den).sqrt() } else { 0.0 };

    Ok(Embedding { coords, stress })
}

/// CSV rendering: a stress comment, a header, then one row per id.
pub fn embedding_to_csv(ids: &[String], embedding: &Embedding) -> String {
    let dims = embedding.coords.first().map_or(0, Vec::len);
    let mut out = format!("# stress={}\nid", embedding.stress);
    for axis in 0..dims {
        match axis {
            0 => out.push_str(",x"),
            1 => out.push_str(",y"),
            2 => out.push_str(",z"),
            _ => out.push_str(&format!(",x{axis}")),
        }
    }
    out.push('\n');
    for (id, row) in ids.iter().zip(&embedding.coords) {
        out.push_str(id);
        for x in row {
            out.push_str(&format!(",{x}"));
        }
        out.push('\n');
    }
    out
}
