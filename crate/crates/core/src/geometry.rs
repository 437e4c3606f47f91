//! Lattices, motifs and the periodic point sets they generate.
//!
//! Conventions used throughout the crate:
//! - A lattice basis is a right-handed 3x3 matrix whose *rows* are the cell
//!   vectors, so a fractional coordinate row-vector `f` maps to the cartesian
//!   point `f * B`.
//! - Fractional coordinates live in `[0, 1)^3`; species are atomic numbers.
//! - Cell parameters `(a, b, c, alpha, beta, gamma)` use angstroms and
//!   degrees, and `cell_params_to_basis` orients `a` along +x and `b` in the
//!   xy-plane with positive y.

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum GeometryError {
    #[error("degenerate cell: {0}")]
    DegenerateCell(String),
    #[error("invalid basis: {0}")]
    InvalidBasis(String),
    #[error("invalid isometry: {0}")]
    InvalidIsometry(String),
    #[error("supercell would contain {points} points, over the limit of {limit}")]
    Overflow { points: usize, limit: usize },
    #[error("generation failed: {0}")]
    GenerationFailed(String),
    #[error("invalid periodic set: {0}")]
    InvalidSet(String),
}

/// Default cap on the number of motif points a supercell may contain.
pub const MAX_SUPERCELL_POINTS: usize = 100_000;

/// Wraps a fractional coordinate into `[0, 1)`.
///
/// Values within 1e-12 of 1.0 wrap to exactly 0.0 so that coordinates that
/// drift just below a cell boundary do not produce spurious points at ~1.0.
pub fn wrap_frac(x: f64) -> f64 {
    let y = x - x.floor();
    if 1.0 - y <= 1e-12 {
        0.0
    } else {
        y
    }
}

fn wrap_vec(v: &Vector3<f64>) -> Vector3<f64> {
    Vector3::new(wrap_frac(v.x), wrap_frac(v.y), wrap_frac(v.z))
}

/// A right-handed lattice basis; rows are the cell vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct LatticeBasis {
    rows: Matrix3<f64>,
}

impl LatticeBasis {
    /// Validates that the rows span a proper right-handed cell.
    pub fn new(rows: Matrix3<f64>) -> Result<Self, GeometryError> {
        if rows.iter().any(|x| !x.is_finite()) {
            return Err(GeometryError::InvalidBasis("non-finite entry".into()));
        }
        let det = rows.determinant();
        if det.is_nan() || det <= 0.0 {
            return Err(GeometryError::InvalidBasis(format!(
                "determinant must be strictly positive, got {det}"
            )));
        }
        Ok(Self { rows })
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.rows
    }

    /// Cell vectors `v1, v2, v3`.
    pub fn vectors(&self) -> [Vector3<f64>; 3] {
        [
            self.rows.row(0).transpose(),
            self.rows.row(1).transpose(),
            self.rows.row(2).transpose(),
        ]
    }

    pub fn volume(&self) -> f64 {
        self.rows.determinant()
    }

    pub fn to_cartesian(&self, frac: &Vector3<f64>) -> Vector3<f64> {
        // f * B as row vectors == B^T * f as column vectors.
        self.rows.tr_mul(frac)
    }

    pub fn to_fractional(&self, cart: &Vector3<f64>) -> Vector3<f64> {
        let inv = self
            .rows
            .try_inverse()
            .expect("validated basis is invertible");
        inv.tr_mul(cart)
    }

    /// Cell parameters `(a, b, c, alpha, beta, gamma)` in angstroms/degrees.
    pub fn cell_parameters(&self) -> [f64; 6] {
        let [v1, v2, v3] = self.vectors();
        let (a, b, c) = (v1.norm(), v2.norm(), v3.norm());
        let angle = |u: &Vector3<f64>, w: &Vector3<f64>| {
            (u.dot(w) / (u.norm() * w.norm())).clamp(-1.0, 1.0).acos().to_degrees()
        };
        [a, b, c, angle(&v2, &v3), angle(&v1, &v3), angle(&v1, &v2)]
    }

    /// Minimal spacing between adjacent lattice planes.
    ///
    /// Any nonzero lattice vector `n * B` with `||n||_inf = s` has length at
    /// least `s` times this value, which is what bounds shell expansion during
    /// nearest-neighbour searches.
    pub fn min_plane_spacing(&self) -> f64 {
        let inv = self
            .rows
            .try_inverse()
            .expect("validated basis is invertible");
        // Row i of (B^-1)^T is dual to v_i; plane spacing is 1 / |row|.
        (0..3)
            .map(|i| 1.0 / inv.column(i).norm())
            .fold(f64::INFINITY, f64::min)
    }

    /// Diameter of the unit cell parallelepiped (longest space diagonal).
    pub fn cell_diameter(&self) -> f64 {
        let [v1, v2, v3] = self.vectors();
        let mut best: f64 = 0.0;
        for s2 in [-1.0, 1.0] {
            for s3 in [-1.0, 1.0] {
                best = best.max((v1 + s2 * v2 + s3 * v3).norm());
            }
        }
        best
    }
}

/// Builds a basis from cell parameters (degrees), orienting `a` along +x and
/// `b` in the xy-plane; the `c` vector gets the positive-z solution.
pub fn cell_params_to_basis(
    a: f64,
    b: f64,
    c: f64,
    alpha: f64,
    beta: f64,
    gamma: f64,
) -> Result<LatticeBasis, GeometryError> {
    for (name, v) in [("a", a), ("b", b), ("c", c)] {
        if !(v.is_finite() && v > 0.0) {
            return Err(GeometryError::DegenerateCell(format!(
                "cell length {name} must be positive and finite, got {v}"
            )));
        }
    }
    for (name, v) in [("alpha", alpha), ("beta", beta), ("gamma", gamma)] {
        if !(v.is_finite() && v > 0.0 && v < 180.0) {
            return Err(GeometryError::DegenerateCell(format!(
                "cell angle {name} must lie strictly between 0 and 180 degrees, got {v}"
            )));
        }
    }
    let (ca, cb, cg) = (
        alpha.to_radians().cos(),
        beta.to_radians().cos(),
        gamma.to_radians().cos(),
    );
    let sg = gamma.to_radians().sin();
    let v1 = Vector3::new(a, 0.0, 0.0);
    let v2 = Vector3::new(b * cg, b * sg, 0.0);
    let cx = c * cb;
    let cy = c * (ca - cb * cg) / sg;
    let cz2 = c * c - cx * cx - cy * cy;
    if cz2 <= c * c * 1e-12 {
        return Err(GeometryError::DegenerateCell(format!(
            "angles ({alpha}, {beta}, {gamma}) leave no room for a third cell vector"
        )));
    }
    let v3 = Vector3::new(cx, cy, cz2.sqrt());
    LatticeBasis::new(Matrix3::from_rows(&[
        v1.transpose(),
        v2.transpose(),
        v3.transpose(),
    ]))
}

/// Fractional motif positions plus their species (atomic numbers).
#[derive(Debug, Clone, PartialEq)]
pub struct Motif {
    pub positions: Vec<Vector3<f64>>,
    pub species: Vec<u8>,
}

impl Motif {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// A periodic point set: every `motif` point repeated over the whole lattice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PeriodicSetJson", into = "PeriodicSetJson")]
pub struct PeriodicSet {
    pub id: String,
    pub basis: LatticeBasis,
    pub motif: Motif,
}

#[derive(Serialize, Deserialize)]
struct PeriodicSetJson {
    id: String,
    basis: [[f64; 3]; 3],
    frac_coords: Vec<[f64; 3]>,
    species: Vec<u8>,
}

impl From<PeriodicSet> for PeriodicSetJson {
    fn from(s: PeriodicSet) -> Self {
        PeriodicSetJson {
            id: s.id,
            basis: [
                s.basis.vectors()[0].into(),
                s.basis.vectors()[1].into(),
                s.basis.vectors()[2].into(),
            ],
            frac_coords: s.motif.positions.iter().map(|p| [p.x, p.y, p.z]).collect(),
            species: s.motif.species,
        }
    }
}

impl TryFrom<PeriodicSetJson> for PeriodicSet {
    type Error = GeometryError;

    fn try_from(j: PeriodicSetJson) -> Result<Self, GeometryError> {
        let rows = Matrix3::from_rows(&[
            Vector3::from(j.basis[0]).transpose(),
            Vector3::from(j.basis[1]).transpose(),
            Vector3::from(j.basis[2]).transpose(),
        ]);
        let positions: Vec<Vector3<f64>> =
            j.frac_coords.iter().map(|p| Vector3::from(*p)).collect();
        PeriodicSet::new(j.id, LatticeBasis::new(rows)?, positions, j.species)
    }
}

impl PeriodicSet {
    /// Wraps all coordinates into `[0, 1)` and validates shapes.
    pub fn new(
        id: impl Into<String>,
        basis: LatticeBasis,
        positions: Vec<Vector3<f64>>,
        species: Vec<u8>,
    ) -> Result<Self, GeometryError> {
        if positions.is_empty() {
            return Err(GeometryError::InvalidSet("empty motif".into()));
        }
        if positions.len() != species.len() {
            return Err(GeometryError::InvalidSet(format!(
                "{} positions but {} species",
                positions.len(),
                species.len()
            )));
        }
        if positions.iter().any(|p| p.iter().any(|x| !x.is_finite())) {
            return Err(GeometryError::InvalidSet("non-finite coordinate".into()));
        }
        Ok(Self {
            id: id.into(),
            basis,
            motif: Motif {
                positions: positions.iter().map(wrap_vec).collect(),
                species,
            },
        })
    }

    /// Motif points in cartesian coordinates.
    pub fn cartesian_motif(&self) -> Vec<Vector3<f64>> {
        self.motif
            .positions
            .iter()
            .map(|f| self.basis.to_cartesian(f))
            .collect()
    }
}

/// A rigid motion of euclidean space, `x -> R x + t`, with `R` orthogonal
/// (rotations and reflections both allowed).
#[derive(Debug, Clone)]
pub struct Isometry {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Isometry {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        let err = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        if err.is_nan() || err > 1e-12 {
            return Err(GeometryError::InvalidIsometry(format!(
                "rotation is not orthogonal (max |R^T R - I| = {err:e})"
            )));
        }
        Ok(Self { rotation, translation })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// A random rigid motion; reflections are included half the time.
    pub fn random(rng: &mut impl Rng) -> Self {
        let q = loop {
            let q = Quaternion::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            if q.norm() > 1e-3 {
                break q;
            }
        };
        let mut rotation: Matrix3<f64> =
            *UnitQuaternion::from_quaternion(q).to_rotation_matrix().matrix();
        if rng.random::<bool>() {
            // Compose with a mirror to cover improper isometries.
            for j in 0..3 {
                rotation[(2, j)] = -rotation[(2, j)];
            }
        }
        let translation = Vector3::new(
            rng.random_range(-5.0..5.0),
            rng.random_range(-5.0..5.0),
            rng.random_range(-5.0..5.0),
        );
        Self { rotation, translation }
    }

    pub fn apply_point(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x + self.translation
    }
}

/// Applies a rigid motion to a periodic set, returning the moved set.
///
/// The basis rows are rotated; if the motion is a reflection the rotated
/// basis is left-handed, so the third cell vector is negated (the lattice it
/// generates is unchanged) and motif coordinates are recomputed against the
/// corrected basis.
pub fn apply_isometry(set: &PeriodicSet, iso: &Isometry) -> Result<PeriodicSet, GeometryError> {
    let mut rows = set.basis.matrix() * iso.rotation.transpose();
    if rows.determinant() < 0.0 {
        for j in 0..3 {
            rows[(2, j)] = -rows[(2, j)];
        }
    }
    let basis = LatticeBasis::new(rows)?;
    let positions: Vec<Vector3<f64>> = set
        .cartesian_motif()
        .iter()
        .map(|x| basis.to_fractional(&iso.apply_point(x)))
        .collect();
    PeriodicSet::new(set.id.clone(), basis, positions, set.motif.species.clone())
}

/// Replicates the cell `nx * ny * nz` times. The resulting set describes the
/// same infinite point set with a larger unit cell.
pub fn supercell(
    set: &PeriodicSet,
    nx: usize,
    ny: usize,
    nz: usize,
) -> Result<PeriodicSet, GeometryError> {
    supercell_with_limit(set, nx, ny, nz, MAX_SUPERCELL_POINTS)
}

pub fn supercell_with_limit(
    set: &PeriodicSet,
    nx: usize,
    ny: usize,
    nz: usize,
    limit: usize,
) -> Result<PeriodicSet, GeometryError> {
    if nx == 0 || ny == 0 || nz == 0 {
        return Err(GeometryError::InvalidSet("supercell factors must be >= 1".into()));
    }
    let points = set
        .motif
        .len()
        .checked_mul(nx)
        .and_then(|p| p.checked_mul(ny))
        .and_then(|p| p.checked_mul(nz))
        .ok_or(GeometryError::Overflow { points: usize::MAX, limit })?;
    if points > limit {
        return Err(GeometryError::Overflow { points, limit });
    }
    let [v1, v2, v3] = set.basis.vectors();
    let rows = Matrix3::from_rows(&[
        (nx as f64 * v1).transpose(),
        (ny as f64 * v2).transpose(),
        (nz as f64 * v3).transpose(),
    ]);
    let mut positions = Vec::with_capacity(points);
    let mut species = Vec::with_capacity(points);
    for ix in 0..nx {
        for iy in 0..ny {
            for iz in 0..nz {
                for (p, sp) in set.motif.positions.iter().zip(&set.motif.species) {
                    positions.push(Vector3::new(
                        (p.x + ix as f64) / nx as f64,
                        (p.y + iy as f64) / ny as f64,
                        (p.z + iz as f64) / nz as f64,
                    ));
                    species.push(*sp);
                }
            }
        }
    }
    PeriodicSet::new(set.id.clone(), LatticeBasis::new(rows)?, positions, species)
}

/// Species palette used by the random generator.
pub const SPECIES_PALETTE: [u8; 5] = [1, 6, 8, 14, 26];

const MIN_PAIR_DISTANCE: f64 = 0.1;

/// Generates a random periodic set with `m` motif points.
///
/// The cell is a cube scaled to hold `m` points at roughly unit density and
/// then sheared by `distortion` (0 gives the cube itself; must stay below 1).
/// Motif points keep a minimum pairwise separation of 0.1 angstrom under
/// periodicity. Deterministic for fixed arguments.
pub fn random_periodic_set(
    seed: u64,
    m: usize,
    distortion: f64,
) -> Result<PeriodicSet, GeometryError> {
    if m == 0 {
        return Err(GeometryError::GenerationFailed("motif size must be >= 1".into()));
    }
    if !(0.0..1.0).contains(&distortion) {
        return Err(GeometryError::GenerationFailed(format!(
            "distortion must lie in [0, 1), got {distortion}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let edge = (m as f64).cbrt().max(1.0);

    let mut basis = None;
    for _ in 0..64 {
        let mut rows = Matrix3::identity();
        for i in 0..3 {
            for j in 0..3 {
                rows[(i, j)] += distortion * rng.random_range(-0.25..0.25);
            }
        }
        rows *= edge;
        if rows.determinant() > 0.2 * edge.powi(3) {
            let b = LatticeBasis::new(rows).expect("positive determinant");
            if b.min_plane_spacing() > MIN_PAIR_DISTANCE {
                basis = Some(b);
                break;
            }
        }
    }
    let basis = basis.ok_or_else(|| {
        GeometryError::GenerationFailed("could not draw a well-conditioned cell".into())
    })?;

    let mut positions: Vec<Vector3<f64>> = Vec::with_capacity(m);
    if m == 1 {
        positions.push(Vector3::zeros());
    } else {
        let mut carts: Vec<Vector3<f64>> = Vec::with_capacity(m);
        'points: for _ in 0..m {
            for _ in 0..200 {
                let f = Vector3::new(rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>());
                let cart = basis.to_cartesian(&f);
                let ok = carts.iter().all(|c| {
                    min_image_distance(&basis, &(cart - c)) >= MIN_PAIR_DISTANCE
                });
                if ok {
                    positions.push(wrap_vec(&f));
                    carts.push(cart);
                    continue 'points;
                }
            }
            return Err(GeometryError::GenerationFailed(format!(
                "could not place {m} points at separation {MIN_PAIR_DISTANCE}"
            )));
        }
    }
    let species: Vec<u8> = (0..m)
        .map(|_| SPECIES_PALETTE[rng.random_range(0..SPECIES_PALETTE.len())])
        .collect();
    PeriodicSet::new(format!("random-{seed}-{m}"), basis, positions, species)
}

/// Shortest length of `delta + n * B` over image offsets `n` in `{-1,0,1}^3`.
fn min_image_distance(basis: &LatticeBasis, delta: &Vector3<f64>) -> f64 {
    let [v1, v2, v3] = basis.vectors();
    let mut best = f64::INFINITY;
    for i in -1..=1 {
        for j in -1..=1 {
            for k in -1..=1 {
                let d = delta + i as f64 * v1 + j as f64 * v2 + k as f64 * v3;
                best = best.min(d.norm());
            }
        }
    }
    best
}

/// Displaces every motif point by an independent random cartesian vector of
/// norm at most `eps`, keeping the lattice fixed. `eps == 0` returns the set
/// unchanged.
pub fn perturb_motif(set: &PeriodicSet, seed: u64, eps: f64) -> Result<PeriodicSet, GeometryError> {
    if !(eps >= 0.0 && eps.is_finite()) {
        return Err(GeometryError::InvalidSet(format!(
            "perturbation radius must be finite and >= 0, got {eps}"
        )));
    }
    if eps == 0.0 {
        return Ok(set.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let positions: Vec<Vector3<f64>> = set
        .cartesian_motif()
        .iter()
        .map(|x| {
            let dir = loop {
                let v = Vector3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                );
                let n = v.norm();
                if n > 1e-6 && n <= 1.0 {
                    break v / n;
                }
            };
            // u^(1/3) makes the displacement uniform over the eps-ball.
            let r = eps * rng.random::<f64>().cbrt();
            set.basis.to_fractional(&(x + r * dir))
        })
        .collect();
    PeriodicSet::new(set.id.clone(), set.basis.clone(), positions, set.motif.species.clone())
}

/// Upper bound on the covering radius of the lattice alone.
///
/// Every point of space sits inside some translate of the unit cell, and the
/// distance to the nearest cell corner is at most half the longest space
/// diagonal (a norm is convex, so the maximum over the fractional offset cube
/// `[-1/2, 1/2]^3` is attained at a corner).
pub fn covering_radius_upper_bound(basis: &LatticeBasis) -> f64 {
    0.5 * basis.cell_diameter()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    fn cubic_set(edge: f64) -> PeriodicSet {
        PeriodicSet::new(
            "cube",
            LatticeBasis::new(Matrix3::identity() * edge).unwrap(),
            vec![Vector3::zeros()],
            vec![6],
        )
        .unwrap()
    }

    #[test]
    fn unit_cube_params_give_identity_basis() {
        let b = cell_params_to_basis(1.0, 1.0, 1.0, 90.0, 90.0, 90.0).unwrap();
        let diff = (b.matrix() - Matrix3::identity()).abs().max();
        assert!(diff < 1e-12, "max deviation {diff}");
    }

    #[test]
    fn triclinic_volume_matches_closed_form() {
        // V = abc sqrt(1 - cos^2 a - cos^2 b - cos^2 g + 2 cos a cos b cos g)
        let (a, b, c, al, be, ga) = (3.0, 3.0, 3.0, 60.0, 60.0, 60.0);
        let basis = cell_params_to_basis(a, b, c, al, be, ga).unwrap();
        let (ca, cb, cg) = (
            al.to_radians().cos(),
            be.to_radians().cos(),
            ga.to_radians().cos(),
        );
        let v = a * b * c * (1.0 - ca * ca - cb * cb - cg * cg + 2.0 * ca * cb * cg).sqrt();
        assert_close(basis.volume(), v, 1e-9);
    }

    #[test]
    fn zero_angle_cell_is_rejected() {
        match cell_params_to_basis(1.0, 1.0, 1.0, 0.0, 90.0, 90.0) {
            Err(GeometryError::DegenerateCell(_)) => {}
            other => panic!("expected DegenerateCell, got {other:?}"),
        }
    }

    #[test]
    fn coplanar_angles_are_rejected() {
        match cell_params_to_basis(1.0, 1.0, 1.0, 120.0, 120.0, 120.0) {
            Err(GeometryError::DegenerateCell(_)) => {}
            other => panic!("expected DegenerateCell, got {other:?}"),
        }
    }

    #[test]
    fn cell_parameter_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let a = rng.random_range(0.5..20.0);
            let b = rng.random_range(0.5..20.0);
            let c = rng.random_range(0.5..20.0);
            let al = rng.random_range(40.0..140.0);
            let be = rng.random_range(40.0..140.0);
            let ga = rng.random_range(40.0..140.0);
            let basis = match cell_params_to_basis(a, b, c, al, be, ga) {
                Ok(b) => b,
                Err(_) => continue, // angle triple closes no cell
            };
            let p = basis.cell_parameters();
            let again = cell_params_to_basis(p[0], p[1], p[2], p[3], p[4], p[5]).unwrap();
            let diff = (again.matrix() - basis.matrix()).abs().max();
            assert!(diff < 1e-9, "round trip drifted by {diff}");
        }
    }

    #[test]
    fn wrap_frac_edges() {
        assert_eq!(wrap_frac(0.25), 0.25);
        assert_eq!(wrap_frac(-0.3), 0.7);
        assert_eq!(wrap_frac(2.25), 0.25);
        assert_eq!(wrap_frac(1.0 - 1e-13), 0.0);
        assert_eq!(wrap_frac(-1e-13), 0.0);
    }

    #[test]
    fn reflection_keeps_basis_right_handed() {
        let set = random_periodic_set(11, 4, 0.3).unwrap();
        let mirror = Isometry::new(
            Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0)),
            Vector3::new(0.3, -0.2, 4.0),
        )
        .unwrap();
        let moved = apply_isometry(&set, &mirror).unwrap();
        assert!(moved.basis.volume() > 0.0);
        assert_close(moved.basis.volume(), set.basis.volume(), 1e-9);
    }

    #[test]
    fn isometry_preserves_interpoint_distances() {
        let set = random_periodic_set(3, 5, 0.4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let iso = Isometry::random(&mut rng);
        let moved = apply_isometry(&set, &iso).unwrap();
        let a = set.cartesian_motif();
        let b = moved.cartesian_motif();
        for i in 0..a.len() {
            for j in (i + 1)..a.len() {
                let da = min_image_distance(&set.basis, &(a[i] - a[j]));
                let db = min_image_distance(&moved.basis, &(b[i] - b[j]));
                assert_close(da, db, 1e-9);
            }
        }
    }

    #[test]
    fn non_orthogonal_rotation_is_rejected() {
        let m = Matrix3::identity() * 1.5;
        assert!(matches!(
            Isometry::new(m, Vector3::zeros()),
            Err(GeometryError::InvalidIsometry(_))
        ));
    }

    #[test]
    fn supercell_replicates_motif() {
        let set = cubic_set(1.0);
        let sup = supercell(&set, 2, 2, 2).unwrap();
        assert_eq!(sup.motif.len(), 8);
        assert_close(sup.basis.volume(), 8.0, 1e-12);
        // One atom lands in each octant.
        let mut seen = std::collections::BTreeSet::new();
        for p in &sup.motif.positions {
            seen.insert((
                (p.x * 2.0).floor() as i64,
                (p.y * 2.0).floor() as i64,
                (p.z * 2.0).floor() as i64,
            ));
        }
        assert_eq!(seen.len(), 8);
    }

    #[test]
    fn oversized_supercell_is_rejected() {
        let set = cubic_set(1.0);
        match supercell(&set, 100, 100, 11) {
            Err(GeometryError::Overflow { points, limit }) => {
                assert_eq!(points, 110_000);
                assert_eq!(limit, MAX_SUPERCELL_POINTS);
            }
            other => panic!("expected Overflow, got {other:?}"),
        }
    }

    #[test]
    fn generator_is_deterministic_and_separated() {
        let a = random_periodic_set(42, 12, 0.5).unwrap();
        let b = random_periodic_set(42, 12, 0.5).unwrap();
        assert_eq!(a, b);
        let carts = a.cartesian_motif();
        for i in 0..carts.len() {
            for j in (i + 1)..carts.len() {
                let d = min_image_distance(&a.basis, &(carts[i] - carts[j]));
                assert!(d >= MIN_PAIR_DISTANCE, "pair ({i},{j}) at {d}");
            }
        }
    }

    #[test]
    fn generator_defaults_to_unit_cube_single_atom() {
        let s = random_periodic_set(0, 1, 0.0).unwrap();
        assert_eq!(s.motif.len(), 1);
        assert_eq!(s.motif.positions[0], Vector3::zeros());
        let diff = (s.basis.matrix() - Matrix3::identity()).abs().max();
        assert!(diff == 0.0);
    }

    #[test]
    fn perturb_zero_is_identity() {
        let set = random_periodic_set(5, 6, 0.2).unwrap();
        assert_eq!(perturb_motif(&set, 1, 0.0).unwrap(), set);
    }

    #[test]
    fn perturb_displacements_stay_within_radius() {
        let set = random_periodic_set(5, 6, 0.2).unwrap();
        let eps = 0.05;
        let moved = perturb_motif(&set, 17, eps).unwrap();
        assert_eq!(moved.basis, set.basis);
        for (a, b) in set.cartesian_motif().iter().zip(moved.cartesian_motif()) {
            let d = min_image_distance(&set.basis, &(a - b));
            assert!(d <= eps + 1e-12, "displacement {d} exceeds {eps}");
        }
    }

    #[test]
    fn unit_cube_covering_bound_is_half_sqrt3() {
        let b = LatticeBasis::new(Matrix3::identity()).unwrap();
        assert_close(covering_radius_upper_bound(&b), 3.0_f64.sqrt() / 2.0, 1e-15);
    }

    #[test]
    fn covering_bound_dominates_monte_carlo_estimate() {
        // Lower-bound the covering radius by sampling points in the cell and
        // measuring their distance to the nearest lattice point.
        for seed in 0..50u64 {
            let set = random_periodic_set(seed, 1, 0.6).unwrap();
            let basis = &set.basis;
            let bound = covering_radius_upper_bound(basis);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc0ffee);
            let mut estimate: f64 = 0.0;
            for _ in 0..300 {
                let f = Vector3::new(
                    rng.random::<f64>(),
                    rng.random::<f64>(),
                    rng.random::<f64>(),
                );
                let cart = basis.to_cartesian(&f);
                let mut nearest = f64::INFINITY;
                for i in -2i32..=2 {
                    for j in -2i32..=2 {
                        for k in -2i32..=2 {
                            let lp = basis.to_cartesian(&Vector3::new(i as f64, j as f64, k as f64));
                            nearest = nearest.min((cart - lp).norm());
                        }
                    }
                }
                estimate = estimate.max(nearest);
            }
            assert!(
                estimate <= bound + 1e-12,
                "seed {seed}: Monte-Carlo estimate {estimate} exceeds bound {bound}"
            );
        }
    }

    #[test]
    fn periodic_set_json_round_trip() {
        let set = random_periodic_set(9, 4, 0.3).unwrap();
        let text = serde_json::to_string(&set).unwrap();
        let back: PeriodicSet = serde_json::from_str(&text).unwrap();
        assert_eq!(set, back);
        // Field names are part of the on-disk contract.
        for key in ["\"id\"", "\"basis\"", "\"frac_coords\"", "\"species\""] {
            assert!(text.contains(key), "missing {key} in {text}");
        }
    }

    #[test]
    fn mismatched_species_length_is_rejected() {
        let r = PeriodicSet::new(
            "bad",
            LatticeBasis::new(Matrix3::identity()).unwrap(),
            vec![Vector3::zeros()],
            vec![1, 6],
        );
        assert!(matches!(r, Err(GeometryError::InvalidSet(_))));
    }
}
