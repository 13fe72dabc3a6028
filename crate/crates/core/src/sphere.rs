//! Directions on the unit sphere and the antipodally symmetric evaluation grid.
//!
//! Every orientation quantity in diffusion MRI lives on the projective sphere:
//! `u` and `-u` describe the same axis. The grid therefore stores both members
//! of each antipodal pair, and the helpers here know how to collapse them.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A unit-norm direction in three dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 3]", into = "[f64; 3]")]
pub struct UnitDirection(Vector3<f64>);

impl UnitDirection {
    /// Normalizes `(x, y, z)`. Fails on zero or non-finite input.
    pub fn new(x: f64, y: f64, z: f64) -> Result<Self> {
        Self::from_vector(Vector3::new(x, y, z))
    }

    pub fn from_vector(v: Vector3<f64>) -> Result<Self> {
        let norm = v.norm();
        if !norm.is_finite() || norm < 1e-300 {
            return Err(Error::InvalidArgument(format!(
                "cannot normalize vector ({}, {}, {})",
                v.x, v.y, v.z
            )));
        }
        Ok(UnitDirection(v / norm))
    }

    pub const fn x_axis() -> Self {
        UnitDirection(Vector3::new(1.0, 0.0, 0.0))
    }

    pub const fn y_axis() -> Self {
        UnitDirection(Vector3::new(0.0, 1.0, 0.0))
    }

    pub const fn z_axis() -> Self {
        UnitDirection(Vector3::new(0.0, 0.0, 1.0))
    }

    /// Point at polar angle `theta` from +z and azimuth `phi`, both radians.
    pub fn from_spherical(theta: f64, phi: f64) -> Self {
        let s = theta.sin();
        UnitDirection(Vector3::new(s * phi.cos(), s * phi.sin(), theta.cos()))
    }

    pub fn x(&self) -> f64 {
        self.0.x
    }

    pub fn y(&self) -> f64 {
        self.0.y
    }

    pub fn z(&self) -> f64 {
        self.0.z
    }

    pub fn as_vector(&self) -> &Vector3<f64> {
        &self.0
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.0.x, self.0.y, self.0.z]
    }

    pub fn dot(&self, other: &UnitDirection) -> f64 {
        self.0.dot(&other.0)
    }

    /// True when the direction lies in the canonical hemisphere: z > 0, with
    /// ties on the equator broken by y > 0 and then x > 0.
    pub fn is_canonical(&self) -> bool {
        let v = &self.0;
        if v.z != 0.0 {
            v.z > 0.0
        } else if v.y != 0.0 {
            v.y > 0.0
        } else {
            v.x > 0.0
        }
    }

    /// The member of `{self, -self}` in the canonical hemisphere.
    pub fn canonical(self) -> Self {
        if self.is_canonical() {
            self
        } else {
            -self
        }
    }
}

impl std::ops::Neg for UnitDirection {
    type Output = UnitDirection;

    fn neg(self) -> Self::Output {
        UnitDirection(-self.0)
    }
}

impl TryFrom<[f64; 3]> for UnitDirection {
    type Error = Error;

    fn try_from(v: [f64; 3]) -> Result<Self> {
        let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(Error::Validation(format!(
                "direction [{}, {}, {}] is not unit length (norm {norm})",
                v[0], v[1], v[2]
            )));
        }
        if (norm - 1.0).abs() <= 1e-12 {
            // already unit up to rounding; keep the bits so files round-trip
            return Ok(UnitDirection(Vector3::new(v[0], v[1], v[2])));
        }
        UnitDirection::new(v[0], v[1], v[2])
    }
}

impl From<UnitDirection> for [f64; 3] {
    fn from(u: UnitDirection) -> Self {
        u.to_array()
    }
}

/// Angle between two directions in degrees.
///
/// With `antipodal` set the result is `arccos(|a·b|)` in `[0, 90]`, otherwise
/// `arccos(a·b)` in `[0, 180]`. The dot product is clamped before `arccos`.
pub fn angle_between(a: &UnitDirection, b: &UnitDirection, antipodal: bool) -> f64 {
    angle_between_rad(a, b, antipodal).to_degrees()
}

/// Radian version of [`angle_between`].
pub fn angle_between_rad(a: &UnitDirection, b: &UnitDirection, antipodal: bool) -> f64 {
    // atan2 stays accurate for nearly parallel directions, unlike acos
    let d = a.dot(b);
    let d = if antipodal { d.abs() } else { d };
    a.0.cross(&b.0).norm().atan2(d)
}

/// Directions spread near-uniformly over the upper hemisphere (z > 0) on a
/// spherical Fibonacci spiral. Equal-area bands in z, golden-angle azimuths.
pub fn fibonacci_hemisphere(count: usize) -> Vec<UnitDirection> {
    let golden = std::f64::consts::PI * (3.0 - 5.0_f64.sqrt());
    let h = count as f64;
    (0..count)
        .map(|i| {
            let z = 1.0 - (i as f64 + 0.5) / h;
            let r = (1.0 - z * z).max(0.0).sqrt();
            let phi = golden * i as f64;
            UnitDirection(Vector3::new(r * phi.cos(), r * phi.sin(), z))
        })
        .collect()
}

/// Default grid size.
pub const DEFAULT_GRID_SIZE: usize = 724;

const NEAREST_NEIGHBORS: usize = 6;

/// Antipodally symmetric spherical grid with a neighbor graph.
///
/// Directions `0..N/2` lie in the canonical hemisphere and direction
/// `i + N/2` is the negation of direction `i`.
#[derive(Debug, Clone)]
pub struct SphereGrid {
    directions: Vec<UnitDirection>,
    neighbors: Vec<Vec<usize>>,
    antipode: Vec<usize>,
}

impl SphereGrid {
    /// Builds an `n_points` grid: a Fibonacci lattice over `n_points / 2`
    /// hemisphere seeds plus their negations. Neighbors are the six nearest
    /// directions by angle, symmetrized.
    pub fn build(n_points: usize) -> Result<Self> {
        if n_points < 12 || n_points % 2 != 0 {
            return Err(Error::InvalidArgument(format!(
                "grid size must be an even integer >= 12, got {n_points}"
            )));
        }
        let half = n_points / 2;
        let seeds = fibonacci_hemisphere(half);
        let mut directions = seeds.clone();
        directions.extend(seeds.iter().map(|&d| -d));
        let antipode = (0..n_points).map(|i| (i + half) % n_points).collect();

        let mut neighbors: Vec<Vec<usize>> = vec![Vec::new(); n_points];
        let mut order: Vec<(f64, usize)> = Vec::with_capacity(n_points);
        for i in 0..n_points {
            order.clear();
            order.extend(
                (0..n_points)
                    .filter(|&j| j != i)
                    .map(|j| (-directions[i].dot(&directions[j]), j)),
            );
            order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            for &(_, j) in order.iter().take(NEAREST_NEIGHBORS) {
                neighbors[i].push(j);
                neighbors[j].push(i);
            }
        }
        for list in &mut neighbors {
            list.sort_unstable();
            list.dedup();
        }

        Ok(SphereGrid {
            directions,
            neighbors,
            antipode,
        })
    }

    pub fn len(&self) -> usize {
        self.directions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.directions.is_empty()
    }

    pub fn directions(&self) -> &[UnitDirection] {
        &self.directions
    }

    pub fn direction(&self, i: usize) -> UnitDirection {
        self.directions[i]
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn antipode(&self, i: usize) -> usize {
        self.antipode[i]
    }

    /// Index of the antipodal pair member lying in the canonical hemisphere.
    pub fn canonical_index(&self, i: usize) -> usize {
        if self.directions[i].is_canonical() {
            i
        } else {
            self.antipode[i]
        }
    }

    /// Grid index closest to `u` (plain, not antipodal, metric).
    pub fn nearest(&self, u: &UnitDirection) -> usize {
        let mut best = 0;
        let mut best_dot = f64::NEG_INFINITY;
        for (i, d) in self.directions.iter().enumerate() {
            let dot = d.dot(u);
            if dot > best_dot {
                best_dot = dot;
                best = i;
            }
        }
        best
    }
}

/// Local minima of a per-direction field, restricted to `candidate_mask`.
///
/// Index `i` qualifies when `field[i] <= field[j]` for every grid neighbor `j`
/// and `field[i] < field[j]` for at least one. Antipodal duplicates are
/// collapsed onto the canonical-hemisphere member. Returns ascending indices.
pub fn local_minima(field: &[f64], grid: &SphereGrid, candidate_mask: &[bool]) -> Result<Vec<usize>> {
    if field.len() != grid.len() || candidate_mask.len() != grid.len() {
        return Err(Error::InvalidArgument(format!(
            "field ({}) and mask ({}) must match grid size {}",
            field.len(),
            candidate_mask.len(),
            grid.len()
        )));
    }
    let mut minima: Vec<usize> = (0..grid.len())
        .filter(|&i| candidate_mask[i])
        .filter(|&i| {
            let v = field[i];
            let nbrs = grid.neighbors(i);
            nbrs.iter().all(|&j| v <= field[j]) && nbrs.iter().any(|&j| v < field[j])
        })
        .map(|i| grid.canonical_index(i))
        .collect();
    minima.sort_unstable();
    minima.dedup();
    Ok(minima)
}

const KARCHER_TOL: f64 = 1e-13;
const KARCHER_MAX_ITER: usize = 100;

/// Karcher (Fréchet) mean of axial directions, started from `seed`.
///
/// Each iteration flips members into the hemisphere of the current estimate,
/// averages their log-maps in the tangent plane and maps the mean back.
pub fn karcher_mean(cluster: &[UnitDirection], seed: UnitDirection) -> Result<UnitDirection> {
    if cluster.is_empty() {
        return Err(Error::InvalidArgument("Karcher mean of an empty cluster".into()));
    }
    let mut mean = seed.0;
    for _ in 0..KARCHER_MAX_ITER {
        let mut tangent = Vector3::zeros();
        for member in cluster {
            let q = if member.0.dot(&mean) < 0.0 { -member.0 } else { member.0 };
            tangent += log_map(&mean, &q);
        }
        tangent /= cluster.len() as f64;
        let step = tangent.norm();
        if step < KARCHER_TOL {
            break;
        }
        mean = exp_map(&mean, &tangent, step);
    }
    UnitDirection::from_vector(mean)
}

fn log_map(base: &Vector3<f64>, q: &Vector3<f64>) -> Vector3<f64> {
    let c = base.dot(q);
    let perp = q - base * c;
    let s = perp.norm();
    if s < 1e-300 {
        return Vector3::zeros();
    }
    perp * (s.atan2(c) / s)
}

fn exp_map(base: &Vector3<f64>, tangent: &Vector3<f64>, norm: f64) -> Vector3<f64> {
    let p = base * norm.cos() + tangent * (norm.sin() / norm);
    p / p.norm()
}
