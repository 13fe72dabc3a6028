//! Digital phantoms: voxel grids of multi-tensor voxels with ground truth.
//!
//! A phantom is described by bundles. Each bundle covers a set of voxels and
//! gives every covered voxel one fascicle; voxels covered by several bundles
//! hold crossing fascicles sharing the anisotropic fraction equally. Voxel
//! `(x, y, z)` has linear index `x + X * (y + Y * z)` and its center sits at
//! integer coordinates.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::{simulate_signal, Fascicle, GradientTable, NoiseSpec, Range, VoxelModel, MAX_FASCICLES};
use crate::sphere::UnitDirection;

pub type Voxel = [usize; 3];

/// Region covered by a bundle and the fiber orientation inside it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "lowercase")]
pub enum Geometry {
    /// Axis-aligned block of voxels (inclusive corners), constant orientation.
    Box {
        min: [usize; 3],
        max: [usize; 3],
        orientation: [f64; 3],
    },
    /// Straight in-plane band from `from` to `to` (x, y), covering voxels whose
    /// centers lie within `half_width` of the segment, for slices `z[0]..=z[1]`.
    Band {
        from: [f64; 2],
        to: [f64; 2],
        half_width: f64,
        z: [usize; 2],
    },
    /// Circular in-plane arc between polar angles `start_deg` and `end_deg`
    /// around `center`, tangent orientation.
    Arc {
        center: [f64; 2],
        radius: f64,
        half_width: f64,
        start_deg: f64,
        end_deg: f64,
        z: [usize; 2],
    },
}

impl Geometry {
    /// Orientation and arc-length position along the bundle for a voxel
    /// center, or `None` outside the bundle.
    fn membership(&self, v: Voxel) -> Result<Option<(UnitDirection, f64)>> {
        let p = [v[0] as f64, v[1] as f64, v[2] as f64];
        Ok(match self {
            Geometry::Box { min, max, orientation } => {
                if (0..3).all(|a| v[a] >= min[a] && v[a] <= max[a]) {
                    let o = UnitDirection::new(orientation[0], orientation[1], orientation[2])?;
                    Some((o, p[0] * o.x() + p[1] * o.y() + p[2] * o.z()))
                } else {
                    None
                }
            }
            Geometry::Band {
                from,
                to,
                half_width,
                z,
            } => {
                if v[2] < z[0] || v[2] > z[1] {
                    return Ok(None);
                }
                let d = [to[0] - from[0], to[1] - from[1]];
                let len = d[0].hypot(d[1]);
                if len == 0.0 {
                    return Err(Error::InvalidSpec("band with zero length".into()));
                }
                let dir = [d[0] / len, d[1] / len];
                let rel = [p[0] - from[0], p[1] - from[1]];
                let along = rel[0] * dir[0] + rel[1] * dir[1];
                let across = (rel[0] * dir[1] - rel[1] * dir[0]).abs();
                if (0.0..=len).contains(&along) && across <= *half_width {
                    Some((UnitDirection::new(dir[0], dir[1], 0.0)?, along))
                } else {
                    None
                }
            }
            Geometry::Arc {
                center,
                radius,
                half_width,
                start_deg,
                end_deg,
                z,
            } => {
                if v[2] < z[0] || v[2] > z[1] {
                    return Ok(None);
                }
                let rel = [p[0] - center[0], p[1] - center[1]];
                let r = rel[0].hypot(rel[1]);
                let phi = rel[1].atan2(rel[0]).to_degrees();
                let phi = if phi < *start_deg { phi + 360.0 } else { phi };
                if (r - radius).abs() <= *half_width && phi >= *start_deg && phi <= *end_deg {
                    let t = phi.to_radians();
                    Some((UnitDirection::new(-t.sin(), t.cos(), 0.0)?, radius * (phi - start_deg).to_radians()))
                } else {
                    None
                }
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bundle {
    pub name: String,
    pub geometry: Geometry,
    /// Whether the bundle contributes a seed/target pair.
    #[serde(default)]
    pub track: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub name: String,
    pub dims: [usize; 3],
    /// Isotropic fraction of voxels holding at least one fascicle.
    pub f_iso: f64,
    pub lambda_iso: f64,
    pub lambda_par: Range,
    pub lambda_perp: Range,
    pub min_crossing_angle_deg: f64,
    pub min_fraction: f64,
    #[serde(default)]
    pub bundles: Vec<Bundle>,
}

/// Seed and target voxels of one tracked bundle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionPair {
    pub name: String,
    pub seeds: Vec<Voxel>,
    pub targets: Vec<Voxel>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub dims: [usize; 3],
    pub measurements: usize,
    pub voxels: Vec<VoxelModel>,
    /// Normalized signals, voxel-major.
    pub signals: Vec<f64>,
    pub pairs: Vec<RegionPair>,
}

impl Phantom {
    pub fn voxel_count(&self) -> usize {
        self.voxels.len()
    }

    pub fn voxel_signals(&self, index: usize) -> &[f64] {
        &self.signals[index * self.measurements..(index + 1) * self.measurements]
    }
}

pub fn voxel_index(dims: [usize; 3], v: Voxel) -> usize {
    v[0] + dims[0] * (v[1] + dims[1] * v[2])
}

pub fn voxel_at(dims: [usize; 3], index: usize) -> Voxel {
    [index % dims[0], (index / dims[0]) % dims[1], index / (dims[0] * dims[1])]
}

const PARAM_SALT: u64 = 0xD1FF_05E5;

fn voxel_seed(base: u64, index: usize) -> u64 {
    base ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

impl PhantomSpec {
    pub fn voxel_total(&self) -> usize {
        self.dims.iter().product()
    }

    fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidSpec(format!("dimensions {:?} must be positive", self.dims)));
        }
        if !(0.0..1.0).contains(&self.f_iso) || !(self.lambda_iso > 0.0) {
            return Err(Error::InvalidSpec("f_iso must be in [0, 1) and lambda_iso positive".into()));
        }
        if !(self.lambda_perp.lo > 0.0 && self.lambda_perp.hi < self.lambda_par.lo && self.lambda_par.lo <= self.lambda_par.hi)
        {
            return Err(Error::InvalidSpec("need 0 < lambda_perp < lambda_par ranges".into()));
        }
        Ok(())
    }

    /// Orientation/position of every bundle covering each voxel.
    fn coverage(&self) -> Result<Vec<Vec<(usize, UnitDirection, f64)>>> {
        let mut cover = vec![Vec::new(); self.voxel_total()];
        for (index, slot) in cover.iter_mut().enumerate() {
            let v = voxel_at(self.dims, index);
            for (b, bundle) in self.bundles.iter().enumerate() {
                if let Some((o, s)) = bundle.geometry.membership(v)? {
                    slot.push((b, o, s));
                }
            }
        }
        Ok(cover)
    }

    /// Fascicle count of every voxel implied by the bundle geometry.
    pub fn fascicle_counts(&self) -> Result<Vec<usize>> {
        Ok(self.coverage()?.iter().map(Vec::len).collect())
    }

    pub fn builtin(name: &str) -> Result<Self> {
        match name {
            "grid15" => Ok(grid15()),
            "bundles20" => Ok(bundles20()),
            other => Err(Error::InvalidArgument(format!(
                "unknown builtin phantom {other:?} (known: grid15, bundles20)"
            ))),
        }
    }
}

/// Simulates every voxel of `spec`. Diffusivities are drawn per voxel and
/// noise is added per voxel, each from a generator seeded by `rng_seed` and
/// the voxel index, so the result does not depend on evaluation order.
pub fn build_phantom(spec: &PhantomSpec, table: &GradientTable, noise: NoiseSpec, rng_seed: u64) -> Result<Phantom> {
    spec.validate()?;
    let cover = spec.coverage()?;
    let m = table.len();
    let mut voxels = Vec::with_capacity(cover.len());
    let mut signals = Vec::with_capacity(cover.len() * m);
    for (index, bundles) in cover.iter().enumerate() {
        let v = voxel_at(spec.dims, index);
        let k = bundles.len();
        if k > MAX_FASCICLES {
            return Err(Error::InvalidSpec(format!("voxel {v:?} is covered by {k} bundles (max {MAX_FASCICLES})")));
        }
        let model = if k == 0 {
            VoxelModel::isotropic(spec.lambda_iso)
        } else {
            let fraction = (1.0 - spec.f_iso) / k as f64;
            if fraction < spec.min_fraction {
                return Err(Error::InvalidSpec(format!(
                    "voxel {v:?}: fascicle fraction {fraction:.3} below floor {}",
                    spec.min_fraction
                )));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(voxel_seed(rng_seed ^ PARAM_SALT, index));
            let fascicles = bundles
                .iter()
                .map(|&(_, orientation, _)| Fascicle {
                    fraction,
                    lambda_par: spec.lambda_par.sample(&mut rng),
                    lambda_perp: spec.lambda_perp.sample(&mut rng),
                    orientation,
                })
                .collect::<Vec<_>>();
            let anis: f64 = fascicles.iter().map(|f| f.fraction).sum();
            VoxelModel {
                f_iso: 1.0 - anis,
                lambda_iso: spec.lambda_iso,
                fascicles,
            }
        };
        model.validate(spec.min_crossing_angle_deg).map_err(|e| {
            let names: Vec<&str> = bundles.iter().map(|&(b, _, _)| spec.bundles[b].name.as_str()).collect();
            Error::InvalidSpec(format!("voxel {v:?} ({}): {e}", names.join(", ")))
        })?;
        signals.extend(simulate_signal(&model, table, noise, voxel_seed(rng_seed, index)));
        voxels.push(model);
    }

    let mid_z = spec.dims[2] / 2;
    let mut pairs = Vec::new();
    for (b, bundle) in spec.bundles.iter().enumerate().filter(|(_, b)| b.track) {
        let members: Vec<(Voxel, f64)> = cover
            .iter()
            .enumerate()
            .flat_map(|(i, c)| c.iter().filter(|e| e.0 == b).map(move |e| (voxel_at(spec.dims, i), e.2)))
            .collect();
        if members.is_empty() {
            return Err(Error::InvalidSpec(format!("tracked bundle {:?} covers no voxels", bundle.name)));
        }
        let lo = members.iter().map(|m| m.1).fold(f64::INFINITY, f64::min);
        let hi = members.iter().map(|m| m.1).fold(f64::NEG_INFINITY, f64::max);
        let seeds: Vec<Voxel> = members
            .iter()
            .filter(|(v, s)| *s <= lo + 1.0 && v[2] == mid_z)
            .map(|m| m.0)
            .collect();
        let targets: Vec<Voxel> = members.iter().filter(|(_, s)| *s >= hi - 1.0).map(|m| m.0).collect();
        if seeds.is_empty() {
            return Err(Error::InvalidSpec(format!("tracked bundle {:?} has no seed voxels in slice {mid_z}", bundle.name)));
        }
        pairs.push(RegionPair {
            name: bundle.name.clone(),
            seeds,
            targets,
        });
    }

    Ok(Phantom {
        dims: spec.dims,
        measurements: m,
        voxels,
        signals,
        pairs,
    })
}

fn default_diffusivities() -> (Range, Range) {
    (Range::new(0.0018, 0.0024), Range::new(0.00035, 0.00050))
}

/// 15x15x1 phantom of three straight, overlapping blocks: 84 voxels with one
/// fascicle, 117 with two and 24 with three.
pub fn grid15() -> PhantomSpec {
    let (lambda_par, lambda_perp) = default_diffusivities();
    let s = 1.0 / 2f64.sqrt();
    let deg60 = 60f64.to_radians();
    PhantomSpec {
        name: "grid15".into(),
        dims: [15, 15, 1],
        f_iso: 0.1,
        lambda_iso: 0.003,
        lambda_par,
        lambda_perp,
        min_crossing_angle_deg: 30.0,
        min_fraction: 0.15,
        bundles: vec![
            Bundle {
                name: "horizontal".into(),
                geometry: Geometry::Box {
                    min: [0, 0, 0],
                    max: [14, 8, 0],
                    orientation: [1.0, 0.0, 0.0],
                },
                track: false,
            },
            Bundle {
                name: "oblique".into(),
                geometry: Geometry::Box {
                    min: [6, 0, 0],
                    max: [14, 14, 0],
                    orientation: [deg60.cos(), deg60.sin(), 0.0],
                },
                track: false,
            },
            Bundle {
                name: "through-plane".into(),
                geometry: Geometry::Box {
                    min: [0, 5, 0],
                    max: [11, 14, 0],
                    orientation: [0.0, -s, s],
                },
                track: false,
            },
        ],
    }
}

/// 40x40x3 tractography phantom with 20 tracked bundles: six horizontal and
/// six vertical straight bands plus eight concentric arcs crossing them.
pub fn bundles20() -> PhantomSpec {
    let (lambda_par, lambda_perp) = default_diffusivities();
    let n = 40usize;
    let far = (n - 1) as f64;
    let z = [0, 2];
    let mut bundles = Vec::new();
    for (i, c) in [3.0, 9.0, 15.0, 21.0, 27.0, 33.0].into_iter().enumerate() {
        bundles.push(Bundle {
            name: format!("h{i}"),
            geometry: Geometry::Band {
                from: [0.0, c],
                to: [far, c],
                half_width: 1.0,
                z,
            },
            track: true,
        });
        bundles.push(Bundle {
            name: format!("v{i}"),
            geometry: Geometry::Band {
                from: [c, 0.0],
                to: [c, far],
                half_width: 1.0,
                z,
            },
            track: true,
        });
    }
    for (i, r) in [16.0, 20.0, 24.0, 28.0, 32.0, 36.0, 40.0, 44.0].into_iter().enumerate() {
        bundles.push(Bundle {
            name: format!("arc{i}"),
            geometry: Geometry::Arc {
                center: [0.0, 0.0],
                radius: r,
                half_width: 1.0,
                start_deg: 30.0,
                end_deg: 60.0,
                z,
            },
            track: true,
        });
    }
    PhantomSpec {
        name: "bundles20".into(),
        dims: [n, n, 3],
        f_iso: 0.1,
        lambda_iso: 0.003,
        lambda_par,
        lambda_perp,
        min_crossing_angle_deg: 30.0,
        min_fraction: 0.15,
        bundles,
    }
}
