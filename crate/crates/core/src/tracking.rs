//! Deterministic peak-following streamline tractography.
//!
//! Points are in voxel coordinates; voxel `(i, j, k)` spans
//! `[i - 0.5, i + 0.5)` along each axis.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phantom::{voxel_index, Voxel};
use crate::sphere::UnitDirection;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Termination {
    LeftVolume,
    AngleExceeded,
    MaxSteps,
    NoPeak,
}

impl Termination {
    pub fn as_str(&self) -> &'static str {
        match self {
            Termination::LeftVolume => "left-volume",
            Termination::AngleExceeded => "angle-exceeded",
            Termination::MaxSteps => "max-steps",
            Termination::NoPeak => "no-peak",
        }
    }
}

/// Polyline through the seed; `reasons` holds why each end stopped
/// (`[start, end]`).
#[derive(Debug, Clone, PartialEq)]
pub struct Streamline {
    pub points: Vec<[f64; 3]>,
    pub reasons: [Termination; 2],
}

impl Streamline {
    pub fn endpoints(&self) -> [[f64; 3]; 2] {
        [self.points[0], self.points[self.points.len() - 1]]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackParams {
    /// Step length in voxels.
    pub step: f64,
    pub max_angle_deg: f64,
    /// Maximum steps per direction.
    pub max_steps: usize,
}

impl Default for TrackParams {
    fn default() -> Self {
        TrackParams {
            step: 0.5,
            max_angle_deg: 45.0,
            max_steps: 1000,
        }
    }
}

/// Per-voxel fiber orientations, most prominent first.
#[derive(Debug, Clone, PartialEq)]
pub struct PeakField {
    pub dims: [usize; 3],
    pub peaks: Vec<Vec<UnitDirection>>,
}

impl PeakField {
    pub fn new(dims: [usize; 3], peaks: Vec<Vec<UnitDirection>>) -> Result<Self> {
        if peaks.len() != dims.iter().product::<usize>() {
            return Err(Error::InvalidArgument(format!(
                "{} voxels of peaks for dimensions {:?}",
                peaks.len(),
                dims
            )));
        }
        Ok(PeakField { dims, peaks })
    }

    fn voxel_of(&self, p: &[f64; 3]) -> Option<usize> {
        let mut v = [0usize; 3];
        for a in 0..3 {
            let i = (p[a] + 0.5).floor();
            if i < 0.0 || i >= self.dims[a] as f64 {
                return None;
            }
            v[a] = i as usize;
        }
        Some(voxel_index(self.dims, v))
    }
}

/// Tracks one streamline per seed voxel, starting at the voxel center along
/// its first peak and integrating in both directions.
pub fn track(seeds: &[Voxel], field: &PeakField, params: &TrackParams) -> Result<Vec<Streamline>> {
    if !(params.step > 0.0) || !(params.max_angle_deg > 0.0) {
        return Err(Error::InvalidArgument("step and max_angle must be positive".into()));
    }
    if let Some(s) = seeds.iter().find(|s| (0..3).any(|a| s[a] >= field.dims[a])) {
        return Err(Error::InvalidArgument(format!("seed {s:?} outside volume {:?}", field.dims)));
    }
    Ok(seeds.par_iter().map(|s| track_seed(*s, field, params)).collect())
}

fn track_seed(seed: Voxel, field: &PeakField, params: &TrackParams) -> Streamline {
    let start = [seed[0] as f64, seed[1] as f64, seed[2] as f64];
    let peaks = &field.peaks[voxel_index(field.dims, seed)];
    let Some(&initial) = peaks.first() else {
        return Streamline {
            points: vec![start],
            reasons: [Termination::NoPeak, Termination::NoPeak],
        };
    };
    let (mut forward, end_reason) = integrate(start, initial.to_array(), field, params);
    let (backward, start_reason) = integrate(start, (-initial).to_array(), field, params);
    let mut points: Vec<[f64; 3]> = backward.into_iter().rev().collect();
    points.push(start);
    points.append(&mut forward);
    Streamline {
        points,
        reasons: [start_reason, end_reason],
    }
}

fn integrate(start: [f64; 3], dir: [f64; 3], field: &PeakField, params: &TrackParams) -> (Vec<[f64; 3]>, Termination) {
    let cos_max = params.max_angle_deg.to_radians().cos();
    let mut points = Vec::new();
    let mut p = start;
    let mut d = dir;
    for _ in 0..params.max_steps {
        let Some(v) = field.voxel_of(&p) else {
            return (points, Termination::LeftVolume);
        };
        let peaks = &field.peaks[v];
        if peaks.is_empty() {
            return (points, Termination::NoPeak);
        }
        // closest peak under the antipodal metric, flipped to follow d
        let mut best = [0.0; 3];
        let mut best_dot = f64::NEG_INFINITY;
        for pk in peaks {
            let a = pk.to_array();
            let dot = a[0] * d[0] + a[1] * d[1] + a[2] * d[2];
            if dot.abs() > best_dot {
                best_dot = dot.abs();
                best = if dot < 0.0 { [-a[0], -a[1], -a[2]] } else { a };
            }
        }
        if best_dot < cos_max {
            return (points, Termination::AngleExceeded);
        }
        let next = [
            p[0] + params.step * best[0],
            p[1] + params.step * best[1],
            p[2] + params.step * best[2],
        ];
        if field.voxel_of(&next).is_none() {
            return (points, Termination::LeftVolume);
        }
        points.push(next);
        p = next;
        d = best;
    }
    (points, Termination::MaxSteps)
}

/// Success ratios of one tracking experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct SuccessReport {
    pub per_pair: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

/// Fraction of each pair's streamlines with an endpoint within `tolerance`
/// voxels (inclusive, Euclidean) of any voxel of the pair's target set.
pub fn success_ratio(streamlines: &[Vec<Streamline>], targets: &[Vec<Voxel>], tolerance: f64) -> Result<SuccessReport> {
    if streamlines.len() != targets.len() {
        return Err(Error::InvalidArgument(format!(
            "{} streamline groups for {} target sets",
            streamlines.len(),
            targets.len()
        )));
    }
    if streamlines.is_empty() {
        return Err(Error::InvalidArgument("no seed/target pairs".into()));
    }
    let tol2 = tolerance * tolerance;
    let per_pair: Vec<f64> = streamlines
        .iter()
        .zip(targets)
        .map(|(group, target)| {
            if group.is_empty() {
                return 0.0;
            }
            let hits = group
                .iter()
                .filter(|s| {
                    s.endpoints().iter().any(|e| {
                        target.iter().any(|t| {
                            let d: f64 = (0..3).map(|a| (e[a] - t[a] as f64).powi(2)).sum();
                            d <= tol2
                        })
                    })
                })
                .count();
            hits as f64 / group.len() as f64
        })
        .collect();
    let n = per_pair.len() as f64;
    let mean = per_pair.iter().sum::<f64>() / n;
    let std = (per_pair.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
    Ok(SuccessReport {
        mean,
        std,
        min: per_pair.iter().copied().fold(f64::INFINITY, f64::min),
        max: per_pair.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        per_pair,
    })
}
