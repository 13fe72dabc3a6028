//! Evaluation: count classification, angular errors, down-sampling
//! robustness and report formatting.

use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mlp::closest_fascicle_angle;
use crate::postprocess::{Estimator, VoxelEstimate};
use crate::signal::{GradientTable, MAX_FASCICLES, MIN_MEASUREMENTS};
use crate::sphere::{angle_between, SphereGrid, UnitDirection};
use crate::tracking::SuccessReport;

/// Penalty for a true fascicle with no estimate at all.
pub const MISSING_PENALTY_DEG: f64 = 90.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassRates {
    pub accuracy: f64,
    pub sensitivity: f64,
    pub specificity: f64,
}

/// Confusion of fascicle counts. `matrix[t][p]` counts voxels with true
/// count `t` predicted as `p`; counts above 3 share the last row/column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountConfusion {
    pub matrix: [[usize; MAX_FASCICLES + 2]; MAX_FASCICLES + 2],
    /// One-vs-rest rates for classes 1, 2 and 3.
    pub classes: [ClassRates; MAX_FASCICLES],
    pub total: usize,
}

const BINS: usize = MAX_FASCICLES + 2;

fn bin(k: usize) -> usize {
    k.min(BINS - 1)
}

fn ratio(num: usize, den: usize) -> f64 {
    // an empty denominator means nothing could go wrong
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

impl CountConfusion {
    pub fn from_matrix(matrix: [[usize; BINS]; BINS]) -> Self {
        let total: usize = matrix.iter().flatten().sum();
        let classes = std::array::from_fn(|c| {
            let k = c + 1;
            let tp = matrix[k][k];
            let fn_: usize = matrix[k].iter().sum::<usize>() - tp;
            let fp: usize = (0..BINS).map(|t| matrix[t][k]).sum::<usize>() - tp;
            let tn = total - tp - fn_ - fp;
            ClassRates {
                accuracy: ratio(tp + tn, total),
                sensitivity: ratio(tp, tp + fn_),
                specificity: ratio(tn, tn + fp),
            }
        });
        CountConfusion { matrix, classes, total }
    }

    pub fn class(&self, k: usize) -> &ClassRates {
        &self.classes[k - 1]
    }
}

pub fn count_metrics(true_counts: &[usize], predicted: &[usize]) -> Result<CountConfusion> {
    if true_counts.len() != predicted.len() {
        return Err(Error::InvalidArgument(format!(
            "{} true counts but {} predictions",
            true_counts.len(),
            predicted.len()
        )));
    }
    let mut matrix = [[0usize; BINS]; BINS];
    for (&t, &p) in true_counts.iter().zip(predicted) {
        matrix[bin(t)][bin(p)] += 1;
    }
    Ok(CountConfusion::from_matrix(matrix))
}

/// Weighted average angular error in degrees. Weights are renormalized over
/// the true fascicles.
pub fn waae(truth: &[(UnitDirection, f64)], estimated: &[UnitDirection]) -> Result<f64> {
    if truth.is_empty() {
        return Err(Error::InvalidArgument("waae needs at least one true fascicle".into()));
    }
    let total: f64 = truth.iter().map(|(_, w)| w).sum();
    if !(total > 0.0) || truth.iter().any(|(_, w)| *w < 0.0) {
        return Err(Error::InvalidArgument("fascicle weights must be non-negative with a positive sum".into()));
    }
    Ok(truth
        .iter()
        .map(|(v, w)| {
            let err = estimated
                .iter()
                .map(|e| angle_between(v, e, true))
                .fold(MISSING_PENALTY_DEG, f64::min);
            w / total * err
        })
        .sum())
}

/// Running per-class aggregate of a per-voxel error.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassErrors {
    pub sum: [f64; MAX_FASCICLES],
    pub sum_sq: [f64; MAX_FASCICLES],
    pub weight: [f64; MAX_FASCICLES],
}

impl ClassErrors {
    /// Adds `values` to class `k`; classes outside 1..=3 are ignored.
    pub fn add(&mut self, k: usize, values: impl IntoIterator<Item = f64>) {
        if !(1..=MAX_FASCICLES).contains(&k) {
            return;
        }
        for v in values {
            self.sum[k - 1] += v;
            self.sum_sq[k - 1] += v * v;
            self.weight[k - 1] += 1.0;
        }
    }

    pub fn mean(&self, k: usize) -> Option<f64> {
        let w = self.weight[k - 1];
        (w > 0.0).then(|| self.sum[k - 1] / w)
    }

    pub fn rms(&self, k: usize) -> Option<f64> {
        let w = self.weight[k - 1];
        (w > 0.0).then(|| (self.sum_sq[k - 1] / w).sqrt())
    }
}

/// Per-direction error in degrees between an angle field (radians) and the
/// true angle-to-closest-fascicle field.
pub fn field_errors_deg<'a>(
    field: &'a [f64],
    truth: &'a [UnitDirection],
    grid: &'a SphereGrid,
) -> impl Iterator<Item = f64> + 'a {
    grid.directions()
        .iter()
        .zip(field)
        .map(move |(u, &phi)| (phi - closest_fascicle_angle(u, truth)).to_degrees())
}

/// Angle field implied by a set of estimated orientations.
pub fn field_from_orientations(grid: &SphereGrid, orientations: &[UnitDirection]) -> Vec<f64> {
    grid.directions()
        .iter()
        .map(|u| closest_fascicle_angle(u, orientations))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DownsampleRow {
    pub fraction: f64,
    pub mean: f64,
    pub std: f64,
    pub max: f64,
    /// Degrees, trial-major then voxel-major.
    pub deviations: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DownsampleReport {
    pub trials: usize,
    pub voxels: usize,
    pub rows: Vec<DownsampleRow>,
}

/// Orientation of the largest fODF peak: the detected fascicle whose nearest
/// grid direction has the smallest smoothed angle, or the field minimum when
/// nothing was detected.
pub fn dominant_peak(estimate: &VoxelEstimate, grid: &SphereGrid) -> UnitDirection {
    let field = &estimate.smoothed.values;
    let best = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if !estimate.prediction.orientations.is_empty() {
        let (_, k) = estimate
            .prediction
            .orientations
            .iter()
            .enumerate()
            .map(|(k, o)| (field[grid.nearest(o)], k))
            .min_by(best)
            .expect("non-empty");
        return estimate.prediction.orientations[k];
    }
    let (_, i) = field.iter().copied().zip(0..).min_by(best).expect("non-empty grid");
    grid.direction(i).canonical()
}

/// Removes a seeded random share of the measurements, re-runs the pipeline
/// and records the deviation of the dominant peak from the full-data one.
pub fn downsample_experiment(
    signals: &[f64],
    table: &GradientTable,
    estimator: &Estimator,
    fractions: &[f64],
    trials: usize,
    rng_seed: u64,
) -> Result<DownsampleReport> {
    let m = table.len();
    if signals.is_empty() || signals.len() % m != 0 {
        return Err(Error::InvalidArgument(format!(
            "{} values is not a whole number of {m}-measurement voxels",
            signals.len()
        )));
    }
    if trials == 0 {
        return Err(Error::InvalidArgument("at least one trial is required".into()));
    }
    let mut removals = Vec::with_capacity(fractions.len());
    for &f in fractions {
        if !(0.0..1.0).contains(&f) {
            return Err(Error::InvalidArgument(format!("removal fraction {f} must be in [0, 1)")));
        }
        let removed = (f * m as f64).round() as usize;
        if m - removed < MIN_MEASUREMENTS {
            return Err(Error::InvalidArgument(format!(
                "removing {removed} of {m} measurements leaves fewer than {MIN_MEASUREMENTS}"
            )));
        }
        removals.push(removed);
    }
    let voxels = signals.len() / m;
    let grid = estimator.grid;
    let reference: Vec<UnitDirection> = estimator
        .estimate_volume(signals, table)?
        .iter()
        .map(|e| dominant_peak(e, grid))
        .collect();

    let mut rows = Vec::with_capacity(fractions.len());
    for (fi, (&fraction, &removed)) in fractions.iter().zip(&removals).enumerate() {
        let per_trial: Vec<Vec<f64>> = (0..trials)
            .into_par_iter()
            .map(|trial| {
                let seed = rng_seed ^ ((fi as u64) << 32 | trial as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut keep = sample(&mut rng, m, m - removed).into_vec();
                keep.sort_unstable();
                let sub_table = table.subset(&keep)?;
                let sub: Vec<f64> = signals.chunks(m).flat_map(|s| keep.iter().map(move |&i| s[i])).collect();
                let estimates = estimator.estimate_volume(&sub, &sub_table)?;
                Ok(estimates
                    .iter()
                    .zip(&reference)
                    .map(|(e, r)| angle_between(&dominant_peak(e, grid), r, true))
                    .collect())
            })
            .collect::<Result<_>>()?;
        let deviations: Vec<f64> = per_trial.into_iter().flatten().collect();
        let (mean, std) = mean_std(&deviations);
        rows.push(DownsampleRow {
            fraction,
            mean,
            std,
            max: deviations.iter().copied().fold(0.0, f64::max),
            deviations,
        });
    }
    Ok(DownsampleReport { trials, voxels, rows })
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Sum of twelve per-tract grades, each 1, 2 or 3.
pub fn grade_sum(grades: &[u8]) -> Result<u32> {
    if grades.len() != 12 {
        return Err(Error::InvalidArgument(format!("expected 12 grades, got {}", grades.len())));
    }
    if let Some(g) = grades.iter().find(|g| !(1..=3).contains(*g)) {
        return Err(Error::InvalidArgument(format!("grade {g} outside 1..=3")));
    }
    Ok(grades.iter().map(|&g| g as u32).sum())
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.2}"))
}

/// Count-detection table: one row per method, accuracy/sensitivity/specificity
/// per class.
pub fn format_count_table(rows: &[(&str, &CountConfusion)]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<12} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7}", "method", "acc1", "sens1", "spec1", "acc2", "sens2", "spec2", "acc3", "sens3", "spec3");
    for (name, c) in rows {
        let _ = write!(out, "{name:<12}");
        for r in &c.classes {
            let _ = write!(out, " {:>7.3} {:>7.3} {:>7.3}", r.accuracy, r.sensitivity, r.specificity);
        }
        out.push('\n');
    }
    out
}

/// Per-class error table in degrees.
pub fn format_class_table(title: &str, rows: &[(&str, [Option<f64>; MAX_FASCICLES])]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{title}");
    let _ = writeln!(out, "{:<12} {:>8} {:>8} {:>8}", "method", "K=1", "K=2", "K=3");
    for (name, v) in rows {
        let _ = writeln!(out, "{name:<12} {:>8} {:>8} {:>8}", opt(v[0]), opt(v[1]), opt(v[2]));
    }
    out
}

pub fn format_success_table(rows: &[(&str, &SuccessReport)]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<12} {:>16} {:>7} {:>7}", "method", "success", "min", "max");
    for (name, r) in rows {
        let ms = format!("{:.3} +- {:.3}", r.mean, r.std);
        let _ = writeln!(out, "{name:<12} {ms:>16} {:>7.3} {:>7.3}", r.min, r.max);
    }
    out
}

pub fn format_downsample_table(rows: &[(&str, &DownsampleReport)]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<12} {:>9} {:>16} {:>8}", "method", "removed", "deviation", "max");
    for (name, r) in rows {
        for row in &r.rows {
            let ms = format!("{:.2} +- {:.2}", row.mean, row.std);
            let _ = writeln!(out, "{name:<12} {:>8.0}% {ms:>16} {:>8.2}", row.fraction * 100.0, row.max);
        }
    }
    out
}

/// Ordered `key=value` lines for machine consumption.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KeyValues(Vec<(String, String)>);

impl KeyValues {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, key: impl Into<String>, value: impl std::fmt::Display) {
        self.0.push((key.into(), value.to_string()));
    }

    pub fn push_f64(&mut self, key: impl Into<String>, value: f64) {
        self.push(key, format!("{value:.6}"));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.0.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.0
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = KeyValues::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("line {}: expected key=value", n + 1)))?;
            kv.push(k.trim(), v.trim());
        }
        Ok(kv)
    }
}

impl std::fmt::Display for KeyValues {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for (k, v) in &self.0 {
            writeln!(f, "{k}={v}")?;
        }
        Ok(())
    }
}
