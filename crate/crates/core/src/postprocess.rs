//! From a per-direction angle field to fascicle count, orientations and fODF.
//!
//! The raw field `Φ(u)` holds the network's estimate of the angle from each
//! grid direction to the closest fascicle. It is smoothed on the grid graph,
//! thresholded, reduced to local minima, and each minimum is refined by the
//! Karcher mean of the candidate directions it attracts.

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureExtractor;
use crate::mlp::MlpModel;
use crate::signal::GradientTable;
use crate::sphere::{karcher_mean, local_minima, SphereGrid, UnitDirection};

const MAX_ANGLE: f64 = std::f64::consts::FRAC_PI_2;

/// Angle (radians) per grid direction.
#[derive(Debug, Clone, PartialEq)]
pub struct AngleField {
    pub values: Vec<f64>,
}

impl AngleField {
    pub fn new(values: Vec<f64>, grid: &SphereGrid) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::InvalidArgument(format!(
                "field has {} values for a grid of {}",
                values.len(),
                grid.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=MAX_ANGLE).contains(*v)) {
            return Err(Error::InvalidArgument(format!("field value {v} outside [0, pi/2]")));
        }
        Ok(AngleField { values })
    }

    /// Field obtained by evaluating `f` at every grid direction.
    pub fn from_fn(grid: &SphereGrid, f: impl Fn(&UnitDirection) -> f64) -> Self {
        AngleField {
            values: grid.directions().iter().map(f).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Averages every value with its antipodal partner.
    pub fn symmetrize(&mut self, grid: &SphereGrid) {
        for i in 0..grid.len() {
            let a = grid.antipode(i);
            if a > i {
                let m = 0.5 * (self.values[i] + self.values[a]);
                self.values[i] = m;
                self.values[a] = m;
            }
        }
    }
}

/// Estimated fascicles of one voxel, most prominent (lowest field value) first.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FasciclePrediction {
    pub orientations: Vec<UnitDirection>,
    /// Canonical grid indices of the local minima before refinement.
    pub raw_minima: Vec<usize>,
}

impl FasciclePrediction {
    pub fn count(&self) -> usize {
        self.orientations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.orientations.is_empty()
    }
}

/// Features for every grid direction, one row each.
pub fn grid_features(extractor: &FeatureExtractor, signals: &[f64], grid: &SphereGrid) -> Result<Array2<f64>> {
    let width = extractor.params().len();
    let mut x = Array2::zeros((grid.len(), width));
    let mut buf = vec![0.0; width];
    for (i, u) in grid.directions().iter().enumerate() {
        extractor.compute_into(u, signals, &mut buf)?;
        x.row_mut(i).assign(&ndarray::aview1(&buf));
    }
    Ok(x)
}

/// Network estimate of the closest-fascicle angle at every grid direction,
/// symmetrized across antipodal pairs.
pub fn estimate_field(model: &MlpModel, signals: &[f64], table: &GradientTable, grid: &SphereGrid) -> Result<AngleField> {
    let extractor = FeatureExtractor::new(table, model.feature_params())?;
    estimate_field_with(model, &extractor, signals, grid)
}

pub fn estimate_field_with(
    model: &MlpModel,
    extractor: &FeatureExtractor,
    signals: &[f64],
    grid: &SphereGrid,
) -> Result<AngleField> {
    let x = grid_features(extractor, signals, grid)?;
    let mut field = AngleField {
        values: model.predict_batch(x.view())?,
    };
    field.symmetrize(grid);
    Ok(field)
}

/// Graph diffusion: `strength` rounds of
/// `v[i] <- (1 - lambda) v[i] + lambda * mean(v[neighbors of i])`, each
/// followed by antipodal symmetrization, then clamping to `[0, π/2]`.
pub fn smooth_field(field: &AngleField, grid: &SphereGrid, strength: usize, lambda: f64) -> Result<AngleField> {
    if !(lambda > 0.0 && lambda <= 1.0) {
        return Err(Error::InvalidArgument(format!("smoothing weight must be in (0, 1], got {lambda}")));
    }
    if field.len() != grid.len() {
        return Err(Error::InvalidArgument("field does not match grid".into()));
    }
    let mut cur = field.clone();
    let mut next = vec![0.0; grid.len()];
    for _ in 0..strength {
        for (i, slot) in next.iter_mut().enumerate() {
            let nbrs = grid.neighbors(i);
            let mean = nbrs.iter().map(|&j| cur.values[j]).sum::<f64>() / nbrs.len() as f64;
            *slot = (1.0 - lambda) * cur.values[i] + lambda * mean;
        }
        std::mem::swap(&mut cur.values, &mut next);
        cur.symmetrize(grid);
    }
    for v in &mut cur.values {
        *v = v.clamp(0.0, MAX_ANGLE);
    }
    Ok(cur)
}

/// Options for [`extract_fascicles_with`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractOptions {
    /// Keep at most this many minima (lowest field values first).
    pub max_count: Option<usize>,
    /// Minima closer than this (degrees, antipodal) to a lower minimum are
    /// dropped. Zero disables merging.
    pub min_separation_deg: f64,
}

impl Default for ExtractOptions {
    fn default() -> Self {
        ExtractOptions {
            max_count: None,
            min_separation_deg: 0.0,
        }
    }
}

/// Thresholds the smoothed field at `threshold_deg`, takes local minima of the
/// candidates, and refines each with the Karcher mean of its Voronoi cluster.
pub fn extract_fascicles(field: &AngleField, grid: &SphereGrid, threshold_deg: f64) -> Result<FasciclePrediction> {
    extract_fascicles_with(field, grid, threshold_deg, &ExtractOptions::default())
}

pub fn extract_fascicles_with(
    field: &AngleField,
    grid: &SphereGrid,
    threshold_deg: f64,
    options: &ExtractOptions,
) -> Result<FasciclePrediction> {
    if !(threshold_deg > 0.0 && threshold_deg < 90.0) {
        return Err(Error::InvalidArgument(format!("threshold must be in (0, 90) degrees, got {threshold_deg}")));
    }
    let t = threshold_deg.to_radians();
    let mask: Vec<bool> = field.values.iter().map(|&v| v < t).collect();
    let mut minima = local_minima(&field.values, grid, &mask)?;
    minima.sort_by(|&a, &b| field.values[a].total_cmp(&field.values[b]).then(a.cmp(&b)));

    if options.min_separation_deg > 0.0 {
        let cos_sep = options.min_separation_deg.to_radians().cos();
        let mut kept: Vec<usize> = Vec::with_capacity(minima.len());
        for m in minima {
            let d = grid.direction(m);
            if kept.iter().all(|&k| grid.direction(k).dot(&d).abs() < cos_sep) {
                kept.push(m);
            }
        }
        minima = kept;
    }
    if let Some(cap) = options.max_count {
        minima.truncate(cap);
    }
    if minima.is_empty() {
        return Ok(FasciclePrediction::default());
    }

    let mut clusters: Vec<Vec<UnitDirection>> = vec![Vec::new(); minima.len()];
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        let d = grid.direction(i);
        // closest minimum by antipodal angle; equal distance goes to the lower grid index
        let mut best = 0;
        let mut best_dot = f64::NEG_INFINITY;
        for (k, &m) in minima.iter().enumerate() {
            let dot = grid.direction(m).dot(&d).abs();
            if dot > best_dot || (dot == best_dot && m < minima[best]) {
                best_dot = dot;
                best = k;
            }
        }
        clusters[best].push(d);
    }

    let orientations = minima
        .iter()
        .zip(&clusters)
        .map(|(&m, cluster)| Ok(karcher_mean(cluster, grid.direction(m))?.canonical()))
        .collect::<Result<Vec<_>>>()?;
    Ok(FasciclePrediction {
        orientations,
        raw_minima: minima,
    })
}

/// `1 / max(Φ, floor)^p` per direction, normalized to unit sum.
pub fn fodf_from_field(field: &AngleField, p: f64, floor: f64) -> Result<Vec<f64>> {
    if !(p > 0.0) || !(floor > 0.0) {
        return Err(Error::InvalidArgument(format!("fODF needs p > 0 and floor > 0, got {p} and {floor}")));
    }
    let raw: Vec<f64> = field.values.iter().map(|&v| v.max(floor).powf(-p)).collect();
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|a| a / total).collect())
}

/// Post-processing parameters of the full per-voxel pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub threshold_deg: f64,
    pub smoothing_iterations: usize,
    pub smoothing_lambda: f64,
    pub fodf_power: f64,
    pub fodf_floor_deg: f64,
    pub extract: ExtractOptions,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            threshold_deg: 30.0,
            smoothing_iterations: 2,
            smoothing_lambda: 0.5,
            fodf_power: 2.0,
            fodf_floor_deg: 1.0,
            extract: ExtractOptions::default(),
        }
    }
}

/// Everything the pipeline produces for one voxel.
#[derive(Debug, Clone)]
pub struct VoxelEstimate {
    pub raw: AngleField,
    pub smoothed: AngleField,
    pub prediction: FasciclePrediction,
}

/// Trained model, grid and post-processing settings bundled for volume runs.
#[derive(Debug, Clone)]
pub struct Estimator<'a> {
    pub model: &'a MlpModel,
    pub grid: &'a SphereGrid,
    pub config: PipelineConfig,
}

impl<'a> Estimator<'a> {
    pub fn new(model: &'a MlpModel, grid: &'a SphereGrid, config: PipelineConfig) -> Self {
        Estimator { model, grid, config }
    }

    pub fn extractor(&self, table: &GradientTable) -> Result<FeatureExtractor> {
        FeatureExtractor::new(table, self.model.feature_params())
    }

    pub fn estimate_voxel(&self, extractor: &FeatureExtractor, signals: &[f64]) -> Result<VoxelEstimate> {
        let raw = estimate_field_with(self.model, extractor, signals, self.grid)?;
        let smoothed = smooth_field(&raw, self.grid, self.config.smoothing_iterations, self.config.smoothing_lambda)?;
        let prediction = extract_fascicles_with(&smoothed, self.grid, self.config.threshold_deg, &self.config.extract)?;
        Ok(VoxelEstimate { raw, smoothed, prediction })
    }

    pub fn fodf(&self, smoothed: &AngleField) -> Result<Vec<f64>> {
        fodf_from_field(smoothed, self.config.fodf_power, self.config.fodf_floor_deg.to_radians())
    }

    /// Runs the pipeline on `signals` laid out voxel-major with `table.len()`
    /// measurements per voxel. Results are ordered by voxel index.
    pub fn estimate_volume(&self, signals: &[f64], table: &GradientTable) -> Result<Vec<VoxelEstimate>> {
        let m = table.len();
        if signals.len() % m != 0 {
            return Err(Error::InvalidArgument(format!(
                "{} values is not a whole number of {m}-measurement voxels",
                signals.len()
            )));
        }
        let extractor = self.extractor(table)?;
        signals
            .par_chunks(m)
            .map(|s| self.estimate_voxel(&extractor, s))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sphere::{angle_between, angle_between_rad};

    fn grid() -> SphereGrid {
        SphereGrid::build(724).unwrap()
    }

    fn planted(grid: &SphereGrid, axes: &[UnitDirection]) -> AngleField {
        AngleField::from_fn(grid, |d| axes.iter().map(|a| angle_between_rad(d, a, true)).fold(MAX_ANGLE, f64::min))
    }

    #[test]
    fn constant_field_unchanged_by_smoothing() {
        let g = grid();
        let f = AngleField::new(vec![0.4; g.len()], &g).unwrap();
        let s = smooth_field(&f, &g, 5, 0.5).unwrap();
        assert!(s.values.iter().all(|&v| v == 0.4));
    }

    #[test]
    fn symmetric_spike_one_iteration() {
        let g = grid();
        let h = 1.2;
        let i = 17;
        let mut values = vec![0.0; g.len()];
        values[i] = h;
        values[g.antipode(i)] = h;
        let f = AngleField::new(values, &g).unwrap();
        let s = smooth_field(&f, &g, 1, 0.5).unwrap();
        assert!((s.values[i] - h / 2.0).abs() < 1e-15);
        for &j in g.neighbors(i) {
            let d = g.neighbors(j).len() as f64;
            assert!((s.values[j] - 0.5 * h / d).abs() < 1e-15);
        }
    }

    #[test]
    fn smoothing_rejects_bad_lambda() {
        let g = grid();
        let f = AngleField::new(vec![0.4; g.len()], &g).unwrap();
        assert!(smooth_field(&f, &g, 1, 0.0).is_err());
        assert!(smooth_field(&f, &g, 1, 1.5).is_err());
    }

    #[test]
    fn flat_field_has_no_fascicles() {
        let g = grid();
        let f = AngleField::new(vec![MAX_ANGLE; g.len()], &g).unwrap();
        let p = extract_fascicles(&f, &g, 30.0).unwrap();
        assert_eq!(p.count(), 0);
    }

    #[test]
    fn planted_single_axis() {
        let g = grid();
        let z = UnitDirection::z_axis();
        let p = extract_fascicles(&planted(&g, &[z]), &g, 30.0).unwrap();
        assert_eq!(p.count(), 1);
        assert!(angle_between(&p.orientations[0], &z, true) < 3.0);
        assert!(p.orientations[0].is_canonical());
    }

    #[test]
    fn planted_two_axes() {
        let g = grid();
        let axes = [UnitDirection::x_axis(), UnitDirection::z_axis()];
        let p = extract_fascicles(&planted(&g, &axes), &g, 30.0).unwrap();
        assert_eq!(p.count(), 2);
        for a in &axes {
            let best = p.orientations.iter().map(|o| angle_between(o, a, true)).fold(90.0, f64::min);
            assert!(best < 3.0);
        }
    }

    #[test]
    fn max_count_and_separation() {
        let g = grid();
        let axes = [UnitDirection::x_axis(), UnitDirection::z_axis()];
        let f = planted(&g, &axes);
        let capped = extract_fascicles_with(
            &f,
            &g,
            30.0,
            &ExtractOptions {
                max_count: Some(1),
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(capped.count(), 1);
        let merged = extract_fascicles_with(
            &f,
            &g,
            30.0,
            &ExtractOptions {
                min_separation_deg: 95.0,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(merged.count(), 1);
    }

    #[test]
    fn threshold_validated() {
        let g = grid();
        let f = AngleField::new(vec![0.1; g.len()], &g).unwrap();
        assert!(extract_fascicles(&f, &g, 0.0).is_err());
        assert!(extract_fascicles(&f, &g, 90.0).is_err());
    }

    #[test]
    fn fodf_examples() {
        let g = grid();
        let c = AngleField::new(vec![0.5; g.len()], &g).unwrap();
        let a = fodf_from_field(&c, 2.0, 1f64.to_radians()).unwrap();
        assert!(a.iter().all(|&v| (v - 1.0 / g.len() as f64).abs() < 1e-15));

        let f = planted(&g, &[UnitDirection::new(0.3, 0.4, 0.8).unwrap()]);
        let argmax = |v: &[f64]| (0..v.len()).max_by(|&i, &j| v[i].total_cmp(&v[j]).then(j.cmp(&i))).unwrap();
        let p2 = fodf_from_field(&f, 2.0, 1f64.to_radians()).unwrap();
        let p4 = fodf_from_field(&f, 4.0, 1f64.to_radians()).unwrap();
        let field_min = (0..g.len()).min_by(|&i, &j| f.values[i].total_cmp(&f.values[j])).unwrap();
        assert_eq!(argmax(&p2), argmax(&p4));
        assert_eq!(argmax(&p2), field_min);
        assert!(fodf_from_field(&f, 0.0, 0.1).is_err());
    }

    #[test]
    fn field_rejects_wrong_size_or_range() {
        let g = SphereGrid::build(12).unwrap();
        assert!(AngleField::new(vec![0.1; 11], &g).is_err());
        assert!(AngleField::new(vec![2.0; 12], &g).is_err());
    }
}
