//! Cone-weighted feature vector for a probe direction.
//!
//! For a probe `u` and cone half-angles `theta_j = j·π/(2n)`, each feature is
//! a normalized weighted average of the diffusion-weighted measurements, with
//! weight `1 / (|angle(q_i, u) - theta_j| + epsilon)`. The probe angle uses the
//! antipodal metric, so it lies in `[0, π/2]`, and `epsilon` is in radians.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::GradientTable;
use crate::sphere::{angle_between_rad, UnitDirection};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureParams {
    /// Number of cone intervals; the vector has `n + 1` entries.
    pub n: usize,
    pub epsilon: f64,
}

impl Default for FeatureParams {
    fn default() -> Self {
        FeatureParams { n: 15, epsilon: 0.1 }
    }
}

impl FeatureParams {
    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::InvalidArgument(format!("feature resolution n must be >= 2, got {}", self.n)));
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(Error::InvalidArgument(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.n + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Cone half-angles in radians, `0` to `π/2` inclusive.
    pub fn theta_grid(&self) -> Vec<f64> {
        (0..=self.n)
            .map(|j| j as f64 * std::f64::consts::FRAC_PI_2 / self.n as f64)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    pub theta_grid: Vec<f64>,
}

impl FeatureVector {
    pub fn n(&self) -> usize {
        self.values.len() - 1
    }
}

/// Precomputed diffusion-weighted subset of a table, reusable across probes.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    params: FeatureParams,
    thetas: Vec<f64>,
    dw_index: Vec<usize>,
    dw_dirs: Vec<UnitDirection>,
    table_len: usize,
}

impl FeatureExtractor {
    pub fn new(table: &GradientTable, params: FeatureParams) -> Result<Self> {
        params.validate()?;
        let dw_index: Vec<usize> = (0..table.len()).filter(|&i| !table.is_b0(i)).collect();
        if dw_index.is_empty() {
            return Err(Error::NoDiffusionData);
        }
        let dw_dirs = dw_index.iter().map(|&i| table.directions()[i]).collect();
        Ok(FeatureExtractor {
            params,
            thetas: params.theta_grid(),
            dw_index,
            dw_dirs,
            table_len: table.len(),
        })
    }

    pub fn params(&self) -> FeatureParams {
        self.params
    }

    /// Writes the `n + 1` features of probe `u` into `out`.
    pub fn compute_into(&self, u: &UnitDirection, signals: &[f64], out: &mut [f64]) -> Result<()> {
        if signals.len() != self.table_len {
            return Err(Error::InvalidArgument(format!(
                "{} signals for a table of {} measurements",
                signals.len(),
                self.table_len
            )));
        }
        debug_assert_eq!(out.len(), self.thetas.len());
        let angles: Vec<f64> = self.dw_dirs.iter().map(|q| angle_between_rad(q, u, true)).collect();
        // averaging offsets from a reference keeps constant input exact
        let reference = signals[self.dw_index[0]];
        for (slot, &theta) in out.iter_mut().zip(&self.thetas) {
            let mut num = 0.0;
            let mut den = 0.0;
            for (&i, &a) in self.dw_index.iter().zip(&angles) {
                let w = 1.0 / ((a - theta).abs() + self.params.epsilon);
                num += w * (signals[i] - reference);
                den += w;
            }
            *slot = reference + num / den;
        }
        Ok(())
    }

    pub fn compute(&self, u: &UnitDirection, signals: &[f64]) -> Result<FeatureVector> {
        let mut values = vec![0.0; self.params.len()];
        self.compute_into(u, signals, &mut values)?;
        Ok(FeatureVector {
            values,
            theta_grid: self.thetas.clone(),
        })
    }
}

/// Feature vector of probe `u` for one voxel's normalized signals.
pub fn compute_feature(
    u: &UnitDirection,
    signals: &[f64],
    table: &GradientTable,
    n: usize,
    epsilon: f64,
) -> Result<FeatureVector> {
    FeatureExtractor::new(table, FeatureParams { n, epsilon })?.compute(u, signals)
}
