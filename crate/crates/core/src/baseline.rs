//! Single-tensor baseline: log-linear least-squares tensor fit.

use nalgebra::{DMatrix, DVector, Matrix3, SymmetricEigen};

use crate::error::{Error, Result};
use crate::signal::GradientTable;
use crate::sphere::UnitDirection;

/// Smallest signal used in the log transform.
const SIGNAL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct TensorFit {
    pub tensor: Matrix3<f64>,
    /// Eigenvalues, descending.
    pub eigenvalues: [f64; 3],
    pub principal: UnitDirection,
    pub fa: f64,
}

/// Precomputed pseudo-inverse of the design matrix for one gradient table.
#[derive(Debug, Clone)]
pub struct TensorFitter {
    pinv: DMatrix<f64>,
    dw_index: Vec<usize>,
    table_len: usize,
}

impl TensorFitter {
    pub fn new(table: &GradientTable) -> Result<Self> {
        let dw_index: Vec<usize> = (0..table.len()).filter(|&i| !table.is_b0(i)).collect();
        if dw_index.len() < 6 {
            return Err(Error::InvalidArgument(format!(
                "tensor fit needs 6 diffusion-weighted measurements, got {}",
                dw_index.len()
            )));
        }
        let mut design = DMatrix::zeros(dw_index.len(), 6);
        for (r, &i) in dw_index.iter().enumerate() {
            let g = table.directions()[i];
            let b = table.bvalues()[i];
            let (x, y, z) = (g.x(), g.y(), g.z());
            let row = [x * x, y * y, z * z, 2.0 * x * y, 2.0 * x * z, 2.0 * y * z];
            for (c, v) in row.iter().enumerate() {
                design[(r, c)] = -b * v;
            }
        }
        let pinv = design
            .pseudo_inverse(1e-12)
            .map_err(|e| Error::InvalidArgument(format!("degenerate gradient table: {e}")))?;
        if pinv.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("degenerate gradient table".into()));
        }
        Ok(TensorFitter {
            pinv,
            dw_index,
            table_len: table.len(),
        })
    }

    pub fn fit(&self, signals: &[f64]) -> Result<TensorFit> {
        if signals.len() != self.table_len {
            return Err(Error::InvalidArgument(format!(
                "{} signals for a table of {} measurements",
                signals.len(),
                self.table_len
            )));
        }
        let y = DVector::from_iterator(
            self.dw_index.len(),
            self.dw_index.iter().map(|&i| signals[i].max(SIGNAL_FLOOR).ln()),
        );
        let d = &self.pinv * y;
        let tensor = Matrix3::new(d[0], d[3], d[4], d[3], d[1], d[5], d[4], d[5], d[2]);
        let eig = SymmetricEigen::new(tensor);
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let eigenvalues = order.map(|k| eig.eigenvalues[k]);
        let v = eig.eigenvectors.column(order[0]).into_owned();
        let principal = UnitDirection::from_vector(v)
            .map(|u| u.canonical())
            .unwrap_or_else(|_| UnitDirection::z_axis());
        Ok(TensorFit {
            tensor,
            eigenvalues,
            principal,
            fa: fractional_anisotropy(&eigenvalues),
        })
    }
}

pub fn fractional_anisotropy(ev: &[f64; 3]) -> f64 {
    let mean = (ev[0] + ev[1] + ev[2]) / 3.0;
    let num: f64 = ev.iter().map(|l| (l - mean).powi(2)).sum();
    let den: f64 = ev.iter().map(|l| l * l).sum();
    if den <= 0.0 {
        return 0.0;
    }
    (1.5 * num / den).sqrt().min(1.0)
}

/// Principal direction per voxel, empty where FA is below `min_fa`.
pub fn tensor_peaks(signals: &[f64], table: &GradientTable, min_fa: f64) -> Result<Vec<Vec<UnitDirection>>> {
    let fitter = TensorFitter::new(table)?;
    let m = table.len();
    if m == 0 || signals.len() % m != 0 {
        return Err(Error::InvalidArgument("signal buffer is not a whole number of voxels".into()));
    }
    signals
        .chunks(m)
        .map(|s| {
            let f = fitter.fit(s)?;
            Ok(if f.fa >= min_fa { vec![f.principal] } else { vec![] })
        })
        .collect()
}
