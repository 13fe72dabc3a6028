//! Multi-tensor diffusion signal model and random voxel sampling.
//!
//! Signals are always normalized by the non-weighted signal `s0`, so a
//! noiseless measurement lies in `(0, 1]`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, UnitSphere};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sphere::{angle_between, fibonacci_hemisphere, UnitDirection};

/// Measurements with b below this value (s/mm²) are treated as b = 0.
pub const B0_THRESHOLD: f64 = 50.0;

pub const MIN_MEASUREMENTS: usize = 6;

/// Gradient directions and b-values of one acquisition.
///
/// Non-weighted (b ≈ 0) entries carry a placeholder direction (+z) when the
/// source file gave a zero vector.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientTable {
    directions: Vec<UnitDirection>,
    bvalues: Vec<f64>,
}

impl GradientTable {
    pub fn new(directions: Vec<UnitDirection>, bvalues: Vec<f64>) -> Result<Self> {
        if directions.len() != bvalues.len() {
            return Err(Error::InvalidArgument(format!(
                "{} directions but {} b-values",
                directions.len(),
                bvalues.len()
            )));
        }
        if directions.len() < MIN_MEASUREMENTS {
            return Err(Error::InvalidArgument(format!(
                "gradient table needs at least {MIN_MEASUREMENTS} measurements, got {}",
                directions.len()
            )));
        }
        if let Some(b) = bvalues.iter().find(|b| !(b.is_finite() && **b >= 0.0)) {
            return Err(Error::InvalidArgument(format!("invalid b-value {b}")));
        }
        Ok(GradientTable { directions, bvalues })
    }

    /// Single-shell scheme with `count` directions spread over a hemisphere.
    pub fn single_shell(count: usize, bvalue: f64) -> Result<Self> {
        GradientTable::new(fibonacci_hemisphere(count), vec![bvalue; count])
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

    pub fn bvalues(&self) -> &[f64] {
        &self.bvalues
    }

    pub fn is_b0(&self, i: usize) -> bool {
        self.bvalues[i] < B0_THRESHOLD
    }

    /// Table restricted to the given measurement indices, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        if let Some(&i) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::InvalidArgument(format!(
                "measurement index {i} out of range for table of {}",
                self.len()
            )));
        }
        GradientTable::new(
            indices.iter().map(|&i| self.directions[i]).collect(),
            indices.iter().map(|&i| self.bvalues[i]).collect(),
        )
    }
}

/// One axially symmetric tensor compartment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Fascicle {
    pub fraction: f64,
    /// Axial diffusivity, mm²/s.
    pub lambda_par: f64,
    /// Radial diffusivity, mm²/s.
    pub lambda_perp: f64,
    pub orientation: UnitDirection,
}

/// Ground-truth compartment parameters of a voxel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoxelModel {
    pub f_iso: f64,
    pub lambda_iso: f64,
    pub fascicles: Vec<Fascicle>,
}

pub const MAX_FASCICLES: usize = 3;

impl VoxelModel {
    /// Fully isotropic voxel.
    pub fn isotropic(lambda_iso: f64) -> Self {
        VoxelModel {
            f_iso: 1.0,
            lambda_iso,
            fascicles: Vec::new(),
        }
    }

    pub fn count(&self) -> usize {
        self.fascicles.len()
    }

    pub fn orientations(&self) -> Vec<UnitDirection> {
        self.fascicles.iter().map(|f| f.orientation).collect()
    }

    /// Checks the structural invariants, with fascicles required to be at
    /// least `min_angle_deg` apart.
    pub fn validate(&self, min_angle_deg: f64) -> Result<()> {
        let fail = |msg: String| Err(Error::Validation(msg));
        if self.fascicles.len() > MAX_FASCICLES {
            return fail(format!("{} fascicles exceeds the maximum of {MAX_FASCICLES}", self.fascicles.len()));
        }
        if !(self.lambda_iso > 0.0) {
            return fail(format!("isotropic diffusivity {} must be positive", self.lambda_iso));
        }
        if !(self.f_iso >= 0.0) {
            return fail(format!("negative isotropic fraction {}", self.f_iso));
        }
        let mut total = self.f_iso;
        for (k, f) in self.fascicles.iter().enumerate() {
            if !(f.fraction >= 0.0) {
                return fail(format!("fascicle {k} has negative fraction {}", f.fraction));
            }
            if !(f.lambda_par > f.lambda_perp && f.lambda_perp > 0.0) {
                return fail(format!(
                    "fascicle {k} needs lambda_par > lambda_perp > 0, got {} and {}",
                    f.lambda_par, f.lambda_perp
                ));
            }
            total += f.fraction;
        }
        if (total - 1.0).abs() > 1e-9 {
            return fail(format!("fractions sum to {total}, expected 1"));
        }
        for (a, fa) in self.fascicles.iter().enumerate() {
            for fb in &self.fascicles[a + 1..] {
                let ang = angle_between(&fa.orientation, &fb.orientation, true);
                if ang < min_angle_deg {
                    return fail(format!("fascicles cross at {ang:.2} deg, below the {min_angle_deg} deg minimum"));
                }
            }
        }
        Ok(())
    }
}

/// Measurement noise applied by the simulator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum NoiseSpec {
    #[default]
    None,
    /// Rician magnitude noise; `snr` is relative to s0.
    Rician { snr: f64 },
}

impl NoiseSpec {
    pub fn rician(snr: f64) -> Result<Self> {
        if !(snr.is_finite() && snr > 0.0) {
            return Err(Error::InvalidArgument(format!("SNR must be positive, got {snr}")));
        }
        Ok(NoiseSpec::Rician { snr })
    }
}

/// Noiseless normalized signal `s/s0` for one measurement.
pub fn noiseless_signal(model: &VoxelModel, q: &UnitDirection, b: f64) -> f64 {
    let mut s = model.f_iso * (-b * model.lambda_iso).exp();
    for f in &model.fascicles {
        let mean_diff = (f.lambda_par + 2.0 * f.lambda_perp) / 3.0;
        let cos = q.dot(&f.orientation);
        let apparent = f.lambda_perp + 3.0 * (mean_diff - f.lambda_perp) * cos * cos;
        s += f.fraction * (-b * apparent).exp();
    }
    s
}

/// Normalized signals `s_i/s0` of `model` for every measurement in `table`.
///
/// Rician corruption replaces each value `s` with
/// `sqrt((s + e1/snr)² + (e2/snr)²)`, `e1, e2` standard normal draws from a
/// generator seeded with `rng_seed`.
pub fn simulate_signal(model: &VoxelModel, table: &GradientTable, noise: NoiseSpec, rng_seed: u64) -> Vec<f64> {
    let mut out: Vec<f64> = table
        .directions()
        .iter()
        .zip(table.bvalues())
        .map(|(q, &b)| noiseless_signal(model, q, b))
        .collect();
    if let NoiseSpec::Rician { snr } = noise {
        add_rician_noise(&mut out, snr, rng_seed);
    }
    out
}

pub fn add_rician_noise(signals: &mut [f64], snr: f64, rng_seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let sigma = 1.0 / snr;
    for s in signals.iter_mut() {
        let e1: f64 = StandardNormal.sample(&mut rng);
        let e2: f64 = StandardNormal.sample(&mut rng);
        let re = *s + sigma * e1;
        let im = sigma * e2;
        *s = (re * re + im * im).sqrt();
    }
}

/// Closed interval `[lo, hi]` sampled uniformly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl Range {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Range { lo, hi }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.hi > self.lo {
            rng.gen_range(self.lo..=self.hi)
        } else {
            self.lo
        }
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.lo && v <= self.hi
    }

    fn check(&self, name: &str) -> Result<()> {
        if self.lo.is_finite() && self.hi.is_finite() && self.lo <= self.hi {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("{name} range [{}, {}] is invalid", self.lo, self.hi)))
        }
    }
}

/// Parameter ranges for random training voxels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    /// Fascicle counts drawn uniformly.
    pub fascicle_counts: Vec<usize>,
    pub min_crossing_angle_deg: f64,
    pub min_fraction: f64,
    pub lambda_par: Range,
    pub lambda_perp: Range,
    pub f_iso: Range,
    pub lambda_iso: Range,
    pub snr: Range,
    pub max_attempts: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            fascicle_counts: vec![1, 2, 3],
            min_crossing_angle_deg: 30.0,
            min_fraction: 0.15,
            lambda_par: Range::new(0.0018, 0.0024),
            lambda_perp: Range::new(0.00035, 0.00050),
            f_iso: Range::new(0.0, 0.2),
            lambda_iso: Range::new(0.002, 0.003),
            snr: Range::new(10.0, 30.0),
            max_attempts: 10_000,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.fascicle_counts.is_empty() || self.fascicle_counts.iter().any(|&k| k == 0 || k > MAX_FASCICLES) {
            return Err(Error::InvalidArgument(format!(
                "fascicle_counts must be a non-empty subset of 1..={MAX_FASCICLES}, got {:?}",
                self.fascicle_counts
            )));
        }
        self.lambda_par.check("lambda_par")?;
        self.lambda_perp.check("lambda_perp")?;
        self.f_iso.check("f_iso")?;
        self.lambda_iso.check("lambda_iso")?;
        self.snr.check("snr")?;
        if self.lambda_perp.hi >= self.lambda_par.lo || self.lambda_perp.lo <= 0.0 {
            return Err(Error::InvalidArgument("lambda_perp range must lie in (0, lambda_par.lo)".into()));
        }
        if self.lambda_iso.lo <= 0.0 || self.snr.lo <= 0.0 {
            return Err(Error::InvalidArgument("lambda_iso and snr must be positive".into()));
        }
        if self.f_iso.lo < 0.0 || self.f_iso.hi >= 1.0 {
            return Err(Error::InvalidArgument("f_iso range must lie in [0, 1)".into()));
        }
        if !(0.0..90.0).contains(&self.min_crossing_angle_deg) || !(0.0..1.0).contains(&self.min_fraction) {
            return Err(Error::InvalidArgument("min_crossing_angle_deg or min_fraction out of range".into()));
        }
        if self.max_attempts == 0 {
            return Err(Error::InvalidArgument("max_attempts must be positive".into()));
        }
        Ok(())
    }
}

/// Draws a random voxel: count uniform over `fascicle_counts`, orientations
/// uniform on the sphere with a minimum pairwise crossing angle, fractions
/// uniform on the simplex of `1 - f_iso` with a floor of `min_fraction`.
pub fn sample_training_voxel(config: &SamplerConfig, rng_seed: u64) -> Result<VoxelModel> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let k = config.fascicle_counts[rng.gen_range(0..config.fascicle_counts.len())];

    let min_cos = config.min_crossing_angle_deg.to_radians().cos();
    let mut orientations: Vec<UnitDirection> = Vec::with_capacity(k);
    let mut attempts = 0;
    while orientations.len() < k {
        attempts += 1;
        if attempts > config.max_attempts {
            return Err(Error::SamplingExhausted(config.max_attempts));
        }
        let [x, y, z]: [f64; 3] = UnitSphere.sample(&mut rng);
        let cand = UnitDirection::new(x, y, z)?;
        if orientations.iter().all(|o| o.dot(&cand).abs() <= min_cos) {
            orientations.push(cand);
        }
    }

    let (f_iso, fractions) = {
        let mut attempts = 0;
        loop {
            attempts += 1;
            if attempts > config.max_attempts {
                return Err(Error::SamplingExhausted(config.max_attempts));
            }
            let f_iso = config.f_iso.sample(&mut rng);
            // uniform on the simplex via normalized exponential draws
            let e: Vec<f64> = (0..k).map(|_| -(1.0 - rng.gen::<f64>()).ln()).collect();
            let total: f64 = e.iter().sum();
            let fr: Vec<f64> = e.iter().map(|v| v / total * (1.0 - f_iso)).collect();
            if fr.iter().all(|&f| f >= config.min_fraction) {
                break (f_iso, fr);
            }
        }
    };

    let fascicles = orientations
        .into_iter()
        .zip(fractions)
        .map(|(orientation, fraction)| Fascicle {
            fraction,
            lambda_par: config.lambda_par.sample(&mut rng),
            lambda_perp: config.lambda_perp.sample(&mut rng),
            orientation,
        })
        .collect();
    let mut model = VoxelModel {
        f_iso,
        lambda_iso: config.lambda_iso.sample(&mut rng),
        fascicles,
    };
    // exact unit sum
    let anis: f64 = model.fascicles.iter().map(|f| f.fraction).sum();
    model.f_iso = 1.0 - anis;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_z() -> VoxelModel {
        VoxelModel {
            f_iso: 0.0,
            lambda_iso: 0.003,
            fascicles: vec![Fascicle {
                fraction: 1.0,
                lambda_par: 0.0018,
                lambda_perp: 0.0004,
                orientation: UnitDirection::z_axis(),
            }],
        }
    }

    fn table_of(dirs: Vec<UnitDirection>, b: f64) -> GradientTable {
        let n = dirs.len();
        GradientTable::new(dirs, vec![b; n]).unwrap()
    }

    #[test]
    fn perpendicular_and_parallel_values() {
        let model = single_z();
        let mut dirs = vec![UnitDirection::x_axis(); 3];
        dirs.extend(vec![UnitDirection::z_axis(); 3]);
        let s = simulate_signal(&model, &table_of(dirs, 1000.0), NoiseSpec::None, 0);
        assert!((s[0] - (-0.4f64).exp()).abs() < 1e-12);
        assert!((s[0] - 0.670320).abs() < 1e-6);
        assert!((s[3] - (-1.8f64).exp()).abs() < 1e-12);
        assert!((s[3] - 0.165299).abs() < 1e-6);
    }

    #[test]
    fn b0_gives_unit_signal() {
        let model = sample_training_voxel(&SamplerConfig::default(), 3).unwrap();
        let t = GradientTable::single_shell(10, 0.0).unwrap();
        for s in simulate_signal(&model, &t, NoiseSpec::None, 0) {
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn table_validation() {
        assert!(GradientTable::single_shell(5, 1000.0).is_err());
        let dirs = vec![UnitDirection::z_axis(); 6];
        assert!(GradientTable::new(dirs.clone(), vec![1000.0; 5]).is_err());
        assert!(GradientTable::new(dirs, vec![-1.0; 6]).is_err());
    }

    #[test]
    fn forced_single_fascicle() {
        let cfg = SamplerConfig {
            fascicle_counts: vec![1],
            ..Default::default()
        };
        for seed in 0..50 {
            let m = sample_training_voxel(&cfg, seed).unwrap();
            assert_eq!(m.count(), 1);
            assert!((m.fascicles[0].fraction - (1.0 - m.f_iso)).abs() < 1e-12);
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let cfg = SamplerConfig::default();
        assert_eq!(sample_training_voxel(&cfg, 42).unwrap(), sample_training_voxel(&cfg, 42).unwrap());
    }

    #[test]
    fn impossible_config_exhausts() {
        let cfg = SamplerConfig {
            fascicle_counts: vec![3],
            min_fraction: 0.34,
            f_iso: Range::new(0.1, 0.2),
            max_attempts: 100,
            ..Default::default()
        };
        assert!(matches!(sample_training_voxel(&cfg, 1), Err(Error::SamplingExhausted(100))));
    }

    #[test]
    fn high_snr_converges_to_noiseless() {
        let model = single_z();
        let t = GradientTable::single_shell(1000, 1000.0).unwrap();
        let clean = simulate_signal(&model, &t, NoiseSpec::None, 0);
        let noisy = simulate_signal(&model, &t, NoiseSpec::rician(1e6).unwrap(), 9);
        let dev = clean.iter().zip(&noisy).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(dev < 1e-4);
    }

    #[test]
    fn signal_monotone_in_angle() {
        let model = single_z();
        let dirs: Vec<UnitDirection> = (0..=180)
            .map(|i| UnitDirection::from_spherical((i as f64 * 0.5).to_radians(), 0.3))
            .collect();
        let s = simulate_signal(&model, &table_of(dirs, 1000.0), NoiseSpec::None, 0);
        assert!(s.windows(2).all(|w| w[1] > w[0]));
    }
}
