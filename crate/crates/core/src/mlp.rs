//! Multilayer perceptron regressing the angle from a probe direction to the
//! closest fascicle, plus its training loop and on-disk format.

use std::io::Write;
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::features::{FeatureExtractor, FeatureParams, FeatureVector};
use crate::signal::{sample_training_voxel, simulate_signal, GradientTable, NoiseSpec, SamplerConfig};
use crate::sphere::{angle_between_rad, SphereGrid};

pub const HIDDEN_LAYERS: [usize; 6] = [30, 60, 80, 80, 60, 30];

pub const MODEL_MAGIC: &str = "FLAB-MLP1";

const MAX_ANGLE: f64 = std::f64::consts::FRAC_PI_2;

/// Dense layer; `weights` has shape `(outputs, inputs)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelMeta {
    pub feature: FeatureParams,
    /// Digest of the training configuration, empty for untrained models.
    pub train_digest: String,
}

/// ReLU network `[n+1, 30, 60, 80, 80, 60, 30, 1]` with a linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    layers: Vec<Layer>,
    meta: ModelMeta,
}

fn architecture(input: usize) -> Vec<usize> {
    let mut sizes = vec![input];
    sizes.extend(HIDDEN_LAYERS);
    sizes.push(1);
    sizes
}

impl MlpModel {
    /// Fan-in scaled normal initialization (variance `2 / fan_in`), zero biases.
    pub fn init(feature: FeatureParams, rng_seed: u64) -> Result<Self> {
        feature.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let sizes = architecture(feature.len());
        let layers = sizes
            .windows(2)
            .map(|w| {
                let normal = Normal::new(0.0, (2.0 / w[0] as f64).sqrt()).expect("positive std");
                Layer {
                    weights: Array2::from_shape_fn((w[1], w[0]), |_| normal.sample(&mut rng)),
                    bias: Array1::zeros(w[1]),
                }
            })
            .collect();
        Ok(MlpModel {
            layers,
            meta: ModelMeta {
                feature,
                train_digest: String::new(),
            },
        })
    }

    /// All-zero weights; the output is the (clamped) output bias.
    pub fn zeros(feature: FeatureParams) -> Result<Self> {
        feature.validate()?;
        let sizes = architecture(feature.len());
        let layers = sizes
            .windows(2)
            .map(|w| Layer {
                weights: Array2::zeros((w[1], w[0])),
                bias: Array1::zeros(w[1]),
            })
            .collect();
        Ok(MlpModel {
            layers,
            meta: ModelMeta {
                feature,
                train_digest: String::new(),
            },
        })
    }

    pub fn from_layers(layers: Vec<Layer>, meta: ModelMeta) -> Result<Self> {
        meta.feature.validate()?;
        let expected = architecture(meta.feature.len());
        let mut sizes = Vec::with_capacity(layers.len() + 1);
        if let Some(first) = layers.first() {
            sizes.push(first.weights.ncols());
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.weights.nrows() {
                return Err(Error::Validation(format!("layer {i} bias length does not match its weights")));
            }
            if i > 0 && l.weights.ncols() != layers[i - 1].weights.nrows() {
                return Err(Error::Validation(format!("layer {i} input width does not chain")));
            }
            sizes.push(l.weights.nrows());
        }
        if sizes != expected {
            return Err(Error::Validation(format!("layer sizes {sizes:?} differ from required {expected:?}")));
        }
        Ok(MlpModel { layers, meta })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn meta(&self) -> &ModelMeta {
        &self.meta
    }

    pub fn feature_params(&self) -> FeatureParams {
        self.meta.feature
    }

    pub fn input_len(&self) -> usize {
        self.layers[0].weights.ncols()
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.input_len()];
        sizes.extend(self.layers.iter().map(|l| l.weights.nrows()));
        sizes
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Raw (unclamped) network output for each row of `inputs`.
    pub fn forward_batch(&self, inputs: ArrayView2<f64>) -> Array1<f64> {
        let mut act = inputs.to_owned();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = act.dot(&layer.weights.t());
            z += &layer.bias;
            if i < last {
                z.mapv_inplace(relu);
            }
            act = z;
        }
        act.index_axis_move(Axis(1), 0)
    }

    /// Predicted angles in radians, clamped to `[0, π/2]`.
    pub fn predict_batch(&self, inputs: ArrayView2<f64>) -> Result<Vec<f64>> {
        if inputs.ncols() != self.input_len() {
            return Err(Error::InvalidArgument(format!(
                "feature length {} does not match model input size {}",
                inputs.ncols(),
                self.input_len()
            )));
        }
        Ok(self.forward_batch(inputs).iter().map(|&v| clamp_angle(v)).collect())
    }

    /// Mean squared error over the batch and its gradient for every layer.
    pub fn loss_and_gradient(&self, inputs: ArrayView2<f64>, targets: &[f64]) -> (f64, Vec<Layer>) {
        let batch = inputs.nrows();
        let last = self.layers.len() - 1;
        let mut acts: Vec<Array2<f64>> = Vec::with_capacity(self.layers.len() + 1);
        acts.push(inputs.to_owned());
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = acts[i].dot(&layer.weights.t());
            z += &layer.bias;
            if i < last {
                z.mapv_inplace(relu);
            }
            acts.push(z);
        }

        let out = acts[last + 1].column(0);
        let scale = 2.0 / batch as f64;
        let mut loss = 0.0;
        let mut delta = Array2::zeros((batch, 1));
        for (r, (&y, &t)) in out.iter().zip(targets).enumerate() {
            let e = y - t;
            loss += e * e;
            delta[[r, 0]] = scale * e;
        }
        loss /= batch as f64;

        let mut grads: Vec<Layer> = Vec::with_capacity(self.layers.len());
        for l in (0..self.layers.len()).rev() {
            let gw = delta.t().dot(&acts[l]);
            let gb = delta.sum_axis(Axis(0));
            grads.push(Layer { weights: gw, bias: gb });
            if l > 0 {
                let mut next = delta.dot(&self.layers[l].weights);
                ndarray::Zip::from(&mut next).and(&acts[l]).for_each(|d, &a| {
                    if a <= 0.0 {
                        *d = 0.0;
                    }
                });
                delta = next;
            }
        }
        grads.reverse();
        (loss, grads)
    }

    /// Hex SHA-256 of every weight and bias in file order.
    pub fn weight_digest(&self) -> String {
        let mut h = Sha256::new();
        for layer in &self.layers {
            for v in layer.weights.iter().chain(layer.bias.iter()) {
                h.update(v.to_le_bytes());
            }
        }
        hex(&h.finalize())
    }
}

fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

fn clamp_angle(v: f64) -> f64 {
    if v.is_nan() {
        MAX_ANGLE
    } else {
        v.clamp(0.0, MAX_ANGLE)
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Angle to the closest fascicle predicted for one feature vector, radians.
pub fn predict_angle(model: &MlpModel, feature: &FeatureVector) -> Result<f64> {
    let row = ArrayView2::from_shape((1, feature.values.len()), &feature.values)
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Ok(model.predict_batch(row)?[0])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub sample_count: usize,
    pub directions_per_voxel: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub rng_seed: u64,
    pub feature: FeatureParams,
    pub sampler: SamplerConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            sample_count: 50_000,
            directions_per_voxel: 32,
            batch_size: 256,
            epochs: 50,
            learning_rate: 1e-3,
            rng_seed: 0,
            feature: FeatureParams::default(),
            sampler: SamplerConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sample_count == 0 || self.directions_per_voxel == 0 || self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::InvalidArgument(
                "sample_count, directions_per_voxel, batch_size and epochs must be positive".into(),
            ));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::InvalidArgument(format!("learning rate {} must be positive", self.learning_rate)));
        }
        self.feature.validate()?;
        self.sampler.validate()
    }

    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex(&Sha256::digest(json))[..16].to_string()
    }
}

/// Rows of features with their target angles (radians).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Array2<f64>,
    pub targets: Array1<f64>,
}

impl Dataset {
    /// Builds a dataset from externally supplied (feature, target) pairs.
    pub fn from_pairs(pairs: &[(Vec<f64>, f64)]) -> Result<Self> {
        let width = pairs.first().map(|p| p.0.len()).unwrap_or(0);
        if pairs.iter().any(|p| p.0.len() != width) {
            return Err(Error::InvalidArgument("ragged feature rows".into()));
        }
        let mut inputs = Array2::zeros((pairs.len(), width));
        for (r, (f, _)) in pairs.iter().enumerate() {
            inputs.row_mut(r).assign(&Array1::from(f.clone()));
        }
        Ok(Dataset {
            inputs,
            targets: pairs.iter().map(|p| p.1).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

fn voxel_seed(base: u64, index: u64) -> u64 {
    base ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Simulates `sample_count` random voxels and draws `directions_per_voxel`
/// probe directions from the grid for each. The target is the antipodal angle
/// from the probe to its closest fascicle.
pub fn generate_dataset(config: &TrainConfig, grid: &SphereGrid, table: &GradientTable) -> Result<Dataset> {
    config.validate()?;
    let extractor = FeatureExtractor::new(table, config.feature)?;
    let rows = config.sample_count * config.directions_per_voxel;
    let width = config.feature.len();
    let mut inputs = Array2::zeros((rows, width));
    let mut targets = Array1::zeros(rows);
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let mut buf = vec![0.0; width];
    for v in 0..config.sample_count {
        let model = sample_training_voxel(&config.sampler, voxel_seed(config.rng_seed, 2 * v as u64))?;
        let snr = config.sampler.snr.sample(&mut rng);
        let signals = simulate_signal(&model, table, NoiseSpec::rician(snr)?, voxel_seed(config.rng_seed, 2 * v as u64 + 1));
        for d in 0..config.directions_per_voxel {
            let u = grid.direction(rng.gen_range(0..grid.len()));
            extractor.compute_into(&u, &signals, &mut buf)?;
            let row = v * config.directions_per_voxel + d;
            inputs.row_mut(row).assign(&ndarray::aview1(&buf));
            targets[row] = closest_fascicle_angle(&u, &model.orientations());
        }
    }
    Ok(Dataset { inputs, targets })
}

/// Antipodal angle in radians from `u` to the nearest orientation; `π/2`
/// when there are none.
pub fn closest_fascicle_angle(u: &crate::sphere::UnitDirection, orientations: &[crate::sphere::UnitDirection]) -> f64 {
    orientations
        .iter()
        .map(|o| angle_between_rad(u, o, true))
        .fold(MAX_ANGLE, f64::min)
}

struct Adam {
    m: Vec<Layer>,
    v: Vec<Layer>,
    step: i32,
    lr: f64,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(model: &MlpModel, lr: f64) -> Self {
        let zeros = |m: &MlpModel| {
            m.layers
                .iter()
                .map(|l| Layer {
                    weights: Array2::zeros(l.weights.raw_dim()),
                    bias: Array1::zeros(l.bias.len()),
                })
                .collect::<Vec<_>>()
        };
        Adam {
            m: zeros(model),
            v: zeros(model),
            step: 0,
            lr,
        }
    }

    fn update(&mut self, model: &mut MlpModel, grads: &[Layer]) {
        self.step += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.step);
        let c2 = 1.0 - Self::BETA2.powi(self.step);
        let lr = self.lr;
        for (((layer, g), m), v) in model.layers.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let apply = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
                *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * g;
                *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
            };
            ndarray::Zip::from(&mut layer.weights)
                .and(&g.weights)
                .and(&mut m.weights)
                .and(&mut v.weights)
                .for_each(|p, &g, m, v| apply(p, g, m, v));
            ndarray::Zip::from(&mut layer.bias)
                .and(&g.bias)
                .and(&mut m.bias)
                .and(&mut v.bias)
                .for_each(|p, &g, m, v| apply(p, g, m, v));
        }
    }
}

/// Trained model together with the mean training loss of every epoch.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: MlpModel,
    pub epoch_losses: Vec<f64>,
}

/// Minimizes mean squared angle error with mini-batch Adam. Single-threaded
/// and deterministic for a given `rng_seed`.
///
/// Inputs are standardized per feature during training and the scaling is
/// folded into the first layer afterwards, so the returned model takes raw
/// feature vectors.
pub fn train(dataset: &Dataset, config: &TrainConfig) -> Result<MlpModel> {
    Ok(train_with_history(dataset, config, |_, _| {})?.model)
}

/// [`train`] reporting `(epoch, mean loss)` after every epoch.
pub fn train_with_history(
    dataset: &Dataset,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<TrainOutcome> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("empty training dataset".into()));
    }
    if dataset.inputs.ncols() != config.feature.len() {
        return Err(Error::InvalidArgument(format!(
            "dataset rows have {} features, config expects {}",
            dataset.inputs.ncols(),
            config.feature.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed ^ 0x5EED_0F_7EA1);
    let mut model = MlpModel::init(config.feature, rng.gen())?;
    model.meta.train_digest = config.digest();
    let mut adam = Adam::new(&model, config.learning_rate);

    let n = dataset.len();
    let width = dataset.inputs.ncols();
    let (mean, scale) = input_scaling(&dataset.inputs);
    let mut order: Vec<usize> = (0..n).collect();
    let mut xb = Array2::zeros((config.batch_size.min(n), width));
    let mut tb = vec![0.0; config.batch_size.min(n)];
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let rows = chunk.len();
            for (r, &i) in chunk.iter().enumerate() {
                let mut row = xb.row_mut(r);
                row.assign(&dataset.inputs.row(i));
                row -= &mean;
                row *= &scale;
                tb[r] = dataset.targets[i];
            }
            let (loss, grads) = model.loss_and_gradient(xb.slice(s![..rows, ..]), &tb[..rows]);
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch });
            }
            total += loss * rows as f64;
            adam.update(&mut model, &grads);
        }
        let epoch_loss = total / n as f64;
        on_epoch(epoch, epoch_loss);
        epoch_losses.push(epoch_loss);
    }
    // x' = (x - mean) * scale, so W x' + b = (W diag(scale)) x + (b - W diag(scale) mean)
    let first = &mut model.layers[0];
    first.weights *= &scale.view().insert_axis(Axis(0));
    first.bias -= &first.weights.dot(&mean);
    Ok(TrainOutcome { model, epoch_losses })
}

/// Per-column mean and inverse standard deviation; constant columns keep
/// unit scale.
fn input_scaling(inputs: &Array2<f64>) -> (Array1<f64>, Array1<f64>) {
    let mean = inputs.mean_axis(Axis(0)).expect("non-empty dataset");
    let std = inputs.std_axis(Axis(0), 0.0);
    let scale = std.mapv(|s| if s > 1e-12 { 1.0 / s } else { 1.0 });
    (mean, scale)
}

/// Mean squared error of the raw network output over a dataset.
pub fn evaluate_mse(model: &MlpModel, dataset: &Dataset) -> f64 {
    let out = model.forward_batch(dataset.inputs.view());
    out.iter()
        .zip(dataset.targets.iter())
        .map(|(y, t)| (y - t).powi(2))
        .sum::<f64>()
        / dataset.len() as f64
}

/// Writes the model: magic line, text header closed by `end`, then every
/// layer's weights (row-major, `outputs x inputs`) followed by its bias, as
/// little-endian f64.
pub fn save_model(model: &MlpModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf: Vec<u8> = Vec::new();
    let sizes: Vec<String> = model.layer_sizes().iter().map(|s| s.to_string()).collect();
    let header = format!(
        "{MODEL_MAGIC}\nlayers: {}\nn: {}\nepsilon: {:?}\ntrain_digest: {}\nvalues: {}\nend\n",
        sizes.join(" "),
        model.meta.feature.n,
        model.meta.feature.epsilon,
        if model.meta.train_digest.is_empty() { "-" } else { &model.meta.train_digest },
        model.parameter_count()
    );
    buf.extend_from_slice(header.as_bytes());
    for layer in &model.layers {
        for v in layer.weights.iter().chain(layer.bias.iter()) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<MlpModel> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_model(&bytes)
}

pub fn parse_model(bytes: &[u8]) -> Result<MlpModel> {
    let magic = format!("{MODEL_MAGIC}\n");
    if !bytes.starts_with(magic.as_bytes()) {
        return Err(Error::Format(format!("missing {MODEL_MAGIC} magic")));
    }
    let mut pos = magic.len();
    let mut fields: Vec<(String, String)> = Vec::new();
    loop {
        let rest = &bytes[pos..];
        let nl = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Format("unterminated model header".into()))?;
        let line = std::str::from_utf8(&rest[..nl]).map_err(|_| Error::Format("non-UTF-8 model header".into()))?;
        pos += nl + 1;
        if line == "end" {
            break;
        }
        let (k, v) = line
            .split_once(':')
            .ok_or_else(|| Error::Format(format!("malformed header line {line:?}")))?;
        fields.push((k.trim().to_string(), v.trim().to_string()));
    }
    let get = |key: &str| {
        fields
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::Format(format!("model header lacks {key:?}")))
    };
    let bad = |key: &str| Error::Format(format!("unparsable {key:?} in model header"));
    let sizes: Vec<usize> = get("layers")?
        .split_whitespace()
        .map(|s| s.parse().map_err(|_| bad("layers")))
        .collect::<Result<_>>()?;
    let n: usize = get("n")?.parse().map_err(|_| bad("n"))?;
    let epsilon: f64 = get("epsilon")?.parse().map_err(|_| bad("epsilon"))?;
    let digest = get("train_digest")?;
    let count: usize = get("values")?.parse().map_err(|_| bad("values"))?;

    if sizes.len() < 2 {
        return Err(Error::Validation(format!("layer sizes {sizes:?} too short")));
    }
    let expected: usize = sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
    if expected != count {
        return Err(Error::Format(format!("header declares {count} values but layers need {expected}")));
    }
    let payload = &bytes[pos..];
    if payload.len() != count * 8 {
        return Err(Error::Format(format!(
            "payload holds {} bytes, expected {}",
            payload.len(),
            count * 8
        )));
    }
    let mut values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
    let layers = sizes
        .windows(2)
        .map(|w| {
            let weights = Array2::from_shape_fn((w[1], w[0]), |_| values.next().expect("sized payload"));
            let bias = Array1::from_shape_fn(w[1], |_| values.next().expect("sized payload"));
            Layer { weights, bias }
        })
        .collect();
    MlpModel::from_layers(
        layers,
        ModelMeta {
            feature: FeatureParams { n, epsilon },
            train_digest: if digest == "-" { String::new() } else { digest.to_string() },
        },
    )
}
