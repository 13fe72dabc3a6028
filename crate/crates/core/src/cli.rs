//! Command-line front end. Every subcommand validates its paths and numeric
//! flags before doing any work.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use crate::baseline::tensor_peaks;
use crate::error::{Error, Result};
use crate::io::{
    format_regions, format_streamlines, read_gradient_table, read_predictions, read_regions, read_truth, read_volume,
    write_gradient_table, write_json, write_text, write_volume, PredictionFile, TruthFile, Volume,
};
use crate::metrics::{
    count_metrics, downsample_experiment, field_errors_deg, field_from_orientations, format_class_table,
    format_count_table, format_downsample_table, format_success_table, waae, ClassErrors, KeyValues,
};
use crate::mlp::{generate_dataset, load_model, save_model, train_with_history, TrainConfig};
use crate::phantom::{build_phantom, PhantomSpec};
use crate::postprocess::{Estimator, PipelineConfig};
use crate::signal::{GradientTable, NoiseSpec, MAX_FASCICLES};
use crate::sphere::{fibonacci_hemisphere, SphereGrid, DEFAULT_GRID_SIZE};
use crate::tracking::{success_ratio, track, PeakField, TrackParams};

#[derive(Debug, Parser)]
#[command(name = "flab", version, about = "Fiber orientation estimation from diffusion MRI with a learned angle field")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a single-shell gradient table.
    Scheme(SchemeArgs),
    /// Simulate a phantom volume with its ground truth.
    Simulate(SimulateArgs),
    /// Train the angle regressor.
    Train(TrainArgs),
    /// Estimate fascicle orientations for every voxel of a volume.
    Predict(PredictArgs),
    /// Compare predictions against ground truth.
    Evaluate(EvaluateArgs),
    /// Robustness of the dominant peak to removed measurements.
    Downsample(DownsampleArgs),
    /// Streamline tractography and success ratios.
    Track(TrackArgs),
}

#[derive(Debug, Args)]
pub struct SchemeArgs {
    #[arg(long, default_value_t = 64)]
    pub directions: usize,
    #[arg(long, default_value_t = 1000.0)]
    pub bvalue: f64,
    /// Number of b=0 measurements prepended.
    #[arg(long, default_value_t = 0)]
    pub b0: usize,
    #[arg(long)]
    pub bvec: PathBuf,
    #[arg(long)]
    pub bval: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Builtin phantom name (grid15, bundles20) or a JSON/TOML spec file.
    #[arg(long)]
    pub spec: String,
    #[arg(long)]
    pub bvec: PathBuf,
    #[arg(long)]
    pub bval: PathBuf,
    /// Rician SNR; omit for noiseless signals.
    #[arg(long)]
    pub noise_snr: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the seed in the config file.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Method {
    Mlp,
    Dti,
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    #[arg(long, default_value_t = DEFAULT_GRID_SIZE)]
    pub grid: usize,
    /// Peak threshold in degrees.
    #[arg(long, default_value_t = 30.0)]
    pub threshold: f64,
    #[arg(long, default_value_t = 2)]
    pub smoothing_iterations: usize,
    #[arg(long, default_value_t = 0.5)]
    pub smoothing_lambda: f64,
    /// Merge peaks closer than this many degrees (0 disables).
    #[arg(long, default_value_t = 0.0)]
    pub min_separation: f64,
}

impl PipelineArgs {
    fn config(&self, fodf_power: f64) -> Result<PipelineConfig> {
        if self.grid < 12 || self.grid % 2 != 0 {
            return Err(Error::InvalidArgument(format!("--grid {} must be even and at least 12", self.grid)));
        }
        if !(self.threshold > 0.0 && self.threshold <= 90.0) {
            return Err(Error::InvalidArgument(format!("--threshold {} must be in (0, 90]", self.threshold)));
        }
        if !(self.smoothing_lambda > 0.0 && self.smoothing_lambda <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "--smoothing-lambda {} must be in (0, 1]",
                self.smoothing_lambda
            )));
        }
        if !(self.min_separation >= 0.0 && self.min_separation < 90.0) {
            return Err(Error::InvalidArgument(format!("--min-separation {} must be in [0, 90)", self.min_separation)));
        }
        let mut c = PipelineConfig {
            threshold_deg: self.threshold,
            smoothing_iterations: self.smoothing_iterations,
            smoothing_lambda: self.smoothing_lambda,
            fodf_power,
            ..PipelineConfig::default()
        };
        c.extract.min_separation_deg = self.min_separation;
        Ok(c)
    }
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long, value_enum, default_value_t = Method::Mlp)]
    pub method: Method,
    /// Trained model; required for the mlp method.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub dwi: PathBuf,
    #[arg(long)]
    pub bvec: PathBuf,
    #[arg(long)]
    pub bval: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
    /// Also write an fODF volume with this sharpness exponent.
    #[arg(long)]
    pub fodf_p: Option<f64>,
    /// Minimum fractional anisotropy for the dti method.
    #[arg(long, default_value_t = 0.1)]
    pub min_fa: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub truth: PathBuf,
    /// Text report; key/value lines go to the same path with a `.kv` suffix.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_GRID_SIZE)]
    pub grid: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct DownsampleArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub dwi: PathBuf,
    #[arg(long)]
    pub bvec: PathBuf,
    #[arg(long)]
    pub bval: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.25, 0.5])]
    pub fractions: Vec<f64>,
    #[arg(long, default_value_t = 10)]
    pub trials: usize,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrackArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub seeds: PathBuf,
    #[arg(long)]
    pub targets: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Success-ratio report; defaults to the output path with a `.report` suffix.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    pub step: f64,
    #[arg(long, default_value_t = 45.0)]
    pub max_angle: f64,
    #[arg(long, default_value_t = 1000)]
    pub max_steps: usize,
    /// Endpoint distance to the target region, in voxels.
    #[arg(long, default_value_t = 2.0)]
    pub tolerance: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Scheme(a) => scheme(a),
        Command::Simulate(a) => simulate(a),
        Command::Train(a) => train(a),
        Command::Predict(a) => predict(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Downsample(a) => downsample(a),
        Command::Track(a) => track_cmd(a),
    }
}

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("{} does not exist", path.display())))
    }
}

fn require_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() && !p.is_dir() => {
            Err(Error::InvalidArgument(format!("output directory {} does not exist", p.display())))
        }
        _ => Ok(()),
    }
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn load_table(bvec: &Path, bval: &Path) -> Result<GradientTable> {
    let (table, warnings) = read_gradient_table(bvec, bval)?;
    for w in warnings {
        eprintln!("warning: {w}");
    }
    Ok(table)
}

/// Loads a volume and checks it against the gradient table.
fn load_dwi(path: &Path, table: &GradientTable) -> Result<Volume> {
    let vol = read_volume(path)?;
    if vol.measurements != table.len() {
        return Err(Error::InvalidArgument(format!(
            "volume has {} measurements per voxel but the gradient table has {}",
            vol.measurements,
            table.len()
        )));
    }
    Ok(vol)
}

fn scheme(a: SchemeArgs) -> Result<()> {
    if a.directions < 6 || !(a.bvalue >= 50.0 && a.bvalue.is_finite()) {
        return Err(Error::InvalidArgument("need at least 6 directions and a b-value of at least 50".into()));
    }
    require_parent(&a.bvec)?;
    require_parent(&a.bval)?;
    let mut dirs = vec![crate::sphere::UnitDirection::z_axis(); a.b0];
    let mut bvals = vec![0.0; a.b0];
    dirs.extend(fibonacci_hemisphere(a.directions));
    bvals.extend(std::iter::repeat(a.bvalue).take(a.directions));
    write_gradient_table(&GradientTable::new(dirs, bvals)?, &a.bvec, &a.bval)
}

fn load_spec(spec: &str) -> Result<PhantomSpec> {
    let path = Path::new(spec);
    if !path.is_file() {
        return PhantomSpec::builtin(spec);
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    if path.extension().is_some_and(|e| e == "toml") {
        toml::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    } else {
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let noise = match a.noise_snr {
        Some(snr) => NoiseSpec::rician(snr)?,
        None => NoiseSpec::None,
    };
    let spec = load_spec(&a.spec)?;
    let table = load_table(&a.bvec, &a.bval)?;
    let phantom = build_phantom(&spec, &table, noise, a.seed)?;
    create_dir(&a.out)?;
    let vol = Volume::from_f64(phantom.dims, phantom.measurements, "dwi", "normalized", &phantom.signals)?;
    write_volume(&vol, a.out.join("dwi.hdr"))?;
    write_json(
        &TruthFile {
            dims: phantom.dims,
            voxels: phantom.voxels.clone(),
            pairs: phantom.pairs.clone(),
        },
        a.out.join("truth.json"),
    )?;
    let seeds: Vec<_> = phantom.pairs.iter().map(|p| (p.name.clone(), p.seeds.clone())).collect();
    let targets: Vec<_> = phantom.pairs.iter().map(|p| (p.name.clone(), p.targets.clone())).collect();
    write_text(&a.out.join("seeds.txt"), &format_regions(&seeds))?;
    write_text(&a.out.join("targets.txt"), &format_regions(&targets))?;
    eprintln!("simulated {} voxels x {} measurements", phantom.voxel_count(), phantom.measurements);
    Ok(())
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct AcquisitionSection {
    bvec: Option<PathBuf>,
    bval: Option<PathBuf>,
    directions: Option<usize>,
    bvalue: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainFile {
    #[serde(default)]
    acquisition: AcquisitionSection,
    #[serde(default)]
    train: TrainConfig,
}

/// Parses a training configuration; relative table paths resolve against
/// `base`.
pub fn parse_train_config(text: &str, base: &Path) -> Result<(GradientTable, TrainConfig)> {
    let file: TrainFile = toml::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
    file.train.validate()?;
    let acq = file.acquisition;
    let table = match (acq.bvec, acq.bval, acq.directions) {
        (Some(v), Some(b), None) => load_table(&base.join(v), &base.join(b))?,
        (None, None, Some(n)) => GradientTable::single_shell(n, acq.bvalue.unwrap_or(1000.0))?,
        (None, None, None) => GradientTable::single_shell(64, acq.bvalue.unwrap_or(1000.0))?,
        _ => {
            return Err(Error::Format(
                "[acquisition] takes either bvec and bval paths or a direction count".into(),
            ))
        }
    };
    Ok((table, file.train))
}

fn train(a: TrainArgs) -> Result<()> {
    require_file(&a.config)?;
    require_parent(&a.out)?;
    let text = std::fs::read_to_string(&a.config).map_err(|e| Error::io(&a.config, e))?;
    let base = a.config.parent().unwrap_or(Path::new("."));
    let (table, mut config) = parse_train_config(&text, base)?;
    if let Some(seed) = a.seed {
        config.rng_seed = seed;
    }
    let grid = SphereGrid::build(DEFAULT_GRID_SIZE)?;
    let dataset = generate_dataset(&config, &grid, &table)?;
    eprintln!("training on {} samples", dataset.len());
    let outcome = train_with_history(&dataset, &config, |epoch, loss| {
        eprintln!("epoch {:>3}  mse {loss:.6}  rmse {:.2} deg", epoch + 1, loss.sqrt().to_degrees());
    })?;
    save_model(&outcome.model, &a.out)
}

fn predict(a: PredictArgs) -> Result<()> {
    let fodf_p = a.fodf_p.unwrap_or(2.0);
    if !(fodf_p > 0.0 && fodf_p.is_finite()) {
        return Err(Error::InvalidArgument(format!("--fodf-p {fodf_p} must be positive")));
    }
    let config = a.pipeline.config(fodf_p)?;
    if !(0.0..=1.0).contains(&a.min_fa) {
        return Err(Error::InvalidArgument(format!("--min-fa {} must be in [0, 1]", a.min_fa)));
    }
    if a.method == Method::Mlp && a.model.is_none() {
        return Err(Error::InvalidArgument("--model is required for --method mlp".into()));
    }
    if a.method == Method::Dti && a.fodf_p.is_some() {
        return Err(Error::InvalidArgument("--fodf-p applies to --method mlp only".into()));
    }
    let table = load_table(&a.bvec, &a.bval)?;
    let vol = load_dwi(&a.dwi, &table)?;
    let model = a.model.as_deref().map(load_model).transpose()?;
    create_dir(&a.out)?;
    let signals = vol.to_f64();

    let voxels = match (a.method, &model) {
        (Method::Mlp, Some(model)) => {
            let grid = SphereGrid::build(a.pipeline.grid)?;
            let est = Estimator::new(model, &grid, config);
            let estimates = est.estimate_volume(&signals, &table)?;
            if a.fodf_p.is_some() {
                let mut fodf = Vec::with_capacity(estimates.len() * grid.len());
                for e in &estimates {
                    fodf.extend(est.fodf(&e.smoothed)?);
                }
                write_volume(&Volume::from_f64(vol.dims, grid.len(), "fodf", "unitless", &fodf)?, a.out.join("fodf.hdr"))?;
                let dirs: String = grid
                    .directions()
                    .iter()
                    .map(|d| format!("{:?} {:?} {:?}\n", d.x(), d.y(), d.z()))
                    .collect();
                write_text(&a.out.join("fodf_grid.txt"), &dirs)?;
            }
            estimates.into_iter().map(|e| e.prediction.orientations).collect()
        }
        _ => tensor_peaks(&signals, &table, a.min_fa)?,
    };
    let method = match a.method {
        Method::Mlp => "mlp",
        Method::Dti => "dti",
    };
    write_json(
        &PredictionFile {
            dims: vol.dims,
            method: method.into(),
            voxels,
        },
        a.out.join("predictions.json"),
    )
}

/// Text and key/value reports comparing predictions with ground truth.
pub fn evaluation_report(pred: &PredictionFile, truth: &TruthFile, grid: &SphereGrid) -> Result<(String, KeyValues)> {
    if pred.voxels.len() != truth.voxels.len() {
        return Err(Error::InvalidArgument(format!(
            "predictions cover {} voxels but the truth has {}",
            pred.voxels.len(),
            truth.voxels.len()
        )));
    }
    let true_counts: Vec<usize> = truth.voxels.iter().map(|v| v.count()).collect();
    let pred_counts: Vec<usize> = pred.voxels.iter().map(Vec::len).collect();
    let conf = count_metrics(&true_counts, &pred_counts)?;
    let mut waae_err = ClassErrors::default();
    let mut field_err = ClassErrors::default();
    for (t, p) in truth.voxels.iter().zip(&pred.voxels) {
        let k = t.count();
        if k == 0 {
            continue;
        }
        let weighted: Vec<_> = t.fascicles.iter().map(|f| (f.orientation, f.fraction)).collect();
        waae_err.add(k, [waae(&weighted, p)?]);
        let field = field_from_orientations(grid, p);
        field_err.add(k, field_errors_deg(&field, &t.orientations(), grid).collect::<Vec<_>>());
    }
    let per_class = |f: &dyn Fn(usize) -> Option<f64>| -> [Option<f64>; MAX_FASCICLES] { std::array::from_fn(|c| f(c + 1)) };
    let waae_row = per_class(&|k| waae_err.mean(k));
    let field_row = per_class(&|k| field_err.rms(k));
    let mut text = format!("method: {}\nvoxels: {}\n\nfascicle count detection\n", pred.method, conf.total);
    text += &format_count_table(&[(pred.method.as_str(), &conf)]);
    text.push('\n');
    text += &format_class_table("weighted average angular error (deg)", &[(pred.method.as_str(), waae_row)]);
    text.push('\n');
    text += &format_class_table("angle-field rms error (deg)", &[(pred.method.as_str(), field_row)]);

    let mut kv = KeyValues::new();
    kv.push("method", &pred.method);
    kv.push("voxels", conf.total);
    for k in 1..=MAX_FASCICLES {
        let r = conf.class(k);
        kv.push_f64(format!("accuracy.{k}"), r.accuracy);
        kv.push_f64(format!("sensitivity.{k}"), r.sensitivity);
        kv.push_f64(format!("specificity.{k}"), r.specificity);
        if let Some(v) = waae_row[k - 1] {
            kv.push_f64(format!("waae.{k}"), v);
        }
        if let Some(v) = field_row[k - 1] {
            kv.push_f64(format!("field_rms.{k}"), v);
        }
    }
    Ok((text, kv))
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    require_file(&a.pred)?;
    require_file(&a.truth)?;
    require_parent(&a.out)?;
    if a.grid < 12 || a.grid % 2 != 0 {
        return Err(Error::InvalidArgument(format!("--grid {} must be even and at least 12", a.grid)));
    }
    let pred = read_predictions(&a.pred)?;
    let truth = read_truth(&a.truth)?;
    if pred.dims != truth.dims {
        return Err(Error::InvalidArgument(format!(
            "prediction dimensions {:?} differ from truth {:?}",
            pred.dims, truth.dims
        )));
    }
    let grid = SphereGrid::build(a.grid)?;
    let (text, kv) = evaluation_report(&pred, &truth, &grid)?;
    write_text(&a.out, &text)?;
    write_text(&with_suffix(&a.out, ".kv"), &kv.to_string())?;
    print!("{text}");
    Ok(())
}

fn downsample(a: DownsampleArgs) -> Result<()> {
    let config = a.pipeline.config(2.0)?;
    if a.trials == 0 || a.fractions.is_empty() {
        return Err(Error::InvalidArgument("need at least one trial and one fraction".into()));
    }
    if let Some(f) = a.fractions.iter().find(|f| !(0.0..1.0).contains(*f)) {
        return Err(Error::InvalidArgument(format!("fraction {f} must be in [0, 1)")));
    }
    require_parent(&a.out)?;
    let table = load_table(&a.bvec, &a.bval)?;
    let vol = load_dwi(&a.dwi, &table)?;
    let model = load_model(&a.model)?;
    let grid = SphereGrid::build(a.pipeline.grid)?;
    let est = Estimator::new(&model, &grid, config);
    let report = downsample_experiment(&vol.to_f64(), &table, &est, &a.fractions, a.trials, a.seed)?;

    let text = format!(
        "dominant peak deviation (deg), {} voxels x {} trials\n{}",
        report.voxels,
        report.trials,
        format_downsample_table(&[("mlp", &report)])
    );
    let mut kv = KeyValues::new();
    kv.push("voxels", report.voxels);
    kv.push("trials", report.trials);
    let mut raw = String::from("fraction trial voxel deviation_deg\n");
    for row in &report.rows {
        let f = row.fraction;
        kv.push_f64(format!("mean.{f}"), row.mean);
        kv.push_f64(format!("std.{f}"), row.std);
        kv.push_f64(format!("max.{f}"), row.max);
        for (i, d) in row.deviations.iter().enumerate() {
            raw += &format!("{f} {} {} {d:.6}\n", i / report.voxels, i % report.voxels);
        }
    }
    write_text(&a.out, &text)?;
    write_text(&with_suffix(&a.out, ".kv"), &kv.to_string())?;
    write_text(&with_suffix(&a.out, ".deviations"), &raw)?;
    print!("{text}");
    Ok(())
}

fn track_cmd(a: TrackArgs) -> Result<()> {
    if !(a.step > 0.0 && a.max_angle > 0.0 && a.max_angle <= 90.0 && a.tolerance >= 0.0 && a.max_steps > 0) {
        return Err(Error::InvalidArgument(
            "--step, --max-steps must be positive, --max-angle in (0, 90], --tolerance non-negative".into(),
        ));
    }
    require_parent(&a.out)?;
    let pred = read_predictions(&a.pred)?;
    let seeds = read_regions(&a.seeds)?;
    let targets = read_regions(&a.targets)?;
    let mut target_sets = Vec::with_capacity(seeds.len());
    for (name, _) in &seeds {
        let t = targets
            .iter()
            .find(|(n, _)| n == name)
            .ok_or_else(|| Error::InvalidArgument(format!("no targets for seed region {name:?}")))?;
        target_sets.push(t.1.clone());
    }
    let field = PeakField::new(pred.dims, pred.voxels)?;
    let params = TrackParams {
        step: a.step,
        max_angle_deg: a.max_angle,
        max_steps: a.max_steps,
    };
    let mut groups = Vec::with_capacity(seeds.len());
    for (_, voxels) in &seeds {
        groups.push(track(voxels, &field, &params)?);
    }
    let report = success_ratio(&groups, &target_sets, a.tolerance)?;
    let all: Vec<_> = groups.iter().flatten().cloned().collect();
    write_text(&a.out, &format_streamlines(&all))?;

    let mut text = format_success_table(&[(pred.method.as_str(), &report)]);
    text.push('\n');
    for ((name, _), r) in seeds.iter().zip(&report.per_pair) {
        text += &format!("{name:<12} {r:.3}\n");
    }
    let report_path = a.report.unwrap_or_else(|| with_suffix(&a.out, ".report"));
    write_text(&report_path, &text)?;
    print!("{text}");
    Ok(())
}
