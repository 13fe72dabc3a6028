//! File formats: FSL-style gradient tables, raw volumes with a text header,
//! JSON truth/prediction files and plain-text streamline and region lists.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::phantom::{RegionPair, Voxel};
use crate::signal::{GradientTable, VoxelModel, B0_THRESHOLD};
use crate::sphere::UnitDirection;
use crate::tracking::Streamline;

/// Tolerance on the column norm before a gradient is reported as renormalized.
const NORM_TOL: f64 = 1e-4;
const VOLUME_MAGIC: &str = "flab-volume 1";

/// Gradient columns as read from disk, before table-level validation.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientColumns {
    pub directions: Vec<UnitDirection>,
    pub bvalues: Vec<f64>,
    pub warnings: Vec<String>,
}

impl GradientColumns {
    pub fn into_table(self) -> Result<GradientTable> {
        GradientTable::new(self.directions, self.bvalues)
    }
}

fn parse_rows(text: &str, what: &str) -> Result<Vec<(usize, Vec<f64>)>> {
    let mut rows = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let row = line
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::Format(format!("{what} line {}: bad number {t:?}", n + 1)))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push((n + 1, row));
    }
    Ok(rows)
}

/// Parses bvec (three rows x, y, z) and bval (one row) text.
pub fn parse_gradient_files(bvec: &str, bval: &str) -> Result<GradientColumns> {
    let vec_rows = parse_rows(bvec, "bvec")?;
    let val_rows = parse_rows(bval, "bval")?;
    if vec_rows.len() != 3 {
        return Err(Error::Format(format!("bvec: expected 3 rows, found {}", vec_rows.len())));
    }
    if val_rows.len() != 1 {
        let line = val_rows.get(1).map_or(1, |r| r.0);
        return Err(Error::Format(format!("bval line {line}: expected a single row, found {}", val_rows.len())));
    }
    let m = vec_rows[0].1.len();
    for (line, row) in &vec_rows {
        if row.len() != m {
            return Err(Error::Format(format!("bvec line {line}: {} columns, expected {m}", row.len())));
        }
    }
    let (bval_line, bvalues) = &val_rows[0];
    if bvalues.len() != m {
        return Err(Error::Format(format!(
            "bval line {bval_line}: {} entries but bvec has {m} columns",
            bvalues.len()
        )));
    }
    let mut directions = Vec::with_capacity(m);
    let mut warnings = Vec::new();
    for c in 0..m {
        let v = [vec_rows[0].1[c], vec_rows[1].1[c], vec_rows[2].1[c]];
        let b = bvalues[c];
        if b < 0.0 {
            return Err(Error::Format(format!("bval line {bval_line}: negative b-value in column {}", c + 1)));
        }
        let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if norm == 0.0 {
            if b >= B0_THRESHOLD {
                return Err(Error::Format(format!("bvec column {}: zero vector with b = {b}", c + 1)));
            }
            directions.push(UnitDirection::z_axis());
            continue;
        }
        if (norm - 1.0).abs() > NORM_TOL && b >= B0_THRESHOLD {
            warnings.push(format!("bvec column {}: norm {norm} renormalized", c + 1));
        }
        // keep already-unit columns bit-exact
        let d = if (norm - 1.0).abs() < 1e-12 {
            UnitDirection::try_from(v)?
        } else {
            UnitDirection::new(v[0], v[1], v[2])?
        };
        directions.push(d);
    }
    Ok(GradientColumns {
        directions,
        bvalues: bvalues.clone(),
        warnings,
    })
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Reads a gradient table; warnings describe renormalized columns.
pub fn read_gradient_table(bvec: impl AsRef<Path>, bval: impl AsRef<Path>) -> Result<(GradientTable, Vec<String>)> {
    let cols = parse_gradient_files(&read_text(bvec.as_ref())?, &read_text(bval.as_ref())?)?;
    let warnings = cols.warnings.clone();
    let table = cols.into_table().map_err(|e| Error::Format(e.to_string()))?;
    Ok((table, warnings))
}

pub fn format_gradient_table(table: &GradientTable) -> (String, String) {
    let mut bvec = String::new();
    for axis in 0..3 {
        let row: Vec<String> = table
            .directions()
            .iter()
            .enumerate()
            .map(|(i, d)| if table.is_b0(i) { "0".to_string() } else { format!("{:?}", d.to_array()[axis]) })
            .collect();
        let _ = writeln!(bvec, "{}", row.join(" "));
    }
    let bval: Vec<String> = table.bvalues().iter().map(|b| format!("{b:?}")).collect();
    (bvec, format!("{}\n", bval.join(" ")))
}

pub fn write_gradient_table(table: &GradientTable, bvec: impl AsRef<Path>, bval: impl AsRef<Path>) -> Result<()> {
    let (v, b) = format_gradient_table(table);
    write_text(bvec.as_ref(), &v)?;
    write_text(bval.as_ref(), &b)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Four-dimensional float volume: `dims` voxels (x fastest) with
/// `measurements` values each.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub dims: [usize; 3],
    pub measurements: usize,
    /// What the values are, e.g. `dwi` or `fodf`.
    pub kind: String,
    pub units: String,
    pub data: Vec<f32>,
}

impl Volume {
    pub fn new(dims: [usize; 3], measurements: usize, kind: &str, units: &str, data: Vec<f32>) -> Result<Self> {
        let expected = dims.iter().product::<usize>() * measurements;
        if data.len() != expected {
            return Err(Error::InvalidArgument(format!(
                "{} values for dimensions {:?} x {measurements}",
                data.len(),
                dims
            )));
        }
        for label in [kind, units] {
            if label.is_empty() || label.chars().any(char::is_whitespace) {
                return Err(Error::InvalidArgument(format!("volume label {label:?} must be a single word")));
            }
        }
        Ok(Volume {
            dims,
            measurements,
            kind: kind.into(),
            units: units.into(),
            data,
        })
    }

    pub fn from_f64(dims: [usize; 3], measurements: usize, kind: &str, units: &str, data: &[f64]) -> Result<Self> {
        Volume::new(dims, measurements, kind, units, data.iter().map(|&v| v as f32).collect())
    }

    pub fn voxel_count(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }

    fn payload(&self) -> Vec<u8> {
        self.data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }
}

/// Payload path belonging to a header path (`x.hdr` -> `x.raw`).
pub fn payload_path(header: &Path) -> PathBuf {
    header.with_extension("raw")
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes `header` and its `.raw` payload.
pub fn write_volume(volume: &Volume, header: impl AsRef<Path>) -> Result<()> {
    let header = header.as_ref();
    let payload = volume.payload();
    let [x, y, z] = volume.dims;
    let text = format!(
        "{VOLUME_MAGIC}\ndims {x} {y} {z} {}\nkind {}\nendianness little\ndtype float32\nunits {}\npayload_bytes {}\nsha256 {}\n",
        volume.measurements,
        volume.kind,
        volume.units,
        payload.len(),
        sha256_hex(&payload)
    );
    write_text(header, &text)?;
    let raw = payload_path(header);
    fs::write(&raw, payload).map_err(|e| Error::io(&raw, e))
}

pub fn read_volume(header: impl AsRef<Path>) -> Result<Volume> {
    let header = header.as_ref();
    let text = read_text(header)?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, l)) if l.trim() == VOLUME_MAGIC => {}
        _ => return Err(Error::Format(format!("{}: not a volume header", header.display()))),
    }
    let mut dims = None;
    let (mut kind, mut units, mut bytes, mut digest) = (None, None, None, None);
    for (n, line) in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let bad = || Error::Format(format!("{} line {}: malformed {line:?}", header.display(), n + 1));
        let (key, rest) = line.split_once(' ').ok_or_else(bad)?;
        let rest = rest.trim();
        match key {
            "dims" => {
                let v: Vec<usize> = rest.split_whitespace().map(str::parse).collect::<std::result::Result<_, _>>().map_err(|_| bad())?;
                if v.len() != 4 {
                    return Err(bad());
                }
                dims = Some(v);
            }
            "kind" => kind = Some(rest.to_string()),
            "units" => units = Some(rest.to_string()),
            "endianness" if rest != "little" => return Err(bad()),
            "dtype" if rest != "float32" => return Err(bad()),
            "endianness" | "dtype" => {}
            "payload_bytes" => bytes = Some(rest.parse::<usize>().map_err(|_| bad())?),
            "sha256" => digest = Some(rest.to_string()),
            _ => return Err(bad()),
        }
    }
    let missing = |k: &str| Error::Format(format!("{}: missing {k}", header.display()));
    let dims = dims.ok_or_else(|| missing("dims"))?;
    let bytes = bytes.ok_or_else(|| missing("payload_bytes"))?;
    let expected = dims.iter().product::<usize>() * 4;
    if bytes != expected {
        return Err(Error::Format(format!(
            "{}: payload_bytes {bytes} does not match dims ({expected})",
            header.display()
        )));
    }
    let raw = payload_path(header);
    let payload = fs::read(&raw).map_err(|e| Error::io(&raw, e))?;
    if payload.len() != bytes {
        return Err(Error::Format(format!(
            "{}: {} bytes, header says {bytes}",
            raw.display(),
            payload.len()
        )));
    }
    if let Some(d) = digest {
        if d != sha256_hex(&payload) {
            return Err(Error::Format(format!("{}: checksum mismatch", raw.display())));
        }
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Volume::new(
        [dims[0], dims[1], dims[2]],
        dims[3],
        &kind.ok_or_else(|| missing("kind"))?,
        &units.ok_or_else(|| missing("units"))?,
        data,
    )
    .map_err(|e| Error::Format(e.to_string()))
}

/// Ground truth written next to a simulated volume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthFile {
    pub dims: [usize; 3],
    pub voxels: Vec<VoxelModel>,
    pub pairs: Vec<RegionPair>,
}

/// Per-voxel fascicle orientations produced by one method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionFile {
    pub dims: [usize; 3],
    pub method: String,
    pub voxels: Vec<Vec<UnitDirection>>,
}

pub fn write_json<T: Serialize>(value: &T, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    text.push('\n');
    write_text(path, &text)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    serde_json::from_str(&read_text(path)?).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub fn read_truth(path: impl AsRef<Path>) -> Result<TruthFile> {
    let t: TruthFile = read_json(path)?;
    if t.voxels.len() != t.dims.iter().product::<usize>() {
        return Err(Error::Format(format!("truth has {} voxels for dims {:?}", t.voxels.len(), t.dims)));
    }
    Ok(t)
}

pub fn read_predictions(path: impl AsRef<Path>) -> Result<PredictionFile> {
    let p: PredictionFile = read_json(path)?;
    if p.voxels.len() != p.dims.iter().product::<usize>() {
        return Err(Error::Format(format!("predictions have {} voxels for dims {:?}", p.voxels.len(), p.dims)));
    }
    Ok(p)
}

/// One `x y z` line per point, streamlines separated by a blank line.
pub fn format_streamlines(streamlines: &[Streamline]) -> String {
    let mut out = String::new();
    for (i, s) in streamlines.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        for p in &s.points {
            let _ = writeln!(out, "{:.6} {:.6} {:.6}", p[0], p[1], p[2]);
        }
    }
    out
}

pub fn parse_streamlines(text: &str) -> Result<Vec<Vec<[f64; 3]>>> {
    let mut out = Vec::new();
    let mut current = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            if !current.is_empty() {
                out.push(std::mem::take(&mut current));
            }
            continue;
        }
        let v: Vec<f64> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Format(format!("streamline line {}: bad number", n + 1)))?;
        if v.len() != 3 {
            return Err(Error::Format(format!("streamline line {}: expected 3 coordinates", n + 1)));
        }
        current.push([v[0], v[1], v[2]]);
    }
    if !current.is_empty() {
        out.push(current);
    }
    Ok(out)
}

/// `pair x y z` lines, pairs in order of first appearance.
pub fn format_regions(pairs: &[(String, Vec<Voxel>)]) -> String {
    let mut out = String::new();
    for (name, voxels) in pairs {
        for v in voxels {
            let _ = writeln!(out, "{name} {} {} {}", v[0], v[1], v[2]);
        }
    }
    out
}

pub fn parse_regions(text: &str) -> Result<Vec<(String, Vec<Voxel>)>> {
    let mut out: Vec<(String, Vec<Voxel>)> = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let tok: Vec<&str> = line.split_whitespace().collect();
        let bad = || Error::Format(format!("region line {}: expected `name x y z`", n + 1));
        if tok.len() != 4 {
            return Err(bad());
        }
        let mut v = [0usize; 3];
        for a in 0..3 {
            v[a] = tok[a + 1].parse().map_err(|_| bad())?;
        }
        match out.iter_mut().find(|(name, _)| name == tok[0]) {
            Some((_, list)) => list.push(v),
            None => out.push((tok[0].to_string(), vec![v])),
        }
    }
    Ok(out)
}

pub fn read_regions(path: impl AsRef<Path>) -> Result<Vec<(String, Vec<Voxel>)>> {
    parse_regions(&read_text(path.as_ref())?)
}
