//! Raw little-endian tensor files plus JSON manifests.
//!
//! Every artifact directory holds one `manifest.json`. Directories are built
//! in a sibling staging directory and renamed into place, so a reader never
//! sees a half-written artifact.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use num_complex::Complex64;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::engine::{EngineEvent, LossRecord, ReconstructionState};
use crate::error::{Error, Result};
use crate::ffop::TrainingPair;
use crate::fields::{ComplexGrid, DiffractionDataset, ProbeStack, RealGrid, ScanPositions};
use crate::forward::PhysicsConfig;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = read_bytes(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::format(path, e.to_string()))
}

/// Writes through a temporary sibling file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::format(path, "path has no file name"))?
        .to_string_lossy();
    let tmp = path.with_file_name(format!(".{name}.tmp{}", std::process::id()));
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

pub fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn f32_to_le_bytes(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn f32_from_le_bytes(bytes: &[u8], path: &Path) -> Result<Vec<f32>> {
    if bytes.len() % 4 != 0 {
        return Err(Error::format(path, format!("{} bytes is not a whole number of f32 values", bytes.len())));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub fn f64_to_le_bytes(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn f64_from_le_bytes(bytes: &[u8], path: &Path) -> Result<Vec<f64>> {
    if bytes.len() % 8 != 0 {
        return Err(Error::format(path, format!("{} bytes is not a whole number of f64 values", bytes.len())));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub fn i32_to_le_bytes(values: &[i32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn i32_from_le_bytes(bytes: &[u8], path: &Path) -> Result<Vec<i32>> {
    if bytes.len() % 4 != 0 {
        return Err(Error::format(path, format!("{} bytes is not a whole number of i32 values", bytes.len())));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

/// Element encoding of a raw tensor file.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    I32,
    /// Complex as interleaved (re, im) f32 pairs.
    C64,
    /// Complex as interleaved (re, im) f64 pairs.
    C128,
}

impl DType {
    pub fn element_bytes(self) -> usize {
        match self {
            DType::F32 | DType::I32 => 4,
            DType::C64 => 8,
            DType::C128 => 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub file: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
}

impl TensorInfo {
    pub fn new(file: impl Into<String>, dtype: DType, shape: Vec<usize>) -> Self {
        Self {
            file: file.into(),
            dtype,
            shape,
        }
    }

    pub fn byte_len(&self) -> usize {
        self.shape.iter().product::<usize>() * self.dtype.element_bytes()
    }

    /// Reads the file and checks its length against the declared shape.
    pub fn read(&self, dir: &Path) -> Result<Vec<u8>> {
        let path = dir.join(&self.file);
        let bytes = read_bytes(&path)?;
        if bytes.len() != self.byte_len() {
            return Err(Error::format(
                &path,
                format!("expected {} bytes for shape {:?}, found {}", self.byte_len(), self.shape, bytes.len()),
            ));
        }
        Ok(bytes)
    }
}

pub fn complex_to_bytes(values: &[Complex64], dtype: DType) -> Vec<u8> {
    match dtype {
        DType::C64 => values
            .iter()
            .flat_map(|z| {
                let mut b = [0u8; 8];
                b[..4].copy_from_slice(&(z.re as f32).to_le_bytes());
                b[4..].copy_from_slice(&(z.im as f32).to_le_bytes());
                b
            })
            .collect(),
        DType::C128 => values
            .iter()
            .flat_map(|z| {
                let mut b = [0u8; 16];
                b[..8].copy_from_slice(&z.re.to_le_bytes());
                b[8..].copy_from_slice(&z.im.to_le_bytes());
                b
            })
            .collect(),
        other => panic!("{other:?} is not a complex dtype"),
    }
}

pub fn complex_from_bytes(bytes: &[u8], dtype: DType, path: &Path) -> Result<Vec<Complex64>> {
    let flat: Vec<f64> = match dtype {
        DType::C64 => f32_from_le_bytes(bytes, path)?.into_iter().map(f64::from).collect(),
        DType::C128 => f64_from_le_bytes(bytes, path)?,
        other => return Err(Error::format(path, format!("{other:?} is not a complex dtype"))),
    };
    Ok(flat.chunks_exact(2).map(|p| Complex64::new(p[0], p[1])).collect())
}

fn write_complex_grids(dir: &Path, file: &str, grids: &[&ComplexGrid], dtype: DType) -> Result<TensorInfo> {
    let (h, w) = grids.first().map(|g| g.shape()).unwrap_or((0, 0));
    let mut bytes = Vec::with_capacity(grids.len() * h * w * dtype.element_bytes());
    for g in grids {
        if g.shape() != (h, w) {
            return Err(Error::Shape {
                context: "tensor stack",
                expected: (h, w),
                actual: g.shape(),
            });
        }
        bytes.extend(complex_to_bytes(g.data(), dtype));
    }
    write_atomic(&dir.join(file), &bytes)?;
    Ok(TensorInfo::new(file, dtype, vec![grids.len(), h, w]))
}

fn read_complex_grids(dir: &Path, info: &TensorInfo, pitch: f64) -> Result<Vec<ComplexGrid>> {
    let path = dir.join(&info.file);
    let [n, h, w] = info.shape[..] else {
        return Err(Error::format(&path, "expected a rank-3 tensor"));
    };
    let values = complex_from_bytes(&info.read(dir)?, info.dtype, &path)?;
    (0..n)
        .map(|i| Ok(ComplexGrid::from_vec(h, w, values[i * h * w..(i + 1) * h * w].to_vec())?.with_pitch(pitch)))
        .collect()
}

/// Command, build, config and seed record written into every artifact directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format_version: u32,
    /// One of `dataset`, `run`, `pairs`, `weights`, `evaluation`, `sweep`.
    pub kind: String,
    pub command: Vec<String>,
    /// Full configuration echo.
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    /// Wall-clock figures in seconds.
    pub timing: BTreeMap<String, f64>,
    pub build: String,
    #[serde(default)]
    pub tensors: Vec<TensorInfo>,
    /// Kind-specific metadata needed to reload the artifact.
    #[serde(default)]
    pub details: serde_json::Value,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl RunManifest {
    pub fn new(kind: &str) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            kind: kind.into(),
            command: Vec::new(),
            config: serde_json::Value::Null,
            seeds: BTreeMap::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            timing: BTreeMap::new(),
            build: String::new(),
            tensors: Vec::new(),
            details: serde_json::Value::Null,
            warnings: Vec::new(),
        }
    }

    pub fn load(dir: &Path, kind: &str) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let m: Self = read_json(&path)?;
        if m.format_version != FORMAT_VERSION {
            return Err(Error::format(&path, format!("unsupported format version {}", m.format_version)));
        }
        if m.kind != kind {
            return Err(Error::format(&path, format!("expected a {kind} manifest, found {}", m.kind)));
        }
        Ok(m)
    }

    pub fn tensor(&self, file: &str) -> Option<&TensorInfo> {
        self.tensors.iter().find(|t| t.file == file)
    }

    fn require_tensor(&self, dir: &Path, file: &str) -> Result<&TensorInfo> {
        self.tensor(file)
            .ok_or_else(|| Error::format(dir.join(MANIFEST), format!("manifest does not list {file}")))
    }

    fn details<T: DeserializeOwned>(&self, dir: &Path) -> Result<T> {
        serde_json::from_value(self.details.clone()).map_err(|e| Error::format(dir.join(MANIFEST), e.to_string()))
    }

    /// Records every listed tensor plus the manifest itself as outputs and writes it.
    pub fn write(&mut self, dir: &Path) -> Result<()> {
        let mut outputs: Vec<String> = self.tensors.iter().map(|t| t.file.clone()).collect();
        for extra in std::mem::take(&mut self.outputs) {
            if !outputs.contains(&extra) {
                outputs.push(extra);
            }
        }
        if !outputs.iter().any(|o| o == MANIFEST) {
            outputs.push(MANIFEST.into());
        }
        self.outputs = outputs;
        write_json_atomic(&dir.join(MANIFEST), self)
    }
}

/// Output directory assembled under a temporary name and renamed on commit.
/// Dropping without commit removes the staging directory.
pub struct StagedDir {
    staging: PathBuf,
    target: PathBuf,
    committed: bool,
}

impl StagedDir {
    pub fn new(target: &Path) -> Result<Self> {
        let name = target
            .file_name()
            .ok_or_else(|| Error::format(target, "output path has no directory name"))?
            .to_string_lossy()
            .into_owned();
        let parent = match target.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        fs::create_dir_all(&parent).map_err(|e| Error::io(&parent, e))?;
        let staging = parent.join(format!(".{name}.staging{}", std::process::id()));
        if staging.exists() {
            fs::remove_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
        }
        fs::create_dir(&staging).map_err(|e| Error::io(&staging, e))?;
        Ok(Self {
            staging,
            target: target.to_path_buf(),
            committed: false,
        })
    }

    pub fn path(&self) -> &Path {
        &self.staging
    }

    /// Replaces `target` with the staged contents.
    pub fn commit(mut self) -> Result<PathBuf> {
        let backup = self.staging.with_extension("previous");
        let had_previous = self.target.exists();
        if had_previous {
            fs::rename(&self.target, &backup).map_err(|e| Error::io(&self.target, e))?;
        }
        if let Err(e) = fs::rename(&self.staging, &self.target) {
            if had_previous {
                let _ = fs::rename(&backup, &self.target);
            }
            return Err(Error::io(&self.target, e));
        }
        if had_previous {
            fs::remove_dir_all(&backup).map_err(|e| Error::io(&backup, e))?;
        }
        self.committed = true;
        Ok(self.target.clone())
    }
}

impl Drop for StagedDir {
    fn drop(&mut self) {
        if !self.committed {
            let _ = fs::remove_dir_all(&self.staging);
        }
    }
}

/// Synthetic ground truth stored alongside a simulated dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub object: ComplexGrid,
    pub probe: ProbeStack,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetBundle {
    pub data: DiffractionDataset,
    pub physics: PhysicsConfig,
    pub truth: Option<GroundTruth>,
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetDetails {
    physics: PhysicsConfig,
    pattern_count: usize,
    pattern_shape: (usize, usize),
}

/// Patterns are stored as f32, so the in-memory patterns come back rounded
/// to single precision; the other fields round-trip exactly.
pub fn save_dataset(dir: &Path, bundle: &DatasetBundle, manifest: &mut RunManifest) -> Result<()> {
    let data = &bundle.data;
    data.validate()?;
    let (h, w) = data.pattern_shape();
    let k = data.len();
    let mut patterns = Vec::with_capacity(k * h * w);
    for p in &data.patterns {
        patterns.extend(p.data().iter().map(|&v| v as f32));
    }
    write_atomic(&dir.join("patterns.bin"), &f32_to_le_bytes(&patterns))?;
    let mut positions = Vec::with_capacity(2 * k);
    for &(r, c) in data.positions.iter() {
        let cast = |v: usize| i32::try_from(v).map_err(|_| Error::config(format!("scan offset {v} overflows i32")));
        positions.push(cast(r)?);
        positions.push(cast(c)?);
    }
    write_atomic(&dir.join("positions.bin"), &i32_to_le_bytes(&positions))?;
    manifest.kind = "dataset".into();
    manifest.tensors = vec![
        TensorInfo::new("patterns.bin", DType::F32, vec![k, h, w]),
        TensorInfo::new("positions.bin", DType::I32, vec![k, 2]),
    ];
    if let Some(truth) = &bundle.truth {
        manifest
            .tensors
            .push(write_complex_grids(dir, "truth_object.bin", &[&truth.object], DType::C64)?);
        let modes: Vec<&ComplexGrid> = truth.probe.modes().iter().collect();
        manifest
            .tensors
            .push(write_complex_grids(dir, "truth_probe.bin", &modes, DType::C64)?);
    }
    manifest.details = serde_json::to_value(DatasetDetails {
        physics: bundle.physics.clone(),
        pattern_count: k,
        pattern_shape: (h, w),
    })?;
    manifest.write(dir)
}

pub fn load_dataset(dir: &Path) -> Result<(DatasetBundle, RunManifest)> {
    let manifest = RunManifest::load(dir, "dataset")?;
    let details: DatasetDetails = manifest.details(dir)?;
    let (h, w) = details.pattern_shape;
    let k = details.pattern_count;
    let pat_info = manifest.require_tensor(dir, "patterns.bin")?;
    let pos_info = manifest.require_tensor(dir, "positions.bin")?;
    let manifest_path = dir.join(MANIFEST);
    if pat_info.shape != [k, h, w] || pat_info.dtype != DType::F32 {
        return Err(Error::format(&manifest_path, "patterns.bin entry disagrees with the dataset details"));
    }
    if pos_info.shape != [k, 2] || pos_info.dtype != DType::I32 {
        return Err(Error::format(&manifest_path, "positions.bin entry disagrees with the dataset details"));
    }
    let pat_path = dir.join("patterns.bin");
    let flat = f32_from_le_bytes(&pat_info.read(dir)?, &pat_path)?;
    let pitch = details.physics.pixel_size;
    let patterns = flat
        .chunks_exact(h * w)
        .map(|c| Ok(RealGrid::from_vec(h, w, c.iter().map(|&v| f64::from(v)).collect())?.with_pitch(pitch)))
        .collect::<Result<Vec<_>>>()?;
    let pos_path = dir.join("positions.bin");
    let raw = i32_from_le_bytes(&pos_info.read(dir)?, &pos_path)?;
    let positions = raw
        .chunks_exact(2)
        .map(|p| {
            let r = usize::try_from(p[0]).map_err(|_| Error::format(&pos_path, "negative scan offset"))?;
            let c = usize::try_from(p[1]).map_err(|_| Error::format(&pos_path, "negative scan offset"))?;
            Ok((r, c))
        })
        .collect::<Result<Vec<_>>>()?;
    let truth = match (manifest.tensor("truth_object.bin"), manifest.tensor("truth_probe.bin")) {
        (Some(o), Some(p)) => {
            let object = read_complex_grids(dir, o, pitch)?.pop().ok_or_else(|| Error::format(&manifest_path, "empty truth object"))?;
            let probe = ProbeStack::new(read_complex_grids(dir, p, pitch)?)?;
            Some(GroundTruth { object, probe })
        }
        _ => None,
    };
    let data = DiffractionDataset {
        patterns,
        positions: ScanPositions::new(positions),
        wavelength: details.physics.wavelength,
        detector_distance: details.physics.fresnel_distance,
        pixel_size: pitch,
    };
    data.validate()?;
    Ok((
        DatasetBundle {
            data,
            physics: details.physics,
            truth,
        },
        manifest,
    ))
}

/// Reloadable outcome of one reconstruction.
#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub object: ComplexGrid,
    pub probe: ProbeStack,
    pub loss_history: Vec<LossRecord>,
    pub snapshots: BTreeMap<usize, ComplexGrid>,
    pub fast_forward_at: Option<usize>,
    pub events: Vec<EngineEvent>,
    pub epoch_seconds: Vec<f64>,
}

impl From<ReconstructionState> for RunRecord {
    fn from(s: ReconstructionState) -> Self {
        Self {
            object: s.object,
            probe: s.probe,
            loss_history: s.loss_history,
            snapshots: s.snapshots,
            fast_forward_at: s.fast_forward_at,
            events: s.events,
            epoch_seconds: s.epoch_seconds,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct RunDetails {
    iterations_completed: usize,
    snapshot_iterations: Vec<usize>,
    /// Iteration at whose start the fast-forward operator was applied.
    fast_forward_at: Option<usize>,
    events: Vec<EngineEvent>,
    epoch_seconds: Vec<f64>,
    pitch: f64,
}

pub fn snapshot_file(iteration: usize) -> String {
    format!("snapshot_{iteration}.bin")
}

pub const LOSS_CSV_HEADER: &str = "iteration,amplitude_mse,poisson_nll";

pub fn loss_csv(records: &[LossRecord]) -> String {
    let mut out = String::from(LOSS_CSV_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!("{},{},{}\n", r.iteration, r.amplitude_mse, r.poisson_nll));
    }
    out
}

pub fn parse_loss_csv(text: &str, path: &Path) -> Result<Vec<LossRecord>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(LOSS_CSV_HEADER) {
        return Err(Error::format(path, format!("missing header `{LOSS_CSV_HEADER}`")));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| {
            let bad = || Error::format(path, format!("malformed row {}: {line}", i + 2));
            let mut cols = line.split(',');
            let (Some(a), Some(b), Some(c), None) = (cols.next(), cols.next(), cols.next(), cols.next()) else {
                return Err(bad());
            };
            Ok(LossRecord {
                iteration: a.trim().parse().map_err(|_| bad())?,
                amplitude_mse: b.trim().parse().map_err(|_| bad())?,
                poisson_nll: c.trim().parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

pub fn load_loss_csv(path: &Path) -> Result<Vec<LossRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_loss_csv(&text, path)
}

/// Object, probe and snapshots are stored as f64 complex and round-trip exactly.
pub fn save_run(dir: &Path, run: &RunRecord, manifest: &mut RunManifest) -> Result<()> {
    manifest.kind = "run".into();
    manifest.tensors = vec![write_complex_grids(dir, "object.bin", &[&run.object], DType::C128)?];
    let modes: Vec<&ComplexGrid> = run.probe.modes().iter().collect();
    manifest.tensors.push(write_complex_grids(dir, "probe.bin", &modes, DType::C128)?);
    for (&it, snap) in &run.snapshots {
        manifest
            .tensors
            .push(write_complex_grids(dir, &snapshot_file(it), &[snap], DType::C128)?);
    }
    write_atomic(&dir.join("loss.csv"), loss_csv(&run.loss_history).as_bytes())?;
    manifest.outputs.push("loss.csv".into());
    manifest.details = serde_json::to_value(RunDetails {
        iterations_completed: run.loss_history.len(),
        snapshot_iterations: run.snapshots.keys().copied().collect(),
        fast_forward_at: run.fast_forward_at,
        events: run.events.clone(),
        epoch_seconds: run.epoch_seconds.clone(),
        pitch: run.object.pitch(),
    })?;
    manifest.write(dir)
}

pub fn load_run(dir: &Path) -> Result<(RunRecord, RunManifest)> {
    let manifest = RunManifest::load(dir, "run")?;
    let details: RunDetails = manifest.details(dir)?;
    let manifest_path = dir.join(MANIFEST);
    let object = read_complex_grids(dir, manifest.require_tensor(dir, "object.bin")?, details.pitch)?
        .pop()
        .ok_or_else(|| Error::format(&manifest_path, "empty object tensor"))?;
    let probe = ProbeStack::new(read_complex_grids(
        dir,
        manifest.require_tensor(dir, "probe.bin")?,
        details.pitch,
    )?)?;
    let mut snapshots = BTreeMap::new();
    for &it in &details.snapshot_iterations {
        let info = manifest.require_tensor(dir, &snapshot_file(it))?;
        let snap = read_complex_grids(dir, info, details.pitch)?
            .pop()
            .ok_or_else(|| Error::format(&manifest_path, "empty snapshot tensor"))?;
        snapshots.insert(it, snap);
    }
    let loss_history = load_loss_csv(&dir.join("loss.csv"))?;
    if loss_history.len() != details.iterations_completed {
        return Err(Error::format(&manifest_path, "loss.csv row count disagrees with the manifest"));
    }
    Ok((
        RunRecord {
            object,
            probe,
            loss_history,
            snapshots,
            fast_forward_at: details.fast_forward_at,
            events: details.events,
            epoch_seconds: details.epoch_seconds,
        },
        manifest,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairDetails {
    pub pair_count: usize,
    pub patch_size: usize,
    pub input_iteration: usize,
    pub target_iteration: usize,
    /// Pixel pitch of the source snapshots.
    pub pitch: f64,
    pub datasets: Vec<usize>,
    pub corners: Vec<(usize, usize)>,
    /// Run directories left out because a snapshot was missing.
    pub skipped: Vec<String>,
}

pub fn save_pairs(
    dir: &Path,
    pairs: &[TrainingPair],
    input_iteration: usize,
    target_iteration: usize,
    skipped: Vec<String>,
    manifest: &mut RunManifest,
) -> Result<()> {
    let patch_size = pairs.first().map(|p| p.input.rows()).unwrap_or(0);
    for p in pairs {
        for g in [&p.input, &p.target] {
            if g.shape() != (patch_size, patch_size) {
                return Err(Error::Shape {
                    context: "training pair",
                    expected: (patch_size, patch_size),
                    actual: g.shape(),
                });
            }
        }
    }
    manifest.kind = "pairs".into();
    let inputs: Vec<&ComplexGrid> = pairs.iter().map(|p| &p.input).collect();
    let targets: Vec<&ComplexGrid> = pairs.iter().map(|p| &p.target).collect();
    manifest.tensors = vec![
        write_complex_grids(dir, "inputs.bin", &inputs, DType::C128)?,
        write_complex_grids(dir, "targets.bin", &targets, DType::C128)?,
    ];
    manifest.details = serde_json::to_value(PairDetails {
        pair_count: pairs.len(),
        patch_size,
        input_iteration,
        target_iteration,
        pitch: pairs.first().map(|p| p.input.pitch()).unwrap_or(1.0),
        datasets: pairs.iter().map(|p| p.dataset).collect(),
        corners: pairs.iter().map(|p| p.corner).collect(),
        skipped,
    })?;
    manifest.write(dir)
}

pub fn load_pairs(dir: &Path) -> Result<(Vec<TrainingPair>, PairDetails, RunManifest)> {
    let manifest = RunManifest::load(dir, "pairs")?;
    let details: PairDetails = manifest.details(dir)?;
    let expected = [details.pair_count, details.patch_size, details.patch_size];
    let manifest_path = dir.join(MANIFEST);
    let mut stacks = Vec::with_capacity(2);
    for file in ["inputs.bin", "targets.bin"] {
        let info = manifest.require_tensor(dir, file)?;
        if info.shape != expected {
            return Err(Error::format(
                &manifest_path,
                format!("{file} has shape {:?}, expected {expected:?}", info.shape),
            ));
        }
        stacks.push(read_complex_grids(dir, info, details.pitch)?);
    }
    if details.datasets.len() != details.pair_count || details.corners.len() != details.pair_count {
        return Err(Error::format(&manifest_path, "pair metadata length disagrees with pair_count"));
    }
    let targets = stacks.pop().unwrap();
    let inputs = stacks.pop().unwrap();
    let pairs = inputs
        .into_iter()
        .zip(targets)
        .zip(details.datasets.iter().zip(&details.corners))
        .map(|((input, target), (&dataset, &corner))| TrainingPair {
            dataset,
            corner,
            input,
            target,
        })
        .collect();
    Ok((pairs, details, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_codecs_round_trip() {
        let p = Path::new("x");
        let f = [0.0f32, -1.5, f32::MAX, 1e-30];
        assert_eq!(f32_from_le_bytes(&f32_to_le_bytes(&f), p).unwrap(), f);
        let i = [0i32, -7, i32::MAX];
        assert_eq!(i32_from_le_bytes(&i32_to_le_bytes(&i), p).unwrap(), i);
        let z = [Complex64::new(0.1, -0.2), Complex64::new(3.0, 4.0)];
        assert_eq!(complex_from_bytes(&complex_to_bytes(&z, DType::C128), DType::C128, p).unwrap(), z);
        assert_eq!(f32_to_le_bytes(&[1.0]), vec![0, 0, 0x80, 0x3f]);
        assert!(f32_from_le_bytes(&[0, 1, 2], p).is_err());
    }

    #[test]
    fn loss_csv_round_trip_is_exact() {
        let recs = vec![
            LossRecord {
                iteration: 1,
                amplitude_mse: 0.1 + 0.2,
                poisson_nll: -1234.5678901234567,
            },
            LossRecord {
                iteration: 2,
                amplitude_mse: 1e-300,
                poisson_nll: 5.0,
            },
        ];
        let text = loss_csv(&recs);
        assert!(text.starts_with("iteration,amplitude_mse,poisson_nll\n"));
        assert_eq!(parse_loss_csv(&text, Path::new("l")).unwrap(), recs);
        assert!(parse_loss_csv("a,b\n", Path::new("l")).is_err());
        assert!(parse_loss_csv("iteration,amplitude_mse,poisson_nll\n1,2\n", Path::new("l")).is_err());
    }

    #[test]
    fn staged_dir_replaces_target() {
        let tmp = tempfile::tempdir().unwrap();
        let target = tmp.path().join("out");
        fs::create_dir(&target).unwrap();
        fs::write(target.join("old.txt"), "old").unwrap();
        let staged = StagedDir::new(&target).unwrap();
        fs::write(staged.path().join("new.txt"), "new").unwrap();
        staged.commit().unwrap();
        assert!(!target.join("old.txt").exists());
        assert_eq!(fs::read_to_string(target.join("new.txt")).unwrap(), "new");
        let names: Vec<_> = fs::read_dir(tmp.path()).unwrap().collect();
        assert_eq!(names.len(), 1);
    }

    #[test]
    fn abandoned_stage_leaves_target_untouched() {
        let tmp = tempfile::tempdir().unwrap();
        let target = tmp.path().join("out");
        {
            let staged = StagedDir::new(&target).unwrap();
            fs::write(staged.path().join("partial"), "x").unwrap();
        }
        assert!(!target.exists());
        assert_eq!(fs::read_dir(tmp.path()).unwrap().count(), 0);
    }

    #[test]
    fn truncated_tensor_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        fs::write(tmp.path().join("t.bin"), [0u8; 12]).unwrap();
        let info = TensorInfo::new("t.bin", DType::F32, vec![2, 2]);
        assert!(matches!(info.read(tmp.path()), Err(Error::Format { .. })));
    }
}
