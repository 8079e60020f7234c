//! Subjects, connectivity graphs, and datasets.
//!
//! A subject is a P x T matrix of region-mean signals. Edges are pairwise
//! Pearson correlations; the normalized adjacency D^{-1/2}(A+I)D^{-1/2}
//! drives the spatial graph convolution. A seeded block-latent generator
//! stands in for real recordings so every experiment here is reproducible
//! from a spec file.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// One subject: region-by-time signal matrix, optional binary label, site tag.
#[derive(Clone, Debug, PartialEq)]
pub struct SubjectRecord {
    pub subject_id: String,
    /// [P, T] region-mean signal.
    pub series: Tensor,
    pub label: Option<u8>,
    pub site: String,
}

impl SubjectRecord {
    pub fn new(subject_id: impl Into<String>, series: Tensor, label: Option<u8>, site: impl Into<String>) -> Result<Self> {
        let subject_id = subject_id.into();
        if series.rank() != 2 {
            return Err(CoreError::shape(
                "SubjectRecord",
                format!("series must be [P, T], got {:?}", series.shape()),
            ));
        }
        let (p, t) = (series.shape()[0], series.shape()[1]);
        if p < 2 || t < 2 {
            return Err(CoreError::Degenerate(format!(
                "subject '{}': need P >= 2 and T >= 2, got P={}, T={}",
                subject_id, p, t
            )));
        }
        if let Some(l) = label {
            if l > 1 {
                return Err(CoreError::Dataset(format!(
                    "subject '{}': label must be 0 or 1, got {}",
                    subject_id, l
                )));
            }
        }
        for roi in 0..p {
            if row_variance(&series, roi) == 0.0 {
                return Err(CoreError::Degenerate(format!(
                    "subject '{}': ROI {} has zero variance",
                    subject_id, roi
                )));
            }
        }
        Ok(SubjectRecord {
            subject_id,
            series,
            label,
            site: site.into(),
        })
    }

    pub fn roi_count(&self) -> usize {
        self.series.shape()[0]
    }

    pub fn time_points(&self) -> usize {
        self.series.shape()[1]
    }
}

fn row_variance(series: &Tensor, roi: usize) -> f64 {
    let t = series.shape()[1];
    let row = &series.data()[roi * t..(roi + 1) * t];
    let mean = row.iter().sum::<f64>() / t as f64;
    row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / t as f64
}

/// Pearson adjacency of one subject and its normalized form.
#[derive(Clone, Debug, PartialEq)]
pub struct FunctionalGraph {
    /// [P, P] symmetric, unit diagonal.
    pub adjacency: Tensor,
    /// D^{-1/2}(A+I)D^{-1/2} with D_ii = sum_j A_ij + 1.
    pub normalized: Tensor,
}

impl FunctionalGraph {
    pub fn from_series(series: &Tensor) -> Result<Self> {
        let adjacency = pearson_adjacency(series)?;
        let normalized = normalize_adjacency(&adjacency)?;
        Ok(FunctionalGraph { adjacency, normalized })
    }
}

/// Pairwise Pearson correlation matrix of the rows of a [P, T] series.
/// The diagonal is exactly 1; zero-variance rows are rejected by name.
pub fn pearson_adjacency(series: &Tensor) -> Result<Tensor> {
    if series.rank() != 2 {
        return Err(CoreError::shape(
            "pearson_adjacency",
            format!("expected [P, T], got {:?}", series.shape()),
        ));
    }
    let (p, t) = (series.shape()[0], series.shape()[1]);
    let data = series.data();
    let mut centered = vec![0.0; p * t];
    let mut inv_norm = vec![0.0; p];
    for roi in 0..p {
        let row = &data[roi * t..(roi + 1) * t];
        let mean = row.iter().sum::<f64>() / t as f64;
        let dst = &mut centered[roi * t..(roi + 1) * t];
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = v - mean;
        }
        let ss: f64 = dst.iter().map(|&v| v * v).sum();
        if ss == 0.0 {
            return Err(CoreError::Degenerate(format!(
                "pearson_adjacency: ROI {} has zero variance",
                roi
            )));
        }
        inv_norm[roi] = 1.0 / ss.sqrt();
    }
    let mut out = vec![0.0; p * p];
    for i in 0..p {
        out[i * p + i] = 1.0;
        let ri = &centered[i * t..(i + 1) * t];
        for j in (i + 1)..p {
            let rj = &centered[j * t..(j + 1) * t];
            let dot: f64 = ri.iter().zip(rj).map(|(&a, &b)| a * b).sum();
            let r = dot * inv_norm[i] * inv_norm[j];
            out[i * p + j] = r;
            out[j * p + i] = r;
        }
    }
    Ok(Tensor::from_raw(vec![p, p], out))
}

/// D^{-1/2}(A+I)D^{-1/2} with D_ii = sum_j A_ij + 1. Negative correlations
/// are kept as-is; a non-positive degree is an error rather than a clamp.
pub fn normalize_adjacency(a: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || a.shape()[0] != a.shape()[1] {
        return Err(CoreError::shape(
            "normalize_adjacency",
            format!("expected square matrix, got {:?}", a.shape()),
        ));
    }
    let p = a.shape()[0];
    let data = a.data();
    for i in 0..p {
        for j in (i + 1)..p {
            if (data[i * p + j] - data[j * p + i]).abs() > 1e-12 {
                return Err(CoreError::shape(
                    "normalize_adjacency",
                    format!("matrix not symmetric at ({i},{j})"),
                ));
            }
        }
    }
    let mut inv_sqrt_deg = vec![0.0; p];
    for i in 0..p {
        let deg: f64 = data[i * p..(i + 1) * p].iter().sum::<f64>() + 1.0;
        if deg <= 0.0 {
            return Err(CoreError::SingularDegree(format!(
                "row {} has degree {} <= 0",
                i, deg
            )));
        }
        inv_sqrt_deg[i] = 1.0 / deg.sqrt();
    }
    let mut out = vec![0.0; p * p];
    for i in 0..p {
        for j in 0..p {
            let aij = data[i * p + j] + if i == j { 1.0 } else { 0.0 };
            out[i * p + j] = inv_sqrt_deg[i] * aij * inv_sqrt_deg[j];
        }
    }
    Ok(Tensor::from_raw(vec![p, p], out))
}

/// A fixed-length window cut from a subject's series, shaped [P, L, 1] for
/// the model input.
#[derive(Clone, Debug, PartialEq)]
pub struct SubSequenceSample {
    pub subject_id: String,
    pub start: usize,
    /// [P, L, 1]
    pub window: Tensor,
}

/// Cut the window starting at `start` (no randomness).
pub fn subsequence_at(record: &SubjectRecord, start: usize, len: usize) -> Result<SubSequenceSample> {
    let (p, t) = (record.roi_count(), record.time_points());
    if len > t {
        return Err(CoreError::Window { window: len, series: t });
    }
    if start > t - len {
        return Err(CoreError::Window { window: start + len, series: t });
    }
    let mut out = vec![0.0; p * len];
    let data = record.series.data();
    for roi in 0..p {
        let src = &data[roi * t + start..roi * t + start + len];
        out[roi * len..(roi + 1) * len].copy_from_slice(src);
    }
    Ok(SubSequenceSample {
        subject_id: record.subject_id.clone(),
        start,
        window: Tensor::from_raw(vec![p, len, 1], out),
    })
}

/// Draw `count` windows of length `len` with starts uniform over
/// [0, T - len]. Sequential draws from `rng`, so a longer request extends a
/// shorter one (prefix property).
pub fn sample_subsequences(
    record: &SubjectRecord,
    len: usize,
    count: usize,
    rng: &mut Rng,
) -> Result<Vec<SubSequenceSample>> {
    let t = record.time_points();
    if len > t {
        return Err(CoreError::Window { window: len, series: t });
    }
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let start = rng.below(t - len + 1);
        out.push(subsequence_at(record, start, len)?);
    }
    Ok(out)
}

/// Two windows with distinct starts when the series allows it.
pub fn sample_window_pair(
    record: &SubjectRecord,
    len: usize,
    rng: &mut Rng,
) -> Result<(SubSequenceSample, SubSequenceSample)> {
    let t = record.time_points();
    if len > t {
        return Err(CoreError::Window { window: len, series: t });
    }
    let span = t - len + 1;
    let first = rng.below(span);
    let mut second = rng.below(span);
    while span > 1 && second == first {
        second = rng.below(span);
    }
    Ok((
        subsequence_at(record, first, len)?,
        subsequence_at(record, second, len)?,
    ))
}

/// Flatten the upper triangle (diagonal included) of a symmetric [P, P]
/// matrix in row-major order; length P(P+1)/2.
pub fn connectivity_features(a: &Tensor) -> Result<Vec<f64>> {
    if a.rank() != 2 || a.shape()[0] != a.shape()[1] {
        return Err(CoreError::shape(
            "connectivity_features",
            format!("expected square matrix, got {:?}", a.shape()),
        ));
    }
    let p = a.shape()[0];
    let mut out = Vec::with_capacity(p * (p + 1) / 2);
    for i in 0..p {
        for j in i..p {
            out.push(a.data()[i * p + j]);
        }
    }
    Ok(out)
}

/// Rebuild the symmetric matrix from its upper-triangle vector.
pub fn connectivity_from_features(features: &[f64], p: usize) -> Result<Tensor> {
    if features.len() != p * (p + 1) / 2 {
        return Err(CoreError::shape(
            "connectivity_from_features",
            format!("expected {} values for P={}, got {}", p * (p + 1) / 2, p, features.len()),
        ));
    }
    let mut out = vec![0.0; p * p];
    let mut k = 0;
    for i in 0..p {
        for j in i..p {
            out[i * p + j] = features[k];
            out[j * p + i] = features[k];
            k += 1;
        }
    }
    Ok(Tensor::from_raw(vec![p, p], out))
}

/// The feature index lists per region for an upper-triangle connectivity
/// vector: feature (i, j) belongs to both region i and region j.
pub fn connectivity_roi_features(p: usize) -> Vec<Vec<usize>> {
    let mut map = vec![Vec::new(); p];
    let mut k = 0;
    for i in 0..p {
        for j in i..p {
            map[i].push(k);
            if j != i {
                map[j].push(k);
            }
            k += 1;
        }
    }
    map
}

// ---------------------------------------------------------------------------
// Dataset container and directory format
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Dataset {
    pub subjects: Vec<SubjectRecord>,
    pub roi_names: Vec<String>,
    pub metadata: BTreeMap<String, String>,
}

impl Dataset {
    pub fn new(subjects: Vec<SubjectRecord>, roi_names: Vec<String>, metadata: BTreeMap<String, String>) -> Result<Self> {
        let ds = Dataset { subjects, roi_names, metadata };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids = BTreeSet::new();
        for s in &self.subjects {
            if !ids.insert(s.subject_id.as_str()) {
                return Err(CoreError::Dataset(format!("duplicate subject_id '{}'", s.subject_id)));
            }
        }
        if let Some(first) = self.subjects.first() {
            let p = first.roi_count();
            for s in &self.subjects {
                if s.roi_count() != p {
                    return Err(CoreError::Dataset(format!(
                        "subject '{}' has {} ROIs, expected {}",
                        s.subject_id,
                        s.roi_count(),
                        p
                    )));
                }
            }
            if !self.roi_names.is_empty() && self.roi_names.len() != p {
                return Err(CoreError::Dataset(format!(
                    "{} roi_names for {} ROIs",
                    self.roi_names.len(),
                    p
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    pub fn roi_count(&self) -> Option<usize> {
        self.subjects.first().map(|s| s.roi_count())
    }

    pub fn is_labeled(&self) -> bool {
        !self.subjects.is_empty() && self.subjects.iter().all(|s| s.label.is_some())
    }

    pub fn labels(&self) -> Result<Vec<u8>> {
        self.subjects
            .iter()
            .map(|s| {
                s.label.ok_or_else(|| {
                    CoreError::Dataset(format!("subject '{}' is unlabeled", s.subject_id))
                })
            })
            .collect()
    }
}

/// Generate default region names roi_001..roi_P.
pub fn default_roi_names(p: usize) -> Vec<String> {
    (1..=p).map(|i| format!("roi_{:03}", i)).collect()
}

// ---------------------------------------------------------------------------
// Synthetic generator
// ---------------------------------------------------------------------------

/// Block structure and subject count for one class.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ClassSpec {
    pub label: u8,
    pub subjects: usize,
    /// Each block lists ROI indices sharing one latent signal.
    pub blocks: Vec<Vec<usize>>,
    /// Class-specific AR(1) smoothness; falls back to the generator-wide
    /// value. Lets classes differ in temporal dynamics as well as covariance.
    #[serde(default)]
    pub ar: Option<f64>,
}

/// Parameters of the synthetic multi-site generator.
///
/// Per subject of class c, each block b gets a latent AR(1) signal z_b; ROI i
/// inside the block emits rho * w_i * z_b + sigma * eta_i with private AR(1)
/// noise eta_i. The per-subject weights w_i = 1 + coupling_jitter * u (u
/// uniform in [-1, 1]) give every subject its own connectivity fingerprint,
/// which is what the contrastive task learns to recognize.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct GeneratorSpec {
    pub p: usize,
    pub t: usize,
    pub classes: Vec<ClassSpec>,
    /// Within-block coupling, in [0, 1).
    pub rho: f64,
    /// AR(1) smoothness, in [0, 1).
    pub ar: f64,
    /// Private noise scale, > 0.
    pub sigma: f64,
    /// Per-subject coupling jitter fraction, in [0, 1). Default 0.2.
    #[serde(default = "default_jitter")]
    pub coupling_jitter: f64,
    /// Weight of a shared signal fed to every region, in [0, 1). Default 0.
    /// A small positive value keeps adjacency row sums above -1 (otherwise
    /// chance negative correlations can make the degree matrix singular).
    #[serde(default)]
    pub global_coupling: f64,
    pub sites: Vec<String>,
    /// When false the generated subjects carry no labels (source corpora).
    #[serde(default = "default_true")]
    pub emit_labels: bool,
}

fn default_jitter() -> f64 {
    0.2
}

fn default_true() -> bool {
    true
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.p < 2 {
            return Err(CoreError::Config(format!("generator: P must be >= 2, got {}", self.p)));
        }
        if self.t < 2 {
            return Err(CoreError::Config(format!("generator: T must be >= 2, got {}", self.t)));
        }
        if !(0.0..1.0).contains(&self.rho) {
            return Err(CoreError::Config(format!("generator: rho must be in [0, 1), got {}", self.rho)));
        }
        if !(0.0..1.0).contains(&self.ar) {
            return Err(CoreError::Config(format!("generator: ar must be in [0, 1), got {}", self.ar)));
        }
        if self.sigma <= 0.0 {
            return Err(CoreError::Config(format!("generator: sigma must be > 0, got {}", self.sigma)));
        }
        if !(0.0..1.0).contains(&self.coupling_jitter) {
            return Err(CoreError::Config(format!(
                "generator: coupling_jitter must be in [0, 1), got {}",
                self.coupling_jitter
            )));
        }
        if !(0.0..1.0).contains(&self.global_coupling) {
            return Err(CoreError::Config(format!(
                "generator: global_coupling must be in [0, 1), got {}",
                self.global_coupling
            )));
        }
        if self.classes.is_empty() {
            return Err(CoreError::Config("generator: at least one class required".into()));
        }
        if self.sites.is_empty() {
            return Err(CoreError::Config("generator: at least one site tag required".into()));
        }
        let mut labels = BTreeSet::new();
        for c in &self.classes {
            if c.label > 1 && self.emit_labels {
                return Err(CoreError::Config(format!("generator: label {} outside {{0, 1}}", c.label)));
            }
            if let Some(ar) = c.ar {
                if !(0.0..1.0).contains(&ar) {
                    return Err(CoreError::Config(format!(
                        "generator: class {} ar must be in [0, 1), got {}",
                        c.label, ar
                    )));
                }
            }
            if !labels.insert(c.label) {
                return Err(CoreError::Config(format!("generator: duplicate class label {}", c.label)));
            }
            if c.subjects == 0 {
                return Err(CoreError::Config(format!("generator: class {} has zero subjects", c.label)));
            }
            for block in &c.blocks {
                for &roi in block {
                    if roi >= self.p {
                        return Err(CoreError::Config(format!(
                            "generator: class {} block references ROI {} >= P={}",
                            c.label, roi, self.p
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let spec: GeneratorSpec = serde_json::from_str(json)
            .map_err(|e| CoreError::Config(format!("generator spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("generator spec serializes")
    }
}

/// Unit-variance AR(1) path of length t.
fn ar1_path(t: usize, a: f64, rng: &mut Rng) -> Vec<f64> {
    let innovation = (1.0 - a * a).sqrt();
    let mut out = Vec::with_capacity(t);
    let mut prev = rng.normal();
    out.push(prev);
    for _ in 1..t {
        prev = a * prev + innovation * rng.normal();
        out.push(prev);
    }
    out
}

/// Draw a dataset from the generator. Deterministic given the seed: each
/// subject has its own sub-stream, so subject k's data does not depend on how
/// many subjects precede it.
pub fn synth_generate(spec: &GeneratorSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let mut subjects = Vec::new();
    let mut subject_index: u64 = 0;
    for class in &spec.classes {
        for _ in 0..class.subjects {
            let mut rng = Rng::substream(seed, "data/subject", subject_index);
            let site = &spec.sites[(subject_index as usize) % spec.sites.len()];
            let series = synth_subject(spec, class, &mut rng);
            let label = if spec.emit_labels { Some(class.label) } else { None };
            let id = format!("s{:04}_c{}", subject_index, class.label);
            subjects.push(SubjectRecord::new(id, series, label, site.clone())?);
            subject_index += 1;
        }
    }
    let roi_names = default_roi_names(spec.p);
    let mut metadata = BTreeMap::new();
    metadata.insert("generator_seed".to_string(), seed.to_string());
    metadata.insert("generator_rho".to_string(), spec.rho.to_string());
    Dataset::new(subjects, roi_names, metadata)
}

fn synth_subject(spec: &GeneratorSpec, class: &ClassSpec, rng: &mut Rng) -> Tensor {
    let (p, t) = (spec.p, spec.t);
    let ar = class.ar.unwrap_or(spec.ar);
    let global = if spec.global_coupling > 0.0 {
        Some(ar1_path(t, ar, rng))
    } else {
        None
    };
    // Latent block signals.
    let latents: Vec<Vec<f64>> = class.blocks.iter().map(|_| ar1_path(t, ar, rng)).collect();
    // Per-subject coupling weights per block member.
    let weights: Vec<Vec<f64>> = class
        .blocks
        .iter()
        .map(|block| {
            block
                .iter()
                .map(|_| 1.0 + spec.coupling_jitter * rng.uniform(-1.0, 1.0))
                .collect()
        })
        .collect();
    let mut data = vec![0.0; p * t];
    // Private noise for every ROI, plus the shared signal when configured.
    for roi in 0..p {
        let noise = ar1_path(t, ar, rng);
        let row = &mut data[roi * t..(roi + 1) * t];
        for (slot, n) in row.iter_mut().zip(noise) {
            *slot = spec.sigma * n;
        }
        if let Some(g) = &global {
            for (slot, &z) in row.iter_mut().zip(g) {
                *slot += spec.global_coupling * z;
            }
        }
    }
    // Add block contributions.
    for (b, block) in class.blocks.iter().enumerate() {
        for (m, &roi) in block.iter().enumerate() {
            let w = spec.rho * weights[b][m];
            let row = &mut data[roi * t..(roi + 1) * t];
            for (slot, &z) in row.iter_mut().zip(&latents[b]) {
                *slot += w * z;
            }
        }
    }
    Tensor::from_raw(vec![p, t], data)
}

// ---------------------------------------------------------------------------
// Directory format: manifest.json + one matrix file per subject
// ---------------------------------------------------------------------------

const BIN_MAGIC: &[u8; 4] = b"MTSK";
const BIN_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ManifestSubject {
    subject_id: String,
    label: Option<u8>,
    site: String,
    file: String,
    #[serde(rename = "P")]
    p: usize,
    #[serde(rename = "T")]
    t: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    roi_names: Vec<String>,
    subjects: Vec<ManifestSubject>,
    #[serde(default)]
    metadata: BTreeMap<String, String>,
}

/// On-disk matrix encoding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MatrixFormat {
    /// P rows x T comma-separated columns.
    Csv,
    /// magic "MTSK", u32 version, u32 P, u32 T, then P*T little-endian f64.
    Binary,
}

impl MatrixFormat {
    fn extension(self) -> &'static str {
        match self {
            MatrixFormat::Csv => "csv",
            MatrixFormat::Binary => "bin",
        }
    }
}

/// Write a dataset directory: `manifest.json` plus one matrix file per
/// subject. The directory is created if missing.
pub fn save_dataset(dataset: &Dataset, dir: &Path, format: MatrixFormat) -> Result<()> {
    dataset.validate()?;
    fs::create_dir_all(dir).map_err(|e| CoreError::io(dir.display().to_string(), e))?;
    let mut entries = Vec::with_capacity(dataset.subjects.len());
    for s in &dataset.subjects {
        let file = format!("{}.{}", s.subject_id, format.extension());
        let path = dir.join(&file);
        match format {
            MatrixFormat::Csv => write_csv_matrix(&path, &s.series)?,
            MatrixFormat::Binary => write_bin_matrix(&path, &s.series)?,
        }
        entries.push(ManifestSubject {
            subject_id: s.subject_id.clone(),
            label: s.label,
            site: s.site.clone(),
            file,
            p: s.roi_count(),
            t: s.time_points(),
        });
    }
    let manifest = Manifest {
        roi_names: dataset.roi_names.clone(),
        subjects: entries,
        metadata: dataset.metadata.clone(),
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| CoreError::Dataset(format!("manifest serialization: {e}")))?;
    let manifest_path = dir.join("manifest.json");
    fs::write(&manifest_path, json.as_bytes())
        .map_err(|e| CoreError::io(manifest_path.display().to_string(), e))?;
    Ok(())
}

/// Load a dataset directory written by [`save_dataset`] (or by hand in the
/// same format). Matrix encoding is detected from the file extension.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join("manifest.json");
    let json = fs::read_to_string(&manifest_path)
        .map_err(|e| CoreError::io(manifest_path.display().to_string(), e))?;
    let manifest: Manifest = serde_json::from_str(&json)
        .map_err(|e| CoreError::Dataset(format!("malformed manifest: {e}")))?;
    let mut subjects = Vec::with_capacity(manifest.subjects.len());
    for entry in &manifest.subjects {
        let path = dir.join(&entry.file);
        let series = read_matrix(&path)?;
        if series.shape() != [entry.p, entry.t] {
            return Err(CoreError::Dataset(format!(
                "subject '{}': manifest says {}x{}, file '{}' holds {:?}",
                entry.subject_id,
                entry.p,
                entry.t,
                entry.file,
                series.shape()
            )));
        }
        subjects.push(SubjectRecord::new(
            entry.subject_id.clone(),
            series,
            entry.label,
            entry.site.clone(),
        )?);
    }
    Dataset::new(subjects, manifest.roi_names, manifest.metadata)
}

fn read_matrix(path: &Path) -> Result<Tensor> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("csv") => read_csv_matrix(path),
        Some("bin") => read_bin_matrix(path),
        other => Err(CoreError::Dataset(format!(
            "unknown matrix extension {:?} for '{}'",
            other,
            path.display()
        ))),
    }
}

fn write_csv_matrix(path: &Path, series: &Tensor) -> Result<()> {
    let (p, t) = (series.shape()[0], series.shape()[1]);
    let mut out = String::new();
    for roi in 0..p {
        let row = &series.data()[roi * t..(roi + 1) * t];
        for (i, v) in row.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            out.push_str(&format!("{v}"));
        }
        out.push('\n');
    }
    fs::write(path, out.as_bytes()).map_err(|e| CoreError::io(path.display().to_string(), e))
}

fn read_csv_matrix(path: &Path) -> Result<Tensor> {
    let text = fs::read_to_string(path).map_err(|e| CoreError::io(path.display().to_string(), e))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: std::result::Result<Vec<f64>, _> =
            line.split(',').map(|tok| tok.trim().parse::<f64>()).collect();
        let row = row.map_err(|e| {
            CoreError::Dataset(format!("'{}' line {}: {}", path.display(), lineno + 1, e))
        })?;
        if let Some(first) = rows.first() {
            if row.len() != first.len() {
                return Err(CoreError::Dataset(format!(
                    "'{}' line {}: ragged row ({} vs {} columns)",
                    path.display(),
                    lineno + 1,
                    row.len(),
                    first.len()
                )));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(CoreError::Dataset(format!("'{}': empty matrix", path.display())));
    }
    let (p, t) = (rows.len(), rows[0].len());
    let data: Vec<f64> = rows.into_iter().flatten().collect();
    Tensor::new(vec![p, t], data)
}

fn write_bin_matrix(path: &Path, series: &Tensor) -> Result<()> {
    let (p, t) = (series.shape()[0], series.shape()[1]);
    let mut file = fs::File::create(path).map_err(|e| CoreError::io(path.display().to_string(), e))?;
    let mut buf = Vec::with_capacity(16 + series.len() * 8);
    buf.extend_from_slice(BIN_MAGIC);
    buf.extend_from_slice(&BIN_VERSION.to_le_bytes());
    buf.extend_from_slice(&(p as u32).to_le_bytes());
    buf.extend_from_slice(&(t as u32).to_le_bytes());
    for v in series.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    file.write_all(&buf).map_err(|e| CoreError::io(path.display().to_string(), e))
}

fn read_bin_matrix(path: &Path) -> Result<Tensor> {
    let mut file = fs::File::open(path).map_err(|e| CoreError::io(path.display().to_string(), e))?;
    let mut buf = Vec::new();
    file.read_to_end(&mut buf).map_err(|e| CoreError::io(path.display().to_string(), e))?;
    if buf.len() < 16 || &buf[0..4] != BIN_MAGIC {
        return Err(CoreError::Dataset(format!("'{}': not a matrix file", path.display())));
    }
    let version = u32::from_le_bytes(buf[4..8].try_into().unwrap());
    if version != BIN_VERSION {
        return Err(CoreError::Dataset(format!(
            "'{}': unsupported matrix version {}",
            path.display(),
            version
        )));
    }
    let p = u32::from_le_bytes(buf[8..12].try_into().unwrap()) as usize;
    let t = u32::from_le_bytes(buf[12..16].try_into().unwrap()) as usize;
    let expected = 16 + p * t * 8;
    if buf.len() != expected {
        return Err(CoreError::Dataset(format!(
            "'{}': expected {} bytes for {}x{}, found {}",
            path.display(),
            expected,
            p,
            t,
            buf.len()
        )));
    }
    let data: Vec<f64> = buf[16..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(vec![p, t], data)
}

/// Normalized adjacency per subject, computed once and reused.
pub fn normalized_graphs(dataset: &Dataset) -> Result<Vec<Tensor>> {
    dataset
        .subjects
        .iter()
        .map(|s| Ok(FunctionalGraph::from_series(&s.series)?.normalized))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series(rows: &[&[f64]]) -> Tensor {
        let p = rows.len();
        let t = rows[0].len();
        let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Tensor::new(vec![p, t], data).unwrap()
    }

    #[test]
    fn pearson_perfect_linear() {
        let s = series(&[&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]]);
        let a = pearson_adjacency(&s).unwrap();
        assert!((a.data()[1] - 1.0).abs() < 1e-12);
        assert_eq!(a.data()[0], 1.0);
    }

    #[test]
    fn pearson_negation() {
        let s = series(&[&[1.0, 2.0, 3.0], &[-1.0, -2.0, -3.0]]);
        let a = pearson_adjacency(&s).unwrap();
        assert!((a.data()[1] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn pearson_matches_direct_covariance_formula() {
        // two sampled sinusoids, 90 degrees apart
        let t = 64;
        let x: Vec<f64> = (0..t).map(|i| (i as f64 * 0.2).sin()).collect();
        let y: Vec<f64> = (0..t).map(|i| (i as f64 * 0.2 + std::f64::consts::FRAC_PI_2).sin()).collect();
        let s = series(&[&x, &y]);
        let a = pearson_adjacency(&s).unwrap();
        // oracle: r = (E[xy] - E[x]E[y]) / (sd(x) sd(y)), population moments
        let n = t as f64;
        let mx = x.iter().sum::<f64>() / n;
        let my = y.iter().sum::<f64>() / n;
        let mxy = x.iter().zip(&y).map(|(&a, &b)| a * b).sum::<f64>() / n;
        let vx = x.iter().map(|&v| (v - mx) * (v - mx)).sum::<f64>() / n;
        let vy = y.iter().map(|&v| (v - my) * (v - my)).sum::<f64>() / n;
        let want = (mxy - mx * my) / (vx.sqrt() * vy.sqrt());
        assert!((a.data()[1] - want).abs() < 1e-12);
    }

    #[test]
    fn pearson_rejects_constant_row_by_name() {
        let s = series(&[&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]]);
        let err = pearson_adjacency(&s).unwrap_err();
        assert!(err.to_string().contains("ROI 0"), "{err}");
    }

    #[test]
    fn pearson_bounded() {
        let mut rng = Rng::from_seed(40);
        let data: Vec<f64> = (0..6 * 50).map(|_| rng.normal()).collect();
        let s = Tensor::new(vec![6, 50], data).unwrap();
        let a = pearson_adjacency(&s).unwrap();
        for v in a.data() {
            assert!(v.abs() <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn normalize_zeros_is_identity() {
        let a = Tensor::zeros(vec![4, 4]);
        let n = normalize_adjacency(&a).unwrap();
        assert_eq!(n, Tensor::identity(4));
    }

    #[test]
    fn normalize_hand_two_node() {
        let a = Tensor::matrix(2, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let n = normalize_adjacency(&a).unwrap();
        for v in n.data() {
            assert!((v - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn normalize_matches_triple_product() {
        let mut rng = Rng::from_seed(41);
        let p = 5;
        let mut a = vec![0.0; p * p];
        for i in 0..p {
            for j in (i + 1)..p {
                let v = rng.next_f64();
                a[i * p + j] = v;
                a[j * p + i] = v;
            }
        }
        let a = Tensor::new(vec![p, p], a).unwrap();
        let n = normalize_adjacency(&a).unwrap();
        // oracle: explicit D^{-1/2} (A+I) D^{-1/2} triple product
        let mut d = Tensor::zeros(vec![p, p]);
        for i in 0..p {
            let deg: f64 = a.data()[i * p..(i + 1) * p].iter().sum::<f64>() + 1.0;
            d.data_mut()[i * p + i] = 1.0 / deg.sqrt();
        }
        let ai = a.add(&Tensor::identity(p)).unwrap();
        let want = d.matmul(&ai).unwrap().matmul(&d).unwrap();
        for (x, y) in n.data().iter().zip(want.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        // symmetry within 1e-12
        for i in 0..p {
            for j in 0..p {
                assert!((n.data()[i * p + j] - n.data()[j * p + i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn normalize_reports_singular_degree() {
        // strongly negative off-diagonals drive the degree below zero
        let a = Tensor::matrix(2, 2, vec![0.0, -3.0, -3.0, 0.0]).unwrap();
        assert!(matches!(
            normalize_adjacency(&a),
            Err(CoreError::SingularDegree(_))
        ));
    }

    #[test]
    fn subsequence_starts_stay_in_range() {
        let t = 231;
        let l = 128;
        let mut rng = Rng::from_seed(7);
        let data: Vec<f64> = (0..2 * t).map(|_| rng.normal()).collect();
        let rec = SubjectRecord::new("s", Tensor::new(vec![2, t], data).unwrap(), Some(0), "x").unwrap();
        let mut sampler = Rng::from_seed(8);
        let samples = sample_subsequences(&rec, l, 500, &mut sampler).unwrap();
        for s in &samples {
            assert!(s.start <= t - l, "start {} out of range", s.start);
            assert_eq!(s.window.shape(), &[2, l, 1]);
        }
    }

    #[test]
    fn subsequence_full_series_when_t_equals_l() {
        let rec = SubjectRecord::new(
            "s",
            series(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]),
            None,
            "x",
        )
        .unwrap();
        let mut rng = Rng::from_seed(9);
        let samples = sample_subsequences(&rec, 3, 5, &mut rng).unwrap();
        for s in samples {
            assert_eq!(s.start, 0);
            assert_eq!(s.window.data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        }
    }

    #[test]
    fn subsequence_sampling_is_deterministic() {
        let t = 50;
        let mut rng = Rng::from_seed(10);
        let data: Vec<f64> = (0..3 * t).map(|_| rng.normal()).collect();
        let rec = SubjectRecord::new("s", Tensor::new(vec![3, t], data).unwrap(), None, "x").unwrap();
        let a = sample_subsequences(&rec, 16, 10, &mut Rng::from_seed(77)).unwrap();
        let b = sample_subsequences(&rec, 16, 10, &mut Rng::from_seed(77)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn subsequence_window_too_long_errors() {
        let rec = SubjectRecord::new("s", series(&[&[1.0, 2.0], &[3.0, 4.0]]), None, "x").unwrap();
        assert!(matches!(
            sample_subsequences(&rec, 3, 1, &mut Rng::from_seed(0)),
            Err(CoreError::Window { .. })
        ));
    }

    #[test]
    fn connectivity_feature_length_for_p116() {
        let a = Tensor::identity(116);
        let f = connectivity_features(&a).unwrap();
        assert_eq!(f.len(), 6786);
    }

    #[test]
    fn connectivity_two_node_enumeration() {
        let a = Tensor::matrix(2, 2, vec![1.0, 0.3, 0.3, 1.0]).unwrap();
        let f = connectivity_features(&a).unwrap();
        assert_eq!(f, vec![1.0, 0.3, 1.0]);
    }

    #[test]
    fn connectivity_roundtrip_exact() {
        let mut rng = Rng::from_seed(11);
        let p = 7;
        let mut a = vec![0.0; p * p];
        for i in 0..p {
            for j in i..p {
                let v = rng.normal();
                a[i * p + j] = v;
                a[j * p + i] = v;
            }
        }
        let a = Tensor::new(vec![p, p], a).unwrap();
        let f = connectivity_features(&a).unwrap();
        let back = connectivity_from_features(&f, p).unwrap();
        assert_eq!(a, back);
    }

    fn small_spec() -> GeneratorSpec {
        GeneratorSpec {
            p: 8,
            t: 64,
            classes: vec![
                ClassSpec { label: 0, subjects: 3, blocks: vec![vec![0, 1, 2]], ar: None },
                ClassSpec { label: 1, subjects: 3, blocks: vec![vec![4, 5, 6]], ar: None },
            ],
            rho: 0.7,
            ar: 0.3,
            sigma: 0.8,
            coupling_jitter: 0.2,
            global_coupling: 0.0,
            sites: vec!["a".into(), "b".into()],
            emit_labels: true,
        }
    }

    #[test]
    fn synth_zero_coupling_kills_correlation() {
        let mut spec = small_spec();
        spec.rho = 0.0;
        spec.t = 512;
        spec.classes[0].subjects = 25;
        spec.classes[1].subjects = 25;
        let ds = synth_generate(&spec, 42).unwrap();
        let mut total = 0.0;
        let mut count = 0usize;
        for s in &ds.subjects {
            let a = pearson_adjacency(&s.series).unwrap();
            let p = spec.p;
            for i in 0..p {
                for j in (i + 1)..p {
                    total += a.data()[i * p + j].abs();
                    count += 1;
                }
            }
        }
        let mean_abs = total / count as f64;
        assert!(mean_abs < 0.1, "mean |r| = {mean_abs}");
    }

    #[test]
    fn synth_is_deterministic() {
        let spec = small_spec();
        let a = synth_generate(&spec, 5).unwrap();
        let b = synth_generate(&spec, 5).unwrap();
        assert_eq!(a, b);
        let c = synth_generate(&spec, 6).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn synth_validates_spec() {
        let mut spec = small_spec();
        spec.rho = 1.5;
        assert!(synth_generate(&spec, 1).is_err());
        let mut spec = small_spec();
        spec.sigma = 0.0;
        assert!(synth_generate(&spec, 1).is_err());
        let mut spec = small_spec();
        spec.classes[0].blocks = vec![vec![99]];
        assert!(synth_generate(&spec, 1).is_err());
    }

    #[test]
    fn dataset_roundtrip_bin_and_csv() {
        let ds = synth_generate(&small_spec(), 3).unwrap();
        for format in [MatrixFormat::Binary, MatrixFormat::Csv] {
            let dir = std::env::temp_dir().join(format!(
                "mtsk_ds_test_{}_{}",
                std::process::id(),
                format.extension()
            ));
            let _ = fs::remove_dir_all(&dir);
            save_dataset(&ds, &dir, format).unwrap();
            let loaded = load_dataset(&dir).unwrap();
            assert_eq!(ds, loaded);
            fs::remove_dir_all(&dir).unwrap();
        }
    }

    #[test]
    fn manifest_shape_mismatch_names_subject() {
        let ds = synth_generate(&small_spec(), 3).unwrap();
        let dir = std::env::temp_dir().join(format!("mtsk_ds_bad_{}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        save_dataset(&ds, &dir, MatrixFormat::Binary).unwrap();
        // corrupt the manifest: claim one more ROI than the file holds
        let manifest_path = dir.join("manifest.json");
        let text = fs::read_to_string(&manifest_path).unwrap();
        let bad = text.replacen("\"P\": 8", "\"P\": 9", 1);
        fs::write(&manifest_path, bad).unwrap();
        let err = load_dataset(&dir).unwrap_err();
        assert!(err.to_string().contains("s0000_c0"), "{err}");
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn empty_dataset_roundtrips() {
        let ds = Dataset::new(vec![], vec![], BTreeMap::new()).unwrap();
        let dir = std::env::temp_dir().join(format!("mtsk_ds_empty_{}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        save_dataset(&ds, &dir, MatrixFormat::Binary).unwrap();
        let loaded = load_dataset(&dir).unwrap();
        assert!(loaded.is_empty());
        fs::remove_dir_all(&dir).unwrap();
    }
}
