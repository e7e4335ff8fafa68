//! Tensor data model, NPY/manifest persistence, and the three-way data split.
//!
//! Tensors are stored as NPY v1.0 files (little-endian, C order): `<f4` for
//! images and quantile maps, `<u2` for label maps. A manifest is a JSON file
//!
//! ```json
//! { "k_classes": 2, "class_names": ["body", "liver"], "alpha": 0.1,
//!   "samples": [ { "id": "s0", "x": "x0.npy", "q_lo": "lo0.npy",
//!                  "q_hi": "hi0.npy", "seg": "seg0.npy" } ] }
//! ```
//!
//! whose paths are resolved relative to the manifest's directory.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use npyz::WriterBuilder;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default quantile level when a manifest does not declare one.
pub const DEFAULT_ALPHA: f64 = 0.1;

/// A dense real tensor in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    shape: Vec<usize>,
    values: Vec<f32>,
}

impl ImageTensor {
    pub fn new(shape: Vec<usize>, values: Vec<f32>) -> Result<Self> {
        check_shape(&shape, values.len(), "tensor")?;
        Ok(Self { shape, values })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let d = shape.iter().product();
        Self::new(shape, vec![0.0; d])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    /// Number of voxels `d`.
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }
}

fn check_shape(shape: &[usize], len: usize, context: &str) -> Result<()> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::InvalidParameter(format!(
            "{context}: extents must be positive, got {shape:?}"
        )));
    }
    let d: usize = shape.iter().product();
    if d != len {
        return Err(Error::ShapeMismatch {
            context: format!("{context} value count"),
            expected: vec![d],
            found: vec![len],
        });
    }
    Ok(())
}

/// Lower/upper quantile maps for one observation. Crossed pairs are legal.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantilePair {
    pub lo: ImageTensor,
    pub hi: ImageTensor,
    pub alpha: f64,
}

impl QuantilePair {
    pub fn new(lo: ImageTensor, hi: ImageTensor, alpha: f64) -> Result<Self> {
        if lo.shape() != hi.shape() {
            return Err(Error::ShapeMismatch {
                context: "quantile pair".into(),
                expected: lo.shape().to_vec(),
                found: hi.shape().to_vec(),
            });
        }
        if !(alpha > 0.0 && alpha < 0.5) {
            return Err(Error::InvalidParameter(format!(
                "alpha must lie in (0, 0.5), got {alpha}"
            )));
        }
        Ok(Self { lo, hi, alpha })
    }
}

/// Per-voxel class labels in `0..k_classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationMap {
    shape: Vec<usize>,
    labels: Vec<u16>,
    k_classes: usize,
}

impl SegmentationMap {
    pub fn new(shape: Vec<usize>, labels: Vec<u16>, k_classes: usize) -> Result<Self> {
        check_shape(&shape, labels.len(), "segmentation")?;
        if k_classes == 0 || k_classes > u16::MAX as usize + 1 {
            return Err(Error::InvalidParameter(format!(
                "k_classes must be in 1..=65536, got {k_classes}"
            )));
        }
        if let Some((voxel, &label)) = labels
            .iter()
            .enumerate()
            .find(|(_, &l)| l as usize >= k_classes)
        {
            return Err(Error::LabelOutOfRange {
                sample: String::new(),
                voxel,
                label,
                k: k_classes,
            });
        }
        Ok(Self {
            shape,
            labels,
            k_classes,
        })
    }

    /// Every voxel in class 0.
    pub fn uniform(shape: Vec<usize>, k_classes: usize) -> Result<Self> {
        let d = shape.iter().product();
        Self::new(shape, vec![0; d], k_classes)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn k_classes(&self) -> usize {
        self.k_classes
    }

    /// Voxel count per class, `|S_k(y)|`.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.k_classes];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }
}

/// Ground truth, heuristic interval, and segmentation for one observation.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSample {
    pub id: String,
    pub x: ImageTensor,
    pub q: QuantilePair,
    pub seg: SegmentationMap,
}

impl CalibrationSample {
    pub fn new(
        id: impl Into<String>,
        x: ImageTensor,
        q: QuantilePair,
        seg: SegmentationMap,
    ) -> Result<Self> {
        let id = id.into();
        for (what, shape) in [
            ("quantiles", q.lo.shape()),
            ("segmentation", seg.shape()),
        ] {
            if shape != x.shape() {
                return Err(Error::ShapeMismatch {
                    context: format!("sample {id} {what}"),
                    expected: x.shape().to_vec(),
                    found: shape.to_vec(),
                });
            }
        }
        if let Some((voxel, &value)) = x
            .values()
            .iter()
            .enumerate()
            .find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            return Err(Error::GroundTruthRange {
                sample: id,
                voxel,
                value,
            });
        }
        let non_finite = q
            .lo
            .values()
            .iter()
            .zip(q.hi.values())
            .position(|(l, h)| !l.is_finite() || !h.is_finite());
        if let Some(voxel) = non_finite {
            return Err(Error::NonFinite { sample: id, voxel });
        }
        Ok(Self { id, x, q, seg })
    }

    /// Voxel count `d`.
    pub fn dim(&self) -> usize {
        self.x.len()
    }

    pub fn shape(&self) -> &[usize] {
        self.x.shape()
    }
}

/// An ordered collection of samples sharing one class count.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    samples: Vec<CalibrationSample>,
    k_classes: usize,
    class_names: Option<Vec<String>>,
}

impl SampleSet {
    pub fn new(
        samples: Vec<CalibrationSample>,
        k_classes: usize,
        class_names: Option<Vec<String>>,
    ) -> Result<Self> {
        if let Some(names) = &class_names {
            if names.len() != k_classes {
                return Err(Error::InvalidParameter(format!(
                    "{} class names for {} classes",
                    names.len(),
                    k_classes
                )));
            }
        }
        if let Some(s) = samples.iter().find(|s| s.seg.k_classes() != k_classes) {
            return Err(Error::InvalidParameter(format!(
                "sample {} has k_classes {} but set declares {}",
                s.id,
                s.seg.k_classes(),
                k_classes
            )));
        }
        Ok(Self {
            samples,
            k_classes,
            class_names,
        })
    }

    pub fn samples(&self) -> &[CalibrationSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn k_classes(&self) -> usize {
        self.k_classes
    }

    pub fn class_names(&self) -> Option<&[String]> {
        self.class_names.as_deref()
    }

    /// Display name for class `k`, falling back to `class_<k>`.
    pub fn class_name(&self, k: usize) -> String {
        self.class_names
            .as_ref()
            .and_then(|n| n.get(k).cloned())
            .unwrap_or_else(|| format!("class_{k}"))
    }

    /// The shape shared by every sample, if there is one.
    pub fn common_shape(&self) -> Option<&[usize]> {
        let first = self.samples.first()?.shape();
        self.samples
            .iter()
            .all(|s| s.shape() == first)
            .then_some(first)
    }

    fn with_samples(&self, samples: Vec<CalibrationSample>) -> Self {
        Self {
            samples,
            k_classes: self.k_classes,
            class_names: self.class_names.clone(),
        }
    }
}

/// Sizes of the optimization, calibration, and test partitions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub n_opt: usize,
    pub n_cal: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl SplitPlan {
    pub fn total(&self) -> usize {
        self.n_opt + self.n_cal + self.n_test
    }
}

/// Shuffles `set` with a seeded permutation and cuts it into
/// `(optimization, calibration, test)`. Samples beyond the plan's total are dropped.
pub fn split(set: &SampleSet, plan: &SplitPlan) -> Result<(SampleSet, SampleSet, SampleSet)> {
    let requested = plan.total();
    if requested > set.len() {
        return Err(Error::InfeasibleSplit {
            requested,
            available: set.len(),
        });
    }
    let mut order: Vec<usize> = (0..set.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(plan.seed));
    let take = |range: std::ops::Range<usize>| {
        set.with_samples(
            order[range]
                .iter()
                .map(|&i| set.samples[i].clone())
                .collect(),
        )
    };
    let a = plan.n_opt;
    let b = a + plan.n_cal;
    Ok((take(0..a), take(a..b), take(b..requested)))
}

// ---------------------------------------------------------------------------
// NPY files

fn open(path: &Path) -> Result<npyz::NpyFile<BufReader<File>>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    npyz::NpyFile::new(BufReader::new(file)).map_err(|e| Error::TensorFormat {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

fn check_header<T: std::io::Read>(npy: &npyz::NpyFile<T>, path: &Path, type_str: &str) -> Result<Vec<usize>> {
    let format_err = |reason: String| Error::TensorFormat {
        path: path.to_path_buf(),
        reason,
    };
    if npy.order() != npyz::Order::C {
        return Err(format_err("fortran order is not supported".into()));
    }
    let found = npy.dtype().descr();
    if found != type_str {
        return Err(format_err(format!("dtype {found}, expected {type_str}")));
    }
    Ok(npy.shape().iter().map(|&e| e as usize).collect())
}

fn write_npy<T: npyz::AutoSerialize + Copy>(shape: &[usize], data: &[T], path: &Path) -> Result<()> {
    let io_err = |e| Error::io(path, e);
    let file = File::create(path).map_err(io_err)?;
    let shape: Vec<u64> = shape.iter().map(|&e| e as u64).collect();
    let mut writer = npyz::WriteOptions::new()
        .default_dtype()
        .shape(&shape)
        .writer(BufWriter::new(file))
        .begin_nd()
        .map_err(io_err)?;
    writer.extend(data.iter().copied()).map_err(io_err)?;
    writer.finish().map_err(io_err)
}

/// Writes a float tensor as `<f4` NPY.
pub fn save_tensor(t: &ImageTensor, path: impl AsRef<Path>) -> Result<()> {
    write_npy(t.shape(), t.values(), path.as_ref())
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<ImageTensor> {
    let path = path.as_ref();
    let npy = open(path)?;
    let shape = check_header(&npy, path, "'<f4'")?;
    let values = npy.into_vec::<f32>().map_err(|e| Error::io(path, e))?;
    ImageTensor::new(shape, values)
}

/// Writes a label map as `<u2` NPY.
pub fn save_labels(seg: &SegmentationMap, path: impl AsRef<Path>) -> Result<()> {
    write_npy(seg.shape(), seg.labels(), path.as_ref())
}

/// Reads a `<u2` label map; labels are validated against `k_classes`.
pub fn load_labels(path: impl AsRef<Path>, k_classes: usize) -> Result<SegmentationMap> {
    let path = path.as_ref();
    let npy = open(path)?;
    let shape = check_header(&npy, path, "'<u2'")?;
    let labels = npy.into_vec::<u16>().map_err(|e| Error::io(path, e))?;
    SegmentationMap::new(shape, labels, k_classes)
}

// ---------------------------------------------------------------------------
// Manifests

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub k_classes: usize,
    #[serde(default)]
    pub class_names: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    pub samples: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub x: PathBuf,
    pub q_lo: PathBuf,
    pub q_hi: PathBuf,
    pub seg: PathBuf,
}

/// Loads every tensor referenced by a manifest and validates all sample invariants.
pub fn load_sample_set(manifest_path: impl AsRef<Path>) -> Result<SampleSet> {
    let manifest_path = manifest_path.as_ref();
    let text = std::fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|source| Error::Manifest {
        path: manifest_path.to_path_buf(),
        source,
    })?;
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    let alpha = manifest.alpha.unwrap_or(DEFAULT_ALPHA);
    let k = manifest.k_classes;

    let mut samples = Vec::with_capacity(manifest.samples.len());
    for entry in &manifest.samples {
        let x = load_tensor(root.join(&entry.x))?;
        let lo = load_tensor(root.join(&entry.q_lo))?;
        let hi = load_tensor(root.join(&entry.q_hi))?;
        let seg = load_labels(root.join(&entry.seg), k).map_err(|e| match e {
            Error::LabelOutOfRange {
                voxel, label, k, ..
            } => Error::LabelOutOfRange {
                sample: entry.id.clone(),
                voxel,
                label,
                k,
            },
            other => other,
        })?;
        let q = QuantilePair::new(lo, hi, alpha)?;
        samples.push(CalibrationSample::new(entry.id.clone(), x, q, seg)?);
    }
    SampleSet::new(samples, k, manifest.class_names)
}

/// Writes every sample of `set` under `dir` and returns the manifest path.
pub fn save_sample_set(set: &SampleSet, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir.join("tensors")).map_err(|e| Error::io(dir, e))?;
    let alpha = set.samples().first().map(|s| s.q.alpha);
    let mut entries = Vec::with_capacity(set.len());
    for (i, s) in set.samples().iter().enumerate() {
        let rel = |kind: &str| PathBuf::from("tensors").join(format!("{i:05}_{kind}.npy"));
        let entry = ManifestEntry {
            id: s.id.clone(),
            x: rel("x"),
            q_lo: rel("lo"),
            q_hi: rel("hi"),
            seg: rel("seg"),
        };
        save_tensor(&s.x, dir.join(&entry.x))?;
        save_tensor(&s.q.lo, dir.join(&entry.q_lo))?;
        save_tensor(&s.q.hi, dir.join(&entry.q_hi))?;
        save_labels(&s.seg, dir.join(&entry.seg))?;
        entries.push(entry);
    }
    let manifest = Manifest {
        k_classes: set.k_classes(),
        class_names: set.class_names.clone(),
        alpha,
        samples: entries,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
