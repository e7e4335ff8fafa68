//! Voxel-to-group membership: scalar, fixed partitions, and per-sample semantic labels.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::residuals;
use crate::tensor_io::{CalibrationSample, SampleSet};

/// How voxels are assigned to inflation groups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PartitionSpec {
    /// One group holding every voxel.
    Scalar,
    /// A fixed map from voxel index to group on one canonical shape.
    Fixed {
        k: usize,
        shape: Vec<usize>,
        map: Vec<u16>,
    },
    /// Group of voxel `j` is the sample's segmentation label at `j`.
    Semantic { k: usize },
}

/// Borrowed per-sample view of group membership.
#[derive(Debug, Clone, Copy)]
pub enum Membership<'a> {
    Uniform,
    Map(&'a [u16]),
}

impl Membership<'_> {
    #[inline]
    pub fn group(&self, j: usize) -> usize {
        match self {
            Membership::Uniform => 0,
            Membership::Map(m) => m[j] as usize,
        }
    }
}

impl PartitionSpec {
    pub fn fixed(k: usize, shape: Vec<usize>, map: Vec<u16>) -> Result<Self> {
        let d: usize = shape.iter().product();
        if map.len() != d {
            return Err(Error::ShapeMismatch {
                context: "partition map".into(),
                expected: vec![d],
                found: vec![map.len()],
            });
        }
        let mut sizes = vec![0usize; k];
        for &g in &map {
            let g = g as usize;
            if g >= k {
                return Err(Error::GroupOutOfRange { group: g, k });
            }
            sizes[g] += 1;
        }
        if let Some(empty) = sizes.iter().position(|&n| n == 0) {
            return Err(Error::InvalidParameter(format!(
                "fixed partition group {empty} is empty"
            )));
        }
        Ok(PartitionSpec::Fixed { k, shape, map })
    }

    /// Number of groups `K`.
    pub fn k(&self) -> usize {
        match self {
            PartitionSpec::Scalar => 1,
            PartitionSpec::Fixed { k, .. } | PartitionSpec::Semantic { k } => *k,
        }
    }

    /// Group sizes `n_k` of a fixed partition.
    pub fn group_sizes(&self) -> Option<Vec<usize>> {
        match self {
            PartitionSpec::Fixed { k, map, .. } => {
                let mut sizes = vec![0; *k];
                for &g in map {
                    sizes[g as usize] += 1;
                }
                Some(sizes)
            }
            _ => None,
        }
    }

    pub fn membership<'a>(&'a self, sample: &'a CalibrationSample) -> Result<Membership<'a>> {
        match self {
            PartitionSpec::Scalar => Ok(Membership::Uniform),
            PartitionSpec::Fixed { shape, map, .. } => {
                if sample.shape() != shape.as_slice() {
                    return Err(Error::ShapeMismatch {
                        context: format!("fixed partition vs sample {}", sample.id),
                        expected: shape.clone(),
                        found: sample.shape().to_vec(),
                    });
                }
                Ok(Membership::Map(map))
            }
            PartitionSpec::Semantic { k } => {
                if sample.seg.k_classes() != *k {
                    return Err(Error::Incompatible(format!(
                        "semantic partition has {k} groups but sample {} has {} classes",
                        sample.id,
                        sample.seg.k_classes()
                    )));
                }
                Ok(Membership::Map(sample.seg.labels()))
            }
        }
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: PartitionSpec = serde_json::from_str(&text)?;
        if let PartitionSpec::Fixed { k, shape, map } = spec {
            return PartitionSpec::fixed(k, shape, map);
        }
        Ok(spec)
    }
}

/// Per-voxel group index of `sample` under `part`.
pub fn memberships(sample: &CalibrationSample, part: &PartitionSpec) -> Result<Vec<u16>> {
    Ok(match part.membership(sample)? {
        Membership::Uniform => vec![0; sample.dim()],
        Membership::Map(m) => m.to_vec(),
    })
}

/// Groups voxels into `k` equal-mass bins of their mean miscoverage across
/// `opt_set` at scalar inflation `base_lambda`. Bin 0 holds the lowest-loss
/// voxels; ties are broken by voxel index.
pub fn build_loss_quantile_partition(
    opt_set: &SampleSet,
    k: usize,
    base_lambda: f64,
) -> Result<PartitionSpec> {
    if opt_set.is_empty() {
        return Err(Error::EmptySet);
    }
    let shape = opt_set.common_shape().ok_or_else(|| {
        Error::Incompatible("loss-quantile partition needs a common sample shape".into())
    })?;
    let d: usize = shape.iter().product();
    if k == 0 || k > d {
        return Err(Error::InvalidParameter(format!(
            "k = {k} must lie in 1..={d}"
        )));
    }
    if k > u16::MAX as usize + 1 {
        return Err(Error::InvalidParameter(format!("k = {k} exceeds label range")));
    }

    // Integer miss counts keep the ordering independent of sample order.
    let mut misses = vec![0u32; d];
    for sample in opt_set.samples() {
        for (m, r) in misses.iter_mut().zip(residuals(sample).values()) {
            if *r > base_lambda {
                *m += 1;
            }
        }
    }
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by_key(|&j| (misses[j], j));

    let mut map = vec![0u16; d];
    for (rank, &j) in order.iter().enumerate() {
        map[j] = (rank * k / d) as u16;
    }
    PartitionSpec::fixed(k, shape.to_vec(), map)
}
