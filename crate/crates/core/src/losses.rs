//! Residuals, miscoverage losses, the hinge surrogate, and mean interval length.
//!
//! The residual `r_j = max(lo_j - x_j, x_j - hi_j)` turns interval membership
//! into a threshold test: `x_j ∈ [lo_j - λ, hi_j + λ]` exactly when `r_j <= λ`.
//! Every loss below is written in terms of residuals.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::partition::{Membership, PartitionSpec};
use crate::tensor_io::{CalibrationSample, SampleSet};

/// Default hinge scale of the surrogate loss.
pub const DEFAULT_GAMMA: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualTensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl ResidualTensor {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}

/// Smallest inflation at which `x` enters `[lo - λ, hi + λ]`; negative when
/// `x` is strictly inside.
#[inline]
pub fn residual(x: f64, lo: f64, hi: f64) -> f64 {
    (lo - x).max(x - hi)
}

pub fn residuals(sample: &CalibrationSample) -> ResidualTensor {
    let values = sample
        .x
        .values()
        .iter()
        .zip(sample.q.lo.values())
        .zip(sample.q.hi.values())
        .map(|((&x, &lo), &hi)| residual(x as f64, lo as f64, hi as f64))
        .collect();
    ResidualTensor {
        shape: sample.shape().to_vec(),
        values,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaMode {
    Scalar,
    FixedPartition,
    Semantic,
}

impl LambdaMode {
    pub fn of(part: &PartitionSpec) -> Self {
        match part {
            PartitionSpec::Scalar => LambdaMode::Scalar,
            PartitionSpec::Fixed { .. } => LambdaMode::FixedPartition,
            PartitionSpec::Semantic { .. } => LambdaMode::Semantic,
        }
    }
}

/// Nonnegative per-group inflation parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaVector {
    values: Vec<f64>,
    mode: LambdaMode,
}

impl LambdaVector {
    pub fn new(values: Vec<f64>, mode: LambdaMode) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidParameter("empty lambda vector".into()));
        }
        if let Some(v) = values.iter().find(|v| !(**v >= 0.0 && v.is_finite())) {
            return Err(Error::InvalidParameter(format!(
                "lambda entries must be finite and >= 0, got {v}"
            )));
        }
        if mode == LambdaMode::Scalar && values.len() != 1 {
            return Err(Error::LambdaLength {
                expected: 1,
                found: values.len(),
            });
        }
        Ok(Self { values, mode })
    }

    pub fn scalar(lambda: f64) -> Result<Self> {
        Self::new(vec![lambda], LambdaMode::Scalar)
    }

    pub fn zeros(k: usize, mode: LambdaMode) -> Self {
        Self {
            values: vec![0.0; k],
            mode,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn mode(&self) -> LambdaMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightKind {
    /// Exact group sizes `n_k` of a fixed partition.
    GroupSize,
    /// Empirical mean organ size `E[|S_k(Y)|]`.
    ExpectedOrganSize,
}

/// Objective coefficients of the anchor problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupWeights {
    pub counts: Vec<f64>,
    pub kind: WeightKind,
}

fn check_lambda(lam: &LambdaVector, part: &PartitionSpec) -> Result<()> {
    if lam.len() != part.k() {
        return Err(Error::LambdaLength {
            expected: part.k(),
            found: lam.len(),
        });
    }
    Ok(())
}

/// Fraction of voxels with residual above their group's inflation.
pub(crate) fn loss01_raw(res: &[f64], member: Membership<'_>, lam: &[f64]) -> Result<f64> {
    let mut misses = 0usize;
    for (j, &r) in res.iter().enumerate() {
        let g = member.group(j);
        let l = *lam.get(g).ok_or(Error::GroupOutOfRange {
            group: g,
            k: lam.len(),
        })?;
        if r > l {
            misses += 1;
        }
    }
    Ok(misses as f64 / res.len() as f64)
}

/// Miscoverage loss: the fraction of ground-truth voxels outside their
/// inflated interval. Closed intervals, so `r_j == λ` counts as covered.
pub fn loss01(sample: &CalibrationSample, lam: &LambdaVector, part: &PartitionSpec) -> Result<f64> {
    check_lambda(lam, part)?;
    loss01_raw(residuals(sample).values(), part.membership(sample)?, lam.values())
}

/// Per-class miss counts and class sizes under semantic membership.
pub(crate) fn organ_misses(res: &[f64], labels: &[u16], lam: &[f64]) -> (Vec<usize>, Vec<usize>) {
    let k = lam.len();
    let mut misses = vec![0usize; k];
    let mut sizes = vec![0usize; k];
    for (&r, &l) in res.iter().zip(labels) {
        let l = l as usize;
        sizes[l] += 1;
        if r > lam[l] {
            misses[l] += 1;
        }
    }
    (misses, sizes)
}

/// Miscoverage inside each segmented class; `None` for classes absent from the sample.
pub fn loss01_per_organ(sample: &CalibrationSample, lam: &LambdaVector) -> Result<Vec<Option<f64>>> {
    let k = sample.seg.k_classes();
    if lam.len() != k {
        return Err(Error::LambdaLength {
            expected: k,
            found: lam.len(),
        });
    }
    let (misses, sizes) = organ_misses(residuals(sample).values(), sample.seg.labels(), lam.values());
    Ok(misses
        .into_iter()
        .zip(sizes)
        .map(|(m, n)| (n > 0).then(|| m as f64 / n as f64))
        .collect())
}

/// `max(0, 1 + t / gamma)`: the convex majorant of `1{t > 0}` used by the anchor problem.
#[inline]
pub fn hinge(t: f64, gamma: f64) -> f64 {
    (1.0 + t / gamma).max(0.0)
}

fn check_gamma(gamma: f64) -> Result<()> {
    if gamma > 0.0 && gamma < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!(
            "gamma must lie in (0, 1), got {gamma}"
        )))
    }
}

/// Convex surrogate of [`loss01`]; uncapped, so it may exceed 1.
pub fn loss_gamma(
    sample: &CalibrationSample,
    lam: &LambdaVector,
    part: &PartitionSpec,
    gamma: f64,
) -> Result<f64> {
    check_gamma(gamma)?;
    check_lambda(lam, part)?;
    let member = part.membership(sample)?;
    let res = residuals(sample);
    let lam = lam.values();
    let mut total = 0.0;
    for (j, &r) in res.values().iter().enumerate() {
        let g = member.group(j);
        let l = *lam.get(g).ok_or(Error::GroupOutOfRange {
            group: g,
            k: lam.len(),
        })?;
        total += hinge(r - l, gamma);
    }
    Ok(total / res.values().len() as f64)
}

/// Width of one conformalized interval, floored at zero for crossed pairs.
#[inline]
pub fn interval_width(lo: f64, hi: f64, lambda: f64) -> f64 {
    (hi - lo + 2.0 * lambda).max(0.0)
}

pub(crate) fn mean_length_raw(sample: &CalibrationSample, member: Membership<'_>, lam: &[f64]) -> f64 {
    let lo = sample.q.lo.values();
    let hi = sample.q.hi.values();
    let total: f64 = (0..lo.len())
        .map(|j| interval_width(lo[j] as f64, hi[j] as f64, lam[member.group(j)]))
        .sum();
    total / lo.len() as f64
}

/// Mean width of the inflated intervals, each endpoint moved by its group's λ.
pub fn mean_interval_length(
    sample: &CalibrationSample,
    lam: &LambdaVector,
    part: &PartitionSpec,
) -> Result<f64> {
    check_lambda(lam, part)?;
    let member = part.membership(sample)?;
    if let Membership::Map(m) = member {
        if let Some(&g) = m.iter().find(|&&g| g as usize >= lam.len()) {
            return Err(Error::GroupOutOfRange {
                group: g as usize,
                k: lam.len(),
            });
        }
    }
    Ok(mean_length_raw(sample, member, lam.values()))
}

/// Anchor objective weights: `n_k` for fixed partitions, the mean organ size
/// over `set` for semantic ones, and the mean voxel count for scalar.
pub fn group_weights(set: &SampleSet, part: &PartitionSpec) -> Result<GroupWeights> {
    if set.is_empty() {
        return Err(Error::EmptySet);
    }
    let n = set.len() as f64;
    match part {
        PartitionSpec::Scalar => Ok(GroupWeights {
            counts: vec![set.samples().iter().map(|s| s.dim() as f64).sum::<f64>() / n],
            kind: WeightKind::GroupSize,
        }),
        PartitionSpec::Fixed { .. } => Ok(GroupWeights {
            counts: part
                .group_sizes()
                .unwrap_or_default()
                .into_iter()
                .map(|c| c as f64)
                .collect(),
            kind: WeightKind::GroupSize,
        }),
        PartitionSpec::Semantic { k } => {
            let mut totals = vec![0usize; *k];
            for s in set.samples() {
                part.membership(s)?;
                for (t, c) in totals.iter_mut().zip(s.seg.class_counts()) {
                    *t += c;
                }
            }
            Ok(GroupWeights {
                counts: totals.into_iter().map(|t| t as f64 / n).collect(),
                kind: WeightKind::ExpectedOrganSize,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor_io::{ImageTensor, QuantilePair, SegmentationMap};

    /// Builds a sample whose residuals are exactly `res` (given in f32-exact
    /// steps) by placing `x` relative to a fixed interval.
    fn sample_from(x: &[f32], lo: &[f32], hi: &[f32], labels: &[u16], k: usize) -> CalibrationSample {
        let shape = vec![x.len()];
        let t = |v: &[f32]| ImageTensor::new(shape.clone(), v.to_vec()).unwrap();
        let seg = SegmentationMap::new(shape.clone(), labels.to_vec(), k).unwrap();
        CalibrationSample::new("s", t(x), QuantilePair::new(t(lo), t(hi), 0.1).unwrap(), seg).unwrap()
    }

    /// Residuals (-0.1, 0.2, 0.3, 0.05) against the interval [0.4, 0.6].
    fn four_voxels(labels: &[u16], k: usize) -> CalibrationSample {
        sample_from(
            &[0.5, 0.8, 0.9, 0.65],
            &[0.4; 4],
            &[0.6, 0.6, 0.6, 0.6],
            labels,
            k,
        )
    }

    fn in_interval(x: f64, lo: f64, hi: f64, lam: f64) -> bool {
        lo - lam <= x && x <= hi + lam
    }

    #[test]
    fn residual_examples() {
        assert!((residual(0.5, 0.4, 0.6) - -0.1).abs() < 1e-12);
        assert!((residual(0.9, 0.4, 0.6) - 0.3).abs() < 1e-12);
        // crossed pair
        let r = residual(0.5, 0.7, 0.3);
        assert!((r - 0.2).abs() < 1e-12);
        for lam in [0.0, 0.19, 0.2, 0.21] {
            assert_eq!(r > lam, !in_interval(0.5, 0.7, 0.3, lam), "lambda {lam}");
        }
    }

    #[test]
    fn loss01_examples() {
        let s = sample_from(&[0.5; 3], &[0.45; 3], &[0.55; 3], &[0; 3], 1);
        let lam = LambdaVector::scalar(0.0).unwrap();
        assert_eq!(loss01(&s, &lam, &PartitionSpec::Scalar).unwrap(), 0.0);

        let s = four_voxels(&[0, 0, 0, 0], 1);
        let lam = LambdaVector::scalar(0.1).unwrap();
        assert_eq!(loss01(&s, &lam, &PartitionSpec::Scalar).unwrap(), 0.5);

        // Oracle: direct interval membership per voxel.
        let s = four_voxels(&[0, 0, 1, 1], 2);
        let lam_v = [0.25, 0.01];
        let part = PartitionSpec::fixed(2, vec![4], vec![0, 0, 1, 1]).unwrap();
        let lam = LambdaVector::new(lam_v.to_vec(), LambdaMode::FixedPartition).unwrap();
        let misses = (0..4)
            .filter(|&j| {
                let l = lam_v[[0, 0, 1, 1][j]];
                !in_interval(s.x.values()[j] as f64, 0.4f32 as f64, 0.6f32 as f64, l)
            })
            .count();
        assert_eq!(misses, 2);
        assert_eq!(loss01(&s, &lam, &part).unwrap(), 0.5);
    }

    #[test]
    fn loss01_group_out_of_range() {
        let s = four_voxels(&[0, 0, 0, 0], 1);
        let lam = LambdaVector::scalar(0.1).unwrap();
        let part = PartitionSpec::fixed(2, vec![4], vec![0, 0, 1, 1]).unwrap();
        assert!(matches!(loss01(&s, &lam, &part), Err(Error::LambdaLength { .. })));
    }

    #[test]
    fn per_organ_examples() {
        let s = four_voxels(&[0, 0, 1, 1], 2);
        let lam = LambdaVector::new(vec![0.15, 0.25], LambdaMode::Semantic).unwrap();
        // organ 0: residuals (-0.1, 0.2) vs 0.15; organ 1: (0.3, 0.05) vs 0.25
        assert_eq!(loss01_per_organ(&s, &lam).unwrap(), vec![Some(0.5), Some(0.5)]);

        let lam = LambdaVector::new(vec![0.5, 0.5], LambdaMode::Semantic).unwrap();
        assert_eq!(loss01_per_organ(&s, &lam).unwrap(), vec![Some(0.0), Some(0.0)]);

        let s = four_voxels(&[0, 0, 0, 0], 3);
        let lam = LambdaVector::new(vec![0.1, 0.1, 0.1], LambdaMode::Semantic).unwrap();
        let per = loss01_per_organ(&s, &lam).unwrap();
        assert_eq!(per, vec![Some(0.5), None, None]);
    }

    #[test]
    fn hinge_examples() {
        let gamma = 0.1;
        assert_eq!(hinge(-gamma, gamma), 0.0);
        assert_eq!(hinge(0.0, gamma), 1.0);
        // residuals (0.2, -0.05), λ = 0.1
        let s = sample_from(&[0.8, 0.45], &[0.4, 0.4], &[0.6, 0.6], &[0, 0], 1);
        let lam = LambdaVector::scalar(0.1).unwrap();
        let lg = loss_gamma(&s, &lam, &PartitionSpec::Scalar, gamma).unwrap();
        assert!((lg - 1.0).abs() < 1e-6, "{lg}");
        let l01 = loss01(&s, &lam, &PartitionSpec::Scalar).unwrap();
        assert_eq!(l01, 0.5);
        assert!(lg >= l01);
        assert!(loss_gamma(&s, &lam, &PartitionSpec::Scalar, 1.0).is_err());
        assert!(loss_gamma(&s, &lam, &PartitionSpec::Scalar, 0.0).is_err());
    }

    #[test]
    fn length_examples() {
        let s = sample_from(&[0.5; 4], &[0.4; 4], &[0.6; 4], &[0; 4], 1);
        let l0 = mean_interval_length(&s, &LambdaVector::scalar(0.0).unwrap(), &PartitionSpec::Scalar).unwrap();
        assert!((l0 - 0.2).abs() < 1e-6);
        let l = mean_interval_length(&s, &LambdaVector::scalar(0.05).unwrap(), &PartitionSpec::Scalar).unwrap();
        assert!((l - 0.3).abs() < 1e-6);

        // widths (0.1, 0.1, 0.3, 0.3), labels (0, 0, 1, 1), λ = (0.1, 0)
        let s = sample_from(&[0.5; 4], &[0.45, 0.45, 0.35, 0.35], &[0.55, 0.55, 0.65, 0.65], &[0, 0, 1, 1], 2);
        let lam = LambdaVector::new(vec![0.1, 0.0], LambdaMode::Semantic).unwrap();
        let got = mean_interval_length(&s, &lam, &PartitionSpec::Semantic { k: 2 }).unwrap();
        let oracle: f64 = (0..4)
            .map(|j| {
                let l = s.q.lo.values()[j] as f64 - lam.values()[s.seg.labels()[j] as usize];
                let h = s.q.hi.values()[j] as f64 + lam.values()[s.seg.labels()[j] as usize];
                h - l
            })
            .sum::<f64>()
            / 4.0;
        assert!((got - oracle).abs() < 1e-12);
        assert!((got - 0.3).abs() < 1e-6);
    }

    #[test]
    fn crossed_quantiles_floor_length_at_zero() {
        let s = sample_from(&[0.5], &[0.7], &[0.3], &[0], 1);
        let part = PartitionSpec::Scalar;
        let len = |l: f64| mean_interval_length(&s, &LambdaVector::scalar(l).unwrap(), &part).unwrap();
        assert_eq!(len(0.0), 0.0);
        assert_eq!(len(0.1), 0.0);
        assert!((len(0.3) - 0.2).abs() < 1e-6);
    }

    #[test]
    fn group_weight_examples() {
        let part = PartitionSpec::fixed(4, vec![16], (0..16).map(|j| (j / 4) as u16).collect()).unwrap();
        let s = sample_from(&[0.5; 16], &[0.4; 16], &[0.6; 16], &[0; 16], 1);
        let set = SampleSet::new(vec![s], 1, None).unwrap();
        assert_eq!(group_weights(&set, &part).unwrap().counts, vec![4.0; 4]);

        let mk = |ones: usize| {
            let labels: Vec<u16> = (0..30).map(|j| (j < ones) as u16).collect();
            sample_from(&[0.5; 30], &[0.4; 30], &[0.6; 30], &labels, 2)
        };
        let set = SampleSet::new(vec![mk(10), mk(20)], 2, None).unwrap();
        let w = group_weights(&set, &PartitionSpec::Semantic { k: 2 }).unwrap();
        assert_eq!(w.counts, vec![15.0, 15.0]);
        assert_eq!(w.kind, WeightKind::ExpectedOrganSize);

        let empty = SampleSet::new(vec![], 2, None).unwrap();
        assert!(matches!(group_weights(&empty, &PartitionSpec::Semantic { k: 2 }), Err(Error::EmptySet)));
    }
}
