//! Risk-controlling calibration: scalar CRC, K-group backtracking, semantic
//! backtracking, and per-organ calibration.
//!
//! Every procedure searches a one-parameter family `λ(t)` for the smallest
//! `t` whose adjusted empirical risk `(n/(n+1)) L̂(t) + 1/(n+1)` is at most
//! `epsilon`. Voxel `j` with residual `r_j > 0` becomes covered once its
//! group's inflation reaches `r_j`, so along the family it switches at one
//! critical `t`. The empirical loss is a right-continuous step function of
//! `t` with jumps at those critical values; the infimum is found exactly by
//! walking the jumps from the top.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{
    interval_width, loss01_raw, organ_misses, residuals, LambdaMode, LambdaVector,
};
use crate::partition::PartitionSpec;
use crate::tensor_io::{CalibrationSample, ImageTensor, QuantilePair, SampleSet};

/// Number of points kept in a search trace.
const TRACE_POINTS: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "crc")]
    Crc,
    #[serde(rename = "kcrc")]
    KCrc,
    #[serde(rename = "semcrc")]
    SemCrc,
    #[serde(rename = "sembarcrc")]
    SemBarCrc,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Crc, Method::KCrc, Method::SemCrc, Method::SemBarCrc];

    pub fn key(&self) -> &'static str {
        match self {
            Method::Crc => "crc",
            Method::KCrc => "kcrc",
            Method::SemCrc => "semcrc",
            Method::SemBarCrc => "sembarcrc",
        }
    }

    pub fn lambda_mode(&self) -> LambdaMode {
        match self {
            Method::Crc => LambdaMode::Scalar,
            Method::KCrc => LambdaMode::FixedPartition,
            Method::SemCrc | Method::SemBarCrc => LambdaMode::Semantic,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Crc => "CRC",
            Method::KCrc => "K-CRC",
            Method::SemCrc => "sem-CRC",
            Method::SemBarCrc => "sembar-CRC",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.key() == s.to_ascii_lowercase())
            .ok_or_else(|| {
                Error::InvalidParameter(format!(
                    "unknown method {s:?}; expected one of crc, kcrc, semcrc, sembarcrc"
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    /// Search parameter: ω for line searches, λ for per-organ searches.
    pub param: f64,
    pub adjusted_risk: f64,
}

/// Outcome of one organ's search in per-organ calibration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrganCalibration {
    pub organ: usize,
    pub lambda: f64,
    /// Calibration samples containing the organ.
    pub n_eff: usize,
    pub empirical_risk: Option<f64>,
    pub adjusted_risk: Option<f64>,
    pub calibrated: bool,
    pub trace: Vec<TracePoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub method: Method,
    pub lambda_hat: LambdaVector,
    pub epsilon: f64,
    pub n_cal: usize,
    /// Mean calibration loss at `lambda_hat`, over all voxels.
    pub empirical_cal_risk: f64,
    pub adjusted_cal_risk: f64,
    /// Backtracking offset along `anchor + ω·1`.
    pub omega_hat: Option<f64>,
    pub anchor: Option<Vec<f64>>,
    pub trace: Vec<TracePoint>,
    pub per_organ: Option<Vec<OrganCalibration>>,
    pub warnings: Vec<String>,
}

/// `(n/(n+1)) L̂ + 1/(n+1)` written in terms of the summed per-sample loss.
#[inline]
pub fn adjusted_risk(loss_sum: f64, n: usize) -> f64 {
    (loss_sum + 1.0) / (n as f64 + 1.0)
}

fn check_epsilon(epsilon: f64, n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::EmptySet);
    }
    // At epsilon == 1/(n+1) zero empirical loss still meets the bound.
    let bound = 1.0 / (n as f64 + 1.0);
    if epsilon.is_nan() || epsilon < bound * (1.0 - 1e-12) {
        return Err(Error::Unattainable {
            epsilon,
            n_cal: n,
            bound,
        });
    }
    Ok(())
}

/// A voxel's loss contribution `mass`, removed once the parameter reaches `at`.
#[derive(Debug, Clone, Copy)]
struct Jump {
    at: f64,
    mass: f64,
}

struct Search {
    param: f64,
    trace: Vec<TracePoint>,
}

/// Smallest `t >= lower` with `sum{mass : at > t} <= epsilon (n + 1) - 1`.
fn search_infimum(mut jumps: Vec<Jump>, n: usize, epsilon: f64, lower: f64) -> Search {
    let budget = (epsilon * (n as f64 + 1.0) - 1.0).max(0.0);
    jumps.retain(|j| j.at > lower);
    jumps.sort_by(|a, b| b.at.total_cmp(&a.at).then(a.mass.total_cmp(&b.mass)));

    // prefix[i] = mass of jumps[..i], i.e. of everything above jumps[i].at
    let mut prefix = Vec::with_capacity(jumps.len() + 1);
    prefix.push(0.0);
    let mut acc = 0.0;
    for j in &jumps {
        acc += j.mass;
        prefix.push(acc);
    }
    let mass_above = |t: f64| prefix[jumps.partition_point(|j| j.at > t)];

    let param = if acc <= budget {
        lower
    } else {
        let mut best = lower;
        let mut i = 0;
        while i < jumps.len() {
            if prefix[i] > budget {
                break;
            }
            best = jumps[i].at;
            while i < jumps.len() && jumps[i].at == best {
                i += 1;
            }
        }
        best
    };

    let mut params = vec![lower, param];
    if !jumps.is_empty() {
        let step = (jumps.len() as f64 / TRACE_POINTS as f64).max(1.0);
        params.extend(
            (0..TRACE_POINTS)
                .map(|p| ((p as f64 * step) as usize).min(jumps.len() - 1))
                .map(|idx| jumps[idx].at),
        );
    }
    params.sort_by(f64::total_cmp);
    params.dedup();
    let trace = params
        .into_iter()
        .map(|t| TracePoint {
            param: t,
            adjusted_risk: adjusted_risk(mass_above(t), n),
        })
        .collect();
    Search { param, trace }
}

fn lambda_on_line(anchor: &[f64], omega: f64) -> Vec<f64> {
    anchor.iter().map(|a| (a + omega).max(0.0)).collect()
}

/// Summed per-sample loss at `lam`, recomputed voxel by voxel.
fn loss_sum(cal: &SampleSet, part: &PartitionSpec, lam: &[f64]) -> Result<f64> {
    cal.samples().iter().try_fold(0.0, |acc, s| {
        Ok(acc + loss01_raw(residuals(s).values(), part.membership(s)?, lam)?)
    })
}

/// Backtracking along `clamp₊(anchor + ω·1)` shared by CRC, K-CRC and sem-CRC.
fn calibrate_line(
    cal: &SampleSet,
    part: &PartitionSpec,
    anchor: &[f64],
    epsilon: f64,
    method: Method,
) -> Result<CalibrationResult> {
    let n = cal.len();
    check_epsilon(epsilon, n)?;
    if anchor.len() != part.k() {
        return Err(Error::LambdaLength {
            expected: part.k(),
            found: anchor.len(),
        });
    }
    LambdaVector::new(anchor.to_vec(), method.lambda_mode())?;
    let lower = 0.0 - anchor.iter().copied().fold(0.0, f64::max);

    let mut jumps = Vec::new();
    for sample in cal.samples() {
        let member = part.membership(sample)?;
        let mass = 1.0 / sample.dim() as f64;
        for (j, &r) in residuals(sample).values().iter().enumerate() {
            if r > 0.0 {
                let g = member.group(j);
                let a = *anchor.get(g).ok_or(Error::GroupOutOfRange { group: g, k: anchor.len() })?;
                jumps.push(Jump { at: r - a, mass });
            }
        }
    }
    let search = search_infimum(jumps, n, epsilon, lower);

    // `anchor + ω` can round just below a residual; step ω up until the
    // direct recount agrees.
    let mut omega = search.param;
    let mut lam = lambda_on_line(anchor, omega);
    let mut sum = loss_sum(cal, part, &lam)?;
    let mut nudges = 0;
    while adjusted_risk(sum, n) > epsilon && nudges < 64 {
        omega = omega.next_up();
        lam = lambda_on_line(anchor, omega);
        sum = loss_sum(cal, part, &lam)?;
        nudges += 1;
    }

    let is_line = method != Method::Crc;
    Ok(CalibrationResult {
        method,
        lambda_hat: LambdaVector::new(lam, method.lambda_mode())?,
        epsilon,
        n_cal: n,
        empirical_cal_risk: sum / n as f64,
        adjusted_cal_risk: adjusted_risk(sum, n),
        omega_hat: is_line.then_some(omega),
        anchor: is_line.then(|| anchor.to_vec()),
        trace: search.trace,
        per_organ: None,
        warnings: Vec::new(),
    })
}

/// Scalar CRC: `λ̂ = inf{λ >= 0 : (n/(n+1)) L̂(λ) + 1/(n+1) <= ε}`.
pub fn calibrate_scalar(cal: &SampleSet, epsilon: f64) -> Result<CalibrationResult> {
    calibrate_line(cal, &PartitionSpec::Scalar, &[0.0], epsilon, Method::Crc)
}

/// K-CRC backtracking along the anchor line of a fixed partition. `ω` may be
/// negative; components are clamped at zero.
pub fn calibrate_kcrc(
    cal: &SampleSet,
    part: &PartitionSpec,
    anchor: &LambdaVector,
    epsilon: f64,
) -> Result<CalibrationResult> {
    if !matches!(part, PartitionSpec::Fixed { .. }) {
        return Err(Error::Incompatible("K-CRC needs a fixed partition".into()));
    }
    calibrate_line(cal, part, anchor.values(), epsilon, Method::KCrc)
}

/// sem-CRC: backtracking along `anchor + ω·1` with each sample's own
/// segmentation as the membership.
pub fn calibrate_semcrc(cal: &SampleSet, anchor: &LambdaVector, epsilon: f64) -> Result<CalibrationResult> {
    let part = PartitionSpec::Semantic { k: cal.k_classes() };
    calibrate_line(cal, &part, anchor.values(), epsilon, Method::SemCrc)
}

/// Per-organ calibration. For each organ `k`, the smallest `λ >= 0` such that
/// the organ's adjusted risk at `anchor + λ e_k` is at most `epsilon`, where
/// the empirical mean runs over calibration samples containing the organ.
///
/// Organs too rare to calibrate (absent from every sample, or present in so
/// few that `epsilon <= 1/(n_k+1)`) fall back to the largest calibration
/// residual and are reported in `warnings`.
pub fn calibrate_sembar(cal: &SampleSet, anchor: &LambdaVector, epsilon: f64) -> Result<CalibrationResult> {
    let n = cal.len();
    check_epsilon(epsilon, n)?;
    let k = cal.k_classes();
    if anchor.len() != k {
        return Err(Error::LambdaLength {
            expected: k,
            found: anchor.len(),
        });
    }
    let anchor = anchor.values();

    let residual_maps: Vec<Vec<f64>> = cal.samples().iter().map(|s| residuals(s).into_values()).collect();
    let max_residual = residual_maps
        .iter()
        .flatten()
        .copied()
        .fold(0.0, f64::max);

    let mut jumps: Vec<Vec<Jump>> = vec![Vec::new(); k];
    let mut n_eff = vec![0usize; k];
    for (sample, res) in cal.samples().iter().zip(&residual_maps) {
        let sizes = sample.seg.class_counts();
        for (g, &size) in sizes.iter().enumerate() {
            n_eff[g] += usize::from(size > 0);
        }
        for (&r, &l) in res.iter().zip(sample.seg.labels()) {
            let g = l as usize;
            let at = r - anchor[g];
            if at > 0.0 {
                jumps[g].push(Jump { at, mass: 1.0 / sizes[g] as f64 });
            }
        }
    }

    // Summed per-sample organ loss at inflation `lam` for organ `g`.
    let organ_loss_sum = |g: usize, lam: f64| -> f64 {
        let mut total = 0.0;
        for (sample, res) in cal.samples().iter().zip(&residual_maps) {
            let (mut misses, mut size) = (0usize, 0usize);
            for (&r, &l) in res.iter().zip(sample.seg.labels()) {
                if l as usize == g {
                    size += 1;
                    misses += usize::from(r > lam);
                }
            }
            if size > 0 {
                total += misses as f64 / size as f64;
            }
        }
        total
    };

    let mut organs = Vec::with_capacity(k);
    let mut warnings = Vec::new();
    for (g, jumps) in jumps.into_iter().enumerate() {
        let n_g = n_eff[g];
        if n_g == 0 || epsilon < (1.0 - 1e-12) / (n_g as f64 + 1.0) {
            let lambda = anchor[g].max(max_residual);
            warnings.push(format!(
                "organ {g} uncalibrated: present in {n_g} calibration samples; using fallback lambda {lambda}"
            ));
            organs.push(OrganCalibration {
                organ: g,
                lambda,
                n_eff: n_g,
                empirical_risk: None,
                adjusted_risk: None,
                calibrated: false,
                trace: Vec::new(),
            });
            continue;
        }
        let search = search_infimum(jumps, n_g, epsilon, 0.0);
        let mut step = search.param;
        let mut lambda = anchor[g] + step;
        let mut sum = organ_loss_sum(g, lambda);
        let mut nudges = 0;
        while adjusted_risk(sum, n_g) > epsilon && nudges < 64 {
            step = step.next_up();
            lambda = anchor[g] + step;
            sum = organ_loss_sum(g, lambda);
            nudges += 1;
        }
        organs.push(OrganCalibration {
            organ: g,
            lambda,
            n_eff: n_g,
            empirical_risk: Some(sum / n_g as f64),
            adjusted_risk: Some(adjusted_risk(sum, n_g)),
            calibrated: true,
            trace: search.trace,
        });
    }

    let lam: Vec<f64> = organs.iter().map(|o| o.lambda).collect();
    let part = PartitionSpec::Semantic { k };
    let sum = loss_sum(cal, &part, &lam)?;
    Ok(CalibrationResult {
        method: Method::SemBarCrc,
        lambda_hat: LambdaVector::new(lam, LambdaMode::Semantic)?,
        epsilon,
        n_cal: n,
        empirical_cal_risk: sum / n as f64,
        adjusted_cal_risk: adjusted_risk(sum, n),
        omega_hat: None,
        anchor: Some(anchor.to_vec()),
        trace: Vec::new(),
        per_organ: Some(organs),
        warnings,
    })
}

/// The partition a result must be applied with, checked against its method.
pub fn check_compatible(result: &CalibrationResult, part: &PartitionSpec) -> Result<()> {
    let ok = matches!(
        (result.method, part),
        (Method::Crc, PartitionSpec::Scalar)
            | (Method::KCrc, PartitionSpec::Fixed { .. })
            | (Method::SemCrc | Method::SemBarCrc, PartitionSpec::Semantic { .. })
    );
    if !ok {
        return Err(Error::Incompatible(format!(
            "{} result cannot be applied with a {:?} partition",
            result.method,
            LambdaMode::of(part)
        )));
    }
    if result.lambda_hat.len() != part.k() {
        return Err(Error::LambdaLength {
            expected: part.k(),
            found: result.lambda_hat.len(),
        });
    }
    Ok(())
}

/// Conformalized bounds `lo_j - λ̂_{g(j)}`, `hi_j + λ̂_{g(j)}`.
pub fn apply(sample: &CalibrationSample, result: &CalibrationResult, part: &PartitionSpec) -> Result<QuantilePair> {
    check_compatible(result, part)?;
    let member = part.membership(sample)?;
    let lam = result.lambda_hat.values();
    let shift = |values: &[f32], sign: f64| -> Result<ImageTensor> {
        let out = values
            .iter()
            .enumerate()
            .map(|(j, &v)| {
                let g = member.group(j);
                let l = *lam.get(g).ok_or(Error::GroupOutOfRange { group: g, k: lam.len() })?;
                Ok((v as f64 + sign * l) as f32)
            })
            .collect::<Result<Vec<f32>>>()?;
        ImageTensor::new(sample.shape().to_vec(), out)
    };
    QuantilePair::new(shift(sample.q.lo.values(), -1.0)?, shift(sample.q.hi.values(), 1.0)?, sample.q.alpha)
}

/// Per-voxel conformalized interval widths, floored at zero.
pub fn length_map(sample: &CalibrationSample, lambda: &LambdaVector, part: &PartitionSpec) -> Result<ImageTensor> {
    if lambda.len() != part.k() {
        return Err(Error::LambdaLength {
            expected: part.k(),
            found: lambda.len(),
        });
    }
    let member = part.membership(sample)?;
    let lam = lambda.values();
    let lo = sample.q.lo.values();
    let hi = sample.q.hi.values();
    let widths = (0..lo.len())
        .map(|j| interval_width(lo[j] as f64, hi[j] as f64, lam[member.group(j)]) as f32)
        .collect();
    ImageTensor::new(sample.shape().to_vec(), widths)
}

/// Test-set metrics stratified by segmentation class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrganStats {
    pub organ: usize,
    /// Mean over samples containing the organ of its miscoverage.
    pub risk: Option<f64>,
    /// Mean over samples containing the organ of its mean interval width.
    pub mean_length: Option<f64>,
    pub n_voxels: usize,
    pub n_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    /// Mean over samples of the miscoverage loss.
    pub risk: f64,
    /// Mean over samples of the mean interval length.
    pub mean_length: f64,
    pub n_samples: usize,
    pub per_organ: Vec<OrganStats>,
}

/// Risk and length of `lambda` on `test`, overall and per segmentation class.
pub fn evaluate(test: &SampleSet, lambda: &LambdaVector, part: &PartitionSpec) -> Result<Evaluation> {
    if test.is_empty() {
        return Err(Error::EmptySet);
    }
    if lambda.len() != part.k() {
        return Err(Error::LambdaLength {
            expected: part.k(),
            found: lambda.len(),
        });
    }
    let k = test.k_classes();
    let lam = lambda.values();
    let mut risk = 0.0;
    let mut length = 0.0;
    let mut organ_risk = vec![0.0; k];
    let mut organ_len = vec![0.0; k];
    let mut n_voxels = vec![0usize; k];
    let mut n_samples = vec![0usize; k];

    for sample in test.samples() {
        let member = part.membership(sample)?;
        let res = residuals(sample);
        let res = res.values();
        let lo = sample.q.lo.values();
        let hi = sample.q.hi.values();
        let mut misses = 0usize;
        let mut width_sum = 0.0;
        let mut organ_miss = vec![0usize; k];
        let mut organ_width = vec![0.0; k];
        let mut organ_size = vec![0usize; k];
        for (j, &l) in sample.seg.labels().iter().enumerate() {
            let g = member.group(j);
            let lg = *lam.get(g).ok_or(Error::GroupOutOfRange { group: g, k: lam.len() })?;
            let miss = res[j] > lg;
            let w = interval_width(lo[j] as f64, hi[j] as f64, lg);
            misses += usize::from(miss);
            width_sum += w;
            let o = l as usize;
            organ_miss[o] += usize::from(miss);
            organ_width[o] += w;
            organ_size[o] += 1;
        }
        let d = sample.dim() as f64;
        risk += misses as f64 / d;
        length += width_sum / d;
        for o in 0..k {
            if organ_size[o] > 0 {
                let size = organ_size[o] as f64;
                organ_risk[o] += organ_miss[o] as f64 / size;
                organ_len[o] += organ_width[o] / size;
                n_voxels[o] += organ_size[o];
                n_samples[o] += 1;
            }
        }
    }
    let n = test.len() as f64;
    let per_organ = (0..k)
        .map(|o| {
            let m = n_samples[o] as f64;
            OrganStats {
                organ: o,
                risk: (n_samples[o] > 0).then(|| organ_risk[o] / m),
                mean_length: (n_samples[o] > 0).then(|| organ_len[o] / m),
                n_voxels: n_voxels[o],
                n_samples: n_samples[o],
            }
        })
        .collect();
    Ok(Evaluation {
        risk: risk / n,
        mean_length: length / n,
        n_samples: test.len(),
        per_organ,
    })
}

/// Per-organ miss fractions of one sample at semantic inflation `lam`.
pub fn organ_losses(sample: &CalibrationSample, lam: &[f64]) -> Vec<Option<f64>> {
    let (misses, sizes) = organ_misses(residuals(sample).values(), sample.seg.labels(), lam);
    misses
        .into_iter()
        .zip(sizes)
        .map(|(m, s)| (s > 0).then(|| m as f64 / s as f64))
        .collect()
}
