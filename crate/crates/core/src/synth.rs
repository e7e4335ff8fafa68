//! Synthetic phantoms with known, organ-dependent noise and Monte Carlo
//! scenario runs over the calibration procedures.
//!
//! A phantom is a 2-D image of a constant background with elliptical organs
//! whose positions and sizes are redrawn for every sample. Ground truth is the
//! clean phantom plus Gaussian noise with a per-class scale `sigma`, clipped
//! to `[0, 1]`. The emitted quantile maps are the exact `alpha` and
//! `1 - alpha` Gaussian quantiles around the clean phantom, scaled by a
//! per-class miscalibration factor; they are computed before clipping.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::anchor::{solve_anchor, subsample, AnchorProblem, AnchorSettings, AnchorSolution, DEFAULT_D_MIN};
use crate::calibrate::{
    calibrate_kcrc, calibrate_scalar, calibrate_semcrc, calibrate_sembar, evaluate, CalibrationResult, Method,
};
use crate::error::{Error, Result};
use crate::losses::DEFAULT_GAMMA;
use crate::partition::{build_loss_quantile_partition, PartitionSpec};
use crate::tensor_io::{split, CalibrationSample, ImageTensor, QuantilePair, SampleSet, SegmentationMap, SplitPlan};

const MAX_GEOMETRY_ATTEMPTS: usize = 100;

/// Mixes a base seed with a stream index (SplitMix64 finalizer).
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Intensity and noise of one class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub name: String,
    /// Clean intensity is drawn uniformly from this range per sample.
    pub intensity: [f64; 2],
    pub sigma: f64,
    /// Emitted band half-width is `z * sigma * miscalibration`.
    pub miscalibration: f64,
}

/// An elliptical organ, in coordinates normalized to `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrganSpec {
    #[serde(flatten)]
    pub class: ClassSpec,
    /// Nominal (row, column) center.
    pub center: [f64; 2],
    /// Each center coordinate moves uniformly in `±jitter` per sample.
    pub jitter: f64,
    /// Semi-axis ranges along rows and columns.
    pub axes: [[f64; 2]; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomConfig {
    pub shape: [usize; 2],
    pub alpha: f64,
    pub background: ClassSpec,
    /// Later organs overwrite earlier ones where they overlap.
    pub organs: Vec<OrganSpec>,
    /// Grow organ labels into the background by this many pixels in the
    /// segmentation handed to calibrators. Noise still follows the true labels.
    #[serde(default)]
    pub seg_dilation: usize,
    pub seed: u64,
}

fn class(name: &str, intensity: [f64; 2], sigma: f64, miscalibration: f64) -> ClassSpec {
    ClassSpec {
        name: name.into(),
        intensity,
        sigma,
        miscalibration,
    }
}

fn organ(class: ClassSpec, center: [f64; 2], jitter: f64, axes: [[f64; 2]; 2]) -> OrganSpec {
    OrganSpec {
        class,
        center,
        jitter,
        axes,
    }
}

impl PhantomConfig {
    /// 64×64 air background with three organs of increasing noise whose
    /// bands undercover, positions jittered per sample. Air bands cover
    /// almost every voxel without inflation.
    pub fn heterogeneous() -> Self {
        Self {
            shape: [64, 64],
            alpha: 0.1,
            background: class("air", [0.0, 0.05], 0.01, 2.0),
            organs: vec![
                organ(class("liver", [0.45, 0.55], 0.05, 0.5), [0.42, 0.40], 0.15, [[0.26, 0.32], [0.22, 0.28]]),
                organ(class("kidney", [0.35, 0.45], 0.10, 0.4), [0.62, 0.66], 0.15, [[0.12, 0.16], [0.10, 0.14]]),
                organ(class("pancreas", [0.60, 0.70], 0.15, 0.3), [0.35, 0.62], 0.15, [[0.08, 0.11], [0.14, 0.18]]),
            ],
            seg_dilation: 0,
            seed: 0,
        }
    }

    /// Same layout with identical noise in every class and no jitter.
    pub fn homogeneous() -> Self {
        let mut cfg = Self::heterogeneous();
        cfg.background.sigma = 0.08;
        cfg.background.miscalibration = 0.8;
        for o in &mut cfg.organs {
            o.class.sigma = 0.08;
            o.class.miscalibration = 0.8;
            o.jitter = 0.0;
        }
        cfg
    }

    /// A clean region and one large noisy organ with a 4:1 noise ratio.
    pub fn two_organ() -> Self {
        Self {
            shape: [64, 64],
            alpha: 0.1,
            background: class("clean", [0.35, 0.45], 0.03, 1.0),
            organs: vec![organ(class("noisy", [0.55, 0.65], 0.12, 1.0), [0.5, 0.5], 0.1, [[0.25, 0.32], [0.25, 0.32]])],
            seg_dilation: 0,
            seed: 0,
        }
    }

    /// Bands so wide that every residual is negative.
    pub fn easy() -> Self {
        let mut cfg = Self::heterogeneous();
        cfg.background.miscalibration = 20.0;
        for o in &mut cfg.organs {
            o.class.miscalibration = 20.0;
        }
        cfg
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Number of classes including the background.
    pub fn k_classes(&self) -> usize {
        self.organs.len() + 1
    }

    pub fn class_names(&self) -> Vec<String> {
        std::iter::once(self.background.name.clone())
            .chain(self.organs.iter().map(|o| o.class.name.clone()))
            .collect()
    }

    fn classes(&self) -> impl Iterator<Item = &ClassSpec> {
        std::iter::once(&self.background).chain(self.organs.iter().map(|o| &o.class))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if self.shape.contains(&0) {
            return bad(format!("phantom shape must be positive, got {:?}", self.shape));
        }
        if !(self.alpha > 0.0 && self.alpha < 0.5) {
            return bad(format!("alpha must lie in (0, 0.5), got {}", self.alpha));
        }
        if self.k_classes() > u16::MAX as usize {
            return bad("too many organs".into());
        }
        for c in self.classes() {
            if !(c.sigma >= 0.0 && c.miscalibration > 0.0) {
                return bad(format!("class {}: need sigma >= 0 and miscalibration > 0", c.name));
            }
            if !(0.0..=1.0).contains(&c.intensity[0]) || !(0.0..=1.0).contains(&c.intensity[1]) || c.intensity[0] > c.intensity[1] {
                return bad(format!("class {}: intensity range must be ordered within [0, 1]", c.name));
            }
        }
        for o in &self.organs {
            if o.axes.iter().any(|r| !(r[0] >= 0.0 && r[0] <= r[1])) || o.jitter < 0.0 {
                return bad(format!("organ {}: bad geometry ranges", o.class.name));
            }
        }
        Ok(())
    }

    /// Upper quantile of the standard normal at `1 - alpha`.
    pub fn z(&self) -> f64 {
        Normal::new(0.0, 1.0).expect("standard normal").inverse_cdf(1.0 - self.alpha)
    }
}

fn uniform(rng: &mut ChaCha8Rng, range: [f64; 2]) -> f64 {
    if range[1] > range[0] {
        rng.gen_range(range[0]..range[1])
    } else {
        range[0]
    }
}

fn draw_labels(cfg: &PhantomConfig, rng: &mut ChaCha8Rng) -> Result<Vec<u16>> {
    let [h, w] = cfg.shape;
    for _ in 0..MAX_GEOMETRY_ATTEMPTS {
        let mut labels = vec![0u16; h * w];
        for (idx, o) in cfg.organs.iter().enumerate() {
            let cr = o.center[0] + uniform(rng, [-o.jitter, o.jitter]);
            let cc = o.center[1] + uniform(rng, [-o.jitter, o.jitter]);
            let ar = uniform(rng, o.axes[0]);
            let ac = uniform(rng, o.axes[1]);
            if ar <= 0.0 || ac <= 0.0 {
                continue;
            }
            for r in 0..h {
                let u = ((r as f64 + 0.5) / h as f64 - cr) / ar;
                for c in 0..w {
                    let v = ((c as f64 + 0.5) / w as f64 - cc) / ac;
                    if u * u + v * v <= 1.0 {
                        labels[r * w + c] = idx as u16 + 1;
                    }
                }
            }
        }
        let mut present = vec![false; cfg.k_classes()];
        for &l in &labels {
            present[l as usize] = true;
        }
        if present[1..].iter().all(|&p| p) {
            return Ok(labels);
        }
    }
    Err(Error::DegenerateGeometry(MAX_GEOMETRY_ATTEMPTS))
}

/// Grows nonzero labels into 4-connected background pixels, `steps` times.
fn dilate(labels: &[u16], shape: [usize; 2], steps: usize) -> Vec<u16> {
    let [h, w] = shape;
    let mut cur = labels.to_vec();
    for _ in 0..steps {
        let prev = cur.clone();
        for r in 0..h {
            for c in 0..w {
                if prev[r * w + c] != 0 {
                    continue;
                }
                let neighbors = [
                    (r > 0).then(|| prev[(r - 1) * w + c]),
                    (r + 1 < h).then(|| prev[(r + 1) * w + c]),
                    (c > 0).then(|| prev[r * w + c - 1]),
                    (c + 1 < w).then(|| prev[r * w + c + 1]),
                ];
                if let Some(l) = neighbors.into_iter().flatten().max() {
                    cur[r * w + c] = l;
                }
            }
        }
    }
    cur
}

fn generate_one(cfg: &PhantomConfig, index: usize, z: f64) -> Result<CalibrationSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, index as u64));
    let labels = draw_labels(cfg, &mut rng)?;
    let classes: Vec<&ClassSpec> = cfg.classes().collect();
    let intensity: Vec<f64> = classes.iter().map(|c| uniform(&mut rng, c.intensity)).collect();

    let d = labels.len();
    let mut x = Vec::with_capacity(d);
    let mut lo = Vec::with_capacity(d);
    let mut hi = Vec::with_capacity(d);
    for &l in &labels {
        let c = classes[l as usize];
        let clean = intensity[l as usize];
        let noise: f64 = rng.sample(StandardNormal);
        x.push((clean + c.sigma * noise).clamp(0.0, 1.0) as f32);
        let half = z * c.sigma * c.miscalibration;
        lo.push((clean - half) as f32);
        hi.push((clean + half) as f32);
    }
    let shape = cfg.shape.to_vec();
    let seg_labels = if cfg.seg_dilation > 0 {
        dilate(&labels, cfg.shape, cfg.seg_dilation)
    } else {
        labels
    };
    let q = QuantilePair::new(
        ImageTensor::new(shape.clone(), lo)?,
        ImageTensor::new(shape.clone(), hi)?,
        cfg.alpha,
    )?;
    CalibrationSample::new(
        format!("phantom-{index:05}"),
        ImageTensor::new(shape.clone(), x)?,
        q,
        SegmentationMap::new(shape, seg_labels, cfg.k_classes())?,
    )
}

/// Generates `n` phantom samples; sample `i` depends only on `(config, i)`.
pub fn generate(config: &PhantomConfig, n: usize) -> Result<SampleSet> {
    config.validate()?;
    let z = config.z();
    let samples = (0..n)
        .into_par_iter()
        .map(|i| generate_one(config, i, z))
        .collect::<Result<Vec<_>>>()?;
    SampleSet::new(samples, config.k_classes(), Some(config.class_names()))
}

// ---------------------------------------------------------------------------
// Scenarios

/// Everything needed to replay a Monte Carlo experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub phantom: PhantomConfig,
    pub methods: Vec<Method>,
    pub epsilons: Vec<f64>,
    pub trials: usize,
    /// Per-trial sizes; the seed is the scenario's base seed.
    pub sizes: SplitPlan,
    /// Groups of the loss-quantile partition for K-CRC.
    #[serde(default = "default_k_groups")]
    pub k_groups: usize,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    /// Per-sample subsample size for K-CRC anchors.
    #[serde(default)]
    pub d_opt_fixed: Option<usize>,
    /// Per-sample subsample size for semantic anchors; `None` sizes it from `d_min`.
    #[serde(default)]
    pub d_opt_semantic: Option<usize>,
    #[serde(default = "default_d_min")]
    pub d_min: usize,
}

fn default_k_groups() -> usize {
    4
}
fn default_gamma() -> f64 {
    DEFAULT_GAMMA
}
fn default_d_min() -> usize {
    DEFAULT_D_MIN
}

impl ScenarioConfig {
    pub fn new(phantom: PhantomConfig, methods: Vec<Method>, epsilons: Vec<f64>, trials: usize, sizes: SplitPlan) -> Self {
        Self {
            phantom,
            methods,
            epsilons,
            trials,
            sizes,
            k_groups: default_k_groups(),
            gamma: default_gamma(),
            d_opt_fixed: None,
            d_opt_semantic: None,
            d_min: default_d_min(),
        }
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// One method's outcome in one trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub seed: u64,
    pub method: Method,
    pub lambda_hat: Vec<f64>,
    pub omega_hat: Option<f64>,
    pub cal_risk: f64,
    pub test_risk: f64,
    pub test_length: f64,
    /// Mean per-organ test risk over test samples containing the organ.
    pub organ_risk: Vec<Option<f64>>,
    pub organ_length: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
    /// Standard error of the mean, `std / sqrt(n)`.
    pub se: f64,
    pub n: usize,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = if n > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        let std = var.sqrt();
        Self {
            mean,
            std,
            se: std / (n as f64).sqrt(),
            n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrganSummary {
    pub organ: usize,
    pub name: String,
    pub risk: Option<Stat>,
    pub length: Option<Stat>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub risk: Stat,
    pub length: Stat,
    pub per_organ: Vec<OrganSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub epsilon: f64,
    pub trials: usize,
    pub seed: u64,
    pub class_names: Vec<String>,
    pub records: Vec<TrialRecord>,
    pub summary: Vec<MethodSummary>,
}

impl ScenarioReport {
    pub fn summary_for(&self, method: Method) -> Option<&MethodSummary> {
        self.summary.iter().find(|s| s.method == method)
    }

    pub fn records_for(&self, method: Method) -> impl Iterator<Item = &TrialRecord> {
        self.records.iter().filter(move |r| r.method == method)
    }
}

/// Runs one scenario at a single tolerance with default solver settings.
pub fn run_scenario(
    config: &PhantomConfig,
    methods: &[Method],
    epsilon: f64,
    trials: usize,
    sizes: SplitPlan,
) -> Result<ScenarioReport> {
    let scenario = ScenarioConfig::new(config.clone(), methods.to_vec(), vec![epsilon], trials, sizes);
    Ok(run_scenarios(&scenario)?.remove(0))
}

/// Runs every tolerance of `scenario` on shared per-trial data; one report per tolerance.
pub fn run_scenarios(scenario: &ScenarioConfig) -> Result<Vec<ScenarioReport>> {
    if scenario.trials == 0 {
        return Err(Error::InvalidParameter("trials must be >= 1".into()));
    }
    if scenario.epsilons.is_empty() || scenario.methods.is_empty() {
        return Err(Error::InvalidParameter("need at least one epsilon and one method".into()));
    }
    scenario.phantom.validate()?;

    let per_trial = (0..scenario.trials)
        .into_par_iter()
        .map(|t| run_trial(scenario, t))
        .collect::<Result<Vec<_>>>()?;

    let names = scenario.phantom.class_names();
    Ok(scenario
        .epsilons
        .iter()
        .enumerate()
        .map(|(e, &epsilon)| {
            let records: Vec<TrialRecord> = per_trial.iter().flat_map(|t| t[e].iter().cloned()).collect();
            let summary = scenario
                .methods
                .iter()
                .map(|&m| summarize(m, &records, &names))
                .collect();
            ScenarioReport {
                epsilon,
                trials: scenario.trials,
                seed: scenario.phantom.seed,
                class_names: names.clone(),
                records,
                summary,
            }
        })
        .collect())
}

fn summarize(method: Method, records: &[TrialRecord], names: &[String]) -> MethodSummary {
    let rs: Vec<&TrialRecord> = records.iter().filter(|r| r.method == method).collect();
    let col = |f: &dyn Fn(&TrialRecord) -> f64| rs.iter().map(|r| f(r)).collect::<Vec<_>>();
    let per_organ = names
        .iter()
        .enumerate()
        .map(|(k, name)| {
            let risks: Vec<f64> = rs.iter().filter_map(|r| r.organ_risk[k]).collect();
            let lengths: Vec<f64> = rs.iter().filter_map(|r| r.organ_length[k]).collect();
            OrganSummary {
                organ: k,
                name: name.clone(),
                risk: (!risks.is_empty()).then(|| Stat::of(&risks)),
                length: (!lengths.is_empty()).then(|| Stat::of(&lengths)),
            }
        })
        .collect();
    MethodSummary {
        method,
        risk: Stat::of(&col(&|r| r.test_risk)),
        length: Stat::of(&col(&|r| r.test_length)),
        per_organ,
    }
}

/// Records of one trial, grouped by tolerance index.
fn run_trial(scenario: &ScenarioConfig, trial: usize) -> Result<Vec<Vec<TrialRecord>>> {
    let seed = derive_seed(scenario.phantom.seed, trial as u64);
    let phantom = scenario.phantom.clone().with_seed(seed);
    let data = generate(&phantom, scenario.sizes.total())?;
    let plan = SplitPlan {
        seed: derive_seed(seed, 1),
        ..scenario.sizes
    };
    let (opt, cal, test) = split(&data, &plan)?;
    drop(data);

    let wants = |m: Method| scenario.methods.contains(&m);
    let needs_opt = wants(Method::KCrc) || wants(Method::SemCrc) || wants(Method::SemBarCrc);
    if needs_opt && opt.is_empty() {
        return Err(Error::InvalidParameter("anchored methods need n_opt >= 1".into()));
    }

    // Subsamples do not depend on the tolerance; each epsilon below re-solves
    // the same rows.
    let fixed = if wants(Method::KCrc) {
        let part = build_loss_quantile_partition(&opt, scenario.k_groups, 0.0)?;
        let settings = AnchorSettings {
            epsilon: 0.5,
            gamma: scenario.gamma,
            d_opt: scenario.d_opt_fixed,
            d_min: scenario.d_min,
            seed: derive_seed(seed, 2),
        };
        let problem = subsample(&opt, &part, &settings)?;
        Some((part, problem))
    } else {
        None
    };
    let semantic = PartitionSpec::Semantic { k: cal.k_classes() };
    let sem_problem = if wants(Method::SemCrc) || wants(Method::SemBarCrc) {
        let settings = AnchorSettings {
            epsilon: 0.5,
            gamma: scenario.gamma,
            d_opt: scenario.d_opt_semantic,
            d_min: scenario.d_min,
            seed: derive_seed(seed, 3),
        };
        Some(subsample(&opt, &semantic, &settings)?)
    } else {
        None
    };

    let mut out = Vec::with_capacity(scenario.epsilons.len());
    for &epsilon in &scenario.epsilons {
        let mut records = Vec::with_capacity(scenario.methods.len());
        let anchor_for = |problem: &AnchorProblem| -> Result<AnchorSolution> {
            let mut p = problem.clone();
            p.epsilon = epsilon;
            solve_anchor(&p)
        };
        let sem_anchor = match &sem_problem {
            Some(p) => Some(anchor_for(p)?),
            None => None,
        };
        for &method in &scenario.methods {
            let (result, part): (CalibrationResult, PartitionSpec) = match method {
                Method::Crc => (calibrate_scalar(&cal, epsilon)?, PartitionSpec::Scalar),
                Method::KCrc => {
                    let (part, problem) = fixed.as_ref().expect("fixed partition built");
                    let anchor = anchor_for(problem)?;
                    (calibrate_kcrc(&cal, part, &anchor.lambda_tilde, epsilon)?, part.clone())
                }
                Method::SemCrc => {
                    let anchor = sem_anchor.as_ref().expect("semantic anchor solved");
                    (calibrate_semcrc(&cal, &anchor.lambda_tilde, epsilon)?, semantic.clone())
                }
                Method::SemBarCrc => {
                    let anchor = sem_anchor.as_ref().expect("semantic anchor solved");
                    (calibrate_sembar(&cal, &anchor.lambda_tilde, epsilon)?, semantic.clone())
                }
            };
            let eval = evaluate(&test, &result.lambda_hat, &part)?;
            records.push(TrialRecord {
                trial,
                seed,
                method,
                lambda_hat: result.lambda_hat.values().to_vec(),
                omega_hat: result.omega_hat,
                cal_risk: result.empirical_cal_risk,
                test_risk: eval.risk,
                test_length: eval.mean_length,
                organ_risk: eval.per_organ.iter().map(|o| o.risk).collect(),
                organ_length: eval.per_organ.iter().map(|o| o.mean_length).collect(),
            });
        }
        out.push(records);
    }
    Ok(out)
}
