//! Batch commands behind the `semcrc` binary and their output files.
//!
//! Every command writes into `RunConfig::out`:
//!
//! | command       | files                                                    |
//! |---------------|----------------------------------------------------------|
//! | `calibrate`   | `result.json`, `legend.txt`, `partition.json` (K-CRC)    |
//! | `evaluate`    | `report.csv`                                             |
//! | `export-maps` | `maps/*.npy`, `maps/lambda.json`                         |
//! | `scenario`    | `scenario.json`, `report.csv`, `trials.csv`, `summary.txt` |
//!
//! plus `run-record.json`. Files are written to a temporary name and renamed
//! into place. Outputs contain no timestamps, so reruns with the same inputs
//! and seed are byte-identical.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::anchor::{solve_anchor, subsample, AnchorSettings, AnchorSolution, DEFAULT_D_MIN};
use crate::calibrate::{
    calibrate_kcrc, calibrate_scalar, calibrate_semcrc, calibrate_sembar, check_compatible, evaluate, length_map,
    CalibrationResult, Method,
};
use crate::error::{Error, Result};
use crate::losses::DEFAULT_GAMMA;
use crate::partition::{build_loss_quantile_partition, PartitionSpec};
use crate::synth::{derive_seed, run_scenarios, ScenarioConfig, ScenarioReport};
use crate::tensor_io::{load_sample_set, save_tensor, split, SampleSet, SplitPlan};

pub const RESULT_FILE: &str = "result.json";
pub const PARTITION_FILE: &str = "partition.json";
pub const REPORT_CSV: &str = "report.csv";
pub const RUN_RECORD: &str = "run-record.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verb {
    Calibrate,
    Evaluate,
    Scenario,
    ExportMaps,
}

/// Options shared by all commands. Defaults follow the reference protocol:
/// ε = 0.10, K = 4, γ = 0.1, 50 voxels per sample for fixed partitions,
/// and a support floor of 2 voxels per organ for semantic ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub manifest: Option<PathBuf>,
    pub scenario: Option<PathBuf>,
    pub result: Option<PathBuf>,
    pub method: Method,
    pub epsilon: f64,
    pub k: usize,
    pub gamma: f64,
    pub d_opt: Option<usize>,
    pub d_min: usize,
    /// Samples set aside for the anchor problem (anchored methods only).
    pub n_opt: usize,
    pub seed: u64,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            scenario: None,
            result: None,
            method: Method::SemCrc,
            epsilon: 0.10,
            k: 4,
            gamma: DEFAULT_GAMMA,
            d_opt: None,
            d_min: DEFAULT_D_MIN,
            n_opt: 32,
            seed: 0,
            out: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    fn manifest(&self) -> Result<&Path> {
        self.manifest
            .as_deref()
            .ok_or_else(|| Error::InvalidParameter("--manifest is required".into()))
    }

    fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "--epsilon must lie in (0, 1), got {}",
                self.epsilon
            )));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "--gamma must lie in (0, 1), got {}",
                self.gamma
            )));
        }
        if self.k == 0 {
            return Err(Error::InvalidParameter("--k must be >= 1".into()));
        }
        Ok(())
    }
}

/// Organ name and its calibrated inflation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LegendEntry {
    pub group: usize,
    pub name: String,
    pub lambda: f64,
}

/// Contents of `result.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultFile {
    pub result: CalibrationResult,
    pub anchor: Option<AnchorSolution>,
    /// Groups sorted by decreasing λ̂.
    pub legend: Vec<LegendEntry>,
    /// Sidecar holding the fixed partition, relative to the result file.
    pub partition_file: Option<String>,
    pub k_classes: usize,
}

impl ResultFile {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// The partition the result was calibrated with.
    pub fn partition(&self, result_path: &Path) -> Result<PartitionSpec> {
        Ok(match self.result.method {
            Method::Crc => PartitionSpec::Scalar,
            Method::SemCrc | Method::SemBarCrc => PartitionSpec::Semantic { k: self.k_classes },
            Method::KCrc => {
                let file = self
                    .partition_file
                    .as_ref()
                    .ok_or_else(|| Error::Incompatible("K-CRC result without a partition sidecar".into()))?;
                let dir = result_path.parent().unwrap_or(Path::new("."));
                PartitionSpec::load_json(dir.join(file))?
            }
        })
    }
}

#[derive(Debug, Serialize)]
struct RunRecord<'a> {
    verb: Verb,
    tool_version: &'static str,
    config: &'a RunConfig,
    derived_seeds: Vec<(&'static str, u64)>,
    #[serde(skip_serializing_if = "Option::is_none")]
    scenario: Option<&'a ScenarioConfig>,
}

/// Writes `bytes` to `path` via a temporary sibling and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = tmp_sibling(path);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn tmp_sibling(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".tmp");
    path.with_file_name(name)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_record(config: &RunConfig, verb: Verb, seeds: Vec<(&'static str, u64)>, scenario: Option<&ScenarioConfig>) -> Result<()> {
    let record = RunRecord {
        verb,
        tool_version: env!("CARGO_PKG_VERSION"),
        config,
        derived_seeds: seeds,
        scenario,
    };
    write_json(&config.out.join(RUN_RECORD), &record)
}

fn legend(set: &SampleSet, result: &CalibrationResult) -> Vec<LegendEntry> {
    let lam = result.lambda_hat.values();
    let mut entries: Vec<LegendEntry> = lam
        .iter()
        .enumerate()
        .map(|(g, &lambda)| LegendEntry {
            group: g,
            name: match result.method {
                Method::Crc => "all".to_string(),
                Method::KCrc => format!("group_{g}"),
                Method::SemCrc | Method::SemBarCrc => set.class_name(g),
            },
            lambda,
        })
        .collect();
    entries.sort_by(|a, b| b.lambda.total_cmp(&a.lambda).then(a.group.cmp(&b.group)));
    entries
}

fn legend_table(entries: &[LegendEntry]) -> String {
    let width = entries.iter().map(|e| e.name.len()).max().unwrap_or(4).max(5);
    let mut out = format!("{:<width$}  lambda_hat\n", "group");
    for e in entries {
        let _ = writeln!(out, "{:<width$}  {:.6}", e.name, e.lambda);
    }
    out
}

/// Calibrates `config.method` on the manifest and writes `result.json`.
pub fn cmd_calibrate(config: &RunConfig) -> Result<ResultFile> {
    config.validate()?;
    let set = load_sample_set(config.manifest()?)?;
    let n = set.len();
    let n_opt = if config.method == Method::Crc { 0 } else { config.n_opt };
    if n_opt >= n {
        return Err(Error::InvalidParameter(format!(
            "--n-opt {n_opt} leaves no calibration samples out of {n}"
        )));
    }
    if config.method != Method::Crc && n_opt == 0 {
        return Err(Error::InvalidParameter(format!(
            "{} needs --n-opt >= 1 samples for its anchor problem",
            config.method
        )));
    }
    let split_seed = derive_seed(config.seed, 0);
    let anchor_seed = derive_seed(config.seed, 1);
    let plan = SplitPlan {
        n_opt,
        n_cal: n - n_opt,
        n_test: 0,
        seed: split_seed,
    };
    let (opt, cal, _) = split(&set, &plan)?;
    let settings = AnchorSettings {
        epsilon: config.epsilon,
        gamma: config.gamma,
        d_opt: config.d_opt,
        d_min: config.d_min,
        seed: anchor_seed,
    };

    let (result, anchor, partition) = match config.method {
        Method::Crc => (calibrate_scalar(&cal, config.epsilon)?, None, None),
        Method::KCrc => {
            let part = build_loss_quantile_partition(&opt, config.k, 0.0)?;
            let anchor = solve_anchor(&subsample(&opt, &part, &settings)?)?;
            let result = calibrate_kcrc(&cal, &part, &anchor.lambda_tilde, config.epsilon)?;
            (result, Some(anchor), Some(part))
        }
        Method::SemCrc | Method::SemBarCrc => {
            let part = PartitionSpec::Semantic { k: set.k_classes() };
            let anchor = solve_anchor(&subsample(&opt, &part, &settings)?)?;
            let result = if config.method == Method::SemCrc {
                calibrate_semcrc(&cal, &anchor.lambda_tilde, config.epsilon)?
            } else {
                calibrate_sembar(&cal, &anchor.lambda_tilde, config.epsilon)?
            };
            (result, Some(anchor), None)
        }
    };

    ensure_dir(&config.out)?;
    let partition_file = match &partition {
        Some(part) => {
            let path = config.out.join(PARTITION_FILE);
            write_atomic(&path, serde_json::to_string(part)?.as_bytes())?;
            Some(PARTITION_FILE.to_string())
        }
        None => None,
    };
    let entries = legend(&set, &result);
    write_atomic(&config.out.join("legend.txt"), legend_table(&entries).as_bytes())?;
    let file = ResultFile {
        result,
        anchor,
        legend: entries,
        partition_file,
        k_classes: set.k_classes(),
    };
    write_json(&config.out.join(RESULT_FILE), &file)?;
    write_record(config, Verb::Calibrate, vec![("split", split_seed), ("anchor", anchor_seed)], None)?;
    Ok(file)
}

/// One row of `report.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub organ: String,
    pub risk: Option<f64>,
    pub mean_length: Option<f64>,
    pub n_voxels: usize,
}

fn result_path(config: &RunConfig, result_path: Option<&Path>) -> PathBuf {
    result_path
        .map(Path::to_path_buf)
        .or_else(|| config.result.clone())
        .unwrap_or_else(|| config.out.join(RESULT_FILE))
}

fn load_for_apply(config: &RunConfig, result_path: &Path) -> Result<(ResultFile, PartitionSpec, SampleSet)> {
    let file = ResultFile::load(result_path)?;
    let part = file.partition(result_path)?;
    check_compatible(&file.result, &part)?;
    let set = load_sample_set(config.manifest()?)?;
    if set.is_empty() {
        return Err(Error::EmptySet);
    }
    if matches!(part, PartitionSpec::Semantic { .. }) && set.k_classes() != file.k_classes {
        return Err(Error::Incompatible(format!(
            "result calibrated with {} classes but manifest has {}",
            file.k_classes,
            set.k_classes()
        )));
    }
    Ok((file, part, set))
}

/// Evaluates a stored result on the manifest and writes `report.csv`.
pub fn cmd_evaluate(config: &RunConfig, result: Option<&Path>) -> Result<Vec<ReportRow>> {
    let path = result_path(config, result);
    let (file, part, set) = load_for_apply(config, &path)?;
    let eval = evaluate(&set, &file.result.lambda_hat, &part)?;
    let method = file.result.method.key().to_string();
    let mut rows = vec![ReportRow {
        method: method.clone(),
        organ: "overall".into(),
        risk: Some(eval.risk),
        mean_length: Some(eval.mean_length),
        n_voxels: set.samples().iter().map(|s| s.dim()).sum(),
    }];
    rows.extend(eval.per_organ.iter().map(|o| ReportRow {
        method: method.clone(),
        organ: set.class_name(o.organ),
        risk: o.risk,
        mean_length: o.mean_length,
        n_voxels: o.n_voxels,
    }));

    ensure_dir(&config.out)?;
    write_atomic(&config.out.join(REPORT_CSV), &csv_bytes(&rows)?)?;
    write_record(config, Verb::Evaluate, vec![], None)?;
    Ok(rows)
}

fn csv_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    for row in rows {
        writer.serialize(row)?;
    }
    writer
        .into_inner()
        .map_err(|e| Error::InvalidParameter(format!("csv buffer: {e}")))
}

/// Parses a `report.csv` written by [`cmd_evaluate`].
pub fn read_report(path: impl AsRef<Path>) -> Result<Vec<ReportRow>> {
    let path = path.as_ref();
    let mut reader = csv::Reader::from_path(path)?;
    Ok(reader.deserialize().collect::<std::result::Result<_, _>>()?)
}

fn file_stem(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

/// Writes one interval-length map per sample plus the λ̂ sidecar.
pub fn cmd_export_maps(config: &RunConfig, result: Option<&Path>) -> Result<Vec<PathBuf>> {
    let path = result_path(config, result);
    let (file, part, set) = load_for_apply(config, &path)?;
    let dir = config.out.join("maps");
    ensure_dir(&dir)?;
    let mut written = Vec::with_capacity(set.len());
    for (i, sample) in set.samples().iter().enumerate() {
        let map = length_map(sample, &file.result.lambda_hat, &part)?;
        let target = dir.join(format!("{i:05}_{}.npy", file_stem(&sample.id)));
        let tmp = tmp_sibling(&target);
        save_tensor(&map, &tmp)?;
        std::fs::rename(&tmp, &target).map_err(|e| Error::io(&target, e))?;
        written.push(target);
    }
    write_json(&dir.join("lambda.json"), &file.legend)?;
    write_record(config, Verb::ExportMaps, vec![], None)?;
    Ok(written)
}

#[derive(Debug, Serialize, Deserialize)]
struct ScenarioRow {
    epsilon: f64,
    method: String,
    organ: String,
    risk_mean: Option<f64>,
    risk_std: Option<f64>,
    risk_se: Option<f64>,
    length_mean: Option<f64>,
    length_std: Option<f64>,
    n_trials: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct TrialRow {
    epsilon: f64,
    trial: usize,
    seed: u64,
    method: String,
    cal_risk: f64,
    test_risk: f64,
    test_length: f64,
}

fn summary_text(reports: &[ScenarioReport]) -> String {
    let mut out = String::new();
    for report in reports {
        let _ = writeln!(
            out,
            "epsilon = {:.3}, {} trials\n{:<12} {:>17} {:>24}",
            report.epsilon, report.trials, "procedure", "risk", "length (x1e-2)"
        );
        for s in &report.summary {
            let _ = writeln!(
                out,
                "{:<12} {:>8.3} ± {:<6.3} {:>12.2} ± {:<6.2}",
                s.method.to_string(),
                s.risk.mean,
                s.risk.std,
                s.length.mean * 100.0,
                s.length.std * 100.0
            );
        }
        out.push('\n');
    }
    out
}

/// Runs a scenario file and writes its aggregate and per-trial reports.
pub fn cmd_scenario(config: &RunConfig) -> Result<Vec<ScenarioReport>> {
    let path = config
        .scenario
        .as_deref()
        .ok_or_else(|| Error::InvalidParameter("--config or --scenario must name a scenario file".into()))?;
    let scenario = ScenarioConfig::load_json(path)?;
    let reports = run_scenarios(&scenario)?;

    let mut summary_rows = Vec::new();
    let mut trial_rows = Vec::new();
    for report in &reports {
        for s in &report.summary {
            let overall = ScenarioRow {
                epsilon: report.epsilon,
                method: s.method.key().into(),
                organ: "overall".into(),
                risk_mean: Some(s.risk.mean),
                risk_std: Some(s.risk.std),
                risk_se: Some(s.risk.se),
                length_mean: Some(s.length.mean),
                length_std: Some(s.length.std),
                n_trials: s.risk.n,
            };
            summary_rows.push(overall);
            for o in &s.per_organ {
                summary_rows.push(ScenarioRow {
                    epsilon: report.epsilon,
                    method: s.method.key().into(),
                    organ: o.name.clone(),
                    risk_mean: o.risk.as_ref().map(|r| r.mean),
                    risk_std: o.risk.as_ref().map(|r| r.std),
                    risk_se: o.risk.as_ref().map(|r| r.se),
                    length_mean: o.length.as_ref().map(|r| r.mean),
                    length_std: o.length.as_ref().map(|r| r.std),
                    n_trials: o.risk.as_ref().map_or(0, |r| r.n),
                });
            }
        }
        trial_rows.extend(report.records.iter().map(|r| TrialRow {
            epsilon: report.epsilon,
            trial: r.trial,
            seed: r.seed,
            method: r.method.key().into(),
            cal_risk: r.cal_risk,
            test_risk: r.test_risk,
            test_length: r.test_length,
        }));
    }

    ensure_dir(&config.out)?;
    write_json(&config.out.join("scenario.json"), &reports)?;
    write_atomic(&config.out.join(REPORT_CSV), &csv_bytes(&summary_rows)?)?;
    write_atomic(&config.out.join("trials.csv"), &csv_bytes(&trial_rows)?)?;
    write_atomic(&config.out.join("summary.txt"), summary_text(&reports).as_bytes())?;
    write_record(config, Verb::Scenario, vec![("scenario", scenario.phantom.seed)], Some(&scenario))?;
    Ok(reports)
}
