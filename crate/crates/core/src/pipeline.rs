// SPDX-License-Identifier: Apache-2.0

//! File-to-file operations behind the command-line verbs. Every error is
//! tagged with the stage that produced it.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{self, DatasetFormat, Sample};
use crate::error::{Error, Result, StageExt};
use crate::experiment::{self, ExperimentConfig, McdcSpec, NcSpec, SweepSpec};
use crate::model::Granularity;
use crate::nnw;
use crate::profile::{self, ActivationProfile};
use crate::report::{self, CoverageReport, ModelInfo, ReportMetadata, ReportRow};
use crate::trace::{self, ActivationTrace};

/// Input files for tracing: IDX `[images, labels]` or CIFAR-10 batches.
#[derive(Debug, Clone)]
pub struct DataFiles {
    pub format: DatasetFormat,
    pub files: Vec<PathBuf>,
    pub limit: Option<usize>,
}

impl DataFiles {
    pub fn load(&self) -> Result<Vec<Sample>> {
        let mut samples = match self.format {
            DatasetFormat::Idx => match self.files.as_slice() {
                [images, labels] => dataset::load_idx_dataset(images, labels)?,
                _ => {
                    return Err(Error::Parameter(format!(
                        "IDX input needs an images file and a labels file, got {} file(s)",
                        self.files.len()
                    )))
                }
            },
            DatasetFormat::Cifar10 => {
                if self.files.is_empty() {
                    return Err(Error::Parameter("no CIFAR-10 batch files given".into()));
                }
                let mut all = Vec::new();
                for f in &self.files {
                    all.extend(dataset::load_cifar10(f)?);
                }
                all
            }
        };
        if let Some(limit) = self.limit {
            samples.truncate(limit);
        }
        Ok(samples)
    }
}

/// Runs `data` through the model and writes an `.atrc` file.
pub fn trace_to_file(model: &Path, data: &DataFiles, granularity: Granularity, out: &Path) -> Result<ActivationTrace> {
    let model = nnw::load_model(model).stage("load-model")?;
    let samples = data.load().stage("load-data")?;
    let t = trace::trace_dataset_with(&model, &samples, granularity).stage("trace")?;
    trace::write_trace(&t, out).stage("write-trace")?;
    Ok(t)
}

/// Builds a `k`-bin profile from a training trace and writes an `.aprf` file.
pub fn profile_to_file(training: &Path, k: usize, out: &Path) -> Result<ActivationProfile> {
    let t = trace::read_trace(training).stage("read-trace")?;
    let p = profile::build_profile(&t, k).stage("profile")?;
    profile::write_profile(&p, out).stage("write-profile")?;
    Ok(p)
}

/// What [`cover_files`] should compute. Echoed into the report metadata.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CoverRequest {
    pub sweep: SweepSpec,
    pub nc: NcSpec,
    pub mcdc: McdcSpec,
    pub seed: u64,
}

/// Evaluates metrics on a test trace against a profile. The model is only
/// read when given; MC/DC requires it. `name` labels the report rows.
pub fn cover_files(
    trace_path: &Path,
    profile_path: &Path,
    model: Option<&Path>,
    name: &str,
    req: &CoverRequest,
) -> Result<CoverageReport> {
    let test = trace::read_trace(trace_path).stage("read-trace")?;
    let prof = profile::read_profile(profile_path).stage("read-profile")?;
    let model = model.map(nnw::load_model).transpose().stage("load-model")?;
    prof.check_compatible(&test).stage("check")?;
    if let Some(m) = &model {
        if m.fingerprint() != test.model_fingerprint() {
            return Err(Error::FingerprintMismatch {
                expected: m.fingerprint().to_string(),
                found: test.model_fingerprint().to_string(),
            })
            .stage("check");
        }
    }
    if req.sweep == SweepSpec::default() {
        return Err(Error::Parameter("no metrics requested".into())).stage("metrics");
    }
    let results =
        experiment::evaluate(&req.sweep, &req.nc, &req.mcdc, req.seed, model.as_ref(), &test, &prof).stage("metrics")?;
    let layers = test.layer_widths().len();
    let timestamp = experiment::default_timestamp();
    Ok(CoverageReport {
        metadata: ReportMetadata {
            tool: format!("dnncov {}", env!("CARGO_PKG_VERSION")),
            timestamp,
            dataset: trace_path.display().to_string(),
            train_records: 0,
            test_records: test.len(),
            models: vec![ModelInfo {
                name: name.to_string(),
                layers,
                neurons: test.neuron_count(),
                fingerprint: test.model_fingerprint().to_string(),
            }],
            config: toml::to_string(req).expect("request serializes"),
        },
        rows: results.into_iter().map(|r| ReportRow::from_result(r, name, layers)).collect(),
    })
}

/// Loads a config, applies an optional output directory override, runs the
/// experiment and writes every report rendering. Nothing is written to the
/// report files unless the whole run succeeds.
pub fn experiment_to_dir(config: &Path, output_dir: Option<&Path>) -> Result<(CoverageReport, Vec<PathBuf>)> {
    let (mut cfg, base) = ExperimentConfig::load(config).stage("load-config")?;
    if let Some(dir) = output_dir {
        cfg.output_dir = dir.to_path_buf();
    }
    let report = experiment::run_experiment(&cfg, &base)?;
    let out = experiment::resolve(&base, &cfg.output_dir);
    let written = report::emit_all(&report, &out).stage("write-report")?;
    Ok((report, written))
}

/// Re-renders the plot CSVs of a saved JSON report.
pub fn export_plot_data(report_json: &Path, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let text = std::fs::read_to_string(report_json)
        .map_err(|e| Error::io(report_json, e))
        .stage("read-report")?;
    let report = CoverageReport::from_json(&text).stage("read-report")?;
    report::export_plot_data(&report, out_dir).stage("export")
}
