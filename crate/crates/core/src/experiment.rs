// SPDX-License-Identifier: Apache-2.0

//! Config-driven experiment runner.
//!
//! For every model: trace the training split, build the activation profile,
//! trace the test split, then evaluate every requested (metric, parameter)
//! cell. Traces and profiles are cached in `<output_dir>/cache`, keyed by
//! the model fingerprint and the dataset content hash.
//!
//! The config is TOML. Relative paths are resolved against the directory
//! holding the config file. Every default is written back into the report
//! metadata so a report fully describes how it was produced.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{self, DatasetFormat, Sample};
use crate::error::{Error, Result, StageExt};
use crate::fingerprint;
use crate::mcdc::{self, Isolation, McdcConfig, McdcVariant, SignSource};
use crate::metrics::{self, CoverageResult, Normalization, Quantifier};
use crate::model::{Granularity, NetworkModel};
use crate::nnw;
use crate::profile::{self, ActivationProfile};
use crate::report::{CoverageReport, ModelInfo, ReportMetadata, ReportRow};
use crate::trace::{self, ActivationTrace, SubsetMode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    pub output_dir: PathBuf,
    #[serde(default = "default_profile_k")]
    pub profile_k: usize,
    #[serde(default)]
    pub granularity: Granularity,
    /// Report timestamp. Defaults to `SOURCE_DATE_EPOCH`, else the Unix
    /// epoch, so that reruns produce identical bytes.
    #[serde(default)]
    pub timestamp: Option<String>,
    pub models: Vec<ModelEntry>,
    pub dataset: DatasetSpec,
    pub sweep: SweepSpec,
    #[serde(default)]
    pub nc: NcSpec,
    #[serde(default)]
    pub mcdc: McdcSpec,
}

fn default_profile_k() -> usize {
    1000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelEntry {
    pub name: String,
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    #[serde(default = "default_dataset_name")]
    pub name: String,
    #[serde(default)]
    pub format: DatasetFormat,
    /// IDX: `[images, labels]`. CIFAR-10: one or more batch files.
    pub train: Vec<PathBuf>,
    pub test: Vec<PathBuf>,
    #[serde(default)]
    pub train_limit: Option<usize>,
    #[serde(default)]
    pub test_limit: Option<usize>,
}

fn default_dataset_name() -> String {
    "dataset".into()
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub nc_thresholds: Option<Vec<f64>>,
    pub kmnc_k: Option<Vec<usize>>,
    /// Boundary distances for NBC, in multiples of `τ`.
    pub nbc_epsilons: Option<Vec<f64>>,
    pub snac_epsilons: Option<Vec<f64>>,
    pub topk: Option<Vec<usize>>,
    pub mcdc_variants: Option<Vec<McdcVariant>>,
    pub mcdc_sizes: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NcSpec {
    #[serde(default)]
    pub quantifier: Quantifier,
    #[serde(default)]
    pub normalization: Normalization,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct McdcSpec {
    pub sign_source: SignSource,
    pub value_threshold: f64,
    pub isolation: Isolation,
    pub max_pairs_per_layer: Option<usize>,
    pub subset_mode: SubsetMode,
}

impl Default for McdcSpec {
    fn default() -> Self {
        let d = McdcConfig::default();
        Self {
            sign_source: d.sign_source,
            value_threshold: d.value_threshold,
            isolation: d.isolation,
            max_pairs_per_layer: d.max_pairs_per_layer,
            subset_mode: SubsetMode::Nested,
        }
    }
}

impl McdcSpec {
    pub fn engine_config(&self, seed: u64) -> McdcConfig {
        McdcConfig {
            variant: McdcVariant::Ss,
            sign_source: self.sign_source,
            value_threshold: self.value_threshold,
            isolation: self.isolation,
            max_pairs_per_layer: self.max_pairs_per_layer,
            sample_seed: seed,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Parses a config file; relative paths are kept as written and resolved
    /// against `base_dir` at run time.
    pub fn load(path: impl AsRef<Path>) -> Result<(Self, PathBuf)> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg = Self::from_toml(&text)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((cfg, base))
    }

    /// Serialized form with every default filled in.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Checks everything that can be checked without reading datasets.
    pub fn validate(&self, base_dir: &Path) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.models.is_empty() {
            return fail("no models listed".into());
        }
        if self.profile_k == 0 {
            return fail("profile_k must be at least 1".into());
        }
        for m in &self.models {
            let p = resolve(base_dir, &m.path);
            if !p.is_file() {
                return fail(format!("model {:?}: {} does not exist", m.name, p.display()));
            }
        }
        let mut names: Vec<&str> = self.models.iter().map(|m| m.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return fail("model names must be unique".into());
        }
        let want_files = match self.dataset.format {
            DatasetFormat::Idx => Some(2),
            DatasetFormat::Cifar10 => None,
        };
        for (split, files) in [("train", &self.dataset.train), ("test", &self.dataset.test)] {
            if files.is_empty() || want_files.is_some_and(|n| n != files.len()) {
                return fail(format!(
                    "dataset.{split}: expected {} file(s)",
                    want_files.map_or("one or more".to_string(), |n| n.to_string())
                ));
            }
            for f in files {
                let p = resolve(base_dir, f);
                if !p.is_file() {
                    return fail(format!("dataset.{split}: {} does not exist", p.display()));
                }
            }
        }
        if self.dataset.train_limit == Some(0) || self.dataset.test_limit == Some(0) {
            return fail("dataset limits must be positive".into());
        }

        let s = &self.sweep;
        let lists: [(&str, Option<usize>); 7] = [
            ("nc_thresholds", s.nc_thresholds.as_ref().map(Vec::len)),
            ("kmnc_k", s.kmnc_k.as_ref().map(Vec::len)),
            ("nbc_epsilons", s.nbc_epsilons.as_ref().map(Vec::len)),
            ("snac_epsilons", s.snac_epsilons.as_ref().map(Vec::len)),
            ("topk", s.topk.as_ref().map(Vec::len)),
            ("mcdc_variants", s.mcdc_variants.as_ref().map(Vec::len)),
            ("mcdc_sizes", s.mcdc_sizes.as_ref().map(Vec::len)),
        ];
        if let Some((name, _)) = lists.iter().find(|(_, len)| *len == Some(0)) {
            return fail(format!("sweep.{name} is empty"));
        }
        if lists.iter().all(|(_, len)| len.is_none()) {
            return fail("sweep requests no metrics".into());
        }
        if s.mcdc_variants.is_some() != s.mcdc_sizes.is_some() {
            return fail("sweep.mcdc_variants and sweep.mcdc_sizes go together".into());
        }
        let non_finite = |v: &Option<Vec<f64>>| v.iter().flatten().any(|x| !x.is_finite());
        if non_finite(&s.nc_thresholds) || non_finite(&s.nbc_epsilons) || non_finite(&s.snac_epsilons) {
            return fail("sweep values must be finite".into());
        }
        if s.kmnc_k.iter().flatten().any(|k| *k == 0) || s.topk.iter().flatten().any(|k| *k == 0) {
            return fail("k values must be at least 1".into());
        }
        if s.mcdc_sizes.iter().flatten().any(|n| *n == 0) {
            return fail("MC/DC dataset sizes must be positive".into());
        }
        self.mcdc
            .engine_config(self.seed)
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }
}

pub fn resolve(base_dir: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base_dir.join(p)
    }
}

/// A loaded split with the hash of its source files.
pub struct Split {
    pub samples: Vec<Sample>,
    pub digest: String,
}

fn load_split(format: DatasetFormat, files: &[PathBuf], limit: Option<usize>) -> Result<Split> {
    let mut samples = match format {
        DatasetFormat::Idx => dataset::load_idx_dataset(&files[0], &files[1])?,
        DatasetFormat::Cifar10 => {
            let mut all = Vec::new();
            for f in files {
                all.extend(dataset::load_cifar10(f)?);
            }
            all
        }
    };
    let mut parts = Vec::new();
    for f in files {
        let bytes = std::fs::read(f).map_err(|e| Error::io(f, e))?;
        parts.push(fingerprint::of_bytes(&bytes));
    }
    if let Some(limit) = limit {
        samples.truncate(limit);
    }
    parts.push(format!("limit={}", samples.len()));
    Ok(Split {
        samples,
        digest: fingerprint::of_bytes(parts.join("|").as_bytes()),
    })
}

/// Loads a cached trace or produces and caches it.
fn cached_trace(
    dir: &Path,
    tag: &str,
    model: &NetworkModel,
    split: &Split,
    granularity: Granularity,
) -> Result<ActivationTrace> {
    let key = fingerprint::of_bytes(format!("{}|{}|{granularity:?}", model.fingerprint(), split.digest).as_bytes());
    let path = dir.join(format!("{tag}-{}.atrc", fingerprint::short(&key)));
    if path.is_file() {
        if let Ok(t) = trace::read_trace(&path) {
            if t.model_fingerprint() == model.fingerprint() && t.len() == split.samples.len() {
                return Ok(t);
            }
        }
    }
    let t = trace::trace_dataset_with(model, &split.samples, granularity)?;
    trace::write_trace(&t, &path)?;
    Ok(t)
}

fn cached_profile(dir: &Path, train: &ActivationTrace, train_digest: &str, k: usize) -> Result<ActivationProfile> {
    let key = fingerprint::of_bytes(format!("{}|{train_digest}", train.model_fingerprint()).as_bytes());
    let path = dir.join(format!("profile-{}-k{k}.aprf", fingerprint::short(&key)));
    if path.is_file() {
        if let Ok(p) = profile::read_profile(&path) {
            if p.check_compatible(train).is_ok() && p.k() == k {
                return Ok(p);
            }
        }
    }
    let p = profile::build_profile(train, k)?;
    profile::write_profile(&p, &path)?;
    Ok(p)
}

fn report_timestamp(cfg: &ExperimentConfig) -> String {
    cfg.timestamp.clone().unwrap_or_else(default_timestamp)
}

/// `SOURCE_DATE_EPOCH` as RFC 3339, or the Unix epoch when unset.
pub fn default_timestamp() -> String {
    let secs = std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|s| s.trim().parse::<i64>().ok())
        .unwrap_or(0);
    chrono::DateTime::from_timestamp(secs, 0)
        .unwrap_or_default()
        .format("%Y-%m-%dT%H:%M:%SZ")
        .to_string()
}

/// Computes every requested cell for one model, in config order.
pub fn evaluate_model(
    cfg: &ExperimentConfig,
    model: &NetworkModel,
    test: &ActivationTrace,
    profile: &ActivationProfile,
) -> Result<Vec<CoverageResult>> {
    evaluate(&cfg.sweep, &cfg.nc, &cfg.mcdc, cfg.seed, Some(model), test, profile)
}

/// Computes the cells of `sweep` on `test`. MC/DC needs `model`; without
/// `mcdc_sizes` it runs on the whole trace.
pub fn evaluate(
    sweep: &SweepSpec,
    nc: &NcSpec,
    mcdc_spec: &McdcSpec,
    seed: u64,
    model: Option<&NetworkModel>,
    test: &ActivationTrace,
    profile: &ActivationProfile,
) -> Result<Vec<CoverageResult>> {
    let s = sweep;
    let mut out = Vec::new();
    for t in s.nc_thresholds.iter().flatten() {
        out.push(metrics::nc(test, *t, nc.quantifier, nc.normalization)?);
    }
    for k in s.kmnc_k.iter().flatten() {
        out.push(metrics::kmnc(test, &profile.with_k(*k)?)?);
    }
    for e in s.nbc_epsilons.iter().flatten() {
        out.push(metrics::nbc(test, profile, *e)?);
    }
    for e in s.snac_epsilons.iter().flatten() {
        out.push(metrics::snac(test, profile, *e)?);
    }
    for k in s.topk.iter().flatten() {
        out.push(metrics::topknc(test, *k)?);
    }
    if let Some(variants) = &s.mcdc_variants {
        let model = model.ok_or_else(|| Error::Parameter("MC/DC needs the model".into()))?;
        let engine = mcdc_spec.engine_config(seed);
        let whole = [test.len()];
        let sizes = s.mcdc_sizes.as_deref().unwrap_or(&whole);
        let mut by_size = Vec::with_capacity(sizes.len());
        for size in sizes {
            let sub = trace::subset_with(test, *size, seed, mcdc_spec.subset_mode)?;
            by_size.push(mcdc::mcdc_coverage_variants(&sub, model, profile, &engine, variants)?);
        }
        for v in 0..variants.len() {
            for results in &by_size {
                out.push(results[v].clone());
            }
        }
    }
    Ok(out)
}

/// Runs the full pipeline. `base_dir` anchors relative paths.
pub fn run_experiment(cfg: &ExperimentConfig, base_dir: &Path) -> Result<CoverageReport> {
    cfg.validate(base_dir).stage("validate")?;
    let out_dir = resolve(base_dir, &cfg.output_dir);
    let cache = out_dir.join("cache");
    std::fs::create_dir_all(&cache)
        .map_err(|e| Error::io(&cache, e))
        .stage("setup")?;

    let files = |v: &[PathBuf]| v.iter().map(|p| resolve(base_dir, p)).collect::<Vec<_>>();
    let train = load_split(cfg.dataset.format, &files(&cfg.dataset.train), cfg.dataset.train_limit)
        .stage("load-train-data")?;
    let test = load_split(cfg.dataset.format, &files(&cfg.dataset.test), cfg.dataset.test_limit)
        .stage("load-test-data")?;
    if let Some(max) = cfg.sweep.mcdc_sizes.iter().flatten().max() {
        if *max > test.samples.len() {
            return Err(Error::Config(format!(
                "MC/DC size {max} exceeds the {} available test records",
                test.samples.len()
            ))
            .in_stage("validate"));
        }
    }

    let mut rows = Vec::new();
    let mut models = Vec::new();
    for entry in &cfg.models {
        let model = nnw::load_model(resolve(base_dir, &entry.path)).stage("load-model")?;
        let train_trace = cached_trace(&cache, "train", &model, &train, cfg.granularity).stage("trace-train")?;
        let profile = cached_profile(&cache, &train_trace, &train.digest, cfg.profile_k).stage("profile")?;
        let test_trace = cached_trace(&cache, "test", &model, &test, cfg.granularity).stage("trace-test")?;
        let results = evaluate_model(cfg, &model, &test_trace, &profile).stage("metrics")?;

        let layers = model.layer_count();
        rows.extend(results.into_iter().map(|r| ReportRow::from_result(r, &entry.name, layers)));
        models.push(ModelInfo {
            name: entry.name.clone(),
            layers,
            neurons: test_trace.neuron_count(),
            fingerprint: model.fingerprint().to_string(),
        });
    }

    let mut echoed = cfg.clone();
    echoed.timestamp = Some(report_timestamp(cfg));
    Ok(CoverageReport {
        metadata: ReportMetadata {
            tool: format!("dnncov {}", env!("CARGO_PKG_VERSION")),
            timestamp: echoed.timestamp.clone().unwrap_or_default(),
            dataset: cfg.dataset.name.clone(),
            train_records: train.samples.len(),
            test_records: test.samples.len(),
            models,
            config: echoed.to_toml(),
        },
        rows,
    })
}
