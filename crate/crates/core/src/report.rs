// SPDX-License-Identifier: Apache-2.0

//! Coverage reports and their CSV / Markdown / JSON / plot-data renderings.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{CoverageResult, Metric};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub name: String,
    pub layers: usize,
    pub neurons: usize,
    pub fingerprint: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub tool: String,
    pub timestamp: String,
    pub dataset: String,
    pub train_records: usize,
    pub test_records: usize,
    pub models: Vec<ModelInfo>,
    /// The effective configuration, defaults included, as TOML.
    pub config: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub metric: Metric,
    pub parameter: String,
    pub model: String,
    pub layers: usize,
    pub covered: u64,
    pub domain: u64,
    pub ratio: f64,
}

impl ReportRow {
    pub fn from_result(r: CoverageResult, model: &str, layers: usize) -> Self {
        Self {
            metric: r.metric,
            parameter: r.parameter,
            model: model.to_string(),
            layers,
            covered: r.covered,
            domain: r.domain,
            ratio: r.ratio,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub metadata: ReportMetadata,
    pub rows: Vec<ReportRow>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Markdown,
    Json,
}

impl ReportFormat {
    pub fn file_name(self) -> &'static str {
        match self {
            ReportFormat::Csv => "report.csv",
            ReportFormat::Markdown => "report.md",
            ReportFormat::Json => "report.json",
        }
    }
}

pub fn format_ratio(r: f64) -> String {
    format!("{r:.4}")
}

/// Keys in first-appearance order.
fn ordered<'a>(items: impl Iterator<Item = &'a str>) -> Vec<&'a str> {
    let mut seen = Vec::new();
    for it in items {
        if !seen.contains(&it) {
            seen.push(it);
        }
    }
    seen
}

type Matrix<'a> = (Vec<&'a str>, Vec<&'a str>, BTreeMap<(&'a str, &'a str), &'a ReportRow>);

impl CoverageReport {
    fn metrics(&self) -> Vec<Metric> {
        let mut out = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.metric) {
                out.push(r.metric);
            }
        }
        out
    }

    /// `(parameters, models, cell lookup)` for one metric.
    fn matrix(&self, metric: Metric) -> Matrix<'_> {
        let rows: Vec<&ReportRow> = self.rows.iter().filter(|r| r.metric == metric).collect();
        let params = ordered(rows.iter().map(|r| r.parameter.as_str()));
        let models = ordered(rows.iter().map(|r| r.model.as_str()));
        let cells = rows
            .iter()
            .map(|r| ((r.parameter.as_str(), r.model.as_str()), *r))
            .collect();
        (params, models, cells)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let io = |e: csv::Error| Error::Validation(format!("csv: {e}"));
        w.write_record(["metric", "parameter", "model", "layers", "covered", "domain", "ratio"])
            .map_err(io)?;
        for r in &self.rows {
            w.write_record([
                r.metric.to_string(),
                r.parameter.clone(),
                r.model.clone(),
                r.layers.to_string(),
                r.covered.to_string(),
                r.domain.to_string(),
                format_ratio(r.ratio),
            ])
            .map_err(io)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Validation(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    /// One parameter-by-model table per metric.
    pub fn to_markdown(&self) -> String {
        let m = &self.metadata;
        let mut out = String::new();
        out.push_str("# Coverage report\n\n");
        out.push_str(&format!("- tool: {}\n", m.tool));
        out.push_str(&format!("- timestamp: {}\n", m.timestamp));
        out.push_str(&format!(
            "- dataset: {} ({} train / {} test records)\n",
            m.dataset, m.train_records, m.test_records
        ));
        for info in &m.models {
            out.push_str(&format!(
                "- model {}: {} layers, {} neurons, fingerprint {}\n",
                info.name,
                info.layers,
                info.neurons,
                crate::fingerprint::short(&info.fingerprint)
            ));
        }
        for metric in self.metrics() {
            let (params, models, cells) = self.matrix(metric);
            let layers = |name: &str| self.rows.iter().find(|r| r.model == name).map_or(0, |r| r.layers);
            out.push_str(&format!("\n## {metric}\n\n| Parameter |"));
            for model in &models {
                out.push_str(&format!(" {model} ({} layers) |", layers(model)));
            }
            out.push_str("\n|---|");
            out.push_str(&"---:|".repeat(models.len()));
            out.push('\n');
            for p in &params {
                out.push_str(&format!("| {p} |"));
                for model in &models {
                    let cell = cells.get(&(*p, *model)).map_or("-".to_string(), |r| format_ratio(r.ratio));
                    out.push_str(&format!(" {cell} |"));
                }
                out.push('\n');
            }
        }
        out.push_str("\n## Configuration\n\n```toml\n");
        out.push_str(&m.config);
        out.push_str("```\n");
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format(format!("report json: {e}")))
    }

    /// Plot series per metric: `(file stem, csv text)`, one column per model.
    pub fn plot_data(&self) -> Vec<(String, String)> {
        self.metrics()
            .into_iter()
            .map(|metric| {
                let (params, models, cells) = self.matrix(metric);
                let mut text = String::from("parameter");
                for m in &models {
                    text.push(',');
                    text.push_str(&csv_field(m));
                }
                text.push('\n');
                for p in &params {
                    text.push_str(&csv_field(p));
                    for m in &models {
                        text.push(',');
                        if let Some(r) = cells.get(&(*p, *m)) {
                            text.push_str(&format_ratio(r.ratio));
                        }
                    }
                    text.push('\n');
                }
                (format!("plot_{}", slug(metric)), text)
            })
            .collect()
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn slug(metric: Metric) -> String {
    metric
        .to_string()
        .to_ascii_lowercase()
        .replace('(', "_")
        .replace(')', "")
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn ensure_rows(report: &CoverageReport) -> Result<()> {
    if report.rows.is_empty() {
        return Err(Error::Validation("report has no rows".into()));
    }
    if let Some(r) = report.rows.iter().find(|r| !(0.0..=1.0).contains(&r.ratio)) {
        return Err(Error::Validation(format!(
            "{} {} for {}: ratio {} outside [0, 1]",
            r.metric, r.parameter, r.model, r.ratio
        )));
    }
    Ok(())
}

/// Writes one rendering of `report` into `dir` and returns its path.
pub fn emit_report(report: &CoverageReport, format: ReportFormat, dir: impl AsRef<Path>) -> Result<PathBuf> {
    ensure_rows(report)?;
    let path = dir.as_ref().join(format.file_name());
    let text = match format {
        ReportFormat::Csv => report.to_csv()?,
        ReportFormat::Markdown => report.to_markdown(),
        ReportFormat::Json => report.to_json(),
    };
    write_file(&path, &text)?;
    Ok(path)
}

/// Writes the per-metric plot CSVs into `dir`.
pub fn export_plot_data(report: &CoverageReport, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    ensure_rows(report)?;
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    report
        .plot_data()
        .into_iter()
        .map(|(stem, text)| {
            let path = dir.join(format!("{stem}.csv"));
            write_file(&path, &text)?;
            Ok(path)
        })
        .collect()
}

/// CSV, Markdown and JSON reports plus plot data under `dir/plots`.
pub fn emit_all(report: &CoverageReport, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    ensure_rows(report)?;
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    for f in [ReportFormat::Csv, ReportFormat::Markdown, ReportFormat::Json] {
        written.push(emit_report(report, f, dir)?);
    }
    written.extend(export_plot_data(report, dir.join("plots"))?);
    Ok(written)
}
