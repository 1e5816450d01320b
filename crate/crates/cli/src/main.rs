// SPDX-License-Identifier: Apache-2.0

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dnncov::dataset::DatasetFormat;
use dnncov::experiment::{McdcSpec, NcSpec, SweepSpec};
use dnncov::mcdc::{Isolation, SignSource};
use dnncov::pipeline::{self, CoverRequest, DataFiles};
use dnncov::report::{self, ReportFormat};
use dnncov::trace::SubsetMode;
use dnncov::{Granularity, McdcVariant, Normalization, Quantifier};

const OUTPUT_ENV: &str = "DNNCOV_OUTPUT_DIR";

/// Coverage metrics for feed-forward neural networks.
#[derive(Parser)]
#[command(name = "dnncov", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a dataset through a model and write an .atrc trace.
    Trace(TraceArgs),
    /// Build an .aprf activation profile from a training trace.
    Profile(ProfileArgs),
    /// Compute coverage metrics for a test trace.
    Cover(CoverArgs),
    /// Run a full experiment from a TOML config.
    Experiment(ExperimentArgs),
    /// Write per-metric plot CSVs from a JSON report.
    ExportPlotdata(ExportArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum GranularityArg {
    Channel,
    Element,
}

#[derive(Clone, Copy, ValueEnum)]
enum QuantifierArg {
    Exists,
    Forall,
}

#[derive(Clone, Copy, ValueEnum)]
enum NormalizationArg {
    Raw,
    LayerMinmax,
}

#[derive(Clone, Copy, ValueEnum)]
enum SignSourceArg {
    Pre,
    Post,
}

#[derive(Clone, Copy, ValueEnum)]
enum IsolationArg {
    Strict,
    Relaxed,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Markdown,
    Json,
}

#[derive(Args)]
struct TraceArgs {
    /// Model weights (.nnw).
    #[arg(long)]
    model: PathBuf,
    /// IDX image file (optionally gzip-compressed).
    #[arg(long, requires = "labels", conflicts_with = "cifar")]
    images: Option<PathBuf>,
    /// IDX label file.
    #[arg(long, requires = "images")]
    labels: Option<PathBuf>,
    /// CIFAR-10 binary batch files.
    #[arg(long, num_args = 1..)]
    cifar: Vec<PathBuf>,
    /// Use only the first N inputs.
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long, value_enum, default_value = "channel")]
    granularity: GranularityArg,
    /// Output trace (.atrc).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ProfileArgs {
    /// Training trace (.atrc).
    #[arg(long)]
    trace: PathBuf,
    /// Number of bins per neuron.
    #[arg(long, default_value_t = 1000)]
    k: usize,
    /// Output profile (.aprf).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CoverArgs {
    /// Test trace (.atrc).
    #[arg(long)]
    trace: PathBuf,
    /// Profile (.aprf) built from the training trace.
    #[arg(long)]
    profile: PathBuf,
    /// Model weights; required for MC/DC.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Model label used in the report.
    #[arg(long, default_value = "model")]
    name: String,
    /// NC thresholds.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    nc: Vec<f64>,
    /// KMNC bin counts.
    #[arg(long, value_delimiter = ',')]
    kmnc: Vec<usize>,
    /// NBC boundary distances in units of tau.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    nbc: Vec<f64>,
    /// SNAC boundary distances in units of tau.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    snac: Vec<f64>,
    /// TopKNC k values.
    #[arg(long, value_delimiter = ',')]
    topk: Vec<usize>,
    /// MC/DC variants (SS, SV, VS, VV).
    #[arg(long, value_delimiter = ',')]
    mcdc: Vec<McdcVariant>,
    /// Nested subset sizes for MC/DC; defaults to the whole trace.
    #[arg(long, value_delimiter = ',')]
    mcdc_sizes: Vec<usize>,
    #[arg(long, value_enum, default_value = "exists")]
    quantifier: QuantifierArg,
    #[arg(long, value_enum, default_value = "layer-minmax")]
    normalization: NormalizationArg,
    #[arg(long, value_enum, default_value = "pre")]
    sign_source: SignSourceArg,
    /// MC/DC value-change threshold h, in units of tau.
    #[arg(long, default_value_t = 0.5)]
    value_threshold: f64,
    #[arg(long, value_enum, default_value = "strict")]
    isolation: IsolationArg,
    /// Sample at most this many pairs per layer boundary.
    #[arg(long)]
    max_pairs: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "csv")]
    format: FormatArg,
    /// Directory for report files; prints to stdout when absent.
    #[arg(long, env = OUTPUT_ENV)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExperimentArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's output_dir.
    #[arg(long, env = OUTPUT_ENV)]
    output_dir: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    /// report.json written by `experiment` or `cover --format json`.
    #[arg(long)]
    report: PathBuf,
    /// Directory for plot_<metric>.csv files.
    #[arg(long)]
    out: PathBuf,
}

fn some<T>(v: Vec<T>) -> Option<Vec<T>> {
    (!v.is_empty()).then_some(v)
}

impl CoverArgs {
    fn request(&self) -> CoverRequest {
        CoverRequest {
            sweep: SweepSpec {
                nc_thresholds: some(self.nc.clone()),
                kmnc_k: some(self.kmnc.clone()),
                nbc_epsilons: some(self.nbc.clone()),
                snac_epsilons: some(self.snac.clone()),
                topk: some(self.topk.clone()),
                mcdc_variants: some(self.mcdc.clone()),
                mcdc_sizes: some(self.mcdc_sizes.clone()),
            },
            nc: NcSpec {
                quantifier: match self.quantifier {
                    QuantifierArg::Exists => Quantifier::Exists,
                    QuantifierArg::Forall => Quantifier::Forall,
                },
                normalization: match self.normalization {
                    NormalizationArg::Raw => Normalization::Raw,
                    NormalizationArg::LayerMinmax => Normalization::LayerMinmax,
                },
            },
            mcdc: McdcSpec {
                sign_source: match self.sign_source {
                    SignSourceArg::Pre => SignSource::PreActivation,
                    SignSourceArg::Post => SignSource::PostActivation,
                },
                value_threshold: self.value_threshold,
                isolation: match self.isolation {
                    IsolationArg::Strict => Isolation::Strict,
                    IsolationArg::Relaxed => Isolation::Relaxed,
                },
                max_pairs_per_layer: self.max_pairs,
                subset_mode: SubsetMode::Nested,
            },
            seed: self.seed,
        }
    }
}

fn run(cli: Cli) -> dnncov::Result<()> {
    match cli.command {
        Command::Trace(a) => {
            let data = match (a.images, a.labels) {
                (Some(images), Some(labels)) => DataFiles {
                    format: DatasetFormat::Idx,
                    files: vec![images, labels],
                    limit: a.limit,
                },
                _ => DataFiles {
                    format: DatasetFormat::Cifar10,
                    files: a.cifar,
                    limit: a.limit,
                },
            };
            let granularity = match a.granularity {
                GranularityArg::Channel => Granularity::Channel,
                GranularityArg::Element => Granularity::Element,
            };
            let t = pipeline::trace_to_file(&a.model, &data, granularity, &a.out)?;
            eprintln!(
                "wrote {} ({} records, {} neurons)",
                a.out.display(),
                t.len(),
                t.neuron_count()
            );
        }
        Command::Profile(a) => {
            let p = pipeline::profile_to_file(&a.trace, a.k, &a.out)?;
            eprintln!("wrote {} ({} neurons, k={})", a.out.display(), p.neuron_count(), p.k());
        }
        Command::Cover(a) => {
            let report = pipeline::cover_files(&a.trace, &a.profile, a.model.as_deref(), &a.name, &a.request())?;
            let format = match a.format {
                FormatArg::Csv => ReportFormat::Csv,
                FormatArg::Markdown => ReportFormat::Markdown,
                FormatArg::Json => ReportFormat::Json,
            };
            match &a.out {
                Some(dir) => {
                    std::fs::create_dir_all(dir).map_err(|e| dnncov::Error::Io {
                        path: dir.clone(),
                        source: e,
                    })?;
                    let path = report::emit_report(&report, format, dir).map_err(|e| e.in_stage("write-report"))?;
                    eprintln!("wrote {}", path.display());
                }
                None => match format {
                    ReportFormat::Csv => print!("{}", report.to_csv()?),
                    ReportFormat::Markdown => print!("{}", report.to_markdown()),
                    ReportFormat::Json => print!("{}", report.to_json()),
                },
            }
        }
        Command::Experiment(a) => {
            let (report, written) = pipeline::experiment_to_dir(&a.config, a.output_dir.as_deref())?;
            for p in &written {
                eprintln!("wrote {}", p.display());
            }
            eprintln!("{} rows for {} model(s)", report.rows.len(), report.metadata.models.len());
        }
        Command::ExportPlotdata(a) => {
            for p in pipeline::export_plot_data(&a.report, &a.out)? {
                eprintln!("wrote {}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
