// SPDX-License-Identifier: Apache-2.0

//! Coverage testing for small feed-forward neural networks.
//!
//! The pipeline is: load a network ([`nnw`]), run inputs through it to get
//! an [`ActivationTrace`], learn each neuron's functional range from a
//! training trace ([`profile`]), then measure a test trace with the
//! neuron-level [`metrics`] (NC, KMNC, NBC, SNAC, TopKNC) and the
//! pair-level [`mcdc`] variants (SS, SV, VS, VV). [`experiment`] drives
//! parameter sweeps, [`report`] renders the results and [`pipeline`]
//! wraps the file-level steps with stage-tagged errors.

pub mod dataset;
pub mod error;
pub mod experiment;
pub mod fingerprint;
pub mod mcdc;
pub mod metrics;
pub mod model;
pub mod nnw;
pub mod pipeline;
pub mod profile;
pub mod report;
pub mod trace;

mod codec;

pub use dataset::{load_cifar10, load_idx_dataset, Sample};
pub use error::{Error, Result};
pub use mcdc::{enumerate_pairs, mcdc_coverage, McdcConfig, McdcVariant, NeuronPair};
pub use metrics::{kmnc, nbc, nc, snac, topknc, CoverageConfig, CoverageResult, Metric, Normalization, Quantifier};
pub use model::{Granularity, LayerSpec, NetworkModel, NeuronId, Tensor};
pub use nnw::load_model;
pub use profile::{build_profile, ActivationProfile, Bin};
pub use trace::{read_trace, subset, trace_dataset, write_trace, ActivationTrace, InputRecord};
