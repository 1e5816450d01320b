// SPDX-License-Identifier: Apache-2.0

//! Neuron-level coverage metrics over an activation trace.
//!
//! All metrics use set semantics: a neuron (or bin, or corner) counts once
//! no matter how many inputs reach it. Every result keeps the exact
//! `covered / domain` counts next to the ratio.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mcdc::McdcVariant;
use crate::profile::{ActivationProfile, Bin};
use crate::trace::ActivationTrace;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Metric {
    Nc,
    Kmnc,
    Nbc,
    Snac,
    TopkNc,
    Mcdc(McdcVariant),
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Metric::Nc => f.write_str("NC"),
            Metric::Kmnc => f.write_str("KMNC"),
            Metric::Nbc => f.write_str("NBC"),
            Metric::Snac => f.write_str("SNAC"),
            Metric::TopkNc => f.write_str("TopKNC"),
            Metric::Mcdc(v) => write!(f, "MCDC({v})"),
        }
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let m = match s.to_ascii_uppercase().as_str() {
            "NC" => Metric::Nc,
            "KMNC" => Metric::Kmnc,
            "NBC" => Metric::Nbc,
            "SNAC" => Metric::Snac,
            "TOPKNC" => Metric::TopkNc,
            other => {
                let inner = other
                    .strip_prefix("MCDC(")
                    .and_then(|r| r.strip_suffix(')'))
                    .ok_or_else(|| Error::Parameter(format!("unknown metric {s:?}")))?;
                Metric::Mcdc(inner.parse()?)
            }
        };
        Ok(m)
    }
}

impl Serialize for Metric {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Metric {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Whether NC needs one input above the threshold or all of them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Quantifier {
    #[default]
    Exists,
    Forall,
}

/// How activations are scaled before comparison with the NC threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    Raw,
    /// Per record and layer, rescale to `[0, 1]`; constant layers map to 0.
    #[default]
    LayerMinmax,
}

/// Metric parameters. `epsilon` is in multiples of each neuron's `τ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageConfig {
    pub nc_threshold: f64,
    pub nc_quantifier: Quantifier,
    pub nc_normalization: Normalization,
    pub k: usize,
    pub epsilon: f64,
    pub topk: usize,
}

impl Default for CoverageConfig {
    fn default() -> Self {
        Self {
            nc_threshold: 0.5,
            nc_quantifier: Quantifier::Exists,
            nc_normalization: Normalization::LayerMinmax,
            k: 1000,
            epsilon: 0.0,
            topk: 1,
        }
    }
}

impl CoverageConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Parameter("k must be at least 1".into()));
        }
        if self.topk == 0 {
            return Err(Error::Parameter("top-k must be at least 1".into()));
        }
        if !self.nc_threshold.is_finite() || !self.epsilon.is_finite() {
            return Err(Error::Parameter("threshold and epsilon must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageResult {
    pub metric: Metric,
    pub parameter: String,
    pub covered: u64,
    pub domain: u64,
    pub ratio: f64,
}

impl CoverageResult {
    pub fn new(metric: Metric, parameter: impl Into<String>, covered: usize, domain: usize) -> Self {
        debug_assert!(covered <= domain);
        let ratio = if domain == 0 {
            0.0
        } else {
            covered as f64 / domain as f64
        };
        Self {
            metric,
            parameter: parameter.into(),
            covered: covered as u64,
            domain: domain as u64,
            ratio,
        }
    }
}

/// Neuron coverage: fraction of neurons whose (normalized) activation
/// exceeds `t` for some input (`Exists`) or for every input (`Forall`).
pub fn nc(trace: &ActivationTrace, t: f64, quantifier: Quantifier, normalization: Normalization) -> Result<CoverageResult> {
    if trace.is_empty() {
        return Err(Error::Parameter("NC over an empty trace".into()));
    }
    let n = trace.neuron_count();
    let offsets = trace.layer_offsets();
    let mut flags = vec![quantifier == Quantifier::Forall; n];
    let mut scaled = Vec::new();
    for rec in trace.records() {
        for (l, values) in rec.post.iter().enumerate() {
            scaled.clear();
            scaled.extend(values.iter().map(|v| f64::from(*v)));
            if normalization == Normalization::LayerMinmax {
                normalize_layer(&mut scaled);
            }
            let base = offsets[l];
            for (i, v) in scaled.iter().enumerate() {
                let above = *v > t;
                let flag = &mut flags[base + i];
                match quantifier {
                    Quantifier::Exists => *flag |= above,
                    Quantifier::Forall => *flag &= above,
                }
            }
        }
    }
    let covered = flags.iter().filter(|f| **f).count();
    Ok(CoverageResult::new(Metric::Nc, format!("t={t}"), covered, n))
}

/// Min-max rescaling of one layer's values into `[0, 1]`.
pub fn normalize_layer(values: &mut [f64]) {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
    let span = hi - lo;
    for v in values.iter_mut() {
        *v = if span > 0.0 { (*v - lo) / span } else { 0.0 };
    }
}

/// K-multisection neuron coverage: covered bins over `k * |N|`.
pub fn kmnc(trace: &ActivationTrace, profile: &ActivationProfile) -> Result<CoverageResult> {
    profile.check_compatible(trace)?;
    let n = trace.neuron_count();
    let k = profile.k();
    let mut hit = vec![0u64; (n * k).div_ceil(64)];
    let mut covered = 0usize;
    for r in 0..trace.len() {
        for (i, v) in trace.flat_post(r).enumerate() {
            if let Bin::In(j) = profile.bin_flat(i, v) {
                let bit = i * k + (j - 1);
                let (word, mask) = (bit / 64, 1u64 << (bit % 64));
                if hit[word] & mask == 0 {
                    hit[word] |= mask;
                    covered += 1;
                }
            }
        }
    }
    Ok(CoverageResult::new(Metric::Kmnc, format!("k={k}"), covered, n * k))
}

/// Number of neurons reaching the lower corner `(-inf, L - ετ)` and the
/// upper corner `(H + ετ, +inf)`.
pub fn corner_counts(trace: &ActivationTrace, profile: &ActivationProfile, epsilon: f64) -> Result<(usize, usize)> {
    profile.check_compatible(trace)?;
    let n = trace.neuron_count();
    let lower_bound: Vec<f64> = (0..n).map(|i| profile.low()[i] - epsilon * profile.tau()[i]).collect();
    let upper_bound: Vec<f64> = (0..n).map(|i| profile.high()[i] + epsilon * profile.tau()[i]).collect();
    let mut lower = vec![false; n];
    let mut upper = vec![false; n];
    for r in 0..trace.len() {
        for (i, v) in trace.flat_post(r).enumerate() {
            lower[i] |= v < lower_bound[i];
            upper[i] |= v > upper_bound[i];
        }
    }
    let count = |f: &[bool]| f.iter().filter(|x| **x).count();
    Ok((count(&lower), count(&upper)))
}

fn eps_label(epsilon: f64) -> String {
    format!("eps={epsilon}tau")
}

/// Neuron boundary coverage over `2 * |N|` corners.
pub fn nbc(trace: &ActivationTrace, profile: &ActivationProfile, epsilon: f64) -> Result<CoverageResult> {
    let (lower, upper) = corner_counts(trace, profile, epsilon)?;
    Ok(CoverageResult::new(
        Metric::Nbc,
        eps_label(epsilon),
        lower + upper,
        2 * trace.neuron_count(),
    ))
}

/// Strong neuron activation coverage: upper corners over `|N|`.
pub fn snac(trace: &ActivationTrace, profile: &ActivationProfile, epsilon: f64) -> Result<CoverageResult> {
    let (_, upper) = corner_counts(trace, profile, epsilon)?;
    Ok(CoverageResult::new(Metric::Snac, eps_label(epsilon), upper, trace.neuron_count()))
}

/// Top-k neuron coverage: neurons that rank among the `k` most active of
/// their layer for at least one input. Ties go to the lower index.
pub fn topknc(trace: &ActivationTrace, k: usize) -> Result<CoverageResult> {
    if k == 0 {
        return Err(Error::Parameter("top-k must be at least 1".into()));
    }
    if trace.is_empty() {
        return Err(Error::Parameter("TopKNC over an empty trace".into()));
    }
    let n = trace.neuron_count();
    let offsets = trace.layer_offsets();
    let mut flags = vec![false; n];
    let mut order = Vec::new();
    for rec in trace.records() {
        for (l, values) in rec.post.iter().enumerate() {
            order.clear();
            order.extend(0..values.len());
            let take = k.min(values.len());
            let by_rank = |a: &usize, b: &usize| {
                values[*b]
                    .partial_cmp(&values[*a])
                    .expect("finite activations")
                    .then(a.cmp(b))
            };
            if take < order.len() {
                order.select_nth_unstable_by(take - 1, by_rank);
            }
            for i in &order[..take] {
                flags[offsets[l] + i] = true;
            }
        }
    }
    let covered = flags.iter().filter(|f| **f).count();
    Ok(CoverageResult::new(Metric::TopkNc, format!("k={k}"), covered, n))
}
