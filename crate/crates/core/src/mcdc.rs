// SPDX-License-Identifier: Apache-2.0

//! MC/DC coverage over condition/decision neuron pairs.
//!
//! A decision is a neuron of a dense or conv2d layer; its conditions are
//! the neurons of the previous dense or conv2d layer (pooling, flatten and
//! relu layers in between are transparent). A pair `(c, d)` is covered when
//! two distinct inputs exist such that
//!
//! * `c` shows the variant's condition change (sign or value),
//! * under strict isolation, no other neuron in `c`'s layer changes sign,
//! * `d` shows the variant's decision change (sign or value).
//!
//! Sign is `+` for `v > 0` and `-` otherwise. A value change is a change of
//! more than `h * τ` without a sign change, where `τ` is the neuron's bin
//! width in the activation profile.
//!
//! Rather than scanning every neuron pair against every input pair, the
//! engine walks input pairs once per layer boundary and ORs the set of
//! changed decisions into the row of every eligible condition.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{CoverageResult, Metric};
use crate::model::{Granularity, NetworkModel, NeuronId};
use crate::profile::ActivationProfile;
use crate::trace::ActivationTrace;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum McdcVariant {
    /// Sign change at the condition, sign change at the decision.
    Ss,
    Sv,
    Vs,
    Vv,
}

impl McdcVariant {
    pub const ALL: [McdcVariant; 4] = [McdcVariant::Ss, McdcVariant::Sv, McdcVariant::Vs, McdcVariant::Vv];

    fn condition_by_sign(self) -> bool {
        matches!(self, McdcVariant::Ss | McdcVariant::Sv)
    }

    fn decision_by_sign(self) -> bool {
        matches!(self, McdcVariant::Ss | McdcVariant::Vs)
    }
}

impl fmt::Display for McdcVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            McdcVariant::Ss => "SS",
            McdcVariant::Sv => "SV",
            McdcVariant::Vs => "VS",
            McdcVariant::Vv => "VV",
        })
    }
}

impl FromStr for McdcVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "SS" => Ok(McdcVariant::Ss),
            "SV" => Ok(McdcVariant::Sv),
            "VS" => Ok(McdcVariant::Vs),
            "VV" => Ok(McdcVariant::Vv),
            _ => Err(Error::Parameter(format!("unknown MC/DC variant {s:?}"))),
        }
    }
}

impl Serialize for McdcVariant {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for McdcVariant {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SignSource {
    #[default]
    PreActivation,
    PostActivation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Isolation {
    /// All sibling conditions must keep their sign.
    #[default]
    Strict,
    Relaxed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct McdcConfig {
    pub variant: McdcVariant,
    pub sign_source: SignSource,
    /// Value-change threshold `h`, in units of the neuron's `τ`.
    pub value_threshold: f64,
    pub isolation: Isolation,
    /// Evaluate at most this many seeded-sampled pairs per layer boundary.
    pub max_pairs_per_layer: Option<usize>,
    pub sample_seed: u64,
}

impl Default for McdcConfig {
    fn default() -> Self {
        Self {
            variant: McdcVariant::Ss,
            sign_source: SignSource::PreActivation,
            value_threshold: 0.5,
            isolation: Isolation::Strict,
            max_pairs_per_layer: None,
            sample_seed: 0,
        }
    }
}

impl McdcConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.value_threshold > 0.0 && self.value_threshold.is_finite()) {
            return Err(Error::Parameter(format!(
                "value-change threshold must be positive, got {}",
                self.value_threshold
            )));
        }
        if self.max_pairs_per_layer == Some(0) {
            return Err(Error::Parameter("max_pairs_per_layer must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NeuronPair {
    pub condition: NeuronId,
    pub decision: NeuronId,
}

#[inline]
pub fn sign_change(a1: f64, a2: f64) -> bool {
    (a1 > 0.0) != (a2 > 0.0)
}

/// Change of more than `h * tau` with the sign kept. Never true for `tau == 0`.
#[inline]
pub fn value_change(a1: f64, a2: f64, tau: f64, h: f64) -> bool {
    tau > 0.0 && !sign_change(a1, a2) && (a1 - a2).abs() > h * tau
}

/// Consecutive (condition layer, decision layer) indices.
fn boundaries(model: &NetworkModel) -> Result<Vec<(usize, usize)>> {
    let trainable = model.trainable_layers();
    if trainable.len() < 2 {
        return Err(Error::Validation(format!(
            "MC/DC needs at least two dense/conv2d layers, model has {}",
            trainable.len()
        )));
    }
    Ok(trainable.windows(2).map(|w| (w[0], w[1])).collect())
}

/// All pairs in (layer, decision, condition) ascending order under
/// channel-as-neuron widths.
pub fn enumerate_pairs(model: &NetworkModel) -> Result<Vec<NeuronPair>> {
    let widths = model.layer_widths(Granularity::Channel);
    let mut pairs = Vec::new();
    for (p, q) in boundaries(model)? {
        for d in 0..widths[q] {
            for c in 0..widths[p] {
                pairs.push(NeuronPair {
                    condition: NeuronId::new(p, c),
                    decision: NeuronId::new(q, d),
                });
            }
        }
    }
    Ok(pairs)
}

pub fn mcdc_coverage(
    trace: &ActivationTrace,
    model: &NetworkModel,
    profile: &ActivationProfile,
    cfg: &McdcConfig,
) -> Result<CoverageResult> {
    let mut out = mcdc_coverage_variants(trace, model, profile, cfg, &[cfg.variant])?;
    Ok(out.remove(0))
}

/// Evaluates several variants in one pass over input pairs; `cfg.variant`
/// is ignored.
pub fn mcdc_coverage_variants(
    trace: &ActivationTrace,
    model: &NetworkModel,
    profile: &ActivationProfile,
    cfg: &McdcConfig,
    variants: &[McdcVariant],
) -> Result<Vec<CoverageResult>> {
    let analysis = Analysis::run(trace, model, profile, cfg, variants)?;
    Ok(variants
        .iter()
        .enumerate()
        .map(|(v, variant)| {
            let (covered, domain) = analysis.count(v, cfg);
            CoverageResult::new(Metric::Mcdc(*variant), format!("n={}", trace.len()), covered, domain)
        })
        .collect())
}

/// The covered pairs for `cfg.variant`, in [`enumerate_pairs`] order.
pub fn covered_pairs(
    trace: &ActivationTrace,
    model: &NetworkModel,
    profile: &ActivationProfile,
    cfg: &McdcConfig,
) -> Result<Vec<NeuronPair>> {
    let analysis = Analysis::run(trace, model, profile, cfg, &[cfg.variant])?;
    let mut out = Vec::new();
    for (b, boundary) in analysis.boundaries.iter().enumerate() {
        for d in 0..boundary.decisions {
            for c in 0..boundary.conditions {
                if analysis.covered[0][b].get(c, d) {
                    out.push(NeuronPair {
                        condition: NeuronId::new(boundary.condition_layer, c),
                        decision: NeuronId::new(boundary.decision_layer, d),
                    });
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
struct Boundary {
    condition_layer: usize,
    decision_layer: usize,
    conditions: usize,
    decisions: usize,
}

/// Condition-by-decision bit matrix.
#[derive(Debug, Clone, PartialEq)]
struct PairMatrix {
    words: usize,
    bits: Vec<u64>,
}

impl PairMatrix {
    fn new(conditions: usize, decisions: usize) -> Self {
        let words = decisions.div_ceil(64);
        Self {
            words,
            bits: vec![0; conditions * words],
        }
    }

    fn or_row(&mut self, c: usize, row: &[u64]) {
        for (dst, src) in self.bits[c * self.words..(c + 1) * self.words].iter_mut().zip(row) {
            *dst |= src;
        }
    }

    fn get(&self, c: usize, d: usize) -> bool {
        self.bits[c * self.words + d / 64] & (1u64 << (d % 64)) != 0
    }

    fn union(&mut self, other: &Self) {
        for (a, b) in self.bits.iter_mut().zip(&other.bits) {
            *a |= b;
        }
    }

    fn count(&self) -> usize {
        self.bits.iter().map(|w| w.count_ones() as usize).sum()
    }
}

struct Analysis {
    boundaries: Vec<Boundary>,
    /// covered[variant][boundary]
    covered: Vec<Vec<PairMatrix>>,
}

/// Per-input values of one layer and their sign bits.
struct LayerView {
    values: Vec<Vec<f64>>,
    signs: Vec<Vec<u64>>,
    tau: Vec<f64>,
}

impl LayerView {
    fn new(trace: &ActivationTrace, layer: usize, use_pre: bool, tau: Vec<f64>) -> Self {
        let values: Vec<Vec<f64>> = trace
            .records()
            .iter()
            .map(|r| {
                r.values(layer, use_pre)
                    .expect("pre-activation presence checked")
                    .iter()
                    .map(|v| f64::from(*v))
                    .collect()
            })
            .collect();
        let signs = values
            .iter()
            .map(|vals| {
                let mut bits = vec![0u64; vals.len().div_ceil(64)];
                for (i, v) in vals.iter().enumerate() {
                    if *v > 0.0 {
                        bits[i / 64] |= 1 << (i % 64);
                    }
                }
                bits
            })
            .collect();
        Self { values, signs, tau }
    }

    fn sign_changes(&self, a: usize, b: usize, out: &mut [u64]) -> usize {
        let mut count = 0;
        for ((o, x), y) in out.iter_mut().zip(&self.signs[a]).zip(&self.signs[b]) {
            *o = x ^ y;
            count += o.count_ones() as usize;
        }
        count
    }

    fn value_changes(&self, a: usize, b: usize, h: f64, out: &mut [u64]) -> bool {
        out.fill(0);
        let mut any = false;
        for (i, ((x, y), tau)) in self.values[a].iter().zip(&self.values[b]).zip(&self.tau).enumerate() {
            if value_change(*x, *y, *tau, h) {
                out[i / 64] |= 1 << (i % 64);
                any = true;
            }
        }
        any
    }
}

fn ones(bits: &[u64]) -> impl Iterator<Item = usize> + '_ {
    bits.iter().enumerate().flat_map(|(w, word)| {
        let mut word = *word;
        std::iter::from_fn(move || {
            if word == 0 {
                return None;
            }
            let bit = word.trailing_zeros() as usize;
            word &= word - 1;
            Some(w * 64 + bit)
        })
    })
}

impl Analysis {
    fn run(
        trace: &ActivationTrace,
        model: &NetworkModel,
        profile: &ActivationProfile,
        cfg: &McdcConfig,
        variants: &[McdcVariant],
    ) -> Result<Self> {
        cfg.validate()?;
        if trace.model_fingerprint() != model.fingerprint() {
            return Err(Error::FingerprintMismatch {
                expected: model.fingerprint().to_string(),
                found: trace.model_fingerprint().to_string(),
            });
        }
        let widths = model.layer_widths(trace.granularity());
        if trace.layer_widths() != widths.as_slice() {
            return Err(Error::Validation(format!(
                "trace layer widths {:?} do not match model widths {widths:?}",
                trace.layer_widths()
            )));
        }
        profile.check_compatible(trace)?;
        let use_pre = cfg.sign_source == SignSource::PreActivation;
        if use_pre && !trace.has_pre() {
            return Err(Error::Validation(
                "sign source is pre-activation but the trace has no pre-activation vectors".into(),
            ));
        }

        let offsets = trace.layer_offsets();
        let boundaries: Vec<Boundary> = boundaries(model)?
            .into_iter()
            .map(|(p, q)| Boundary {
                condition_layer: p,
                decision_layer: q,
                conditions: widths[p],
                decisions: widths[q],
            })
            .collect();
        let view = |layer: usize| {
            let tau = profile.tau()[offsets[layer]..offsets[layer] + widths[layer]].to_vec();
            LayerView::new(trace, layer, use_pre, tau)
        };

        let mut covered: Vec<Vec<PairMatrix>> = vec![Vec::with_capacity(boundaries.len()); variants.len()];
        for b in &boundaries {
            let conds = view(b.condition_layer);
            let decs = view(b.decision_layer);
            let per_variant = scan_boundary(b, &conds, &decs, trace.len(), cfg, variants);
            for (v, m) in per_variant.into_iter().enumerate() {
                covered[v].push(m);
            }
        }
        Ok(Self { boundaries, covered })
    }

    /// (covered, domain) for variant `v`, honoring the sampling cap.
    fn count(&self, v: usize, cfg: &McdcConfig) -> (usize, usize) {
        let mut covered = 0;
        let mut domain = 0;
        for (b, boundary) in self.boundaries.iter().enumerate() {
            let matrix = &self.covered[v][b];
            let total = boundary.conditions * boundary.decisions;
            match cfg.max_pairs_per_layer {
                Some(cap) if cap < total => {
                    let mut rng = ChaCha8Rng::seed_from_u64(cfg.sample_seed ^ (b as u64).wrapping_mul(0x9E37_79B9));
                    for idx in rand::seq::index::sample(&mut rng, total, cap).iter() {
                        // idx enumerates pairs decision-major, as enumerate_pairs does
                        let (d, c) = (idx / boundary.conditions, idx % boundary.conditions);
                        covered += usize::from(matrix.get(c, d));
                    }
                    domain += cap;
                }
                _ => {
                    covered += matrix.count();
                    domain += total;
                }
            }
        }
        (covered, domain)
    }
}

fn scan_boundary(
    b: &Boundary,
    conds: &LayerView,
    decs: &LayerView,
    inputs: usize,
    cfg: &McdcConfig,
    variants: &[McdcVariant],
) -> Vec<PairMatrix> {
    let strict = cfg.isolation == Isolation::Strict;
    let h = cfg.value_threshold;
    let need_value_cond = variants.iter().any(|v| !v.condition_by_sign());
    let need_value_dec = variants.iter().any(|v| !v.decision_by_sign());
    let empty = || vec![PairMatrix::new(b.conditions, b.decisions); variants.len()];

    (0..inputs)
        .into_par_iter()
        .fold(empty, |mut acc, i| {
            let mut c_sign = vec![0u64; b.conditions.div_ceil(64)];
            let mut c_value = vec![0u64; b.conditions.div_ceil(64)];
            let mut d_sign = vec![0u64; b.decisions.div_ceil(64)];
            let mut d_value = vec![0u64; b.decisions.div_ceil(64)];
            for j in i + 1..inputs {
                let c_flips = conds.sign_changes(i, j, &mut c_sign);
                let d_flips = decs.sign_changes(i, j, &mut d_sign);
                let any_c_value = need_value_cond
                    && (!strict || c_flips == 0)
                    && conds.value_changes(i, j, h, &mut c_value);
                let any_d_value = need_value_dec && decs.value_changes(i, j, h, &mut d_value);

                for (v, variant) in variants.iter().enumerate() {
                    let (decision_set, any_decision) = if variant.decision_by_sign() {
                        (&d_sign, d_flips > 0)
                    } else {
                        (&d_value, any_d_value)
                    };
                    if !any_decision {
                        continue;
                    }
                    let matrix = &mut acc[v];
                    if variant.condition_by_sign() {
                        if strict {
                            if c_flips == 1 {
                                let c = ones(&c_sign).next().expect("one flip");
                                matrix.or_row(c, decision_set);
                            }
                        } else {
                            for c in ones(&c_sign) {
                                matrix.or_row(c, decision_set);
                            }
                        }
                    } else if any_c_value {
                        for c in ones(&c_value) {
                            matrix.or_row(c, decision_set);
                        }
                    }
                }
            }
            acc
        })
        .reduce(empty, |mut a, b| {
            for (x, y) in a.iter_mut().zip(&b) {
                x.union(y);
            }
            a
        })
}
