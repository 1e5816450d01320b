// SPDX-License-Identifier: Apache-2.0

//! Random instance generators and naive reference implementations shared by
//! the integration and acceptance tests. The oracles are written directly
//! from the metric definitions with plain loops and share no code with the
//! library beyond its data types.

#![allow(dead_code)]

use std::path::PathBuf;

use dnncov::model::{Activation, Granularity};
use dnncov::{ActivationProfile, ActivationTrace, InputRecord, LayerSpec, NetworkModel, Quantifier, Sample, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

/// A value drawn either from a coarse grid (to force ties and exact
/// boundary hits) or uniformly.
fn value(rng: &mut ChaCha8Rng) -> f32 {
    if rng.gen_bool(0.3) {
        rng.gen_range(-4..=8) as f32 * 0.25
    } else {
        rng.gen_range(-2.0f32..3.0)
    }
}

pub fn random_widths(rng: &mut ChaCha8Rng, max_layers: usize, max_width: usize) -> Vec<usize> {
    let layers = rng.gen_range(1..=max_layers);
    (0..layers).map(|_| rng.gen_range(1..=max_width)).collect()
}

pub fn random_trace(rng: &mut ChaCha8Rng, widths: &[usize], records: usize) -> ActivationTrace {
    let recs = (0..records)
        .map(|r| InputRecord {
            input_id: r as u32,
            label: None,
            post: widths.iter().map(|w| (0..*w).map(|_| value(rng)).collect()).collect(),
            pre: None,
        })
        .collect();
    ActivationTrace::new("random", widths.to_vec(), Granularity::Element, recs).unwrap()
}

/// A randomized (train, test) pair: ≤5 layers, ≤32 neurons, ≤100 inputs.
pub fn random_instance(seed: u64) -> (ActivationTrace, ActivationTrace) {
    let mut rng = rng(seed);
    let widths = random_widths(&mut rng, 5, 32);
    let (n_train, n_test) = (rng.gen_range(1..=100), rng.gen_range(1..=100));
    let train = random_trace(&mut rng, &widths, n_train);
    let test = random_trace(&mut rng, &widths, n_test);
    (train, test)
}

/// Profile bounds straight from the definition: min and max post value.
pub fn naive_profile(train: &ActivationTrace, k: usize) -> ActivationProfile {
    let n = train.neuron_count();
    let mut low = vec![f64::INFINITY; n];
    let mut high = vec![f64::NEG_INFINITY; n];
    for rec in train.records() {
        let mut i = 0;
        for layer in &rec.post {
            for v in layer {
                low[i] = low[i].min(f64::from(*v));
                high[i] = high[i].max(f64::from(*v));
                i += 1;
            }
        }
    }
    ActivationProfile::from_bounds(train.model_fingerprint(), train.layer_widths().to_vec(), k, low, high).unwrap()
}

/// Per-neuron post values as `values[record][flat neuron]`.
fn flat(trace: &ActivationTrace) -> Vec<Vec<f64>> {
    trace
        .records()
        .iter()
        .map(|r| r.post.iter().flatten().map(|v| f64::from(*v)).collect())
        .collect()
}

pub fn naive_nc(trace: &ActivationTrace, t: f64, q: Quantifier, layer_minmax: bool) -> (usize, usize) {
    let widths = trace.layer_widths();
    let mut covered = 0;
    let mut base = 0;
    for (l, w) in widths.iter().enumerate() {
        for i in 0..*w {
            let mut above = Vec::new();
            for rec in trace.records() {
                let layer: Vec<f64> = rec.post[l].iter().map(|v| f64::from(*v)).collect();
                let mut v = layer[i];
                if layer_minmax {
                    let lo = layer.iter().cloned().fold(f64::INFINITY, f64::min);
                    let hi = layer.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    v = if hi > lo { (v - lo) / (hi - lo) } else { 0.0 };
                }
                above.push(v > t);
            }
            let hit = match q {
                Quantifier::Exists => above.iter().any(|a| *a),
                Quantifier::Forall => above.iter().all(|a| *a),
            };
            covered += usize::from(hit);
        }
        base += w;
    }
    (covered, base)
}

/// Bins j = 1..=k cover [L+(j-1)τ, L+jτ); the last bin is closed at H.
/// A neuron with τ = 0 has the single value L in bin 1.
pub fn naive_kmnc(trace: &ActivationTrace, profile: &ActivationProfile) -> (usize, usize) {
    let values = flat(trace);
    let n = trace.neuron_count();
    let k = profile.k();
    let mut covered = 0;
    for i in 0..n {
        let (low, high, tau) = (profile.low()[i], profile.high()[i], profile.tau()[i]);
        for j in 1..=k {
            let hit = values.iter().any(|rec| {
                let v = rec[i];
                if tau == 0.0 {
                    return j == 1 && v == low;
                }
                let lo = low + (j - 1) as f64 * tau;
                let hi = low + j as f64 * tau;
                if j == k {
                    lo <= v && v <= high
                } else {
                    lo <= v && v < hi
                }
            });
            covered += usize::from(hit);
        }
    }
    (covered, n * k)
}

/// (lower, upper) corner neuron counts.
pub fn naive_corners(trace: &ActivationTrace, profile: &ActivationProfile, eps: f64) -> (usize, usize) {
    let values = flat(trace);
    let mut lower = 0;
    let mut upper = 0;
    for i in 0..trace.neuron_count() {
        let (l, h, tau) = (profile.low()[i], profile.high()[i], profile.tau()[i]);
        lower += usize::from(values.iter().any(|r| r[i] < l - eps * tau));
        upper += usize::from(values.iter().any(|r| r[i] > h + eps * tau));
    }
    (lower, upper)
}

/// A neuron is top-k for an input when fewer than k neurons of its layer
/// rank strictly ahead of it (higher value, or equal value and lower index).
pub fn naive_topknc(trace: &ActivationTrace, k: usize) -> (usize, usize) {
    let mut covered = 0;
    let mut n = 0;
    for (l, w) in trace.layer_widths().iter().enumerate() {
        for i in 0..*w {
            let hit = trace.records().iter().any(|rec| {
                let layer = &rec.post[l];
                let ahead = (0..*w)
                    .filter(|j| layer[*j] > layer[i] || (layer[*j] == layer[i] && *j < i))
                    .count();
                ahead < k
            });
            covered += usize::from(hit);
        }
        n += w;
    }
    (covered, n)
}

/// A random dense network: ≤`max_width` neurons per layer, relu between
/// layers, sometimes as a standalone layer.
pub fn random_dense_model(rng: &mut ChaCha8Rng, max_width: usize) -> NetworkModel {
    let depth = rng.gen_range(2..=4);
    let mut widths = vec![rng.gen_range(1..=max_width)];
    let mut layers = Vec::new();
    for d in 0..depth {
        let inputs = *widths.last().unwrap();
        let outputs = rng.gen_range(1..=max_width);
        let last = d + 1 == depth;
        let standalone = !last && rng.gen_bool(0.3);
        layers.push(LayerSpec::Dense {
            inputs,
            outputs,
            activation: if last || standalone { Activation::None } else { Activation::Relu },
            weights: (0..inputs * outputs).map(|_| rng.gen_range(-1.0f32..1.0)).collect(),
            bias: (0..outputs).map(|_| rng.gen_range(-0.5f32..0.5)).collect(),
        });
        if standalone {
            layers.push(LayerSpec::Relu);
        }
        widths.push(outputs);
    }
    NetworkModel::new("toy", vec![widths[0]], layers).unwrap()
}

pub fn random_inputs(rng: &mut ChaCha8Rng, width: usize, count: usize) -> Vec<Sample> {
    (0..count)
        .map(|_| {
            let data = (0..width)
                .map(|_| if rng.gen_bool(0.2) { 0.0 } else { rng.gen_range(-1.0..1.0) })
                .collect();
            Sample::new(Tensor::vector(data), None)
        })
        .collect()
}

pub use dnncov::mcdc::{Isolation, McdcConfig, McdcVariant, NeuronPair, SignSource};

/// Exhaustive MC/DC: every neuron pair against every ordered input pair.
pub fn brute_force_mcdc(
    trace: &ActivationTrace,
    model: &NetworkModel,
    profile: &ActivationProfile,
    cfg: &McdcConfig,
) -> Vec<NeuronPair> {
    let use_pre = cfg.sign_source == SignSource::PreActivation;
    let trainable: Vec<usize> = model
        .layers()
        .iter()
        .enumerate()
        .filter(|(_, l)| matches!(l, LayerSpec::Dense { .. } | LayerSpec::Conv2d { .. }))
        .map(|(i, _)| i)
        .collect();
    let offsets: Vec<usize> = trace
        .layer_widths()
        .iter()
        .scan(0, |acc, w| {
            let o = *acc;
            *acc += w;
            Some(o)
        })
        .collect();
    let val = |r: usize, layer: usize, i: usize| -> f64 {
        let rec = &trace.records()[r];
        let v = if use_pre { rec.pre.as_ref().unwrap()[layer][i] } else { rec.post[layer][i] };
        f64::from(v)
    };
    let positive = |v: f64| v > 0.0;
    let sign = |a: f64, b: f64| positive(a) != positive(b);
    let value = |a: f64, b: f64, tau: f64| tau > 0.0 && positive(a) == positive(b) && (a - b).abs() > cfg.value_threshold * tau;
    let (cond_sign, dec_sign) = match cfg.variant {
        McdcVariant::Ss => (true, true),
        McdcVariant::Sv => (true, false),
        McdcVariant::Vs => (false, true),
        McdcVariant::Vv => (false, false),
    };

    let mut out = Vec::new();
    for w in trainable.windows(2) {
        let (p, q) = (w[0], w[1]);
        let (cw, dw) = (trace.layer_widths()[p], trace.layer_widths()[q]);
        for d in 0..dw {
            for c in 0..cw {
                let mut hit = false;
                'inputs: for x1 in 0..trace.len() {
                    for x2 in 0..trace.len() {
                        if x1 == x2 {
                            continue;
                        }
                        let (a1, a2) = (val(x1, p, c), val(x2, p, c));
                        let tau_c = profile.tau()[offsets[p] + c];
                        let cond = if cond_sign { sign(a1, a2) } else { value(a1, a2, tau_c) };
                        if !cond {
                            continue;
                        }
                        if cfg.isolation == Isolation::Strict
                            && (0..cw).any(|o| o != c && sign(val(x1, p, o), val(x2, p, o)))
                        {
                            continue;
                        }
                        let (b1, b2) = (val(x1, q, d), val(x2, q, d));
                        let tau_d = profile.tau()[offsets[q] + d];
                        let dec = if dec_sign { sign(b1, b2) } else { value(b1, b2, tau_d) };
                        if dec {
                            hit = true;
                            break 'inputs;
                        }
                    }
                }
                if hit {
                    out.push(NeuronPair {
                        condition: dnncov::NeuronId::new(p, c),
                        decision: dnncov::NeuronId::new(q, d),
                    });
                }
            }
        }
    }
    out
}
