// SPDX-License-Identifier: Apache-2.0

//! Per-neuron main functional region `[L, H]` and its `k` equal bins.
//!
//! Bin `j` (1-based) of a neuron covers `[L + (j-1)τ, L + jτ)` with
//! `τ = (H - L) / k`; the last bin is closed at `H`. A neuron with `L == H`
//! has `τ = 0` and a single reachable bin.
//!
//! `.aprf` layout: `"APRF" | version: u16 = 1 | header_len: u32 | JSON
//! header {fingerprint, k, neuron_count, layer_widths}` followed by one
//! `(L, H)` pair of little-endian f64 per neuron.

use std::io::{BufWriter, Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::codec;
use crate::error::{Error, Result};
use crate::model::NeuronId;
use crate::trace::ActivationTrace;

pub const MAGIC: &[u8; 4] = b"APRF";
pub const VERSION: u16 = 1;

/// Where a value falls relative to a neuron's bins.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Bin {
    Below,
    /// 1-based bin index in `1..=k`.
    In(usize),
    Above,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationProfile {
    model_fingerprint: String,
    layer_widths: Vec<usize>,
    k: usize,
    low: Vec<f64>,
    high: Vec<f64>,
    tau: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    fingerprint: String,
    k: usize,
    neuron_count: usize,
    layer_widths: Vec<usize>,
}

impl ActivationProfile {
    pub fn from_bounds(
        model_fingerprint: impl Into<String>,
        layer_widths: Vec<usize>,
        k: usize,
        low: Vec<f64>,
        high: Vec<f64>,
    ) -> Result<Self> {
        if k == 0 {
            return Err(Error::Parameter("bin count k must be at least 1".into()));
        }
        let n: usize = layer_widths.iter().sum();
        if low.len() != n || high.len() != n {
            return Err(Error::Validation(format!(
                "profile has {} lows and {} highs for {n} neurons",
                low.len(),
                high.len()
            )));
        }
        if let Some(i) = (0..n).find(|&i| !(low[i].is_finite() && high[i].is_finite() && low[i] <= high[i])) {
            return Err(Error::Validation(format!(
                "neuron {i}: invalid range [{}, {}]",
                low[i], high[i]
            )));
        }
        let tau = low
            .iter()
            .zip(&high)
            .map(|(l, h)| (h - l) / k as f64)
            .collect();
        Ok(Self {
            model_fingerprint: model_fingerprint.into(),
            layer_widths,
            k,
            low,
            high,
            tau,
        })
    }

    pub fn model_fingerprint(&self) -> &str {
        &self.model_fingerprint
    }

    pub fn layer_widths(&self) -> &[usize] {
        &self.layer_widths
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn neuron_count(&self) -> usize {
        self.low.len()
    }

    pub fn low(&self) -> &[f64] {
        &self.low
    }

    pub fn high(&self) -> &[f64] {
        &self.high
    }

    /// Bin width of every neuron in flat order.
    pub fn tau(&self) -> &[f64] {
        &self.tau
    }

    /// Flat index of a neuron, if it exists in this profile.
    pub fn flat_index(&self, neuron: NeuronId) -> Option<usize> {
        let width = *self.layer_widths.get(neuron.layer)?;
        if neuron.index >= width {
            return None;
        }
        Some(self.layer_widths[..neuron.layer].iter().sum::<usize>() + neuron.index)
    }

    /// Same ranges with a different bin count.
    pub fn with_k(&self, k: usize) -> Result<Self> {
        Self::from_bounds(
            self.model_fingerprint.clone(),
            self.layer_widths.clone(),
            k,
            self.low.clone(),
            self.high.clone(),
        )
    }

    /// Elementwise union of two profiles over the same model and `k`.
    pub fn merge(&self, other: &Self) -> Result<Self> {
        self.check_fingerprint(&other.model_fingerprint)?;
        if self.layer_widths != other.layer_widths || self.k != other.k {
            return Err(Error::Validation("profiles differ in layout or k".into()));
        }
        let low = self.low.iter().zip(&other.low).map(|(a, b)| a.min(*b)).collect();
        let high = self.high.iter().zip(&other.high).map(|(a, b)| a.max(*b)).collect();
        Self::from_bounds(
            self.model_fingerprint.clone(),
            self.layer_widths.clone(),
            self.k,
            low,
            high,
        )
    }

    pub fn check_fingerprint(&self, fingerprint: &str) -> Result<()> {
        if self.model_fingerprint != fingerprint {
            return Err(Error::FingerprintMismatch {
                expected: self.model_fingerprint.clone(),
                found: fingerprint.to_string(),
            });
        }
        Ok(())
    }

    /// Checks that `trace` comes from the same model and has the same layout.
    pub fn check_compatible(&self, trace: &ActivationTrace) -> Result<()> {
        self.check_fingerprint(trace.model_fingerprint())?;
        if trace.layer_widths() != self.layer_widths.as_slice() {
            return Err(Error::Validation(format!(
                "trace layer widths {:?} differ from profile {:?}",
                trace.layer_widths(),
                self.layer_widths
            )));
        }
        Ok(())
    }

    pub fn bin_index(&self, neuron: NeuronId, value: f64) -> Result<Bin> {
        let i = self
            .flat_index(neuron)
            .ok_or_else(|| Error::Parameter(format!("neuron {neuron:?} not in profile")))?;
        Ok(self.bin_flat(i, value))
    }

    /// [`bin_index`](Self::bin_index) by flat neuron index.
    pub fn bin_flat(&self, neuron: usize, value: f64) -> Bin {
        let (low, high, tau) = (self.low[neuron], self.high[neuron], self.tau[neuron]);
        if value < low {
            return Bin::Below;
        }
        if value > high {
            return Bin::Above;
        }
        if tau == 0.0 {
            return Bin::In(1);
        }
        let last = self.k - 1;
        let boundary = |j: usize| low + j as f64 * tau;
        // The division gives a guess; the boundary comparisons make the
        // answer agree with the bin definition exactly.
        let guess = ((value - low) / tau).floor();
        let mut j = if guess.is_nan() || guess < 0.0 {
            0
        } else {
            (guess as usize).min(last)
        };
        while j > 0 && value < boundary(j) {
            j -= 1;
        }
        while j < last && value >= boundary(j + 1) {
            j += 1;
        }
        Bin::In(j + 1)
    }
}

/// `L` and `H` of every neuron over the post-activation values of `trace`.
pub fn build_profile(training: &ActivationTrace, k: usize) -> Result<ActivationProfile> {
    if k == 0 {
        return Err(Error::Parameter("bin count k must be at least 1".into()));
    }
    let n = training.neuron_count();
    let mut low = vec![f64::INFINITY; n];
    let mut high = vec![f64::NEG_INFINITY; n];
    for r in 0..training.len() {
        for (i, v) in training.flat_post(r).enumerate() {
            low[i] = low[i].min(v);
            high[i] = high[i].max(v);
        }
    }
    ActivationProfile::from_bounds(
        training.model_fingerprint(),
        training.layer_widths().to_vec(),
        k,
        low,
        high,
    )
}

pub fn encode(profile: &ActivationProfile) -> Vec<u8> {
    let header = Header {
        fingerprint: profile.model_fingerprint.clone(),
        k: profile.k,
        neuron_count: profile.neuron_count(),
        layer_widths: profile.layer_widths.clone(),
    };
    let mut out = Vec::with_capacity(64 + 16 * profile.neuron_count());
    codec::write_preamble(&mut out, MAGIC, VERSION, &header).expect("in-memory write");
    for (l, h) in profile.low.iter().zip(&profile.high) {
        out.write_f64::<LittleEndian>(*l).expect("in-memory write");
        out.write_f64::<LittleEndian>(*h).expect("in-memory write");
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<ActivationProfile> {
    let mut cur = Cursor::new(bytes);
    let header: Header = codec::read_preamble(&mut cur, MAGIC, VERSION, "aprf")?;
    if header.layer_widths.iter().sum::<usize>() != header.neuron_count {
        return Err(Error::Validation(format!(
            "aprf: neuron_count {} disagrees with layer widths",
            header.neuron_count
        )));
    }
    let n = header.neuron_count;
    if n.checked_mul(16).is_none_or(|b| b > bytes.len()) {
        return Err(codec::truncated("aprf", "neuron ranges"));
    }
    let mut low = Vec::with_capacity(n);
    let mut high = Vec::with_capacity(n);
    for i in 0..n {
        let mut pair = [0f64; 2];
        cur.read_f64_into::<LittleEndian>(&mut pair)
            .map_err(|_| codec::truncated("aprf", &format!("neuron {i}")))?;
        low.push(pair[0]);
        high.push(pair[1]);
    }
    codec::expect_eof(&mut cur, "aprf")?;
    ActivationProfile::from_bounds(header.fingerprint, header.layer_widths, header.k, low, high)
}

pub fn write_profile(profile: &ActivationProfile, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    out.write_all(&encode(profile))
        .and_then(|_| out.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn read_profile(path: impl AsRef<Path>) -> Result<ActivationProfile> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(k: usize) -> ActivationProfile {
        ActivationProfile::from_bounds("fp", vec![1], k, vec![0.0], vec![1.0]).unwrap()
    }

    #[test]
    fn bins_on_unit_interval() {
        let p = unit(10);
        let n = NeuronId::new(0, 0);
        assert_eq!(p.bin_index(n, 0.05).unwrap(), Bin::In(1));
        assert_eq!(p.bin_index(n, 0.0).unwrap(), Bin::In(1));
        assert_eq!(p.bin_index(n, 1.0).unwrap(), Bin::In(10));
        assert_eq!(p.bin_index(n, 1.5).unwrap(), Bin::Above);
        assert_eq!(p.bin_index(n, -0.1).unwrap(), Bin::Below);
        assert_eq!(p.bin_index(n, 0.55).unwrap(), Bin::In(6));
        assert!(p.bin_index(NeuronId::new(0, 1), 0.5).is_err());
    }

    #[test]
    fn bin_agrees_with_boundary_definition_at_boundaries() {
        let p = unit(10);
        for j in 0..10 {
            let b = j as f64 * 0.1;
            assert_eq!(p.bin_flat(0, b), Bin::In(j + 1), "boundary {b}");
        }
    }

    #[test]
    fn degenerate_neuron() {
        let p = ActivationProfile::from_bounds("fp", vec![1], 10, vec![0.5], vec![0.5]).unwrap();
        assert_eq!(p.tau()[0], 0.0);
        assert_eq!(p.bin_flat(0, 0.5), Bin::In(1));
        assert_eq!(p.bin_flat(0, 0.4), Bin::Below);
        assert_eq!(p.bin_flat(0, 0.6), Bin::Above);
    }

    #[test]
    fn tau_from_min_max() {
        let p = ActivationProfile::from_bounds("fp", vec![1], 10, vec![0.2], vec![0.8]).unwrap();
        assert!((p.tau()[0] - 0.06).abs() < 1e-15);
        assert!(ActivationProfile::from_bounds("fp", vec![1], 0, vec![0.2], vec![0.8]).is_err());
        assert!(ActivationProfile::from_bounds("fp", vec![1], 1, vec![0.9], vec![0.8]).is_err());
    }

    #[test]
    fn aprf_round_trip_and_rejections() {
        let p = ActivationProfile::from_bounds("abc", vec![2, 1], 1000, vec![0.0, -1.0, 0.25], vec![1.0, 3.5, 0.25]).unwrap();
        let bytes = encode(&p);
        let back = decode(&bytes).unwrap();
        assert_eq!(back, p);
        assert_eq!(encode(&back), bytes);
        assert!(matches!(decode(&bytes[..bytes.len() - 3]), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[0] = b'Z';
        assert!(matches!(decode(&bad), Err(Error::Format(_))));
    }
}
