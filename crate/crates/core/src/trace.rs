// SPDX-License-Identifier: Apache-2.0

//! Activation traces and the `.atrc` interchange format.
//!
//! ```text
//! "ATRC" | version: u16 = 1 | header_len: u32 | header: UTF-8 JSON
//! record*: input_id: u32 | label: i32 (-1 = absent)
//!          | for each layer: post vector, then pre vector if has_pre
//! vector:  len: u32 | len x f32
//! ```
//!
//! The header carries `fingerprint`, `layer_widths`, `record_count`,
//! `has_pre` and `granularity`. Integers and floats are little-endian.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec;
use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::model::{Granularity, NetworkModel};

pub const MAGIC: &[u8; 4] = b"ATRC";
pub const VERSION: u16 = 1;

/// Activations recorded for one input.
#[derive(Debug, Clone, PartialEq)]
pub struct InputRecord {
    pub input_id: u32,
    pub label: Option<u32>,
    /// One vector per layer.
    pub post: Vec<Vec<f32>>,
    /// Pre-nonlinearity vectors, one per layer, when the producer kept them.
    pub pre: Option<Vec<Vec<f32>>>,
}

impl InputRecord {
    /// Values used for sign/value analysis: `pre` when asked and available.
    pub fn values(&self, layer: usize, use_pre: bool) -> Option<&[f32]> {
        if use_pre {
            self.pre.as_ref().map(|p| p[layer].as_slice())
        } else {
            Some(self.post[layer].as_slice())
        }
    }
}

/// An immutable, validated collection of input records for one model.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace {
    model_fingerprint: String,
    layer_widths: Vec<usize>,
    granularity: Granularity,
    records: Vec<InputRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    fingerprint: String,
    layer_widths: Vec<usize>,
    record_count: usize,
    has_pre: bool,
    granularity: Granularity,
}

impl ActivationTrace {
    pub fn new(
        model_fingerprint: impl Into<String>,
        layer_widths: Vec<usize>,
        granularity: Granularity,
        records: Vec<InputRecord>,
    ) -> Result<Self> {
        let trace = Self {
            model_fingerprint: model_fingerprint.into(),
            layer_widths,
            granularity,
            records,
        };
        trace.validate()?;
        Ok(trace)
    }

    fn validate(&self) -> Result<()> {
        if self.records.is_empty() {
            return Err(Error::Validation("trace has no records".into()));
        }
        if self.layer_widths.is_empty() || self.layer_widths.contains(&0) {
            return Err(Error::Validation(format!(
                "layer widths {:?} must be non-empty and positive",
                self.layer_widths
            )));
        }
        let has_pre = self.records[0].pre.is_some();
        let mut ids = HashSet::with_capacity(self.records.len());
        for (r, rec) in self.records.iter().enumerate() {
            check_vectors(&rec.post, &self.layer_widths, r, "post")?;
            match (&rec.pre, has_pre) {
                (Some(pre), true) => check_vectors(pre, &self.layer_widths, r, "pre")?,
                (None, false) => {}
                _ => {
                    return Err(Error::Validation(format!(
                        "record {r}: pre-activation vectors must be present on all records or none"
                    )))
                }
            }
            if !ids.insert(rec.input_id) {
                return Err(Error::Validation(format!(
                    "record {r}: duplicate input_id {}",
                    rec.input_id
                )));
            }
            if rec.label.is_some_and(|l| l > i32::MAX as u32) {
                return Err(Error::Validation(format!("record {r}: label out of range")));
            }
        }
        Ok(())
    }

    pub fn model_fingerprint(&self) -> &str {
        &self.model_fingerprint
    }

    pub fn layer_widths(&self) -> &[usize] {
        &self.layer_widths
    }

    pub fn granularity(&self) -> Granularity {
        self.granularity
    }

    pub fn records(&self) -> &[InputRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn has_pre(&self) -> bool {
        self.records[0].pre.is_some()
    }

    /// Total neuron count |N|.
    pub fn neuron_count(&self) -> usize {
        self.layer_widths.iter().sum()
    }

    /// Start of each layer in the flat neuron numbering.
    pub fn layer_offsets(&self) -> Vec<usize> {
        self.layer_widths
            .iter()
            .scan(0, |acc, w| {
                let start = *acc;
                *acc += w;
                Some(start)
            })
            .collect()
    }

    /// Post-activation values of one record, flattened in neuron order.
    pub fn flat_post(&self, record: usize) -> impl Iterator<Item = f64> + '_ {
        self.records[record]
            .post
            .iter()
            .flat_map(|layer| layer.iter().map(|v| f64::from(*v)))
    }

    /// A trace with the same header over a different record list.
    pub fn with_records(&self, records: Vec<InputRecord>) -> Result<Self> {
        Self::new(
            self.model_fingerprint.clone(),
            self.layer_widths.clone(),
            self.granularity,
            records,
        )
    }

    fn header(&self) -> Header {
        Header {
            fingerprint: self.model_fingerprint.clone(),
            layer_widths: self.layer_widths.clone(),
            record_count: self.records.len(),
            has_pre: self.has_pre(),
            granularity: self.granularity,
        }
    }
}

fn check_vectors(vectors: &[Vec<f32>], widths: &[usize], record: usize, which: &str) -> Result<()> {
    if vectors.len() != widths.len() {
        return Err(Error::Validation(format!(
            "record {record}: {} {which} vectors, expected {}",
            vectors.len(),
            widths.len()
        )));
    }
    for (l, (v, w)) in vectors.iter().zip(widths).enumerate() {
        if v.len() != *w {
            return Err(Error::Validation(format!(
                "record {record}: layer {l} {which} vector has {} values, expected {w}",
                v.len()
            )));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Validation(format!(
                "record {record}: layer {l} {which} vector has non-finite values"
            )));
        }
    }
    Ok(())
}

/// Runs every input through the model. Record `i` gets `input_id = i`.
pub fn trace_dataset(model: &NetworkModel, inputs: &[Sample]) -> Result<ActivationTrace> {
    trace_dataset_with(model, inputs, Granularity::Channel)
}

/// As [`trace_dataset`] with an explicit neuron granularity. Inputs are
/// evaluated in parallel; record order always follows input order.
pub fn trace_dataset_with(
    model: &NetworkModel,
    inputs: &[Sample],
    granularity: Granularity,
) -> Result<ActivationTrace> {
    if inputs.is_empty() {
        return Err(Error::Parameter("cannot trace an empty input sequence".into()));
    }
    let records = inputs
        .par_iter()
        .enumerate()
        .map(|(i, sample)| {
            let acts = model
                .forward_with(&sample.tensor, granularity)
                .map_err(|e| Error::Validation(format!("input {i}: {e}")))?;
            let to_f32 = |v: &Vec<f64>| v.iter().map(|x| *x as f32).collect::<Vec<f32>>();
            Ok(InputRecord {
                input_id: i as u32,
                label: sample.label,
                post: acts.iter().map(|a| to_f32(&a.post)).collect(),
                pre: Some(acts.iter().map(|a| to_f32(&a.pre)).collect()),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    ActivationTrace::new(
        model.fingerprint(),
        model.layer_widths(granularity),
        granularity,
        records,
    )
}

/// Encodes a trace into `out`. The trace is assumed valid.
pub fn encode_into<W: Write>(trace: &ActivationTrace, out: &mut W) -> std::io::Result<()> {
    codec::write_preamble(out, MAGIC, VERSION, &trace.header())?;
    for rec in &trace.records {
        out.write_u32::<LittleEndian>(rec.input_id)?;
        out.write_i32::<LittleEndian>(rec.label.map_or(-1, |l| l as i32))?;
        for l in 0..trace.layer_widths.len() {
            write_vector(out, &rec.post[l])?;
            if let Some(pre) = &rec.pre {
                write_vector(out, &pre[l])?;
            }
        }
    }
    Ok(())
}

fn write_vector<W: Write>(out: &mut W, v: &[f32]) -> std::io::Result<()> {
    out.write_u32::<LittleEndian>(v.len() as u32)?;
    codec::write_f32s(out, v)
}

pub fn encode(trace: &ActivationTrace) -> Vec<u8> {
    let mut out = Vec::new();
    encode_into(trace, &mut out).expect("in-memory write");
    out
}

/// Writes `trace` to `path`. Validation happens before the file is created.
pub fn write_trace(trace: &ActivationTrace, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    trace.validate()?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    encode_into(trace, &mut out)
        .and_then(|_| out.flush())
        .map_err(|e| Error::io(path, e))
}

/// Reads a whole trace into memory.
pub fn read_trace(path: impl AsRef<Path>) -> Result<ActivationTrace> {
    let reader = TraceReader::open(path)?;
    let fingerprint = reader.fingerprint().to_string();
    let widths = reader.layer_widths().to_vec();
    let granularity = reader.granularity();
    let records = reader.collect::<Result<Vec<_>>>()?;
    ActivationTrace::new(fingerprint, widths, granularity, records)
}

pub fn decode(bytes: &[u8]) -> Result<ActivationTrace> {
    let reader = TraceReader::new(bytes)?;
    let fingerprint = reader.fingerprint().to_string();
    let widths = reader.layer_widths().to_vec();
    let granularity = reader.granularity();
    let records = reader.collect::<Result<Vec<_>>>()?;
    ActivationTrace::new(fingerprint, widths, granularity, records)
}

/// Streaming record reader holding one record at a time.
pub struct TraceReader<R> {
    input: R,
    header: Header,
    next: usize,
    failed: bool,
}

impl TraceReader<BufReader<File>> {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::new(BufReader::new(file))
    }
}

impl<R: Read> TraceReader<R> {
    pub fn new(mut input: R) -> Result<Self> {
        let header: Header = codec::read_preamble(&mut input, MAGIC, VERSION, "atrc")?;
        if header.layer_widths.is_empty() || header.layer_widths.contains(&0) {
            return Err(Error::Validation(format!(
                "atrc: header layer widths {:?} must be non-empty and positive",
                header.layer_widths
            )));
        }
        Ok(Self {
            input,
            header,
            next: 0,
            failed: false,
        })
    }

    pub fn fingerprint(&self) -> &str {
        &self.header.fingerprint
    }

    pub fn layer_widths(&self) -> &[usize] {
        &self.header.layer_widths
    }

    pub fn record_count(&self) -> usize {
        self.header.record_count
    }

    pub fn granularity(&self) -> Granularity {
        self.header.granularity
    }

    pub fn has_pre(&self) -> bool {
        self.header.has_pre
    }

    fn read_record(&mut self) -> Result<InputRecord> {
        let r = self.next;
        let part = format!("record {r}");
        let input_id = self
            .input
            .read_u32::<LittleEndian>()
            .map_err(|_| codec::truncated("atrc", &part))?;
        let label = self
            .input
            .read_i32::<LittleEndian>()
            .map_err(|_| codec::truncated("atrc", &part))?;
        let label = match label {
            -1 => None,
            l if l >= 0 => Some(l as u32),
            l => return Err(Error::Validation(format!("record {r}: invalid label {l}"))),
        };
        let layers = self.header.layer_widths.len();
        let mut post = Vec::with_capacity(layers);
        let mut pre = self.header.has_pre.then(|| Vec::with_capacity(layers));
        for l in 0..layers {
            post.push(self.read_vector(r, l)?);
            if let Some(pre) = pre.as_mut() {
                pre.push(self.read_vector(r, l)?);
            }
        }
        Ok(InputRecord {
            input_id,
            label,
            post,
            pre,
        })
    }

    fn read_vector(&mut self, record: usize, layer: usize) -> Result<Vec<f32>> {
        let part = format!("record {record}");
        let len = self
            .input
            .read_u32::<LittleEndian>()
            .map_err(|_| codec::truncated("atrc", &part))? as usize;
        let want = self.header.layer_widths[layer];
        if len != want {
            return Err(Error::Validation(format!(
                "record {record}: layer {layer} has {len} values, header declares {want}"
            )));
        }
        let v = codec::read_f32s(&mut self.input, len, "atrc", &part)?;
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Validation(format!(
                "record {record}: layer {layer} has non-finite values"
            )));
        }
        Ok(v)
    }
}

impl<R: Read> Iterator for TraceReader<R> {
    type Item = Result<InputRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        if self.next == self.header.record_count {
            self.failed = true; // fused
            return match codec::expect_eof(&mut self.input, "atrc") {
                Ok(()) => None,
                Err(e) => Some(Err(e)),
            };
        }
        let rec = self.read_record();
        self.next += 1;
        if rec.is_err() {
            self.failed = true;
        }
        Some(rec)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SubsetMode {
    /// One seeded permutation shared by all sizes, so smaller subsets are
    /// contained in larger ones.
    #[default]
    Nested,
    /// A fresh draw per size.
    Independent,
}

/// Seeded sample of `size` records without replacement, in original order.
pub fn subset(trace: &ActivationTrace, size: usize, seed: u64) -> Result<ActivationTrace> {
    subset_with(trace, size, seed, SubsetMode::Nested)
}

pub fn subset_with(trace: &ActivationTrace, size: usize, seed: u64, mode: SubsetMode) -> Result<ActivationTrace> {
    let n = trace.len();
    if size == 0 || size > n {
        return Err(Error::Parameter(format!(
            "subset size {size} outside 1..={n}"
        )));
    }
    let seed = match mode {
        SubsetMode::Nested => seed,
        SubsetMode::Independent => seed ^ (size as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
    };
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut chosen = order[..size].to_vec();
    chosen.sort_unstable();
    trace.with_records(chosen.into_iter().map(|i| trace.records[i].clone()).collect())
}
