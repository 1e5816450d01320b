// SPDX-License-Identifier: Apache-2.0

//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.
//!
//! Run with `cargo test -p dnncov --test acceptance`.

mod common;

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use common::*;
use dnncov::metrics::{corner_counts, CoverageResult, Metric};
use dnncov::pipeline::{self, CoverRequest};
use dnncov::report::CoverageReport;
use dnncov::{
    build_profile, kmnc, nbc, nc, nnw, profile, snac, topknc, trace, ActivationTrace, Error,
    Normalization, Quantifier,
};
use rand::Rng;

type Outcome = std::result::Result<String, String>;
type Criterion<'a> = (&'static str, Box<dyn Fn() -> Outcome + 'a>);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit: Duration) -> std::result::Result<(), String> {
    ensure(elapsed <= limit, || format!("took {elapsed:.1?}, limit {limit:?}"))
}

fn ok<T>(r: dnncov::Result<T>) -> std::result::Result<T, String> {
    r.map_err(|e| e.to_string())
}

const RANDOM_TRACES: u64 = 200;
const EPSILONS: [f64; 8] = [-1.5, -1.0, -0.5, 0.0, 0.5, 1.0, 1.5, 2.0];
const TOPK_GRID: [usize; 7] = [5, 10, 15, 20, 25, 30, 35];

fn nc_monotonicity() -> Outcome {
    let start = Instant::now();
    let grid: Vec<f64> = (0..=10).map(|i| f64::from(i) / 10.0).collect();
    let mut checks = 0;
    for seed in 0..RANDOM_TRACES {
        let (_, test) = random_instance(seed);
        for q in [Quantifier::Exists, Quantifier::Forall] {
            for norm in [Normalization::LayerMinmax, Normalization::Raw] {
                let covered: Vec<u64> = grid
                    .iter()
                    .map(|t| ok(nc(&test, *t, q, norm)).map(|r| r.covered))
                    .collect::<std::result::Result<_, _>>()?;
                ensure(covered.windows(2).all(|w| w[0] >= w[1]), || {
                    format!("seed {seed} {q:?}/{norm:?}: {covered:?}")
                })?;
                checks += 1;
            }
        }
    }
    within(start.elapsed(), Duration::from_secs(10))?;
    Ok(format!("{checks} sweeps in {:.2?}", start.elapsed()))
}

fn nbc_snac_identity() -> Outcome {
    for seed in 0..RANDOM_TRACES {
        let (train, test) = random_instance(seed);
        let k = 1 + (seed as usize % 50);
        let profile = ok(build_profile(&train, k))?;
        let n = test.neuron_count() as u128;
        let mut prev: Option<(CoverageResult, CoverageResult)> = None;
        for eps in EPSILONS {
            let b = ok(nbc(&test, &profile, eps))?;
            let s = ok(snac(&test, &profile, eps))?;
            let (lower, _) = ok(corner_counts(&test, &profile, eps))?;
            // 2·b.covered/b.domain − s.covered/s.domain == lower/n, in exact integers.
            let (bc, bd, sc, sd) = (b.covered as u128, b.domain as u128, s.covered as u128, s.domain as u128);
            let lhs = (2 * bc * sd) as i128 - (sc * bd) as i128;
            ensure(lhs * n as i128 == (lower as u128 * bd * sd) as i128, || {
                format!("seed {seed} eps {eps}: 2*NBC - SNAC != lower ratio ({b:?}, {s:?}, lower {lower})")
            })?;
            if let Some((pb, ps)) = &prev {
                ensure(pb.covered >= b.covered && ps.covered >= s.covered, || {
                    format!("seed {seed}: coverage rose at eps {eps}")
                })?;
            }
            prev = Some((b, s));
        }
    }
    Ok(format!("{RANDOM_TRACES} traces x {} epsilons", EPSILONS.len()))
}

fn oracle_equivalence() -> Outcome {
    let start = Instant::now();
    for seed in 0..100u64 {
        let (train, test) = random_instance(1000 + seed);
        for t in [0.0, 0.25, 0.5, 0.75] {
            for q in [Quantifier::Exists, Quantifier::Forall] {
                for (norm, minmax) in [(Normalization::Raw, false), (Normalization::LayerMinmax, true)] {
                    let got = ok(nc(&test, t, q, norm))?;
                    let want = naive_nc(&test, t, q, minmax);
                    ensure((got.covered as usize, got.domain as usize) == want, || {
                        format!("NC seed {seed} t={t} {q:?} {norm:?}: {got:?} vs {want:?}")
                    })?;
                }
            }
        }
        for k in [1, 2, 7, 100] {
            let p = naive_profile(&train, k);
            let got = ok(kmnc(&test, &p))?;
            let want = naive_kmnc(&test, &p);
            ensure((got.covered as usize, got.domain as usize) == want, || {
                format!("KMNC seed {seed} k={k}: {got:?} vs {want:?}")
            })?;
            for eps in EPSILONS {
                let (lower, upper) = naive_corners(&test, &p, eps);
                let b = ok(nbc(&test, &p, eps))?;
                let s = ok(snac(&test, &p, eps))?;
                ensure(
                    b.covered as usize == lower + upper
                        && b.domain as usize == 2 * test.neuron_count()
                        && s.covered as usize == upper
                        && s.domain as usize == test.neuron_count(),
                    || format!("NBC/SNAC seed {seed} k={k} eps={eps}: {b:?} {s:?} vs ({lower}, {upper})"),
                )?;
            }
        }
        let max_width = *test.layer_widths().iter().max().unwrap();
        for k in 1..=max_width + 1 {
            let got = ok(topknc(&test, k))?;
            let want = naive_topknc(&test, k);
            ensure((got.covered as usize, got.domain as usize) == want, || {
                format!("TopKNC seed {seed} k={k}: {got:?} vs {want:?}")
            })?;
        }
    }

    let mut mcdc_checks = 0;
    for seed in 0..100u64 {
        let mut r = rng(5000 + seed);
        let model = random_dense_model(&mut r, 8);
        let width = model.input_shape()[0];
        let count = r.gen_range(2..=20);
        let mut inputs = random_inputs(&mut r, width, count);
        if r.gen_bool(0.2) {
            let dup = inputs[0].clone();
            inputs[1] = dup;
        }
        let test = ok(trace::trace_dataset(&model, &inputs))?;
        let train = ok(trace::trace_dataset(&model, &random_inputs(&mut r, width, 30)))?;
        let profile = ok(build_profile(&train, [1, 5, 10][seed as usize % 3]))?;
        for variant in McdcVariant::ALL {
            for sign_source in [SignSource::PreActivation, SignSource::PostActivation] {
                for isolation in [Isolation::Strict, Isolation::Relaxed] {
                    let cfg = McdcConfig {
                        variant,
                        sign_source,
                        isolation,
                        value_threshold: [0.5, 1.0, 3.0][seed as usize % 3],
                        ..McdcConfig::default()
                    };
                    let got = ok(dnncov::mcdc::covered_pairs(&test, &model, &profile, &cfg))?;
                    let want = brute_force_mcdc(&test, &model, &profile, &cfg);
                    ensure(got == want, || {
                        format!("MC/DC seed {seed} {variant} {sign_source:?} {isolation:?}: {} vs {} pairs", got.len(), want.len())
                    })?;
                    let total = ok(dnncov::enumerate_pairs(&model))?.len();
                    let res = ok(dnncov::mcdc_coverage(&test, &model, &profile, &cfg))?;
                    ensure(res.covered as usize == want.len() && res.domain as usize == total, || {
                        format!("MC/DC seed {seed} {variant}: counts {res:?}, oracle {}", want.len())
                    })?;
                    mcdc_checks += 1;
                }
            }
        }
    }
    within(start.elapsed(), Duration::from_secs(60))?;
    Ok(format!("100 metric instances, {mcdc_checks} MC/DC configurations, {:.2?}", start.elapsed()))
}

fn kmnc_self_coverage() -> Outcome {
    for seed in 0..RANDOM_TRACES {
        let (train, _) = random_instance(seed);
        let p1 = ok(build_profile(&train, 1))?;
        let r1 = ok(kmnc(&train, &p1))?;
        ensure(r1.ratio == 1.0, || format!("seed {seed}: k=1 ratio {}", r1.ratio))?;
        for k in [10, 100, 1000] {
            let r = ok(kmnc(&train, &ok(p1.with_k(k))?))?;
            let bound = (train.len() * train.neuron_count()) as u64;
            ensure(r.ratio <= 1.0 && r.covered <= bound, || {
                format!("seed {seed} k={k}: {r:?}, bound {bound}")
            })?;
        }
    }
    Ok(format!("{RANDOM_TRACES} traces, k in {{1, 10, 100, 1000}}"))
}

fn topk_checks(trace: &ActivationTrace, what: &str) -> std::result::Result<(), String> {
    let max_width = *trace.layer_widths().iter().max().unwrap();
    for k in [max_width, max_width + 1, max_width.max(35)] {
        let r = ok(topknc(trace, k))?;
        ensure(r.ratio == 1.0, || format!("{what}: k={k} >= max width {max_width} gives {}", r.ratio))?;
    }
    let covered: Vec<u64> = TOPK_GRID
        .iter()
        .map(|k| ok(topknc(trace, *k)).map(|r| r.covered))
        .collect::<std::result::Result<_, _>>()?;
    ensure(covered.windows(2).all(|w| w[0] <= w[1]), || format!("{what}: {covered:?}"))
}

fn topknc_saturation() -> Outcome {
    for seed in 0..RANDOM_TRACES {
        let (_, test) = random_instance(seed);
        topk_checks(&test, &format!("seed {seed}"))?;
    }
    let model = ok(nnw::load_model(fixtures().join("models/lenet5_fixture.nnw")))?;
    let samples = ok(dnncov::load_idx_dataset(
        fixtures().join("mnist/mini-images-idx3-ubyte"),
        fixtures().join("mnist/mini-labels-idx1-ubyte"),
    ))?;
    topk_checks(&ok(trace::trace_dataset(&model, &samples))?, "lenet-7 fixture")?;
    Ok(format!("{RANDOM_TRACES} random traces and one fixture trace"))
}

fn fixture_config() -> PathBuf {
    fixtures().join("experiment.toml")
}

fn rows<'a>(report: &'a CoverageReport, model: &str, metric: Metric) -> Vec<&'a dnncov::report::ReportRow> {
    report.rows.iter().filter(|r| r.model == model && r.metric == metric).collect()
}

fn paper_trends(out: &Path) -> Outcome {
    let start = Instant::now();
    let (report, _) = ok(pipeline::experiment_to_dir(&fixture_config(), Some(out)))?;
    let elapsed = start.elapsed();
    ensure(report.metadata.test_records == 1000, || {
        format!("expected 1000 test records, got {}", report.metadata.test_records)
    })?;
    let mut summary = Vec::new();
    for info in &report.metadata.models {
        let name = info.name.as_str();
        let nc_rows = rows(&report, name, Metric::Nc);
        ensure(nc_rows.len() == 5, || format!("{name}: {} NC rows", nc_rows.len()))?;
        ensure(nc_rows.iter().all(|r| r.ratio > 0.0 && r.ratio < 1.0), || {
            format!("{name}: NC outside (0, 1): {:?}", nc_rows.iter().map(|r| r.ratio).collect::<Vec<_>>())
        })?;
        ensure(nc_rows.windows(2).all(|w| w[0].ratio >= w[1].ratio), || {
            format!("{name}: NC increases: {:?}", nc_rows.iter().map(|r| r.ratio).collect::<Vec<_>>())
        })?;
        let km = rows(&report, name, Metric::Kmnc);
        ensure(km.len() == 3 && km.windows(2).all(|w| w[0].ratio >= w[1].ratio), || {
            format!("{name}: KMNC not non-increasing: {:?}", km.iter().map(|r| r.ratio).collect::<Vec<_>>())
        })?;
        ensure(km.iter().all(|r| r.ratio > 0.0 && r.ratio < 1.0), || format!("{name}: KMNC outside (0, 1)"))?;
        for v in McdcVariant::ALL {
            let m = rows(&report, name, Metric::Mcdc(v));
            ensure(m.len() == 4, || format!("{name} {v}: {} rows", m.len()))?;
            ensure(m.windows(2).all(|w| w[0].covered <= w[1].covered && w[0].ratio <= w[1].ratio), || {
                format!("{name} {v}: not non-decreasing: {:?}", m.iter().map(|r| r.ratio).collect::<Vec<_>>())
            })?;
            ensure(m.iter().all(|r| r.ratio > 0.0 && r.ratio < 1.0), || {
                format!("{name} {v}: outside (0, 1): {:?}", m.iter().map(|r| r.ratio).collect::<Vec<_>>())
            })?;
        }
        let first = |m: Metric| rows(&report, name, m).first().map_or(0.0, |r| r.ratio);
        summary.push(format!("{name}: NC(0.3)={:.4} KMNC(10)={:.4}", first(Metric::Nc), first(Metric::Kmnc)));
    }
    within(elapsed, Duration::from_secs(300))?;
    Ok(format!("{}; {elapsed:.1?}", summary.join(", ")))
}

fn report_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    for sub in [dir.to_path_buf(), dir.join("plots")] {
        let mut names: Vec<_> = std::fs::read_dir(&sub)
            .map(|d| d.filter_map(|e| e.ok()).map(|e| e.path()).filter(|p| p.is_file()).collect())
            .unwrap_or_default();
        names.sort();
        for p in names {
            let rel = p.strip_prefix(dir).unwrap().display().to_string();
            files.push((rel, std::fs::read(&p).unwrap()));
        }
    }
    files
}

fn determinism(out: &Path) -> Outcome {
    // The first run is the one left behind by the trend criterion.
    let first = report_files(out);
    ensure(first.len() >= 3, || format!("only {} report files from the first run", first.len()))?;
    std::fs::remove_dir_all(out).map_err(|e| e.to_string())?;
    ok(pipeline::experiment_to_dir(&fixture_config(), Some(out)))?;
    let second = report_files(out);
    ensure(first.len() == second.len(), || "different file sets".into())?;
    for ((name, a), (_, b)) in first.iter().zip(&second) {
        ensure(a == b, || format!("{name} differs between runs"))?;
    }
    Ok(format!("{} files byte-identical across two full runs", first.len()))
}

fn expect_stage(result: dnncov::Result<impl std::fmt::Debug>, stage: &str, what: &str) -> std::result::Result<(), String> {
    match result {
        Ok(v) => Err(format!("{what}: accepted ({v:?})")),
        Err(e) => ensure(e.stage() == Some(stage) && e.to_string().starts_with(&format!("[{stage}]")), || {
            format!("{what}: expected stage {stage}, got {e}")
        }),
    }
}

fn format_conformance() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = dir.path();
    let mut checked = 0;

    // Byte-identical round trips.
    for m in ["lenet_5layer", "lenet_6layer", "lenet5_fixture"] {
        let bytes = std::fs::read(fixtures().join(format!("models/{m}.nnw"))).map_err(|e| e.to_string())?;
        let model = ok(nnw::decode(&bytes))?;
        ensure(nnw::encode(&model) == bytes, || format!("{m}.nnw re-encodes differently"))?;
        let atrc = std::fs::read(fixtures().join(format!("reference/{m}-mini.atrc"))).map_err(|e| e.to_string())?;
        let t = ok(trace::decode(&atrc))?;
        ensure(trace::encode(&t) == atrc, || format!("{m}-mini.atrc re-encodes differently"))?;
        let p = ok(build_profile(&t, 10))?;
        let aprf = profile::encode(&p);
        ensure(profile::encode(&ok(profile::decode(&aprf))?) == aprf, || "aprf round trip".into())?;
        checked += 3;
    }

    // Malformed corpus through the staged pipeline.
    let model_path = fixtures().join("models/lenet_5layer.nnw");
    let mini = pipeline::DataFiles {
        format: dnncov::dataset::DatasetFormat::Idx,
        files: vec![
            fixtures().join("mnist/mini-images-idx3-ubyte"),
            fixtures().join("mnist/mini-labels-idx1-ubyte"),
        ],
        limit: None,
    };
    let good_trace = d.join("good.atrc");
    ok(pipeline::trace_to_file(&model_path, &mini, dnncov::Granularity::Channel, &good_trace))?;
    let good_profile = d.join("good.aprf");
    ok(pipeline::profile_to_file(&good_trace, 10, &good_profile))?;
    let trace_bytes = std::fs::read(&good_trace).unwrap();
    let profile_bytes = std::fs::read(&good_profile).unwrap();
    let model_bytes = std::fs::read(&model_path).unwrap();
    let write = |name: &str, bytes: &[u8]| {
        let p = d.join(name);
        std::fs::write(&p, bytes).unwrap();
        p
    };
    let req = CoverRequest {
        sweep: dnncov::experiment::SweepSpec {
            nc_thresholds: Some(vec![0.5]),
            ..Default::default()
        },
        ..Default::default()
    };
    let out = d.join("x.atrc");

    for (name, bytes) in [
        ("truncated", &model_bytes[..model_bytes.len() - 3]),
        ("bad-magic", &[b"NNWX".as_slice(), &model_bytes[4..]].concat()[..]),
        ("header-only", &model_bytes[..40]),
    ] {
        let p = write(&format!("{name}.nnw"), bytes);
        expect_stage(pipeline::trace_to_file(&p, &mini, dnncov::Granularity::Channel, &out), "load-model", &format!("{name}.nnw"))?;
        checked += 1;
    }
    // A dense layer whose declared inputs disagree with the conv output.
    let text = String::from_utf8_lossy(&model_bytes[10..]).into_owned();
    let hlen = u32::from_le_bytes(model_bytes[6..10].try_into().unwrap()) as usize;
    let header = &text[..hlen];
    let bad_header = header.replace("\"inputs\":192", "\"inputs\":191");
    ensure(bad_header != header, || "fixture header layout changed".into())?;
    let mut width_bad = model_bytes[..6].to_vec();
    width_bad.extend((bad_header.len() as u32).to_le_bytes());
    width_bad.extend(bad_header.as_bytes());
    width_bad.extend(&model_bytes[10 + hlen..]);
    let p = write("width.nnw", &width_bad);
    expect_stage(nnw::load_model(&p).map_err(|e| e.in_stage("load-model")), "load-model", "width-mismatch .nnw")?;
    checked += 1;

    for (name, bytes) in [
        ("truncated", trace_bytes[..trace_bytes.len() - 5].to_vec()),
        ("bad-magic", [b"ATRX".as_slice(), &trace_bytes[4..]].concat()),
        ("extra", [trace_bytes.as_slice(), &[0u8; 4]].concat()),
    ] {
        let p = write(&format!("{name}.atrc"), &bytes);
        expect_stage(pipeline::cover_files(&p, &good_profile, None, "m", &req), "read-trace", &format!("{name}.atrc"))?;
        expect_stage(pipeline::profile_to_file(&p, 10, &d.join("p.aprf")), "read-trace", &format!("{name}.atrc"))?;
        checked += 2;
    }
    for (name, bytes) in [
        ("truncated", profile_bytes[..profile_bytes.len() - 1].to_vec()),
        ("bad-magic", [b"APRX".as_slice(), &profile_bytes[4..]].concat()),
    ] {
        let p = write(&format!("{name}.aprf"), &bytes);
        expect_stage(pipeline::cover_files(&good_trace, &p, None, "m", &req), "read-profile", &format!("{name}.aprf"))?;
        checked += 1;
    }
    // Trace and profile from different models.
    let other = d.join("other.atrc");
    ok(pipeline::trace_to_file(&fixtures().join("models/lenet_6layer.nnw"), &mini, dnncov::Granularity::Channel, &other))?;
    expect_stage(pipeline::cover_files(&other, &good_profile, None, "m", &req), "check", "profile/trace width mismatch")?;
    expect_stage(
        pipeline::cover_files(&good_trace, &good_profile, Some(&fixtures().join("models/lenet_6layer.nnw")), "m", &req),
        "check",
        "trace/model fingerprint mismatch",
    )?;
    checked += 2;
    // A record whose layer vector is shorter than declared.
    let t = ok(trace::decode(&trace_bytes))?;
    let mut recs = t.records().to_vec();
    recs[3].post[0].pop();
    ensure(
        ActivationTrace::new(t.model_fingerprint(), t.layer_widths().to_vec(), t.granularity(), recs)
            .is_err_and(|e| matches!(e, Error::Validation(ref m) if m.contains("record 3"))),
        || "short record not rejected".into(),
    )?;
    checked += 1;

    let test = ok(dnncov::load_idx_dataset(
        fixtures().join("mnist/t10k-images-idx3-ubyte.gz"),
        fixtures().join("mnist/t10k-labels-idx1-ubyte.gz"),
    ))?;
    ensure(test.len() == 10_000, || format!("IDX test split has {} items", test.len()))?;
    Ok(format!("{checked} format checks, MNIST test split = {} items", test.len()))
}

fn main() {
    let out = tempfile::tempdir().expect("temp dir");
    let experiment_dir = out.path().join("experiment");
    let criteria: Vec<Criterion> = vec![
        ("NC monotonicity", Box::new(nc_monotonicity)),
        ("NBC/SNAC identity", Box::new(nbc_snac_identity)),
        ("Oracle equivalence", Box::new(oracle_equivalence)),
        ("KMNC self-coverage", Box::new(kmnc_self_coverage)),
        ("TopKNC saturation and monotonicity", Box::new(topknc_saturation)),
        ("Paper-trend reproduction", Box::new(|| paper_trends(&experiment_dir))),
        ("Determinism", Box::new(|| determinism(&experiment_dir))),
        ("Format conformance", Box::new(format_conformance)),
    ];
    let mut failed = 0;
    for (name, check) in &criteria {
        let start = Instant::now();
        match check() {
            Ok(detail) => println!("PASS  {name}: {detail} [{:.2?}]", start.elapsed()),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name}: {why} [{:.2?}]", start.elapsed());
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
