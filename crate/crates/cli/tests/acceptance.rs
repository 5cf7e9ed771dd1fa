//! Acceptance suite. Every criterion prints one `criterion N: PASS|FAIL`
//! line (written straight to stderr so it survives output capture) and then
//! asserts its outcome.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::Rng;
use symlevel_cli::commands::{self, Ctx, Outcome, DOWNSTREAM_FILE, METRICS_FILE, RESIDUALS_FILE};
use symlevel_cli::config::PipelineConfig;
use symlevel_cli::stage::Stage;
use symlevel_core::dataset::{load_dataset, render_glyph_corpus, save_dataset, Split};
use symlevel_core::format::idx::parse_idx;
use symlevel_core::format::{Blob, BlobData};
use symlevel_core::group::sample_spec;
use symlevel_core::image::rotate_image;
use symlevel_core::nn::circular_readout;
use symlevel_core::pseudolabel::{estimate_cyclic, estimate_gaussian, estimate_uniform, GaussianMode, KL_FLOOR};
use symlevel_core::seed::rng_from_seed;
use symlevel_core::testbed::{alpha_grid, check_l2_closed_form, check_l2_minimizer};
use symlevel_core::{Angle, Error, Interpolation, ModelBundle, SO2Element, SymmetrySpec};

fn report(n: usize, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "criterion {n}: {verdict} — {detail}");
}

fn scratch(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join(name);
    if dir.exists() {
        std::fs::remove_dir_all(&dir).unwrap();
    }
    dir
}

fn summary_value(summary: &str, key: &str) -> f64 {
    summary
        .lines()
        .find_map(|l| l.strip_prefix(&format!("{key} = ")))
        .unwrap_or_else(|| panic!("`{key}` missing from summary:\n{summary}"))
        .trim()
        .parse()
        .unwrap()
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt())
}

/// The two-class toy pipeline, run once through every stage and shared by
/// the criteria that need a trained model.
struct ToyRun {
    out: PathBuf,
    outcomes: Vec<Outcome>,
    elapsed: Duration,
}

impl ToyRun {
    fn summary(&self, stage: Stage) -> &str {
        &self.outcomes.iter().find(|o| o.stage == stage).unwrap().summary
    }

    fn pretrained(&self) -> ModelBundle {
        commands::load_pretrained(&self.out).unwrap()
    }
}

fn toy() -> &'static ToyRun {
    static RUN: OnceLock<ToyRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let out = scratch("toy-run");
        let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.cfg");
        let cfg = PipelineConfig::load(Some(&config), &[("out".into(), out.display().to_string())]).unwrap();
        let ctx = Ctx {
            force: true,
            ..Ctx::new(cfg)
        };
        let started = Instant::now();
        let outcomes = commands::cmd_run(&ctx).expect("toy pipeline runs");
        ToyRun {
            out,
            outcomes,
            elapsed: started.elapsed(),
        }
    })
}

#[test]
fn criterion_01_proposition_testbed() {
    let out = scratch("testbed");
    let cfg = PipelineConfig::load(None, &[("out".into(), out.display().to_string())]).unwrap();
    let started = Instant::now();
    let result = commands::cmd_testbed(&Ctx::new(cfg));
    let secs = started.elapsed().as_secs_f64();
    let (all_pass, detail) = match &result {
        Ok(o) => (
            true,
            format!(
                "{} checks, {} failed",
                summary_value(&o.summary, "checks"),
                summary_value(&o.summary, "failed")
            ),
        ),
        Err(e) => (false, format!("{e:#}")),
    };
    let pass = all_pass && secs < 60.0;
    report(1, pass, &format!("{detail}; {secs:.1} s (limit 60 s)"));
    assert!(pass);
}

#[test]
fn criterion_02_expected_penalty_closed_form() {
    let mut worst: f64 = 0.0;
    let mut all = true;
    let mut minimizers = true;
    for theta in [30.0, 60.0, 90.0] {
        for a in alpha_grid(theta) {
            let c = check_l2_closed_form(theta, a, 1_000_000, 0.01, 7).unwrap();
            all &= c.pass;
            let rel: f64 = c.witness.split("rel ").nth(1).unwrap().split(' ').next().unwrap().parse().unwrap();
            worst = worst.max(rel);
        }
        minimizers &= check_l2_minimizer(theta, &alpha_grid(theta), 1_000_000, 7).unwrap().pass;
    }
    let pass = all && minimizers;
    report(
        2,
        pass,
        &format!("worst relative error {worst:.2e} (limit 1e-2); minimizer at 0 for every θ: {minimizers}"),
    );
    assert!(pass);
}

#[test]
fn criterion_03_uniform_estimator() {
    let started = Instant::now();
    let spec = SymmetrySpec::uniform(60.0).unwrap();
    let mut rng = rng_from_seed(3);
    let estimates: Vec<f64> = (0..1000)
        .map(|_| {
            let abs: Vec<f64> = (0..45).map(|_| sample_spec(&spec, &mut rng).abs()).collect();
            estimate_uniform(&abs).unwrap()
        })
        .collect();
    let secs = started.elapsed().as_secs_f64();
    let (mean, std) = mean_std(&estimates);
    let pass = (59.0..=61.0).contains(&mean) && std <= 6.0 && secs < 10.0;
    report(
        3,
        pass,
        &format!("mean {mean:.3} (target [59, 61]), std {std:.3} (limit 6), {secs:.3} s"),
    );
    assert!(pass);
}

#[test]
fn criterion_04_gaussian_estimator() {
    let spec = SymmetrySpec::gaussian(18.0).unwrap();
    let mut rng = rng_from_seed(4);
    let draws: Vec<Vec<f64>> = (0..1000)
        .map(|_| (0..45).map(|_| sample_spec(&spec, &mut rng).abs()).collect())
        .collect();
    let run = |mode| -> f64 {
        let est: Vec<f64> = draws.iter().map(|d| estimate_gaussian(d, mode).unwrap()).collect();
        mean_std(&est).0
    };
    let default = run(GaussianMode::HalfNormalMean);
    let literal = run(GaussianMode::Literal);
    let rel = (default - 18.0).abs() / 18.0;
    let pass = rel <= 0.05;
    report(
        4,
        pass,
        &format!(
            "default mean {default:.3} ({:.1}% off, limit 5%); literal mode mean {literal:.3} (bias {:+.1}%, reported only)",
            100.0 * rel,
            100.0 * (literal - 18.0) / 18.0
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_05_cyclic_estimator() {
    let mut rng = rng_from_seed(5);
    let mut worst = 1.0f64;
    let mut detail = Vec::new();
    for n in 1..=8 {
        let spec = SymmetrySpec::cyclic(n).unwrap();
        let correct = (0..100)
            .filter(|_| {
                let angles: Vec<Angle> = (0..150)
                    .map(|_| {
                        let g = sample_spec(&spec, &mut rng);
                        let jitter = SO2Element::from_degrees(rng.random_range(-2.0..=2.0)).unwrap();
                        SO2Element::from_angle(g).compose(jitter).angle()
                    })
                    .collect();
                estimate_cyclic(&angles, 8, KL_FLOOR).unwrap() == n
            })
            .count();
        let rate = correct as f64 / 100.0;
        worst = worst.min(rate);
        detail.push(format!("n={n}:{correct}%"));
    }
    let pass = worst >= 0.95;
    report(5, pass, &format!("{} (limit 95% each)", detail.join(" ")));
    assert!(pass);
}

#[test]
fn criterion_06_equivariance_suite() {
    // readout covariance: cyclically shifting the scores rotates the vector
    let mut rng = rng_from_seed(6);
    let k = 16;
    let mut readout_err: f64 = 0.0;
    for _ in 0..50 {
        let scores: Vec<f32> = (0..k).map(|_| rng.random_range(-3.0..3.0)).collect();
        let base = circular_readout(&scores);
        for s in 1..k {
            let shifted: Vec<f32> = (0..k).map(|r| scores[(r + k - s) % k]).collect();
            let v = circular_readout(&shifted).vector;
            let (sin, cos) = (2.0 * std::f64::consts::PI * s as f64 / k as f64).sin_cos();
            let expect = [
                cos * base.vector[0] - sin * base.vector[1],
                sin * base.vector[0] + cos * base.vector[1],
            ];
            readout_err = readout_err.max((v[0] - expect[0]).abs().max((v[1] - expect[1]).abs()));
        }
    }

    let run = toy();
    let bundle = run.pretrained();
    let test = load_dataset(&Stage::Data.dir(&run.out).join(Split::Test.as_str())).unwrap();
    let images = &test.images;

    // encoder invariance at quarter turns
    let mut inv_err: f64 = 0.0;
    for x in images {
        let z = bundle.encode(x).unwrap();
        let norm = z.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
        for q in 1..4 {
            let xr = rotate_image(x, SO2Element::from_degrees(90.0 * q as f64).unwrap(), Interpolation::Bilinear)
                .unwrap();
            let zr = bundle.encode(&xr).unwrap();
            let d = z.iter().zip(&zr).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>().sqrt();
            inv_err = inv_err.max(d / norm);
        }
    }

    // ψ equivariance at multiples of 360/K
    let step = 360.0 / bundle.config().group_order as f64;
    let base: Vec<f64> = bundle
        .analyze(images)
        .unwrap()
        .iter()
        .map(|a| a.readout.angle.degrees())
        .collect();
    let mut deviations = Vec::new();
    for j in 1..bundle.config().group_order {
        let g = SO2Element::from_degrees(step * j as f64).unwrap();
        let rotated: Vec<_> = images
            .iter()
            .map(|x| rotate_image(x, g, Interpolation::Bilinear).unwrap())
            .collect();
        for (a, b) in bundle.analyze(&rotated).unwrap().iter().zip(&base) {
            let d = a.readout.angle.degrees() - b - step * j as f64;
            deviations.push(Angle::new(d).unwrap().abs());
        }
    }
    deviations.sort_by(f64::total_cmp);
    let median = deviations[deviations.len() / 2];

    let pass = readout_err <= 1e-9 && inv_err <= 1e-3 && median <= 2.0;
    report(
        6,
        pass,
        &format!(
            "readout covariance error {readout_err:.1e} (limit 1e-9); quarter-turn encoder error {inv_err:.1e} (limit 1e-3); \
             median ψ deviation at {step}° steps {median:.3}° (limit 2°)"
        ),
    );
    assert!(pass);
}

#[derive(serde::Deserialize)]
struct MetricsRow {
    class: usize,
    true_level: f64,
    mean_level: f64,
}

#[test]
fn criterion_07_end_to_end_toy_run() {
    let run = toy();
    let path = Stage::Eval.dir(&run.out).join(METRICS_FILE);
    let rows: Vec<MetricsRow> = csv::Reader::from_path(&path)
        .unwrap()
        .deserialize()
        .collect::<Result<_, _>>()
        .unwrap();
    let within = rows.iter().all(|r| (r.mean_level - r.true_level).abs() <= 15.0);
    let minutes = run.elapsed.as_secs_f64() / 60.0;
    let pass = rows.len() == 2 && within && minutes <= 30.0;
    let classes: Vec<String> = rows
        .iter()
        .map(|r| format!("class {} mean Θ {:.2} vs {:.0}", r.class, r.mean_level, r.true_level))
        .collect();
    report(
        7,
        pass,
        &format!("{} (tolerance ±15°); pipeline {minutes:.1} min (limit 30)", classes.join(", ")),
    );
    assert!(pass);
}

#[test]
fn criterion_08_ood_toy_run() {
    let accuracy = summary_value(toy().summary(Stage::Ood), "accuracy");
    let pass = accuracy >= 0.8;
    report(8, pass, &format!("OOD accuracy {:.1}% (limit 80%)", 100.0 * accuracy));
    assert!(pass);
}

#[derive(serde::Deserialize)]
struct ResidualRow {
    residual: f64,
}

#[derive(serde::Deserialize)]
struct DownstreamRow {
    raw: f64,
    standardized: f64,
}

#[test]
fn criterion_09_standardization() {
    // oracle ψ on ten fully rotated glyph classes
    let out = scratch("standardize-oracle");
    let overrides = [
        ("out".to_string(), out.display().to_string()),
        ("preset".to_string(), "full".to_string()),
        ("per_class".to_string(), "60".to_string()),
    ];
    let ctx = Ctx {
        oracle: true,
        ..Ctx::new(PipelineConfig::load(None, &overrides).unwrap())
    };
    commands::cmd_gen_data(&ctx).unwrap();
    commands::cmd_standardize(&ctx).unwrap();
    let dir = Stage::Standardize.dir(&out);
    let residuals: Vec<ResidualRow> = csv::Reader::from_path(dir.join(RESIDUALS_FILE))
        .unwrap()
        .deserialize()
        .collect::<Result<_, _>>()
        .unwrap();
    let exact = residuals.iter().all(|r| r.residual == 0.0);
    let cmp: DownstreamRow = csv::Reader::from_path(dir.join(DOWNSTREAM_FILE))
        .unwrap()
        .deserialize()
        .next()
        .unwrap()
        .unwrap();
    let gain = cmp.standardized - cmp.raw;

    // trained ψ on the toy run
    let toy_summary = toy().summary(Stage::Standardize);
    let residual_std = summary_value(toy_summary, "residual_std");
    let raw_std = summary_value(toy_summary, "raw_angle_std");

    let pass = exact && gain >= 0.10 && residual_std < raw_std;
    report(
        9,
        pass,
        &format!(
            "oracle residuals all exactly 0: {exact} ({} samples); nearest-centroid {:.1}% → {:.1}% (gain {:.1} pp, limit 10); \
             trained residual std {residual_std:.2}° < raw {raw_std:.2}°",
            residuals.len(),
            100.0 * cmp.raw,
            100.0 * cmp.standardized,
            100.0 * gain
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_10_persistence() {
    let mut failures = Vec::new();
    let mut check = |ok: bool, what: &str| {
        if !ok {
            failures.push(what.to_string());
        }
    };

    // SYMT: bit-exact for awkward floats and for bytes
    let floats = vec![0.0, -0.0, 1.5, f32::MIN_POSITIVE, f32::MAX, f32::NAN, -f32::INFINITY];
    let blob = Blob::f32(vec![7], floats.clone()).unwrap();
    let bytes = blob.encode();
    check(&bytes[..4] == b"SYMT", "SYMT magic");
    match Blob::decode(&bytes, "f32").unwrap().data() {
        BlobData::F32(v) => check(
            v.iter().map(|x| x.to_bits()).eq(floats.iter().map(|x| x.to_bits())),
            "f32 payload bits",
        ),
        BlobData::U8(_) => check(false, "f32 dtype"),
    }
    check(Blob::decode(&bytes, "f32").unwrap().encode() == bytes, "f32 re-encode");
    let u8_blob = Blob::u8(vec![2, 3], (0..6).collect()).unwrap();
    check(Blob::decode(&u8_blob.encode(), "u8").unwrap() == u8_blob, "u8 round trip");
    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    check(matches!(Blob::decode(&bad_magic, "m"), Err(Error::Format { .. })), "SYMT bad magic");
    check(
        matches!(Blob::decode(&bytes[..bytes.len() - 1], "t"), Err(Error::Truncated { .. })),
        "SYMT truncation",
    );
    let mut trailing = bytes.clone();
    trailing.push(0);
    check(matches!(Blob::decode(&trailing, "x"), Err(Error::Format { .. })), "SYMT trailing bytes");

    // dataset manifest + image blob
    let dir = tempfile::tempdir().unwrap();
    let corpus = render_glyph_corpus(3, 4, 16, 10);
    let profile = symlevel_core::dataset::SymmetryProfile::parse_list("uniform:60,gaussian:18,uniform:0").unwrap();
    let ds = symlevel_core::dataset::build_dataset(&corpus, &profile, 10, Split::Val).unwrap();
    save_dataset(&ds, dir.path()).unwrap();
    let loaded = load_dataset(dir.path()).unwrap();
    check(loaded == ds, "dataset round trip");
    check(
        loaded
            .records
            .iter()
            .zip(&ds.records)
            .all(|(a, b)| a.angle.degrees().to_bits() == b.angle.degrees().to_bits()),
        "angle bits",
    );
    let manifest = dir.path().join(symlevel_core::dataset::MANIFEST_FILE);
    let text = std::fs::read_to_string(&manifest).unwrap();
    std::fs::write(&manifest, text.replacen(",val", ",nope", 1)).unwrap();
    check(matches!(load_dataset(dir.path()), Err(Error::Format { .. })), "manifest corruption");

    // IDX
    let mut images = vec![0, 0, 8, 3];
    for d in [2u32, 2, 3] {
        images.extend_from_slice(&d.to_be_bytes());
    }
    images.extend(0..12u8);
    let parsed = parse_idx(&images, "images").unwrap();
    check(parsed.dims == vec![2, 2, 3] && parsed.data == (0..12).collect::<Vec<u8>>(), "IDX parse");
    let mut labels = vec![0, 0, 8, 1];
    labels.extend_from_slice(&2u32.to_be_bytes());
    labels.extend([7, 1]);
    check(parse_idx(&labels, "labels").unwrap().data == vec![7, 1], "IDX labels");
    check(
        matches!(parse_idx(&images[..images.len() - 1], "t"), Err(Error::Truncated { .. })),
        "IDX truncation",
    );
    let mut wrong = images.clone();
    wrong[3] = 9;
    check(matches!(parse_idx(&wrong, "m"), Err(Error::Format { .. })), "IDX bad magic");

    let pass = failures.is_empty();
    let detail = if pass {
        "SYMT, manifest and IDX round trips bit-exact; corruptions rejected with structured errors".to_string()
    } else {
        format!("failed: {}", failures.join(", "))
    };
    report(10, pass, &detail);
    assert!(pass);
}
