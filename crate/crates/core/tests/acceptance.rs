//! Acceptance criteria. Each test prints one `PASS`/`FAIL` line with the
//! measured values before asserting, so `cargo test --test acceptance --
//! --nocapture` doubles as a report.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use facepipe::colornorm::equalize;
use facepipe::dataset::{
    class_counts, filter_single_label, stratified_kfold, EmotionLabel, Manifest,
};
use facepipe::metrics::{build_report, confusion, mean_of, sample_sd, MetricsReport};
use facepipe::pipeline::{mask_half, normalize_face, Condition, Half, MaskMode, NormalizeConfig};
use facepipe::synth::{feph_like_manifest, random_face, xor_corpus};
use facepipe::trainer::{
    grad, loss, run_cv, sam_step, sam_update, train_stage, Example, FeatureVector,
    MemoryImageSource, ModelParams, Scope, Stage, TrainConfig,
};
use facepipe::ImageBuffer;

/// Stated tolerance of the published three-decimal table values.
const TABLE_TOL: f64 = 0.0005;
/// Slack for f64 representation error only (0.5615 vs 0.562 sits exactly on
/// the tolerance boundary).
const REPR_SLACK: f64 = 1e-12;
const GRAD_REL_TOL: f64 = 1e-4;
const SAM_NORM_TOL: f64 = 1e-6;
const EYE_DELTA_MAX: f64 = 0.5;
const XOR_FULL_MIN: f64 = 0.95;
const XOR_HALF_MAX: f64 = 0.65;
const CHANCE: f64 = 0.125;
const CHANCE_TOL: f64 = 0.02;

fn verdict(id: u32, name: &str, ok: bool, detail: &str) {
    let tag = if ok { "PASS" } else { "FAIL" };
    println!("[{tag}] criterion {id:>2}: {name} -- {detail}");
    assert!(ok, "criterion {id} ({name}) failed: {detail}");
}

fn within(actual: f64, expected: f64, tol: f64) -> bool {
    (actual - expected).abs() <= tol + REPR_SLACK
}

fn rng(seed: u64) -> Xoshiro256PlusPlus {
    Xoshiro256PlusPlus::seed_from_u64(seed)
}

#[test]
fn c01_metrics_golden_values() {
    let row13 = [0.899, 0.847, 0.870, 0.772, 0.810, 0.855, 0.813];
    let row1 = [0.898, 0.606, 0.544, 0.622, 0.628, 0.582, 0.0, 0.612];
    let m13 = mean_of(&row13).unwrap();
    let s13 = sample_sd(&row13).unwrap();
    let m1 = mean_of(&row1).unwrap();
    let s1 = sample_sd(&row1).unwrap();
    let checks = [
        ("row13 mean", m13, 0.838),
        ("row13 sd", s13, 0.042),
        ("row1 mean", m1, 0.562),
        ("row1 sd", s1, 0.251),
    ];
    let detail: Vec<String> = checks
        .iter()
        .map(|&(name, got, want)| {
            let mark = if within(got, want, TABLE_TOL) {
                "ok"
            } else {
                "OUT"
            };
            format!(
                "{name} {got:.6} vs {want} (|d| {:.6}, {mark})",
                (got - want).abs()
            )
        })
        .collect();
    verdict(
        1,
        "metrics golden values",
        checks
            .iter()
            .all(|&(_, got, want)| within(got, want, TABLE_TOL)),
        &detail.join("; "),
    );
}

/// Brute-force recomputation straight from the pair list.
fn oracle_report(
    pairs: &[(EmotionLabel, EmotionLabel)],
    classes: &[EmotionLabel],
) -> MetricsReport {
    let total = pairs.len() as u64;
    let correct = pairs.iter().filter(|(p, t)| p == t).count() as u64;
    let mut support = BTreeMap::new();
    let mut sens = Vec::new();
    let mut excluded = Vec::new();
    for &c in classes {
        let n = pairs.iter().filter(|(_, t)| *t == c).count() as u64;
        let hit = pairs.iter().filter(|(p, t)| *t == c && *p == c).count() as u64;
        support.insert(c, n);
        if n == 0 {
            excluded.push(c);
        } else {
            sens.push((c, hit as f64 / n as f64));
        }
    }
    let values: Vec<f64> = sens.iter().map(|(_, s)| *s).collect();
    let mut sum = 0.0;
    for v in &values {
        sum += v;
    }
    let mean = sum / values.len() as f64;
    let sd = if values.len() < 2 {
        None
    } else if values.iter().all(|&v| v == values[0]) {
        // The deviation of a constant list is zero by definition.
        Some(0.0)
    } else {
        let mut ss = 0.0;
        for v in &values {
            ss += (v - mean) * (v - mean);
        }
        Some((ss / (values.len() - 1) as f64).sqrt())
    };
    let accuracy = correct as f64 / total as f64;
    MetricsReport {
        accuracy,
        per_class_sensitivity: sens.into_iter().collect(),
        support,
        mean_sensitivity: mean,
        weighted_sensitivity: facepipe::metrics::WeightedSensitivity {
            uniform: mean,
            support: accuracy,
        },
        sensitivity_sd: sd,
        excluded_classes: excluded,
    }
}

#[test]
fn c02_metrics_oracle_equivalence() {
    let start = Instant::now();
    let mut r = rng(2);
    let mut mismatches = 0;
    for _ in 0..200 {
        let k = r.random_range(2..=8);
        let mut classes = EmotionLabel::CLASSES.to_vec();
        classes.shuffle(&mut r);
        classes.truncate(k);
        // Leave some classes without support now and then.
        let truth_pool: Vec<EmotionLabel> = if r.random_bool(0.3) {
            classes[..r.random_range(1..=k)].to_vec()
        } else {
            classes.clone()
        };
        let n = r.random_range(1..120);
        let pairs: Vec<_> = (0..n)
            .map(|_| {
                let t = truth_pool[r.random_range(0..truth_pool.len())];
                let p = if r.random_bool(0.5) {
                    t
                } else {
                    classes[r.random_range(0..k)]
                };
                (p, t)
            })
            .collect();
        let got = build_report(&confusion(&pairs, &classes).unwrap()).unwrap();
        if got != oracle_report(&pairs, &classes) {
            mismatches += 1;
        }
    }
    let elapsed = start.elapsed();
    verdict(
        2,
        "metrics oracle equivalence",
        mismatches == 0 && elapsed.as_secs_f64() < 1.0,
        &format!("{mismatches}/200 mismatching reports in {elapsed:?}"),
    );
}

/// Equalization from the definition: cdf(v) counts samples <= v.
fn brute_equalize(img: &ImageBuffer) -> ImageBuffer {
    let raw = img.as_raw();
    let mut out = raw.to_vec();
    for ch in 0..3 {
        let samples: Vec<u8> = raw.iter().skip(ch).step_by(3).copied().collect();
        let n = samples.len() as u64;
        let lowest = *samples.iter().min().unwrap();
        let cdf_min = samples.iter().filter(|&&s| s == lowest).count() as u64;
        for (i, &v) in samples.iter().enumerate() {
            let mapped = if cdf_min == n {
                v
            } else {
                let cdf = samples.iter().filter(|&&s| s <= v).count() as u64;
                let num = 255 * (cdf - cdf_min);
                let den = n - cdf_min;
                // round half up of num / den
                ((2 * num + den) / (2 * den)) as u8
            };
            out[i * 3 + ch] = mapped;
        }
    }
    ImageBuffer::new(img.width(), img.height(), out).unwrap()
}

fn random_image(r: &mut impl Rng, w: u32, h: u32) -> ImageBuffer {
    // Per channel: full range, narrow band, or constant.
    let modes: [(u8, u8); 3] = std::array::from_fn(|_| match r.random_range(0..4) {
        0 => {
            let v = r.random();
            (v, v)
        }
        1 => {
            let lo = r.random_range(0..200);
            (lo, lo + r.random_range(1..40))
        }
        _ => (0, 255),
    });
    ImageBuffer::from_fn(w, h, |_, _| {
        std::array::from_fn(|c| r.random_range(modes[c].0..=modes[c].1))
    })
}

#[test]
fn c03_histogram_equalization() {
    let start = Instant::now();
    let mut r = rng(3);
    let (mut mismatched, mut non_monotone, mut short_range) = (0, 0, 0);
    for _ in 0..100 {
        let img = random_image(&mut r, 16, 16);
        let got = equalize(&img);
        if got != brute_equalize(&img) {
            mismatched += 1;
        }
        for ch in 0..3 {
            let pairs: Vec<(u8, u8)> = img
                .as_raw()
                .iter()
                .zip(got.as_raw())
                .skip(ch)
                .step_by(3)
                .map(|(&a, &b)| (a, b))
                .collect();
            if pairs
                .iter()
                .any(|&(a1, b1)| pairs.iter().any(|&(a2, b2)| a1 < a2 && b1 > b2))
            {
                non_monotone += 1;
            }
            let input: BTreeSet<u8> = pairs.iter().map(|p| p.0).collect();
            let output: BTreeSet<u8> = pairs.iter().map(|p| p.1).collect();
            if input.len() > 1 && !(output.contains(&0) && output.contains(&255)) {
                short_range += 1;
            }
        }
    }
    let elapsed = start.elapsed();
    verdict(
        3,
        "histogram equalization",
        mismatched == 0 && non_monotone == 0 && short_range == 0 && elapsed.as_secs_f64() < 1.0,
        &format!(
            "{mismatched} images differ from reference, {non_monotone} non-monotone and \
             {short_range} short-range channels, {elapsed:?}"
        ),
    );
}

#[test]
fn c04_eye_leveling() {
    let mut r = rng(4);
    let cfg = NormalizeConfig::default();
    let (mut ok, mut failed, mut worst) = (0, 0, 0.0f64);
    for _ in 0..1000 {
        let (img, b, lm) = random_face(&mut r, 200);
        match normalize_face(&img, &b, &lm, &cfg) {
            Ok(s) => {
                ok += 1;
                worst = worst.max((s.landmarks.right_eye.y - s.landmarks.left_eye.y).abs());
            }
            Err(_) => failed += 1,
        }
    }
    verdict(
        4,
        "eye leveling",
        ok > 0 && worst <= EYE_DELTA_MAX,
        &format!("{ok} normalized ({failed} rejected), max eye y-delta {worst:.3e} px"),
    );
}

#[test]
fn c05_mask_partition() {
    let mut r = rng(5);
    let mut broken = 0;
    for _ in 0..100 {
        let w = r.random_range(1..40);
        let h = 2 * r.random_range(1..20);
        let img = random_image(&mut r, w, h);
        let top = mask_half(&img, Half::Top);
        let bottom = mask_half(&img, Half::Bottom);
        let merged: Vec<u8> = top
            .as_raw()
            .iter()
            .zip(bottom.as_raw())
            .map(|(a, b)| *a.max(b))
            .collect();
        if merged != img.as_raw() {
            broken += 1;
        }
    }
    verdict(
        5,
        "mask partition identity",
        broken == 0,
        &format!("{broken}/100 images not reconstructed by max(top, bottom)"),
    );
}

#[test]
fn c06_stratified_kfold() {
    let m = filter_single_label(&feph_like_manifest(6), &EmotionLabel::ekman_with_neutral());
    let plan = stratified_kfold(&m, 5, 42).unwrap();
    let again = stratified_kfold(&m, 5, 42).unwrap();
    let mut sizes: BTreeMap<EmotionLabel, Vec<usize>> = BTreeMap::new();
    for r in m.records() {
        let s = sizes
            .entry(r.label().unwrap())
            .or_insert_with(|| vec![0; 5]);
        s[plan.fold_of(&r.id).unwrap()] += 1;
    }
    let spread_ok = sizes
        .values()
        .all(|s| s.iter().max().unwrap() - s.iter().min().unwrap() <= 1);
    let mut surprise = sizes[&EmotionLabel::Surprise].clone();
    surprise.sort_unstable_by(|a, b| b.cmp(a));
    let ok = m.len() == 2547
        && class_counts(&m)[&EmotionLabel::Surprise] == 818
        && spread_ok
        && surprise == [164, 164, 164, 163, 163]
        && plan == again;
    verdict(
        6,
        "stratified k-fold",
        ok,
        &format!(
            "{} records, per-class spread <= 1: {spread_ok}, surprise folds {surprise:?}, \
             reproducible: {}",
            m.len(),
            plan == again
        ),
    );
}

fn random_features(r: &mut impl Rng, dim: usize) -> FeatureVector {
    FeatureVector::new((0..dim).map(|_| r.random_range(0.0..=1.0)).collect()).unwrap()
}

fn random_model(r: &mut impl Rng) -> (ModelParams, Vec<Example>, Vec<f64>) {
    let input = r.random_range(2..8);
    let hidden: Vec<usize> = (0..r.random_range(1..=2))
        .map(|_| r.random_range(2..7))
        .collect();
    let classes = r.random_range(2..5);
    let mut params = ModelParams::init(input, &hidden, classes, r.random());
    let mut flat = params.flatten(Scope::All);
    for v in flat.iter_mut() {
        *v += r.random_range(-0.2..0.2);
    }
    params.assign_flat(Scope::All, &flat);
    let batch = (0..r.random_range(1..7))
        .map(|_| Example {
            features: random_features(r, input),
            class: r.random_range(0..classes),
        })
        .collect();
    let weights = (0..classes).map(|_| r.random_range(0.5..2.0)).collect();
    (params, batch, weights)
}

#[test]
fn c07_trainer_numerics() {
    let mut r = rng(7);
    let mut worst_rel = 0.0f64;
    for _ in 0..20 {
        let (params, batch, weights) = random_model(&mut r);
        let analytic = grad(&params, &batch, &weights).unwrap().flatten(Scope::All);
        let base = params.flatten(Scope::All);
        let h = 1e-6;
        let mut numeric = Vec::with_capacity(base.len());
        let mut probe = params.clone();
        for i in 0..base.len() {
            let mut w = base.clone();
            w[i] = base[i] + h;
            probe.assign_flat(Scope::All, &w);
            let up = loss(&probe, &batch, &weights).unwrap();
            w[i] = base[i] - h;
            probe.assign_flat(Scope::All, &w);
            let down = loss(&probe, &batch, &weights).unwrap();
            numeric.push((up - down) / (2.0 * h));
        }
        let diff: f64 = analytic
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n).powi(2))
            .sum::<f64>()
            .sqrt();
        let scale = norm(&analytic).max(norm(&numeric));
        worst_rel = worst_rel.max(if scale == 0.0 { diff } else { diff / scale });
    }

    let mut worst_norm_err = 0.0f64;
    for rho in [0.01, 0.05, 0.3] {
        let (params, batch, weights) = random_model(&mut r);
        let (_, step) = sam_update(&params, &batch, &weights, rho, 0.1).unwrap();
        assert!(step.grad_norm > 0.0);
        worst_norm_err = worst_norm_err.max((step.perturbation_norm - rho).abs());
    }

    let mut w = [1.0];
    sam_step(&mut w, 0.1, 0.1, |p| Ok(vec![2.0 * p[0]])).unwrap();

    verdict(
        7,
        "trainer numerics",
        worst_rel <= GRAD_REL_TOL && worst_norm_err <= SAM_NORM_TOL && w[0] == 0.78,
        &format!(
            "worst gradient relative error {worst_rel:.2e} over 20 models, \
             SAM |e| - rho {worst_norm_err:.2e}, quadratic step w' = {}",
            w[0]
        ),
    );
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[test]
fn c08_two_stage_contract() {
    let mut r = rng(8);
    let data: Vec<Example> = (0..64)
        .map(|i| {
            let class = i % 3;
            let mut f: Vec<f64> = (0..12).map(|_| r.random_range(0.0..0.3)).collect();
            f[class * 4] = 0.9;
            Example {
                features: FeatureVector::new(f).unwrap(),
                class,
            }
        })
        .collect();
    let init = ModelParams::init(12, &[8, 6], 3, 1);
    let cfg = TrainConfig {
        batch_size: 8,
        stage_a_epochs: 5,
        stage_b_epochs: 5,
        input_edge: 2,
        hidden_widths: vec![8, 6],
        ..TrainConfig::default()
    };
    let (after_a, _) = train_stage(&init, &data, &[], &cfg, Stage::A).unwrap();
    let (after_b, _) = train_stage(&after_a, &data, &[], &cfg, Stage::B).unwrap();
    let frozen = after_a.backbone_bytes() == init.backbone_bytes();
    let head_moved = after_a.head != init.head;
    let unfrozen = after_b.backbone_bytes() != after_a.backbone_bytes();
    verdict(
        8,
        "two-stage contract",
        frozen && head_moved && unfrozen,
        &format!(
            "stage A backbone unchanged: {frozen}, head trained: {head_moved}; \
             stage B backbone changed: {unfrozen}"
        ),
    );
}

#[test]
fn c09_full_vs_half_ordering() {
    let start = Instant::now();
    let edge = 16;
    let norm = NormalizeConfig {
        output_size: edge,
        mask_mode: MaskMode::None,
        ..NormalizeConfig::default()
    };
    let mut images = BTreeMap::new();
    let mut records = Vec::new();
    for s in xor_corpus(2000, 64, 9) {
        let b = s.record.bbox.unwrap();
        let lm = s.record.landmarks.unwrap();
        images.insert(
            s.record.id.clone(),
            normalize_face(&s.image, &b, &lm, &norm).unwrap().image,
        );
        records.push(s.record);
    }
    let m = Manifest::from_records(records).unwrap();
    let plan = stratified_kfold(&m, 5, 9).unwrap();
    let source = MemoryImageSource { images };
    let cfg = TrainConfig {
        batch_size: 16,
        stage_a_epochs: 5,
        stage_b_epochs: 30,
        learning_rate: 0.05,
        input_edge: edge,
        hidden_widths: vec![32, 16],
        seed: 9,
        ..TrainConfig::default()
    };
    let mut acc = BTreeMap::new();
    for c in Condition::ALL {
        let out = run_cv(&m, &plan, &cfg, c, &source).unwrap();
        acc.insert(
            c,
            build_report(&confusion(&out.pairs, &out.classes).unwrap())
                .unwrap()
                .accuracy,
        );
    }
    let elapsed = start.elapsed();
    let (full, top, bottom) = (
        acc[&Condition::Full],
        acc[&Condition::Top],
        acc[&Condition::Bottom],
    );
    verdict(
        9,
        "full-vs-half ordering (XOR corpus)",
        full >= XOR_FULL_MIN
            && top <= XOR_HALF_MAX
            && bottom <= XOR_HALF_MAX
            && elapsed.as_secs() < 300,
        &format!(
            "pooled accuracy full {full:.3}, top {top:.3}, bottom {bottom:.3} in {elapsed:.1?}"
        ),
    );
}

fn tree_bytes(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path
                    .strip_prefix(root)
                    .unwrap()
                    .to_string_lossy()
                    .into_owned();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

#[test]
fn c10_end_to_end_determinism() {
    let start = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let bin = env!("CARGO_BIN_EXE_facepipe");
    let status = Command::new(bin)
        .args([
            "synth", "--n", "120", "--size", "64", "--seed", "10", "--out",
        ])
        .arg(&data)
        .status()
        .unwrap();
    assert!(status.success());
    let run = |name: &str| {
        let out = tmp.path().join(name);
        let status = Command::new(bin)
            .args([
                "run-all",
                "--seed",
                "10",
                "--size",
                "16",
                "--epochs-a",
                "2",
                "--epochs-b",
                "4",
            ])
            .args(["--hidden", "16,8", "--manifest"])
            .arg(data.join("manifest.csv"))
            .arg("--images")
            .arg(data.join("images"))
            .arg("--out")
            .arg(&out)
            .output()
            .unwrap();
        assert!(
            status.status.success(),
            "{}",
            String::from_utf8_lossy(&status.stderr)
        );
        tree_bytes(&out)
    };
    let first = run("run1");
    let second = run("run2");
    let differing: Vec<&String> = first
        .keys()
        .chain(second.keys())
        .filter(|k| first.get(*k) != second.get(*k))
        .collect();
    let has = |prefix: &str| first.keys().any(|k| k.starts_with(prefix));
    let complete = has("normalized/") && has("reports/report_") && first.contains_key("folds.json");
    let elapsed = start.elapsed();
    verdict(
        10,
        "end-to-end determinism",
        differing.is_empty() && complete && elapsed.as_secs() < 600,
        &format!(
            "{} files per run, {} differ, reports/folds/images present: {complete}, {elapsed:.1?}",
            first.len(),
            differing.len()
        ),
    );
}

#[test]
fn c11_chance_floor() {
    let mut r = rng(11);
    let classes = EmotionLabel::CLASSES;
    let pairs: Vec<_> = (0..10_000)
        .map(|_| (classes[r.random_range(0..8)], classes[r.random_range(0..8)]))
        .collect();
    let acc = build_report(&confusion(&pairs, &classes).unwrap())
        .unwrap()
        .accuracy;
    verdict(
        11,
        "chance floor",
        (acc - CHANCE).abs() <= CHANCE_TOL,
        &format!("uniform random predictor accuracy {acc:.4} over 10000 predictions"),
    );
}
