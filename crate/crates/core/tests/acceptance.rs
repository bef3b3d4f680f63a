//! Acceptance suite: one test per criterion, each printing a PASS/FAIL line.
//!
//! The heavy end-to-end run (criteria 6 and 10) is shared between tests.
//! Run with `cargo test --release --test acceptance -- --nocapture
//! --test-threads 1` for readable output.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::io::Write;
use std::path::Path;
use std::sync::{Mutex, OnceLock};
use std::time::{Duration, Instant};

use av_grade::metrics::{cohens_kappa, evaluate, kappa_fraction, ConfusionMatrix, EvalOptions, EvalSample};
use av_grade::nn::gradcheck::{check_layer, check_loss};
use av_grade::nn::{
    class_weights, cross_entropy, focal_loss, AvgPool2d, Concat, Conv2d, Dense, GlobalAvgPool, Identity, Layer,
    LossSpec, MaxPool2d, Relu, Residual, Sequential, Tensor,
};
use av_grade::pipeline::{
    check_disjoint, run_end_to_end, split_by_examinee, train_grading_fusion, train_grading_submodels, grading_splits,
    PipelineConfig, RunOutcome,
};
use av_grade::raster::{Grid, Pixel};
use av_grade::synthgen::{corrupt_labels, generate_scene, SceneSpec};
use av_grade::vesselgraph::{detect_crossing_candidates, refine_av_map, skeletonize, DetectParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Writes past the test harness's output capture so the verdicts always
/// show up in the log.
fn verdict(n: u32, name: &str, pass: bool, detail: &str) {
    let line = format!(
        "[acceptance] criterion {n:>2} {:<4} {name}: {detail}\n",
        if pass { "PASS" } else { "FAIL" }
    );
    let _ = std::io::stderr().write_all(line.as_bytes());
}

fn within(elapsed: Duration, limit_s: f64) -> bool {
    elapsed.as_secs_f64() < limit_s
}

// ---------------------------------------------------------------- 1

#[test]
fn criterion_01_loss_identities() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0_f64;
    let mut monotone_violations = 0;
    for _ in 0..10_000 {
        let k = rng.gen_range(2..7);
        let raw: Vec<f64> = (0..k).map(|_| rng.gen_range(1e-3..1.0)).collect();
        let sum: f64 = raw.iter().sum();
        let y: Vec<f64> = raw.iter().map(|v| v / sum).collect();
        let label = rng.gen_range(0..k);
        let t: Vec<f64> = (0..k).map(|i| (i == label) as u8 as f64).collect();
        let ones = vec![1.0; k];
        // Cross-entropy written out independently.
        let ce = -y[label].ln();
        worst = worst.max((focal_loss(&y, &t, 0.0, &ones) - ce).abs());
        worst = worst.max((cross_entropy(&y, &t, &ones) - ce).abs());
        let (g1, g2) = (rng.gen_range(0.0..5.0), rng.gen_range(0.0..5.0));
        let (lo, hi) = if g1 < g2 { (g1, g2) } else { (g2, g1) };
        if y[label] < 1.0 && lo < hi && focal_loss(&y, &t, lo, &ones) <= focal_loss(&y, &t, hi, &ones) {
            monotone_violations += 1;
        }
    }
    let elapsed = t0.elapsed();
    let pass = worst < 1e-12 && monotone_violations == 0 && within(elapsed, 5.0);
    verdict(
        1,
        "loss identities",
        pass,
        &format!("max |focal(γ=0) - CE| = {worst:.2e}, γ-monotonicity violations {monotone_violations}, {elapsed:.2?}"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 2

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn img(rng: &mut ChaCha8Rng, c: usize, min: usize) -> Vec<usize> {
    vec![rng.gen_range(1..3), c, rng.gen_range(min..min + 5), rng.gen_range(min..min + 5)]
}

type Maker = Box<dyn Fn(&mut ChaCha8Rng) -> (Box<dyn Layer>, Vec<usize>)>;

fn layer_makers() -> Vec<(&'static str, Maker)> {
    vec![
        (
            "conv2d",
            Box::new(|rng: &mut ChaCha8Rng| {
                let (ci, co) = (rng.gen_range(1..4), rng.gen_range(1..4));
                let k = [1, 3, 5][rng.gen_range(0..3)];
                let (s, p) = (rng.gen_range(1..3), rng.gen_range(0..=k / 2));
                (Box::new(Conv2d::new(ci, co, k, s, p, rng)) as Box<dyn Layer>, img(rng, ci, k))
            }),
        ),
        (
            "dense",
            Box::new(|rng: &mut ChaCha8Rng| {
                let (i, o) = (rng.gen_range(1..12), rng.gen_range(1..8));
                (Box::new(Dense::new(i, o, rng)) as Box<dyn Layer>, vec![rng.gen_range(1..5), i])
            }),
        ),
        (
            "relu",
            Box::new(|rng: &mut ChaCha8Rng| {
                let c = rng.gen_range(1..4);
                (Box::new(Relu::new()) as Box<dyn Layer>, img(rng, c, 2))
            }),
        ),
        (
            "maxpool2d",
            Box::new(|rng: &mut ChaCha8Rng| {
                let k = rng.gen_range(2..4);
                let s = rng.gen_range(1..=k);
                (Box::new(MaxPool2d::new(k, s)) as Box<dyn Layer>, img(rng, 2, k))
            }),
        ),
        (
            "avgpool2d",
            Box::new(|rng: &mut ChaCha8Rng| {
                let k = rng.gen_range(1..4);
                (Box::new(AvgPool2d::new(k)) as Box<dyn Layer>, img(rng, 2, k))
            }),
        ),
        (
            "global_avg_pool",
            Box::new(|rng: &mut ChaCha8Rng| (Box::new(GlobalAvgPool::new()) as Box<dyn Layer>, img(rng, 3, 1))),
        ),
        (
            "residual",
            Box::new(|rng: &mut ChaCha8Rng| {
                let c = rng.gen_range(1..4);
                let inner = Sequential::new(vec![
                    Box::new(Conv2d::new(c, c, 3, 1, 1, rng)),
                    Box::new(Relu::new()),
                    Box::new(Conv2d::new(c, c, 3, 1, 1, rng)),
                ]);
                (Box::new(Residual::new(inner)) as Box<dyn Layer>, img(rng, c, 3))
            }),
        ),
        (
            "concat",
            Box::new(|rng: &mut ChaCha8Rng| {
                let c = rng.gen_range(1..4);
                let branches: Vec<Box<dyn Layer>> = vec![
                    Box::new(Identity),
                    Box::new(Conv2d::new(c, 2, 3, 1, 1, rng)),
                    Box::new(Conv2d::new(c, 1, 1, 1, 0, rng)),
                ];
                (Box::new(Concat::new(branches)) as Box<dyn Layer>, img(rng, c, 3))
            }),
        ),
        (
            "sequential",
            Box::new(|rng: &mut ChaCha8Rng| {
                let c = rng.gen_range(1..3);
                let seq = Sequential::new(vec![
                    Box::new(Conv2d::new(c, 3, 3, 2, 1, rng)),
                    Box::new(Relu::new()),
                    Box::new(MaxPool2d::new(2, 2)),
                    Box::new(GlobalAvgPool::new()),
                    Box::new(Dense::new(3, 2, rng)),
                ]);
                (Box::new(seq) as Box<dyn Layer>, img(rng, c, 5))
            }),
        ),
    ]
}

#[test]
fn criterion_02_gradient_oracle() {
    let t0 = Instant::now();
    let mut worst: Vec<(String, f64)> = Vec::new();
    for (name, make) in layer_makers() {
        let mut w = 0.0_f64;
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let (mut layer, shape) = make(&mut rng);
            let x = random(&shape, &mut rng);
            w = w.max(check_layer(layer.as_mut(), &x, 1e-5).unwrap().worst());
        }
        worst.push((name.to_string(), w));
    }
    let specs = [
        ("cross_entropy", LossSpec::cross_entropy()),
        ("focal", LossSpec::focal(2.0)),
    ];
    for (name, spec) in specs {
        let mut w = 0.0_f64;
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
            let (n, k) = (rng.gen_range(1..6), rng.gen_range(2..6));
            let logits = random(&[n, k], &mut rng).data().iter().map(|v| v * 3.0).collect();
            let logits = Tensor::from_vec(&[n, k], logits).unwrap();
            let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
            let mut spec = spec.clone();
            if seed % 2 == 1 {
                spec.class_weights = Some((0..k).map(|_| rng.gen_range(0.2..1.0)).collect());
            }
            if let av_grade::nn::LossKind::Focal { .. } = spec.kind {
                spec.kind = av_grade::nn::LossKind::Focal {
                    gamma: [0.5, 1.0, 2.0, 3.0][seed as usize % 4],
                };
            }
            w = w.max(check_loss(&spec, &logits, &labels, 1e-5).unwrap());
        }
        worst.push((name.to_string(), w));
    }
    let elapsed = t0.elapsed();
    let max = worst.iter().map(|w| w.1).fold(0.0, f64::max);
    let pass = max < 1e-4 && within(elapsed, 60.0);
    let detail: Vec<String> = worst.iter().map(|(n, w)| format!("{n} {w:.1e}")).collect();
    verdict(2, "gradient oracle", pass, &format!("20 shapes each; {}; {elapsed:.2?}", detail.join(", ")));
    assert!(pass, "{worst:?}");
}

// ---------------------------------------------------------------- 3

#[test]
fn criterion_03_class_weight_formula() {
    // Independently evaluated: ln(N_l) / ln(2507), rounded to 6 places.
    let expected = [0.903394, 0.856593, 0.782523, 0.516562];
    let w = class_weights(&[1177, 816, 457, 57]).unwrap();
    let rounded: Vec<f64> = w.alpha.iter().map(|a| (a * 1e6).round() / 1e6).collect();
    let pass = w.total == 2507 && rounded.iter().zip(expected).all(|(a, e)| (a - e).abs() < 1e-9);
    verdict(3, "class-weight formula", pass, &format!("alpha = {rounded:?}"));
    assert!(pass);
}

// ---------------------------------------------------------------- 4

#[test]
fn criterion_04_detection_on_synthetic_scenes() {
    let t0 = Instant::now();
    let params = DetectParams::default();
    let (mut tp, mut fp, mut found, mut total) = (0usize, 0usize, 0usize, 0usize);
    for seed in 0..200u64 {
        let spec = SceneSpec {
            seed: 50_000 + seed,
            ..SceneSpec::default()
        };
        let (map, truth) = generate_scene(&spec).unwrap();
        let raw = corrupt_labels(&map, 0.03, spec.seed);
        let refined = refine_av_map(&raw, &raw.vessel_mask).unwrap();
        let skel = skeletonize(&refined.vessel_mask);
        let cands = detect_crossing_candidates(&refined, &skel, spec.cup(), &params);
        let d2 = params.merge_distance * params.merge_distance;
        let close = |a: Pixel, b: Pixel| (((a.x - b.x).pow(2) + (a.y - b.y).pow(2)) as f64) <= d2;
        for c in &cands {
            if truth.crossings.iter().any(|g| close(g.position, c.center)) {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        for g in &truth.crossings {
            let dx = g.position.x - spec.cup_center.x;
            let dy = g.position.y - spec.cup_center.y;
            if ((dx * dx + dy * dy) as f64).sqrt() <= spec.cup_radius {
                continue;
            }
            total += 1;
            if cands.iter().any(|c| close(g.position, c.center)) {
                found += 1;
            }
        }
    }
    let precision = tp as f64 / (tp + fp).max(1) as f64;
    let recall = found as f64 / total.max(1) as f64;
    let elapsed = t0.elapsed();
    let pass = precision >= 0.95 && recall >= 0.95 && within(elapsed, 300.0);
    verdict(
        4,
        "detection on synthetic scenes",
        pass,
        &format!("200 scenes, precision {precision:.4} ({tp}/{}), recall {recall:.4} ({found}/{total}), {elapsed:.2?}", tp + fp),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 5

fn fixture(seed: u64) -> Grid<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (rng.gen_range(16..64), rng.gen_range(16..64));
    let mut m = Grid::new(w, h, false);
    for _ in 0..rng.gen_range(1..8) {
        let (x0, y0) = (rng.gen_range(0..w) as f64, rng.gen_range(0..h) as f64);
        let (x1, y1) = (rng.gen_range(0..w) as f64, rng.gen_range(0..h) as f64);
        let r = rng.gen_range(0.5..4.0);
        let (dx, dy) = (x1 - x0, y1 - y0);
        let len2 = (dx * dx + dy * dy).max(1e-9);
        for y in 0..h {
            for x in 0..w {
                let t = (((x as f64 - x0) * dx + (y as f64 - y0) * dy) / len2).clamp(0.0, 1.0);
                let (qx, qy) = (x0 + t * dx - x as f64, y0 + t * dy - y as f64);
                if qx * qx + qy * qy <= r * r {
                    m.set(x, y, true);
                }
            }
        }
    }
    for _ in 0..rng.gen_range(0..40) {
        let (x, y) = (rng.gen_range(0..w), rng.gen_range(0..h));
        m.set(x, y, !*m.get(x, y));
    }
    m
}

/// 8-connected components by breadth-first search.
fn components(m: &Grid<bool>) -> usize {
    let (w, h) = m.dims();
    let mut seen = vec![false; w * h];
    let mut count = 0;
    for start in 0..w * h {
        if seen[start] || !m.data()[start] {
            continue;
        }
        count += 1;
        seen[start] = true;
        let mut queue = VecDeque::from([start]);
        while let Some(i) = queue.pop_front() {
            let (x, y) = ((i % w) as i64, (i / w) as i64);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if m.data()[j] && !seen[j] {
                        seen[j] = true;
                        queue.push_back(j);
                    }
                }
            }
        }
    }
    count
}

#[test]
fn criterion_05_skeleton_properties() {
    let t0 = Instant::now();
    let mut failures = Vec::new();
    for seed in 0..200 {
        let m = fixture(9_000 + seed);
        let s = skeletonize(&m);
        let again = skeletonize(s.mask());
        if again.mask() != s.mask() {
            failures.push(format!("seed {seed}: not idempotent"));
        }
        if components(s.mask()) != components(&m) {
            failures.push(format!("seed {seed}: {} vs {} components", components(s.mask()), components(&m)));
        }
    }
    let elapsed = t0.elapsed();
    let pass = failures.is_empty() && within(elapsed, 60.0);
    verdict(
        5,
        "skeleton properties",
        pass,
        &format!("200 fixtures, {} failures, {elapsed:.2?}", failures.len()),
    );
    assert!(pass, "{failures:?}");
}

// ---------------------------------------------------------------- 6, 10

struct FullRun {
    outcome: RunOutcome,
    cfg: PipelineConfig,
    elapsed: Duration,
    _dir: tempfile::TempDir,
}

fn full_run() -> &'static Mutex<FullRun> {
    static RUN: OnceLock<Mutex<FullRun>> = OnceLock::new();
    RUN.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let cfg = PipelineConfig {
            output_dir: dir.path().join("seed0"),
            ..PipelineConfig::default()
        };
        let t0 = Instant::now();
        let outcome = run_end_to_end(&cfg).unwrap();
        Mutex::new(FullRun {
            outcome,
            cfg,
            elapsed: t0.elapsed(),
            _dir: dir,
        })
    })
}

fn kappa_of(truth: &[usize], pred: &[usize], k: usize) -> Option<f64> {
    // p_o and p_e straight from the definition.
    let n = truth.len() as f64;
    let po = truth.iter().zip(pred).filter(|(a, b)| a == b).count() as f64 / n;
    let pe: f64 = (0..k)
        .map(|c| {
            let r = truth.iter().filter(|&&t| t == c).count() as f64;
            let q = pred.iter().filter(|&&p| p == c).count() as f64;
            r * q / (n * n)
        })
        .sum();
    (pe != 1.0).then(|| (po - pe) / (1.0 - pe))
}

#[test]
fn criterion_06_end_to_end_grading() {
    let mut run = full_run().lock().unwrap();
    let run = &mut *run;
    let cfg = run.cfg.clone();
    let ds = &run.outcome.dataset;

    // Headline numbers recomputed from fresh predictions on the test split.
    let [_, _, test] = grading_splits(&cfg, ds, None).unwrap();
    let truth: Vec<usize> = test.iter().map(|&i| ds.samples[i].severity.unwrap().index()).collect();
    let mut pred = Vec::new();
    for &i in &test {
        pred.push(run.outcome.grader.predict(&ds.samples[i].patch).unwrap().0);
    }
    let accuracy = truth.iter().zip(&pred).filter(|(a, b)| a == b).count() as f64 / truth.len() as f64;
    let kappa = kappa_of(&truth, &pred, 4).unwrap_or(f64::NAN);
    let report = &run.outcome.summary.grading;
    let consistent = (report.accuracy - accuracy).abs() < 1e-12;

    // Seed 0 comes from the full run; seeds 1 and 2 retrain both grading
    // stages on the same dataset.
    let mut per_seed: Vec<BTreeMap<usize, f64>> = Vec::new();
    let collect = |ab: &[av_grade::pipeline::AblationPoint]| -> BTreeMap<usize, f64> {
        ab.iter().map(|p| (p.n, p.kappa.unwrap_or(f64::NAN))).collect()
    };
    per_seed.push(collect(&run.outcome.summary.ablation));
    let splits = grading_splits(&cfg, ds, None).unwrap();
    for seed in [1u64, 2] {
        let subs = train_grading_submodels(&cfg, ds, &splits, seed)
            .unwrap()
            .into_iter()
            .map(|(m, _)| m)
            .collect();
        let out = train_grading_fusion(&cfg, ds, &splits, subs, seed).unwrap();
        per_seed.push(collect(&out.ablation));
    }
    let mean = |n: usize| per_seed.iter().map(|m| m[&n]).sum::<f64>() / per_seed.len() as f64;
    let (k0, k1, k3) = (mean(0), mean(1), mean(3));
    let ordering = k3 >= k1 && k1 >= k0 - 0.02;

    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    let minutes = run.elapsed.as_secs_f64() / 60.0;
    // The runtime budget is stated for four cores.
    let runtime_ok = cores < 4 || minutes <= 30.0;
    let pass = accuracy >= 0.85 && kappa >= 0.75 && consistent && ordering && runtime_ok;
    verdict(
        6,
        "end-to-end synthetic grading",
        pass,
        &format!(
            "test n={} accuracy {accuracy:.4} kappa {kappa:.4}; mean kappa over 3 seeds n=0 {k0:.4}, n=1 {k1:.4}, n=3 {k3:.4}; \
             per seed {per_seed:?}; seed-0 pipeline {minutes:.1} min on {cores} core(s){}",
            truth.len(),
            if cores < 4 { " (30 min budget applies to 4 cores, not asserted)" } else { "" }
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_10_saliency_sanity() {
    let mut run = full_run().lock().unwrap();
    let run = &mut *run;
    let cfg = run.cfg.clone();
    let ds = &run.outcome.dataset;
    let [_, _, test] = grading_splits(&cfg, ds, None).unwrap();
    let (mut correct, mut concentrated) = (0, 0);
    for &i in &test {
        let s = &ds.samples[i];
        let (pred, _) = run.outcome.grader.predict(&s.patch).unwrap();
        if pred != s.severity.unwrap().index() {
            continue;
        }
        correct += 1;
        let heat = run.outcome.grader.grad_cam(&s.patch, pred).unwrap();
        let t = s.truth.unwrap();
        let (cx, cy) = (t.x - s.origin.x, t.y - s.origin.y);
        let (mut si, mut ni, mut so, mut no) = (0.0, 0, 0.0, 0);
        for y in 0..heat.height() {
            for x in 0..heat.width() {
                let v = *heat.get(x, y);
                if (x as i64 - cx).abs() <= 10 && (y as i64 - cy).abs() <= 10 {
                    si += v;
                    ni += 1;
                } else {
                    so += v;
                    no += 1;
                }
            }
        }
        if si / ni as f64 > so / no.max(1) as f64 {
            concentrated += 1;
        }
    }
    let fraction = concentrated as f64 / correct.max(1) as f64;
    let pass = correct > 0 && fraction >= 0.70;
    verdict(
        10,
        "saliency sanity",
        pass,
        &format!("{concentrated}/{correct} correctly graded test patches ({fraction:.3}) have more heat inside the 21x21 window"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 7

#[test]
fn criterion_07_kappa_oracle() {
    let names = vec!["a".to_string(), "b".to_string()];
    let cases: [(Vec<Vec<u64>>, (i128, i128)); 3] = [
        (vec![vec![12, 0], vec![0, 30]], (1, 1)),
        (vec![vec![25, 25], vec![25, 25]], (0, 1)),
        // p_o = 0.85, p_e = 0.5.
        (vec![vec![40, 10], vec![5, 45]], (7, 10)),
    ];
    let mut ok = true;
    let mut detail = Vec::new();
    for (counts, (num, den)) in cases {
        let cm = ConfusionMatrix::from_counts(names.clone(), counts).unwrap();
        let (n, d) = kappa_fraction(&cm).unwrap().unwrap();
        // Cross-multiplication compares the fractions exactly.
        let exact = n * den == num * d;
        let float = cohens_kappa(&cm).unwrap().unwrap() == num as f64 / den as f64;
        ok &= exact && float;
        detail.push(format!("{n}/{d} vs {num}/{den}"));
    }
    verdict(7, "kappa oracle", ok, &detail.join(", "));
    assert!(ok);
}

// ---------------------------------------------------------------- 8

#[test]
fn criterion_08_contamination_guard() {
    let mut overlaps = 0;
    for seed in 0..500u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let examinees = rng.gen_range(3..60);
        let samples = rng.gen_range(examinees..examinees * 6);
        let mut ids: Vec<u64> = (0..examinees as u64).collect();
        ids.extend((examinees..samples).map(|_| rng.gen_range(0..examinees as u64)));
        let split = split_by_examinee(&ids, [0.8, 0.1, 0.1], seed).unwrap();
        let per_sample: Vec<_> = ids.iter().map(|&e| split.split_of(e).unwrap()).collect();
        // Brute force: every pair of samples from one examinee shares a split.
        for i in 0..ids.len() {
            for j in i + 1..ids.len() {
                if ids[i] == ids[j] && per_sample[i] != per_sample[j] {
                    overlaps += 1;
                }
            }
        }
    }

    // Injected overlap: examinee 7 in both train and test.
    let train: BTreeSet<u64> = [1, 2, 7].into();
    let test: BTreeSet<u64> = [7, 9].into();
    let handoff_blocked = check_disjoint(&[("train", &train), ("test", &test)]).is_err();
    let x = Tensor::zeros(&[1, 3, 16, 16]);
    let samples = [EvalSample {
        examinee: 7,
        input: &x,
        label: 0,
    }];
    let opts = EvalOptions {
        task: "guard".into(),
        class_names: vec!["a".into(), "b".into()],
        seed: 0,
        config_hash: String::new(),
        timed_inferences: 1,
        contamination_guard: true,
    };
    struct Never;
    impl av_grade::metrics::Classifier for Never {
        fn num_classes(&self) -> usize {
            2
        }
        fn classify(&mut self, _: &Tensor) -> av_grade::Result<(usize, Vec<f64>)> {
            panic!("evaluation must abort before inference")
        }
    }
    let eval_blocked = matches!(
        evaluate(&mut Never, &samples, &train, &opts),
        Err(av_grade::Error::Contamination { examinee: 7, .. })
    );
    let pass = overlaps == 0 && handoff_blocked && eval_blocked;
    verdict(
        8,
        "contamination guard",
        pass,
        &format!("500 fixtures, {overlaps} overlaps; injected overlap blocked at hand-off {handoff_blocked}, at evaluation {eval_blocked}"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 9

fn files_under(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn criterion_09_determinism_replay() {
    // Reduced config: the property under test is replay, not accuracy.
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = PipelineConfig {
        seed: 17,
        scenes: 45,
        ..PipelineConfig::default()
    };
    cfg.validation.train.epochs = 2;
    cfg.grading.train.epochs = 2;
    cfg.grading.model.fusion.epochs = 5;
    let cfg_path = dir.path().join("config.json");
    cfg.save(&cfg_path).unwrap();

    let mut trees = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let status = std::process::Command::new(env!("CARGO_BIN_EXE_av-grade"))
            .args(["run-all", "--config"])
            .arg(&cfg_path)
            .arg("--out-dir")
            .arg(&out)
            .output()
            .unwrap();
        assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
        let mut tree = BTreeMap::new();
        for sub in ["reports", "models", "dataset"] {
            for (k, v) in files_under(&out.join(sub)) {
                tree.insert(format!("{sub}/{k}"), v);
            }
        }
        trees.push(tree);
    }
    let (a, b) = (&trees[0], &trees[1]);
    let differing: Vec<&String> = a.keys().filter(|k| b.get(*k) != a.get(*k)).collect();
    let pass = !a.is_empty() && a.len() == b.len() && differing.is_empty();
    verdict(
        9,
        "determinism replay",
        pass,
        &format!("{} files under reports/, models/ and dataset/ compared byte for byte, {} differ", a.len(), differing.len()),
    );
    assert!(pass, "{differing:?}");
}
