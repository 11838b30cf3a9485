//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Exits non-zero on failure only when `AGRIMAE_ACCEPTANCE_STRICT=1`.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use agrimae_core::anomaly::{
    asl_weight_map, detect, plan_for, train_with, weighted_loss, ErrorMap, InferConfig, LossForm,
    TrainConfig, TrainState, WeightMap, WeightScaling,
};
use agrimae_core::data::{generate_samples, GenSpec, Sample};
use agrimae_core::masking::{inference_schedule, masked_window_count, window_mask};
use agrimae_core::metrics::{evaluate, EvalItem, IouMode, MetricReport};
use agrimae_core::models::{ModelConfig, Variant};
use agrimae_core::numcore::Tensor;
use agrimae_core::selftest::{gradcheck_suite, oracle_suite, toy_model_config};
use agrimae_core::Model64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Criterion = (&'static str, fn() -> Outcome);

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn within(limit: Duration, start: Instant) -> (bool, String) {
    let t = start.elapsed();
    (t <= limit, format!("{:.1}s of {}s", t.as_secs_f64(), limit.as_secs()))
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let results = gradcheck_suite().unwrap();
    let (fast, time) = within(Duration::from_secs(120), start);
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    let worst = results.iter().map(|r| r.error).fold(0.0, f64::max);
    outcome(
        failed.is_empty() && fast,
        format!("{} blocks, worst rel. err {worst:.2e}, failed {failed:?}, {time}", results.len()),
    )
}

fn oracles() -> Outcome {
    let results = oracle_suite().unwrap();
    let summary: Vec<String> = results.iter().map(|r| format!("{}={:.1e}", r.name, r.error)).collect();
    outcome(results.iter().all(|r| r.passed), summary.join(" "))
}

fn masking() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut count_errors = 0;
    for _ in 0..500 {
        let (wr, wc, mw) = (rng.gen_range(1..9), rng.gen_range(1..9), rng.gen_range(1..4));
        let q = rng.gen_range(1..=100usize);
        let p = rng.gen_range(0..q);
        let ratio = p as f64 / q as f64;
        let windows = wr * wc;
        let expected = (p * windows).div_ceil(q);
        let m = window_mask(wr * mw, wc * mw, mw, ratio, &mut rng).unwrap();
        if masked_window_count(ratio, windows) != expected || m.masked_count() != expected * mw * mw {
            count_errors += 1;
        }
    }
    let mut uncovered = 0;
    for _ in 0..200 {
        let mw = rng.gen_range(1..3);
        let g = mw * rng.gen_range(1..9);
        let plan = inference_schedule(g, g, mw, 0.75, 32, &mut rng, true).unwrap();
        let covered = (0..g * g).all(|i| plan.runs.iter().any(|m| m.masked[i]));
        uncovered += usize::from(!covered);
    }
    outcome(
        count_errors == 0 && uncovered == 0,
        format!("count mismatches {count_errors}/500, uncovered schedules {uncovered}/200"),
    )
}

fn asl_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut argmax_zero = true;
    let mut reversed = true;
    let mut mse_gap = 0.0f64;
    for _ in 0..200 {
        let (h, w) = (rng.gen_range(1..8), rng.gen_range(2..8));
        let e: ErrorMap<f64> = ErrorMap::new(Tensor::from_fn([h, w], |_| rng.gen_range(0.0..5.0))).unwrap();
        let ev = e.values().data().to_vec();
        let wm = asl_weight_map(&e, WeightScaling::Raw);
        let wv = wm.values.data();
        let top = (0..ev.len()).max_by(|&a, &b| ev[a].total_cmp(&ev[b])).unwrap();
        argmax_zero &= wv[top] == 0.0;
        let mut by_error: Vec<usize> = (0..ev.len()).collect();
        by_error.sort_by(|&a, &b| ev[a].total_cmp(&ev[b]));
        let mut by_weight: Vec<usize> = (0..ev.len()).collect();
        by_weight.sort_by(|&a, &b| wv[b].total_cmp(&wv[a]));
        reversed &= by_error == by_weight;
        let unit = WeightMap {
            values: Tensor::full([h, w], 1.0),
            source_epoch: 0,
        };
        let loss = weighted_loss(&e, &unit, None, LossForm::Mean).unwrap();
        let mse = ev.iter().sum::<f64>() / ev.len() as f64;
        mse_gap = mse_gap.max((loss - mse).abs());
    }
    let e = ErrorMap::new(Tensor::new([2, 2], vec![4.0, 1.0, 0.0, 3.0]).unwrap()).unwrap();
    let worked = weighted_loss(&e, &asl_weight_map(&e, WeightScaling::Raw), None, LossForm::Sum).unwrap();
    outcome(
        argmax_zero && reversed && mse_gap <= 1e-12 && worked == 6.0,
        format!(
            "argmax weight zero {argmax_zero}, order reversed {reversed}, unit-weight gap {mse_gap:.1e}, worked example {worked}"
        ),
    )
}

fn overfit() -> Outcome {
    let start = Instant::now();
    let cfg = toy_model_config(Variant::SwinMae);
    let spec = GenSpec {
        count: 8,
        size: cfg.image_size,
        bands: cfg.bands,
        seed: 5,
        ..GenSpec::default()
    };
    let images: Vec<_> = generate_samples(&spec).unwrap().into_iter().map(|s| s.image).collect();
    let tc = TrainConfig {
        epochs: 500,
        batch_size: 8,
        seed: 5,
        ..TrainConfig::default()
    };
    let mut history = Vec::new();
    let model = Model64::build(&cfg, 5).unwrap();
    train_with(TrainState::new(model, tc).unwrap(), &images, |s| history.push(s.masked_mse)).unwrap();
    let (first, last) = (history[0], *history.last().unwrap());
    let (fast, time) = within(Duration::from_secs(300), start);
    outcome(
        last < 0.1 * first && fast,
        format!("masked MSE {first:.4e} -> {last:.4e} ({:.1}%), {time}", 100.0 * last / first),
    )
}

/// Trains the desk-default SwinMAE with `epochs` passes over `images`.
fn train_default(images: &[Tensor<f64>], asl: bool, epochs: usize, seed: u64) -> Model64 {
    let model = Model64::build(&ModelConfig::default(), seed).unwrap();
    let tc = TrainConfig {
        epochs,
        asl,
        seed,
        ..TrainConfig::default()
    };
    train_with(TrainState::new(model, tc).unwrap(), images, |_| {}).unwrap().model
}

/// Detections on `test` with K = 32: images where anomalous pixels have the
/// larger mean error, and the metric report.
fn score(model: &Model64, test: &[Sample], seed: u64) -> (usize, MetricReport) {
    let icfg = InferConfig {
        k: 32,
        stratified: true,
        seed,
    };
    let mut wins = 0;
    let mut items = Vec::new();
    for (i, s) in test.iter().enumerate() {
        let plan = plan_for(model, &icfg, i).unwrap();
        let d = detect(model, &s.image, &plan).unwrap();
        let gt = s.label.clone().unwrap();
        let e = d.errors.values().data();
        let mean = |want: u8| {
            let v: Vec<f64> = e.iter().zip(&gt.values).filter(|(_, &l)| l == want).map(|(v, _)| *v).collect();
            v.iter().sum::<f64>() / v.len().max(1) as f64
        };
        wins += usize::from(mean(1) > mean(0));
        items.push(EvalItem {
            id: s.id.clone(),
            class_tag: s.class_tag.clone(),
            pred: d.anomaly.mask,
            gt,
            scores: Some(e.to_vec()),
        });
    }
    (wins, evaluate(&items, IouMode::Pooled, "", seed).unwrap())
}

fn anomalous_test_set(seed: u64) -> Vec<Sample> {
    generate_samples(&GenSpec {
        count: 50,
        anomaly_fraction: 1.0,
        seed,
        ..GenSpec::default()
    })
    .unwrap()
}

fn separation() -> Outcome {
    let start = Instant::now();
    let train = generate_samples(&GenSpec {
        count: 200,
        seed: 0,
        ..GenSpec::default()
    })
    .unwrap();
    let images: Vec<_> = train.into_iter().map(|s| s.image).collect();
    let model = train_default(&images, true, 30, 0);
    let (wins, report) = score(&model, &anomalous_test_set(1000), 0);
    let auroc = report.pixel_auroc.unwrap_or(0.0);
    let (fast, time) = within(Duration::from_secs(30 * 60), start);
    outcome(
        wins >= 45 && auroc >= 0.75 && fast,
        format!("anomalous mean error higher in {wins}/50 images, pixel AUROC {auroc:.4}, {time}"),
    )
}

fn asl_robustness() -> Outcome {
    let start = Instant::now();
    let (mut inc_on, mut exc_on, mut inc_off) = (Vec::new(), Vec::new(), Vec::new());
    for seed in 0..3u64 {
        let train = generate_samples(&GenSpec {
            count: 200,
            anomaly_fraction: 0.3,
            seed,
            ..GenSpec::default()
        })
        .unwrap();
        let all: Vec<_> = train.iter().map(|s| s.image.clone()).collect();
        let normal: Vec<_> = train.iter().filter(|s| !s.has_anomaly()).map(|s| s.image.clone()).collect();
        let test = anomalous_test_set(1000 + seed);
        let miou = |images: &[Tensor<f64>], asl: bool| score(&train_default(images, asl, 30, seed), &test, seed).1.miou;
        inc_on.push(miou(&all, true));
        exc_on.push(miou(&normal, true));
        inc_off.push(miou(&all, false));
    }
    let (a, b, c) = (median(inc_on.clone()), median(exc_on.clone()), median(inc_off.clone()));
    let close = (a - b).abs() <= 0.05;
    let better = a > c;
    let (fast, time) = within(Duration::from_secs(90 * 60), start);
    outcome(
        close && better && fast,
        format!(
            "median mIoU included+ASL {a:.4} {inc_on:.4?}, excluded+ASL {b:.4} {exc_on:.4?}, included no ASL {c:.4} {inc_off:.4?}; (a) within 0.05: {close}, (b) ASL higher: {better}, {time}"
        ),
    )
}

fn cli(dir: &Path, args: &[&str]) -> i32 {
    Command::new(env!("CARGO_BIN_EXE_agrimae"))
        .args(args)
        .current_dir(dir)
        .env_remove("AGRIMAE_SEED")
        .env("RUST_LOG", "warn")
        .status()
        .unwrap()
        .code()
        .unwrap_or(-1)
}

fn prepare_data(dir: &Path) -> bool {
    cli(dir, &["gen-data", "--out", "train", "--n", "24", "--seed", "1"]) == 0
        && cli(dir, &["gen-data", "--out", "test", "--n", "12", "--anomaly-frac", "0.5", "--seed", "2"]) == 0
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path();
    let mut ok = prepare_data(p);
    for run in ["a", "b"] {
        let ckpt = format!("{run}.ckpt");
        let out = format!("pred_{run}");
        ok &= cli(p, &["train", "--data", "train", "--out-ckpt", &ckpt, "--epochs", "3", "--seed", "7"]) == 0;
        ok &= cli(p, &["infer", "--ckpt", &ckpt, "--image", "test", "--k", "8", "--out-dir", &out, "--seed", "7"]) == 0;
    }
    let read = |f: &str| std::fs::read(p.join(f)).unwrap_or_default();
    let same_ckpt = ok && !read("a.ckpt").is_empty() && read("a.ckpt") == read("b.ckpt");
    let mut differing = 0;
    for i in 0..12 {
        for suffix in ["error.aten", "anomaly.aten"] {
            let f = format!("img{i:05}.{suffix}");
            let a = read(&format!("pred_a/{f}"));
            differing += usize::from(a.is_empty() || a != read(&format!("pred_b/{f}")));
        }
    }
    outcome(
        ok && same_ckpt && differing == 0,
        format!("commands ok {ok}, checkpoints identical {same_ckpt}, differing map files {differing}/24"),
    )
}

fn smoke() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path();
    let codes = [
        i32::from(!prepare_data(p)),
        cli(p, &["train", "--data", "train", "--out-ckpt", "m.ckpt", "--epochs", "3"]),
        cli(p, &["infer", "--ckpt", "m.ckpt", "--image", "test", "--out-dir", "pred"]),
        cli(p, &["eval", "--pred-dir", "pred", "--gt-dir", "test", "--report", "report.txt"]),
    ];
    let report = std::fs::read_to_string(p.join("report.txt")).unwrap_or_default();
    let value = |key: &str| {
        report
            .lines()
            .find_map(|l| l.strip_prefix(&format!("{key} = ")))
            .map(str::to_string)
    };
    let numeric = ["miou", "pixel_auroc", "images", "seed", "normal_images", "normal_fp_pixels"];
    let mut missing: Vec<String> = numeric
        .iter()
        .filter(|k| value(k).and_then(|v| v.parse::<f64>().ok()).is_none())
        .map(|k| k.to_string())
        .collect();
    for key in ["fingerprint", "classes", "iou_mode"] {
        if value(key).is_none_or(|v| v.is_empty()) {
            missing.push(key.into());
        }
    }
    for class in value("classes").unwrap_or_default().split(',').filter(|c| !c.is_empty()) {
        if value(&format!("iou.{class}")).and_then(|v| v.parse::<f64>().ok()).is_none() {
            missing.push(format!("iou.{class}"));
        }
    }
    outcome(
        codes.iter().all(|&c| c == 0) && missing.is_empty() && !report.is_empty(),
        format!("exit codes {codes:?}, missing report fields {missing:?}"),
    )
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("gradient suite", gradients),
        ("oracle equivalence", oracles),
        ("masking exactness", masking),
        ("ASL unit properties", asl_properties),
        ("overfit gate", overfit),
        ("anomaly separation", separation),
        ("ASL robustness", asl_robustness),
        ("determinism", determinism),
        ("end-to-end smoke", smoke),
    ];
    let only: Option<usize> = std::env::var("AGRIMAE_ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        if only.is_some_and(|n| n != i + 1) {
            continue;
        }
        let o = run();
        failed += usize::from(!o.passed);
        println!(
            "{} criterion {} {name}: {}",
            if o.passed { "PASS" } else { "FAIL" },
            i + 1,
            o.detail
        );
    }
    println!("acceptance: {failed} criteria failed");
    if failed > 0 && std::env::var("AGRIMAE_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
