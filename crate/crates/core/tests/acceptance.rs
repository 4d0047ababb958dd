//! Acceptance run: one PASS/FAIL line per criterion. Exits nonzero if any fails.

use std::collections::HashSet;
use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use hireview::config::RunConfig;
use hireview::data::{build_dataset, generate_synthetic, load_dataset, save_dataset, split_dataset, GeneratorConfig, Origin};
use hireview::gradsuite::{run_suite, SUITE_SEEDS, SUITE_TOLERANCE};
use hireview::hierarchy::{combine_accuracy, fit, fit_flat, FlatModel, HierarchicalModel, ModelConfig, TrainTarget};
use hireview::metrics::{exact_accuracy, improvement_ratio, relaxed_accuracy, Field, PredictionRecord};
use hireview::rng::stream;
use hireview::tensor::Tensor;
use hireview::tiler::{expected_window_count, tile, TilingSpec};
use rand::Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn reporting_arithmetic() -> Outcome {
    let combined = combine_accuracy(0.8967, 0.8023).map_err(|e| e.to_string())?;
    let improvement = improvement_ratio(0.7194, 0.4568).map_err(|e| e.to_string())?;
    check(
        (combined - 0.7194).abs() <= 1e-4 && (improvement - 0.5748).abs() <= 1e-4,
        format!("combined {combined:.4}, improvement {improvement:.4}"),
    )
}

fn tiling() -> Outcome {
    let windows = expected_window_count(&TilingSpec::new(224, 64, 32).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    if windows != 36 {
        return Err(format!("224/64/32 gives {windows} windows"));
    }
    let mut rng = stream(2024, &[]);
    let specs = 250;
    for _ in 0..specs {
        let size = rng.random_range(1..=40);
        let window = rng.random_range(1..=size);
        let stride = rng.random_range(1..=size);
        let spec = TilingSpec::new(size, window, stride).map_err(|e| e.to_string())?;
        let channels = rng.random_range(1..=3);
        let image = Tensor::zeros(&[channels, size, size]);
        let tiles = tile(&image, &spec).map_err(|e| e.to_string())?;
        let side = (size - window) / stride + 1;
        if tiles.len() != side * side || tiles.iter().any(|t| t.shape() != [channels, window, window]) {
            return Err(format!("spec {size}/{window}/{stride} gave {} windows, expected {}", tiles.len(), side * side));
        }
    }
    Ok(format!("224/64/32 -> 36 windows; {specs} random specs match the formula"))
}

fn gradient_suite() -> Outcome {
    let cases = run_suite(&SUITE_SEEDS).map_err(|e| e.to_string())?;
    let worst = cases.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error)).expect("suite is not empty");
    let failed = cases.iter().filter(|c| !c.passed()).count();
    check(
        failed == 0,
        format!(
            "{} cases over {} seeds, {failed} above {SUITE_TOLERANCE:e}; worst {} seed {} at {:.2e}",
            cases.len(),
            SUITE_SEEDS.len(),
            worst.name,
            worst.seed,
            worst.max_rel_error
        ),
    )
}

fn attention_normalization() -> Outcome {
    let config = ModelConfig::desk(4, 1);
    let model = HierarchicalModel::new(config.clone(), 17).map_err(|e| e.to_string())?;
    let mut rng = stream(17, &[1]);
    let (mut worst, mut steps) = (0.0f64, 0usize);
    for pass in 0..100 {
        let image = Tensor::new(vec![1, 32, 32], (0..1024).map(|_| rng.random_range(0.0..1.0)).collect())
            .map_err(|e| e.to_string())?;
        let lower = &model.lowers[pass % model.lowers.len()];
        let (_, trace) = lower.forward_traced(&model.fx, &image, &config.tiling).map_err(|e| e.to_string())?;
        for alpha in &trace.alphas {
            worst = worst.max((alpha.sum() - 1.0).abs());
            steps += 1;
        }
    }
    check(worst < 1e-12, format!("{steps} decoder steps over 100 passes, max |sum(alpha) - 1| = {worst:.1e}"))
}

fn random_records(rng: &mut impl Rng) -> Vec<PredictionRecord> {
    let n = rng.random_range(1..60);
    (0..n)
        .map(|i| {
            let true_score = rng.random_range(1..=5u8);
            let predicted_score = rng.random_range(1..=5u8);
            let mut score_probs = vec![0.0; 5];
            score_probs[(predicted_score - 1) as usize] = 1.0;
            PredictionRecord {
                sample_id: i,
                true_class: 0,
                predicted_class: 0,
                class_probs: vec![1.0],
                true_score,
                predicted_score,
                score_probs,
            }
        })
        .collect()
}

fn relaxed_properties() -> Outcome {
    let mut rng = stream(5, &[]);
    let sets = 1000;
    for set in 0..sets {
        let records = random_records(&mut rng);
        let exact = exact_accuracy(&records, Field::Score);
        if relaxed_accuracy(&records, 0).to_bits() != exact.to_bits() {
            return Err(format!("set {set}: relaxed(0) differs from exact accuracy"));
        }
        let values: Vec<f64> = (0..=4).map(|g| relaxed_accuracy(&records, g)).collect();
        if values.windows(2).any(|w| w[1] < w[0]) {
            return Err(format!("set {set}: not monotone in gamma: {values:?}"));
        }
        if values[4] != 1.0 {
            return Err(format!("set {set}: relaxed(4) = {}", values[4]));
        }
    }
    Ok(format!("{sets} random record sets: gamma=0 bitwise exact, monotone, gamma=4 -> 1.0"))
}

fn dataset_arithmetic() -> Outcome {
    // counts do not depend on resolution; 16 px keeps the 25300-image pack small
    let config = GeneratorConfig { image_size: 16, channels: 1, ..GeneratorConfig::full() };
    let ds = build_dataset(&config).map_err(|e| e.to_string())?;
    let (raw, aug, total) = (ds.raw_count(), ds.augmented_count(), ds.len());
    if (raw, aug, total) != (2300, 23000, 25300) {
        return Err(format!("{raw} raw / {aug} augmented / {total} total"));
    }
    let (train, val) = split_dataset(&ds, (3, 1), 1).map_err(|e| e.to_string())?;
    let train_parents: HashSet<u64> = train.samples.iter().map(|s| s.parent_id).collect();
    let leaked = val.samples.iter().filter(|s| train_parents.contains(&s.parent_id)).count();
    let val_raw = val.samples.iter().filter(|s| s.origin == Origin::Raw).count();
    if leaked != 0 || train.len() + val.len() != total {
        return Err(format!("{leaked} validation samples share a parent with training"));
    }
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    save_dataset(&ds, dir.path()).map_err(|e| e.to_string())?;
    let loaded = load_dataset(dir.path()).map_err(|e| e.to_string())?;
    check(
        loaded == ds,
        format!(
            "2300 raw / 23000 augmented / 25300 total; split {}/{} ({val_raw} raw parents in val), 0 leaked; pack round trip exact",
            train.len(),
            val.len()
        ),
    )
}

fn overfit() -> Outcome {
    let start = Instant::now();
    let ds = generate_synthetic(&GeneratorConfig { n_classes: 4, per_score: 8, image_size: 32, channels: 1, augment: 0, seed: 3 })
        .map_err(|e| e.to_string())?;
    let mut model = HierarchicalModel::new(ModelConfig::desk(4, 1), 3).map_err(|e| e.to_string())?;
    let settings = RunConfig::desk().train;
    let mut parts = Vec::new();
    let mut ok = true;
    for target in [TrainTarget::Higher, TrainTarget::Lowers] {
        let mut config = settings.for_target(target, 3);
        config.epochs = 200;
        config.stop_at_train_accuracy = Some(0.95);
        let trace = fit(&mut model, &ds.samples, None, &config).map_err(|e| e.to_string())?;
        let acc = trace.last("train_eval").map(|r| r.accuracy).unwrap_or(0.0);
        ok &= acc >= 0.95;
        parts.push(format!("{target} {acc:.3} after {} epochs", trace.epochs_run));
    }
    check(ok, format!("{} samples: {}; {:.0?}", ds.len(), parts.join(", "), start.elapsed()))
}

fn hierarchy_vs_flat() -> Outcome {
    let mut gaps = Vec::new();
    for seed in [1u64, 2, 3] {
        let mut run = RunConfig::desk();
        run.dataset.seed = seed;
        run.seed = seed;
        let ds = build_dataset(&run.dataset).map_err(|e| e.to_string())?;
        let (train, val) = split_dataset(&ds, run.split, seed).map_err(|e| e.to_string())?;
        let val_s = Some(val.samples.as_slice());
        let mut hier = HierarchicalModel::new(run.model.clone(), seed).map_err(|e| e.to_string())?;
        for target in [TrainTarget::Higher, TrainTarget::Lowers] {
            fit(&mut hier, &train.samples, val_s, &run.train.for_target(target, seed)).map_err(|e| e.to_string())?;
        }
        let mut flat = FlatModel::new(run.model.clone(), seed).map_err(|e| e.to_string())?;
        fit_flat(&mut flat, &train.samples, val_s, &run.train.for_target(TrainTarget::Flat, seed)).map_err(|e| e.to_string())?;
        let (routed, _) = hier.evaluate(&val.samples).map_err(|e| e.to_string())?;
        let h = exact_accuracy(&routed, Field::Score);
        let f = exact_accuracy(&flat.evaluate(&val.samples).map_err(|e| e.to_string())?, Field::Score);
        gaps.push((seed, h, f));
    }
    let mean = gaps.iter().map(|(_, h, f)| h - f).sum::<f64>() / gaps.len() as f64;
    let detail: Vec<String> = gaps.iter().map(|(s, h, f)| format!("seed {s}: {h:.4} vs {f:.4}")).collect();
    check(mean >= 0.10, format!("mean gap {:+.2} pp ({})", 100.0 * mean, detail.join("; ")))
}

fn hireview(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_hireview")).args(args).output().map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("{args:?} failed: {}", String::from_utf8_lossy(&out.stderr)))
    }
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).expect("readable dir") {
            let path = entry.expect("entry").path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).expect("inside dir").display().to_string();
                out.push((rel, fs::read(&path).expect("readable file")));
            }
        }
    }
    out.sort();
    out
}

fn cli_determinism() -> Outcome {
    let root = tempfile::tempdir().map_err(|e| e.to_string())?;
    let p = |name: &str| root.path().join(name).display().to_string();
    let mut config = RunConfig::desk();
    config.dataset.per_score = 4;
    config.train.epochs = 2;
    fs::write(p("run.json"), config.to_json().map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    for run in ["a", "b"] {
        let pack = p(&format!("pack_{run}"));
        hireview(&["gen-data", "--config", &p("run.json"), "--out", &pack])?;
        let ckpt = p(&format!("ckpt_{run}"));
        for target in ["higher", "lower:0", "lower:1", "lower:2", "lower:3"] {
            hireview(&["train", "--config", &p("run.json"), "--data", &pack, "--target", target, "--out", &ckpt])?;
        }
        hireview(&["eval", "--config", &p("run.json"), "--data", &pack, "--ckpt-dir", &ckpt, "--out", &p(&format!("eval_{run}"))])?;
        hireview(&["ablate", "--config", &p("run.json"), "--data", &pack, "--out", &p(&format!("ablate_{run}"))])?;
    }
    let mut compared = 0;
    for what in ["pack", "ckpt", "eval", "ablate"] {
        let a = files(&root.path().join(format!("{what}_a")));
        let b = files(&root.path().join(format!("{what}_b")));
        if a.is_empty() || a != b {
            return Err(format!("{what} outputs differ between identical runs"));
        }
        compared += a.len();
    }
    Ok(format!("gen-data, train, eval and ablate repeated: {compared} files byte-identical"))
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("reporting arithmetic", reporting_arithmetic),
        ("tiling", tiling),
        ("gradient suite", gradient_suite),
        ("attention normalization", attention_normalization),
        ("relaxed-accuracy properties", relaxed_properties),
        ("dataset arithmetic", dataset_arithmetic),
        ("overfit sanity", overfit),
        ("hierarchy vs flat", hierarchy_vs_flat),
        ("cli determinism", cli_determinism),
    ];
    let mut failures = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = run();
        let (status, detail) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        failures += usize::from(outcome.is_err());
        println!("criterion {}: {status} {name}: {detail} [{:.1?}]", i + 1, start.elapsed());
    }
    if failures > 0 {
        println!("{failures} of {} criteria failed", criteria.len());
        std::process::exit(1);
    }
    println!("all {} criteria passed", criteria.len());
}
