use hireview::data::{build_dataset, split_dataset, GeneratorConfig};
use hireview::hierarchy::{fit, HierarchicalModel, ModelConfig, TrainConfig, TrainTarget};
use hireview::metrics::{emit_report, load_report, MetricsReport, ReportFormat};
use hireview::tensor::argmax;

fn tiny() -> GeneratorConfig {
    GeneratorConfig { n_classes: 3, per_score: 4, image_size: 32, channels: 1, augment: 1, seed: 21 }
}

fn short(target: TrainTarget) -> TrainConfig {
    TrainConfig { epochs: 1, batch_size: 8, ..TrainConfig::desk(target) }
}

#[test]
fn generate_train_evaluate_report() {
    let ds = build_dataset(&tiny()).unwrap();
    let (train, val) = split_dataset(&ds, (3, 1), 1).unwrap();
    let mut model = HierarchicalModel::new(ModelConfig::desk(3, 1), 1).unwrap();
    for target in [TrainTarget::Higher, TrainTarget::Lowers] {
        let trace = fit(&mut model, &train.samples, Some(&val.samples), &short(target)).unwrap();
        assert_eq!(trace.epochs_run, 1);
        assert!(trace.rows.iter().all(|r| r.loss.is_finite() && (0.0..=1.0).contains(&r.accuracy)));
    }
    let (routed, stage) = model.evaluate(&val.samples).unwrap();
    assert_eq!(routed.len(), val.len());
    for r in &routed {
        assert_eq!(r.predicted_class, argmax(&r.class_probs));
        assert!((r.score_probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!((1..=5).contains(&r.predicted_score));
    }
    assert!(stage.iter().all(|r| r.predicted_class == r.true_class));

    let report = MetricsReport::build(&routed, &stage, 3, 1).unwrap();
    for format in [ReportFormat::Csv, ReportFormat::Json] {
        let dir = tempfile::tempdir().unwrap();
        emit_report(&report, dir.path(), format).unwrap();
        assert_eq!(load_report(dir.path()).unwrap(), report.rounded());
    }
}

#[test]
fn training_is_identical_for_any_worker_count() {
    let ds = build_dataset(&tiny()).unwrap();
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let mut model = HierarchicalModel::new(ModelConfig::desk(3, 1), 4).unwrap();
            fit(&mut model, &ds.samples, None, &short(TrainTarget::Lower(1))).unwrap();
            model
        })
    };
    assert_eq!(run(1), run(3));
}

#[test]
fn lower_training_touches_only_its_model_and_the_extractor() {
    let ds = build_dataset(&tiny()).unwrap();
    let before = HierarchicalModel::new(ModelConfig::desk(3, 1), 8).unwrap();
    let mut after = before.clone();
    fit(&mut after, &ds.samples, None, &short(TrainTarget::Lower(2))).unwrap();
    assert_eq!(after.higher, before.higher);
    assert_eq!(after.lowers[0], before.lowers[0]);
    assert_ne!(after.lowers[2], before.lowers[2]);
    assert_ne!(after.fx, before.fx);

    let mut frozen = before.clone();
    let config = TrainConfig { freeze_fx: true, ..short(TrainTarget::Lower(2)) };
    fit(&mut frozen, &ds.samples, None, &config).unwrap();
    assert_eq!(frozen.fx, before.fx);
}
