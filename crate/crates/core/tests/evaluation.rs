mod common;

use kdaction::dataset::{make_synthetic_fixture, ClipManifest, Dataset, FixtureSpec, Split};
use kdaction::evaluation::{evaluate_model, run_sweep, SweepAxis, SweepResult};
use kdaction::experiment::Experiment;
use kdaction::models::{
    build_backbone, build_jointnet, build_student, zero_shot_predict, AdapterSpec, BackboneKind, BackboneSpec,
    FeatureStore, FrontNetSpec, ModelHandle, StudentArchitecture, StudentSpec,
};
use kdaction::training::freeze;

fn tiny_student(seed: u64) -> ModelHandle {
    let spec = StudentSpec { architecture: StudentArchitecture::TinyConv, num_classes: 4, dropout_rate: 0.2 };
    ModelHandle::Student(build_student(&spec, seed).unwrap())
}

#[test]
fn untrained_models_score_near_chance() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = make_synthetic_fixture(dir.path(), &FixtureSpec::new(4, 10, 25, 32, 5)).unwrap();
    let data = Dataset::new(manifest, common::fixture_sampling()).unwrap();
    let accs: Vec<f64> =
        (0..10).map(|s| evaluate_model(&tiny_student(s), &data, Split::Val).unwrap().video_top1).collect();
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    assert!((mean - 0.25).abs() <= 0.15, "mean chance accuracy {mean}");
}

#[test]
fn report_counts_and_order_invariance() {
    let dir = tempfile::tempdir().unwrap();
    let data = common::fixture(dir.path());
    let model = tiny_student(3);
    let report = evaluate_model(&model, &data, Split::Val).unwrap();
    let counts = data.manifest().class_counts(Some(Split::Val));
    for (row, &n) in report.confusion.iter().zip(&counts) {
        assert_eq!(row.iter().sum::<usize>(), n);
    }
    assert_eq!(report.confusion.iter().flatten().sum::<usize>(), report.clip_count);
    assert!((0.0..=1.0).contains(&report.frame_top1) && (0.0..=1.0).contains(&report.video_top1));

    let mut shuffled = data.manifest().clone();
    shuffled.records.reverse();
    let shuffled = ClipManifest::new(shuffled.vocabulary.clone(), shuffled.records, dir.path()).unwrap();
    let other =
        evaluate_model(&model, &Dataset::new(shuffled, common::fixture_sampling()).unwrap(), Split::Val).unwrap();
    assert_eq!(other.frame_top1, report.frame_top1);
    assert_eq!(other.video_top1, report.video_top1);
    assert_eq!(other.per_class_accuracy, report.per_class_accuracy);
    assert_eq!(other.confusion, report.confusion);
    assert!(report.to_text().contains("video top-1"));
}

#[test]
fn degenerate_sweep_equals_single_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let data = common::fixture(dir.path());
    let mut config = common::fixture_config(&dir.path().join("manifest.jsonl"));
    config.teacher.train.epochs = 5;
    config.student.train.epochs = 5;
    let result = run_sweep(&config, &data, SweepAxis::Alpha, &["0.9".to_string()], 1, &[11]).unwrap();
    assert_eq!(result.rows.len(), 1);

    let exp = Experiment::with_dataset(config.with_seed(11), data.clone());
    let teacher = exp.train_teacher(None, None).unwrap();
    let teacher = teacher.best.unwrap().restore_model().unwrap();
    let (outcome, _) = exp.distill(teacher, None, None).unwrap();
    let student = outcome.best.unwrap().restore_model().unwrap();
    let direct = evaluate_model(&student, &data, Split::Val).unwrap().video_top1;
    assert_eq!(result.rows[0].run_accuracies, vec![direct]);
    assert_eq!(result.rows[0].mean_accuracy, direct);
    assert_eq!(SweepResult::from_json(&result.to_json()).unwrap(), result);
}

#[test]
fn stage_and_backbone_axes_run() {
    let dir = tempfile::tempdir().unwrap();
    let data = common::fixture(dir.path());
    let mut config = common::fixture_config(&dir.path().join("manifest.jsonl"));
    config.teacher.train.epochs = 2;
    config.student.train.epochs = 2;
    let stages = run_sweep(&config, &data, SweepAxis::Stage, &["late".into(), "early".into()], 1, &[23]).unwrap();
    assert_eq!(stages.rows.len(), 2);
    let backbones =
        run_sweep(&config, &data, SweepAxis::Backbone, &["tiny-a".into(), "tiny-b".into()], 1, &[23]).unwrap();
    for row in stages.rows.iter().chain(&backbones.rows) {
        assert!(row.teacher_accuracies.iter().chain(&row.run_accuracies).all(|a| (0.0..=1.0).contains(a)));
    }
    assert!(run_sweep(&config, &data, SweepAxis::Alpha, &[], 1, &[1]).is_err());
    assert!(run_sweep(&config, &data, SweepAxis::Alpha, &["0.9".into()], 2, &[1]).is_err());
    assert!(run_sweep(&config, &data, SweepAxis::Alpha, &["1.5".into()], 1, &[1]).is_err());
}

#[test]
fn zero_shot_pipeline_runs_on_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let data = common::fixture(dir.path());
    let backbone = build_backbone(&BackboneSpec::default(), 0).unwrap();
    let idx = data.split_indices(Split::Val);
    let clips: Vec<_> = idx.iter().map(|&i| data.sequence(i).unwrap()).collect();
    let mapping: Vec<Vec<usize>> = (0..4).map(|c| (c * 100..c * 100 + 3).collect()).collect();
    let preds = zero_shot_predict(&backbone, &clips, &mapping).unwrap();
    let labels: Vec<usize> = idx.iter().map(|&i| data.manifest().records[i].label_index).collect();
    let acc = preds.iter().zip(&labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64;
    assert!((0.0..=1.0).contains(&acc));
}

#[test]
fn teacher_plus_student_stay_under_fifty_million() {
    let dir = tempfile::tempdir().unwrap();
    let store_path = dir.path().join("features.jsonl");
    // ResNet-50-based temporal backbone scale
    std::fs::write(&store_path, FeatureStore::new(400, 25_600_000).to_jsonl()).unwrap();
    let pretrained = BackboneSpec {
        kind: BackboneKind::PretrainedTemporal,
        identifier: store_path.to_string_lossy().into_owned(),
        output_dim: 400,
        frozen: true,
    };
    let student = ModelHandle::Student(
        build_student(
            &StudentSpec { architecture: StudentArchitecture::SmallResidual2d, num_classes: 4, dropout_rate: 0.2 },
            0,
        )
        .unwrap(),
    );
    let student_params = student.count_parameters(false);
    assert_eq!(student_params, 11_178_564);
    for spec in [BackboneSpec::default(), pretrained] {
        let frontnet = FrontNetSpec { num_classes: 4, ..Default::default() };
        let mut teacher = ModelHandle::Jointnet(
            build_jointnet(build_backbone(&spec, 0).unwrap(), &AdapterSpec::default(), &frontnet, 0).unwrap(),
        );
        let total = teacher.count_parameters(false) + student_params;
        assert!(total < 50_000_000, "{total}");
        freeze(&mut teacher);
        assert_eq!(teacher.count_parameters(true), 0);
    }
}
