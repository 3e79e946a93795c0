mod common;

use kdaction::dataset::Split;
use kdaction::evaluation::evaluate_model;
use kdaction::experiment::Experiment;
use kdaction::models::ModelHandle;
use kdaction::nn::{ParamTree, Slot};
use kdaction::training::{
    distill_student, freeze, load_checkpoint, save_checkpoint, train_student_supervised, train_teacher, DistillStage,
    RunOptions, TrainError,
};

fn experiment(dir: &std::path::Path) -> Experiment {
    let data = common::fixture(dir);
    Experiment::with_dataset(common::fixture_config(&dir.join("manifest.jsonl")), data)
}

fn trained_teacher(exp: &Experiment) -> ModelHandle {
    let mut t = exp.train_teacher(None, None).unwrap().model;
    freeze(&mut t);
    t
}

#[test]
fn teacher_training_is_deterministic_and_keeps_backbone() {
    let dir = tempfile::tempdir().unwrap();
    let mut exp = experiment(dir.path());
    exp.config.teacher.train.epochs = 5;
    let before = exp.build_teacher().unwrap();
    let backbone_before = before.as_jointnet().unwrap().backbone_checksum();
    let a = exp.train_teacher(None, None).unwrap();
    let b = exp.train_teacher(None, None).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.history.len(), 5);
    assert_eq!(a.model.as_jointnet().unwrap().backbone_checksum(), backbone_before);
    assert_ne!(a.model.checksum(), before.checksum());
}

#[test]
fn fully_frozen_teacher_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let exp = experiment(dir.path());
    let mut t = exp.build_teacher().unwrap();
    freeze(&mut t);
    let err = train_teacher(t, &exp.data, &exp.config.teacher.train, &RunOptions::default()).unwrap_err();
    assert!(matches!(err, TrainError::NoTrainableParameters));
}

#[test]
fn distillation_requires_frozen_teacher_and_matching_classes() {
    let dir = tempfile::tempdir().unwrap();
    let mut exp = experiment(dir.path());
    exp.config.teacher.train.epochs = 1;
    let teacher = exp.train_teacher(None, None).unwrap().model;
    let err = distill_student(
        exp.build_student().unwrap(),
        &teacher,
        &exp.data,
        &exp.config.student.train,
        &RunOptions::default(),
    )
    .unwrap_err();
    assert!(matches!(err, TrainError::TeacherNotFrozen(_)));

    let mut frozen = teacher;
    freeze(&mut frozen);
    exp.config.student.model.num_classes = 400;
    exp.config.student.train.stage = DistillStage::Early;
    let early_student = exp.build_student().unwrap();
    exp.config.student.train.stage = DistillStage::Late;
    let err = distill_student(early_student, &frozen, &exp.data, &exp.config.student.train, &RunOptions::default())
        .unwrap_err();
    assert!(matches!(err, TrainError::ClassMismatch { .. }));
}

#[test]
fn distillation_leaves_teacher_untouched_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let mut exp = experiment(dir.path());
    exp.config.student.train.epochs = 4;
    let teacher = trained_teacher(&exp);
    let sum = teacher.checksum();
    let run = || {
        distill_student(
            exp.build_student().unwrap(),
            &teacher,
            &exp.data,
            &exp.config.student.train,
            &RunOptions::default(),
        )
        .unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.history, b.history);
    assert_eq!(teacher.checksum(), sum);
    let mut grads = 0.0;
    teacher.visit_state("", &mut |_, slot| {
        if let Slot::Param(p) = slot {
            grads += p.grad.iter().map(|g| g.abs()).sum::<f64>();
        }
    });
    assert_eq!(grads, 0.0);
    for r in &a.history.records {
        let alpha = exp.config.student.train.distill.alpha;
        assert!((r.train_loss - (alpha * r.ce_part + (1.0 - alpha) * r.kl_part)).abs() < 1e-9);
    }
}

#[test]
fn alpha_one_matches_pure_cross_entropy() {
    let dir = tempfile::tempdir().unwrap();
    let mut exp = experiment(dir.path());
    exp.config.student.train.epochs = 5;
    exp.config.student.train.distill.alpha = 1.0;
    let teacher = trained_teacher(&exp);
    let distilled = distill_student(
        exp.build_student().unwrap(),
        &teacher,
        &exp.data,
        &exp.config.student.train,
        &RunOptions::default(),
    )
    .unwrap();
    let plain = train_student_supervised(
        exp.build_student().unwrap(),
        &exp.data,
        &exp.config.student.train,
        &RunOptions::default(),
    )
    .unwrap();
    for (d, p) in distilled.history.records.iter().zip(&plain.history.records) {
        assert_eq!(d.train_loss, p.train_loss);
        assert_eq!(d.val_loss, p.val_loss);
        assert_eq!(d.val_acc, p.val_acc);
    }
    assert_eq!(distilled.model.checksum(), plain.model.checksum());
}

#[test]
fn teacher_logit_cache_changes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let mut exp = experiment(dir.path());
    exp.config.student.train.epochs = 3;
    let teacher = trained_teacher(&exp);
    let plain = distill_student(
        exp.build_student().unwrap(),
        &teacher,
        &exp.data,
        &exp.config.student.train,
        &RunOptions::default(),
    )
    .unwrap();
    exp.config.student.train.cache_teacher_logits = true;
    let cached = distill_student(
        exp.build_student().unwrap(),
        &teacher,
        &exp.data,
        &exp.config.student.train,
        &RunOptions::default(),
    )
    .unwrap();
    assert_eq!(plain.history, cached.history);
}

#[test]
fn early_stage_runs_and_reports_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let mut exp = experiment(dir.path());
    exp.config.student.train.epochs = 3;
    exp.config.student.train.stage = DistillStage::Early;
    let teacher = trained_teacher(&exp);
    let student = exp.build_student().unwrap();
    assert_eq!(student.as_student().unwrap().num_classes(), 400);
    let out = distill_student(student, &teacher, &exp.data, &exp.config.student.train, &RunOptions::default()).unwrap();
    for r in &out.history.records {
        assert!((0.0..=1.0).contains(&r.val_acc));
        assert_eq!(r.ce_part, 0.0);
        assert_eq!(r.train_loss, r.kl_part);
    }
}

#[test]
fn checkpoints_round_trip_and_resume_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let mut exp = experiment(dir.path());
    exp.config.teacher.train.epochs = 8;
    let full = exp.train_teacher(None, None).unwrap();

    let ckdir = dir.path().join("ck");
    let options = RunOptions { checkpoint_dir: Some(ckdir.clone()), stop_after: Some(3), ..Default::default() };
    let partial = train_teacher(exp.build_teacher().unwrap(), &exp.data, &exp.config.teacher.train, &options).unwrap();
    assert_eq!(partial.history.len(), 3);
    let resume = load_checkpoint(ckdir.join("last.ckpt")).unwrap();
    assert_eq!(resume.epoch, 3);
    let options = RunOptions { resume: Some(resume), ..Default::default() };
    let resumed = train_teacher(exp.build_teacher().unwrap(), &exp.data, &exp.config.teacher.train, &options).unwrap();
    assert_eq!(resumed.history, full.history);
    assert_eq!(resumed.model.checksum(), full.model.checksum());

    let path = dir.path().join("probe.ckpt");
    save_checkpoint(&full.last, &path).unwrap();
    let restored = load_checkpoint(&path).unwrap().restore_model().unwrap();
    let probe: Vec<_> = (0..exp.data.manifest().records.len()).map(|i| exp.data.sequence(i).unwrap()).collect();
    assert_eq!(restored.clip_logits(&probe).unwrap(), full.model.clip_logits(&probe).unwrap());
    assert_eq!(
        evaluate_model(&restored, &exp.data, Split::Val).unwrap(),
        evaluate_model(&full.model, &exp.data, Split::Val).unwrap()
    );
}

#[test]
fn resumed_run_appends_only_remaining_epochs() {
    let dir = tempfile::tempdir().unwrap();
    let mut exp = experiment(dir.path());
    exp.config.student.train.epochs = 6;
    let teacher = trained_teacher(&exp);
    let cfg = &exp.config.student.train;
    let first = distill_student(
        exp.build_student().unwrap(),
        &teacher,
        &exp.data,
        cfg,
        &RunOptions { stop_after: Some(4), ..Default::default() },
    )
    .unwrap();
    let rest = distill_student(
        exp.build_student().unwrap(),
        &teacher,
        &exp.data,
        cfg,
        &RunOptions { resume: Some(first.last), ..Default::default() },
    )
    .unwrap();
    assert_eq!(rest.history.len(), 6);
    assert_eq!(rest.history.records[..4], first.history.records[..]);
    assert!(rest.model.count_parameters(true) > 0);
}
