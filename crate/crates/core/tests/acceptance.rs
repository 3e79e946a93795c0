//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each
//! and exits non-zero if any failed or ran over its time budget.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use kdaction::dataset::{sample_uniform, ClipRecord, SamplingConfig, Split};
use kdaction::evaluation::{evaluate_model, run_sweep, video_level_accuracy, FramePrediction, SweepAxis, SweepResult};
use kdaction::experiment::Experiment;
use kdaction::losses::{cross_entropy, distillation_loss, kl_divergence, DistillParams, KlDirection, OneHotTarget};
use kdaction::models::ModelHandle;
use kdaction::nn::{ParamTree, Slot};
use kdaction::training::{cosine_annealing_lr, freeze, load_checkpoint, save_checkpoint, RunOptions};
use ndarray::{array, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = fn() -> Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        let held: bool = $cond;
        if !held {
            return Err(format!($($fmt)+));
        }
    };
}

fn main() {
    let criteria: [(&str, Duration, Check); 9] = [
        ("1 loss oracles", Duration::from_secs(1), loss_oracles),
        ("2 gradient check", Duration::from_secs(10), gradient_check),
        ("3 video-rule oracle", Duration::from_secs(1), video_rule_oracle),
        ("4 sampling oracle", Duration::from_secs(1), sampling_oracle),
        ("5 end-to-end overfit smoke", Duration::from_secs(300), overfit_smoke),
        ("6 frozen parameters and determinism", Duration::from_secs(120), frozen_and_determinism),
        ("7 checkpoint round-trip and resume", Duration::from_secs(120), checkpoint_round_trip),
        ("8 alpha sweep harness", Duration::from_secs(600), sweep_harness),
        ("9 cosine schedule", Duration::from_secs(1), cosine_schedule),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, budget, check) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default())
        });
        let elapsed = start.elapsed();
        let outcome = match outcome {
            Ok(detail) if elapsed > budget => Err(format!("{detail}; took {elapsed:.2?}, budget {budget:?}")),
            other => other,
        };
        match outcome {
            Ok(detail) => println!("PASS criterion {name} [{elapsed:.2?}] {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL criterion {name} [{elapsed:.2?}] {why}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

fn loss_oracles() -> Result<String, String> {
    let uniform = Array2::<f64>::zeros((1, 4));
    let ce = cross_entropy(uniform.view(), &[OneHotTarget(2)]).map_err(|e| e.to_string())?.value;
    ensure!((ce - 4f64.ln()).abs() < 1e-9, "uniform cross-entropy {ce}");

    // softened teacher (0.25, 0.75), student (0.5, 0.5)
    let teacher = array![[0.0, 3f64.ln()]];
    let student = array![[0.0, 0.0]];
    let kl = kl_divergence(student.view(), teacher.view(), 1.0, KlDirection::TeacherReference, true)
        .map_err(|e| e.to_string())?
        .value;
    let hand = 0.25 * 0.5f64.ln() + 0.75 * 1.5f64.ln();
    ensure!((kl - 0.13081).abs() < 1e-5 && (kl - hand).abs() < 1e-12, "kl {kl}");

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let s = Array2::from_shape_fn((4, 5), |_| rng.random_range(-3.0..3.0));
    let t = Array2::from_shape_fn((4, 5), |_| rng.random_range(-3.0..3.0));
    let y: Vec<OneHotTarget> = (0..4).map(|i| OneHotTarget(i % 5)).collect();
    let at = |alpha| {
        distillation_loss(s.view(), t.view(), &y, &DistillParams { alpha, ..DistillParams::default() }).unwrap()
    };
    let (zero, one, half) = (at(0.0), at(1.0), at(0.5));
    ensure!((one.total - one.cross_entropy).abs() < 1e-12, "alpha=1 total {} vs ce {}", one.total, one.cross_entropy);
    ensure!((zero.total - zero.kl).abs() < 1e-12, "alpha=0 total {} vs kl {}", zero.total, zero.kl);
    ensure!((half.total - (zero.total + one.total) / 2.0).abs() < 1e-9, "midpoint {}", half.total);
    Ok(format!("ce={ce:.12} kl={kl:.8}"))
}

fn gradient_check() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    for case in 0..20 {
        let s = Array2::from_shape_fn((3, 5), |_| rng.random_range(-4.0..4.0));
        let t = Array2::from_shape_fn((3, 5), |_| rng.random_range(-4.0..4.0));
        let y: Vec<OneHotTarget> = (0..3).map(|_| OneHotTarget(rng.random_range(0..5))).collect();
        let params = DistillParams {
            alpha: rng.random_range(0.0..=1.0),
            tau: rng.random_range(0.5..8.0),
            direction: if case % 2 == 0 { KlDirection::TeacherReference } else { KlDirection::StudentReference },
            scale_by_tau_squared: true,
        };
        let out = distillation_loss(s.view(), t.view(), &y, &params).map_err(|e| e.to_string())?;
        ensure!(out.grad.dim() == s.dim(), "gradient shape {:?}", out.grad.dim());
        let mut numeric = Array2::<f64>::zeros(s.dim());
        for idx in 0..15 {
            let (i, j) = (idx / 5, idx % 5);
            let mut plus = s.clone();
            plus[[i, j]] += h;
            let mut minus = s.clone();
            minus[[i, j]] -= h;
            let fp = distillation_loss(plus.view(), t.view(), &y, &params).unwrap().total;
            let fm = distillation_loss(minus.view(), t.view(), &y, &params).unwrap().total;
            numeric[[i, j]] = (fp - fm) / (2.0 * h);
        }
        let diff = (&out.grad - &numeric).mapv(|v| v * v).sum().sqrt();
        let scale = numeric.mapv(|v| v * v).sum().sqrt().max(out.grad.mapv(|v| v * v).sum().sqrt()).max(1e-12);
        let rel = diff / scale;
        ensure!(rel < 1e-4, "case {case}: relative error {rel:e}");
        worst = worst.max(rel);
    }

    // teacher side: a frozen teacher accumulates no gradient during distillation
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut exp = experiment(dir.path());
    exp.config.teacher.train.epochs = 2;
    exp.config.student.train.epochs = 1;
    let (_, teacher) = exp
        .distill(exp.train_teacher(None, None).map_err(|e| e.to_string())?.model, None, None)
        .map_err(|e| e.to_string())?;
    let teacher_grad = grad_mass(&teacher);
    ensure!(teacher_grad == 0.0, "teacher gradient mass {teacher_grad}");
    Ok(format!("worst relative error {worst:.2e}, teacher gradient 0"))
}

fn grad_mass(model: &ModelHandle) -> f64 {
    let mut total = 0.0;
    model.visit_state("", &mut |_, slot| {
        if let Slot::Param(p) = slot {
            total += p.grad.iter().map(|g| g.abs()).sum::<f64>();
        }
    });
    total
}

fn video_rule_oracle() -> Result<String, String> {
    let mut cases = 0;
    let mut all = Vec::new();
    let mut expected_correct = 0;
    for total in 1..=30usize {
        for correct in 0..=total {
            let id = format!("clip_{total}_{correct}");
            let preds: Vec<FramePrediction> = (0..total)
                .map(|f| FramePrediction {
                    clip_id: id.clone(),
                    frame_index: f,
                    predicted: usize::from(f >= correct),
                    true_label: 0,
                })
                .collect();
            let oracle = correct as f64 >= (total as f64 / 2.0).ceil();
            ensure!(oracle == (2 * correct >= total), "oracle forms disagree at {correct}/{total}");
            let (acc, verdicts) = video_level_accuracy(&preds).map_err(|e| e.to_string())?;
            ensure!(verdicts.len() == 1 && verdicts[0].correct == oracle, "mismatch at {correct}/{total}");
            ensure!(acc == f64::from(u8::from(oracle)), "accuracy mismatch at {correct}/{total}");
            ensure!(
                verdicts[0].frames_total == total && verdicts[0].frames_correct == correct,
                "counts at {correct}/{total}"
            );
            expected_correct += usize::from(oracle);
            all.extend(preds);
            cases += 1;
        }
    }
    let (acc, _) = video_level_accuracy(&all).map_err(|e| e.to_string())?;
    ensure!(acc == expected_correct as f64 / cases as f64, "pooled accuracy {acc}");
    Ok(format!("{cases} cases, 0 mismatches"))
}

fn sampling_oracle() -> Result<String, String> {
    let mut cases = 0;
    for n in 1..=30usize {
        for k in 1..=n {
            let record = ClipRecord {
                clip_id: "c".into(),
                path: "c".into(),
                label_index: 0,
                split: Split::Train,
                frame_count: n,
            };
            let config = SamplingConfig { num_frames: k, ..SamplingConfig::default() };
            let got = sample_uniform(&record, &config);
            let want: Vec<usize> = (0..k).map(|i| ((i as f64 + 0.5) * n as f64 / k as f64).floor() as usize).collect();
            ensure!(got == want, "n={n} k={k}: {got:?} vs {want:?}");
            if k == n {
                ensure!(got == (0..n).collect::<Vec<_>>(), "identity fails at n={n}");
            }
            cases += 1;
        }
    }
    Ok(format!("{cases} (n, k) pairs"))
}

fn experiment(dir: &std::path::Path) -> Experiment {
    let data = common::fixture(dir);
    Experiment::with_dataset(common::fixture_config(&dir.join("manifest.jsonl")), data)
}

fn overfit_smoke() -> Result<String, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let exp = experiment(dir.path());
    ensure!(exp.data.manifest().records.len() == 8, "fixture has {} clips", exp.data.manifest().records.len());
    let teacher = exp.train_teacher(None, None).map_err(|e| e.to_string())?;
    let teacher_model = teacher.model;
    let teacher_train = evaluate_model(&teacher_model, &exp.data, Split::Train).map_err(|e| e.to_string())?.video_top1;
    let teacher_val = evaluate_model(&teacher_model, &exp.data, Split::Val).map_err(|e| e.to_string())?.video_top1;
    ensure!(teacher_train >= 0.95, "teacher train video accuracy {teacher_train}");
    let (student, _) = exp.distill(teacher_model, None, None).map_err(|e| e.to_string())?;
    let student_val = evaluate_model(&student.model, &exp.data, Split::Val).map_err(|e| e.to_string())?.video_top1;
    ensure!(student_val >= teacher_val - 0.05, "student val {student_val} vs teacher val {teacher_val}");
    Ok(format!("teacher train {teacher_train:.3} val {teacher_val:.3}; student val {student_val:.3}"))
}

fn frozen_and_determinism() -> Result<String, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut exp = experiment(dir.path());
    exp.config.teacher.train.epochs = 10;
    exp.config.student.train.epochs = 10;
    let untrained = exp.build_teacher().map_err(|e| e.to_string())?;
    let backbone_sum = untrained.as_jointnet().unwrap().backbone_checksum();
    let a = exp.train_teacher(None, None).map_err(|e| e.to_string())?;
    let b = exp.train_teacher(None, None).map_err(|e| e.to_string())?;
    ensure!(a.history == b.history, "teacher histories differ");
    ensure!(
        a.model.as_jointnet().unwrap().backbone_checksum() == backbone_sum,
        "backbone changed during teacher training"
    );

    let mut teacher = a.model;
    freeze(&mut teacher);
    let teacher_sum = teacher.checksum();
    let run = |teacher: &ModelHandle| {
        let options = RunOptions::default();
        kdaction::training::distill_student(
            exp.build_student().unwrap(),
            teacher,
            &exp.data,
            &exp.config.student.train,
            &options,
        )
    };
    let s1 = run(&teacher).map_err(|e| e.to_string())?;
    let s2 = run(&teacher).map_err(|e| e.to_string())?;
    ensure!(s1.history == s2.history, "student histories differ");
    ensure!(teacher.checksum() == teacher_sum, "teacher changed during distillation");
    ensure!(teacher.as_jointnet().unwrap().backbone_checksum() == backbone_sum, "backbone changed during distillation");
    Ok(format!("teacher {} / student {} epochs reproduced bit for bit", a.history.len(), s1.history.len()))
}

fn checkpoint_round_trip() -> Result<String, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut exp = experiment(dir.path());
    exp.config.teacher.train.epochs = 10;
    exp.config.student.train.epochs = 20;
    let mut teacher = exp.train_teacher(None, None).map_err(|e| e.to_string())?.model;
    freeze(&mut teacher);
    let probe: Vec<_> = (0..exp.data.manifest().records.len()).map(|i| exp.data.sequence(i).unwrap()).collect();

    let student = exp.build_student().map_err(|e| e.to_string())?;
    for (name, model) in [("teacher", &teacher), ("student", &student)] {
        let path = dir.path().join(format!("{name}.ckpt"));
        save_checkpoint(&kdaction::training::Checkpoint::of_model(model), &path).map_err(|e| e.to_string())?;
        let back = load_checkpoint(&path).map_err(|e| e.to_string())?.restore_model().map_err(|e| e.to_string())?;
        let (x, y) = (model.clip_logits(&probe).unwrap().0, back.clip_logits(&probe).unwrap().0);
        ensure!(x.iter().zip(&y).all(|(a, b)| a.to_bits() == b.to_bits()), "{name} probe logits differ after reload");
    }

    let cfg = &exp.config.student.train;
    let distill = |options: &RunOptions| {
        kdaction::training::distill_student(exp.build_student().unwrap(), &teacher, &exp.data, cfg, options)
    };
    let full = distill(&RunOptions::default()).map_err(|e| e.to_string())?;
    let ckdir = dir.path().join("partial");
    distill(&RunOptions { checkpoint_dir: Some(ckdir.clone()), stop_after: Some(10), ..Default::default() })
        .map_err(|e| e.to_string())?;
    let resume = load_checkpoint(ckdir.join("last.ckpt")).map_err(|e| e.to_string())?;
    ensure!(resume.epoch == 10, "checkpoint epoch {}", resume.epoch);
    let resumed = distill(&RunOptions { resume: Some(resume), ..Default::default() }).map_err(|e| e.to_string())?;
    ensure!(resumed.history.len() == 20, "resumed history has {} records", resumed.history.len());
    let full_acc = evaluate_model(&full.model, &exp.data, Split::Val).unwrap().video_top1;
    let resumed_acc = evaluate_model(&resumed.model, &exp.data, Split::Val).unwrap().video_top1;
    ensure!((full_acc - resumed_acc).abs() <= 1e-6, "final val accuracy {full_acc} vs resumed {resumed_acc}");
    let (a, b) = (full.history.last().unwrap().val_acc, resumed.history.last().unwrap().val_acc);
    ensure!((a - b).abs() <= 1e-6, "history val accuracy {a} vs {b}");
    Ok(format!("probe logits bit-identical; resumed val accuracy {resumed_acc:.3} = uninterrupted {full_acc:.3}"))
}

fn sweep_harness() -> Result<String, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let exp = experiment(dir.path());
    let settings: Vec<String> = ["0.90", "0.95", "0.97"].map(String::from).to_vec();
    let result =
        run_sweep(&exp.config, &exp.data, SweepAxis::Alpha, &settings, 2, &[11, 23]).map_err(|e| e.to_string())?;
    let path = dir.path().join("sweep.json");
    std::fs::write(&path, result.to_json()).map_err(|e| e.to_string())?;
    let reread = SweepResult::from_json(&std::fs::read_to_string(&path).unwrap()).map_err(|e| e.to_string())?;
    ensure!(reread == result, "report does not round-trip");
    ensure!(reread.rows.iter().map(|r| r.setting.as_str()).eq(["0.90", "0.95", "0.97"]), "grid differs");
    for row in &reread.rows {
        ensure!(row.run_accuracies.len() == 2 && row.seeds == [11, 23], "row {} has wrong run count", row.setting);
        let mut sum = 0.0;
        for a in &row.run_accuracies {
            sum += a;
        }
        let recomputed = sum / row.run_accuracies.len() as f64;
        ensure!(
            (recomputed - row.mean_accuracy).abs() <= 1e-12,
            "mean {} vs recomputed {recomputed}",
            row.mean_accuracy
        );
    }
    let means: Vec<String> = reread.rows.iter().map(|r| format!("{}:{:.3}", r.setting, r.mean_accuracy)).collect();
    Ok(means.join(" "))
}

fn cosine_schedule() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..5 {
        let base: f64 = rng.random_range(1e-5..1.0);
        let min = base * rng.random_range(0.0..0.5);
        let total = 2 * rng.random_range(1..200usize);
        let lr = |e| cosine_annealing_lr(e, total, base, min).unwrap();
        let closed =
            |e: usize| min + 0.5 * (base - min) * (1.0 + (std::f64::consts::PI * e as f64 / total as f64).cos());
        ensure!((lr(0) - base).abs() < 1e-12, "start {} vs {base}", lr(0));
        ensure!((lr(total) - min).abs() < 1e-12, "end {} vs {min}", lr(total));
        ensure!((lr(total / 2) - (base + min) / 2.0).abs() < 1e-12, "midpoint {}", lr(total / 2));
        for e in [0, total / 2, total] {
            ensure!((lr(e) - closed(e)).abs() < 1e-12, "epoch {e} of {total}");
        }
    }
    Ok("5 random triples".into())
}
