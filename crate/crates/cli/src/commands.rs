use std::path::{Path, PathBuf};

use kdaction::dataset::{
    make_synthetic_fixture, scan_clip_tree, ClipManifest, Dataset, FixtureSpec, SamplingConfig, Split,
};
use kdaction::evaluation::{
    evaluate_model, export_curves, read_history, render_curves, run_sweep, sweep_dir, EvalReport, SweepAxis,
};
use kdaction::experiment::{parse_override, Experiment, ExperimentConfig};
use kdaction::models::ModelHandle;
use kdaction::training::{load_checkpoint, Checkpoint, DistillStage, RunHistory, TrainOutcome};
use serde_json::{json, Value};

use crate::error::CliError;
use crate::{AxisArg, DistillArgs, EvalArgs, Global, PlotArgs, PrepareArgs, SplitArg, SweepArgs, TrainArgs};

fn load_config(g: &Global) -> Result<ExperimentConfig, CliError> {
    let path = g.config.as_ref().ok_or_else(|| CliError::usage("this command needs --config <file>"))?;
    let overrides = g.overrides.iter().map(|o| parse_override(o)).collect::<Result<Vec<_>, _>>()?;
    Ok(ExperimentConfig::load(path, &overrides)?)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn write_json(path: &Path, value: &Value) -> Result<(), CliError> {
    write(path, serde_json::to_string_pretty(value).expect("json serializes") + "\n")
}

/// Creates the run directory, starts its log sidecar and records the resolved config.
fn open_run_dir(dir: &Path, config: &ExperimentConfig) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    crate::runlog::attach(dir).map_err(|e| CliError::io(dir, e))?;
    write(&dir.join("config.toml"), config.to_toml())
}

fn resume_from(dir: &Path, resume: bool) -> Result<Option<Checkpoint>, CliError> {
    let last = dir.join("last.ckpt");
    if !resume || !last.exists() {
        return Ok(None);
    }
    let ckpt = load_checkpoint(&last)?;
    log::info!("resuming from {} at epoch {}", last.display(), ckpt.epoch);
    Ok(Some(ckpt))
}

fn split_of(s: SplitArg) -> Split {
    match s {
        SplitArg::Train => Split::Train,
        SplitArg::Val => Split::Val,
    }
}

fn print_manifest_counts(manifest: &ClipManifest, path: &Path) {
    let train = manifest.class_counts(Some(Split::Train));
    let val = manifest.class_counts(Some(Split::Val));
    println!("manifest: {}", path.display());
    println!(
        "classes: {}  clips: {} (train {}, val {})",
        manifest.vocabulary.len(),
        manifest.records.len(),
        train.iter().sum::<usize>(),
        val.iter().sum::<usize>()
    );
    for (i, name) in manifest.vocabulary.names().iter().enumerate() {
        println!("  {name}: train {} val {}", train[i], val[i]);
    }
}

pub fn prepare(a: &PrepareArgs) -> Result<(), CliError> {
    if !(a.split > 0.0 && a.split < 1.0) {
        return Err(CliError::usage(format!("--split must lie strictly between 0 and 1, got {}", a.split)));
    }
    if a.synthetic {
        let out = a.out.clone().unwrap_or_else(|| PathBuf::from("data/fixture"));
        let spec = FixtureSpec {
            train_fraction: a.split,
            ..FixtureSpec::new(a.classes, a.per_class, a.frames, a.size, a.seed)
        };
        let manifest = make_synthetic_fixture(&out, &spec)?;
        print_manifest_counts(&manifest, &out.join("manifest.jsonl"));
        return Ok(());
    }
    let src = a.src.as_ref().expect("clap requires --src without --synthetic");
    let mut manifest = scan_clip_tree(src, a.split, a.seed)?;
    if manifest.records.is_empty() {
        return Err(CliError::usage(format!("no clips found under {}", src.display())));
    }
    let out = a.out.clone().unwrap_or_else(|| src.join("manifest.jsonl"));
    let out_dir = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    if !same_dir(out_dir, src) {
        // record paths are relative to the manifest's directory
        let abs = src.canonicalize().map_err(|e| CliError::io(src, e))?;
        for r in &mut manifest.records {
            r.path = abs.join(&r.path);
        }
    }
    std::fs::create_dir_all(out_dir).map_err(|e| CliError::io(out_dir, e))?;
    manifest.save(&out)?;
    print_manifest_counts(&manifest, &out);
    Ok(())
}

fn same_dir(a: &Path, b: &Path) -> bool {
    match (a.canonicalize(), b.canonicalize()) {
        (Ok(x), Ok(y)) => x == y,
        _ => false,
    }
}

fn report_json(report: &EvalReport) -> Value {
    let per_class: serde_json::Map<String, Value> =
        report.class_names.iter().zip(&report.per_class_accuracy).map(|(n, a)| (n.clone(), json!(a))).collect();
    json!({
        "split": report.split,
        "clips": report.clip_count,
        "frames": report.frame_count,
        "frame_top1": report.frame_top1,
        "video_top1": report.video_top1,
        "class_names": report.class_names,
        "per_class_accuracy": per_class,
        "confusion": report.confusion,
    })
}

fn history_best(history: &RunHistory) -> Value {
    history.best().map_or(Value::Null, |r| serde_json::to_value(r).expect("record serializes"))
}

/// Writes curves, the val report of `best.ckpt` and the summary.
fn finish_run(
    dir: &Path,
    role: &str,
    exp: &Experiment,
    outcome: &TrainOutcome,
    evaluate: bool,
) -> Result<(), CliError> {
    export_curves(&outcome.history, &dir.join("history"))?;
    let best: ModelHandle = load_checkpoint(dir.join("best.ckpt"))?.restore_model()?;
    let report = if evaluate { Some(evaluate_model(&best, &exp.data, Split::Val)?) } else { None };
    let best_epoch = outcome.history.best().map(|r| r.epoch);
    let mut text = format!("{role} run: {}\nepochs: {}\n", dir.display(), outcome.history.len());
    if let Some(e) = best_epoch {
        text.push_str(&format!("best epoch: {e}\n"));
    }
    match &report {
        Some(r) => text.push_str(&r.to_text()),
        None => {
            let agreement = outcome.history.best().map_or(0.0, |r| r.val_acc);
            text.push_str(&format!("val agreement with backbone argmax: {agreement:.4}\n"));
        }
    }
    print!("{text}");
    write(&dir.join("report.txt"), &text)?;
    let summary = json!({
        "role": role,
        "run_dir": dir,
        "config_hash": exp.config.hash8(),
        "epochs": outcome.history.len(),
        "best_epoch": best_epoch,
        "best_record": history_best(&outcome.history),
        "parameters": {
            "total": best.count_parameters(false),
            "trainable": best.count_parameters(true),
        },
        "val": report.as_ref().map(report_json),
    });
    write_json(&dir.join("summary.json"), &summary)
}

pub fn train_teacher(g: &Global, a: &TrainArgs) -> Result<(), CliError> {
    let config = load_config(g)?;
    let dir = config.teacher_dir();
    let exp = Experiment::open(config)?;
    open_run_dir(&dir, &exp.config)?;
    let resume = resume_from(&dir, a.resume)?;
    log::info!("training teacher into {}", dir.display());
    let outcome = exp.train_teacher(Some(dir.clone()), resume)?;
    log::info!("teacher finished after {} epochs", outcome.history.len());
    finish_run(&dir, "teacher", &exp, &outcome, true)
}

pub fn distill(g: &Global, a: &DistillArgs) -> Result<(), CliError> {
    let config = load_config(g)?;
    let teacher_path = a.teacher.clone().unwrap_or_else(|| config.teacher_dir().join("best.ckpt"));
    if !teacher_path.exists() {
        return Err(CliError::usage(format!(
            "no teacher checkpoint at {}; run train-teacher first or pass --teacher",
            teacher_path.display()
        )));
    }
    let teacher = load_checkpoint(&teacher_path)?.restore_model()?;
    let dir = config.student_dir();
    let exp = Experiment::open(config)?;
    open_run_dir(&dir, &exp.config)?;
    let resume = resume_from(&dir, a.resume)?;
    log::info!("distilling {} into {}", teacher_path.display(), dir.display());
    let (outcome, _) = exp.distill(teacher, Some(dir.clone()), resume)?;
    log::info!("student finished after {} epochs", outcome.history.len());
    let late = exp.config.student.train.stage == DistillStage::Late;
    finish_run(&dir, "student", &exp, &outcome, late)
}

pub fn eval(g: &Global, a: &EvalArgs) -> Result<(), CliError> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let model = ckpt.restore_model()?;
    let config = match &g.config {
        Some(_) => Some(load_config(g)?),
        None => serde_json::from_value::<ExperimentConfig>(ckpt.config.clone()).ok(),
    };
    let manifest_path = a
        .manifest
        .clone()
        .or_else(|| config.as_ref().map(|c| c.dataset.manifest.clone()))
        .ok_or_else(|| CliError::usage("checkpoint records no manifest; pass --manifest"))?;
    let sampling = config.map(|c| c.dataset.sampling).unwrap_or_else(SamplingConfig::default);
    let data = Dataset::new(ClipManifest::load(&manifest_path)?, sampling)?;
    let split = split_of(a.split);
    let report = evaluate_model(&model, &data, split)?;

    let stem = a.out.clone().unwrap_or_else(|| {
        let name = a.checkpoint.file_stem().unwrap_or_default().to_string_lossy();
        a.checkpoint.with_file_name(format!("eval-{name}-{split}"))
    });
    if let Some(dir) = stem.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    let text =
        format!("checkpoint: {}\nmanifest: {}\n{}", a.checkpoint.display(), manifest_path.display(), report.to_text());
    print!("{text}");
    write(&stem.with_extension("txt"), &text)?;
    let mut summary = report_json(&report);
    summary["checkpoint"] = json!(a.checkpoint);
    summary["manifest"] = json!(manifest_path);
    write_json(&stem.with_extension("json"), &summary)
}

pub fn sweep(g: &Global, a: &SweepArgs) -> Result<(), CliError> {
    let config = load_config(g)?;
    let axis = match a.axis {
        AxisArg::Alpha => SweepAxis::Alpha,
        AxisArg::Backbone => SweepAxis::Backbone,
        AxisArg::Stage => SweepAxis::Stage,
    };
    let runs = a.runs.unwrap_or(if a.seeds.is_empty() { config.eval.run_count } else { a.seeds.len() });
    let seeds: Vec<u64> = if a.seeds.is_empty() {
        if runs > config.eval.seeds.len() {
            return Err(CliError::usage(format!(
                "{runs} runs requested but eval.seeds lists {}",
                config.eval.seeds.len()
            )));
        }
        config.eval.seeds[..runs].to_vec()
    } else {
        a.seeds.clone()
    };
    if seeds.len() != runs {
        return Err(CliError::usage(format!("--runs {runs} does not match {} seeds", seeds.len())));
    }
    let values: Vec<String> = a.values.iter().map(|v| v.trim().to_string()).filter(|v| !v.is_empty()).collect();
    let dir = sweep_dir(&config, axis, &values, &seeds);
    let exp = Experiment::open(config)?;
    open_run_dir(&dir, &exp.config)?;
    log::info!("sweeping {} over {:?} with seeds {seeds:?}", axis.config_path(), values);
    let result = run_sweep(&exp.config, &exp.data, axis, &values, runs, &seeds)?;
    let text = result.to_text();
    print!("{text}");
    write(&dir.join("sweep.txt"), &text)?;
    write(&dir.join("summary.json"), result.to_json())?;
    println!("report: {}", dir.join("sweep.txt").display());
    Ok(())
}

pub fn plot(a: &PlotArgs) -> Result<(), CliError> {
    let history = read_history(&a.history)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    render_curves(&history, &a.out)?;
    println!("wrote {} ({} epochs)", a.out.display(), history.len());
    Ok(())
}
