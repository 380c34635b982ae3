//! Training commands: `pretrain` (ground-truth targets, no teacher) and
//! `distill` (pseudo-label targets plus teacher KL/MSE terms).

use std::path::Path;

use serde_json::json;

use distilkit_core::losses::{train, StepStats, TrainSample};
use distilkit_core::model::{init_student, ModelConfig, ToyModelParams};

use crate::args::{DistillArgs, PretrainArgs};
use crate::commands::{load_model, loss_log_table};
use crate::config::RunSettings;
use crate::manifest::{base_dir, read_manifest};
use crate::report::{num, write_json, write_table};
use crate::validation;

fn write_outputs(
    out: &Path,
    params: &ToyModelParams,
    log: &[StepStats],
    loss_log: Option<&Path>,
    report: Option<&Path>,
    settings: &RunSettings,
) -> anyhow::Result<()> {
    crate::checkpoint::write_checkpoint(out, params)?;
    if let Some(path) = loss_log {
        write_table(path, &loss_log_table(log))?;
    }
    let summary = json!({
        "schema": crate::report::SCHEMA,
        "config": settings.echo(),
        "steps_run": log.len(),
        "first_total": log.first().map(|s| num(s.breakdown.total)),
        "final_total": log.last().map(|s| num(s.breakdown.total)),
    });
    if let Some(path) = report {
        write_json(path, &summary)?;
    }
    println!("{summary}");
    Ok(())
}

pub fn pretrain(args: &PretrainArgs) -> anyhow::Result<()> {
    let mut settings = args.settings.resolve()?;
    // Pretraining has no teacher: only the data term applies.
    if args.settings.alpha_kl.is_none() {
        settings.weights.alpha_kl = 0.0;
    }
    if args.settings.alpha_mse.is_none() {
        settings.weights.alpha_mse = 0.0;
    }
    if settings.weights.alpha_kl > 0.0 || settings.weights.alpha_mse > 0.0 {
        return Err(validation("pretrain has no teacher; alpha_kl and alpha_mse must be 0"));
    }
    let model = load_model(&args.model)?;
    let entries = read_manifest(&args.manifest)?;
    let base = base_dir(&args.manifest);
    let corpus: Vec<TrainSample> = entries
        .iter()
        .map(|e| {
            let sample = e.realize(&base)?;
            Ok(TrainSample::from_sample(&sample, model.config.vocab)?)
        })
        .collect::<anyhow::Result<_>>()?;

    let (trained, log) = train(model, None, &corpus, &settings.train, &settings.weights)?;
    write_outputs(
        &args.out,
        &trained,
        &log,
        args.loss_log.as_deref(),
        None,
        &settings,
    )
}

/// Shared by the distill command and the sweep driver: initialize a student
/// from the teacher and train it on pseudo-label targets.
pub(crate) fn distill_student(
    teacher: &ToyModelParams,
    student_config: &ModelConfig,
    corpus: &[TrainSample],
    settings: &RunSettings,
) -> anyhow::Result<(ToyModelParams, Vec<StepStats>)> {
    let student = init_student(teacher, student_config)?;
    let (trained, log) =
        train(student, Some(teacher), corpus, &settings.train, &settings.weights)?;
    Ok((trained, log))
}

/// Builds training pairs from a pseudo-labelled manifest.
pub(crate) fn pseudo_train_corpus(
    manifest: &Path,
    vocab: usize,
) -> anyhow::Result<Vec<TrainSample>> {
    let entries = read_manifest(manifest)?;
    let base = base_dir(manifest);
    entries
        .iter()
        .map(|e| {
            let pseudo = e.realize_pseudo(&base)?;
            Ok(TrainSample::from_pseudo(&pseudo, vocab)?)
        })
        .collect()
}

pub fn distill(args: &DistillArgs) -> anyhow::Result<()> {
    // The published recipe freezes the copied encoder; opt out explicitly.
    let mut base = RunSettings::default();
    base.train.freeze_encoder = true;
    let settings = args.settings.resolve_from(base)?;
    let teacher = load_model(&args.teacher)?;
    let student_config = ModelConfig {
        enc_layers: args.enc_layers.unwrap_or(teacher.config.enc_layers),
        dec_layers: args.dec_layers,
        ..teacher.config
    };
    if settings.train.freeze_encoder
        && student_config.enc_layers != teacher.config.enc_layers
    {
        return Err(validation(
            "freeze_encoder requires the student to copy the full encoder \
             (enc_layers must match the teacher)",
        ));
    }
    let corpus = pseudo_train_corpus(&args.manifest, teacher.config.vocab)?;
    let (trained, log) = distill_student(&teacher, &student_config, &corpus, &settings)?;
    write_outputs(
        &args.out,
        &trained,
        &log,
        args.loss_log.as_deref(),
        args.report.as_deref(),
        &settings,
    )
}
