//! Multi-point experiment sweeps: WER-threshold grid, nested data scaling,
//! and student decoder depth. Every point distills a fresh student from the
//! same teacher and evaluates it on the held-out manifest.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use serde_json::json;

use distilkit_core::corpus::{filter_by_wer, subsample, PseudoSample, Sample};
use distilkit_core::losses::TrainSample;
use distilkit_core::model::ModelConfig;

use crate::args::{SweepArgs, SweepKind};
use crate::commands::eval::{evaluate_manifest, EvalPlan};
use crate::commands::train::distill_student;
use crate::commands::{decode_config, load_model, make_pool};
use crate::config::RunSettings;
use crate::manifest::{base_dir, read_manifest};
use crate::report::{atomic_write, json_sibling, num, write_json, Table};
use crate::validation;

/// One sweep point; the JSON mirror's rows deserialize back into this.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepPoint {
    pub point: String,
    pub lambda: Option<f64>,
    pub fraction: Option<f64>,
    pub dec_layers: Option<usize>,
    pub fraction_filtered: Option<f64>,
    pub train_samples: usize,
    pub wer: f64,
    pub ier: f64,
    pub ser: f64,
    pub der: f64,
    pub dup5: usize,
    pub rtf: f64,
}

const COLUMNS: &[&str] = &[
    "point",
    "lambda",
    "fraction",
    "dec_layers",
    "fraction_filtered",
    "train_samples",
    "wer",
    "ier",
    "ser",
    "der",
    "dup5",
    "rtf",
];

fn point_row(p: &SweepPoint) -> Vec<serde_json::Value> {
    vec![
        p.point.clone().into(),
        p.lambda.map(num).unwrap_or(serde_json::Value::Null),
        p.fraction.map(num).unwrap_or(serde_json::Value::Null),
        p.dec_layers.map(Into::into).unwrap_or(serde_json::Value::Null),
        p.fraction_filtered.map(num).unwrap_or(serde_json::Value::Null),
        p.train_samples.into(),
        num(p.wer),
        num(p.ier),
        num(p.ser),
        num(p.der),
        p.dup5.into(),
        num(p.rtf),
    ]
}

pub fn sweep(args: &SweepArgs) -> anyhow::Result<()> {
    let mut base = RunSettings::default();
    base.train.freeze_encoder = true;
    let settings = args.settings.resolve_from(base)?;
    let teacher = load_model(&args.teacher)?;
    let pool = make_pool(args.jobs)?;
    let cfg = decode_config(settings.decode.max_len);
    let plan = EvalPlan::Short { exit: None };

    // Pseudo-labelled training pool, realized once.
    let entries = read_manifest(&args.manifest)?;
    let manifest_base = base_dir(&args.manifest);
    let pseudo: Vec<PseudoSample> = entries
        .iter()
        .map(|e| e.realize_pseudo(&manifest_base))
        .collect::<anyhow::Result<_>>()?;
    if pseudo.is_empty() {
        return Err(validation(format!("{}: empty manifest", args.manifest.display())));
    }

    let student_config = |dec_layers: usize| ModelConfig { dec_layers, ..teacher.config };
    let to_corpus = |subset: &[PseudoSample]| -> anyhow::Result<Vec<TrainSample>> {
        subset
            .iter()
            .map(|p| Ok(TrainSample::from_pseudo(p, teacher.config.vocab)?))
            .collect()
    };
    // Distills on `corpus`, evaluates held-out, fills in the shared fields.
    let run_point = |corpus: &[TrainSample],
                     config: &ModelConfig,
                     mut point: SweepPoint|
     -> anyhow::Result<SweepPoint> {
        let (student, _) = distill_student(&teacher, config, corpus, &settings)?;
        let (outcome, _) =
            evaluate_manifest(&student, &args.eval_manifest, "unsplit", &plan, &cfg, &pool)?;
        point.train_samples = corpus.len();
        point.wer = outcome.rates.wer;
        point.ier = outcome.rates.ier;
        point.ser = outcome.rates.ser;
        point.der = outcome.rates.der;
        point.dup5 = outcome.dup5;
        point.rtf = outcome.rtf;
        Ok(point)
    };

    let blank = SweepPoint {
        point: String::new(),
        lambda: None,
        fraction: None,
        dec_layers: None,
        fraction_filtered: None,
        train_samples: 0,
        wer: 0.0,
        ier: 0.0,
        ser: 0.0,
        der: 0.0,
        dup5: 0,
        rtf: 0.0,
    };

    let mut points = Vec::new();
    match args.kind {
        SweepKind::Threshold => {
            if args.lambdas.is_empty() {
                return Err(validation("--lambdas must name at least one threshold"));
            }
            for &lambda in &args.lambdas {
                let (kept, report) = filter_by_wer(&pseudo, lambda)?;
                let corpus = to_corpus(&kept)?;
                let point = SweepPoint {
                    point: format!("lambda={lambda}"),
                    lambda: Some(lambda),
                    fraction_filtered: Some(report.fraction_filtered),
                    ..blank.clone()
                };
                points.push(run_point(&corpus, &student_config(args.dec_layers), point)?);
            }
        }
        SweepKind::DataScaling => {
            if args.fractions.is_empty() {
                return Err(validation("--fractions must name at least one point"));
            }
            // Subsets are nested: each fraction takes a prefix of the same
            // seeded permutation.
            let samples: Vec<Sample> = pseudo.iter().map(|p| p.sample.clone()).collect();
            let by_id: HashMap<&str, &PseudoSample> =
                pseudo.iter().map(|p| (p.sample.id.as_str(), p)).collect();
            for &fraction in &args.fractions {
                let subset = subsample(&samples, fraction, settings.train.seed)?;
                let subset: Vec<PseudoSample> =
                    subset.iter().map(|s| by_id[s.id.as_str()].clone()).collect();
                let corpus = to_corpus(&subset)?;
                let point = SweepPoint {
                    point: format!("fraction={fraction}"),
                    fraction: Some(fraction),
                    ..blank.clone()
                };
                points.push(run_point(&corpus, &student_config(args.dec_layers), point)?);
            }
        }
        SweepKind::ModelSize => {
            if args.dec_layer_grid.is_empty() {
                return Err(validation("--dec-layer-grid must name at least one depth"));
            }
            let corpus = to_corpus(&pseudo)?;
            for &dec_layers in &args.dec_layer_grid {
                let point = SweepPoint {
                    point: format!("dec_layers={dec_layers}"),
                    dec_layers: Some(dec_layers),
                    ..blank.clone()
                };
                points.push(run_point(&corpus, &student_config(dec_layers), point)?);
            }
        }
    }

    let mut table = Table::new(COLUMNS);
    for p in &points {
        table.push(point_row(p));
    }
    atomic_write(&args.report, table.to_csv().as_bytes())?;
    let mut doc = table.to_json();
    doc["config"] = json!({
        "kind": format!("{:?}", args.kind),
        "teacher": args.teacher.display().to_string(),
        "eval_manifest": args.eval_manifest.display().to_string(),
        "settings": settings.echo(),
    });
    write_json(&json_sibling(&args.report), &doc)?;
    print!("{}", table.to_csv());
    Ok(())
}
