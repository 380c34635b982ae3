//! Corpus evaluation: WER and its decomposition, repeated 5-gram counts,
//! latency/RTF, and manifest-level macro-averages across datasets.

use std::path::Path;
use std::time::Instant;

use anyhow::Context;
use rayon::prelude::*;
use serde_json::{json, Value};

use distilkit_core::corpus::Sample;
use distilkit_core::decode::{early_exit_decode, greedy_decode, DecodeConfig, EarlyExitConfig};
use distilkit_core::longform::transcribe_long;
use distilkit_core::metrics::{align, error_rates, ngram_duplicates, normalize, AlignmentCounts, ErrorRates};
use distilkit_core::model::{TokenId, ToyModelParams};
use distilkit_core::signal::FeatureSequence;

use crate::args::{EvalArgs, EvalMode};
use crate::commands::{decode_config, load_model, make_pool};
use crate::manifest::{read_manifest, realize_all};
use crate::report::{atomic_write, num, write_json, Table};
use crate::validation;

/// How each sample is transcribed.
#[derive(Debug, Clone, Copy)]
pub enum EvalPlan {
    Short { exit: Option<EarlyExitConfig> },
    Long { chunk_seconds: f64, overlap_seconds: Option<f64> },
}

/// Converts a second-based chunk geometry to frames for one sample.
fn chunk_frames(plan_seconds: f64, overlap_seconds: Option<f64>, frame_rate: f64) -> (usize, usize) {
    let chunk = (plan_seconds * frame_rate).round().max(1.0) as usize;
    let overlap = match overlap_seconds {
        Some(s) => (s * frame_rate).round().max(1.0) as usize,
        // Default: a sixth of the chunk on each side.
        None => (chunk / 6).max(1),
    };
    (chunk, overlap)
}

fn transcribe(
    model: &ToyModelParams,
    features: &FeatureSequence,
    plan: &EvalPlan,
    cfg: &DecodeConfig,
) -> anyhow::Result<(Vec<TokenId>, Option<f64>)> {
    match plan {
        EvalPlan::Short { exit: None } => {
            Ok((greedy_decode(model, features, cfg)?.tokens, None))
        }
        EvalPlan::Short { exit: Some(exit) } => {
            let (decoded, avg_layers) = early_exit_decode(model, features, exit, cfg)?;
            Ok((decoded.tokens, Some(avg_layers)))
        }
        EvalPlan::Long { chunk_seconds, overlap_seconds } => {
            let (chunk, overlap) =
                chunk_frames(*chunk_seconds, *overlap_seconds, features.frame_rate);
            Ok((transcribe_long(model, features, chunk, overlap, cfg)?, None))
        }
    }
}

/// One sample's scored transcription.
#[derive(Debug, Clone)]
pub struct SampleEval {
    pub id: String,
    pub ref_text: String,
    pub hyp_text: String,
    pub counts: AlignmentCounts,
    pub dup5: usize,
    pub avg_layers: Option<f64>,
}

/// One dataset row of the report.
#[derive(Debug, Clone)]
pub struct DatasetOutcome {
    pub dataset: String,
    pub split: &'static str,
    pub samples: usize,
    pub rates: ErrorRates,
    pub dup5: usize,
    pub audio_seconds: f64,
    pub wall_seconds: f64,
    pub rtf: f64,
    pub avg_layers: Option<f64>,
}

/// Transcribes and scores a realized corpus; wall time covers transcription
/// only (not manifest IO). Work is parallel over samples but results are
/// order-stable, so reports are byte-identical for any worker count.
pub fn eval_corpus(
    model: &ToyModelParams,
    samples: &[Sample],
    plan: &EvalPlan,
    cfg: &DecodeConfig,
    pool: &rayon::ThreadPool,
) -> anyhow::Result<(Vec<SampleEval>, f64)> {
    let start = Instant::now();
    let outputs: Vec<(Vec<TokenId>, Option<f64>)> = pool.install(|| {
        samples
            .par_iter()
            .map(|s| transcribe(model, &s.features, plan, cfg))
            .collect::<anyhow::Result<_>>()
    })?;
    let wall = start.elapsed().as_secs_f64();

    let mut evals = Vec::with_capacity(samples.len());
    for (sample, (tokens, avg_layers)) in samples.iter().zip(outputs) {
        let hyp_text = distilkit_core::corpus::detokenize(&tokens);
        let r = normalize(&sample.text);
        let h = normalize(&hyp_text);
        evals.push(SampleEval {
            id: sample.id.clone(),
            ref_text: sample.text.clone(),
            hyp_text,
            counts: align(&r.tokens, &h.tokens),
            dup5: ngram_duplicates(&h.tokens, 5),
            avg_layers,
        });
    }
    Ok((evals, wall))
}

/// Collapses per-sample scores into one dataset row (corpus-level rates:
/// summed counts over summed reference length).
pub fn dataset_outcome(
    dataset: String,
    split: &'static str,
    samples: &[Sample],
    evals: &[SampleEval],
    wall_seconds: f64,
) -> anyhow::Result<DatasetOutcome> {
    let mut totals = AlignmentCounts::default();
    let mut dup5 = 0;
    for e in evals {
        totals.substitutions += e.counts.substitutions;
        totals.deletions += e.counts.deletions;
        totals.insertions += e.counts.insertions;
        totals.ref_len += e.counts.ref_len;
        dup5 += e.dup5;
    }
    let rates = error_rates(&totals)
        .with_context(|| format!("dataset {dataset}: empty references"))?;
    let audio_seconds: f64 = samples.iter().map(|s| s.features.duration_seconds()).sum();
    let with_layers: Vec<f64> = evals.iter().filter_map(|e| e.avg_layers).collect();
    let avg_layers = if with_layers.is_empty() {
        None
    } else {
        Some(with_layers.iter().sum::<f64>() / with_layers.len() as f64)
    };
    Ok(DatasetOutcome {
        dataset,
        split,
        samples: evals.len(),
        rates,
        dup5,
        audio_seconds,
        wall_seconds,
        rtf: wall_seconds / audio_seconds,
        avg_layers,
    })
}

/// Fully evaluates one manifest file as a dataset.
pub fn evaluate_manifest(
    model: &ToyModelParams,
    manifest: &Path,
    split: &'static str,
    plan: &EvalPlan,
    cfg: &DecodeConfig,
    pool: &rayon::ThreadPool,
) -> anyhow::Result<(DatasetOutcome, Vec<SampleEval>)> {
    let entries = read_manifest(manifest)?;
    if entries.is_empty() {
        return Err(validation(format!("{}: empty manifest", manifest.display())));
    }
    let samples = realize_all(manifest, &entries)?;
    let (evals, wall) = eval_corpus(model, &samples, plan, cfg, pool)?;
    let name = manifest
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| manifest.display().to_string());
    let outcome = dataset_outcome(name, split, &samples, &evals, wall)?;
    Ok((outcome, evals))
}

const COLUMNS: &[&str] = &[
    "dataset",
    "split",
    "samples",
    "wer",
    "ier",
    "ser",
    "der",
    "dup5",
    "audio_seconds",
    "wall_seconds",
    "rtf",
    "avg_layers",
    "relative_latency",
];

fn outcome_row(o: &DatasetOutcome, relative_latency: Option<f64>) -> Vec<Value> {
    vec![
        o.dataset.clone().into(),
        o.split.into(),
        o.samples.into(),
        num(o.rates.wer),
        num(o.rates.ier),
        num(o.rates.ser),
        num(o.rates.der),
        o.dup5.into(),
        num(o.audio_seconds),
        num(o.wall_seconds),
        num(o.rtf),
        o.avg_layers.map(num).unwrap_or(Value::Null),
        relative_latency.map(num).unwrap_or(Value::Null),
    ]
}

/// Unweighted macro-average row over a subset of datasets.
fn macro_row(name: &str, outcomes: &[&DatasetOutcome]) -> Vec<Value> {
    let n = outcomes.len() as f64;
    let mean = |f: &dyn Fn(&DatasetOutcome) -> f64| outcomes.iter().map(|o| f(o)).sum::<f64>() / n;
    let wall: f64 = outcomes.iter().map(|o| o.wall_seconds).sum();
    let audio: f64 = outcomes.iter().map(|o| o.audio_seconds).sum();
    let layer_rows: Vec<f64> = outcomes.iter().filter_map(|o| o.avg_layers).collect();
    vec![
        name.into(),
        "aggregate".into(),
        outcomes.iter().map(|o| o.samples).sum::<usize>().into(),
        num(mean(&|o| o.rates.wer)),
        num(mean(&|o| o.rates.ier)),
        num(mean(&|o| o.rates.ser)),
        num(mean(&|o| o.rates.der)),
        outcomes.iter().map(|o| o.dup5).sum::<usize>().into(),
        num(audio),
        num(wall),
        num(wall / audio),
        if layer_rows.is_empty() {
            Value::Null
        } else {
            num(layer_rows.iter().sum::<f64>() / layer_rows.len() as f64)
        },
        Value::Null,
    ]
}

fn baseline_walls(path: &Path) -> anyhow::Result<std::collections::HashMap<String, f64>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading baseline report {}", path.display()))?;
    let doc: Value = serde_json::from_str(&text)
        .map_err(|e| validation(format!("{}: not a JSON report: {e}", path.display())))?;
    let rows = doc["rows"]
        .as_array()
        .ok_or_else(|| validation(format!("{}: missing rows", path.display())))?;
    let mut map = std::collections::HashMap::new();
    for row in rows {
        if let (Some(name), Some(wall)) = (row["dataset"].as_str(), row["wall_seconds"].as_f64())
        {
            map.insert(name.to_string(), wall);
        }
    }
    Ok(map)
}

/// The eval command. Returns the per-dataset outcomes for library callers.
pub fn eval(args: &EvalArgs) -> anyhow::Result<Vec<DatasetOutcome>> {
    let model = load_model(&args.model)?;
    let cfg = decode_config(args.max_len);
    let plan = match args.mode {
        EvalMode::Short => EvalPlan::Short {
            exit: match args.early_exit_alpha {
                Some(threshold) => {
                    let exit =
                        EarlyExitConfig { threshold, floor_layer: args.exit_floor };
                    exit.validate()?;
                    Some(exit)
                }
                None => None,
            },
        },
        EvalMode::Long => {
            if args.early_exit_alpha.is_some() {
                return Err(validation("--early-exit-alpha applies to --mode short"));
            }
            EvalPlan::Long {
                chunk_seconds: args.chunk_seconds,
                overlap_seconds: args.overlap_seconds,
            }
        }
    };
    let pool = make_pool(args.jobs)?;

    let mut jobs: Vec<(&Path, &'static str)> = Vec::new();
    jobs.extend(args.manifest.iter().map(|p| (p.as_path(), "unsplit")));
    jobs.extend(args.id_manifest.iter().map(|p| (p.as_path(), "id")));
    jobs.extend(args.ood_manifest.iter().map(|p| (p.as_path(), "ood")));
    if jobs.is_empty() {
        return Err(validation("no manifests given"));
    }

    let baseline = match &args.baseline_report {
        Some(path) => Some(baseline_walls(path)?),
        None => None,
    };

    let mut outcomes = Vec::new();
    let mut dumps: Vec<Value> = Vec::new();
    for (path, split) in jobs {
        let (outcome, evals) = evaluate_manifest(&model, path, split, &plan, &cfg, &pool)?;
        if outcomes.iter().any(|o: &DatasetOutcome| o.dataset == outcome.dataset) {
            return Err(validation(format!(
                "duplicate dataset name {} (manifest file stems must differ)",
                outcome.dataset
            )));
        }
        if args.dump_hyps.is_some() {
            for e in &evals {
                dumps.push(json!({
                    "dataset": outcome.dataset,
                    "id": e.id,
                    "ref": e.ref_text,
                    "hyp": e.hyp_text,
                }));
            }
        }
        outcomes.push(outcome);
    }

    let mut table = Table::new(COLUMNS);
    for o in &outcomes {
        let rel = baseline
            .as_ref()
            .and_then(|b| b.get(&o.dataset))
            .map(|&base_wall| base_wall / o.wall_seconds);
        table.push(outcome_row(o, rel));
    }
    for (name, split) in [("id_average", "id"), ("ood_average", "ood")] {
        let subset: Vec<&DatasetOutcome> =
            outcomes.iter().filter(|o| o.split == split).collect();
        if !subset.is_empty() {
            table.push(macro_row(name, &subset));
        }
    }
    table.push(macro_row("overall", &outcomes.iter().collect::<Vec<_>>()));

    let config_echo = json!({
        "model": args.model.display().to_string(),
        "mode": match args.mode { EvalMode::Short => "short", EvalMode::Long => "long" },
        "chunk_seconds": num(args.chunk_seconds),
        "overlap_seconds": args.overlap_seconds.map(num),
        "max_len": args.max_len,
        "early_exit_alpha": args.early_exit_alpha.map(num),
        "exit_floor": args.exit_floor,
        "jobs": args.jobs,
        "baseline": args.baseline_report.as_ref().map(|p| p.display().to_string()),
    });
    if let Some(path) = &args.report {
        atomic_write(path, table.to_csv().as_bytes())?;
        let mut doc = table.to_json();
        doc["config"] = config_echo.clone();
        write_json(&crate::report::json_sibling(path), &doc)?;
    }
    if let Some(path) = &args.dump_hyps {
        let mut out = String::new();
        for d in &dumps {
            out.push_str(&d.to_string());
            out.push('\n');
        }
        atomic_write(path, out.as_bytes())?;
    }

    print!("{}", table.to_csv());
    Ok(outcomes)
}
