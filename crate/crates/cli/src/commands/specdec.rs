//! Speculative decoding benchmark: per batch size, verify token identity
//! against the main model's greedy output (a hard requirement), then time
//! both paths and report relative latency.

use serde_json::Value;

use distilkit_core::decode::{batched_speculative_decode, greedy_decode, SpecDecodeStats};
use distilkit_core::signal::FeatureSequence;

use crate::args::SpecdecBenchArgs;
use crate::bench::time_median;
use crate::commands::{decode_config, load_model};
use crate::manifest::{read_manifest, realize_all};
use crate::report::{num, write_table, Table};
use crate::validation;

const BASELINE_NAME: &str = "main-greedy-sequential";

pub fn specdec_bench(args: &SpecdecBenchArgs) -> anyhow::Result<()> {
    if args.reps < 5 {
        return Err(validation("--reps must be at least 5 (medians need a sample)"));
    }
    if args.gamma == 0 {
        return Err(validation("--gamma must be at least 1"));
    }
    if args.batch_sizes.is_empty() || args.batch_sizes.contains(&0) {
        return Err(validation("--batch-sizes must be positive"));
    }
    let main = load_model(&args.main)?;
    let assistant = load_model(&args.assistant)?;
    let entries = read_manifest(&args.manifest)?;
    if entries.is_empty() {
        return Err(validation(format!("{}: empty manifest", args.manifest.display())));
    }
    let samples = realize_all(&args.manifest, &entries)?;
    let cfg = decode_config(args.max_len);

    // Greedy reference outputs, computed once; every speculative output must
    // match these exactly or the whole run fails.
    let reference: Vec<Vec<_>> = samples
        .iter()
        .map(|s| greedy_decode(&main, &s.features, &cfg).map(|d| d.tokens))
        .collect::<Result<_, _>>()?;

    let mut table = Table::new(&[
        "batch_size",
        "gamma",
        "reps",
        "baseline",
        "wall_seconds",
        "baseline_seconds",
        "relative_latency",
        "rounds",
        "proposed",
        "accepted",
        "acceptance_rate",
        "identical",
    ]);

    for &batch_size in &args.batch_sizes {
        let groups: Vec<Vec<FeatureSequence>> = samples
            .chunks(batch_size)
            .map(|c| c.iter().map(|s| s.features.clone()).collect())
            .collect();

        // Correctness pass with stats.
        let mut totals = SpecDecodeStats::default();
        let mut cursor = 0;
        for group in &groups {
            let (decoded, stats) =
                batched_speculative_decode(&main, &assistant, group, args.gamma, &cfg)?;
            totals.candidate_rounds += stats.candidate_rounds;
            totals.candidates_proposed += stats.candidates_proposed;
            totals.candidates_accepted += stats.candidates_accepted;
            for d in decoded {
                if d.tokens != reference[cursor] {
                    anyhow::bail!(
                        "speculative output differs from greedy for sample {} \
                         at batch size {batch_size}; latency numbers would be \
                         meaningless",
                        samples[cursor].id
                    );
                }
                cursor += 1;
            }
        }
        let acceptance_rate = if totals.candidates_proposed == 0 {
            0.0
        } else {
            totals.candidates_accepted as f64 / totals.candidates_proposed as f64
        };

        let wall = time_median(args.reps, || {
            for group in &groups {
                batched_speculative_decode(&main, &assistant, group, args.gamma, &cfg)?;
            }
            Ok(())
        })?;
        let baseline = time_median(args.reps, || {
            for s in &samples {
                greedy_decode(&main, &s.features, &cfg)?;
            }
            Ok(())
        })?;

        table.push(vec![
            batch_size.into(),
            args.gamma.into(),
            args.reps.into(),
            BASELINE_NAME.into(),
            num(wall),
            num(baseline),
            num(baseline / wall),
            totals.candidate_rounds.into(),
            totals.candidates_proposed.into(),
            totals.candidates_accepted.into(),
            num(acceptance_rate),
            Value::Bool(true),
        ]);
    }

    if let Some(path) = &args.report {
        write_table(path, &table)?;
    }
    print!("{}", table.to_csv());
    Ok(())
}
