//! Pseudo-labelling and WER-threshold filtering.

use std::collections::HashMap;

use rayon::prelude::*;

use distilkit_core::corpus::{filter_by_wer, pseudo_label_with};
use distilkit_core::decode::{greedy_decode, Decoded};

use crate::args::{FilterArgs, PseudoLabelArgs};
use crate::commands::{decode_config, load_model, make_pool};
use crate::manifest::{base_dir, read_manifest, realize_all, write_manifest};
use crate::report::{num, write_table, Table};
use crate::validation;

pub fn pseudo_label(args: &PseudoLabelArgs) -> anyhow::Result<()> {
    let model = load_model(&args.model)?;
    let entries = read_manifest(&args.manifest)?;
    let samples = realize_all(&args.manifest, &entries)?;
    let cfg = decode_config(args.max_len);
    let pool = make_pool(args.jobs)?;

    // Transcribe in parallel, then let the core labeller compute pl_wer and
    // truncation flags from the precomputed outputs.
    let decoded: Vec<Decoded> = pool.install(|| {
        samples
            .par_iter()
            .map(|s| greedy_decode(&model, &s.features, &cfg))
            .collect::<Result<_, _>>()
    })?;
    let by_id: HashMap<&str, &Decoded> = samples
        .iter()
        .map(|s| s.id.as_str())
        .zip(decoded.iter())
        .collect();
    let labelled = pseudo_label_with(|s| Ok(by_id[s.id.as_str()].clone()), &samples)?;

    let out: Vec<_> = entries
        .into_iter()
        .zip(&labelled)
        .map(|(entry, p)| entry.with_pseudo(p))
        .collect();
    write_manifest(&args.out, &out)?;
    println!("pseudo-labelled {} samples to {}", out.len(), args.out.display());
    Ok(())
}

pub fn filter(args: &FilterArgs) -> anyhow::Result<()> {
    let entries = read_manifest(&args.manifest)?;
    if entries.iter().any(|e| !e.is_pseudo_labelled()) {
        return Err(validation(format!(
            "{}: not a pseudo-labelled manifest (run pseudo-label first)",
            args.manifest.display()
        )));
    }
    let base = base_dir(&args.manifest);
    let pseudo: Vec<_> = entries
        .iter()
        .map(|e| e.realize_pseudo(&base))
        .collect::<anyhow::Result<_>>()?;
    let (kept, report) = filter_by_wer(&pseudo, args.lambda)?;

    let mut by_id: HashMap<&str, usize> = HashMap::new();
    for (i, e) in entries.iter().enumerate() {
        by_id.insert(e.id.as_str(), i);
    }
    let kept_entries: Vec<_> = kept
        .iter()
        .map(|p| entries[by_id[p.sample.id.as_str()]].clone())
        .collect();
    write_manifest(&args.out, &kept_entries)?;

    if let Some(path) = &args.report {
        let mut t = Table::new(&["lambda", "kept", "dropped", "fraction_filtered"]);
        t.push(vec![
            num(report.lambda),
            report.kept.into(),
            report.dropped.into(),
            num(report.fraction_filtered),
        ]);
        write_table(path, &t)?;
    }
    println!(
        "lambda {}: kept {} dropped {} (fraction filtered {:.4})",
        report.lambda, report.kept, report.dropped, report.fraction_filtered
    );
    Ok(())
}
