//! WER-versus-SNR sweep under additive noise in the model's input domain.
//! The "inf" row is the clean baseline and matches a plain eval exactly.

use rayon::prelude::*;

use distilkit_core::corpus::Sample;
use distilkit_core::rng::derive_seed;
use distilkit_core::signal::{add_noise_to_features, NoiseSource};

use crate::args::{NoiseKindArg, NoiseSweepArgs};
use crate::commands::eval::{dataset_outcome, eval_corpus, EvalPlan};
use crate::commands::{decode_config, load_model, make_pool};
use crate::manifest::{read_manifest, realize_all};
use crate::report::{num, write_table, Table};
use crate::validation;

fn parse_snr(raw: &str) -> anyhow::Result<f64> {
    let s = raw.trim();
    if s.eq_ignore_ascii_case("inf") {
        return Ok(f64::INFINITY);
    }
    s.parse()
        .map_err(|_| validation(format!("bad SNR value {raw:?} (dB number or \"inf\")")))
}

pub fn noise_sweep(args: &NoiseSweepArgs) -> anyhow::Result<()> {
    if args.snrs.is_empty() {
        return Err(validation("--snrs must name at least one level"));
    }
    let snrs: Vec<f64> =
        args.snrs.iter().map(|s| parse_snr(s)).collect::<anyhow::Result<_>>()?;
    let model = load_model(&args.model)?;
    let entries = read_manifest(&args.manifest)?;
    if entries.is_empty() {
        return Err(validation(format!("{}: empty manifest", args.manifest.display())));
    }
    let clean = realize_all(&args.manifest, &entries)?;
    let cfg = decode_config(args.max_len);
    let plan = EvalPlan::Short { exit: None };
    let pool = make_pool(args.jobs)?;
    let kind_name = match args.kind {
        NoiseKindArg::White => "white",
        NoiseKindArg::Babble => "babble",
    };

    let mut table =
        Table::new(&["snr_db", "kind", "samples", "wer", "ier", "ser", "der", "dup5"]);
    for (level, &snr_db) in args.snrs.iter().zip(&snrs) {
        // Independent noise per (level, sample), deterministic in the seed.
        let noisy: Vec<Sample> = pool.install(|| {
            clean
                .par_iter()
                .map(|s| {
                    let seed = derive_seed(args.seed, &format!("noise-{level}-{}", s.id));
                    let source = match args.kind {
                        NoiseKindArg::White => NoiseSource::White { seed },
                        NoiseKindArg::Babble => NoiseSource::Babble { seed },
                    };
                    Ok(Sample {
                        features: add_noise_to_features(&s.features, &source, snr_db)?,
                        ..s.clone()
                    })
                })
                .collect::<Result<_, distilkit_core::CoreError>>()
        })?;
        let (evals, wall) = eval_corpus(&model, &noisy, &plan, &cfg, &pool)?;
        let outcome =
            dataset_outcome(level.clone(), "unsplit", &noisy, &evals, wall)?;
        table.push(vec![
            num(snr_db),
            kind_name.into(),
            outcome.samples.into(),
            num(outcome.rates.wer),
            num(outcome.rates.ier),
            num(outcome.rates.ser),
            num(outcome.rates.der),
            outcome.dup5.into(),
        ]);
    }

    if let Some(path) = &args.report {
        write_table(path, &table)?;
    }
    print!("{}", table.to_csv());
    Ok(())
}
