//! Corpus and checkpoint bootstrap: `gen-manifest` and `init-model`.

use distilkit_core::corpus::detokenize;
use distilkit_core::model::{ModelConfig, ToyModelParams};
use distilkit_core::rng::{derive_seed, rng_from_seed};
use distilkit_core::signal::{synth_task, SynthSpec, TaskKind};
use rand::Rng;

use crate::args::{GenManifestArgs, InitModelArgs};
use crate::manifest::{base_dir, write_manifest, ManifestEntry, TaskJson};
use crate::validation;

pub fn gen_manifest(args: &GenManifestArgs) -> anyhow::Result<()> {
    if args.count == 0 {
        return Err(validation("--count must be at least 1"));
    }
    if args.min_len == 0 || args.min_len > args.max_len {
        return Err(validation("need 1 <= min-len <= max-len"));
    }
    let custom_geometry = args.jitter.is_some()
        || args.vocab.is_some()
        || args.width.is_some()
        || args.frame_rate.is_some();
    if custom_geometry && args.features_dir.is_none() {
        return Err(validation(
            "--jitter/--vocab/--width/--frame-rate require --features-dir; \
             task entries replay the default geometry",
        ));
    }
    if let Some(dir) = &args.features_dir {
        if dir.is_absolute() {
            return Err(validation(
                "--features-dir must be relative (paths are stored relative \
                 to the manifest)",
            ));
        }
    }
    let defaults = SynthSpec::default();
    let spec = SynthSpec {
        vocab: args.vocab.unwrap_or(defaults.vocab),
        width: args.width.unwrap_or(defaults.width),
        jitter: args.jitter.unwrap_or(defaults.jitter),
        frame_rate: args.frame_rate.unwrap_or(defaults.frame_rate),
    };
    let kind: TaskKind = args.kind.into();

    let mut rng = rng_from_seed(derive_seed(args.seed, "gen-manifest"));
    let mut entries = Vec::with_capacity(args.count);
    for i in 0..args.count {
        let id = format!("s{i:05}");
        let len = rng.gen_range(args.min_len..=args.max_len);
        let sample_seed = derive_seed(args.seed, &format!("sample-{i}"));
        let (features, tokens) = synth_task(kind, sample_seed, len, &spec)?;
        let text = detokenize(&tokens);
        let mut entry = ManifestEntry {
            id: id.clone(),
            text,
            features: None,
            task: None,
            pseudo_text: None,
            pl_wer: None,
            truncated: None,
        };
        if let Some(dir) = &args.features_dir {
            let rel = dir.join(format!("{id}.dwft"));
            crate::featfile::write_features(&base_dir(&args.out).join(&rel), &features)?;
            entry.features = Some(rel);
        } else {
            entry.task =
                Some(TaskJson { kind: kind.name().into(), seed: sample_seed, len });
        }
        entries.push(entry);
    }
    write_manifest(&args.out, &entries)?;
    println!("wrote {} samples to {}", entries.len(), args.out.display());
    Ok(())
}

pub fn init_model(args: &InitModelArgs) -> anyhow::Result<()> {
    let config = ModelConfig {
        enc_layers: args.enc_layers,
        dec_layers: args.dec_layers,
        width: args.width,
        heads: args.heads,
        vocab: args.vocab,
        max_positions: args.max_positions,
        ..ModelConfig::default()
    };
    let params = ToyModelParams::init(config, args.seed)?;
    crate::checkpoint::write_checkpoint(&args.out, &params)?;
    println!("wrote checkpoint {}", args.out.display());
    Ok(())
}
