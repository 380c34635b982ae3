//! Corpus handling: the toy tokenizer, pseudo-label generation, WER-threshold
//! filtering, and seeded subsampling for dataset-scaling studies.
//!
//! A training corpus is a list of [`Sample`]s (features plus ground-truth
//! text). Distillation replaces the ground truth with teacher transcripts
//! ([`PseudoSample`]), records each sample's word error rate against its own
//! reference, and [`filter_by_wer`] drops samples whose pseudo-label quality
//! is below a percent threshold.
//!
//! Text uses a deliberately trivial word inventory: content token `id` is
//! spelled `t{id-2}` (ids 0 and 1 are the sequence start/end markers), so
//! tokenization is exact and every word error is a real model error.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::decode::{greedy_decode, Decoded, DecodeConfig};
use crate::error::{invalid, Result};
use crate::metrics::wer;
use crate::model::{TokenId, ToyModelParams, RESERVED_TOKENS};
use crate::rng::{derive_seed, permutation, rng_from_seed};
use crate::signal::FeatureSequence;

/// One (features, transcript) training pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub text: String,
    pub features: FeatureSequence,
}

/// A sample whose transcript has been replaced by a model's own decode.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoSample {
    pub sample: Sample,
    pub pseudo_text: String,
    /// WER of the pseudo text against the sample's reference, as a ratio.
    pub pl_wer: f64,
    /// True when the decode hit `max_len` without producing the end token.
    pub truncated: bool,
}

/// Outcome of one filtering pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterReport {
    /// Threshold in percent.
    pub lambda: f64,
    pub kept: usize,
    pub dropped: usize,
    /// `dropped / (kept + dropped)`, 0 on an empty corpus.
    pub fraction_filtered: f64,
}

/// Parses whitespace-separated `t{n}` words into content token ids.
pub fn tokenize(text: &str, vocab: usize) -> Result<Vec<TokenId>> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let digits = word
            .strip_prefix('t')
            .ok_or_else(|| invalid(format!("unknown word {word:?}")))?;
        let n: u32 = digits
            .parse()
            .map_err(|_| invalid(format!("unknown word {word:?}")))?;
        let token = n + RESERVED_TOKENS;
        if token as usize >= vocab {
            return Err(invalid(format!("word {word:?} outside vocabulary of {vocab}")));
        }
        out.push(token);
    }
    Ok(out)
}

/// Renders content tokens as `t{n}` words; reserved marker tokens carry no
/// content and are dropped.
pub fn detokenize(tokens: &[TokenId]) -> String {
    let words: Vec<String> = tokens
        .iter()
        .filter(|&&t| t >= RESERVED_TOKENS)
        .map(|&t| format!("t{}", t - RESERVED_TOKENS))
        .collect();
    words.join(" ")
}

/// Pseudo-labels a corpus with any per-sample transcriber (the model entry
/// point is [`pseudo_label`]). Fails if a sample's reference text normalizes
/// to nothing, since its WER would be undefined.
pub fn pseudo_label_with<F>(transcribe: F, corpus: &[Sample]) -> Result<Vec<PseudoSample>>
where
    F: Fn(&Sample) -> Result<Decoded>,
{
    let mut out = Vec::with_capacity(corpus.len());
    for sample in corpus {
        let decoded = transcribe(sample)?;
        let pseudo_text = detokenize(&decoded.tokens);
        let pl_wer = wer(&sample.text, &pseudo_text)
            .map_err(|e| invalid(format!("sample {}: {e}", sample.id)))?;
        out.push(PseudoSample {
            sample: sample.clone(),
            pseudo_text,
            pl_wer,
            truncated: !decoded.ended,
        });
    }
    Ok(out)
}

/// Greedy-decodes every sample with `model` and scores the transcripts
/// against the references. Decodes that run out of budget before the end
/// token are kept but flagged `truncated`.
pub fn pseudo_label(
    model: &ToyModelParams,
    corpus: &[Sample],
    config: &DecodeConfig,
) -> Result<Vec<PseudoSample>> {
    pseudo_label_with(|s| greedy_decode(model, &s.features, config), corpus)
}

/// Keeps the samples whose pseudo-label WER is within `lambda` percent: a
/// sample is dropped iff `100 * pl_wer > lambda` (a sample exactly at the
/// threshold stays). Kept samples preserve input order.
pub fn filter_by_wer(corpus: &[PseudoSample], lambda: f64) -> Result<(Vec<PseudoSample>, FilterReport)> {
    if !(lambda >= 0.0) {
        return Err(invalid("lambda must be a percent value of at least 0"));
    }
    #[cfg(debug_assertions)]
    for p in corpus {
        let again = wer(&p.sample.text, &p.pseudo_text)
            .expect("stored pseudo sample must have a scoreable reference");
        debug_assert!(
            (again - p.pl_wer).abs() < 1e-12,
            "stored pl_wer disagrees with recomputation for sample {}",
            p.sample.id
        );
    }
    let kept: Vec<PseudoSample> =
        corpus.iter().filter(|p| 100.0 * p.pl_wer <= lambda).cloned().collect();
    let dropped = corpus.len() - kept.len();
    let report = FilterReport {
        lambda,
        kept: kept.len(),
        dropped,
        fraction_filtered: if corpus.is_empty() {
            0.0
        } else {
            dropped as f64 / corpus.len() as f64
        },
    };
    Ok((kept, report))
}

/// Uniform subsample without replacement: `round(fraction * n)` samples,
/// taken as a prefix of one seeded permutation. Prefixes nest, so smaller
/// fractions at the same seed select subsets of larger ones.
pub fn subsample(corpus: &[Sample], fraction: f64, seed: u64) -> Result<Vec<Sample>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(invalid("fraction must lie in (0, 1]"));
    }
    let k = crate::num::round_to_usize(fraction * corpus.len() as f64);
    let mut rng = rng_from_seed(derive_seed(seed, "subsample"));
    let order = permutation(&mut rng, corpus.len());
    Ok(order[..k.min(corpus.len())].iter().map(|&i| corpus[i].clone()).collect())
}
