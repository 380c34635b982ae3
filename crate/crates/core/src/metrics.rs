//! Text normalization, word-level alignment, and error-rate metrics.
//!
//! The normalizer is deliberately small: lowercase, keep ASCII alphanumerics,
//! keep apostrophes only inside contractions, treat everything else as a word
//! separator. All rates are plain ratios (0.04 = 4%); the relative change
//! helper [`rer`] returns percent, matching how such deltas are reported.

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{invalid, Result};

/// Lowercased, punctuation-stripped word sequence.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct NormalizedText {
    pub tokens: Vec<String>,
}

impl NormalizedText {
    pub fn as_strs(&self) -> Vec<&str> {
        self.tokens.iter().map(String::as_str).collect()
    }

    pub fn join(&self) -> String {
        self.tokens.join(" ")
    }
}

/// Outcome of a word-level alignment against a reference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AlignmentCounts {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub ref_len: usize,
}

impl AlignmentCounts {
    pub fn distance(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }
}

/// Word error rate and its exact decomposition. `wer = ier + ser + der`
/// holds exactly, bit for bit: `wer` is computed as that sum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorRates {
    pub wer: f64,
    pub ier: f64,
    pub ser: f64,
    pub der: f64,
}

/// Normalizes raw text into a comparable word sequence.
///
/// Rules, applied per character:
/// - ASCII letters are lowercased and kept; ASCII digits are kept;
/// - an apostrophe is kept only when the adjacent characters on both sides
///   are ASCII letters (contractions like `don't`);
/// - every other character separates words.
///
/// The output contains only `[a-z0-9']` and is idempotent under
/// re-normalization of its joined form.
pub fn normalize(text: &str) -> NormalizedText {
    let chars: Vec<char> = text.chars().collect();
    let mut tokens = Vec::new();
    let mut cur = String::new();
    for (i, &c) in chars.iter().enumerate() {
        let keep = if c.is_ascii_alphanumeric() {
            true
        } else if c == '\'' {
            let left = i.checked_sub(1).map(|p| chars[p].is_ascii_alphabetic()).unwrap_or(false);
            let right = chars.get(i + 1).map(|c| c.is_ascii_alphabetic()).unwrap_or(false);
            left && right
        } else {
            false
        };
        if keep {
            cur.push(c.to_ascii_lowercase());
        } else if !cur.is_empty() {
            tokens.push(core::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        tokens.push(cur);
    }
    NormalizedText { tokens }
}

/// Aligns `hyp` to `reference` with unit-cost edits and returns the counts of
/// a minimum-distance alignment.
///
/// When several alignments tie, the backtrace prefers substitution over
/// deletion over insertion, so counts are deterministic.
pub fn align<T: PartialEq>(reference: &[T], hyp: &[T]) -> AlignmentCounts {
    let r = reference.len();
    let h = hyp.len();
    // d[i][j]: edit distance between reference[..i] and hyp[..j].
    let mut d = Vec::with_capacity(r + 1);
    let mut first = Vec::with_capacity(h + 1);
    for j in 0..=h {
        first.push(j);
    }
    d.push(first);
    for i in 1..=r {
        let mut row = Vec::with_capacity(h + 1);
        row.push(i);
        for j in 1..=h {
            let sub = d[i - 1][j - 1] + usize::from(reference[i - 1] != hyp[j - 1]);
            let del = d[i - 1][j] + 1;
            let ins = row[j - 1] + 1;
            row.push(sub.min(del).min(ins));
        }
        d.push(row);
    }

    let mut counts = AlignmentCounts { ref_len: r, ..Default::default() };
    let (mut i, mut j) = (r, h);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 {
            let step = usize::from(reference[i - 1] != hyp[j - 1]);
            if d[i][j] == d[i - 1][j - 1] + step {
                counts.substitutions += step;
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && d[i][j] == d[i - 1][j] + 1 {
            counts.deletions += 1;
            i -= 1;
        } else {
            counts.insertions += 1;
            j -= 1;
        }
    }
    counts
}

/// Converts alignment counts into rates over the reference length.
///
/// # Errors
///
/// Fails with "empty reference" when `ref_len` is zero; rates against an
/// empty reference are undefined.
pub fn error_rates(counts: &AlignmentCounts) -> Result<ErrorRates> {
    if counts.ref_len == 0 {
        return Err(invalid("empty reference"));
    }
    let n = counts.ref_len as f64;
    let ier = counts.insertions as f64 / n;
    let ser = counts.substitutions as f64 / n;
    let der = counts.deletions as f64 / n;
    // Summing the components (in this fixed order) keeps the decomposition
    // identity exact in floating point; (s+d+i)/n can differ by an ulp.
    Ok(ErrorRates { wer: ier + ser + der, ier, ser, der })
}

/// Word error rate between two raw texts, normalized first.
pub fn wer(reference: &str, hyp: &str) -> Result<f64> {
    let r = normalize(reference);
    let h = normalize(hyp);
    error_rates(&align(&r.tokens, &h.tokens)).map(|e| e.wer)
}

/// Number of repeated `n`-grams: total windows minus distinct windows.
/// Zero when the sequence is shorter than `n`.
pub fn ngram_duplicates<T: Ord>(tokens: &[T], n: usize) -> usize {
    if n == 0 || tokens.len() < n {
        return 0;
    }
    let total = tokens.len() - n + 1;
    let distinct: BTreeSet<&[T]> = tokens.windows(n).collect();
    total - distinct.len()
}

/// Relative error-rate change in percent: `100 * (candidate - reference) / reference`.
///
/// # Errors
///
/// Fails when `reference_wer` is zero.
pub fn rer(reference_wer: f64, candidate_wer: f64) -> Result<f64> {
    if reference_wer == 0.0 {
        return Err(invalid("relative change against zero reference rate"));
    }
    Ok(100.0 * (candidate_wer - reference_wer) / reference_wer)
}
