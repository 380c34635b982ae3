//! Chunked long-form transcription: overlap chunking, independent per-chunk
//! decoding, and longest-common-subsequence stitching.
//!
//! Inputs longer than a model's context are split into fixed-length chunks
//! that overlap by a small margin. Each chunk is transcribed independently
//! (so chunks may be computed in any order or in parallel), then neighbours
//! are merged by finding the longest common contiguous token run between the
//! left chunk's tail window and the right chunk's head window and splicing at
//! its midpoint. The merge is a sequential left fold in chunk order, which
//! makes the final transcript independent of the order in which chunk
//! decodes were computed.

use alloc::vec::Vec;

use crate::decode::{greedy_decode, DecodeConfig};
use crate::error::{invalid, Result};
use crate::model::{TokenId, ToyModelParams};
use crate::signal::FeatureSequence;

/// Chunk geometry over a feature sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChunkPlan {
    pub chunk_len: usize,
    pub overlap: usize,
    pub total_frames: usize,
    /// Start frame of each chunk, ascending.
    pub offsets: Vec<usize>,
}

impl ChunkPlan {
    pub fn num_chunks(&self) -> usize {
        self.offsets.len()
    }

    /// Frame range `[start, end)` of chunk `i`; the final chunk is clipped to
    /// the input length.
    pub fn range(&self, i: usize) -> (usize, usize) {
        let start = self.offsets[i];
        (start, (start + self.chunk_len).min(self.total_frames))
    }
}

/// One transcribed chunk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChunkResult {
    /// Position of this chunk in the plan.
    pub index: usize,
    pub tokens: Vec<TokenId>,
    pub start_frame: usize,
    pub end_frame: usize,
}

/// Lays out chunk offsets at multiples of `chunk_len - overlap`, so
/// consecutive chunks share exactly `overlap` frames. A single chunk covers
/// inputs no longer than `chunk_len`; otherwise offsets run over every stride
/// multiple below `total_frames` and the last chunk may be shorter.
pub fn plan_chunks(total_frames: usize, chunk_len: usize, overlap: usize) -> Result<ChunkPlan> {
    if total_frames == 0 {
        return Err(invalid("cannot chunk an empty input"));
    }
    if overlap == 0 {
        return Err(invalid("overlap must be positive"));
    }
    if chunk_len < 2 * overlap + 1 {
        return Err(invalid("chunk_len must be at least twice the overlap plus one"));
    }
    let mut offsets = Vec::new();
    if total_frames <= chunk_len {
        offsets.push(0);
    } else {
        let stride = chunk_len - overlap;
        let mut off = 0;
        while off < total_frames {
            offsets.push(off);
            off += stride;
        }
    }
    Ok(ChunkPlan { chunk_len, overlap, total_frames, offsets })
}

/// Longest common contiguous run between `tail` and `head`; returns
/// `(length, start_in_tail, start_in_head)` favouring longer runs, then the
/// leftmost start in `tail`, then the leftmost start in `head`.
fn longest_common_run(tail: &[TokenId], head: &[TokenId]) -> (usize, usize, usize) {
    let (wl, wr) = (tail.len(), head.len());
    // dp[j] = run length ending at (i, j); rolled over i.
    let mut dp = alloc::vec![0usize; wr + 1];
    let mut best = (0usize, 0usize, 0usize);
    for i in 0..wl {
        for j in (0..wr).rev() {
            dp[j + 1] = if tail[i] == head[j] { dp[j] + 1 } else { 0 };
            let m = dp[j + 1];
            if m == 0 {
                continue;
            }
            let cand = (m, i + 1 - m, j + 1 - m);
            if cand.0 > best.0
                || (cand.0 == best.0 && (cand.1, cand.2) < (best.1, best.2))
            {
                best = cand;
            }
        }
    }
    best
}

/// Merges two neighbouring chunk transcripts. `windows` gives how many
/// trailing tokens of `left` and leading tokens of `right` correspond to the
/// shared audio; the longest common contiguous run inside those windows is
/// spliced at its midpoint (left contributes up to it, right from it). When
/// the windows share no token, each side concedes half its window instead, so
/// the duplicated region is still dropped once.
pub fn merge_pair(left: &[TokenId], right: &[TokenId], windows: (usize, usize)) -> Vec<TokenId> {
    let wl = windows.0.min(left.len());
    let wr = windows.1.min(right.len());
    let mut out = Vec::with_capacity(left.len() + right.len());
    if wl == 0 || wr == 0 {
        out.extend_from_slice(left);
        out.extend_from_slice(right);
        return out;
    }
    let tail_base = left.len() - wl;
    let (m, i, j) = longest_common_run(&left[tail_base..], &right[..wr]);
    if m == 0 {
        out.extend_from_slice(&left[..left.len() - wl / 2]);
        out.extend_from_slice(&right[wr / 2..]);
        return out;
    }
    let mid = m / 2;
    out.extend_from_slice(&left[..tail_base + i + mid]);
    out.extend_from_slice(&right[j + mid..]);
    out
}

/// Anything that can turn one chunk of features into tokens. Implementations
/// must be pure per chunk so chunk order and parallelism cannot matter.
pub trait ChunkTranscriber {
    fn transcribe_chunk(&self, chunk: &FeatureSequence) -> Result<Vec<TokenId>>;

    /// Feature frames consumed per output token; sets the merge window that
    /// covers `overlap` frames.
    fn frames_per_token(&self) -> usize {
        crate::signal::FRAMES_PER_TOKEN
    }
}

/// Greedy model decoding of each chunk.
pub struct ModelTranscriber<'a> {
    pub params: &'a ToyModelParams,
    pub config: DecodeConfig,
}

impl ChunkTranscriber for ModelTranscriber<'_> {
    fn transcribe_chunk(&self, chunk: &FeatureSequence) -> Result<Vec<TokenId>> {
        Ok(greedy_decode(self.params, chunk, &self.config)?.tokens)
    }

    fn frames_per_token(&self) -> usize {
        self.params.config.downsample
    }
}

/// Transcribes one planned chunk; the entry point for parallel drivers.
pub fn transcribe_planned_chunk<T: ChunkTranscriber + ?Sized>(
    transcriber: &T,
    features: &FeatureSequence,
    plan: &ChunkPlan,
    index: usize,
) -> Result<ChunkResult> {
    let (start, end) = plan.range(index);
    let tokens = transcriber
        .transcribe_chunk(&features.slice_frames(start, end))
        .map_err(|e| invalid(alloc::format!("chunk {index}: {e}")))?;
    Ok(ChunkResult { index, tokens, start_frame: start, end_frame: end })
}

/// Left-folds completed chunk results into one transcript. Results may arrive
/// in any order; they are sorted by index, and the fold order is fixed, so
/// the output is invariant to how the decodes were scheduled.
pub fn merge_chunk_outputs(
    plan: &ChunkPlan,
    results: &[ChunkResult],
    frames_per_token: usize,
) -> Result<Vec<TokenId>> {
    if results.len() != plan.num_chunks() {
        return Err(invalid("chunk results do not cover the plan"));
    }
    if frames_per_token == 0 {
        return Err(invalid("frames_per_token must be positive"));
    }
    let mut ordered: Vec<&ChunkResult> = results.iter().collect();
    ordered.sort_by_key(|r| r.index);
    for (i, r) in ordered.iter().enumerate() {
        if r.index != i {
            return Err(invalid("duplicate or missing chunk index"));
        }
    }
    let mut merged = ordered[0].tokens.clone();
    for r in &ordered[1..] {
        // Window = the frames this chunk shares with everything before it,
        // which is `overlap` except when the previous chunk was clipped.
        let (_, prev_end) = plan.range(r.index - 1);
        let shared = prev_end.saturating_sub(plan.offsets[r.index]);
        let window = shared.div_ceil(frames_per_token);
        merged = merge_pair(&merged, &r.tokens, (window, window));
    }
    Ok(merged)
}

/// Plans, transcribes, and stitches a long input with `transcriber`.
pub fn transcribe_long_with<T: ChunkTranscriber + ?Sized>(
    transcriber: &T,
    features: &FeatureSequence,
    chunk_len: usize,
    overlap: usize,
) -> Result<Vec<TokenId>> {
    let plan = plan_chunks(features.num_frames(), chunk_len, overlap)?;
    let mut results = Vec::with_capacity(plan.num_chunks());
    for i in 0..plan.num_chunks() {
        results.push(transcribe_planned_chunk(transcriber, features, &plan, i)?);
    }
    merge_chunk_outputs(&plan, &results, transcriber.frames_per_token())
}

/// Chunked greedy transcription with a model; reduces to a single plain
/// greedy decode when the input fits in one chunk.
pub fn transcribe_long(
    params: &ToyModelParams,
    features: &FeatureSequence,
    chunk_len: usize,
    overlap: usize,
    config: &DecodeConfig,
) -> Result<Vec<TokenId>> {
    let transcriber = ModelTranscriber { params, config: *config };
    transcribe_long_with(&transcriber, features, chunk_len, overlap)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::RESERVED_TOKENS;
    use crate::rng::{derive_seed, rng_from_seed};
    use crate::signal::{synth_task, SynthSpec, TaskKind};
    use rand::Rng;

    #[test]
    fn plan_matches_worked_example() {
        let plan = plan_chunks(100, 40, 10).unwrap();
        assert_eq!(plan.offsets, [0, 30, 60, 90]);
        assert_eq!(plan.range(3), (90, 100));
    }

    #[test]
    fn short_input_is_one_chunk() {
        let plan = plan_chunks(40, 40, 10).unwrap();
        assert_eq!(plan.offsets, [0]);
        assert_eq!(plan.range(0), (0, 40));
    }

    #[test]
    fn plan_rejects_bad_geometry() {
        assert!(plan_chunks(0, 40, 10).is_err());
        assert!(plan_chunks(100, 40, 0).is_err());
        assert!(plan_chunks(100, 20, 10).is_err());
        assert!(plan_chunks(100, 21, 10).is_ok());
    }

    #[test]
    fn plan_covers_input_with_exact_overlaps() {
        let mut rng = rng_from_seed(derive_seed(9, "plan-props"));
        for _ in 0..10_000 {
            let overlap = rng.gen_range(1usize..12);
            let chunk_len = rng.gen_range(2 * overlap + 1..60);
            let total = rng.gen_range(1usize..400);
            let plan = plan_chunks(total, chunk_len, overlap).unwrap();
            let mut covered = 0usize;
            for i in 0..plan.num_chunks() {
                let (start, end) = plan.range(i);
                assert!(start < end && end <= total);
                assert!(start <= covered, "gap before chunk {i}");
                covered = covered.max(end);
                if i > 0 {
                    let (ps, pe) = plan.range(i - 1);
                    assert!(ps < start, "offsets must ascend");
                    if pe == ps + chunk_len {
                        assert_eq!(pe - start, overlap, "unclipped chunks overlap exactly");
                    }
                }
            }
            assert_eq!(covered, total, "chunks must cover the input");
        }
    }

    #[test]
    fn merge_matches_worked_example() {
        let merged = merge_pair(&[10, 11, 12, 13], &[12, 13, 14, 15], (2, 2));
        assert_eq!(merged, [10, 11, 12, 13, 14, 15]);
    }

    #[test]
    fn merge_with_empty_window_concatenates() {
        assert_eq!(merge_pair(&[2, 3], &[4, 5], (0, 0)), [2, 3, 4, 5]);
        assert_eq!(merge_pair(&[], &[4, 5], (3, 3)), [4, 5]);
        assert_eq!(merge_pair(&[2, 3], &[], (3, 3)), [2, 3]);
    }

    #[test]
    fn merge_drops_full_duplicate_overlap() {
        // Tail of left == head of right entirely.
        let left = [5, 6, 7, 8];
        let right = [7, 8, 9, 2];
        for w in 2..=4usize {
            let merged = merge_pair(&left, &right, (w, w));
            assert_eq!(merged, [5, 6, 7, 8, 9, 2]);
            assert_eq!(merged.len(), left.len() + right.len() - 2);
        }
    }

    #[test]
    fn merge_without_common_token_halves_both_windows() {
        let merged = merge_pair(&[2, 3, 4, 5], &[6, 7, 8, 9], (4, 4));
        assert_eq!(merged, [2, 3, 8, 9]);
        let odd = merge_pair(&[2, 3, 4], &[6, 7, 8], (3, 3));
        assert_eq!(odd, [2, 3, 7, 8]);
    }

    #[test]
    fn merge_breaks_ties_leftmost() {
        // Two single-token matches of equal length (7 appears twice in the
        // tail window); the leftmost one in `left` wins, so the splice keeps
        // less of `left`.
        let merged = merge_pair(&[2, 7, 3, 7], &[7, 4], (3, 2));
        assert_eq!(merged, [2, 7, 4]);
    }

    /// Brute-force oracle: every (length, start, start) common run, best by
    /// the same ordering.
    fn brute_best(tail: &[TokenId], head: &[TokenId]) -> (usize, usize, usize) {
        let mut best = (0usize, 0usize, 0usize);
        for i in 0..tail.len() {
            for j in 0..head.len() {
                let mut m = 0;
                while i + m < tail.len() && j + m < head.len() && tail[i + m] == head[j + m] {
                    m += 1;
                }
                if m > best.0 || (m == best.0 && m > 0 && (i, j) < (best.1, best.2)) {
                    best = (m, i, j);
                }
            }
        }
        best
    }

    #[test]
    fn common_run_matches_brute_force() {
        let mut rng = rng_from_seed(derive_seed(10, "merge-brute"));
        for _ in 0..2000 {
            let wl = rng.gen_range(0usize..9);
            let wr = rng.gen_range(0usize..9);
            let tail: Vec<TokenId> = (0..wl).map(|_| rng.gen_range(2u32..7)).collect();
            let head: Vec<TokenId> = (0..wr).map(|_| rng.gen_range(2u32..7)).collect();
            assert_eq!(longest_common_run(&tail, &head), brute_best(&tail, &head));
        }
    }

    struct OracleTranscriber {
        vocab: usize,
    }

    impl ChunkTranscriber for OracleTranscriber {
        fn transcribe_chunk(&self, chunk: &FeatureSequence) -> Result<Vec<TokenId>> {
            Ok(crate::signal::nearest_embedding_decode(chunk, self.vocab))
        }
    }

    #[test]
    fn chunked_oracle_equals_full_decode() {
        let spec = SynthSpec { jitter: 0.0, ..SynthSpec::default() };
        let oracle = OracleTranscriber { vocab: spec.vocab };
        let mut rng = rng_from_seed(derive_seed(11, "longform-oracle"));
        for case in 0..200u64 {
            let len = rng.gen_range(3usize..60);
            let (features, transcript) = synth_task(TaskKind::Copy, case, len, &spec).unwrap();
            let full = oracle.transcribe_chunk(&features).unwrap();
            assert_eq!(full, transcript, "oracle must be exact on clean copy tasks");
            let chunked = transcribe_long_with(&oracle, &features, 20, 4).unwrap();
            assert_eq!(chunked, full, "case {case} len {len}");
        }
    }

    #[test]
    fn single_chunk_reduces_to_plain_decode() {
        let spec = SynthSpec { jitter: 0.0, ..SynthSpec::default() };
        let oracle = OracleTranscriber { vocab: spec.vocab };
        let (features, _) = synth_task(TaskKind::Copy, 3, 8, &spec).unwrap();
        let plain = oracle.transcribe_chunk(&features).unwrap();
        assert_eq!(transcribe_long_with(&oracle, &features, 64, 8).unwrap(), plain);
    }

    #[test]
    fn merge_accepts_results_in_any_order() {
        let spec = SynthSpec { jitter: 0.0, ..SynthSpec::default() };
        let oracle = OracleTranscriber { vocab: spec.vocab };
        let (features, _) = synth_task(TaskKind::Copy, 4, 40, &spec).unwrap();
        let plan = plan_chunks(features.num_frames(), 20, 4).unwrap();
        let mut results: Vec<ChunkResult> = (0..plan.num_chunks())
            .map(|i| transcribe_planned_chunk(&oracle, &features, &plan, i).unwrap())
            .collect();
        let forward = merge_chunk_outputs(&plan, &results, 2).unwrap();
        results.reverse();
        assert_eq!(merge_chunk_outputs(&plan, &results, 2).unwrap(), forward);
        results.pop();
        assert!(merge_chunk_outputs(&plan, &results, 2).is_err());
    }

    #[test]
    fn merged_length_is_sane() {
        let spec = SynthSpec { jitter: 0.0, ..SynthSpec::default() };
        let oracle = OracleTranscriber { vocab: spec.vocab };
        for seed in 0..20u64 {
            let (features, _) = synth_task(TaskKind::Copy, 900 + seed, 50, &spec).unwrap();
            let plan = plan_chunks(features.num_frames(), 24, 6).unwrap();
            let results: Vec<ChunkResult> = (0..plan.num_chunks())
                .map(|i| transcribe_planned_chunk(&oracle, &features, &plan, i).unwrap())
                .collect();
            let merged = merge_chunk_outputs(&plan, &results, 2).unwrap();
            let total: usize = results.iter().map(|r| r.tokens.len()).sum();
            let longest = results.iter().map(|r| r.tokens.len()).max().unwrap();
            assert!(merged.len() <= total);
            assert!(merged.len() >= longest);
        }
    }

    #[test]
    fn model_transcriber_reports_chunk_index_on_error() {
        let config = crate::model::ModelConfig {
            enc_layers: 1,
            dec_layers: 2,
            width: 16,
            heads: 2,
            vocab: RESERVED_TOKENS as usize + 2,
            max_positions: 4,
            downsample: 2,
        };
        let params = ToyModelParams::init(config, 1).unwrap();
        // Frames pool to 12 positions, beyond max_positions = 4, so every
        // chunk decode fails; the error must name the chunk.
        let features = FeatureSequence {
            frames: crate::mat::Mat::zeros(120, 16),
            frame_rate: 2.0,
        };
        let err = transcribe_long(&params, &features, 60, 10, &DecodeConfig::default())
            .unwrap_err();
        let msg = alloc::format!("{err}");
        assert!(msg.contains("chunk 0"), "got: {msg}");
    }
}
