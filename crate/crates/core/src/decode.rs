//! Greedy, speculative (single and batched), and early-exit decoding.
//!
//! All strategies are deterministic. The speculative decoders carry an
//! exactness contract: their output is token-for-token identical to greedy
//! decoding with the main model, for every model pair, candidate count, and
//! batch size. Verification is argmax-match (a candidate is accepted only if
//! it equals the main model's greedy choice given everything accepted before
//! it), which is the exactness-preserving specialization of speculative
//! decoding for greedy inference.
//!
//! # Session bookkeeping
//!
//! Each decode keeps incremental [`DecoderSession`]s. The speculative engine
//! maintains a "one-behind" invariant: a session has been fed the start token
//! plus all committed tokens except the most recent one. A verification round
//! then feeds `[last_committed, c_1, ..., c_w]` in one block, whose logit rows
//! simultaneously score every candidate position and provide the model's own
//! next token when a candidate is rejected (or when all are accepted).

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, Result};
use crate::model::{encode, DecoderSession, HiddenStates, TokenId, ToyModelParams, BOS};
use crate::signal::FeatureSequence;

/// Default number of candidate tokens proposed per speculative round.
pub const DEFAULT_GAMMA: usize = 4;

/// Which decoding strategy a driver should run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DecodeStrategy {
    Greedy,
    /// Assistant-proposed candidates, argmax-verified by the main model.
    Speculative { gamma: usize },
    EarlyExit(EarlyExitConfig),
}

/// Shared decoding limits. `strategy` selects the algorithm for drivers that
/// dispatch on it; the strategy-specific entry points below read only
/// `max_len` and `eos_token`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodeConfig {
    /// Maximum number of content tokens to emit; must not exceed the model's
    /// `max_positions`.
    pub max_len: usize,
    pub eos_token: TokenId,
    pub strategy: DecodeStrategy,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            max_len: 64,
            eos_token: crate::model::EOS,
            strategy: DecodeStrategy::Greedy,
        }
    }
}

/// Early-exit ("confident adaptive") decoding parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EarlyExitConfig {
    /// Global confidence threshold in (0, 1]; a position exits the decoder
    /// stack at the first layer whose top-1/top-2 probability gap exceeds it.
    pub threshold: f64,
    /// Lowest layer (1-based) allowed to exit, default 1.
    pub floor_layer: usize,
}

impl Default for EarlyExitConfig {
    fn default() -> Self {
        EarlyExitConfig { threshold: 1.0, floor_layer: 1 }
    }
}

impl EarlyExitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold <= 1.0) {
            return Err(invalid("early-exit threshold must lie in (0, 1]"));
        }
        if self.floor_layer < 1 {
            return Err(invalid("early-exit floor layer must be at least 1"));
        }
        Ok(())
    }
}

/// A completed decode: content tokens only, plus whether the model produced
/// the end token before hitting `max_len`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Decoded {
    pub tokens: Vec<TokenId>,
    pub ended: bool,
}

/// Counters from one (possibly batched) speculative decode.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SpecDecodeStats {
    /// Verification rounds run (batch-wide; one per loop iteration).
    pub candidate_rounds: usize,
    /// Tokens proposed by the assistant, summed over rows.
    pub candidates_proposed: usize,
    /// Proposed tokens that matched the main model's argmax and were
    /// committed.
    pub candidates_accepted: usize,
    /// `candidates_accepted / candidates_proposed`, or 0 when nothing was
    /// proposed.
    pub acceptance_rate: f64,
}

impl SpecDecodeStats {
    fn finalize(mut self) -> Self {
        self.acceptance_rate = if self.candidates_proposed == 0 {
            0.0
        } else {
            self.candidates_accepted as f64 / self.candidates_proposed as f64
        };
        self
    }
}

/// Index of the largest value, ties broken toward the lowest index.
pub fn argmax_lowest(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn validate_limits(params: &ToyModelParams, cfg: &DecodeConfig) -> Result<()> {
    if cfg.max_len > params.config.max_positions {
        return Err(invalid("max_len exceeds model max_positions"));
    }
    if cfg.eos_token as usize >= params.config.vocab {
        return Err(invalid("eos_token outside vocabulary"));
    }
    Ok(())
}

/// Greedy decoding from already-encoded hidden states.
pub fn greedy_decode_hidden(
    params: &ToyModelParams,
    h: &HiddenStates,
    cfg: &DecodeConfig,
) -> Result<Decoded> {
    validate_limits(params, cfg)?;
    let mut session = DecoderSession::new(params, h)?;
    let mut tokens = Vec::new();
    let mut ended = false;
    let mut feed = BOS;
    while tokens.len() < cfg.max_len {
        let logits = session.advance_logits(&[feed])?;
        let t = argmax_lowest(logits.row(0)) as TokenId;
        if t == cfg.eos_token {
            ended = true;
            break;
        }
        tokens.push(t);
        feed = t;
    }
    Ok(Decoded { tokens, ended })
}

/// Greedy decoding: at each position emit the argmax token, stopping at the
/// end token or after `max_len` content tokens.
pub fn greedy_decode(
    params: &ToyModelParams,
    features: &FeatureSequence,
    cfg: &DecodeConfig,
) -> Result<Decoded> {
    let h = encode(params, features)?;
    greedy_decode_hidden(params, &h, cfg)
}

/// Per-row state of the batched speculative engine.
struct SpecRow<'m, 'a> {
    main: DecoderSession<'m>,
    assist: DecoderSession<'a>,
    committed: Vec<TokenId>,
    /// Most recent committed token (or start token), not yet fed to either
    /// session; feeding it is the first step of the next round.
    next_feed: TokenId,
    ended: bool,
}

impl SpecRow<'_, '_> {
    fn active(&self, max_len: usize) -> bool {
        !self.ended && self.committed.len() < max_len
    }
}

/// Speculative decoding with an assistant model; output is token-for-token
/// identical to `greedy_decode(main, features, cfg)`.
pub fn speculative_decode(
    main: &ToyModelParams,
    assistant: &ToyModelParams,
    features: &FeatureSequence,
    gamma: usize,
    cfg: &DecodeConfig,
) -> Result<(Decoded, SpecDecodeStats)> {
    let (mut rows, stats) =
        batched_speculative_decode(main, assistant, core::slice::from_ref(features), gamma, cfg)?;
    Ok((rows.pop().expect("one row in, one row out"), stats))
}

/// Batched speculative decoding. Acceptance is a batch-wide decision: a
/// candidate position is committed only if every active row's candidate at
/// that position matches its own main-model argmax; at the first failing
/// position every row emits its own main-model token instead. Rows that have
/// produced the end token no longer constrain acceptance. Per-row outputs are
/// identical to per-row greedy decoding.
pub fn batched_speculative_decode(
    main: &ToyModelParams,
    assistant: &ToyModelParams,
    batch: &[FeatureSequence],
    gamma: usize,
    cfg: &DecodeConfig,
) -> Result<(Vec<Decoded>, SpecDecodeStats)> {
    if batch.is_empty() {
        return Err(invalid("empty batch"));
    }
    if gamma < 1 {
        return Err(invalid("gamma must be at least 1"));
    }
    if main.config.vocab != assistant.config.vocab {
        return Err(invalid("vocabulary mismatch between main and assistant"));
    }
    validate_limits(main, cfg)?;
    validate_limits(assistant, cfg)?;

    let mut rows = Vec::with_capacity(batch.len());
    for features in batch {
        let h_main = encode(main, features)?;
        let h_assist = encode(assistant, features)?;
        rows.push(SpecRow {
            main: DecoderSession::new(main, &h_main)?,
            assist: DecoderSession::new(assistant, &h_assist)?,
            committed: Vec::new(),
            next_feed: BOS,
            ended: false,
        });
    }

    let mp_main = main.config.max_positions;
    let mp_assist = assistant.config.max_positions;
    let mut stats = SpecDecodeStats::default();

    loop {
        let active: Vec<usize> =
            (0..rows.len()).filter(|&r| rows[r].active(cfg.max_len)).collect();
        if active.is_empty() {
            break;
        }

        // Candidate window for this round: never propose past a row's token
        // budget or either model's positional table.
        let mut window = gamma;
        for &r in &active {
            let n = rows[r].committed.len();
            window = window
                .min(cfg.max_len - n)
                .min(mp_main - n - 1)
                .min(mp_assist.saturating_sub(n));
        }

        // Proposal pass: each active row's assistant decodes greedily from
        // the committed prefix, stopping early at the end token.
        let mut proposals: Vec<Vec<TokenId>> = vec![Vec::new(); rows.len()];
        for &r in &active {
            let row = &mut rows[r];
            let mut feed = row.next_feed;
            while proposals[r].len() < window {
                let logits = row.assist.advance_logits(&[feed])?;
                let t = argmax_lowest(logits.row(0)) as TokenId;
                proposals[r].push(t);
                if t == cfg.eos_token {
                    break;
                }
                feed = t;
            }
            stats.candidates_proposed += proposals[r].len();
        }
        // Rows that hit the end token early shrink the shared window.
        let verified = active.iter().map(|&r| proposals[r].len()).min().unwrap_or(0);

        // Verification pass: one forward block per row scores every candidate
        // position and the position after them.
        let mut main_argmax: Vec<Vec<TokenId>> = vec![Vec::new(); rows.len()];
        let mut accept = usize::MAX;
        for &r in &active {
            let row = &mut rows[r];
            let mut block = Vec::with_capacity(verified + 1);
            block.push(row.next_feed);
            block.extend_from_slice(&proposals[r][..verified]);
            let logits = row.main.advance_logits(&block)?;
            let own: Vec<TokenId> =
                (0..logits.rows()).map(|i| argmax_lowest(logits.row(i)) as TokenId).collect();
            let matched = (0..verified).take_while(|&j| proposals[r][j] == own[j]).count();
            accept = accept.min(matched);
            main_argmax[r] = own;
        }
        stats.candidate_rounds += 1;

        // Commit pass: every active row takes the batch-accepted candidates
        // plus one token of its own (the scored position after them), then
        // rewinds its sessions to the committed prefix.
        for &r in &active {
            let row = &mut rows[r];
            let n = row.committed.len();
            let mut hit_eos = false;
            for j in 0..accept {
                let t = proposals[r][j];
                stats.candidates_accepted += 1;
                if t == cfg.eos_token {
                    hit_eos = true;
                    break;
                }
                row.committed.push(t);
            }
            if !hit_eos && row.committed.len() < cfg.max_len {
                let t = main_argmax[r][accept];
                if t == cfg.eos_token {
                    hit_eos = true;
                } else {
                    row.committed.push(t);
                    row.next_feed = t;
                }
            }
            row.ended = hit_eos;
            if row.active(cfg.max_len) {
                row.main.truncate(n + 1 + accept);
                let proposed = proposals[r].len();
                if accept < proposed {
                    row.assist.truncate(n + 1 + accept);
                } else {
                    // All proposals accepted; the assistant is one token
                    // short of the committed prefix.
                    row.assist.advance_logits(&[proposals[r][proposed - 1]])?;
                }
            }
        }
    }

    let out = rows
        .into_iter()
        .map(|r| Decoded { tokens: r.committed, ended: r.ended })
        .collect();
    Ok((out, stats.finalize()))
}

/// Early-exit decoding: each position ascends the decoder stack only until
/// some layer's top-1/top-2 probability gap exceeds the threshold. Returns
/// the decode and the mean number of layers used per generated position
/// (0 when nothing was generated).
pub fn early_exit_decode(
    params: &ToyModelParams,
    features: &FeatureSequence,
    exit: &EarlyExitConfig,
    cfg: &DecodeConfig,
) -> Result<(Decoded, f64)> {
    exit.validate()?;
    validate_limits(params, cfg)?;
    let h = encode(params, features)?;
    let mut session = DecoderSession::new(params, &h)?;
    let mut tokens = Vec::new();
    let mut ended = false;
    let mut feed = BOS;
    let mut layers_used = 0usize;
    let mut positions = 0usize;
    while tokens.len() < cfg.max_len {
        let (probs, layers) =
            session.advance_with_exit(feed, exit.threshold, exit.floor_layer)?;
        layers_used += layers;
        positions += 1;
        let t = argmax_lowest(&probs) as TokenId;
        if t == cfg.eos_token {
            ended = true;
            break;
        }
        tokens.push(t);
        feed = t;
    }
    let avg = if positions == 0 { 0.0 } else { layers_used as f64 / positions as f64 };
    Ok((Decoded { tokens, ended }, avg))
}
