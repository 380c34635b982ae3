//! Training objectives, analytic gradients, the optimizer, and the training
//! loop.
//!
//! The distillation objective is a weighted sum of three terms, each summed
//! over sequence positions and averaged over the batch:
//!
//! * `pl` — negative log-likelihood of the (pseudo-)targets,
//! * `kl` — temperature-softened KL divergence from the teacher's
//!   next-token distributions, scaled by the squared temperature so its
//!   gradient magnitude is temperature-invariant,
//! * `mse` — mean-squared distance between student decoder layer states
//!   and the mapped teacher layers.
//!
//! `total = alpha_kl * kl + alpha_pl * pl + alpha_mse * mse`. The `ce`
//! diagnostic equals `pl` because training targets are whatever transcript
//! the corpus carries (ground truth when pretraining, pseudo-labels when
//! distilling).
//!
//! Gradients come from a reverse-mode tape that replays the exact forward
//! structure of the inference path; [`backward`] builds one graph for a whole
//! batch so a single sweep yields summed gradients. Freezing the encoder
//! treats the encoder stack, its final norm, and the shared positional table
//! as constants: their gradients are reported as zero and the optimizer skips
//! them, so they stay bit-identical through training.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::corpus::{tokenize, PseudoSample, Sample};
use crate::error::{invalid, numeric, Result};
use crate::mat::Mat;
use crate::model::{
    encode, forced_forward, layer_map_phi, mean_pool_stride2, DecoderTrace, ModelConfig,
    TokenId, ToyModelParams, BOS, EOS,
};
use crate::num;
use crate::rng::{derive_seed, permutation, rng_from_seed};
use crate::signal::FeatureSequence;
use crate::tape::{log_softmax_row, softmax_row_prefix, Tape, Var};

/// Probabilities below this are clamped before the log in the value-level
/// cross-entropy.
pub const PROB_FLOOR: f64 = 1e-30;

/// Mixing weights of the distillation objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub alpha_kl: f64,
    pub alpha_pl: f64,
    pub alpha_mse: f64,
    /// Softmax temperature for the KL term.
    pub temperature: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha_kl: 0.8, alpha_pl: 1.0, alpha_mse: 0.0, temperature: 2.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_kl >= 0.0 && self.alpha_pl >= 0.0 && self.alpha_mse >= 0.0) {
            return Err(invalid("loss weights must be non-negative"));
        }
        if !(self.temperature > 0.0) {
            return Err(invalid("temperature must be positive"));
        }
        Ok(())
    }

    fn needs_teacher(&self) -> bool {
        self.alpha_kl > 0.0 || self.alpha_mse > 0.0
    }
}

/// One batch's loss terms in nats (summed over positions, averaged over the
/// batch) and their weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    /// Cross-entropy against the corpus targets; equals `pl` (see module
    /// docs).
    pub ce: f64,
    pub pl: f64,
    pub kl: f64,
    pub mse: f64,
    pub total: f64,
}

/// Combines already-computed loss terms into a breakdown with the weighted
/// total.
pub fn kd_objective(ce: f64, pl: f64, kl: f64, mse: f64, weights: &LossWeights) -> LossBreakdown {
    LossBreakdown {
        ce,
        pl,
        kl,
        mse,
        total: weights.alpha_kl * kl + weights.alpha_pl * pl + weights.alpha_mse * mse,
    }
}

/// Negative log-likelihood of `targets` under per-position distributions,
/// with sub-[`PROB_FLOOR`] probabilities clamped; also reports how many
/// positions were clamped.
pub fn ce_loss_detailed(probs: &Mat, targets: &[TokenId]) -> Result<(f64, usize)> {
    if probs.rows() != targets.len() {
        return Err(invalid("one distribution per target required"));
    }
    let mut nats = 0.0;
    let mut clamped = 0;
    for (i, &t) in targets.iter().enumerate() {
        if t as usize >= probs.cols() {
            return Err(invalid(format!("target {t} outside vocabulary")));
        }
        let mut p = probs.at(i, t as usize);
        if p < PROB_FLOOR {
            p = PROB_FLOOR;
            clamped += 1;
        }
        nats -= num::ln(p);
    }
    Ok((nats, clamped))
}

/// Negative log-likelihood of the ground-truth targets.
pub fn ce_loss(probs: &Mat, targets: &[TokenId]) -> Result<f64> {
    ce_loss_detailed(probs, targets).map(|(nats, _)| nats)
}

/// Negative log-likelihood of pseudo-label targets; the same computation as
/// [`ce_loss`] with the teacher's transcript in place of ground truth.
pub fn pl_loss(probs: &Mat, pseudo_targets: &[TokenId]) -> Result<f64> {
    ce_loss(probs, pseudo_targets)
}

/// Temperature-softened KL divergence from teacher to student, summed over
/// positions: `tau^2 * sum_i KL(softmax(t_i/tau) || softmax(s_i/tau))`. The
/// teacher side is a constant (no gradient flows to it).
pub fn kl_loss(student_logits: &Mat, teacher_logits: &Mat, tau: f64) -> Result<f64> {
    if student_logits.rows() != teacher_logits.rows()
        || student_logits.cols() != teacher_logits.cols()
    {
        return Err(invalid("student and teacher logits must have equal shapes"));
    }
    if !(tau > 0.0) {
        return Err(invalid("temperature must be positive"));
    }
    let inv = 1.0 / tau;
    let mut total = 0.0;
    for i in 0..student_logits.rows() {
        let ls: Vec<f64> = student_logits.row(i).iter().map(|&z| z * inv).collect();
        let lt: Vec<f64> = teacher_logits.row(i).iter().map(|&z| z * inv).collect();
        let lp = log_softmax_row(&ls);
        let lq = log_softmax_row(&lt);
        for (lq_j, lp_j) in lq.iter().zip(&lp) {
            total += num::exp(*lq_j) * (lq_j - lp_j);
        }
    }
    Ok(tau * tau * total)
}

/// Mean-squared distance between student layer states and the mapped teacher
/// layers: for student layer `l` (1-based), the target is teacher layer
/// `phi[l-1]`. Each (position, layer) pair contributes the width-mean of
/// squared differences; pairs are summed.
pub fn mse_loss(
    student_trace: &DecoderTrace,
    teacher_trace: &DecoderTrace,
    phi: &[usize],
) -> Result<f64> {
    if phi.len() != student_trace.layers.len() {
        return Err(invalid("phi must map every student layer"));
    }
    let mut total = 0.0;
    for (l, &target_layer) in phi.iter().enumerate() {
        if target_layer < 1 || target_layer > teacher_trace.layers.len() {
            return Err(invalid("phi maps outside the teacher stack"));
        }
        let s = &student_trace.layers[l];
        let t = &teacher_trace.layers[target_layer - 1];
        if s.cols() != t.cols() {
            return Err(invalid("student and teacher widths differ"));
        }
        if s.rows() != t.rows() {
            return Err(invalid("student and teacher traces cover different positions"));
        }
        let inv_width = 1.0 / s.cols() as f64;
        for (a, b) in s.data().iter().zip(t.data()) {
            let d = a - b;
            total += d * d * inv_width;
        }
    }
    Ok(total)
}

/// One training pair: features plus target content tokens (no markers).
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub features: FeatureSequence,
    pub targets: Vec<TokenId>,
}

impl TrainSample {
    /// Trains on the sample's ground-truth text.
    pub fn from_sample(sample: &Sample, vocab: usize) -> Result<TrainSample> {
        Ok(TrainSample {
            features: sample.features.clone(),
            targets: tokenize(&sample.text, vocab)?,
        })
    }

    /// Trains on the teacher's transcript (knowledge distillation targets).
    pub fn from_pseudo(pseudo: &PseudoSample, vocab: usize) -> Result<TrainSample> {
        Ok(TrainSample {
            features: pseudo.sample.features.clone(),
            targets: tokenize(&pseudo.pseudo_text, vocab)?,
        })
    }
}

/// Optimizer and schedule settings. Defaults are desk-scale; call
/// [`TrainConfig::paper_fidelity`] for the published large-run values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub warmup_steps: usize,
    pub peak_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    pub max_grad_norm: f64,
    /// Treat the encoder stack, its final norm, and the shared positional
    /// table as constants.
    pub freeze_encoder: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch_size: 16,
            warmup_steps: 50,
            peak_lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
            max_grad_norm: 1.0,
            freeze_encoder: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// The published training hyperparameters (slow on a desk machine).
    pub fn paper_fidelity() -> Self {
        TrainConfig {
            steps: 80_000,
            batch_size: 256,
            warmup_steps: 500,
            peak_lr: 1e-4,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(invalid("steps and batch_size must be positive"));
        }
        if self.warmup_steps > self.steps {
            return Err(invalid("warmup_steps cannot exceed steps"));
        }
        if !(self.peak_lr > 0.0) {
            return Err(invalid("peak_lr must be positive"));
        }
        if !(self.max_grad_norm > 0.0) {
            return Err(invalid("max_grad_norm must be positive"));
        }
        Ok(())
    }
}

/// Slanted-triangular schedule: linear from 0 at step 0 to `peak_lr` at
/// `warmup_steps`, then linear back to 0 at `steps`.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    if cfg.warmup_steps > 0 && step <= cfg.warmup_steps {
        cfg.peak_lr * step as f64 / cfg.warmup_steps as f64
    } else if step >= cfg.steps {
        0.0
    } else {
        cfg.peak_lr * (cfg.steps - step) as f64 / (cfg.steps - cfg.warmup_steps) as f64
    }
}

/// Per-step log record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    /// 1-based optimizer step.
    pub step: usize,
    pub lr: f64,
    pub breakdown: LossBreakdown,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

// --- tape-side model ------------------------------------------------------

struct LnVars {
    gamma: Var,
    beta: Var,
}

struct AttnVars {
    wq: Var,
    bq: Var,
    wk: Var,
    bk: Var,
    wv: Var,
    bv: Var,
    wo: Var,
    bo: Var,
}

struct FfVars {
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
}

struct EncVars {
    ln1: LnVars,
    attn: AttnVars,
    ln2: LnVars,
    ff: FfVars,
}

struct DecVars {
    ln1: LnVars,
    self_attn: AttnVars,
    ln2: LnVars,
    cross_attn: AttnVars,
    ln3: LnVars,
    ff: FfVars,
}

/// Tape leaves mirroring [`ToyModelParams`]; leaf creation order matches
/// `named_tensors` so gradients can be zipped back by position.
struct ModelVars {
    config: ModelConfig,
    embedding: Var,
    positional: Var,
    enc: Vec<EncVars>,
    enc_ln_final: LnVars,
    dec: Vec<DecVars>,
    dec_ln_final: LnVars,
}

fn leaf_ln(tape: &mut Tape, ln: &crate::model::LayerNormParams) -> LnVars {
    LnVars { gamma: tape.leaf(ln.gamma.clone()), beta: tape.leaf(ln.beta.clone()) }
}

fn leaf_attn(tape: &mut Tape, a: &crate::model::AttentionParams) -> AttnVars {
    AttnVars {
        wq: tape.leaf(a.wq.clone()),
        bq: tape.leaf(a.bq.clone()),
        wk: tape.leaf(a.wk.clone()),
        bk: tape.leaf(a.bk.clone()),
        wv: tape.leaf(a.wv.clone()),
        bv: tape.leaf(a.bv.clone()),
        wo: tape.leaf(a.wo.clone()),
        bo: tape.leaf(a.bo.clone()),
    }
}

fn leaf_ff(tape: &mut Tape, f: &crate::model::FeedForwardParams) -> FfVars {
    FfVars {
        w1: tape.leaf(f.w1.clone()),
        b1: tape.leaf(f.b1.clone()),
        w2: tape.leaf(f.w2.clone()),
        b2: tape.leaf(f.b2.clone()),
    }
}

impl ModelVars {
    fn build(tape: &mut Tape, p: &ToyModelParams) -> ModelVars {
        ModelVars {
            config: p.config,
            embedding: tape.leaf(p.embedding.clone()),
            positional: tape.leaf(p.positional.clone()),
            enc: p
                .enc
                .iter()
                .map(|l| EncVars {
                    ln1: leaf_ln(tape, &l.ln1),
                    attn: leaf_attn(tape, &l.attn),
                    ln2: leaf_ln(tape, &l.ln2),
                    ff: leaf_ff(tape, &l.ff),
                })
                .collect(),
            enc_ln_final: leaf_ln(tape, &p.enc_ln_final),
            dec: p
                .dec
                .iter()
                .map(|l| DecVars {
                    ln1: leaf_ln(tape, &l.ln1),
                    self_attn: leaf_attn(tape, &l.self_attn),
                    ln2: leaf_ln(tape, &l.ln2),
                    cross_attn: leaf_attn(tape, &l.cross_attn),
                    ln3: leaf_ln(tape, &l.ln3),
                    ff: leaf_ff(tape, &l.ff),
                })
                .collect(),
            dec_ln_final: leaf_ln(tape, &p.dec_ln_final),
        }
    }

    /// Leaves in `named_tensors` order.
    fn ordered(&self) -> Vec<Var> {
        let mut out = vec![self.embedding, self.positional];
        let push_ln = |out: &mut Vec<Var>, l: &LnVars| out.extend([l.gamma, l.beta]);
        let push_attn = |out: &mut Vec<Var>, a: &AttnVars| {
            out.extend([a.wq, a.bq, a.wk, a.bk, a.wv, a.bv, a.wo, a.bo])
        };
        let push_ff =
            |out: &mut Vec<Var>, f: &FfVars| out.extend([f.w1, f.b1, f.w2, f.b2]);
        for l in &self.enc {
            push_ln(&mut out, &l.ln1);
            push_attn(&mut out, &l.attn);
            push_ln(&mut out, &l.ln2);
            push_ff(&mut out, &l.ff);
        }
        push_ln(&mut out, &self.enc_ln_final);
        for l in &self.dec {
            push_ln(&mut out, &l.ln1);
            push_attn(&mut out, &l.self_attn);
            push_ln(&mut out, &l.ln2);
            push_attn(&mut out, &l.cross_attn);
            push_ln(&mut out, &l.ln3);
            push_ff(&mut out, &l.ff);
        }
        push_ln(&mut out, &self.dec_ln_final);
        out
    }
}

fn linear_v(tape: &mut Tape, x: Var, w: Var, b: Var) -> Var {
    let m = tape.matmul(x, w);
    tape.add_row(m, b)
}

fn ff_v(tape: &mut Tape, x: Var, f: &FfVars) -> Var {
    let h = linear_v(tape, x, f.w1, f.b1);
    let g = tape.gelu(h);
    linear_v(tape, g, f.w2, f.b2)
}

fn ln_v(tape: &mut Tape, x: Var, l: &LnVars) -> Var {
    tape.layer_norm(x, l.gamma, l.beta)
}

/// Multi-head attention on the tape, mirroring the inference `mha` exactly:
/// contiguous head columns, `1/sqrt(head_dim)` score scale, causal rows
/// seeing keys `0..=i`.
fn attn_v(
    tape: &mut Tape,
    q_src: Var,
    kv_src: Var,
    a: &AttnVars,
    heads: usize,
    causal: bool,
) -> Var {
    let q = linear_v(tape, q_src, a.wq, a.bq);
    let k = linear_v(tape, kv_src, a.wk, a.bk);
    let v = linear_v(tape, kv_src, a.wv, a.bv);
    let width = tape.value(q).cols();
    let hd = width / heads;
    let inv = 1.0 / num::sqrt(hd as f64);
    let mut ctx = Vec::with_capacity(heads);
    for h in 0..heads {
        let (lo, hi) = (h * hd, (h + 1) * hd);
        let qh = tape.slice_cols(q, lo, hi);
        let kh = tape.slice_cols(k, lo, hi);
        let vh = tape.slice_cols(v, lo, hi);
        let scores = tape.matmul_tb(qh, kh);
        let scaled = tape.scale(scores, inv);
        let p = if causal { tape.causal_softmax(scaled, 0) } else { tape.row_softmax(scaled) };
        ctx.push(tape.matmul(p, vh));
    }
    let merged = tape.concat_cols(&ctx);
    linear_v(tape, merged, a.wo, a.bo)
}

/// Encoder forward on the tape; `features` enters as a constant leaf.
fn encode_v(tape: &mut Tape, mv: &ModelVars, features: &Mat) -> Var {
    let f = tape.leaf(features.clone());
    let mut x = tape.mean_pool2(f);
    let m = tape.value(x).rows();
    let idx: Vec<usize> = (0..m).collect();
    let pos = tape.gather_rows(mv.positional, &idx);
    x = tape.add(x, pos);
    for l in &mv.enc {
        let a_in = ln_v(tape, x, &l.ln1);
        let a = attn_v(tape, a_in, a_in, &l.attn, mv.config.heads, false);
        x = tape.add(x, a);
        let f_in = ln_v(tape, x, &l.ln2);
        let f = ff_v(tape, f_in, &l.ff);
        x = tape.add(x, f);
    }
    ln_v(tape, x, &mv.enc_ln_final)
}

/// Teacher-forced decoder on the tape: logits at every prefix position plus
/// the per-layer block outputs.
fn decode_v(tape: &mut Tape, mv: &ModelVars, h: Var, prefix: &[TokenId]) -> (Var, Vec<Var>) {
    let ids: Vec<usize> = prefix.iter().map(|&t| t as usize).collect();
    let pos_idx: Vec<usize> = (0..prefix.len()).collect();
    let e = tape.gather_rows(mv.embedding, &ids);
    let pos = tape.gather_rows(mv.positional, &pos_idx);
    let mut x = tape.add(e, pos);
    let mut trace = Vec::with_capacity(mv.dec.len());
    for l in &mv.dec {
        let a_in = ln_v(tape, x, &l.ln1);
        let a = attn_v(tape, a_in, a_in, &l.self_attn, mv.config.heads, true);
        x = tape.add(x, a);
        let c_in = ln_v(tape, x, &l.ln2);
        let c = attn_v(tape, c_in, h, &l.cross_attn, mv.config.heads, false);
        x = tape.add(x, c);
        let f_in = ln_v(tape, x, &l.ln3);
        let f = ff_v(tape, f_in, &l.ff);
        x = tape.add(x, f);
        trace.push(x);
    }
    let y = ln_v(tape, x, &mv.dec_ln_final);
    let logits = tape.matmul_tb(y, mv.embedding);
    (logits, trace)
}

fn validate_sample(config: &ModelConfig, sample: &TrainSample) -> Result<()> {
    if sample.targets.len() + 1 > config.max_positions {
        return Err(invalid("target sequence exceeds max_positions"));
    }
    if let Some(&t) = sample.targets.iter().find(|&&t| t as usize >= config.vocab) {
        return Err(invalid(format!("target token {t} outside vocabulary")));
    }
    if sample.features.width() != config.width {
        return Err(invalid(format!(
            "invalid features: width {} does not match model width {}",
            sample.features.width(),
            config.width
        )));
    }
    if pooled_positions(sample.features.num_frames()) > config.max_positions {
        return Err(invalid("features exceed max_positions after downsampling"));
    }
    Ok(())
}

fn frozen_tensor(name: &str) -> bool {
    name.starts_with("enc.") || name.starts_with("enc_ln_final") || name == "positional"
}

/// Teacher next-token distributions at temperature `tau`.
fn soften(logits: &Mat, tau: f64) -> Mat {
    let inv = 1.0 / tau;
    let mut q = Mat::zeros(logits.rows(), logits.cols());
    for r in 0..logits.rows() {
        let scaled: Vec<f64> = logits.row(r).iter().map(|&z| z * inv).collect();
        q.row_mut(r).copy_from_slice(&softmax_row_prefix(&scaled, scaled.len()));
    }
    q
}

/// Builds the batch objective, runs one reverse sweep, and returns the loss
/// breakdown plus gradients shaped like the model. With `freeze_encoder` the
/// hidden states are computed outside the tape and encoder-side gradients are
/// identically zero.
pub fn backward(
    student: &ToyModelParams,
    teacher: Option<&ToyModelParams>,
    batch: &[TrainSample],
    weights: &LossWeights,
    freeze_encoder: bool,
) -> Result<(LossBreakdown, ToyModelParams)> {
    weights.validate()?;
    if batch.is_empty() {
        return Err(invalid("empty batch"));
    }
    let teacher = if weights.needs_teacher() {
        let t = teacher.ok_or_else(|| invalid("objective weights require a teacher"))?;
        if t.config.vocab != student.config.vocab {
            return Err(invalid("teacher and student vocabularies differ"));
        }
        if t.config.width != student.config.width {
            return Err(invalid("teacher and student widths differ"));
        }
        if weights.alpha_mse > 0.0 && student.config.dec_layers > t.config.dec_layers {
            return Err(invalid("student decoder is deeper than the teacher"));
        }
        Some(t)
    } else {
        None
    };
    let phi: Vec<usize> = match teacher {
        Some(t) if weights.alpha_mse > 0.0 => (1..=student.config.dec_layers)
            .map(|l| layer_map_phi(l, t.config.dec_layers, student.config.dec_layers))
            .collect(),
        _ => Vec::new(),
    };

    let mut tape = Tape::new();
    let mv = ModelVars::build(&mut tape, student);
    let inv_b = 1.0 / batch.len() as f64;
    let mut heads: Vec<(Var, f64)> = Vec::new();
    let (mut pl_sum, mut kl_sum, mut mse_sum) = (0.0, 0.0, 0.0);

    for sample in batch {
        validate_sample(&student.config, sample)?;
        let mut prefix = Vec::with_capacity(sample.targets.len() + 1);
        prefix.push(BOS);
        prefix.extend_from_slice(&sample.targets);
        let mut target_rows: Vec<usize> =
            sample.targets.iter().map(|&t| t as usize).collect();
        target_rows.push(EOS as usize);

        let h = if freeze_encoder {
            let h = encode(student, &sample.features)?;
            tape.leaf(h.states)
        } else {
            // Same validation as the inference path before building graph
            // nodes for the sample.
            encode(student, &sample.features)?;
            encode_v(&mut tape, &mv, &sample.features.frames)
        };
        let (logits, trace) = decode_v(&mut tape, &mv, h, &prefix);

        let pl_head = tape.nll(logits, &target_rows);
        pl_sum += tape.value(pl_head).at(0, 0);
        heads.push((pl_head, weights.alpha_pl * inv_b));

        if let Some(t) = teacher {
            let th = encode(t, &sample.features)?;
            let (t_logits, t_trace) = forced_forward(t, &th, &prefix)?;
            if weights.alpha_kl > 0.0 {
                let q = soften(&t_logits, weights.temperature);
                let kl_head = tape.kl_to_teacher(logits, q, weights.temperature);
                kl_sum += tape.value(kl_head).at(0, 0);
                heads.push((kl_head, weights.alpha_kl * inv_b));
            }
            if weights.alpha_mse > 0.0 {
                for (l, &src) in phi.iter().enumerate() {
                    let mse_head =
                        tape.mse_to(trace[l], t_trace.layers[src - 1].clone());
                    mse_sum += tape.value(mse_head).at(0, 0);
                    heads.push((mse_head, weights.alpha_mse * inv_b));
                }
            }
        }
    }

    let root = tape.sum_scaled(&heads);
    let pl = pl_sum * inv_b;
    let breakdown = kd_objective(pl, pl, kl_sum * inv_b, mse_sum * inv_b, weights);

    let grad_list = tape.backward(root);
    let mut grads = student.zeros_like();
    let vars = mv.ordered();
    for ((name, slot), var) in grads.named_tensors_mut().into_iter().zip(vars) {
        if freeze_encoder && frozen_tensor(&name) {
            continue;
        }
        if let Some(g) = &grad_list[var.index()] {
            if !g.all_finite() {
                return Err(numeric(format!("non-finite gradient in {name}")));
            }
            slot.data_mut().copy_from_slice(g.data());
        }
    }
    Ok((breakdown, grads))
}

/// Scales gradients so the global norm is at most `max_norm`; returns the
/// pre-clip norm.
pub fn clip_gradients(grads: &mut ToyModelParams, max_norm: f64) -> f64 {
    let mut sq = 0.0;
    for (_, g) in grads.named_tensors() {
        sq += g.sum_of_squares();
    }
    let norm = num::sqrt(sq);
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for (_, g) in grads.named_tensors_mut() {
            g.scale_assign(s);
        }
    }
    norm
}

/// Decoupled-weight-decay adaptive-moment optimizer with bias correction.
pub struct AdamW {
    m: ToyModelParams,
    v: ToyModelParams,
    t: usize,
}

impl AdamW {
    pub fn new(shape: &ToyModelParams) -> Self {
        AdamW { m: shape.zeros_like(), v: shape.zeros_like(), t: 0 }
    }

    /// One update; tensors matched by `skip` are left untouched (their
    /// moments do not advance either).
    pub fn step(
        &mut self,
        params: &mut ToyModelParams,
        grads: &ToyModelParams,
        lr: f64,
        cfg: &TrainConfig,
        skip: impl Fn(&str) -> bool,
    ) {
        self.t += 1;
        let bc1 = 1.0 - num::powf(cfg.beta1, self.t as f64);
        let bc2 = 1.0 - num::powf(cfg.beta2, self.t as f64);
        let grads = grads.named_tensors();
        let mut ms = self.m.named_tensors_mut();
        let mut vs = self.v.named_tensors_mut();
        for (i, (name, p)) in params.named_tensors_mut().into_iter().enumerate() {
            if skip(&name) {
                continue;
            }
            let g = grads[i].1.data();
            let m = ms[i].1.data_mut();
            let v = vs[i].1.data_mut();
            for (j, x) in p.data_mut().iter_mut().enumerate() {
                m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
                v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *x -= lr * (mhat / (num::sqrt(vhat) + cfg.epsilon) + cfg.weight_decay * *x);
            }
        }
    }
}

/// Runs the full training loop and returns the trained parameters with the
/// per-step loss log. Deterministic given the config seed. Fails on
/// divergence (non-finite loss or gradient), naming the step or tensor.
pub fn train(
    student: ToyModelParams,
    teacher: Option<&ToyModelParams>,
    corpus: &[TrainSample],
    cfg: &TrainConfig,
    weights: &LossWeights,
) -> Result<(ToyModelParams, Vec<StepStats>)> {
    cfg.validate()?;
    weights.validate()?;
    if corpus.is_empty() {
        return Err(invalid("empty training corpus"));
    }
    // Reject malformed inputs here so the in-loop Numeric wrapping is
    // reserved for genuine divergence.
    for sample in corpus {
        validate_sample(&student.config, sample)?;
    }
    if let Some(t) = teacher {
        if t.config.vocab != student.config.vocab || t.config.width != student.config.width {
            return Err(invalid("teacher and student must share vocab and width"));
        }
        if t.config.dec_layers < student.config.dec_layers {
            return Err(invalid("teacher must be at least as deep as the student"));
        }
    }
    let mut params = student;
    let mut opt = AdamW::new(&params);
    let mut rng = rng_from_seed(derive_seed(cfg.seed, "batch-order"));
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0usize;
    let batch_size = cfg.batch_size.min(corpus.len());
    let mut log = Vec::with_capacity(cfg.steps);
    let skip: &dyn Fn(&str) -> bool =
        if cfg.freeze_encoder { &frozen_tensor } else { &|_: &str| false };

    for step in 1..=cfg.steps {
        let mut batch = Vec::with_capacity(batch_size);
        while batch.len() < batch_size {
            if cursor >= order.len() {
                order = permutation(&mut rng, corpus.len());
                cursor = 0;
            }
            batch.push(corpus[order[cursor]].clone());
            cursor += 1;
        }
        let (breakdown, mut grads) =
            backward(&params, teacher, &batch, weights, cfg.freeze_encoder)
                .map_err(|e| numeric(format!("step {step}: {e}")))?;
        if !breakdown.total.is_finite() {
            return Err(numeric(format!("loss diverged at step {step}")));
        }
        let grad_norm = clip_gradients(&mut grads, cfg.max_grad_norm);
        let lr = lr_at(step, cfg);
        opt.step(&mut params, &grads, lr, cfg, skip);
        log.push(StepStats { step, lr, breakdown, grad_norm });
    }
    Ok((params, log))
}

// Re-exported for downstream shape math (pooled length drives position
// budgets when building corpora).
pub fn pooled_positions(frames: usize) -> usize {
    mean_pool_stride2(&Mat::zeros(frames.max(1), 1)).rows()
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::String;
    use crate::corpus::detokenize;
    use crate::decode::{greedy_decode, DecodeConfig};
    use crate::metrics::wer;
    use crate::model::{init_student, HiddenStates};
    use crate::signal::{synth_task, SynthSpec, TaskKind};
    use rand::Rng;

    fn small_config() -> ModelConfig {
        ModelConfig {
            enc_layers: 1,
            dec_layers: 2,
            width: 16,
            heads: 2,
            vocab: 12,
            max_positions: 32,
            downsample: 2,
        }
    }

    fn sample_for(config: &ModelConfig, seed: u64, len: usize) -> TrainSample {
        let spec = SynthSpec {
            vocab: config.vocab,
            width: config.width,
            jitter: 0.05,
            frame_rate: 2.0,
        };
        let (features, targets) = synth_task(TaskKind::Copy, seed, len, &spec).unwrap();
        TrainSample { features, targets }
    }

    #[test]
    fn ce_loss_matches_hand_values() {
        // Probability 1 at every target.
        let sure = Mat::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]);
        assert_eq!(ce_loss(&sure, &[1, 0]).unwrap(), 0.0);
        // Uniform model over V=4, N=3.
        let uniform = Mat::from_vec(3, 4, vec![0.25; 12]);
        let got = ce_loss(&uniform, &[0, 1, 2]).unwrap();
        assert!((got - 3.0 * num::ln(4.0)).abs() < 1e-12);
        // 0.25 at the target per position, N=2: 2 ln 4.
        let quarter = Mat::from_rows(&[vec![0.25, 0.75], vec![0.25, 0.75]]);
        let got = ce_loss(&quarter, &[0, 0]).unwrap();
        assert!((got - 2.0 * num::ln(4.0)).abs() < 1e-12);
        assert!((got - 2.7726).abs() < 1e-4);
    }

    #[test]
    fn ce_loss_clamps_zero_probabilities() {
        let degenerate = Mat::from_rows(&[vec![0.0, 1.0]]);
        let (nats, clamped) = ce_loss_detailed(&degenerate, &[0]).unwrap();
        assert_eq!(clamped, 1);
        assert!((nats - -num::ln(PROB_FLOOR)).abs() < 1e-9);
        assert!(ce_loss(&degenerate, &[0, 1]).is_err());
        assert!(ce_loss(&degenerate, &[5]).is_err());
    }

    #[test]
    fn pl_loss_is_ce_loss_on_pseudo_targets() {
        let mut rng = rng_from_seed(derive_seed(1, "pl-eq-ce"));
        for _ in 0..20 {
            let rows = rng.gen_range(1usize..6);
            let mut probs = Mat::zeros(rows, 5);
            for r in 0..rows {
                let mut total = 0.0;
                for c in 0..5 {
                    let x: f64 = rng.gen_range(0.01..1.0);
                    probs.row_mut(r)[c] = x;
                    total += x;
                }
                for c in 0..5 {
                    probs.row_mut(r)[c] /= total;
                }
            }
            let targets: Vec<TokenId> = (0..rows).map(|_| rng.gen_range(0u32..5)).collect();
            assert_eq!(pl_loss(&probs, &targets).unwrap(), ce_loss(&probs, &targets).unwrap());
        }
    }

    #[test]
    fn kl_loss_matches_hand_value_and_is_nonnegative() {
        // tau=1, Q=[0.5,0.5], P=[0.25,0.75]:
        // 0.5 ln(0.5/0.25) + 0.5 ln(0.5/0.75) = 0.5 ln 2 + 0.5 ln(2/3).
        let q_logits = Mat::from_rows(&[vec![0.0, 0.0]]);
        let p_logits = Mat::from_rows(&[vec![0.0, num::ln(3.0)]]);
        let got = kl_loss(&p_logits, &q_logits, 1.0).unwrap();
        let want = 0.5 * num::ln(2.0) + 0.5 * num::ln(2.0 / 3.0);
        assert!((got - want).abs() < 1e-12);
        assert!((got - 0.1438).abs() < 1e-4);

        let mut rng = rng_from_seed(derive_seed(2, "kl-nonneg"));
        for _ in 0..10_000 {
            let s = Mat::from_vec(1, 4, (0..4).map(|_| rng.gen_range(-3.0..3.0)).collect());
            let t = Mat::from_vec(1, 4, (0..4).map(|_| rng.gen_range(-3.0..3.0)).collect());
            let tau = rng.gen_range(0.5..4.0);
            let kl = kl_loss(&s, &t, tau).unwrap();
            assert!(kl >= -1e-12, "KL must be non-negative, got {kl}");
        }
        let same = Mat::from_rows(&[vec![0.3, -1.0, 2.0]]);
        assert_eq!(kl_loss(&same, &same, 2.0).unwrap(), 0.0);
        assert!(kl_loss(&q_logits, &Mat::zeros(2, 2), 1.0).is_err());
        assert!(kl_loss(&q_logits, &q_logits, 0.0).is_err());
    }

    #[test]
    fn mse_loss_closed_form_for_constant_offset() {
        let layers = 2;
        let positions = 3;
        let width = 4;
        let base = Mat::from_vec(positions, width, (0..12).map(|i| i as f64).collect());
        let teacher = DecoderTrace { layers: vec![base.clone(); layers] };
        let c = 0.5;
        let shifted = Mat::from_vec(
            positions,
            width,
            base.data().iter().map(|&x| x + c).collect(),
        );
        let student = DecoderTrace { layers: vec![shifted; layers] };
        let got = mse_loss(&student, &teacher, &[1, 2]).unwrap();
        // Per entry (c^2)/width, times positions*width entries per layer.
        let want = c * c * (positions * layers) as f64;
        assert!((got - want).abs() < 1e-12);
        assert_eq!(mse_loss(&teacher, &teacher, &[1, 2]).unwrap(), 0.0);
        assert!(mse_loss(&student, &teacher, &[1]).is_err());
        assert!(mse_loss(&student, &teacher, &[1, 3]).is_err());
    }

    #[test]
    fn kd_objective_is_linear_in_each_weight() {
        let w = LossWeights::default();
        let b = kd_objective(2.0, 2.0, 1.0, 0.5, &w);
        assert!((b.total - (0.8 + 2.0)).abs() < 1e-12);
        let doubled = LossWeights { alpha_kl: 1.6, ..w };
        let b2 = kd_objective(2.0, 2.0, 1.0, 0.5, &doubled);
        assert!((b2.total - b.total - 0.8).abs() < 1e-12);
        let sft = LossWeights { alpha_kl: 0.0, alpha_pl: 1.0, alpha_mse: 0.0, temperature: 2.0 };
        let b3 = kd_objective(2.0, 2.0, 7.0, 9.0, &sft);
        assert!((b3.total - 2.0).abs() < 1e-12);
        assert_eq!(kd_objective(0.0, 0.0, 0.0, 0.0, &w).total, 0.0);
    }

    #[test]
    fn tape_objective_matches_value_level_losses() {
        let config = small_config();
        let student = ToyModelParams::init(config, 5).unwrap();
        let teacher = ToyModelParams::init(config, 6).unwrap();
        let weights =
            LossWeights { alpha_kl: 0.8, alpha_pl: 1.0, alpha_mse: 0.7, temperature: 2.0 };
        let batch: Vec<TrainSample> = (0..3).map(|i| sample_for(&config, i, 4)).collect();
        let (breakdown, _) = backward(&student, Some(&teacher), &batch, &weights, false).unwrap();

        let (mut pl, mut kl, mut mse) = (0.0, 0.0, 0.0);
        for s in &batch {
            let mut prefix = vec![BOS];
            prefix.extend_from_slice(&s.targets);
            let mut rows: Vec<TokenId> = s.targets.clone();
            rows.push(EOS);
            let h = encode(&student, &s.features).unwrap();
            let (logits, trace) = forced_forward(&student, &h, &prefix).unwrap();
            let probs = soften(&logits, 1.0);
            pl += ce_loss(&probs, &rows).unwrap();
            let th = encode(&teacher, &s.features).unwrap();
            let (t_logits, t_trace) = forced_forward(&teacher, &th, &prefix).unwrap();
            kl += kl_loss(&logits, &t_logits, weights.temperature).unwrap();
            let phi: Vec<usize> = (1..=config.dec_layers)
                .map(|l| layer_map_phi(l, config.dec_layers, config.dec_layers))
                .collect();
            mse += mse_loss(&trace, &t_trace, &phi).unwrap();
        }
        let inv = 1.0 / batch.len() as f64;
        assert!((breakdown.pl - pl * inv).abs() < 1e-9, "pl {} vs {}", breakdown.pl, pl * inv);
        assert!((breakdown.kl - kl * inv).abs() < 1e-9);
        assert!((breakdown.mse - mse * inv).abs() < 1e-9);
        assert!(
            (breakdown.total
                - (0.8 * breakdown.kl + breakdown.pl + 0.7 * breakdown.mse))
                .abs()
                < 1e-12
        );
        assert_eq!(breakdown.ce, breakdown.pl);
    }

    /// Central finite differences of the batch objective for a handful of
    /// probed coordinates per tensor.
    fn fd_check(weights: &LossWeights, freeze: bool) {
        let config = ModelConfig {
            enc_layers: 1,
            dec_layers: 2,
            width: 8,
            heads: 2,
            vocab: 8,
            max_positions: 16,
            downsample: 2,
        };
        let student = ToyModelParams::init(config, 11).unwrap();
        let teacher = ToyModelParams::init(config, 12).unwrap();
        let batch: Vec<TrainSample> = (0..2)
            .map(|i| {
                let spec = SynthSpec {
                    vocab: config.vocab,
                    width: config.width,
                    jitter: 0.05,
                    frame_rate: 2.0,
                };
                let (features, targets) =
                    synth_task(TaskKind::Copy, 40 + i, 3, &spec).unwrap();
                TrainSample { features, targets }
            })
            .collect();
        let (_, grads) = backward(&student, Some(&teacher), &batch, weights, freeze).unwrap();
        let mut rng = rng_from_seed(derive_seed(3, "fd-probes"));
        let h = 1e-6;
        let names: Vec<String> =
            student.named_tensors().into_iter().map(|(n, _)| n).collect();
        for (ti, name) in names.iter().enumerate() {
            if freeze && frozen_tensor(name) {
                let g = grads.named_tensors()[ti].1;
                assert!(g.data().iter().all(|&x| x == 0.0), "{name} must not move");
                continue;
            }
            let len = student.named_tensors()[ti].1.len();
            for _ in 0..4 {
                let j = rng.gen_range(0..len);
                let mut plus = student.clone();
                plus.named_tensors_mut()[ti].1.data_mut()[j] += h;
                let mut minus = student.clone();
                minus.named_tensors_mut()[ti].1.data_mut()[j] -= h;
                let up = backward(&plus, Some(&teacher), &batch, weights, freeze)
                    .unwrap()
                    .0
                    .total;
                let down = backward(&minus, Some(&teacher), &batch, weights, freeze)
                    .unwrap()
                    .0
                    .total;
                let fd = (up - down) / (2.0 * h);
                let analytic = grads.named_tensors()[ti].1.data()[j];
                // Central differences bottom out at cancellation noise
                // (~eps*|L|/h); below that scale both values are zero in
                // any meaningful sense. Key biases hit this: a constant
                // added to every key shifts each score row uniformly,
                // which the softmax cancels exactly.
                if fd.abs().max(analytic.abs()) < 1e-6 {
                    continue;
                }
                let denom = fd.abs().max(analytic.abs());
                assert!(
                    ((fd - analytic) / denom).abs() < 1e-5,
                    "{name}[{j}]: fd {fd} analytic {analytic}"
                );
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        fd_check(
            &LossWeights { alpha_kl: 0.8, alpha_pl: 1.0, alpha_mse: 0.5, temperature: 2.0 },
            false,
        );
    }

    #[test]
    fn frozen_encoder_gradients_are_zero_and_rest_still_match() {
        fd_check(
            &LossWeights { alpha_kl: 0.8, alpha_pl: 1.0, alpha_mse: 0.0, temperature: 2.0 },
            true,
        );
    }

    #[test]
    fn self_distillation_has_near_zero_loss_and_gradient() {
        let config = small_config();
        let model = ToyModelParams::init(config, 21).unwrap();
        let weights =
            LossWeights { alpha_kl: 1.0, alpha_pl: 0.0, alpha_mse: 1.0, temperature: 2.0 };
        let batch = vec![sample_for(&config, 0, 4)];
        let (breakdown, grads) =
            backward(&model, Some(&model), &batch, &weights, false).unwrap();
        assert!(breakdown.kl.abs() < 1e-12, "kl {}", breakdown.kl);
        assert!(breakdown.mse.abs() < 1e-12);
        assert!(breakdown.total.abs() < 1e-12);
        for (name, g) in grads.named_tensors() {
            let peak = g.data().iter().fold(0.0f64, |a, &x| a.max(x.abs()));
            assert!(peak < 1e-8, "{name} gradient {peak}");
        }
    }

    #[test]
    fn lr_schedule_hits_the_three_anchors() {
        let cfg = TrainConfig { steps: 200, warmup_steps: 40, peak_lr: 2e-3, ..Default::default() };
        assert_eq!(lr_at(0, &cfg), 0.0);
        assert_eq!(lr_at(40, &cfg), 2e-3);
        assert_eq!(lr_at(200, &cfg), 0.0);
        assert!((lr_at(20, &cfg) - 1e-3).abs() < 1e-18);
        assert!((lr_at(120, &cfg) - 1e-3).abs() < 1e-18);
        for s in 0..40 {
            assert!(lr_at(s, &cfg) <= lr_at(s + 1, &cfg));
        }
        for s in 40..200 {
            assert!(lr_at(s, &cfg) >= lr_at(s + 1, &cfg));
        }
    }

    #[test]
    fn clipping_caps_the_global_norm() {
        let config = small_config();
        let mut grads = ToyModelParams::init(config, 31).unwrap();
        let before = clip_gradients(&mut grads, 1.0);
        assert!(before > 1.0, "random init grads should exceed the cap");
        let mut sq = 0.0;
        for (_, g) in grads.named_tensors() {
            sq += g.sum_of_squares();
        }
        assert!(num::sqrt(sq) <= 1.0 + 1e-12);
        // Under the cap: untouched.
        let mut small = ToyModelParams::init(config, 31).unwrap().zeros_like();
        small.named_tensors_mut()[0].1.data_mut()[0] = 0.5;
        assert_eq!(clip_gradients(&mut small, 1.0), 0.5);
        assert_eq!(small.named_tensors()[0].1.data()[0], 0.5);
    }

    #[test]
    fn adamw_first_step_moves_by_roughly_lr() {
        let config = small_config();
        let mut params = ToyModelParams::init(config, 41).unwrap().zeros_like();
        let mut grads = params.zeros_like();
        grads.named_tensors_mut()[0].1.data_mut()[0] = 1.0;
        let cfg = TrainConfig::default();
        let mut opt = AdamW::new(&params);
        opt.step(&mut params, &grads, 1e-3, &cfg, |_| false);
        let moved = params.named_tensors()[0].1.data()[0];
        // mhat = 1, vhat = 1 after bias correction, so the step is lr/(1+eps).
        assert!((moved + 1e-3).abs() < 1e-9, "moved {moved}");
        let untouched = params.named_tensors()[1].1.data()[0];
        assert_eq!(untouched, 0.0);
    }

    #[test]
    fn zero_student_first_loss_is_uniform_analytic() {
        let config = small_config();
        let student = ToyModelParams::init(config, 51).unwrap().zeros_like();
        let weights = LossWeights { alpha_kl: 0.0, alpha_pl: 1.0, alpha_mse: 0.0, temperature: 2.0 };
        let len = 4;
        let batch = vec![sample_for(&config, 1, len)];
        let (breakdown, _) = backward(&student, None, &batch, &weights, false).unwrap();
        // len content targets plus the end marker, each at -ln(1/V).
        let want = (len + 1) as f64 * num::ln(config.vocab as f64);
        assert!((breakdown.pl - want).abs() < 1e-9, "pl {} want {want}", breakdown.pl);
    }

    #[test]
    fn training_is_deterministic_and_freezing_pins_the_encoder() {
        let config = small_config();
        let teacher = ToyModelParams::init(config, 61).unwrap();
        let student = init_student(&teacher, &config).unwrap();
        let corpus: Vec<TrainSample> = (0..8).map(|i| sample_for(&config, i, 3)).collect();
        let cfg = TrainConfig {
            steps: 12,
            batch_size: 4,
            warmup_steps: 3,
            freeze_encoder: true,
            seed: 7,
            ..Default::default()
        };
        let weights = LossWeights::default();
        let (a, log_a) = train(student.clone(), Some(&teacher), &corpus, &cfg, &weights).unwrap();
        let (b, log_b) = train(student.clone(), Some(&teacher), &corpus, &cfg, &weights).unwrap();
        assert_eq!(log_a.len(), 12);
        for (x, y) in log_a.iter().zip(&log_b) {
            assert_eq!(x.breakdown.total.to_bits(), y.breakdown.total.to_bits());
            assert_eq!(x.grad_norm.to_bits(), y.grad_norm.to_bits());
        }
        for ((name, ta), (_, tb)) in a.named_tensors().into_iter().zip(b.named_tensors()) {
            for (x, y) in ta.data().iter().zip(tb.data()) {
                assert_eq!(x.to_bits(), y.to_bits(), "{name} differs across reruns");
            }
        }
        // Frozen side bit-identical to the starting student.
        for ((name, before), (_, after)) in
            student.named_tensors().into_iter().zip(a.named_tensors())
        {
            if frozen_tensor(&name) {
                for (x, y) in before.data().iter().zip(after.data()) {
                    assert_eq!(x.to_bits(), y.to_bits(), "{name} moved while frozen");
                }
            }
        }
        // The trainable side did move.
        let moved = a.embedding.data().iter().zip(student.embedding.data()).any(|(x, y)| x != y);
        assert!(moved, "training should change the embedding");
    }

    #[test]
    fn small_copy_task_trains_to_low_error() {
        let config = ModelConfig {
            enc_layers: 1,
            dec_layers: 2,
            width: 16,
            heads: 2,
            vocab: 10,
            max_positions: 32,
            downsample: 2,
        };
        let student = ToyModelParams::init(config, 71).unwrap();
        let spec = SynthSpec {
            vocab: config.vocab,
            width: config.width,
            jitter: 0.02,
            frame_rate: 2.0,
        };
        let corpus: Vec<TrainSample> = (0..24)
            .map(|i| {
                let (features, targets) =
                    synth_task(TaskKind::Copy, 100 + i, 3, &spec).unwrap();
                TrainSample { features, targets }
            })
            .collect();
        let cfg = TrainConfig {
            steps: 260,
            batch_size: 8,
            warmup_steps: 20,
            peak_lr: 3e-3,
            seed: 3,
            ..Default::default()
        };
        let weights = LossWeights { alpha_kl: 0.0, alpha_pl: 1.0, alpha_mse: 0.0, temperature: 2.0 };
        let (trained, log) = train(student, None, &corpus, &cfg, &weights).unwrap();
        let first = log.first().unwrap().breakdown.total;
        let last = log.last().unwrap().breakdown.total;
        assert!(last < 0.3 * first, "loss should fall: {first} -> {last}");

        // Decoding the training inputs should now mostly reproduce targets.
        let dc = DecodeConfig { max_len: 8, ..DecodeConfig::default() };
        let mut errs = 0.0;
        for s in &corpus {
            let out = greedy_decode(&trained, &s.features, &dc).unwrap();
            errs += wer(&detokenize(&s.targets), &detokenize(&out.tokens)).unwrap();
        }
        let mean = errs / corpus.len() as f64;
        assert!(mean <= 0.34, "mean training WER {mean}");
    }

    #[test]
    fn backward_validates_inputs() {
        let config = small_config();
        let student = ToyModelParams::init(config, 81).unwrap();
        let weights = LossWeights::default();
        assert!(backward(&student, None, &[], &weights, false).is_err());
        // KL weight without a teacher.
        let batch = vec![sample_for(&config, 0, 3)];
        assert!(backward(&student, None, &batch, &weights, false).is_err());
        // Vocab mismatch.
        let other = ToyModelParams::init(
            ModelConfig { vocab: 20, ..config },
            82,
        )
        .unwrap();
        assert!(backward(&student, Some(&other), &batch, &weights, false).is_err());
        // Oversized targets.
        let mut bad = batch[0].clone();
        bad.targets = vec![2; config.max_positions];
        assert!(backward(&student, Some(&student), &[bad], &weights, false).is_err());
        // hidden-state leaf path still validates features.
        let mut nan = batch[0].clone();
        nan.features.frames.data_mut()[0] = f64::NAN;
        assert!(backward(&student, Some(&student), &[nan], &weights, true).is_err());
        assert!(backward(&student, Some(&student), &[batch[0].clone()], &weights, true).is_ok());
    }

    #[test]
    fn pooled_positions_matches_encoder_stem() {
        assert_eq!(pooled_positions(1), 1);
        assert_eq!(pooled_positions(7), 4);
        assert_eq!(pooled_positions(8), 4);
    }

    #[test]
    fn hidden_state_leaf_matches_inference_probs() {
        // The tape decoder must reproduce the session decoder's
        // distributions on the same hidden states.
        let config = small_config();
        let model = ToyModelParams::init(config, 91).unwrap();
        let s = sample_for(&config, 5, 4);
        let h = encode(&model, &s.features).unwrap();
        let mut prefix = vec![BOS];
        prefix.extend_from_slice(&s.targets);
        let (logits, trace) = forced_forward(&model, &h, &prefix).unwrap();

        let mut tape = Tape::new();
        let mv = ModelVars::build(&mut tape, &model);
        let hv = tape.leaf(h.states.clone());
        let (logits_v, trace_v) = decode_v(&mut tape, &mv, hv, &prefix);
        let tl = tape.value(logits_v);
        assert_eq!(tl.rows(), logits.rows());
        for (a, b) in tl.data().iter().zip(logits.data()) {
            assert!((a - b).abs() < 1e-9, "tape logits diverge from session");
        }
        for (l, var) in trace_v.iter().enumerate() {
            for (a, b) in tape.value(*var).data().iter().zip(trace.layers[l].data()) {
                assert!((a - b).abs() < 1e-9, "trace layer {l} diverges");
            }
        }
        // Full-tape encoder path agrees too.
        let mut tape2 = Tape::new();
        let mv2 = ModelVars::build(&mut tape2, &model);
        let hv2 = encode_v(&mut tape2, &mv2, &s.features.frames);
        let henc = tape2.value(hv2);
        let h2 = encode(&model, &s.features).unwrap();
        for (a, b) in henc.data().iter().zip(h2.states.data()) {
            assert!((a - b).abs() < 1e-9, "tape encoder diverges");
        }
        let _ = HiddenStates { states: henc.clone() };
    }
}
