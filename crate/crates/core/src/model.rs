//! The toy encoder-decoder transcription model.
//!
//! Architecture: a stride-2 mean-pool stem followed by pre-norm transformer
//! encoder blocks; a pre-norm transformer decoder with masked self-attention
//! and cross-attention; token embeddings shared with the output projection;
//! one learned positional table used by both sides. All arithmetic is `f64`.
//!
//! Decoding goes through [`DecoderSession`], which caches per-layer keys and
//! values. The cache can be truncated and re-advanced, which is what
//! speculative verification needs, and a session can advance a whole block of
//! tokens in one pass (the verification path). Cached and cache-free decoding
//! produce bit-identical results; tests pin that.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, Result};
use crate::mat::Mat;
use crate::num;
use crate::rng::{rng_from_seed, uniform_symmetric};
use crate::signal::FeatureSequence;
use crate::tape::softmax_row_prefix;

pub type TokenId = u32;

/// Start-of-sequence token; every decode prefix begins with it.
pub const BOS: TokenId = 0;
/// End-of-sequence token.
pub const EOS: TokenId = 1;
/// Token ids below this are reserved; content tokens start here.
pub const RESERVED_TOKENS: TokenId = 2;

/// Layer-norm variance epsilon.
pub const LN_EPS: f64 = 1e-5;

/// Shape of a model. `downsample` is the stem's pooling stride and is fixed
/// at 2 in this release.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub width: usize,
    pub heads: usize,
    pub vocab: usize,
    pub max_positions: usize,
    pub downsample: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            enc_layers: 2,
            dec_layers: 4,
            width: 32,
            heads: 4,
            vocab: 64,
            max_positions: 128,
            downsample: 2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.enc_layers == 0 || self.dec_layers == 0 {
            return Err(invalid("layer counts must be positive"));
        }
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return Err(invalid("width must be a positive multiple of heads"));
        }
        if self.vocab < RESERVED_TOKENS as usize {
            return Err(invalid("vocab must include the reserved tokens"));
        }
        if self.max_positions == 0 {
            return Err(invalid("max_positions must be positive"));
        }
        if self.downsample != 2 {
            return Err(invalid("downsample is fixed at 2"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    /// Feed-forward inner width.
    pub fn ff_dim(&self) -> usize {
        4 * self.width
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gamma: Mat,
    pub beta: Mat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub wq: Mat,
    pub bq: Mat,
    pub wk: Mat,
    pub bk: Mat,
    pub wv: Mat,
    pub bv: Mat,
    pub wo: Mat,
    pub bo: Mat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedForwardParams {
    pub w1: Mat,
    pub b1: Mat,
    pub w2: Mat,
    pub b2: Mat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayerParams {
    pub ln1: LayerNormParams,
    pub attn: AttentionParams,
    pub ln2: LayerNormParams,
    pub ff: FeedForwardParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayerParams {
    pub ln1: LayerNormParams,
    pub self_attn: AttentionParams,
    pub ln2: LayerNormParams,
    pub cross_attn: AttentionParams,
    pub ln3: LayerNormParams,
    pub ff: FeedForwardParams,
}

/// All weights of one model. The embedding matrix doubles as the output
/// projection; the positional table is shared by encoder and decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModelParams {
    pub config: ModelConfig,
    pub embedding: Mat,
    pub positional: Mat,
    pub enc: Vec<EncoderLayerParams>,
    pub enc_ln_final: LayerNormParams,
    pub dec: Vec<DecoderLayerParams>,
    pub dec_ln_final: LayerNormParams,
}

fn ln_init(d: usize) -> LayerNormParams {
    LayerNormParams { gamma: Mat::from_vec(1, d, vec![1.0; d]), beta: Mat::zeros(1, d) }
}

impl ToyModelParams {
    /// Fresh model with weights drawn uniform in `[-1/sqrt(width), 1/sqrt(width))`,
    /// biases and layer-norm shifts at zero, gains at one. Deterministic in `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.width;
        let scale = 1.0 / num::sqrt(d as f64);
        let mut rng = rng_from_seed(seed);

        fn mat(rng: &mut rand_chacha::ChaCha12Rng, scale: f64, rows: usize, cols: usize) -> Mat {
            let data = (0..rows * cols).map(|_| uniform_symmetric(rng, scale)).collect();
            Mat::from_vec(rows, cols, data)
        }
        fn attn(rng: &mut rand_chacha::ChaCha12Rng, scale: f64, d: usize) -> AttentionParams {
            AttentionParams {
                wq: mat(rng, scale, d, d),
                bq: Mat::zeros(1, d),
                wk: mat(rng, scale, d, d),
                bk: Mat::zeros(1, d),
                wv: mat(rng, scale, d, d),
                bv: Mat::zeros(1, d),
                wo: mat(rng, scale, d, d),
                bo: Mat::zeros(1, d),
            }
        }
        fn ff(rng: &mut rand_chacha::ChaCha12Rng, scale: f64, d: usize, f: usize) -> FeedForwardParams {
            FeedForwardParams {
                w1: mat(rng, scale, d, f),
                b1: Mat::zeros(1, f),
                w2: mat(rng, scale, f, d),
                b2: Mat::zeros(1, d),
            }
        }

        let embedding = mat(&mut rng, scale, config.vocab, d);
        let positional = mat(&mut rng, scale, config.max_positions, d);
        let enc = (0..config.enc_layers)
            .map(|_| EncoderLayerParams {
                ln1: ln_init(d),
                attn: attn(&mut rng, scale, d),
                ln2: ln_init(d),
                ff: ff(&mut rng, scale, d, config.ff_dim()),
            })
            .collect();
        let dec = (0..config.dec_layers)
            .map(|_| DecoderLayerParams {
                ln1: ln_init(d),
                self_attn: attn(&mut rng, scale, d),
                ln2: ln_init(d),
                cross_attn: attn(&mut rng, scale, d),
                ln3: ln_init(d),
                ff: ff(&mut rng, scale, d, config.ff_dim()),
            })
            .collect();
        Ok(ToyModelParams {
            embedding,
            positional,
            enc,
            enc_ln_final: ln_init(d),
            dec,
            dec_ln_final: ln_init(d),
            config,
        })
    }

    /// Same-shape parameter set with every tensor zeroed; the container used
    /// for gradients and optimizer moments.
    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for (_, m) in out.named_tensors_mut() {
            m.data_mut().fill(0.0);
        }
        out
    }

    /// Stable (name, tensor) listing; the order defines checkpoint layout and
    /// optimizer slot assignment.
    pub fn named_tensors(&self) -> Vec<(String, &Mat)> {
        let mut out: Vec<(String, &Mat)> = Vec::new();
        out.push(("embedding".into(), &self.embedding));
        out.push(("positional".into(), &self.positional));
        for (i, l) in self.enc.iter().enumerate() {
            let p = format!("enc.{i}");
            push_ln(&mut out, &format!("{p}.ln1"), &l.ln1);
            push_attn(&mut out, &format!("{p}.attn"), &l.attn);
            push_ln(&mut out, &format!("{p}.ln2"), &l.ln2);
            push_ff(&mut out, &format!("{p}.ff"), &l.ff);
        }
        push_ln(&mut out, "enc_ln_final", &self.enc_ln_final);
        for (i, l) in self.dec.iter().enumerate() {
            let p = format!("dec.{i}");
            push_ln(&mut out, &format!("{p}.ln1"), &l.ln1);
            push_attn(&mut out, &format!("{p}.self_attn"), &l.self_attn);
            push_ln(&mut out, &format!("{p}.ln2"), &l.ln2);
            push_attn(&mut out, &format!("{p}.cross_attn"), &l.cross_attn);
            push_ln(&mut out, &format!("{p}.ln3"), &l.ln3);
            push_ff(&mut out, &format!("{p}.ff"), &l.ff);
        }
        push_ln(&mut out, "dec_ln_final", &self.dec_ln_final);
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Mat)> {
        let mut out: Vec<(String, &mut Mat)> = Vec::new();
        out.push(("embedding".into(), &mut self.embedding));
        out.push(("positional".into(), &mut self.positional));
        for (i, l) in self.enc.iter_mut().enumerate() {
            let p = format!("enc.{i}");
            push_ln_mut(&mut out, &format!("{p}.ln1"), &mut l.ln1);
            push_attn_mut(&mut out, &format!("{p}.attn"), &mut l.attn);
            push_ln_mut(&mut out, &format!("{p}.ln2"), &mut l.ln2);
            push_ff_mut(&mut out, &format!("{p}.ff"), &mut l.ff);
        }
        push_ln_mut(&mut out, "enc_ln_final", &mut self.enc_ln_final);
        for (i, l) in self.dec.iter_mut().enumerate() {
            let p = format!("dec.{i}");
            push_ln_mut(&mut out, &format!("{p}.ln1"), &mut l.ln1);
            push_attn_mut(&mut out, &format!("{p}.self_attn"), &mut l.self_attn);
            push_ln_mut(&mut out, &format!("{p}.ln2"), &mut l.ln2);
            push_attn_mut(&mut out, &format!("{p}.cross_attn"), &mut l.cross_attn);
            push_ln_mut(&mut out, &format!("{p}.ln3"), &mut l.ln3);
            push_ff_mut(&mut out, &format!("{p}.ff"), &mut l.ff);
        }
        push_ln_mut(&mut out, "dec_ln_final", &mut self.dec_ln_final);
        out
    }

    pub fn all_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, m)| m.all_finite())
    }
}

fn push_ln<'a>(out: &mut Vec<(String, &'a Mat)>, p: &str, ln: &'a LayerNormParams) {
    out.push((format!("{p}.gamma"), &ln.gamma));
    out.push((format!("{p}.beta"), &ln.beta));
}

fn push_attn<'a>(out: &mut Vec<(String, &'a Mat)>, p: &str, a: &'a AttentionParams) {
    out.push((format!("{p}.wq"), &a.wq));
    out.push((format!("{p}.bq"), &a.bq));
    out.push((format!("{p}.wk"), &a.wk));
    out.push((format!("{p}.bk"), &a.bk));
    out.push((format!("{p}.wv"), &a.wv));
    out.push((format!("{p}.bv"), &a.bv));
    out.push((format!("{p}.wo"), &a.wo));
    out.push((format!("{p}.bo"), &a.bo));
}

fn push_ff<'a>(out: &mut Vec<(String, &'a Mat)>, p: &str, f: &'a FeedForwardParams) {
    out.push((format!("{p}.w1"), &f.w1));
    out.push((format!("{p}.b1"), &f.b1));
    out.push((format!("{p}.w2"), &f.w2));
    out.push((format!("{p}.b2"), &f.b2));
}

fn push_ln_mut<'a>(out: &mut Vec<(String, &'a mut Mat)>, p: &str, ln: &'a mut LayerNormParams) {
    out.push((format!("{p}.gamma"), &mut ln.gamma));
    out.push((format!("{p}.beta"), &mut ln.beta));
}

fn push_attn_mut<'a>(out: &mut Vec<(String, &'a mut Mat)>, p: &str, a: &'a mut AttentionParams) {
    out.push((format!("{p}.wq"), &mut a.wq));
    out.push((format!("{p}.bq"), &mut a.bq));
    out.push((format!("{p}.wk"), &mut a.wk));
    out.push((format!("{p}.bk"), &mut a.bk));
    out.push((format!("{p}.wv"), &mut a.wv));
    out.push((format!("{p}.bv"), &mut a.bv));
    out.push((format!("{p}.wo"), &mut a.wo));
    out.push((format!("{p}.bo"), &mut a.bo));
}

fn push_ff_mut<'a>(out: &mut Vec<(String, &'a mut Mat)>, p: &str, f: &'a mut FeedForwardParams) {
    out.push((format!("{p}.w1"), &mut f.w1));
    out.push((format!("{p}.b1"), &mut f.b1));
    out.push((format!("{p}.w2"), &mut f.w2));
    out.push((format!("{p}.b2"), &mut f.b2));
}

// --- inference building blocks -------------------------------------------

pub(crate) fn linear(x: &Mat, w: &Mat, b: &Mat) -> Mat {
    let mut out = x.matmul(w);
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        for (a, v) in row.iter_mut().zip(b.row(0)) {
            *a += v;
        }
    }
    out
}

pub(crate) fn layer_norm_mat(x: &Mat, ln: &LayerNormParams) -> Mat {
    let d = x.cols();
    let mut out = Mat::zeros(x.rows(), d);
    for r in 0..x.rows() {
        let row = x.row(r);
        let (mean, rstd) = crate::tape::row_moments(row);
        let o = out.row_mut(r);
        for c in 0..d {
            o[c] = ln.gamma.at(0, c) * (row[c] - mean) * rstd + ln.beta.at(0, c);
        }
    }
    out
}

fn gelu_mat(x: &Mat) -> Mat {
    x.map(crate::tape::gelu_scalar)
}

pub(crate) fn ff_forward(x: &Mat, ff: &FeedForwardParams) -> Mat {
    let h = gelu_mat(&linear(x, &ff.w1, &ff.b1));
    linear(&h, &ff.w2, &ff.b2)
}

/// Multi-head attention of projected queries against projected keys/values.
/// `mask_offset = Some(o)` lets query row `i` see key rows `0..=o+i`;
/// `None` is unmasked (cross attention, encoder self-attention).
pub(crate) fn mha(
    q: &Mat,
    k: &Mat,
    v: &Mat,
    heads: usize,
    mask_offset: Option<usize>,
) -> Mat {
    let d = q.cols();
    let dh = d / heads;
    let scale = 1.0 / num::sqrt(dh as f64);
    let n = q.rows();
    let m = k.rows();
    let mut out = Mat::zeros(n, d);
    let mut scores = vec![0.0; m];
    for i in 0..n {
        let limit = match mask_offset {
            Some(o) => (o + i + 1).min(m),
            None => m,
        };
        for h in 0..heads {
            let cs = h * dh;
            let qrow = &q.row(i)[cs..cs + dh];
            for (j, s) in scores[..limit].iter_mut().enumerate() {
                let krow = &k.row(j)[cs..cs + dh];
                let mut acc = 0.0;
                for (a, b) in qrow.iter().zip(krow) {
                    acc += a * b;
                }
                *s = acc * scale;
            }
            let weights = softmax_row_prefix(&scores[..limit], limit);
            let orow = &mut out.row_mut(i)[cs..cs + dh];
            for (j, &w) in weights.iter().enumerate().take(limit) {
                let vrow = &v.row(j)[cs..cs + dh];
                for (a, b) in orow.iter_mut().zip(vrow) {
                    *a += w * b;
                }
            }
        }
    }
    out
}

/// Encoder output for one input.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenStates {
    pub states: Mat,
}

/// Stride-2 mean pool over frames; an odd tail frame passes through alone.
pub fn mean_pool_stride2(x: &Mat) -> Mat {
    let n = x.rows();
    let m = n.div_ceil(2);
    let mut out = Mat::zeros(m, x.cols());
    for g in 0..m {
        let lo = 2 * g;
        let hi = (lo + 2).min(n);
        let inv = 1.0 / (hi - lo) as f64;
        let o = out.row_mut(g);
        for r in lo..hi {
            for (a, b) in o.iter_mut().zip(x.row(r)) {
                *a += b * inv;
            }
        }
    }
    out
}

/// Runs the encoder: pool stem, positional add, pre-norm blocks, final norm.
///
/// # Errors
///
/// `invalid features` when any entry is non-finite; shape errors when the
/// feature width differs from the model width or the pooled length exceeds
/// the positional table.
pub fn encode(params: &ToyModelParams, features: &FeatureSequence) -> Result<HiddenStates> {
    let f = &features.frames;
    if f.rows() == 0 {
        return Err(invalid("invalid features: empty"));
    }
    if f.cols() != params.config.width {
        return Err(invalid(format!(
            "invalid features: width {} does not match model width {}",
            f.cols(),
            params.config.width
        )));
    }
    if !f.all_finite() {
        return Err(invalid("invalid features"));
    }
    let mut x = mean_pool_stride2(f);
    let m = x.rows();
    if m > params.config.max_positions {
        return Err(invalid(format!(
            "invalid features: {} pooled frames exceed max_positions {}",
            m, params.config.max_positions
        )));
    }
    for r in 0..m {
        let row = x.row_mut(r);
        for (a, b) in row.iter_mut().zip(params.positional.row(r)) {
            *a += b;
        }
    }
    for layer in &params.enc {
        let a_in = layer_norm_mat(&x, &layer.ln1);
        let q = linear(&a_in, &layer.attn.wq, &layer.attn.bq);
        let k = linear(&a_in, &layer.attn.wk, &layer.attn.bk);
        let v = linear(&a_in, &layer.attn.wv, &layer.attn.bv);
        let ctx = mha(&q, &k, &v, params.config.heads, None);
        x.add_assign(&linear(&ctx, &layer.attn.wo, &layer.attn.bo));
        let f_in = layer_norm_mat(&x, &layer.ln2);
        x.add_assign(&ff_forward(&f_in, &layer.ff));
    }
    Ok(HiddenStates { states: layer_norm_mat(&x, &params.enc_ln_final) })
}

/// Per-layer decoder states for every position fed so far; `layers[l]` is
/// an `[n, width]` matrix of post-block states.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderTrace {
    pub layers: Vec<Mat>,
}

impl DecoderTrace {
    pub fn positions(&self) -> usize {
        self.layers.first().map_or(0, Mat::rows)
    }
}

/// Incremental decoder with per-layer key/value caches.
pub struct DecoderSession<'a> {
    params: &'a ToyModelParams,
    cross_k: Vec<Mat>,
    cross_v: Vec<Mat>,
    self_k: Vec<Mat>,
    self_v: Vec<Mat>,
    trace: Vec<Mat>,
    len: usize,
}

impl<'a> DecoderSession<'a> {
    pub fn new(params: &'a ToyModelParams, h: &HiddenStates) -> Result<Self> {
        params.config.validate()?;
        if h.states.cols() != params.config.width {
            return Err(invalid("hidden state width does not match model width"));
        }
        if h.states.rows() == 0 {
            return Err(invalid("empty hidden states"));
        }
        if !h.states.all_finite() {
            return Err(invalid("non-finite hidden states"));
        }
        let d = params.config.width;
        let l = params.config.dec_layers;
        let mut cross_k = Vec::with_capacity(l);
        let mut cross_v = Vec::with_capacity(l);
        for layer in &params.dec {
            cross_k.push(linear(&h.states, &layer.cross_attn.wk, &layer.cross_attn.bk));
            cross_v.push(linear(&h.states, &layer.cross_attn.wv, &layer.cross_attn.bv));
        }
        Ok(DecoderSession {
            params,
            cross_k,
            cross_v,
            self_k: vec![Mat::zeros(0, d); l],
            self_v: vec![Mat::zeros(0, d); l],
            trace: vec![Mat::zeros(0, d); l],
            len: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn trace(&self) -> &[Mat] {
        &self.trace
    }

    pub fn take_trace(self) -> DecoderTrace {
        DecoderTrace { layers: self.trace }
    }

    fn check_tokens(&self, tokens: &[TokenId]) -> Result<()> {
        if tokens.is_empty() {
            return Err(invalid("empty token block"));
        }
        if self.len + tokens.len() > self.params.config.max_positions {
            return Err(invalid("prefix exceeds max_positions"));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= self.params.config.vocab) {
            return Err(invalid(format!("token {t} outside vocabulary")));
        }
        Ok(())
    }

    fn embed_block(&self, tokens: &[TokenId]) -> Mat {
        let d = self.params.config.width;
        let mut x = Mat::zeros(tokens.len(), d);
        for (r, &t) in tokens.iter().enumerate() {
            let e = self.params.embedding.row(t as usize);
            let p = self.params.positional.row(self.len + r);
            let o = x.row_mut(r);
            for c in 0..d {
                o[c] = e[c] + p[c];
            }
        }
        x
    }

    /// One decoder block over a block of new rows. Appends this block's
    /// keys/values to the layer cache, so later rows in the same block and
    /// all future blocks can attend to them.
    fn dec_block(&mut self, l: usize, mut x: Mat) -> Mat {
        let layer = &self.params.dec[l];
        let heads = self.params.config.heads;
        let q_in = layer_norm_mat(&x, &layer.ln1);
        let q = linear(&q_in, &layer.self_attn.wq, &layer.self_attn.bq);
        let k_new = linear(&q_in, &layer.self_attn.wk, &layer.self_attn.bk);
        let v_new = linear(&q_in, &layer.self_attn.wv, &layer.self_attn.bv);
        for r in 0..k_new.rows() {
            self.self_k[l].push_row(k_new.row(r));
            self.self_v[l].push_row(v_new.row(r));
        }
        let ctx = mha(&q, &self.self_k[l], &self.self_v[l], heads, Some(self.len));
        x.add_assign(&linear(&ctx, &layer.self_attn.wo, &layer.self_attn.bo));

        let c_in = layer_norm_mat(&x, &layer.ln2);
        let qc = linear(&c_in, &layer.cross_attn.wq, &layer.cross_attn.bq);
        let cctx = mha(&qc, &self.cross_k[l], &self.cross_v[l], heads, None);
        x.add_assign(&linear(&cctx, &layer.cross_attn.wo, &layer.cross_attn.bo));

        let f_in = layer_norm_mat(&x, &layer.ln3);
        x.add_assign(&ff_forward(&f_in, &layer.ff));
        x
    }

    /// Feeds a block of tokens and returns the logits at each new position.
    pub fn advance_logits(&mut self, tokens: &[TokenId]) -> Result<Mat> {
        self.check_tokens(tokens)?;
        let mut x = self.embed_block(tokens);
        for l in 0..self.params.config.dec_layers {
            x = self.dec_block(l, x);
            for r in 0..x.rows() {
                self.trace[l].push_row(x.row(r));
            }
        }
        self.len += tokens.len();
        let y = layer_norm_mat(&x, &self.params.dec_ln_final);
        Ok(y.matmul_tb(&self.params.embedding))
    }

    /// Feeds a block of tokens and returns next-token distributions.
    pub fn advance(&mut self, tokens: &[TokenId]) -> Result<Mat> {
        let logits = self.advance_logits(tokens)?;
        let mut probs = Mat::zeros(logits.rows(), logits.cols());
        for r in 0..logits.rows() {
            let sm = softmax_row_prefix(logits.row(r), logits.cols());
            probs.row_mut(r).copy_from_slice(&sm);
        }
        Ok(probs)
    }

    /// Feeds one token, ascending the decoder stack until top-1/top-2
    /// confidence at some layer at or above `floor` exceeds `alpha`.
    ///
    /// On an early exit at layer `l`, the layer-`l` state stands in for the
    /// skipped layers: their key/value cache entries are computed from it, so
    /// later positions can still attend everywhere. Returns the emitted
    /// distribution and the number of layers used.
    pub fn advance_with_exit(
        &mut self,
        token: TokenId,
        alpha: f64,
        floor: usize,
    ) -> Result<(Vec<f64>, usize)> {
        let tokens = [token];
        self.check_tokens(&tokens)?;
        let total = self.params.config.dec_layers;
        if floor < 1 || floor > total {
            return Err(invalid("exit floor outside layer range"));
        }
        let mut x = self.embed_block(&tokens);
        for l in 0..total {
            x = self.dec_block(l, x);
            self.trace[l].push_row(x.row(0));
            let layer_no = l + 1;
            if layer_no < total && layer_no >= floor {
                let probs = project_probs(self.params, x.row(0));
                if top_gap(&probs) > alpha {
                    for m in l + 1..total {
                        let layer = &self.params.dec[m];
                        let q_in = layer_norm_mat(&x, &layer.ln1);
                        let k = linear(&q_in, &layer.self_attn.wk, &layer.self_attn.bk);
                        let v = linear(&q_in, &layer.self_attn.wv, &layer.self_attn.bv);
                        self.self_k[m].push_row(k.row(0));
                        self.self_v[m].push_row(v.row(0));
                        self.trace[m].push_row(x.row(0));
                    }
                    self.len += 1;
                    return Ok((probs, layer_no));
                }
            }
        }
        self.len += 1;
        Ok((project_probs(self.params, x.row(0)), total))
    }

    /// Rolls the session back to a shorter prefix; used when speculative
    /// verification rejects candidates.
    pub fn truncate(&mut self, keep: usize) {
        assert!(keep <= self.len, "cannot truncate forward");
        for l in 0..self.params.config.dec_layers {
            self.self_k[l].truncate_rows(keep);
            self.self_v[l].truncate_rows(keep);
            self.trace[l].truncate_rows(keep);
        }
        self.len = keep;
    }
}

/// Final layer-norm plus shared output projection of one decoder state.
pub fn project_logits(params: &ToyModelParams, state: &[f64]) -> Vec<f64> {
    let x = Mat::from_vec(1, state.len(), state.to_vec());
    let y = layer_norm_mat(&x, &params.dec_ln_final);
    let logits = y.matmul_tb(&params.embedding);
    logits.data().to_vec()
}

pub fn project_probs(params: &ToyModelParams, state: &[f64]) -> Vec<f64> {
    let logits = project_logits(params, state);
    softmax_row_prefix(&logits, logits.len())
}

/// Difference between the two largest probabilities.
pub fn top_gap(probs: &[f64]) -> f64 {
    let mut best = f64::NEG_INFINITY;
    let mut second = f64::NEG_INFINITY;
    for &p in probs {
        if p > best {
            second = best;
            best = p;
        } else if p > second {
            second = p;
        }
    }
    if second.is_finite() {
        best - second
    } else {
        best
    }
}

/// Next-token distribution and full per-layer trace for a prefix, computed
/// from scratch. Cached decoding must agree with this bit-for-bit.
pub fn decode_step(
    params: &ToyModelParams,
    prefix: &[TokenId],
    h: &HiddenStates,
) -> Result<(Vec<f64>, DecoderTrace)> {
    let mut session = DecoderSession::new(params, h)?;
    let probs = session.advance(prefix)?;
    let last = probs.row(probs.rows() - 1).to_vec();
    Ok((last, session.take_trace()))
}

/// Distribution read off layer `layer` (1-based) of the decoder: final
/// layer-norm then the shared output matrix applied to that layer's state at
/// the last prefix position. At `layer = dec_layers` this equals
/// [`decode_step`]'s distribution exactly.
pub fn layer_logits(
    params: &ToyModelParams,
    prefix: &[TokenId],
    h: &HiddenStates,
    layer: usize,
) -> Result<Vec<f64>> {
    if layer < 1 || layer > params.config.dec_layers {
        return Err(invalid("layer outside decoder range"));
    }
    let mut session = DecoderSession::new(params, h)?;
    session.advance_logits(prefix)?;
    let states = &session.trace()[layer - 1];
    Ok(project_logits(params, states.row(states.rows() - 1)))
}

/// Teacher-forced pass: logits at every prefix position plus the full trace.
pub fn forced_forward(
    params: &ToyModelParams,
    h: &HiddenStates,
    prefix: &[TokenId],
) -> Result<(Mat, DecoderTrace)> {
    let mut session = DecoderSession::new(params, h)?;
    let logits = session.advance_logits(prefix)?;
    Ok((logits, session.take_trace()))
}

// --- student construction -------------------------------------------------

/// Maximally spaced 1-based source layers when shrinking `teacher_layers`
/// down to `student_layers`: `1 + round((j-1)(L-1)/(k-1))`.
///
/// # Errors
///
/// Needs `2 <= student_layers <= teacher_layers`.
pub fn copy_indices(teacher_layers: usize, student_layers: usize) -> Result<Vec<usize>> {
    if student_layers < 2 {
        return Err(invalid("layer selection needs at least two student layers"));
    }
    if student_layers > teacher_layers {
        return Err(invalid("student cannot have more layers than the teacher"));
    }
    let l = teacher_layers as f64;
    let k = student_layers as f64;
    Ok((1..=student_layers)
        .map(|j| 1 + num::round_to_usize((j as f64 - 1.0) * (l - 1.0) / (k - 1.0)))
        .collect())
}

/// Student layer `l` (1-based) is regressed onto teacher layer `phi(l)`:
/// `round(l * teacher_layers / student_layers)`.
pub fn layer_map_phi(student_layer: usize, teacher_layers: usize, student_layers: usize) -> usize {
    num::round_to_usize(student_layer as f64 * teacher_layers as f64 / student_layers as f64)
}

/// Builds a student by copying teacher weights: embedding and positional
/// tables verbatim, maximally spaced decoder layers, and the encoder either
/// verbatim (same depth) or maximally spaced.
///
/// # Errors
///
/// The student must match the teacher in width, heads, vocab, positions, and
/// downsample, and keep at least two decoder layers.
pub fn init_student(teacher: &ToyModelParams, student_config: &ModelConfig) -> Result<ToyModelParams> {
    student_config.validate()?;
    let t = &teacher.config;
    if student_config.width != t.width
        || student_config.heads != t.heads
        || student_config.vocab != t.vocab
        || student_config.max_positions != t.max_positions
        || student_config.downsample != t.downsample
    {
        return Err(invalid("student shape must match teacher except layer counts"));
    }
    let dec_idx = copy_indices(t.dec_layers, student_config.dec_layers)?;
    let enc: Vec<EncoderLayerParams> = if student_config.enc_layers == t.enc_layers {
        teacher.enc.clone()
    } else {
        copy_indices(t.enc_layers, student_config.enc_layers)?
            .iter()
            .map(|&i| teacher.enc[i - 1].clone())
            .collect()
    };
    Ok(ToyModelParams {
        config: student_config.clone(),
        embedding: teacher.embedding.clone(),
        positional: teacher.positional.clone(),
        enc,
        enc_ln_final: teacher.enc_ln_final.clone(),
        dec: dec_idx.iter().map(|&i| teacher.dec[i - 1].clone()).collect(),
        dec_ln_final: teacher.dec_ln_final.clone(),
    })
}
