//! Waveforms, SNR-controlled additive noise, and the synthetic feature tasks
//! the toy model trains on.
//!
//! A synthetic sample encodes a token stream as feature frames, two frames
//! per token, each frame being the token's fixed random embedding plus seeded
//! jitter. At zero jitter the transcript is recoverable by a hand-coded
//! nearest-embedding rule, which doubles as the deterministic reference
//! transcriber in the long-form tests.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, Result};
use crate::mat::Mat;
use crate::model::{TokenId, RESERVED_TOKENS};
use crate::num;
use crate::rng::{derive_seed, normal_vec, permutation, rng_from_seed, standard_normal};
use rand::Rng;

/// Frames produced per transcript token by the synthetic tasks; matches the
/// encoder stem's downsample factor so one pooled state covers one token.
pub const FRAMES_PER_TOKEN: usize = 2;

/// A mono waveform with its sample rate (the rate is IO metadata; the noise
/// math is rate-agnostic).
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

/// Model input: a `[frames, width]` matrix plus the frame rate used to
/// convert between seconds and frames.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub frames: Mat,
    pub frame_rate: f64,
}

impl FeatureSequence {
    pub fn num_frames(&self) -> usize {
        self.frames.rows()
    }

    pub fn width(&self) -> usize {
        self.frames.cols()
    }

    pub fn duration_seconds(&self) -> f64 {
        self.frames.rows() as f64 / self.frame_rate
    }

    /// Copy of the frame range `[from, to)`.
    pub fn slice_frames(&self, from: usize, to: usize) -> FeatureSequence {
        assert!(from < to && to <= self.frames.rows(), "bad frame range");
        let mut m = Mat::zeros(0, self.frames.cols());
        for r in from..to {
            m.push_row(self.frames.row(r));
        }
        FeatureSequence { frames: m, frame_rate: self.frame_rate }
    }
}

/// Mean of squares.
///
/// # Errors
///
/// Fails on an empty buffer.
pub fn power(samples: &[f64]) -> Result<f64> {
    if samples.is_empty() {
        return Err(invalid("power of empty signal"));
    }
    Ok(samples.iter().map(|x| x * x).sum::<f64>() / samples.len() as f64)
}

/// Where additive noise comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum NoiseSource {
    /// Seeded Gaussian noise.
    White { seed: u64 },
    /// Seeded multi-tone babble stand-in: a sum of sinusoids with random
    /// frequencies, phases, and amplitudes.
    Babble { seed: u64 },
    /// Caller-provided samples (e.g. read from a file), tiled to length.
    Buffer { samples: Vec<f64> },
}

impl NoiseSource {
    /// A deterministic noise realization of exactly `len` samples.
    pub fn realize(&self, len: usize) -> Result<Vec<f64>> {
        if len == 0 {
            return Err(invalid("zero-length noise request"));
        }
        match self {
            NoiseSource::White { seed } => {
                let mut rng = rng_from_seed(derive_seed(*seed, "white-noise"));
                Ok(normal_vec(&mut rng, len))
            }
            NoiseSource::Babble { seed } => {
                let mut rng = rng_from_seed(derive_seed(*seed, "babble-noise"));
                const TONES: usize = 8;
                let mut freqs = [0.0; TONES];
                let mut phases = [0.0; TONES];
                let mut amps = [0.0; TONES];
                for k in 0..TONES {
                    // Cycles per sample; 0.002..0.05 spans speech-band tones
                    // at typical rates.
                    freqs[k] = 0.002 + rng.gen::<f64>() * 0.048;
                    phases[k] = rng.gen::<f64>() * core::f64::consts::TAU;
                    amps[k] = 0.5 + rng.gen::<f64>() * 0.5;
                }
                Ok((0..len)
                    .map(|t| {
                        let mut s = 0.0;
                        for k in 0..TONES {
                            s += amps[k]
                                * num::sin(core::f64::consts::TAU * freqs[k] * t as f64 + phases[k]);
                        }
                        s
                    })
                    .collect())
            }
            NoiseSource::Buffer { samples } => {
                if samples.is_empty() {
                    return Err(invalid("empty noise buffer"));
                }
                Ok((0..len).map(|i| samples[i % samples.len()]).collect())
            }
        }
    }
}

/// Gain that scales a noise realization of power `p_noise` so that adding it
/// to a signal of power `p_signal` lands at `snr_db`.
pub fn snr_gain(p_signal: f64, p_noise: f64, snr_db: f64) -> f64 {
    num::sqrt(p_signal / (p_noise * num::powf(10.0, snr_db / 10.0)))
}

fn mix(signal: &[f64], source: &NoiseSource, snr_db: f64) -> Result<Vec<f64>> {
    if snr_db == f64::INFINITY {
        return Ok(signal.to_vec());
    }
    if !snr_db.is_finite() {
        return Err(invalid("snr must be finite or +inf"));
    }
    let p_signal = power(signal)?;
    if p_signal == 0.0 {
        return Err(invalid("undefined SNR for a silent signal"));
    }
    let noise = source.realize(signal.len())?;
    let p_noise = power(&noise)?;
    if p_noise == 0.0 {
        return Err(invalid("silent noise source"));
    }
    let g = snr_gain(p_signal, p_noise, snr_db);
    Ok(signal.iter().zip(&noise).map(|(s, n)| s + g * n).collect())
}

/// Adds noise at an exact SNR. `snr_db = +inf` is the no-noise sentinel and
/// returns the input bit-for-bit.
///
/// # Errors
///
/// Silent signals have no defined SNR; silent noise cannot be scaled.
pub fn add_noise(signal: &Waveform, source: &NoiseSource, snr_db: f64) -> Result<Waveform> {
    Ok(Waveform {
        samples: mix(&signal.samples, source, snr_db)?,
        sample_rate: signal.sample_rate,
    })
}

/// Same protocol applied to a feature matrix: the flattened frames are the
/// signal buffer, so the achieved SNR over all entries is exact.
pub fn add_noise_to_features(
    features: &FeatureSequence,
    source: &NoiseSource,
    snr_db: f64,
) -> Result<FeatureSequence> {
    let mixed = mix(features.frames.data(), source, snr_db)?;
    Ok(FeatureSequence {
        frames: Mat::from_vec(features.frames.rows(), features.frames.cols(), mixed),
        frame_rate: features.frame_rate,
    })
}

// --- synthetic tasks --------------------------------------------------------

/// What transcript a synthetic sample carries for its input token stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    /// Transcript equals the input tokens.
    Copy,
    /// Transcript is the input tokens reversed.
    Reverse,
    /// Transcript is a fixed seeded permutation applied tokenwise.
    Mapped,
}

impl TaskKind {
    pub fn parse(s: &str) -> Result<TaskKind> {
        match s {
            "copy" => Ok(TaskKind::Copy),
            "reverse" => Ok(TaskKind::Reverse),
            "mapped" => Ok(TaskKind::Mapped),
            other => Err(invalid(alloc::format!("unknown task kind '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            TaskKind::Copy => "copy",
            TaskKind::Reverse => "reverse",
            TaskKind::Mapped => "mapped",
        }
    }
}

/// Geometry and noise level of the synthetic feature encoding.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub vocab: usize,
    pub width: usize,
    pub jitter: f64,
    pub frame_rate: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec { vocab: 64, width: 32, jitter: 0.05, frame_rate: 2.0 }
    }
}

/// The fixed unit-scale embedding that encodes a token in feature space.
/// Depends only on (token, width), never on a model.
pub fn synth_embedding(token: TokenId, width: usize) -> Vec<f64> {
    let mut rng = rng_from_seed(derive_seed(u64::from(token), "synth-embedding"));
    normal_vec(&mut rng, width)
}

/// The content-token permutation behind [`TaskKind::Mapped`]; index `i` maps
/// content token `RESERVED_TOKENS + i`.
pub fn mapped_permutation(vocab: usize) -> Vec<TokenId> {
    let n = vocab - RESERVED_TOKENS as usize;
    let mut rng = rng_from_seed(derive_seed(0, "mapped-task-permutation"));
    permutation(&mut rng, n)
        .into_iter()
        .map(|i| RESERVED_TOKENS + i as TokenId)
        .collect()
}

/// Generates one synthetic sample: feature frames plus transcript tokens.
/// Deterministic in `(kind, seed, len, spec)`.
pub fn synth_task(
    kind: TaskKind,
    seed: u64,
    len: usize,
    spec: &SynthSpec,
) -> Result<(FeatureSequence, Vec<TokenId>)> {
    if len == 0 {
        return Err(invalid("synthetic task needs at least one token"));
    }
    if spec.vocab <= RESERVED_TOKENS as usize {
        return Err(invalid("vocab leaves no content tokens"));
    }
    if spec.width == 0 || spec.frame_rate <= 0.0 || spec.jitter < 0.0 {
        return Err(invalid("bad synth spec"));
    }
    let mut rng = rng_from_seed(derive_seed(seed, "synth-task"));
    let lo = RESERVED_TOKENS;
    let hi = spec.vocab as TokenId;
    let tokens: Vec<TokenId> = (0..len).map(|_| rng.gen_range(lo..hi)).collect();
    let transcript = match kind {
        TaskKind::Copy => tokens.clone(),
        TaskKind::Reverse => tokens.iter().rev().cloned().collect(),
        TaskKind::Mapped => {
            let perm = mapped_permutation(spec.vocab);
            tokens.iter().map(|&t| perm[(t - RESERVED_TOKENS) as usize]).collect()
        }
    };
    let mut frames = Mat::zeros(0, spec.width);
    let mut row = vec![0.0; spec.width];
    for &t in &tokens {
        let e = synth_embedding(t, spec.width);
        for _ in 0..FRAMES_PER_TOKEN {
            for (o, &base) in row.iter_mut().zip(&e) {
                *o = base + spec.jitter * standard_normal(&mut rng);
            }
            frames.push_row(&row);
        }
    }
    Ok((FeatureSequence { frames, frame_rate: spec.frame_rate }, transcript))
}

/// Hand-coded reference transcriber: averages each token's frames and picks
/// the nearest content-token embedding. Exact on zero-jitter copy tasks.
pub fn nearest_embedding_decode(features: &FeatureSequence, vocab: usize) -> Vec<TokenId> {
    let width = features.width();
    let table: Vec<Vec<f64>> = (RESERVED_TOKENS..vocab as TokenId)
        .map(|t| synth_embedding(t, width))
        .collect();
    let n = features.num_frames();
    let mut out = Vec::new();
    let mut pos = 0;
    while pos < n {
        let hi = (pos + FRAMES_PER_TOKEN).min(n);
        let inv = 1.0 / (hi - pos) as f64;
        let mut mean = vec![0.0; width];
        for r in pos..hi {
            for (m, &x) in mean.iter_mut().zip(features.frames.row(r)) {
                *m += x * inv;
            }
        }
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for (i, e) in table.iter().enumerate() {
            let mut d = 0.0;
            for (a, b) in mean.iter().zip(e) {
                let diff = a - b;
                d += diff * diff;
            }
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        out.push(RESERVED_TOKENS + best as TokenId);
        pos = hi;
    }
    out
}
