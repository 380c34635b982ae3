//! Command-line definitions. Every command is deterministic given its
//! inputs and seed flags; exit codes are 0 on success, 2 on validation
//! errors, 1 on runtime errors.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use distilkit_core::losses::TrainConfig;
use distilkit_core::signal::TaskKind;

use crate::config::{FileConfig, RunSettings};

#[derive(Parser, Debug)]
#[command(
    name = "distilkit",
    version,
    about = "Desk-scale distillation toolkit: pseudo-labelling, filtering, \
             training, decoding strategies, and evaluation over a toy \
             encoder-decoder"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic corpus manifest (optionally materializing
    /// feature files).
    GenManifest(GenManifestArgs),
    /// Write a randomly initialized model checkpoint.
    InitModel(InitModelArgs),
    /// Train a model on its manifest's ground-truth transcripts.
    Pretrain(PretrainArgs),
    /// Transcribe a corpus with a model and record pseudo-labels.
    PseudoLabel(PseudoLabelArgs),
    /// Drop pseudo-labelled samples whose label WER exceeds a threshold.
    Filter(FilterArgs),
    /// Distill a student from a teacher on pseudo-labelled data.
    Distill(DistillArgs),
    /// Evaluate a checkpoint on one or more manifests.
    Eval(EvalArgs),
    /// Benchmark speculative decoding against plain greedy decoding.
    SpecdecBench(SpecdecBenchArgs),
    /// Evaluate one model across an SNR grid of additive noise.
    NoiseSweep(NoiseSweepArgs),
    /// Run a multi-point experiment sweep (threshold, data scaling, or
    /// model size).
    Sweep(SweepArgs),
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskKindArg {
    Copy,
    Reverse,
    Mapped,
}

impl From<TaskKindArg> for TaskKind {
    fn from(k: TaskKindArg) -> TaskKind {
        match k {
            TaskKindArg::Copy => TaskKind::Copy,
            TaskKindArg::Reverse => TaskKind::Reverse,
            TaskKindArg::Mapped => TaskKind::Mapped,
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalMode {
    /// Decode each sample whole.
    Short,
    /// Chunked long-form transcription with overlap stitching.
    Long,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseKindArg {
    White,
    Babble,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepKind {
    /// WER-threshold grid: filter, distill, evaluate per lambda.
    Threshold,
    /// Nested training-set fractions: distill, evaluate per fraction.
    DataScaling,
    /// Student decoder depth grid: distill, evaluate per depth.
    ModelSize,
}

/// Training/loss/decode settings; flags override config-file values, which
/// override built-in defaults.
#[derive(Args, Debug, Clone, Default)]
pub struct SettingsFlags {
    /// Flat key=value settings file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Start from the published large-run hyperparameters instead of the
    /// desk-scale defaults.
    #[arg(long)]
    pub paper_fidelity: bool,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub warmup_steps: Option<usize>,
    #[arg(long)]
    pub peak_lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub max_grad_norm: Option<f64>,
    /// Freeze the encoder stack (plus the shared positional table).
    #[arg(long)]
    pub freeze_encoder: Option<bool>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub alpha_kl: Option<f64>,
    #[arg(long)]
    pub alpha_pl: Option<f64>,
    #[arg(long)]
    pub alpha_mse: Option<f64>,
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Decode cap in content tokens.
    #[arg(long)]
    pub max_len: Option<usize>,
}

impl SettingsFlags {
    /// Resolves defaults, then the config file, then explicit flags.
    pub fn resolve(&self) -> anyhow::Result<RunSettings> {
        self.resolve_from(RunSettings::default())
    }

    /// Like [`SettingsFlags::resolve`] but starting from command-specific
    /// base defaults (e.g. distill freezes the encoder unless told not to).
    pub fn resolve_from(&self, mut s: RunSettings) -> anyhow::Result<RunSettings> {
        if self.paper_fidelity {
            s.train = TrainConfig {
                freeze_encoder: s.train.freeze_encoder,
                seed: s.train.seed,
                ..TrainConfig::paper_fidelity()
            };
        }
        if let Some(path) = &self.config {
            s.apply_file(&FileConfig::load(path)?)?;
        }
        macro_rules! over {
            ($slot:expr, $flag:expr) => {
                if let Some(v) = $flag {
                    $slot = v;
                }
            };
        }
        over!(s.train.steps, self.steps);
        over!(s.train.batch_size, self.batch_size);
        over!(s.train.warmup_steps, self.warmup_steps);
        over!(s.train.peak_lr, self.peak_lr);
        over!(s.train.weight_decay, self.weight_decay);
        over!(s.train.max_grad_norm, self.max_grad_norm);
        over!(s.train.freeze_encoder, self.freeze_encoder);
        over!(s.train.seed, self.seed);
        over!(s.weights.alpha_kl, self.alpha_kl);
        over!(s.weights.alpha_pl, self.alpha_pl);
        over!(s.weights.alpha_mse, self.alpha_mse);
        over!(s.weights.temperature, self.temperature);
        over!(s.decode.max_len, self.max_len);
        Ok(s)
    }
}

#[derive(Args, Debug)]
pub struct GenManifestArgs {
    /// Output manifest path (JSON Lines).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub count: usize,
    #[arg(long, value_enum, default_value_t = TaskKindArg::Copy)]
    pub kind: TaskKindArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Transcript lengths are drawn uniformly from [min-len, max-len].
    #[arg(long, default_value_t = 3)]
    pub min_len: usize,
    #[arg(long, default_value_t = 8)]
    pub max_len: usize,
    /// Materialize feature files under this directory (relative to the
    /// manifest) instead of replayable task entries.
    #[arg(long)]
    pub features_dir: Option<PathBuf>,
    /// Feature jitter; requires --features-dir (task entries replay the
    /// default geometry).
    #[arg(long)]
    pub jitter: Option<f64>,
    /// Synthesis vocabulary; requires --features-dir.
    #[arg(long)]
    pub vocab: Option<usize>,
    /// Feature width; requires --features-dir.
    #[arg(long)]
    pub width: Option<usize>,
    /// Frames per second; requires --features-dir.
    #[arg(long)]
    pub frame_rate: Option<f64>,
}

#[derive(Args, Debug)]
pub struct InitModelArgs {
    /// Output checkpoint path.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 2)]
    pub enc_layers: usize,
    #[arg(long, default_value_t = 4)]
    pub dec_layers: usize,
    #[arg(long, default_value_t = 32)]
    pub width: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 64)]
    pub vocab: usize,
    #[arg(long, default_value_t = 128)]
    pub max_positions: usize,
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    /// Training manifest (ground-truth transcripts are the targets).
    #[arg(long)]
    pub manifest: PathBuf,
    /// Input checkpoint (from init-model or a previous run).
    #[arg(long)]
    pub model: PathBuf,
    /// Output checkpoint.
    #[arg(long)]
    pub out: PathBuf,
    /// Per-step loss CSV (columns step,lr,ce,pl,kl,mse,total,grad_norm).
    #[arg(long)]
    pub loss_log: Option<PathBuf>,
    #[command(flatten)]
    pub settings: SettingsFlags,
}

#[derive(Args, Debug)]
pub struct PseudoLabelArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Teacher checkpoint used to transcribe.
    #[arg(long)]
    pub model: PathBuf,
    /// Output manifest with pseudo_text/pl_wer/truncated added.
    #[arg(long)]
    pub out: PathBuf,
    /// Decode cap in content tokens.
    #[arg(long, default_value_t = 64)]
    pub max_len: usize,
    /// Worker threads for transcription.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Args, Debug)]
pub struct FilterArgs {
    /// Pseudo-labelled manifest.
    #[arg(long)]
    pub manifest: PathBuf,
    /// WER threshold in percent; samples with 100*pl_wer > lambda drop.
    #[arg(long)]
    pub lambda: f64,
    /// Output manifest holding the kept samples.
    #[arg(long)]
    pub out: PathBuf,
    /// Filter report CSV (a JSON mirror is written alongside).
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct DistillArgs {
    /// Pseudo-labelled training manifest (pseudo_text is the target).
    #[arg(long)]
    pub manifest: PathBuf,
    /// Teacher checkpoint.
    #[arg(long)]
    pub teacher: PathBuf,
    /// Output student checkpoint.
    #[arg(long)]
    pub out: PathBuf,
    /// Student decoder depth.
    #[arg(long, default_value_t = 2)]
    pub dec_layers: usize,
    /// Student encoder depth; defaults to the teacher's (full copy).
    #[arg(long)]
    pub enc_layers: Option<usize>,
    /// Per-step loss CSV.
    #[arg(long)]
    pub loss_log: Option<PathBuf>,
    /// Run summary JSON (config echo plus final losses).
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[command(flatten)]
    pub settings: SettingsFlags,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Checkpoint to evaluate.
    #[arg(long)]
    pub model: PathBuf,
    /// Manifest(s) without a distribution split.
    #[arg(long)]
    pub manifest: Vec<PathBuf>,
    /// In-distribution manifest(s).
    #[arg(long)]
    pub id_manifest: Vec<PathBuf>,
    /// Out-of-distribution manifest(s).
    #[arg(long)]
    pub ood_manifest: Vec<PathBuf>,
    #[arg(long, value_enum, default_value_t = EvalMode::Short)]
    pub mode: EvalMode,
    /// Long-form chunk length in seconds.
    #[arg(long, default_value_t = 15.0)]
    pub chunk_seconds: f64,
    /// Long-form overlap in seconds; defaults to a sixth of the chunk.
    #[arg(long)]
    pub overlap_seconds: Option<f64>,
    /// Decode cap in content tokens.
    #[arg(long, default_value_t = 64)]
    pub max_len: usize,
    /// Short-mode early exit: confidence threshold in (0, 1].
    #[arg(long)]
    pub early_exit_alpha: Option<f64>,
    /// Lowest decoder layer allowed to exit (1-based).
    #[arg(long, default_value_t = 1)]
    pub exit_floor: usize,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Report CSV path (JSON mirror alongside).
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Dump per-sample hypotheses as JSON Lines.
    #[arg(long)]
    pub dump_hyps: Option<PathBuf>,
    /// Earlier eval JSON to compute relative latency against.
    #[arg(long)]
    pub baseline_report: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SpecdecBenchArgs {
    /// Main (verified) model checkpoint.
    #[arg(long)]
    pub main: PathBuf,
    /// Assistant (drafting) model checkpoint.
    #[arg(long)]
    pub assistant: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Draft window per round.
    #[arg(long, default_value_t = 4)]
    pub gamma: usize,
    #[arg(long, value_delimiter = ',', default_value = "1,4,16")]
    pub batch_sizes: Vec<usize>,
    /// Timed repetitions per point (one extra warm-up is discarded).
    #[arg(long, default_value_t = 5)]
    pub reps: usize,
    #[arg(long, default_value_t = 64)]
    pub max_len: usize,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct NoiseSweepArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    /// SNR grid in dB; "inf" is the clean (no-noise) row.
    #[arg(long, value_delimiter = ',', default_value = "inf,40,30,20,10,0,-10")]
    pub snrs: Vec<String>,
    #[arg(long, value_enum, default_value_t = NoiseKindArg::White)]
    pub kind: NoiseKindArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 64)]
    pub max_len: usize,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[arg(long, value_enum)]
    pub kind: SweepKind,
    /// Pseudo-labelled training manifest.
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub teacher: PathBuf,
    /// Held-out manifest evaluated at every sweep point.
    #[arg(long)]
    pub eval_manifest: PathBuf,
    /// Threshold sweep grid (percent).
    #[arg(long, value_delimiter = ',', default_value = "100,80,40,20,15,10,5")]
    pub lambdas: Vec<f64>,
    /// Data-scaling sweep fractions; subsets are nested by construction.
    #[arg(long, value_delimiter = ',', default_value = "0.125,0.25,0.5,1")]
    pub fractions: Vec<f64>,
    /// Model-size sweep: student decoder depths (layer copying needs at
    /// least two layers per student).
    #[arg(long, value_delimiter = ',', default_value = "4,2")]
    pub dec_layer_grid: Vec<usize>,
    /// Student decoder depth for the threshold and data-scaling sweeps.
    #[arg(long, default_value_t = 2)]
    pub dec_layers: usize,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Sweep report CSV (JSON mirror alongside).
    #[arg(long)]
    pub report: PathBuf,
    #[command(flatten)]
    pub settings: SettingsFlags,
}
