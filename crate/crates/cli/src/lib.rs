//! Command-line companion to `distilkit-core`: file formats (checkpoints,
//! feature files, manifests, WAV), report emission, and the experiment
//! commands.
//!
//! Everything here is std-side plumbing; the algorithms live in the core
//! crate. Commands are deterministic given their inputs and seed flags, and
//! every output file is written atomically (temp file + rename).

#![deny(unsafe_code)]

pub mod args;
pub mod bench;
mod binfile;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod featfile;
pub mod manifest;
pub mod report;
pub mod wav;

use std::fmt;

use distilkit_core::CoreError;

/// Marker for user-input problems (bad flags, malformed config or manifest);
/// distinguishes exit code 2 from runtime failures (exit code 1).
#[derive(Debug)]
pub struct ValidationError(pub String);

impl fmt::Display for ValidationError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for ValidationError {}

/// Builds a validation error (exit code 2).
pub fn validation(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(ValidationError(msg.into()))
}

/// Exit code for a failed run: 2 when the cause chain bottoms out in a
/// validation problem, 1 otherwise.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.downcast_ref::<ValidationError>().is_some() {
            return 2;
        }
        if let Some(CoreError::Invalid(_)) = cause.downcast_ref::<CoreError>() {
            return 2;
        }
    }
    1
}

/// Dispatches a parsed command line.
pub fn run(cli: args::Cli) -> anyhow::Result<()> {
    use args::Command::*;
    match cli.command {
        GenManifest(a) => commands::gen::gen_manifest(&a),
        InitModel(a) => commands::gen::init_model(&a),
        Pretrain(a) => commands::train::pretrain(&a),
        PseudoLabel(a) => commands::label::pseudo_label(&a),
        Filter(a) => commands::label::filter(&a),
        Distill(a) => commands::train::distill(&a),
        Eval(a) => commands::eval::eval(&a).map(|_| ()),
        SpecdecBench(a) => commands::specdec::specdec_bench(&a),
        NoiseSweep(a) => commands::noise::noise_sweep(&a),
        Sweep(a) => commands::sweep::sweep(&a),
    }
}
