//! Command implementations. Each submodule holds one verb (or a tightly
//! related pair); shared plumbing lives here.

pub mod eval;
pub mod gen;
pub mod label;
pub mod noise;
pub mod specdec;
pub mod sweep;
pub mod train;

use std::path::Path;

use anyhow::Context;

use distilkit_core::decode::DecodeConfig;
use distilkit_core::losses::StepStats;
use distilkit_core::model::ToyModelParams;

use crate::report::{num, Table};
use crate::validation;

pub(crate) fn load_model(path: &Path) -> anyhow::Result<ToyModelParams> {
    crate::checkpoint::read_checkpoint(path)
        .with_context(|| format!("loading checkpoint {}", path.display()))
}

pub(crate) fn decode_config(max_len: usize) -> DecodeConfig {
    DecodeConfig { max_len, ..DecodeConfig::default() }
}

/// A rayon pool with exactly `jobs` workers. Work is distributed by index
/// so results are order-stable regardless of the worker count.
pub(crate) fn make_pool(jobs: usize) -> anyhow::Result<rayon::ThreadPool> {
    if jobs == 0 {
        return Err(validation("--jobs must be at least 1"));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .context("building worker pool")
}

/// The pinned loss-log schema.
pub(crate) fn loss_log_table(log: &[StepStats]) -> Table {
    let mut t = Table::new(&["step", "lr", "ce", "pl", "kl", "mse", "total", "grad_norm"]);
    for s in log {
        t.push(vec![
            s.step.into(),
            num(s.lr),
            num(s.breakdown.ce),
            num(s.breakdown.pl),
            num(s.breakdown.kl),
            num(s.breakdown.mse),
            num(s.breakdown.total),
            num(s.grad_norm),
        ]);
    }
    t
}
