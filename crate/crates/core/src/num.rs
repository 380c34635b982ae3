//! Float math shim: `std` intrinsics when available, `libm` otherwise.
//!
//! Every transcendental the crate uses goes through this module so the core
//! stays `no_std`-clean and results are identical across the two backends
//! (both lower to the same IEEE-754 operations on mainstream targets).

#[cfg(feature = "std")]
mod imp {
    pub fn exp(x: f64) -> f64 {
        x.exp()
    }
    pub fn ln(x: f64) -> f64 {
        x.ln()
    }
    pub fn sqrt(x: f64) -> f64 {
        x.sqrt()
    }
    pub fn tanh(x: f64) -> f64 {
        x.tanh()
    }
    pub fn powf(x: f64, y: f64) -> f64 {
        x.powf(y)
    }
    pub fn round(x: f64) -> f64 {
        x.round()
    }
    pub fn floor(x: f64) -> f64 {
        x.floor()
    }
    pub fn cos(x: f64) -> f64 {
        x.cos()
    }
    pub fn sin(x: f64) -> f64 {
        x.sin()
    }
    pub fn log10(x: f64) -> f64 {
        x.log10()
    }
    pub fn abs(x: f64) -> f64 {
        x.abs()
    }
}

#[cfg(not(feature = "std"))]
mod imp {
    pub fn exp(x: f64) -> f64 {
        libm::exp(x)
    }
    pub fn ln(x: f64) -> f64 {
        libm::log(x)
    }
    pub fn sqrt(x: f64) -> f64 {
        libm::sqrt(x)
    }
    pub fn tanh(x: f64) -> f64 {
        libm::tanh(x)
    }
    pub fn powf(x: f64, y: f64) -> f64 {
        libm::pow(x, y)
    }
    pub fn round(x: f64) -> f64 {
        libm::round(x)
    }
    pub fn floor(x: f64) -> f64 {
        libm::floor(x)
    }
    pub fn cos(x: f64) -> f64 {
        libm::cos(x)
    }
    pub fn sin(x: f64) -> f64 {
        libm::sin(x)
    }
    pub fn log10(x: f64) -> f64 {
        libm::log10(x)
    }
    pub fn abs(x: f64) -> f64 {
        libm::fabs(x)
    }
}

pub use imp::{abs, cos, exp, floor, ln, log10, powf, round, sin, sqrt, tanh};

/// Rounds to the nearest integer, halves away from zero, as a checked `usize`.
///
/// This is the single rounding convention used for layer selection, the
/// layer-alignment map, and subsample sizing.
pub fn round_to_usize(x: f64) -> usize {
    let r = round(x);
    if r < 0.0 {
        0
    } else {
        r as usize
    }
}
