//! Wall-clock measurement: medians over repeated runs with a warm-up pass
//! discarded. Absolute numbers are hardware-specific; reports only claim
//! internal relative comparisons.

use std::time::Instant;

/// Median of a sample (mean of the middle two for even lengths).
pub fn median(xs: &[f64]) -> f64 {
    assert!(!xs.is_empty(), "median of an empty sample");
    let mut sorted = xs.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Runs `f` once as a discarded warm-up, then `reps` timed times; returns
/// the median wall seconds.
pub fn time_median<F>(reps: usize, mut f: F) -> anyhow::Result<f64>
where
    F: FnMut() -> anyhow::Result<()>,
{
    assert!(reps >= 1);
    f()?;
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = Instant::now();
        f()?;
        times.push(start.elapsed().as_secs_f64());
    }
    Ok(median(&times))
}
