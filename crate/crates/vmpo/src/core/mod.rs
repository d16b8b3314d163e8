//! Shared domain types, the random-number contract, and schedule arithmetic.

mod math;
mod rng;
mod schedule;
mod types;

pub use math::{log_mean_exp, log_sum_exp, tv_distance};
pub use rng::RngStream;
pub use schedule::{make_linear_schedule, DiffusionSchedule};
pub use types::{
    ObjectiveKind, ObjectiveSpec, PotentialKind, PotentialSpec, RolloutBatch, Trajectory,
};

use crate::error::{invalid, Result};

/// Draw an index distributed according to `probs`.
///
/// Ties on cumulative-sum boundaries resolve toward the lower index:
/// an entry of exactly zero can never be drawn.
pub fn categorical_draw(probs: &[f64], rng: &mut RngStream) -> Result<usize> {
    if probs.is_empty() {
        return Err(invalid("categorical_draw: empty probability vector"));
    }
    let mut sum = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        if !(p >= 0.0) {
            return Err(invalid(format!(
                "categorical_draw: negative or NaN probability {p} at index {i}"
            )));
        }
        sum += p;
    }
    if (sum - 1.0).abs() > 1e-9 {
        return Err(invalid(format!(
            "categorical_draw: probabilities sum to {sum}, not 1"
        )));
    }
    let u = rng.next_f64() * sum;
    let mut cum = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        cum += p;
        if u < cum {
            return Ok(i);
        }
    }
    // Roundoff pushed u past the last boundary; return the last index with
    // nonzero mass.
    Ok(probs
        .iter()
        .rposition(|&p| p > 0.0)
        .expect("sum within tolerance of 1 implies some positive entry"))
}
