//! Importance weights, potentials, effective sample size and multinomial
//! resampling.
//!
//! Per-step weights used inside the training losses follow the absorbed
//! convention for return-to-go (the full terminal reward, with the 1/T share
//! folded into beta); trajectory-level weights and the potential-constraint
//! check use the canonical potentials whose product telescopes to
//! exp(r(x_0)/beta).

pub use crate::core::{PotentialKind, PotentialSpec};

use crate::core::{categorical_draw, log_sum_exp, RngStream, Trajectory};
use crate::error::{invalid, Result};

/// Normalised importance weights for one group of K particles.
#[derive(Debug, Clone)]
pub struct WeightSet {
    log_weights: Vec<f64>,
    normalised: Vec<f64>,
    log_normaliser: f64,
}

impl WeightSet {
    pub fn from_log_weights(log_weights: Vec<f64>) -> Result<Self> {
        if log_weights.is_empty() {
            return Err(invalid("weight set needs at least one particle"));
        }
        if log_weights.iter().any(|w| w.is_nan()) {
            return Err(invalid("NaN log weight"));
        }
        let log_normaliser = log_sum_exp(&log_weights);
        if !log_normaliser.is_finite() {
            return Err(invalid("all weights are zero"));
        }
        let normalised = log_weights
            .iter()
            .map(|&lw| (lw - log_normaliser).exp())
            .collect();
        Ok(Self {
            log_weights,
            normalised,
            log_normaliser,
        })
    }

    pub fn len(&self) -> usize {
        self.log_weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_weights.is_empty()
    }

    pub fn log_weights(&self) -> &[f64] {
        &self.log_weights
    }

    pub fn normalised(&self) -> &[f64] {
        &self.normalised
    }

    pub fn log_normaliser(&self) -> f64 {
        self.log_normaliser
    }
}

/// Log of the per-step importance weight used by the variance losses.
///
/// return_to_go: logp_ref - logp_policy + r_prev/beta, where r_prev carries
/// the terminal reward (absorbed convention). difference and forward_looking:
/// logp_ref - logp_policy + (r_prev - r_cur)/beta; for forward_looking the
/// caller passes shaped rewards.
pub fn step_log_weight(
    spec: &PotentialSpec,
    logp_ref: f64,
    logp_policy: f64,
    r_prev: f64,
    r_cur: f64,
) -> f64 {
    let log_ratio = logp_ref - logp_policy;
    match spec.kind {
        PotentialKind::ReturnToGo => log_ratio + r_prev / spec.beta,
        PotentialKind::Difference | PotentialKind::ForwardLooking => {
            log_ratio + (r_prev - r_cur) / spec.beta
        }
    }
}

/// Log of the trajectory importance weight: the sum over steps of the
/// canonical per-step weights. For the difference potential with r(x_T) = 0
/// this equals log p_ref(x_{0:T}) - log p_theta(x_{0:T}) + r(x_0)/beta.
pub fn trajectory_log_weight<S>(spec: &PotentialSpec, traj: &Trajectory<S>) -> f64 {
    let steps = traj.steps();
    let mut total = 0.0;
    for t in 1..=steps {
        let log_ratio = traj.logp_ref(t) - traj.logp_policy(t);
        let log_potential = match spec.kind {
            PotentialKind::ReturnToGo => traj.reward(0) / (steps as f64 * spec.beta),
            PotentialKind::Difference | PotentialKind::ForwardLooking => {
                (traj.reward(t - 1) - traj.reward(t)) / spec.beta
            }
        };
        total += log_ratio + log_potential;
    }
    total
}

/// Effective sample size (sum w)^2 / sum w^2 in [1, K].
pub fn ess(weights: &WeightSet) -> f64 {
    let sum_sq: f64 = weights.normalised().iter().map(|w| w * w).sum();
    1.0 / sum_sq
}

/// K categorical draws from the normalised weights (multinomial resampling,
/// the Cat(.) draw of SNIS).
pub fn snis_resample(weights: &WeightSet, rng: &mut RngStream) -> Result<Vec<usize>> {
    (0..weights.len())
        .map(|_| categorical_draw(weights.normalised(), rng))
        .collect()
}

/// Residual of the potential marginal constraint:
/// sum_t log U(x_{t:T}) - r(x_0)/beta.
///
/// `log_f` supplies per-timestep log F(x_t) values for the forward-looking
/// correction (ignored otherwise); by convention log F(x_T) = 0.
pub fn check_potential_constraint<S>(
    spec: &PotentialSpec,
    traj: &Trajectory<S>,
    log_f: Option<&[f64]>,
) -> Result<f64> {
    let steps = traj.steps();
    let mut total = 0.0;
    for t in 1..=steps {
        total += match spec.kind {
            PotentialKind::ReturnToGo => traj.reward(0) / (steps as f64 * spec.beta),
            PotentialKind::Difference => (traj.reward(t - 1) - traj.reward(t)) / spec.beta,
            PotentialKind::ForwardLooking => {
                let lf = log_f.ok_or_else(|| {
                    invalid("forward_looking constraint check needs per-step log F values")
                })?;
                if lf.len() != steps + 1 {
                    return Err(invalid("log F must have T + 1 entries"));
                }
                (traj.reward(t - 1) - traj.reward(t)) / spec.beta + lf[t - 1] - lf[t]
            }
        };
    }
    Ok(total - traj.reward(0) / spec.beta)
}
