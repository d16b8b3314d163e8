//! Seeded desk-scale fixtures shared by the trainer, the oracle harness and
//! the integration tests.

use crate::core::{make_linear_schedule, RngStream};
use crate::error::Result;
use crate::gaussian::{GaussianChain, QuadraticReward};
use crate::tabular::{TabularChain, TabularPolicy};

/// Random row-stochastic chain with rewards in roughly [-1, 1.5]. Rows get a
/// floor of 0.05 before normalisation so every transition stays reachable.
pub fn random_tabular_chain(num_states: usize, steps: usize, seed: u64) -> Result<TabularChain> {
    let mut rng = RngStream::new(seed, 0);
    let dist = |rng: &mut RngStream| {
        let raw: Vec<f64> = (0..num_states).map(|_| rng.next_f64() + 0.05).collect();
        let sum: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / sum).collect::<Vec<f64>>()
    };
    let kernels = (0..steps)
        .map(|_| (0..num_states).map(|_| dist(&mut rng)).collect())
        .collect();
    let prior = dist(&mut rng);
    let reward = (0..num_states).map(|_| 2.5 * rng.next_f64() - 1.0).collect();
    TabularChain::new(kernels, prior, reward)
}

/// Random softmax policy with logits in [-1, 1].
pub fn random_tabular_policy(num_states: usize, steps: usize, seed: u64) -> TabularPolicy {
    let mut rng = RngStream::new(seed, 1);
    let logits = (0..steps)
        .map(|_| {
            (0..num_states)
                .map(|_| (0..num_states).map(|_| 2.0 * rng.next_f64() - 1.0).collect())
                .collect()
        })
        .collect();
    TabularPolicy::new(logits)
}

/// The standard tabular training fixture: a fixed seeded 4-state, 3-step
/// chain used by the convergence criteria.
pub fn standard_tabular_chain() -> TabularChain {
    random_tabular_chain(4, 3, 7).expect("fixed fixture is valid")
}

/// Standard continuous chain: variance-preserving schedule with the DDPM
/// posterior variance and a shrink-to-origin reference predictor.
pub fn standard_gaussian_chain(dim: usize, steps: usize, alpha_min: f64) -> Result<GaussianChain> {
    GaussianChain::standard(dim, make_linear_schedule(steps, alpha_min)?)
}

/// Reward of the continuous toy: log-density of a shifted target mode
/// N(center, mode_var I). Returns the quadratic part and the additive
/// log-normaliser constant.
pub fn gaussian_mode_reward(dim: usize) -> (QuadraticReward, f64) {
    let mode_var = 0.25;
    let center: Vec<f64> = (0..dim)
        .map(|d| if d % 2 == 0 { 1.2 } else { -0.8 })
        .collect();
    let quad = QuadraticReward {
        lambda: 1.0 / mode_var,
        center,
    };
    let offset = -0.5 * dim as f64 * (std::f64::consts::TAU * mode_var).ln();
    (quad, offset)
}
