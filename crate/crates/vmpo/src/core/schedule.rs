use crate::error::{invalid, Result};

/// Variance-preserving signal/noise schedule: `alpha[t]^2 + sigma[t]^2 = 1`
/// for t in 0..=T, with `alpha[0] = 1` (clean data) and `alpha` strictly
/// decreasing.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    alphas: Vec<f64>,
    sigmas: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn from_alphas(alphas: Vec<f64>) -> Result<Self> {
        if alphas.len() < 2 {
            return Err(invalid("schedule needs at least one step"));
        }
        if (alphas[0] - 1.0).abs() > 1e-12 {
            return Err(invalid("alpha_0 must be 1 (clean data at t = 0)"));
        }
        for w in alphas.windows(2) {
            if !(w[1] < w[0]) {
                return Err(invalid("alpha_t must be strictly decreasing"));
            }
        }
        if let Some(&a) = alphas.iter().find(|a| !(**a > 0.0 && **a <= 1.0)) {
            return Err(invalid(format!("alpha {a} outside (0, 1]")));
        }
        let sigmas = alphas.iter().map(|a| (1.0 - a * a).max(0.0).sqrt()).collect();
        Ok(Self { alphas, sigmas })
    }

    /// Number of denoising steps T.
    pub fn steps(&self) -> usize {
        self.alphas.len() - 1
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigmas[t]
    }
}

/// Schedule with `alpha` interpolated linearly from 1 at t = 0 down to
/// `alpha_min` at t = T, and `sigma` from the variance-preserving constraint.
pub fn make_linear_schedule(steps: usize, alpha_min: f64) -> Result<DiffusionSchedule> {
    if steps == 0 {
        return Err(invalid("make_linear_schedule: T must be >= 1"));
    }
    if !(alpha_min > 0.0 && alpha_min < 1.0) {
        return Err(invalid(format!(
            "make_linear_schedule: alpha_min {alpha_min} outside (0, 1)"
        )));
    }
    let alphas = (0..=steps)
        .map(|t| 1.0 + (alpha_min - 1.0) * t as f64 / steps as f64)
        .collect();
    DiffusionSchedule::from_alphas(alphas)
}
