//! Continuous DDPM-style Gaussian denoising chains over low-dimensional
//! vectors, with closed-form log-densities, state gradients, and an exact
//! tilted-Gaussian oracle for quadratic rewards.

mod meannet;

pub use meannet::{ForwardCache, MeanNet};

use crate::core::DiffusionSchedule;
use crate::error::{invalid, Error, Result};

/// Which argument `grad_logpdf` differentiates with respect to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradWrt {
    X,
    Mean,
}

/// Per-step affine data-prediction map: x_hat = scale * x_t + shift.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineMap {
    pub scale: f64,
    pub shift: Vec<f64>,
}

impl AffineMap {
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.shift).map(|(&xi, &s)| self.scale * xi + s).collect()
    }
}

/// Gaussian reference chain: an affine data predictor per step (so reference
/// kernels are exactly Gaussian) and a fixed per-step reverse-kernel variance.
#[derive(Debug, Clone)]
pub struct GaussianChain {
    dim: usize,
    schedule: DiffusionSchedule,
    ref_predictor: Vec<AffineMap>,
    step_variance: Vec<f64>,
}

impl GaussianChain {
    pub fn new(
        dim: usize,
        schedule: DiffusionSchedule,
        ref_predictor: Vec<AffineMap>,
        step_variance: Vec<f64>,
    ) -> Result<Self> {
        if !(1..=4).contains(&dim) {
            return Err(invalid("dim must be in 1..=4"));
        }
        let steps = schedule.steps();
        if ref_predictor.len() != steps || step_variance.len() != steps {
            return Err(invalid("predictor/variance length must equal T"));
        }
        for map in &ref_predictor {
            if map.shift.len() != dim {
                return Err(invalid("predictor shift has wrong dimension"));
            }
        }
        if let Some(&v) = step_variance.iter().find(|v| !(**v > 0.0)) {
            return Err(invalid(format!("step variance {v} must be positive")));
        }
        Ok(Self {
            dim,
            schedule,
            ref_predictor,
            step_variance,
        })
    }

    /// Chain whose reference predictor shrinks toward the origin and whose
    /// reverse variance is the DDPM posterior variance
    /// sigma_{t-1}^2 (1 - alpha_t^2 / alpha_{t-1}^2) / sigma_t^2.
    pub fn standard(dim: usize, schedule: DiffusionSchedule) -> Result<Self> {
        let steps = schedule.steps();
        let ref_predictor = (1..=steps)
            .map(|t| AffineMap {
                scale: schedule.alpha(t) / (schedule.alpha(t).powi(2) + schedule.sigma(t).powi(2)),
                shift: vec![0.0; dim],
            })
            .collect();
        let step_variance = (1..=steps)
            .map(|t| {
                let (a, a_prev) = (schedule.alpha(t), schedule.alpha(t - 1));
                let (s, s_prev) = (schedule.sigma(t), schedule.sigma(t - 1));
                let v = s_prev.powi(2) * (1.0 - (a / a_prev).powi(2)) / s.powi(2).max(1e-12);
                v.max(1e-4)
            })
            .collect();
        Self::new(dim, schedule, ref_predictor, step_variance)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn steps(&self) -> usize {
        self.schedule.steps()
    }

    pub fn schedule(&self) -> &DiffusionSchedule {
        &self.schedule
    }

    pub fn step_variance(&self, t: usize) -> f64 {
        self.step_variance[t - 1]
    }

    pub fn ref_predict(&self, t: usize, x_t: &[f64]) -> Vec<f64> {
        self.ref_predictor[t - 1].apply(x_t)
    }

    /// Mean of p_ref(x_{t-1} | x_t).
    pub fn ref_mean(&self, t: usize, x_t: &[f64]) -> Result<Vec<f64>> {
        posterior_mean(&self.schedule, t, x_t, &self.ref_predict(t, x_t))
    }

    /// Effective affine coefficients (w, u) of the reference transition mean:
    /// mean = w * x_t + u.
    pub fn ref_affine(&self, t: usize) -> (f64, Vec<f64>) {
        let (c1, c2) = posterior_coeffs(&self.schedule, t).expect("t >= 1");
        let map = &self.ref_predictor[t - 1];
        let w = c1 + c2 * map.scale;
        let u = map.shift.iter().map(|&s| c2 * s).collect();
        (w, u)
    }

    pub fn ref_logp(&self, t: usize, x_prev: &[f64], x_t: &[f64]) -> Result<f64> {
        gaussian_logpdf(x_prev, &self.ref_mean(t, x_t)?, self.step_variance(t))
    }
}

/// DDPM posterior-mean coefficients for step t:
/// c1 = alpha_t sigma_{t-1}^2 / (alpha_{t-1} sigma_t^2),
/// c2 = (alpha_{t-1}^2 - alpha_t^2) / (alpha_{t-1} sigma_t^2).
pub fn posterior_coeffs(schedule: &DiffusionSchedule, t: usize) -> Result<(f64, f64)> {
    if t == 0 || t > schedule.steps() {
        return Err(invalid(format!("posterior step t = {t} outside 1..=T")));
    }
    let (a, a_prev) = (schedule.alpha(t), schedule.alpha(t - 1));
    let (s, s_prev) = (schedule.sigma(t), schedule.sigma(t - 1));
    let c1 = a * s_prev.powi(2) / (a_prev * s.powi(2));
    let c2 = (a_prev.powi(2) - a.powi(2)) / (a_prev * s.powi(2));
    Ok((c1, c2))
}

/// Mean of the DDPM reverse kernel: c1 * x_t + c2 * x_hat.
pub fn posterior_mean(
    schedule: &DiffusionSchedule,
    t: usize,
    x_t: &[f64],
    x_hat: &[f64],
) -> Result<Vec<f64>> {
    let (c1, c2) = posterior_coeffs(schedule, t)?;
    if x_t.len() != x_hat.len() {
        return Err(Error::ShapeMismatch {
            expected: x_t.len(),
            got: x_hat.len(),
        });
    }
    Ok(x_t
        .iter()
        .zip(x_hat)
        .map(|(&xt, &xh)| c1 * xt + c2 * xh)
        .collect())
}

/// Isotropic Gaussian log-density:
/// -d/2 log(2 pi var) - ||x - mean||^2 / (2 var).
pub fn gaussian_logpdf(x: &[f64], mean: &[f64], var: f64) -> Result<f64> {
    if !(var > 0.0) {
        return Err(invalid(format!("variance {var} must be positive")));
    }
    if x.len() != mean.len() {
        return Err(Error::ShapeMismatch {
            expected: x.len(),
            got: mean.len(),
        });
    }
    let d = x.len() as f64;
    let sq: f64 = x.iter().zip(mean).map(|(&a, &b)| (a - b).powi(2)).sum();
    Ok(-0.5 * d * (std::f64::consts::TAU * var).ln() - sq / (2.0 * var))
}

/// Gradient of `gaussian_logpdf`: -(x - mean)/var w.r.t. x, +(x - mean)/var
/// w.r.t. the mean.
pub fn grad_logpdf(x: &[f64], mean: &[f64], var: f64, wrt: GradWrt) -> Vec<f64> {
    let sign = match wrt {
        GradWrt::X => -1.0,
        GradWrt::Mean => 1.0,
    };
    x.iter()
        .zip(mean)
        .map(|(&a, &b)| sign * (a - b) / var)
        .collect()
}

/// Quadratic reward r(x) = -lambda ||x - center||^2 / 2.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticReward {
    pub lambda: f64,
    pub center: Vec<f64>,
}

impl QuadraticReward {
    pub fn eval(&self, x: &[f64]) -> f64 {
        let sq: f64 = x
            .iter()
            .zip(&self.center)
            .map(|(&a, &c)| (a - c).powi(2))
            .sum();
        -0.5 * self.lambda * sq
    }

    pub fn grad(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.center)
            .map(|(&a, &c)| -self.lambda * (a - c))
            .collect()
    }
}

/// Exact tilt of N(m, v I) by exp(r(x)/beta) with quadratic r:
/// precision tau = 1/v + lambda/beta, mean = (m/v + lambda c / beta)/tau,
/// variance = 1/tau.
pub fn quadratic_tilt_closed_form(
    mean: &[f64],
    var: f64,
    reward: &QuadraticReward,
    beta: f64,
) -> Result<(Vec<f64>, f64)> {
    if !(var > 0.0 && beta > 0.0 && reward.lambda >= 0.0) {
        return Err(invalid("quadratic_tilt: need var > 0, beta > 0, lambda >= 0"));
    }
    let tau = 1.0 / var + reward.lambda / beta;
    let tilted_mean = mean
        .iter()
        .zip(&reward.center)
        .map(|(&m, &c)| (m / var + reward.lambda * c / beta) / tau)
        .collect();
    Ok((tilted_mean, 1.0 / tau))
}

/// Per-step Gaussian policy with affine mean w_t x + u_t and learnable
/// log-variance; the closed-form tilted target of an affine reference with a
/// quadratic reward stays inside this class.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineGaussianPolicy {
    dim: usize,
    /// Per step: (w, u, log_var).
    steps: Vec<(f64, Vec<f64>, f64)>,
}

impl AffineGaussianPolicy {
    /// Policy initialised to match the chain's reference kernels exactly.
    pub fn from_reference(chain: &GaussianChain) -> Self {
        let steps = (1..=chain.steps())
            .map(|t| {
                let (w, u) = chain.ref_affine(t);
                (w, u, chain.step_variance(t).ln())
            })
            .collect();
        Self {
            dim: chain.dim(),
            steps,
        }
    }

    /// Closed-form per-step tilted policy of the reference chain under a
    /// quadratic reward: the exact minimiser of the gradient-matching loss.
    pub fn tilted_closed_form(
        chain: &GaussianChain,
        reward: &QuadraticReward,
        beta: f64,
    ) -> Result<Self> {
        let steps = (1..=chain.steps())
            .map(|t| {
                let (w_ref, u_ref) = chain.ref_affine(t);
                let v = chain.step_variance(t);
                let tau = 1.0 / v + reward.lambda / beta;
                let w = w_ref / (v * tau);
                let u = u_ref
                    .iter()
                    .zip(&reward.center)
                    .map(|(&ur, &c)| (ur / v + reward.lambda * c / beta) / tau)
                    .collect();
                Ok((w, u, (1.0 / tau).ln()))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            dim: chain.dim(),
            steps,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_steps(&self) -> usize {
        self.steps.len()
    }

    pub fn mean(&self, t: usize, x_t: &[f64]) -> Vec<f64> {
        let (w, u, _) = &self.steps[t - 1];
        x_t.iter().zip(u).map(|(&x, &ui)| w * x + ui).collect()
    }

    pub fn mean_scale(&self, t: usize) -> f64 {
        self.steps[t - 1].0
    }

    pub fn var(&self, t: usize) -> f64 {
        self.steps[t - 1].2.exp()
    }

    pub fn logp(&self, t: usize, x_prev: &[f64], x_t: &[f64]) -> Result<f64> {
        gaussian_logpdf(x_prev, &self.mean(t, x_t), self.var(t))
    }

    /// Parameters flattened per step as (w, u_0..u_{d-1}, log_var).
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.steps.len() * (self.dim + 2));
        for (w, u, lv) in &self.steps {
            out.push(*w);
            out.extend_from_slice(u);
            out.push(*lv);
        }
        out
    }

    pub fn unflatten_into(&mut self, flat: &[f64]) -> Result<()> {
        let expected = self.steps.len() * (self.dim + 2);
        if flat.len() != expected {
            return Err(Error::ShapeMismatch {
                expected,
                got: flat.len(),
            });
        }
        for (i, (w, u, lv)) in self.steps.iter_mut().enumerate() {
            let base = i * (self.dim + 2);
            *w = flat[base];
            u.copy_from_slice(&flat[base + 1..base + 1 + self.dim]);
            *lv = flat[base + 1 + self.dim];
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core::make_linear_schedule;

    #[test]
    fn posterior_mean_at_t1_is_x_hat() {
        let schedule = make_linear_schedule(3, 0.3).unwrap();
        let x_t = vec![0.7, -0.2];
        let x_hat = vec![1.5, 0.4];
        let mean = posterior_mean(&schedule, 1, &x_t, &x_hat).unwrap();
        // alpha_0 = 1, sigma_0 = 0 force c1 = 0 and c2 = (1 - alpha_1^2)/sigma_1^2 = 1.
        for (m, h) in mean.iter().zip(&x_hat) {
            assert!((m - h).abs() < 1e-12);
        }
        assert!(posterior_mean(&schedule, 0, &x_t, &x_hat).is_err());
    }

    #[test]
    fn posterior_mean_zero_inputs() {
        let schedule = make_linear_schedule(3, 0.3).unwrap();
        let z = vec![0.0; 2];
        let mean = posterior_mean(&schedule, 2, &z, &z).unwrap();
        assert!(mean.iter().all(|&m| m == 0.0));
    }

    #[test]
    fn posterior_coeffs_match_independent_rederivation() {
        let schedule = make_linear_schedule(3, 0.4).unwrap();
        for t in 1..=3 {
            let (c1, c2) = posterior_coeffs(&schedule, t).unwrap();
            // Recompute from scratch with differently grouped arithmetic.
            let a = |t: usize| schedule.alpha(t);
            let s2 = |t: usize| 1.0 - a(t) * a(t);
            let c1_alt = (a(t) / a(t - 1)) * (s2(t - 1) / s2(t));
            let c2_alt = (a(t - 1) - a(t) * a(t) / a(t - 1)) / s2(t);
            assert!((c1 - c1_alt).abs() < 1e-12, "t={t}");
            assert!((c2 - c2_alt).abs() < 1e-12, "t={t}");
        }
    }

    #[test]
    fn logpdf_standard_normal_mode() {
        let v = gaussian_logpdf(&[0.0], &[0.0], 1.0).unwrap();
        assert!((v - (-0.5 * std::f64::consts::TAU.ln())).abs() < 1e-7);
        assert!((v - (-0.9189385)).abs() < 1e-6);
        let v2 = gaussian_logpdf(&[1.0, 0.0], &[0.0, 0.0], 1.0).unwrap();
        assert!((v2 - (-std::f64::consts::TAU.ln() - 0.5)).abs() < 1e-12);
        assert!(gaussian_logpdf(&[0.0], &[0.0], 0.0).is_err());
    }

    #[test]
    fn logpdf_integrates_to_one() {
        // Trapezoid quadrature over a wide 1-D grid.
        let (mean, var) = (0.3, 0.8);
        let (lo, hi, n) = (-12.0, 12.0, 200_000);
        let h = (hi - lo) / n as f64;
        let density =
            |x: f64| gaussian_logpdf(&[x], &[mean], var).unwrap().exp();
        let mut total = 0.5 * (density(lo) + density(hi));
        for i in 1..n {
            total += density(lo + i as f64 * h);
        }
        total *= h;
        assert!((total - 1.0).abs() < 1e-6, "integral = {total}");
    }

    #[test]
    fn grad_logpdf_signs_and_values() {
        assert!(grad_logpdf(&[1.0], &[1.0], 2.0, GradWrt::X)[0].abs() < 1e-15);
        let g = grad_logpdf(&[3.0], &[1.0], 4.0, GradWrt::X);
        assert!((g[0] + 0.5).abs() < 1e-15);
        let g = grad_logpdf(&[3.0], &[1.0], 4.0, GradWrt::Mean);
        assert!((g[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn grad_logpdf_matches_finite_differences() {
        let x = vec![0.4, -1.1];
        let mean = vec![-0.3, 0.2];
        let var = 0.7;
        let h = 1e-6;
        let gx = grad_logpdf(&x, &mean, var, GradWrt::X);
        let gm = grad_logpdf(&x, &mean, var, GradWrt::Mean);
        for j in 0..2 {
            let mut up = x.clone();
            let mut down = x.clone();
            up[j] += h;
            down[j] -= h;
            let fd = (gaussian_logpdf(&up, &mean, var).unwrap()
                - gaussian_logpdf(&down, &mean, var).unwrap())
                / (2.0 * h);
            assert!((gx[j] - fd).abs() < 1e-7);

            let mut up = mean.clone();
            let mut down = mean.clone();
            up[j] += h;
            down[j] -= h;
            let fd = (gaussian_logpdf(&x, &up, var).unwrap()
                - gaussian_logpdf(&x, &down, var).unwrap())
                / (2.0 * h);
            assert!((gm[j] - fd).abs() < 1e-7);
        }
    }

    #[test]
    fn quadratic_tilt_cases() {
        let reward = QuadraticReward {
            lambda: 0.0,
            center: vec![2.0],
        };
        let (m, v) = quadratic_tilt_closed_form(&[0.5], 1.3, &reward, 1.0).unwrap();
        assert!((m[0] - 0.5).abs() < 1e-15);
        assert!((v - 1.3).abs() < 1e-15);

        let reward = QuadraticReward {
            lambda: 1.0,
            center: vec![2.0],
        };
        let (m, v) = quadratic_tilt_closed_form(&[0.0], 1.0, &reward, 1.0).unwrap();
        assert!((m[0] - 1.0).abs() < 1e-15);
        assert!((v - 0.5).abs() < 1e-15);

        let reward = QuadraticReward {
            lambda: 1e6,
            center: vec![2.0],
        };
        let (m, _) = quadratic_tilt_closed_form(&[0.0], 1.0, &reward, 1.0).unwrap();
        assert!((m[0] - 2.0).abs() < 1e-5);
    }

    #[test]
    fn affine_policy_round_trips_and_matches_reference() {
        let schedule = make_linear_schedule(3, 0.3).unwrap();
        let chain = GaussianChain::standard(2, schedule).unwrap();
        let policy = AffineGaussianPolicy::from_reference(&chain);
        let x_t = vec![0.4, -0.9];
        for t in 1..=3 {
            let lp_ref = chain.ref_logp(t, &[0.1, 0.2], &x_t).unwrap();
            let lp_pol = policy.logp(t, &[0.1, 0.2], &x_t).unwrap();
            // The clamped t = 1 variance amplifies last-bit rounding in the
            // two mean computations by 1/var.
            assert!((lp_ref - lp_pol).abs() < 1e-9, "t={t}");
        }
        let flat = policy.flatten();
        let mut other = AffineGaussianPolicy::from_reference(&chain);
        other.unflatten_into(&flat).unwrap();
        assert_eq!(policy, other);
    }
}
