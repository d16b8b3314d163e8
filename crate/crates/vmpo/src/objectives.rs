//! Alignment losses and advantages as pure functions from a rollout batch to
//! a scalar and parameter adjoints.
//!
//! Per-step signals are built from f(i, t) = log p_ref - log p_theta +
//! r(x_{t-1})/beta, the log of the step importance weight. Adjoints are
//! coefficients on the policy log-density outputs (or, for gradient
//! matching, on the flattened policy parameters); advantages and amortised
//! means are always treated as constants when differentiating, mirroring the
//! mutual stop-gradient of the joint update.

use crate::core::RolloutBatch;
use crate::error::{invalid, Error, Result};
use crate::gaussian::{grad_logpdf, AffineGaussianPolicy, GaussianChain, GradWrt};

/// How the per-(i, t) advantage values were centered.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineKind {
    GroupMean,
    Amortised,
    None,
}

/// K x T advantage values with their baseline provenance.
#[derive(Debug, Clone)]
pub struct AdvantageBatch {
    values: Vec<Vec<f64>>,
    baseline: BaselineKind,
}

impl AdvantageBatch {
    pub fn new(values: Vec<Vec<f64>>, baseline: BaselineKind) -> Result<Self> {
        if values.is_empty() || values[0].is_empty() {
            return Err(invalid("advantage batch must be K x T with K, T >= 1"));
        }
        let steps = values[0].len();
        if values.iter().any(|row| row.len() != steps) {
            return Err(invalid("ragged advantage batch"));
        }
        if baseline == BaselineKind::GroupMean {
            for t in 0..steps {
                let col: f64 = values.iter().map(|row| row[t]).sum();
                // Tolerance scales with the column magnitude so large
                // log-density values do not trip the check on roundoff alone.
                let scale: f64 = values
                    .iter()
                    .map(|row| row[t].abs())
                    .fold(1.0, f64::max);
                if col.abs() > 1e-9 * scale {
                    return Err(invalid(format!(
                        "group-mean advantages at t index {t} sum to {col}"
                    )));
                }
            }
        }
        Ok(Self { values, baseline })
    }

    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }

    pub fn baseline(&self) -> BaselineKind {
        self.baseline
    }
}

/// Per-timestep scalars M_phi(t), one per (t, condition) pair; the learnable
/// mean of the amortised variance loss.
#[derive(Debug, Clone)]
pub struct MeanEstimator {
    steps: usize,
    num_conditions: usize,
    values: Vec<f64>,
}

impl MeanEstimator {
    pub fn new(steps: usize, num_conditions: usize) -> Result<Self> {
        if steps == 0 || num_conditions == 0 {
            return Err(invalid("MeanEstimator needs steps >= 1, conditions >= 1"));
        }
        Ok(Self {
            steps,
            num_conditions,
            values: vec![0.0; steps * num_conditions],
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn num_conditions(&self) -> usize {
        self.num_conditions
    }

    pub fn num_params(&self) -> usize {
        self.values.len()
    }

    fn index(&self, t: usize, condition: u32) -> usize {
        (t - 1) * self.num_conditions + condition as usize
    }

    /// M_phi(t) for t in 1..=T.
    pub fn value(&self, t: usize, condition: Option<u32>) -> Result<f64> {
        let c = condition.unwrap_or(0);
        if t == 0 || t > self.steps || c as usize >= self.num_conditions {
            return Err(invalid(format!("MeanEstimator lookup (t={t}, c={c})")));
        }
        Ok(self.values[self.index(t, c)])
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.values.clone()
    }

    pub fn unflatten_into(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.values.len() {
            return Err(Error::ShapeMismatch {
                expected: self.values.len(),
                got: flat.len(),
            });
        }
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(invalid("MeanEstimator values must be finite"));
        }
        self.values.copy_from_slice(flat);
        Ok(())
    }
}

/// f(i, t) = log p_ref - log p_theta + r(x_{t-1})/beta for every transition
/// in the batch, K x T.
pub fn step_f_values<S>(batch: &RolloutBatch<S>, beta: f64) -> Result<Vec<Vec<f64>>> {
    if !(beta > 0.0) {
        return Err(invalid("beta must be positive"));
    }
    Ok(batch
        .trajectories()
        .iter()
        .map(|traj| {
            (1..=traj.steps())
                .map(|t| traj.logp_ref(t) - traj.logp_policy(t) + traj.reward(t - 1) / beta)
                .collect()
        })
        .collect())
}

fn column_means(values: &[Vec<f64>]) -> Vec<f64> {
    let k = values.len() as f64;
    let steps = values[0].len();
    (0..steps)
        .map(|t| values.iter().map(|row| row[t]).sum::<f64>() / k)
        .collect()
}

/// Group-mean-centered advantages A(i, t) = f(i, t) - mean_i f(i, t).
pub fn group_advantages<S>(batch: &RolloutBatch<S>, beta: f64) -> Result<AdvantageBatch> {
    let f = step_f_values(batch, beta)?;
    let means = column_means(&f);
    let values = f
        .into_iter()
        .map(|row| row.iter().zip(&means).map(|(v, m)| v - m).collect())
        .collect();
    AdvantageBatch::new(values, BaselineKind::GroupMean)
}

/// Monte-Carlo variance loss: sum over t of the Bessel-corrected group
/// variance of the step log-weights, halved.
pub fn vmpo_mc_loss<S>(batch: &RolloutBatch<S>, beta: f64) -> Result<f64> {
    let adv = group_advantages(batch, beta)?;
    let k = batch.group_size() as f64;
    let total: f64 = adv
        .values()
        .iter()
        .flat_map(|row| row.iter().map(|a| a * a))
        .sum();
    Ok(total / (2.0 * (k - 1.0)))
}

/// Adjoint coefficients -A(i, t)/(K - 1) on log p_theta(x_{t-1} | x_t); the
/// advantages carry no gradient.
pub fn vmpo_mc_grad<S>(batch: &RolloutBatch<S>, beta: f64) -> Result<Vec<Vec<f64>>> {
    let adv = group_advantages(batch, beta)?;
    let k = batch.group_size() as f64;
    Ok(adv
        .values()
        .iter()
        .map(|row| row.iter().map(|a| -a / (k - 1.0)).collect())
        .collect())
}

/// Scalar loss plus adjoints for the policy (on log-density outputs) and the
/// amortised mean (on its flattened parameters).
#[derive(Debug, Clone)]
pub struct AmortisedEval {
    pub loss: f64,
    pub theta_adjoints: Vec<Vec<f64>>,
    pub phi_grad: Vec<f64>,
}

/// Amortised variance loss: mean over (i, t) of
/// (f(i, t) - M_phi(t))^2, with each side of the residual treated as
/// constant for the other parameter set.
pub fn vmpo_amortised_loss<S>(
    batch: &RolloutBatch<S>,
    beta: f64,
    m: &MeanEstimator,
) -> Result<AmortisedEval> {
    let f = step_f_values(batch, beta)?;
    let k = batch.group_size();
    let steps = batch.steps();
    let scale = 1.0 / (k * steps) as f64;
    let mut loss = 0.0;
    let mut theta_adjoints = vec![vec![0.0; steps]; k];
    let mut phi_grad = vec![0.0; m.num_params()];
    for (i, traj) in batch.trajectories().iter().enumerate() {
        for t in 1..=steps {
            let residual = f[i][t - 1] - m.value(t, traj.condition())?;
            loss += scale * residual * residual;
            // d f / d logp_policy = -1; M is constant for theta.
            theta_adjoints[i][t - 1] = -2.0 * scale * residual;
            // d residual / d M(t) = -1; f is constant for phi.
            let c = traj.condition().unwrap_or(0) as usize;
            phi_grad[(t - 1) * m.num_conditions() + c] -= 2.0 * scale * residual;
        }
    }
    Ok(AmortisedEval {
        loss,
        theta_adjoints,
        phi_grad,
    })
}

/// Mean-only group advantage A^i = G^i - mean(G).
pub fn grpo_advantage(returns: &[f64]) -> Result<Vec<f64>> {
    if returns.len() < 2 {
        return Err(invalid("grpo_advantage needs K >= 2"));
    }
    let mean = returns.iter().sum::<f64>() / returns.len() as f64;
    Ok(returns.iter().map(|g| g - mean).collect())
}

/// min(rho A, clip(rho, 1 - eps, 1 + eps) A) and its derivative in rho;
/// the derivative is nonzero only when the unclipped branch is selected.
pub fn clipped_surrogate(rho: f64, advantage: f64, eps: f64) -> Result<(f64, f64)> {
    if !(0.0..1.0).contains(&eps) {
        return Err(invalid(format!("clip eps {eps} outside [0, 1)")));
    }
    let unclipped = rho * advantage;
    let clipped = rho.clamp(1.0 - eps, 1.0 + eps) * advantage;
    if unclipped <= clipped {
        Ok((unclipped, advantage))
    } else {
        Ok((clipped, 0.0))
    }
}

/// Clipped objective value with adjoints on the current-policy log-density
/// outputs.
#[derive(Debug, Clone)]
pub struct ClippedEval {
    pub objective: f64,
    pub theta_adjoints: Vec<Vec<f64>>,
}

/// Off-policy clipped surrogate on the group-centered step log-weights:
/// (1/(K-1)) sum_{i,t} min(rho A, clip(rho) A), to be maximised (the trainer
/// negates). rho = p_theta / p_old; A is evaluated at the current theta and
/// carries no gradient.
pub fn vmpo_clipped_objective<S>(
    batch: &RolloutBatch<S>,
    beta: f64,
    eps: f64,
) -> Result<ClippedEval> {
    let adv = group_advantages(batch, beta)?;
    let k = batch.group_size() as f64;
    let mut objective = 0.0;
    let mut theta_adjoints = vec![vec![0.0; batch.steps()]; batch.group_size()];
    for (i, traj) in batch.trajectories().iter().enumerate() {
        for t in 1..=batch.steps() {
            let rho = (traj.logp_policy(t) - traj.logp_old(t)).exp();
            let (value, d_rho) = clipped_surrogate(rho, adv.values()[i][t - 1], eps)?;
            objective += value / (k - 1.0);
            // Chain rule through rho = exp(logp - logp_old).
            theta_adjoints[i][t - 1] = d_rho * rho / (k - 1.0);
        }
    }
    Ok(ClippedEval {
        objective,
        theta_adjoints,
    })
}

/// Reward shaping that absorbs the reference KL: G' = G - beta log(pi/pi_ref).
pub fn kl_shaped_return(g: f64, logp_policy: f64, logp_ref: f64, beta: f64) -> f64 {
    g - beta * (logp_policy - logp_ref)
}

/// Detailed-balance loss value, policy adjoints and the raw per-step
/// residuals (for training a forward-looking correction externally).
#[derive(Debug, Clone)]
pub struct DetailedBalanceEval {
    pub loss: f64,
    pub theta_adjoints: Vec<Vec<f64>>,
    pub residuals: Vec<Vec<f64>>,
}

/// Mean squared per-step log-weight residual
/// rho(i, t) = (r(x_{t-1}) - r(x_t))/beta + log F(x_{t-1}) - log F(x_t)
///           + log p_ref - log p_theta,
/// with `log_f` an optional forward-looking correction (t, x_t) -> log F.
pub fn detailed_balance_loss<S>(
    batch: &RolloutBatch<S>,
    beta: f64,
    log_f: Option<&dyn Fn(usize, &S) -> f64>,
) -> Result<DetailedBalanceEval> {
    if !(beta > 0.0) {
        return Err(invalid("beta must be positive"));
    }
    let k = batch.group_size();
    let steps = batch.steps();
    let scale = 1.0 / (k * steps) as f64;
    let mut loss = 0.0;
    let mut theta_adjoints = vec![vec![0.0; steps]; k];
    let mut residuals = vec![vec![0.0; steps]; k];
    for (i, traj) in batch.trajectories().iter().enumerate() {
        for t in 1..=steps {
            let mut residual = (traj.reward(t - 1) - traj.reward(t)) / beta
                + traj.logp_ref(t)
                - traj.logp_policy(t);
            if let Some(f) = log_f {
                residual += f(t - 1, traj.state(t - 1)) - f(t, traj.state(t));
            }
            loss += scale * residual * residual;
            theta_adjoints[i][t - 1] = -2.0 * scale * residual;
            residuals[i][t - 1] = residual;
        }
    }
    Ok(DetailedBalanceEval {
        loss,
        theta_adjoints,
        residuals,
    })
}

/// Which argument the gradient-matching residual differentiates at.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradSide {
    Prev,
    Next,
    Both,
}

/// Gradient-matching loss value with the gradient over the flattened policy
/// parameters.
#[derive(Debug, Clone)]
pub struct GradMatchEval {
    pub loss: f64,
    pub param_grad: Vec<f64>,
}

/// Mean squared norm of grad r / beta + grad log p_ref - grad log p_theta,
/// differentiated at x_{t-1} (Prev), at x_t (Next), or summed over both.
/// Continuous chains only; the trainer maps tabular requests to an
/// unsupported-model error before reaching here.
pub fn grad_matching_loss(
    chain: &GaussianChain,
    reward_grad: &dyn Fn(&[f64]) -> Vec<f64>,
    policy: &AffineGaussianPolicy,
    batch: &RolloutBatch<Vec<f64>>,
    beta: f64,
    side: GradSide,
) -> Result<GradMatchEval> {
    if !(beta > 0.0) {
        return Err(invalid("beta must be positive"));
    }
    if policy.num_steps() != batch.steps() || chain.steps() != batch.steps() {
        return Err(invalid("chain/policy/batch step counts disagree"));
    }
    let dim = chain.dim();
    let k = batch.group_size();
    let steps = batch.steps();
    let scale = 1.0 / (k * steps) as f64;
    let stride = dim + 2; // per-step params (w, u_0..u_{d-1}, log_var)
    let mut loss = 0.0;
    let mut param_grad = vec![0.0; steps * stride];
    let mut accumulate_side = |side: GradSide| -> Result<()> {
        for traj in batch.trajectories() {
            for t in 1..=steps {
                let x_prev = traj.state(t - 1);
                let x_t = traj.state(t);
                if x_prev.len() != dim || x_t.len() != dim {
                    return Err(Error::ShapeMismatch {
                        expected: dim,
                        got: x_prev.len(),
                    });
                }
                let ref_mean = chain.ref_mean(t, x_t)?;
                let ref_var = chain.step_variance(t);
                let pol_mean = policy.mean(t, x_t);
                let pol_var = policy.var(t);
                let base = (t - 1) * stride;
                match side {
                    GradSide::Prev => {
                        let r_grad = reward_grad(x_prev);
                        let g_ref = grad_logpdf(x_prev, &ref_mean, ref_var, GradWrt::X);
                        let mut g_norm = 0.0;
                        let mut dot_e = 0.0;
                        let mut dot_xt = 0.0;
                        for d in 0..dim {
                            let e = x_prev[d] - pol_mean[d];
                            let g = r_grad[d] / beta + g_ref[d] + e / pol_var;
                            g_norm += g * g;
                            dot_e += g * e;
                            dot_xt += g * x_t[d];
                            param_grad[base + 1 + d] += 2.0 * scale * g * (-1.0 / pol_var);
                        }
                        loss += scale * g_norm;
                        param_grad[base] += 2.0 * scale * (-dot_xt / pol_var);
                        param_grad[base + 1 + dim] += 2.0 * scale * (-dot_e / pol_var);
                    }
                    GradSide::Next => {
                        let r_grad = reward_grad(x_t);
                        let (w_ref, _) = chain.ref_affine(t);
                        let w_pol = policy.mean_scale(t);
                        let mut g_norm = 0.0;
                        let mut dot_e = 0.0;
                        let mut dot_w = 0.0;
                        for d in 0..dim {
                            let e = x_prev[d] - pol_mean[d];
                            let g = r_grad[d] / beta
                                + w_ref * (x_prev[d] - ref_mean[d]) / ref_var
                                - w_pol * e / pol_var;
                            g_norm += g * g;
                            dot_e += g * e;
                            // d(-w e_d / v)/dw = (-e_d + w x_t,d) / v.
                            dot_w += g * (-e + w_pol * x_t[d]);
                            param_grad[base + 1 + d] += 2.0 * scale * g * (w_pol / pol_var);
                        }
                        loss += scale * g_norm;
                        param_grad[base] += 2.0 * scale * dot_w / pol_var;
                        param_grad[base + 1 + dim] += 2.0 * scale * (w_pol * dot_e / pol_var);
                    }
                    GradSide::Both => unreachable!("expanded below"),
                }
            }
        }
        Ok(())
    };
    match side {
        GradSide::Both => {
            accumulate_side(GradSide::Prev)?;
            accumulate_side(GradSide::Next)?;
        }
        s => accumulate_side(s)?,
    }
    Ok(GradMatchEval { loss, param_grad })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core::{make_linear_schedule, RngStream, Trajectory};
    use crate::gaussian::QuadraticReward;
    use crate::tabular::{exact_kl_grad, TabularChain, TabularPolicy};

    /// One-step trajectory with prescribed densities and terminal reward.
    fn traj1(logp_policy: f64, logp_old: f64, logp_ref: f64, r0: f64) -> Trajectory<usize> {
        Trajectory::new(
            vec![0, 0],
            vec![logp_policy],
            vec![logp_old],
            vec![logp_ref],
            vec![r0, 0.0],
            None,
        )
        .unwrap()
    }

    fn batch1(f: &[f64]) -> RolloutBatch<usize> {
        // f = logp_ref - logp_policy + r with logp_ref = 0, r = 0.
        RolloutBatch::new(f.iter().map(|&v| traj1(-v, -v, 0.0, 0.0)).collect()).unwrap()
    }

    #[test]
    fn mc_loss_worked_examples() {
        assert!((vmpo_mc_loss(&batch1(&[1.0, 0.0]), 1.0).unwrap() - 0.25).abs() < 1e-15);
        assert!(vmpo_mc_loss(&batch1(&[0.7, 0.7, 0.7]), 1.0).unwrap() < 1e-30);
        // Policy = ref and equal rewards.
        let b = RolloutBatch::new(vec![traj1(-0.3, -0.3, -0.3, 2.0); 2]).unwrap();
        assert_eq!(vmpo_mc_loss(&b, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn mc_loss_invariances() {
        let base = vec![
            traj1(-0.2, -0.2, -0.5, 1.0),
            traj1(-1.4, -1.4, -0.1, 0.3),
            traj1(-0.6, -0.6, -0.9, -0.7),
        ];
        let l0 = vmpo_mc_loss(&RolloutBatch::new(base.clone()).unwrap(), 0.7).unwrap();

        // Shared reward shift.
        let shifted: Vec<_> = base
            .iter()
            .map(|t| {
                traj1(
                    t.logp_policy(1),
                    t.logp_old(1),
                    t.logp_ref(1),
                    t.reward(0) + 5.0,
                )
            })
            .collect();
        let l1 = vmpo_mc_loss(&RolloutBatch::new(shifted).unwrap(), 0.7).unwrap();
        assert!((l0 - l1).abs() < 1e-12);

        // Shared positive density factor (constant log shift).
        let scaled: Vec<_> = base
            .iter()
            .map(|t| {
                traj1(
                    t.logp_policy(1) + 2.0,
                    t.logp_old(1) + 2.0,
                    t.logp_ref(1),
                    t.reward(0),
                )
            })
            .collect();
        let l2 = vmpo_mc_loss(&RolloutBatch::new(scaled).unwrap(), 0.7).unwrap();
        assert!((l0 - l2).abs() < 1e-12);
    }

    #[test]
    fn group_advantages_sum_to_zero_per_step() {
        let b = RolloutBatch::new(vec![
            traj1(-0.2, -0.2, -0.5, 1.0),
            traj1(-1.4, -1.4, -0.1, 0.3),
        ])
        .unwrap();
        let adv = group_advantages(&b, 1.0).unwrap();
        let sum: f64 = adv.values().iter().map(|r| r[0]).sum();
        assert!(sum.abs() < 1e-12);
        // Adjoints inherit the zero sum.
        let g = vmpo_mc_grad(&b, 1.0).unwrap();
        assert!((g[0][0] + g[1][0]).abs() < 1e-12);
    }

    #[test]
    fn mc_grad_zero_on_identical_group() {
        let g = vmpo_mc_grad(&batch1(&[0.4, 0.4]), 1.0).unwrap();
        assert!(g.iter().flatten().all(|&v| v == 0.0));
    }

    /// Expectation of the MC adjoints over all K-tuples of a single softmax
    /// row equals the exact KL-to-tilt gradient.
    #[test]
    fn expected_mc_grad_matches_exact_kl_grad() {
        let s = 3;
        let kernels = vec![vec![
            vec![0.5, 0.3, 0.2],
            vec![0.2, 0.2, 0.6],
            vec![0.7, 0.1, 0.2],
        ]];
        let chain = TabularChain::new(
            kernels,
            vec![1.0 / 3.0; 3],
            vec![0.4, -0.8, 1.1],
        )
        .unwrap();
        let logits = vec![vec![
            vec![0.3, -0.2, 0.5],
            vec![0.0, 0.0, 0.0],
            vec![-1.0, 0.4, 0.1],
        ]];
        let policy = TabularPolicy::new(logits);
        let beta = 0.9;

        for x_t in 0..s {
            for k in [2usize, 3] {
                let p = policy.kernel_row(1, x_t);
                let log_p = policy.log_kernel_row(1, x_t);
                let mut expected = vec![0.0; s];
                let mut tuple = vec![0usize; k];
                loop {
                    let prob: f64 = tuple.iter().map(|&x| p[x]).product();
                    let trajs: Vec<_> = tuple
                        .iter()
                        .map(|&x| {
                            traj1(
                                log_p[x],
                                log_p[x],
                                chain.ref_row(1, x_t)[x].ln(),
                                chain.reward()[x],
                            )
                        })
                        .collect();
                    let adj = vmpo_mc_grad(&RolloutBatch::new(trajs).unwrap(), beta).unwrap();
                    for (i, &x) in tuple.iter().enumerate() {
                        // d logp(x) / d logit_j = delta(x = j) - p_j.
                        for j in 0..s {
                            let d = if x == j { 1.0 } else { 0.0 };
                            expected[j] += prob * adj[i][0] * (d - p[j]);
                        }
                    }
                    // Odometer over S^K tuples.
                    let mut pos = 0;
                    loop {
                        tuple[pos] += 1;
                        if tuple[pos] < s {
                            break;
                        }
                        tuple[pos] = 0;
                        pos += 1;
                        if pos == k {
                            break;
                        }
                    }
                    if pos == k {
                        break;
                    }
                }
                let exact = exact_kl_grad(&chain, &policy, 1, x_t, beta).unwrap();
                for j in 0..s {
                    assert!(
                        (expected[j] - exact[j]).abs() < 1e-9,
                        "x_t={x_t} K={k} j={j}: {} vs {}",
                        expected[j],
                        exact[j]
                    );
                }
            }
        }
    }

    #[test]
    fn amortised_loss_zero_at_exact_mean() {
        let b = batch1(&[0.8, 0.8, 0.8]);
        let mut m = MeanEstimator::new(1, 1).unwrap();
        m.unflatten_into(&[0.8]).unwrap();
        let eval = vmpo_amortised_loss(&b, 1.0, &m).unwrap();
        assert_eq!(eval.loss, 0.0);
        assert!(eval.theta_adjoints.iter().flatten().all(|&v| v == 0.0));
        assert!(eval.phi_grad.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn amortised_phi_stationary_at_per_step_mean() {
        let b = batch1(&[1.0, 0.2, -0.4]);
        let mut m = MeanEstimator::new(1, 1).unwrap();
        let mean = (1.0 + 0.2 - 0.4) / 3.0;
        m.unflatten_into(&[mean]).unwrap();
        let eval = vmpo_amortised_loss(&b, 1.0, &m).unwrap();
        assert!(eval.phi_grad[0].abs() < 1e-12);

        // At the phi-optimum the two losses differ by the documented
        // normalisation constant 2(K - 1)/(K T).
        let mc = vmpo_mc_loss(&b, 1.0).unwrap();
        let factor = 2.0 * (3.0 - 1.0) / 3.0;
        assert!((eval.loss - mc * factor).abs() < 1e-12);
    }

    #[test]
    fn amortised_theta_adjoint_matches_finite_differences() {
        let trajs = vec![
            traj1(-0.2, -0.2, -0.5, 1.0),
            traj1(-1.4, -1.4, -0.1, 0.3),
        ];
        let mut m = MeanEstimator::new(1, 1).unwrap();
        m.unflatten_into(&[0.3]).unwrap();
        let beta = 0.8;
        let eval =
            vmpo_amortised_loss(&RolloutBatch::new(trajs.clone()).unwrap(), beta, &m).unwrap();
        let h = 1e-6;
        for i in 0..2 {
            let perturb = |delta: f64| {
                let ts: Vec<_> = trajs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| {
                        let d = if j == i { delta } else { 0.0 };
                        traj1(t.logp_policy(1) + d, t.logp_old(1), t.logp_ref(1), t.reward(0))
                    })
                    .collect();
                vmpo_amortised_loss(&RolloutBatch::new(ts).unwrap(), beta, &m)
                    .unwrap()
                    .loss
            };
            let fd = (perturb(h) - perturb(-h)) / (2.0 * h);
            assert!(
                (eval.theta_adjoints[i][0] - fd).abs() < 1e-6,
                "i={i}: {} vs {fd}",
                eval.theta_adjoints[i][0]
            );
        }
    }

    #[test]
    fn grpo_advantage_examples() {
        let a = grpo_advantage(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(a, vec![-1.0, 0.0, 1.0]);
        let a = grpo_advantage(&[0.4, 0.4, 0.4, 0.4]).unwrap();
        assert!(a.iter().all(|&v| v == 0.0));
        let a = grpo_advantage(&[0.3, -1.2, 2.7, 0.8]).unwrap();
        assert!(a.iter().sum::<f64>().abs() < 1e-12);
        assert!(grpo_advantage(&[1.0]).is_err());
    }

    #[test]
    fn clipped_surrogate_examples() {
        assert_eq!(clipped_surrogate(1.5, 2.0, 0.2).unwrap().0, 2.4);
        assert_eq!(clipped_surrogate(0.5, -1.0, 0.2).unwrap().0, -0.8);
        for eps in [0.0, 0.1, 0.3] {
            assert_eq!(clipped_surrogate(1.0, 0.7, eps).unwrap().0, 0.7);
        }
        assert!(clipped_surrogate(1.0, 1.0, 1.0).is_err());

        // Gradient only on the unclipped branch.
        assert_eq!(clipped_surrogate(1.5, 2.0, 0.2).unwrap().1, 0.0);
        assert_eq!(clipped_surrogate(1.1, 2.0, 0.2).unwrap().1, 2.0);
        assert_eq!(clipped_surrogate(0.5, -1.0, 0.2).unwrap().1, 0.0);
        assert_eq!(clipped_surrogate(1.5, -1.0, 0.2).unwrap().1, -1.0);
    }

    #[test]
    fn clipped_objective_on_policy_cases() {
        // theta = theta_old and a group-identical batch: zero objective.
        let b = batch1(&[0.6, 0.6]);
        let eval = vmpo_clipped_objective(&b, 1.0, 0.2).unwrap();
        assert_eq!(eval.objective, 0.0);
        assert!(eval.theta_adjoints.iter().flatten().all(|&v| v == 0.0));

        // At rho = 1 every term is A and the adjoint is A/(K-1), the
        // unclipped estimator's ascent direction.
        let b = batch1(&[1.0, 0.0]);
        for eps in [0.0, 0.2] {
            let eval = vmpo_clipped_objective(&b, 1.0, eps).unwrap();
            let mc = vmpo_mc_grad(&b, 1.0).unwrap();
            assert!(eval.objective.abs() < 1e-15); // centered A sums to 0
            for i in 0..2 {
                assert!((eval.theta_adjoints[i][0] + mc[i][0]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn kl_shaped_return_examples() {
        assert_eq!(kl_shaped_return(3.0, -0.4, -0.4, 2.0), 3.0);
        assert_eq!(kl_shaped_return(0.0, 0.5, -0.5, 2.0), -2.0);
        assert_eq!(kl_shaped_return(1.7, 9.0, -9.0, 0.0), 1.7);
    }

    #[test]
    fn detailed_balance_simple_cases() {
        // Policy = ref, zero rewards.
        let b = RolloutBatch::new(vec![traj1(-0.3, -0.3, -0.3, 0.0); 2]).unwrap();
        let eval = detailed_balance_loss(&b, 1.0, None).unwrap();
        assert_eq!(eval.loss, 0.0);

        // Single transition with residual rho gives loss rho^2.
        let b = RolloutBatch::new(vec![traj1(-0.3, -0.3, -0.3, 0.7); 2]).unwrap();
        let eval = detailed_balance_loss(&b, 2.0, None).unwrap();
        let rho: f64 = 0.7 / 2.0;
        assert!((eval.loss - rho * rho).abs() < 1e-15);
        assert!((eval.residuals[0][0] - rho).abs() < 1e-15);
        assert!((eval.theta_adjoints[0][0] + rho).abs() < 1e-15); // -2 rho / (K T) = -rho
    }

    #[test]
    fn detailed_balance_vanishes_at_soft_value_tilt() {
        use crate::core::categorical_draw;
        use crate::tabular::{exact_soft_value, exact_tilted_kernel_with_values};

        let mut rng = RngStream::new(21, 0);
        let mut dist = |n: usize| {
            let raw: Vec<f64> = (0..n).map(|_| rng.next_f64() + 0.05).collect();
            let sum: f64 = raw.iter().sum();
            raw.into_iter().map(|v| v / sum).collect::<Vec<_>>()
        };
        let kernels: Vec<Vec<Vec<f64>>> = (0..3)
            .map(|_| (0..4).map(|_| dist(4)).collect())
            .collect();
        let prior = dist(4);
        let chain = TabularChain::new(kernels, prior, vec![0.9, -0.3, 0.1, 1.4]).unwrap();
        let beta = 0.8;
        let values = exact_soft_value(&chain, beta).unwrap();
        let tilted: Vec<Vec<Vec<f64>>> = (1..=3)
            .map(|t| exact_tilted_kernel_with_values(&chain, t, &values[t - 1], beta).unwrap())
            .collect();
        let policy = TabularPolicy::from_kernels(&tilted);

        // Sample trajectories whose rewards carry the soft values.
        let mut rng = RngStream::new(5, 1);
        let mut trajs = Vec::new();
        for _ in 0..4 {
            let x3 = categorical_draw(chain.prior(), &mut rng).unwrap();
            let mut states_rev = vec![x3];
            let mut lp = Vec::new();
            let mut lr = Vec::new();
            let mut cur = x3;
            for t in (1..=3).rev() {
                let row = policy.kernel_row(t, cur);
                let next = categorical_draw(&row, &mut rng).unwrap();
                lp.push(row[next].ln());
                lr.push(chain.ref_row(t, cur)[next].ln());
                states_rev.push(next);
                cur = next;
            }
            lp.reverse();
            lr.reverse();
            // rewards[t] = V_t(x_t), the soft value at the state's own level.
            let rewards: Vec<f64> = (0..=3)
                .map(|t| values[t][states_rev[3 - t]])
                .collect();
            trajs.push(
                Trajectory::new(states_rev, lp.clone(), lp, lr, rewards, None).unwrap(),
            );
        }
        let eval =
            detailed_balance_loss(&RolloutBatch::new(trajs).unwrap(), beta, None).unwrap();
        assert!(eval.loss < 1e-18, "loss = {}", eval.loss);
    }

    fn gaussian_setup() -> (GaussianChain, QuadraticReward, RolloutBatch<Vec<f64>>) {
        use crate::gaussian::AffineMap;
        // Moderate step variances; the DDPM-standard chain's tiny t = 1
        // variance amplifies rounding beyond finite-difference resolution.
        let schedule = make_linear_schedule(3, 0.3).unwrap();
        let predictor = vec![
            AffineMap { scale: 0.9, shift: vec![0.1, -0.2] },
            AffineMap { scale: 0.7, shift: vec![0.0, 0.3] },
            AffineMap { scale: 0.8, shift: vec![-0.1, 0.1] },
        ];
        let chain =
            GaussianChain::new(2, schedule, predictor, vec![0.3, 0.5, 0.4]).unwrap();
        let reward = QuadraticReward {
            lambda: 0.8,
            center: vec![1.0, -0.5],
        };
        let mut rng = RngStream::new(11, 0);
        let trajs: Vec<Trajectory<Vec<f64>>> = (0..3)
            .map(|_| {
                let states: Vec<Vec<f64>> = (0..4)
                    .map(|_| (0..2).map(|_| rng.next_standard_normal()).collect())
                    .collect();
                Trajectory::new(
                    states,
                    vec![0.0; 3],
                    vec![0.0; 3],
                    vec![0.0; 3],
                    vec![0.0; 4],
                    None,
                )
                .unwrap()
            })
            .collect();
        (chain, reward, RolloutBatch::new(trajs).unwrap())
    }

    #[test]
    fn grad_matching_vanishes_at_closed_form_tilt() {
        let (chain, reward, batch) = gaussian_setup();
        let beta = 0.6;
        let policy = AffineGaussianPolicy::tilted_closed_form(&chain, &reward, beta).unwrap();
        let grad = |x: &[f64]| reward.grad(x);
        let eval =
            grad_matching_loss(&chain, &grad, &policy, &batch, beta, GradSide::Prev).unwrap();
        assert!(eval.loss < 1e-8, "loss = {}", eval.loss);

        // The next-side residual does not vanish at the per-step tilt.
        let eval =
            grad_matching_loss(&chain, &grad, &policy, &batch, beta, GradSide::Next).unwrap();
        assert!(eval.loss > 1e-6);
    }

    #[test]
    fn grad_matching_zero_for_reference_policy_and_flat_reward() {
        let (chain, _, batch) = gaussian_setup();
        let policy = AffineGaussianPolicy::from_reference(&chain);
        let grad = |_: &[f64]| vec![0.0, 0.0];
        for side in [GradSide::Prev, GradSide::Next, GradSide::Both] {
            let eval = grad_matching_loss(&chain, &grad, &policy, &batch, 1.0, side).unwrap();
            assert!(eval.loss < 1e-24);
            assert!(eval.param_grad.iter().all(|&g| g.abs() < 1e-12));
        }
    }

    #[test]
    fn grad_matching_invariant_to_reward_constant() {
        // The residual only sees grad r, so an additive constant in r cannot
        // change anything; asserted through the gradient interface.
        let (chain, reward, batch) = gaussian_setup();
        let policy = AffineGaussianPolicy::from_reference(&chain);
        let g1 = |x: &[f64]| reward.grad(x);
        let shifted = QuadraticReward {
            lambda: reward.lambda,
            center: reward.center.clone(),
        };
        let g2 = |x: &[f64]| shifted.grad(x);
        let e1 = grad_matching_loss(&chain, &g1, &policy, &batch, 0.6, GradSide::Both).unwrap();
        let e2 = grad_matching_loss(&chain, &g2, &policy, &batch, 0.6, GradSide::Both).unwrap();
        assert_eq!(e1.loss, e2.loss);
    }

    #[test]
    fn grad_matching_param_grad_matches_finite_differences() {
        let (chain, reward, batch) = gaussian_setup();
        let beta = 0.6;
        let grad = |x: &[f64]| reward.grad(x);
        for side in [GradSide::Prev, GradSide::Next, GradSide::Both] {
            let mut policy = AffineGaussianPolicy::from_reference(&chain);
            // Move off the stationary point.
            let mut flat = policy.flatten();
            for (i, v) in flat.iter_mut().enumerate() {
                *v += 0.05 * ((i % 5) as f64 - 2.0);
            }
            policy.unflatten_into(&flat).unwrap();
            let eval =
                grad_matching_loss(&chain, &grad, &policy, &batch, beta, side).unwrap();
            let h = 1e-6;
            for i in 0..flat.len() {
                let mut loss_at = |delta: f64| {
                    let mut f = flat.clone();
                    f[i] += delta;
                    policy.unflatten_into(&f).unwrap();
                    grad_matching_loss(&chain, &grad, &policy, &batch, beta, side)
                        .unwrap()
                        .loss
                };
                let fd = (loss_at(h) - loss_at(-h)) / (2.0 * h);
                policy.unflatten_into(&flat).unwrap();
                let scale = eval.param_grad[i].abs().max(1.0);
                assert!(
                    (eval.param_grad[i] - fd).abs() / scale < 1e-5,
                    "side {side:?} param {i}: {} vs {fd}",
                    eval.param_grad[i]
                );
            }
        }
    }

    #[test]
    fn advantage_batch_validates_group_mean_invariant() {
        assert!(AdvantageBatch::new(vec![vec![1.0], vec![-1.0]], BaselineKind::GroupMean).is_ok());
        assert!(
            AdvantageBatch::new(vec![vec![1.0], vec![-0.5]], BaselineKind::GroupMean).is_err()
        );
        assert!(AdvantageBatch::new(vec![vec![1.0], vec![-0.5]], BaselineKind::None).is_ok());
        assert!(AdvantageBatch::new(vec![vec![1.0], vec![1.0, 2.0]], BaselineKind::None).is_err());
    }

    #[test]
    fn mean_estimator_indexing_and_bounds() {
        let mut m = MeanEstimator::new(2, 3).unwrap();
        m.unflatten_into(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(m.value(1, Some(0)).unwrap(), 1.0);
        assert_eq!(m.value(1, Some(2)).unwrap(), 3.0);
        assert_eq!(m.value(2, Some(1)).unwrap(), 5.0);
        assert_eq!(m.value(2, None).unwrap(), 4.0);
        assert!(m.value(3, None).is_err());
        assert!(m.value(1, Some(3)).is_err());
        assert!(m.unflatten_into(&[1.0]).is_err());
        assert!(m.unflatten_into(&[f64::NAN; 6]).is_err());
    }
}
