//! Oracle harness: the paper-level identities as executable checks, using
//! exhaustive enumeration and closed forms only. Each check reports a
//! machine-readable line `check=<name> status=<pass|fail> max_err=<float>`.

use crate::core::{
    categorical_draw, PotentialKind, PotentialSpec, RngStream, RolloutBatch, Trajectory,
};
use crate::error::{invalid, Error, Result};
use crate::gaussian::{gaussian_logpdf, grad_logpdf, GradWrt};
use crate::objectives::{
    detailed_balance_loss, vmpo_amortised_loss, vmpo_mc_grad, vmpo_mc_loss, MeanEstimator,
};
use crate::smc::check_potential_constraint;
use crate::tabular::{
    enumerate_expected_grad_mc, exact_kl_grad, exact_soft_value, exact_tilted_kernel_with_values,
    TabularChain, TabularPolicy, ENUMERATION_LIMIT,
};
use crate::trainer::fixtures;

/// Result of one oracle check.
#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: String,
    pub pass: bool,
    pub max_err: f64,
}

impl std::fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "check={} status={} max_err={}",
            self.name,
            if self.pass { "pass" } else { "fail" },
            self.max_err
        )
    }
}

/// Enumerated expectation of the Monte-Carlo gradient estimator against the
/// exact KL-to-tilt gradient, per (t, x_t) row; returns the max |delta|.
pub fn check_prop1_gradient_identity(
    chain: &TabularChain,
    policy: &TabularPolicy,
    beta: f64,
    group_size: usize,
) -> Result<f64> {
    let mut max_err: f64 = 0.0;
    for t in 1..=chain.steps() {
        for x_t in 0..chain.num_states() {
            let enumerated = enumerate_expected_grad_mc(chain, policy, t, x_t, group_size, beta)?;
            let exact = exact_kl_grad(chain, policy, t, x_t, beta)?;
            for (e, g) in enumerated.iter().zip(&exact) {
                max_err = max_err.max((e - g).abs());
            }
        }
    }
    Ok(max_err)
}

/// Exact trajectory-level and per-step log-weight variances under the
/// current policy, by full trajectory enumeration.
#[derive(Debug, Clone, Copy)]
pub struct VarianceBound {
    pub lhs: f64,
    pub rhs: f64,
    /// rhs - lhs; the bound holds iff slack >= 0 (up to roundoff).
    pub slack: f64,
}

/// V(log w_{0:T}) <= T sum_t V(log w_t) with exact enumeration over all
/// S^(T+1) trajectories. `values` optionally replaces the per-level reward
/// table (e.g. soft values); level T defaults to zero.
pub fn check_variance_bound(
    chain: &TabularChain,
    policy: &TabularPolicy,
    spec: &PotentialSpec,
    values: Option<&[Vec<f64>]>,
) -> Result<VarianceBound> {
    let s = chain.num_states();
    let steps = chain.steps();
    let total_paths = (s as f64).powi(steps as i32 + 1);
    if total_paths > ENUMERATION_LIMIT as f64 {
        return Err(Error::SizeLimit(format!(
            "{total_paths} trajectories exceed the enumeration guard"
        )));
    }
    let default_values: Vec<Vec<f64>> = (0..=steps)
        .map(|t| {
            if t == steps {
                vec![0.0; s]
            } else {
                chain.reward().to_vec()
            }
        })
        .collect();
    let values = values.unwrap_or(&default_values);
    if values.len() != steps + 1 {
        return Err(invalid("values must have T + 1 levels"));
    }

    // path[i] holds x_{T-i}; accumulate first and second moments of each
    // per-step log weight and of their sum.
    let mut mean_step = vec![0.0; steps];
    let mut sq_step = vec![0.0; steps];
    let mut mean_total = 0.0;
    let mut sq_total = 0.0;
    let mut path = vec![0usize; steps + 1];
    loop {
        let mut prob = chain.prior()[path[0]];
        let mut step_weights = vec![0.0; steps];
        if prob > 0.0 {
            for i in 0..steps {
                let t = steps - i; // transition x_t -> x_{t-1}
                let x_t = path[i];
                let x_prev = path[i + 1];
                let p = policy.kernel_row(t, x_t)[x_prev];
                prob *= p;
                if prob == 0.0 {
                    break;
                }
                let log_ratio = chain.ref_row(t, x_t)[x_prev].max(1e-300).ln() - p.ln();
                let log_potential = match spec.kind {
                    PotentialKind::ReturnToGo => {
                        values[0][path[steps]] / (steps as f64 * spec.beta)
                    }
                    PotentialKind::Difference | PotentialKind::ForwardLooking => {
                        (values[t - 1][x_prev] - values[t][x_t]) / spec.beta
                    }
                };
                step_weights[t - 1] = log_ratio + log_potential;
            }
        }
        if prob > 0.0 {
            let total: f64 = step_weights.iter().sum();
            mean_total += prob * total;
            sq_total += prob * total * total;
            for (t, &w) in step_weights.iter().enumerate() {
                mean_step[t] += prob * w;
                sq_step[t] += prob * w * w;
            }
        }
        // Odometer over S^(T+1) paths.
        let mut pos = 0;
        loop {
            path[pos] += 1;
            if path[pos] < s {
                break;
            }
            path[pos] = 0;
            pos += 1;
            if pos == steps + 1 {
                break;
            }
        }
        if pos == steps + 1 {
            break;
        }
    }
    let lhs = sq_total - mean_total * mean_total;
    let per_step_var_sum: f64 = (0..steps)
        .map(|t| sq_step[t] - mean_step[t] * mean_step[t])
        .sum();
    let rhs = steps as f64 * per_step_var_sum;
    Ok(VarianceBound {
        lhs,
        rhs,
        slack: rhs - lhs,
    })
}

/// Central-difference check of an analytic gradient; returns the max
/// relative error over coordinates (relative to max(1, |analytic|)).
pub fn finite_diff_check(
    mut loss: impl FnMut(&[f64]) -> f64,
    params: &[f64],
    analytic: &[f64],
    step: f64,
) -> Result<f64> {
    if !(step > 0.0) {
        return Err(invalid("finite-difference step must be positive"));
    }
    if params.len() != analytic.len() {
        return Err(Error::ShapeMismatch {
            expected: params.len(),
            got: analytic.len(),
        });
    }
    let mut work = params.to_vec();
    let mut max_err: f64 = 0.0;
    for i in 0..work.len() {
        let orig = work[i];
        work[i] = orig + step;
        let up = loss(&work);
        work[i] = orig - step;
        let down = loss(&work);
        work[i] = orig;
        let fd = (up - down) / (2.0 * step);
        let scale = analytic[i].abs().max(1.0);
        max_err = max_err.max((analytic[i] - fd).abs() / scale);
    }
    Ok(max_err)
}

/// Both halves of the biased-loss / unbiased-gradient claim, by exhaustive
/// K-tuple enumeration per (t, x_t) row.
#[derive(Debug, Clone, Copy)]
pub struct BiasReport {
    /// Max |E[plug-in estimator] - L_Var| over rows; nonzero in general.
    pub loss_bias: f64,
    /// Max deviation of the Bessel-corrected estimator's expectation; ~0.
    pub bessel_bias: f64,
    /// Max |E[gradient estimator] - exact KL gradient| over rows; ~0.
    pub grad_gap: f64,
}

pub fn check_biased_loss_unbiased_grad(
    chain: &TabularChain,
    policy: &TabularPolicy,
    beta: f64,
    group_size: usize,
) -> Result<BiasReport> {
    if group_size < 2 {
        return Err(invalid("group size must be >= 2"));
    }
    let s = chain.num_states();
    if (s as f64).powi(group_size as i32) > ENUMERATION_LIMIT as f64 {
        return Err(Error::SizeLimit(format!(
            "{s}^{group_size} tuples exceed the enumeration guard"
        )));
    }
    let mut loss_bias: f64 = 0.0;
    let mut bessel_bias: f64 = 0.0;
    let mut grad_gap: f64 = 0.0;
    let kf = group_size as f64;
    for t in 1..=chain.steps() {
        for x_t in 0..s {
            let p = policy.kernel_row(t, x_t);
            let f: Vec<f64> = (0..s)
                .map(|j| {
                    chain.ref_row(t, x_t)[j].max(1e-300).ln() - p[j].max(1e-300).ln()
                        + chain.reward()[j] / beta
                })
                .collect();
            // Exact half-variance of f under the policy row.
            let mu: f64 = p.iter().zip(&f).map(|(&pi, &fi)| pi * fi).sum();
            let l_var: f64 = 0.5
                * p.iter()
                    .zip(&f)
                    .map(|(&pi, &fi)| pi * (fi - mu).powi(2))
                    .sum::<f64>();

            let mut e_plugin = 0.0;
            let mut e_bessel = 0.0;
            let mut tuple = vec![0usize; group_size];
            loop {
                let prob: f64 = tuple.iter().map(|&x| p[x]).product();
                if prob > 0.0 {
                    let fs: Vec<f64> = tuple.iter().map(|&x| f[x]).collect();
                    let fbar: f64 = fs.iter().sum::<f64>() / kf;
                    let dev: f64 = fs.iter().map(|v| (v - fbar).powi(2)).sum();
                    e_plugin += prob * dev / (2.0 * kf);
                    e_bessel += prob * dev / (2.0 * (kf - 1.0));
                }
                let mut pos = 0;
                loop {
                    tuple[pos] += 1;
                    if tuple[pos] < s {
                        break;
                    }
                    tuple[pos] = 0;
                    pos += 1;
                    if pos == group_size {
                        break;
                    }
                }
                if pos == group_size {
                    break;
                }
            }
            loss_bias = loss_bias.max((e_plugin - l_var).abs());
            bessel_bias = bessel_bias.max((e_bessel - l_var).abs());

            let enumerated = enumerate_expected_grad_mc(chain, policy, t, x_t, group_size, beta)?;
            let exact = exact_kl_grad(chain, policy, t, x_t, beta)?;
            for (e, g) in enumerated.iter().zip(&exact) {
                grad_gap = grad_gap.max((e - g).abs());
            }
        }
    }
    Ok(BiasReport {
        loss_bias,
        bessel_bias,
        grad_gap,
    })
}

/// Random trajectory with finite densities and rewards, r(x_T) = 0.
fn random_trajectory(steps: usize, rng: &mut RngStream) -> Trajectory<usize> {
    let logp = |rng: &mut RngStream| -3.0 * rng.next_f64() - 0.05;
    let logp_policy: Vec<f64> = (0..steps).map(|_| logp(rng)).collect();
    let logp_ref: Vec<f64> = (0..steps).map(|_| logp(rng)).collect();
    let mut rewards: Vec<f64> = (0..=steps).map(|_| 4.0 * rng.next_f64() - 2.0).collect();
    rewards[steps] = 0.0;
    Trajectory::new(
        vec![0; steps + 1],
        logp_policy.clone(),
        logp_policy,
        logp_ref,
        rewards,
        None,
    )
    .expect("lengths are consistent")
}

fn outcome(name: &str, max_err: f64, tol: f64) -> CheckOutcome {
    CheckOutcome {
        name: name.to_string(),
        pass: max_err < tol,
        max_err,
    }
}

/// Finite-difference verification of the continuous-chain analytic
/// gradients; returns the max relative error (tolerance 1e-5).
pub fn finite_diff_gaussian_max_err(seed: u64) -> Result<f64> {
    let mut max_err: f64 = 0.0;
    let mut rng = RngStream::new(seed, 3);

    // Log-density gradients with respect to x and to the mean.
    let x: Vec<f64> = (0..2).map(|_| rng.next_standard_normal()).collect();
    let mean: Vec<f64> = (0..2).map(|_| rng.next_standard_normal()).collect();
    let var = 0.7;
    let gx = grad_logpdf(&x, &mean, var, GradWrt::X);
    let err = finite_diff_check(
        |p| gaussian_logpdf(p, &mean, var).unwrap(),
        &x,
        &gx,
        1e-5,
    )?;
    max_err = max_err.max(err);
    let gm = grad_logpdf(&x, &mean, var, GradWrt::Mean);
    let err = finite_diff_check(
        |p| gaussian_logpdf(&x, p, var).unwrap(),
        &mean,
        &gm,
        1e-5,
    )?;
    max_err = max_err.max(err);

    // MeanNet reverse mode on every parameter.
    let mut net = crate::gaussian::MeanNet::new(2, 4, 1, 3, &mut rng)?;
    let input: Vec<f64> = (0..2).map(|_| rng.next_standard_normal()).collect();
    let adjoint = vec![0.8, -0.3];
    let cache = net.forward(&input, 2, 0)?;
    let analytic = net.backward(&cache, &adjoint)?;
    let params = net.flatten();
    let err = finite_diff_check(
        |p| {
            net.unflatten_into(p).unwrap();
            let out = net.forward(&input, 2, 0).unwrap().output;
            out.iter().zip(&adjoint).map(|(o, a)| o * a).sum()
        },
        &params,
        &analytic,
        1e-5,
    )?;
    max_err = max_err.max(err);
    Ok(max_err)
}

/// Finite-difference verification of the objective adjoints through the
/// softmax parameterisation on tabular paths (tolerance 1e-6).
pub fn finite_diff_objectives_max_err(seed: u64) -> Result<f64> {
    let steps = 2;
    let s = 3;
    let k = 3;
    let beta = 0.8;
    let chain = fixtures::random_tabular_chain(s, steps, seed)?;
    let mut policy = fixtures::random_tabular_policy(s, steps, seed + 1);
    let mut rng = RngStream::new(seed, 9);

    // Fixed transitions; only the densities move with the parameters.
    let mut trajs_states: Vec<Vec<usize>> = Vec::new();
    for _ in 0..k {
        let mut cur = categorical_draw(chain.prior(), &mut rng)?;
        let mut states = vec![cur];
        for t in (1..=steps).rev() {
            let next = categorical_draw(&policy.kernel_row(t, cur), &mut rng)?;
            states.push(next);
            cur = next;
        }
        trajs_states.push(states);
    }
    let build_batch = |policy: &TabularPolicy| -> RolloutBatch<usize> {
        let trajs = trajs_states
            .iter()
            .map(|states| {
                let mut logp_policy = Vec::new();
                let mut logp_ref = Vec::new();
                for (i, t) in (1..=steps).rev().enumerate() {
                    let (x_t, x_prev) = (states[i], states[i + 1]);
                    logp_policy.push(policy.log_kernel_row(t, x_t)[x_prev]);
                    logp_ref.push(chain.ref_row(t, x_t)[x_prev].ln());
                }
                logp_policy.reverse();
                logp_ref.reverse();
                let mut rewards: Vec<f64> = (0..=steps)
                    .map(|t| chain.reward()[states[steps - t]])
                    .collect();
                rewards[steps] = 0.0;
                Trajectory::new(
                    states.clone(),
                    logp_policy.clone(),
                    logp_policy,
                    logp_ref,
                    rewards,
                    None,
                )
                .expect("consistent")
            })
            .collect();
        RolloutBatch::new(trajs).expect("K >= 2")
    };

    // Map per-transition adjoints into the flat logits gradient.
    let to_logits_grad = |policy: &TabularPolicy, adjoints: &[Vec<f64>]| -> Vec<f64> {
        let mut grad = vec![0.0; steps * s * s];
        for (states, row) in trajs_states.iter().zip(adjoints) {
            for (i, t) in (1..=steps).rev().enumerate() {
                let (x_t, x_prev) = (states[i], states[i + 1]);
                let p = policy.kernel_row(t, x_t);
                let base = ((t - 1) * s + x_t) * s;
                for j in 0..s {
                    let ind = if j == x_prev { 1.0 } else { 0.0 };
                    grad[base + j] += row[t - 1] * (ind - p[j]);
                }
            }
        }
        grad
    };

    let mut m = MeanEstimator::new(steps, 1)?;
    m.unflatten_into(&[0.4, -0.2])?;

    let mut max_err: f64 = 0.0;
    let params = policy.flatten();
    for which in 0..3 {
        let batch = build_batch(&policy);
        let (adjoints, _loss): (Vec<Vec<f64>>, f64) = match which {
            0 => {
                // The MC loss: centered deviations make the stop-gradient
                // adjoint equal the true derivative.
                (vmpo_mc_grad(&batch, beta)?, vmpo_mc_loss(&batch, beta)?)
            }
            1 => {
                let e = vmpo_amortised_loss(&batch, beta, &m)?;
                (e.theta_adjoints, e.loss)
            }
            _ => {
                let e = detailed_balance_loss(&batch, beta, None)?;
                (e.theta_adjoints, e.loss)
            }
        };
        let analytic = to_logits_grad(&policy, &adjoints);
        let err = finite_diff_check(
            |p| {
                policy.unflatten_into(p).unwrap();
                let batch = build_batch(&policy);
                match which {
                    0 => vmpo_mc_loss(&batch, beta).unwrap(),
                    1 => vmpo_amortised_loss(&batch, beta, &m).unwrap().loss,
                    _ => detailed_balance_loss(&batch, beta, None).unwrap().loss,
                }
            },
            &params,
            &analytic,
            1e-5,
        )?;
        policy.unflatten_into(&params)?;
        max_err = max_err.max(err);
    }
    Ok(max_err)
}

/// Run the whole oracle suite on seeded fixtures. `num_states`/`steps`
/// bound the enumerations; `beta` is the tilt temperature.
pub fn run_all(num_states: usize, steps: usize, beta: f64, seed: u64) -> Result<Vec<CheckOutcome>> {
    let num_states = num_states.min(4);
    let steps = steps.min(3);
    let chain = fixtures::random_tabular_chain(num_states, steps, 7)?;
    let policy = fixtures::random_tabular_policy(num_states, steps, seed + 1);
    let mut outcomes = Vec::new();

    let mut prop1: f64 = 0.0;
    for k in [2, 3] {
        prop1 = prop1.max(check_prop1_gradient_identity(&chain, &policy, beta, k)?);
    }
    outcomes.push(outcome("prop1_gradient_identity", prop1, 1e-9));

    let report = check_biased_loss_unbiased_grad(&chain, &policy, beta, 2)?;
    outcomes.push(CheckOutcome {
        name: "biased_loss_unbiased_grad".to_string(),
        pass: report.grad_gap < 1e-9 && report.loss_bias > 1e-4 && report.bessel_bias < 1e-9,
        max_err: report.grad_gap,
    });

    let spec = PotentialSpec::new(PotentialKind::Difference, beta)?;
    let mut worst_violation: f64 = 0.0;
    for i in 0..100 {
        let p = fixtures::random_tabular_policy(num_states, steps, seed + 100 + i);
        let bound = check_variance_bound(&chain, &p, &spec, None)?;
        worst_violation = worst_violation.max(-bound.slack);
    }
    // Tightness at T = 1 and the zero-variance soft-value oracle.
    let chain1 = fixtures::random_tabular_chain(num_states, 1, 8)?;
    let p1 = fixtures::random_tabular_policy(num_states, 1, seed + 5);
    let b1 = check_variance_bound(&chain1, &p1, &spec, None)?;
    worst_violation = worst_violation.max(b1.slack.abs());
    let values = exact_soft_value(&chain, beta)?;
    let tilted: Vec<Vec<Vec<f64>>> = (1..=steps)
        .map(|t| exact_tilted_kernel_with_values(&chain, t, &values[t - 1], beta))
        .collect::<Result<_>>()?;
    let soft_policy = TabularPolicy::from_kernels(&tilted);
    let b_soft = check_variance_bound(&chain, &soft_policy, &spec, Some(&values))?;
    worst_violation = worst_violation.max(b_soft.lhs.abs()).max(b_soft.rhs.abs());
    outcomes.push(outcome("variance_bound", worst_violation, 1e-10));

    let mut rng = RngStream::new(seed, 11);
    let mut worst_residual: f64 = 0.0;
    for _ in 0..1000 {
        let traj = random_trajectory(steps.max(2), &mut rng);
        for kind in [PotentialKind::ReturnToGo, PotentialKind::Difference] {
            let spec = PotentialSpec::new(kind, beta)?;
            worst_residual =
                worst_residual.max(check_potential_constraint(&spec, &traj, None)?.abs());
        }
    }
    outcomes.push(outcome("potential_constraint", worst_residual, 1e-12));

    outcomes.push(outcome(
        "finite_diff_gaussian",
        finite_diff_gaussian_max_err(seed)?,
        1e-5,
    ));
    outcomes.push(outcome(
        "finite_diff_objectives",
        finite_diff_objectives_max_err(seed)?,
        1e-6,
    ));
    Ok(outcomes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tabular::exact_tilted_kernel;

    #[test]
    fn prop1_holds_on_small_fixtures() {
        for s in 2..=4 {
            for steps in 1..=2 {
                let chain = fixtures::random_tabular_chain(s, steps, 7).unwrap();
                let policy = fixtures::random_tabular_policy(s, steps, 3);
                for k in [2, 3] {
                    let err = check_prop1_gradient_identity(&chain, &policy, 0.7, k).unwrap();
                    assert!(err < 1e-9, "S={s} T={steps} K={k}: {err}");
                }
            }
        }
    }

    #[test]
    fn prop1_both_sides_vanish_at_the_tilt() {
        let chain = fixtures::random_tabular_chain(3, 2, 7).unwrap();
        let kernels: Vec<Vec<Vec<f64>>> = (1..=2)
            .map(|t| exact_tilted_kernel(&chain, t, 0.7).unwrap())
            .collect();
        let policy = TabularPolicy::from_kernels(&kernels);
        for t in 1..=2 {
            for x in 0..3 {
                let g = exact_kl_grad(&chain, &policy, t, x, 0.7).unwrap();
                assert!(g.iter().all(|v| v.abs() < 1e-10));
            }
        }
        let err = check_prop1_gradient_identity(&chain, &policy, 0.7, 2).unwrap();
        assert!(err < 1e-9);
    }

    #[test]
    fn variance_bound_nonnegative_slack_and_t1_equality() {
        let chain = fixtures::random_tabular_chain(3, 3, 7).unwrap();
        let spec = PotentialSpec::new(PotentialKind::Difference, 0.6).unwrap();
        for seed in 0..20 {
            let policy = fixtures::random_tabular_policy(3, 3, seed);
            let b = check_variance_bound(&chain, &policy, &spec, None).unwrap();
            assert!(b.slack >= -1e-10, "seed {seed}: slack {}", b.slack);
        }

        let chain1 = fixtures::random_tabular_chain(3, 1, 7).unwrap();
        let policy = fixtures::random_tabular_policy(3, 1, 2);
        let b = check_variance_bound(&chain1, &policy, &spec, None).unwrap();
        assert!(b.slack.abs() < 1e-12, "T=1 slack {}", b.slack);
        assert!(b.lhs > 1e-6, "variance should be nontrivial");
    }

    #[test]
    fn variance_bound_zero_at_soft_value_tilt() {
        let chain = fixtures::random_tabular_chain(3, 3, 7).unwrap();
        let beta = 0.6;
        let values = exact_soft_value(&chain, beta).unwrap();
        let kernels: Vec<Vec<Vec<f64>>> = (1..=3)
            .map(|t| exact_tilted_kernel_with_values(&chain, t, &values[t - 1], beta).unwrap())
            .collect();
        let policy = TabularPolicy::from_kernels(&kernels);
        let spec = PotentialSpec::new(PotentialKind::Difference, beta).unwrap();
        let b = check_variance_bound(&chain, &policy, &spec, Some(&values)).unwrap();
        assert!(b.lhs.abs() < 1e-20, "lhs {}", b.lhs);
        assert!(b.rhs.abs() < 1e-20, "rhs {}", b.rhs);
    }

    #[test]
    fn variance_bound_respects_the_enumeration_guard() {
        // 40^5 paths is far past the guard.
        let chain = fixtures::random_tabular_chain(40, 4, 7).unwrap();
        let policy = fixtures::random_tabular_policy(40, 4, 1);
        let spec = PotentialSpec::new(PotentialKind::Difference, 1.0).unwrap();
        assert!(matches!(
            check_variance_bound(&chain, &policy, &spec, None),
            Err(Error::SizeLimit(_))
        ));
    }

    #[test]
    fn bias_report_shows_both_halves() {
        let chain = fixtures::random_tabular_chain(3, 2, 7).unwrap();
        let policy = fixtures::random_tabular_policy(3, 2, 3);
        let r2 = check_biased_loss_unbiased_grad(&chain, &policy, 0.7, 2).unwrap();
        assert!(r2.loss_bias > 1e-4, "plug-in bias {}", r2.loss_bias);
        assert!(r2.bessel_bias < 1e-12, "bessel {}", r2.bessel_bias);
        assert!(r2.grad_gap < 1e-9, "grad gap {}", r2.grad_gap);

        // Bias shrinks as K grows (sigma^2 / 2K).
        let r4 = check_biased_loss_unbiased_grad(&chain, &policy, 0.7, 4).unwrap();
        assert!(r4.loss_bias < r2.loss_bias);
        assert!((r2.loss_bias - 2.0 * r4.loss_bias).abs() < 1e-9);
    }

    #[test]
    fn bias_check_zero_for_flat_rows() {
        // Policy = ref with zero rewards: f is identically zero.
        let kernels = vec![vec![vec![0.5, 0.5], vec![0.5, 0.5]]];
        let chain = TabularChain::new(kernels.clone(), vec![0.5, 0.5], vec![0.0, 0.0]).unwrap();
        let policy = TabularPolicy::from_kernels(&kernels);
        let r = check_biased_loss_unbiased_grad(&chain, &policy, 1.0, 2).unwrap();
        assert!(r.loss_bias < 1e-15 && r.grad_gap < 1e-15);
    }

    #[test]
    fn finite_diff_check_trivial_cases() {
        let zero = |_: &[f64]| 0.0;
        let err = finite_diff_check(zero, &[0.3, -0.4], &[0.0, 0.0], 1e-5).unwrap();
        assert_eq!(err, 0.0);
        let quad = |p: &[f64]| p.iter().map(|v| v * v).sum::<f64>();
        let err = finite_diff_check(quad, &[0.5], &[1.0], 1e-5).unwrap();
        assert!(err < 1e-9);
        assert!(finite_diff_check(zero, &[0.0], &[0.0], 0.0).is_err());
    }

    #[test]
    fn gaussian_and_objective_gradients_pass_finite_differences() {
        assert!(finite_diff_gaussian_max_err(0).unwrap() < 1e-5);
        assert!(finite_diff_objectives_max_err(0).unwrap() < 1e-6);
    }

    #[test]
    fn full_suite_passes_and_prints_lines() {
        let outcomes = run_all(4, 3, 0.5, 0).unwrap();
        assert_eq!(outcomes.len(), 6);
        for o in &outcomes {
            assert!(o.pass, "{o}");
            let line = o.to_string();
            assert!(line.starts_with(&format!("check={} status=pass max_err=", o.name)));
        }
    }
}
