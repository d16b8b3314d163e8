//! Finite-state denoising chains with exact, enumeration-based oracles for
//! tilted targets, KL divergences, soft values, and expected gradients.
//!
//! Everything here is deterministic and computed in the log domain; these
//! routines are the ground truth that the sampled objectives are checked
//! against.

use crate::core::log_sum_exp;
use crate::error::{invalid, Error, Result};

/// Guard on enumeration sizes (tuples or trajectories).
pub const ENUMERATION_LIMIT: u64 = 1_000_000;

/// Finite-state reference chain: T row-stochastic kernels, a prior over x_T,
/// and a per-state reward.
///
/// Kernel indexing: `ref_kernels[t - 1][x_t][x_prev]` is
/// p_ref(x_{t-1} = x_prev | x_t) for t in 1..=T.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularChain {
    num_states: usize,
    ref_kernels: Vec<Vec<Vec<f64>>>,
    prior: Vec<f64>,
    reward: Vec<f64>,
}

impl TabularChain {
    pub fn new(
        ref_kernels: Vec<Vec<Vec<f64>>>,
        prior: Vec<f64>,
        reward: Vec<f64>,
    ) -> Result<Self> {
        let num_states = prior.len();
        if num_states == 0 {
            return Err(invalid("chain needs at least one state"));
        }
        if ref_kernels.is_empty() {
            return Err(invalid("chain needs at least one kernel"));
        }
        if reward.len() != num_states {
            return Err(invalid("reward length must equal the number of states"));
        }
        check_distribution(&prior, "prior")?;
        for (t, kernel) in ref_kernels.iter().enumerate() {
            if kernel.len() != num_states {
                return Err(invalid(format!("kernel {t} has wrong row count")));
            }
            for (x, row) in kernel.iter().enumerate() {
                if row.len() != num_states {
                    return Err(invalid(format!("kernel {t} row {x} has wrong length")));
                }
                check_distribution(row, &format!("kernel {t} row {x}"))?;
            }
        }
        Ok(Self {
            num_states,
            ref_kernels,
            prior,
            reward,
        })
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn steps(&self) -> usize {
        self.ref_kernels.len()
    }

    pub fn prior(&self) -> &[f64] {
        &self.prior
    }

    pub fn reward(&self) -> &[f64] {
        &self.reward
    }

    /// p_ref(. | x_t) at step t, t in 1..=T.
    pub fn ref_row(&self, t: usize, x_t: usize) -> &[f64] {
        &self.ref_kernels[t - 1][x_t]
    }

    /// Serialise to the plain-text matrix format: a `S T` header, then the
    /// prior, the reward, and the T kernels, one row per line.
    pub fn to_text(&self) -> String {
        let mut out = format!("{} {}\n", self.num_states, self.steps());
        let push_row = |out: &mut String, row: &[f64]| {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.17}")).collect();
            out.push_str(&cells.join(" "));
            out.push('\n');
        };
        push_row(&mut out, &self.prior);
        push_row(&mut out, &self.reward);
        for kernel in &self.ref_kernels {
            for row in kernel {
                push_row(&mut out, row);
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| invalid("empty chain file"))?;
        let mut parts = header.split_whitespace();
        let s: usize = parse_cell(parts.next(), "S")?;
        let t: usize = parse_cell(parts.next(), "T")?;
        let mut row = |name: &str| -> Result<Vec<f64>> {
            let line = lines
                .next()
                .ok_or_else(|| invalid(format!("missing {name} row")))?;
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|c| c.parse::<f64>().map_err(|e| invalid(format!("{name}: {e}"))))
                .collect::<Result<_>>()?;
            if vals.len() != s {
                return Err(invalid(format!("{name} row has wrong length")));
            }
            Ok(vals)
        };
        let prior = row("prior")?;
        let reward = row("reward")?;
        let mut kernels = Vec::with_capacity(t);
        for k in 0..t {
            let mut kernel = Vec::with_capacity(s);
            for x in 0..s {
                kernel.push(row(&format!("kernel {k} row {x}"))?);
            }
            kernels.push(kernel);
        }
        Self::new(kernels, prior, reward)
    }
}

fn parse_cell<T: std::str::FromStr>(cell: Option<&str>, name: &str) -> Result<T> {
    cell.and_then(|c| c.parse().ok())
        .ok_or_else(|| invalid(format!("bad {name} in chain header")))
}

fn check_distribution(row: &[f64], name: &str) -> Result<()> {
    let mut sum = 0.0;
    for &p in row {
        if !(p >= 0.0) {
            return Err(invalid(format!("{name} has a negative entry")));
        }
        sum += p;
    }
    if (sum - 1.0).abs() > 1e-10 {
        return Err(invalid(format!("{name} sums to {sum}, not 1")));
    }
    Ok(())
}

/// Softmax-parameterised denoising policy: one logit matrix per timestep,
/// rows indexed by x_t.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularPolicy {
    logits: Vec<Vec<Vec<f64>>>,
}

impl TabularPolicy {
    pub fn new(logits: Vec<Vec<Vec<f64>>>) -> Self {
        Self { logits }
    }

    /// Uniform policy (all logits zero) over S states for T steps.
    pub fn uniform(num_states: usize, steps: usize) -> Self {
        Self::new(vec![vec![vec![0.0; num_states]; num_states]; steps])
    }

    /// Policy whose kernels equal the chain's reference kernels.
    pub fn from_chain(chain: &TabularChain) -> Self {
        let logits = (1..=chain.steps())
            .map(|t| {
                (0..chain.num_states())
                    .map(|x| chain.ref_row(t, x).iter().map(|p| p.max(1e-300).ln()).collect())
                    .collect()
            })
            .collect();
        Self::new(logits)
    }

    /// Policy whose kernel rows equal the given row-stochastic matrices.
    pub fn from_kernels(kernels: &[Vec<Vec<f64>>]) -> Self {
        let logits = kernels
            .iter()
            .map(|k| {
                k.iter()
                    .map(|row| row.iter().map(|p| p.max(1e-300).ln()).collect())
                    .collect()
            })
            .collect();
        Self::new(logits)
    }

    pub fn steps(&self) -> usize {
        self.logits.len()
    }

    pub fn num_states(&self) -> usize {
        self.logits[0].len()
    }

    pub fn logits_row(&self, t: usize, x_t: usize) -> &[f64] {
        &self.logits[t - 1][x_t]
    }

    pub fn logits_row_mut(&mut self, t: usize, x_t: usize) -> &mut [f64] {
        &mut self.logits[t - 1][x_t]
    }

    /// p_theta(. | x_t) at step t: row-softmax of the logits.
    pub fn kernel_row(&self, t: usize, x_t: usize) -> Vec<f64> {
        softmax(&self.logits[t - 1][x_t])
    }

    pub fn log_kernel_row(&self, t: usize, x_t: usize) -> Vec<f64> {
        log_softmax(&self.logits[t - 1][x_t])
    }

    /// Flat view of all parameters, row-major over (t, x_t, x_prev).
    pub fn flatten(&self) -> Vec<f64> {
        self.logits
            .iter()
            .flat_map(|k| k.iter().flat_map(|r| r.iter().copied()))
            .collect()
    }

    pub fn unflatten_into(&mut self, flat: &[f64]) -> Result<()> {
        let expected = self.steps() * self.num_states() * self.num_states();
        if flat.len() != expected {
            return Err(Error::ShapeMismatch {
                expected,
                got: flat.len(),
            });
        }
        let mut it = flat.iter();
        for kernel in &mut self.logits {
            for row in kernel {
                for v in row {
                    *v = *it.next().unwrap();
                }
            }
        }
        Ok(())
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let log_p = log_softmax(logits);
    log_p.iter().map(|l| l.exp()).collect()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let z = log_sum_exp(logits);
    logits.iter().map(|l| l - z).collect()
}

/// Tilt a probability row by exp(values / beta) and renormalise, in the log
/// domain.
pub fn tilt_row(row: &[f64], values: &[f64], beta: f64) -> Result<Vec<f64>> {
    if !(beta > 0.0) {
        return Err(invalid("tilt_row: beta must be positive"));
    }
    let log_unnorm: Vec<f64> = row
        .iter()
        .zip(values)
        .map(|(&p, &v)| if p > 0.0 { p.ln() + v / beta } else { f64::NEG_INFINITY })
        .collect();
    let z = log_sum_exp(&log_unnorm);
    if !z.is_finite() {
        return Err(Error::NumericOverflow(
            "tilt_row: zero row normaliser".into(),
        ));
    }
    Ok(log_unnorm.iter().map(|l| (l - z).exp()).collect())
}

/// The reward-tilted target kernel at step t:
/// p_tilt(x_{t-1} | x_t) proportional to p_ref(x_{t-1} | x_t) exp(r(x_{t-1}) / beta).
pub fn exact_tilted_kernel(chain: &TabularChain, t: usize, beta: f64) -> Result<Vec<Vec<f64>>> {
    exact_tilted_kernel_with_values(chain, t, chain.reward(), beta)
}

/// Tilted kernel built from an arbitrary per-state value vector in place of
/// the raw reward; used with soft values for the trajectory-level target.
pub fn exact_tilted_kernel_with_values(
    chain: &TabularChain,
    t: usize,
    values: &[f64],
    beta: f64,
) -> Result<Vec<Vec<f64>>> {
    (0..chain.num_states())
        .map(|x| tilt_row(chain.ref_row(t, x), values, beta))
        .collect()
}

/// Exact soft values under the reference chain:
/// V_0 = r, V_t(x) = beta * log sum_{x'} p_ref(x' | x) exp(V_{t-1}(x') / beta).
///
/// Returned as a (T+1) x S matrix indexed by [t][state]. The difference
/// potential built from V makes every per-step weight of the V-tilted kernel
/// exactly constant.
pub fn exact_soft_value(chain: &TabularChain, beta: f64) -> Result<Vec<Vec<f64>>> {
    if !(beta > 0.0) {
        return Err(invalid("exact_soft_value: beta must be positive"));
    }
    let s = chain.num_states();
    let mut values = vec![chain.reward().to_vec()];
    for t in 1..=chain.steps() {
        let prev = &values[t - 1];
        let row_value = |x: usize| {
            let terms: Vec<f64> = chain.ref_row(t, x)
                .iter()
                .zip(prev)
                .filter(|(&p, _)| p > 0.0)
                .map(|(&p, &v)| p.ln() + v / beta)
                .collect();
            beta * log_sum_exp(&terms)
        };
        values.push((0..s).map(row_value).collect());
    }
    Ok(values)
}

/// KL(p || q) = sum p log(p/q), with 0 log(0/q) := 0.
pub fn exact_kl(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(invalid("exact_kl: length mismatch"));
    }
    let mut kl = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi == 0.0 {
            continue;
        }
        if qi == 0.0 {
            return Err(invalid("exact_kl: p has mass where q has none"));
        }
        kl += pi * (pi / qi).ln();
    }
    Ok(kl)
}

/// Closed-form gradient of KL(p_theta(.|x_t) || p_tilt(.|x_t)) with respect
/// to the policy row's logits.
///
/// With p = softmax(z) and s_x = log p_x - log p_tilt_x, the gradient is
/// g_j = p_j (s_j - KL).
pub fn exact_kl_grad(
    chain: &TabularChain,
    policy: &TabularPolicy,
    t: usize,
    x_t: usize,
    beta: f64,
) -> Result<Vec<f64>> {
    let tilt = tilt_row(chain.ref_row(t, x_t), chain.reward(), beta)?;
    let log_p = policy.log_kernel_row(t, x_t);
    let p = policy.kernel_row(t, x_t);
    let s: Vec<f64> = log_p
        .iter()
        .zip(&tilt)
        .map(|(&lp, &q)| lp - q.max(1e-300).ln())
        .collect();
    let kl: f64 = p.iter().zip(&s).map(|(&pi, &si)| pi * si).sum();
    Ok(p.iter().zip(&s).map(|(&pi, &si)| pi * (si - kl)).collect())
}

/// Exact expectation of the K-sample Monte-Carlo gradient estimator
/// (1/(K-1)) sum_i -A_i grad log p_theta, computed by enumerating all S^K
/// ordered sample tuples from the current policy row.
pub fn enumerate_expected_grad_mc(
    chain: &TabularChain,
    policy: &TabularPolicy,
    t: usize,
    x_t: usize,
    group_size: usize,
    beta: f64,
) -> Result<Vec<f64>> {
    if group_size < 2 {
        return Err(invalid("group size K must be >= 2"));
    }
    let s = chain.num_states();
    let tuples = (s as u64).checked_pow(group_size as u32);
    match tuples {
        Some(n) if n <= ENUMERATION_LIMIT => {}
        _ => {
            return Err(Error::SizeLimit(format!(
                "S^K = {s}^{group_size} exceeds the enumeration guard"
            )))
        }
    }
    let p = policy.kernel_row(t, x_t);
    let log_p = policy.log_kernel_row(t, x_t);
    let ref_row = chain.ref_row(t, x_t);
    // f(x) = log p_ref(x) - log p_theta(x) + r(x) / beta
    let f: Vec<f64> = (0..s)
        .map(|x| ref_row[x].max(1e-300).ln() - log_p[x] + chain.reward()[x] / beta)
        .collect();

    let mut grad = vec![0.0; s];
    let mut tuple = vec![0usize; group_size];
    loop {
        let prob: f64 = tuple.iter().map(|&x| p[x]).product();
        if prob > 0.0 {
            let mean_f: f64 = tuple.iter().map(|&x| f[x]).sum::<f64>() / group_size as f64;
            for &x in &tuple {
                let a = f[x] - mean_f;
                let coeff = -a / (group_size as f64 - 1.0) * prob;
                // grad log p over the row's logits is e_x - p.
                for j in 0..s {
                    let indicator = if j == x { 1.0 } else { 0.0 };
                    grad[j] += coeff * (indicator - p[j]);
                }
            }
        }
        // next tuple in odometer order
        let mut carry = true;
        for slot in tuple.iter_mut() {
            *slot += 1;
            if *slot < s {
                carry = false;
                break;
            }
            *slot = 0;
        }
        if carry {
            break;
        }
    }
    Ok(grad)
}
