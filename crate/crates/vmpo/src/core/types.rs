use crate::error::{invalid, Result};

/// One denoising rollout x_T -> x_0 with per-step log-densities under the
/// current policy, the behaviour policy and the reference, plus per-timestep
/// rewards.
///
/// `states` is stored in rollout order (x_T first). The transition arrays are
/// indexed so that entry `t - 1` belongs to the step x_t -> x_{t-1}, and
/// `rewards[t]` is r(x_t); in particular `rewards[0]` is the terminal reward
/// on the clean state.
#[derive(Debug, Clone)]
pub struct Trajectory<S> {
    states: Vec<S>,
    logp_policy: Vec<f64>,
    logp_old: Vec<f64>,
    logp_ref: Vec<f64>,
    rewards: Vec<f64>,
    condition: Option<u32>,
}

impl<S> Trajectory<S> {
    pub fn new(
        states: Vec<S>,
        logp_policy: Vec<f64>,
        logp_old: Vec<f64>,
        logp_ref: Vec<f64>,
        rewards: Vec<f64>,
        condition: Option<u32>,
    ) -> Result<Self> {
        let steps = states.len().checked_sub(1).ok_or_else(|| invalid("empty trajectory"))?;
        if steps == 0 {
            return Err(invalid("trajectory needs at least one step"));
        }
        for (name, v) in [
            ("logp_policy", &logp_policy),
            ("logp_old", &logp_old),
            ("logp_ref", &logp_ref),
        ] {
            if v.len() != steps {
                return Err(invalid(format!(
                    "{name} has length {}, expected T = {steps}",
                    v.len()
                )));
            }
        }
        if rewards.len() != steps + 1 {
            return Err(invalid(format!(
                "rewards has length {}, expected T + 1 = {}",
                rewards.len(),
                steps + 1
            )));
        }
        Ok(Self {
            states,
            logp_policy,
            logp_old,
            logp_ref,
            rewards,
            condition,
        })
    }

    pub fn steps(&self) -> usize {
        self.states.len() - 1
    }

    /// State x_t.
    pub fn state(&self, t: usize) -> &S {
        &self.states[self.steps() - t]
    }

    /// log p_theta(x_{t-1} | x_t) for t in 1..=T.
    pub fn logp_policy(&self, t: usize) -> f64 {
        self.logp_policy[t - 1]
    }

    pub fn logp_old(&self, t: usize) -> f64 {
        self.logp_old[t - 1]
    }

    pub fn logp_ref(&self, t: usize) -> f64 {
        self.logp_ref[t - 1]
    }

    /// r(x_t). `reward(0)` is the terminal reward.
    pub fn reward(&self, t: usize) -> f64 {
        self.rewards[t]
    }

    pub fn condition(&self) -> Option<u32> {
        self.condition
    }

    /// Replace the per-timestep rewards, e.g. after group standardisation.
    pub fn set_rewards(&mut self, rewards: Vec<f64>) -> Result<()> {
        if rewards.len() != self.steps() + 1 {
            return Err(invalid("rewards length mismatch"));
        }
        self.rewards = rewards;
        Ok(())
    }

    /// Replace the current-policy log-density track, e.g. after a parameter
    /// update re-scores old rollouts.
    pub fn set_logp_policy(&mut self, logp: Vec<f64>) -> Result<()> {
        if logp.len() != self.steps() {
            return Err(invalid("logp_policy length mismatch"));
        }
        self.logp_policy = logp;
        Ok(())
    }
}

/// K trajectories sharing one condition: the unit over which group baselines
/// and variances are computed.
#[derive(Debug, Clone)]
pub struct RolloutBatch<S> {
    trajectories: Vec<Trajectory<S>>,
}

impl<S> RolloutBatch<S> {
    pub fn new(trajectories: Vec<Trajectory<S>>) -> Result<Self> {
        if trajectories.len() < 2 {
            return Err(invalid("group size K must be >= 2"));
        }
        let steps = trajectories[0].steps();
        let condition = trajectories[0].condition();
        for traj in &trajectories {
            if traj.steps() != steps {
                return Err(invalid("all group members must share the same T"));
            }
            if traj.condition() != condition {
                return Err(invalid("all group members must share the same condition"));
            }
        }
        Ok(Self { trajectories })
    }

    pub fn group_size(&self) -> usize {
        self.trajectories.len()
    }

    pub fn steps(&self) -> usize {
        self.trajectories[0].steps()
    }

    pub fn trajectories(&self) -> &[Trajectory<S>] {
        &self.trajectories
    }

    pub fn trajectories_mut(&mut self) -> &mut [Trajectory<S>] {
        &mut self.trajectories
    }
}

/// Choice of SMC potential U(x_{t:T}).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PotentialKind {
    /// U = exp(r(x_0) / (T beta)); the 1/T share is absorbed into beta, so
    /// per-step weights carry the full terminal reward.
    ReturnToGo,
    /// U = exp((r(x_t) - r(x_{t+1})) / beta), telescoping with U(x_T) = 1.
    Difference,
    /// Difference potential with a multiplicative correction F, constrained
    /// by F(x_0) = 1.
    ForwardLooking,
}

impl PotentialKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::ReturnToGo => "return_to_go",
            Self::Difference => "difference",
            Self::ForwardLooking => "forward_looking",
        }
    }
}

impl std::str::FromStr for PotentialKind {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "return_to_go" => Ok(Self::ReturnToGo),
            "difference" => Ok(Self::Difference),
            "forward_looking" => Ok(Self::ForwardLooking),
            other => Err(invalid(format!("unknown potential kind '{other}'"))),
        }
    }
}

/// SMC potential with its temperature.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PotentialSpec {
    pub kind: PotentialKind,
    pub beta: f64,
}

impl PotentialSpec {
    pub fn new(kind: PotentialKind, beta: f64) -> Result<Self> {
        if !(beta > 0.0) {
            return Err(invalid(format!("beta must be positive, got {beta}")));
        }
        Ok(Self { kind, beta })
    }
}

/// Which alignment loss to optimise.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObjectiveKind {
    VmpoAmortised,
    VmpoMc,
    VmpoClipped,
    Grpo,
    DetailedBalance,
    GradMatching,
}

impl ObjectiveKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::VmpoAmortised => "vmpo_amortised",
            Self::VmpoMc => "vmpo_mc",
            Self::VmpoClipped => "vmpo_clipped",
            Self::Grpo => "grpo",
            Self::DetailedBalance => "detailed_balance",
            Self::GradMatching => "grad_matching",
        }
    }
}

impl std::str::FromStr for ObjectiveKind {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vmpo_amortised" => Ok(Self::VmpoAmortised),
            "vmpo_mc" => Ok(Self::VmpoMc),
            "vmpo_clipped" => Ok(Self::VmpoClipped),
            "grpo" => Ok(Self::Grpo),
            "detailed_balance" => Ok(Self::DetailedBalance),
            "grad_matching" => Ok(Self::GradMatching),
            other => Err(invalid(format!("unknown objective kind '{other}'"))),
        }
    }
}

/// Alignment loss selection with its temperature, clip width and
/// old-policy-KL regulariser weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveSpec {
    pub kind: ObjectiveKind,
    pub beta: f64,
    pub clip_eps: f64,
    pub kl_old_coeff: f64,
    pub potential: PotentialSpec,
}

impl ObjectiveSpec {
    pub fn new(
        kind: ObjectiveKind,
        beta: f64,
        clip_eps: f64,
        kl_old_coeff: f64,
        potential: PotentialSpec,
    ) -> Result<Self> {
        if !(beta > 0.0) {
            return Err(invalid(format!("beta must be positive, got {beta}")));
        }
        if !(0.0..1.0).contains(&clip_eps) {
            return Err(invalid(format!("clip_eps {clip_eps} outside [0, 1)")));
        }
        if !(kl_old_coeff >= 0.0) {
            return Err(invalid(format!("kl_old_coeff {kl_old_coeff} must be >= 0")));
        }
        Ok(Self {
            kind,
            beta,
            clip_eps,
            kl_old_coeff,
            potential,
        })
    }
}
