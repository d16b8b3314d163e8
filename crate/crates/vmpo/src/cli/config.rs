//! Flat key = value run configuration: one pair per line, `#` comments,
//! unknown keys rejected with line numbers. Every key has a default; an
//! empty file parses to `TrainConfig::default()`.

use crate::core::{ObjectiveKind, ObjectiveSpec, PotentialKind, PotentialSpec};
use crate::error::{Error, Result};
use crate::trainer::{ModelKind, TrainConfig};
use std::str::FromStr;

fn parse_err(path: &str, line: usize, msg: impl Into<String>) -> Error {
    Error::ConfigParse {
        path: path.to_string(),
        line,
        msg: msg.into(),
    }
}

/// Parse config text; `path` only labels diagnostics.
pub fn parse_config_str(text: &str, path: &str) -> Result<TrainConfig> {
    let mut config = TrainConfig::default();
    let mut objective = config.objective.kind;
    let mut potential = config.objective.potential.kind;
    let mut beta = config.objective.beta;
    let mut clip_eps = config.objective.clip_eps;
    let mut kl_old_coeff = config.objective.kl_old_coeff;

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| parse_err(path, line_no, "expected 'key = value'"))?;
        let (key, value) = (key.trim(), value.trim());
        if value.is_empty() {
            return Err(parse_err(path, line_no, format!("key '{key}' has no value")));
        }
        let bad = |what: &str| parse_err(path, line_no, format!("key '{key}': {what}: '{value}'"));
        macro_rules! num {
            ($ty:ty) => {
                value.parse::<$ty>().map_err(|_| bad("invalid number"))?
            };
        }
        match key {
            "model" => {
                config.model = ModelKind::from_str(value).map_err(|_| bad("unknown model"))?
            }
            "num_states" => config.num_states = num!(usize),
            "dim" => config.dim = num!(usize),
            "steps" => config.steps = num!(usize),
            "alpha_min" => config.alpha_min = num!(f64),
            "objective" => {
                objective = ObjectiveKind::from_str(value).map_err(|_| bad("unknown objective"))?
            }
            "potential" => {
                potential = PotentialKind::from_str(value).map_err(|_| bad("unknown potential"))?
            }
            "beta" => beta = num!(f64),
            "clip_eps" => clip_eps = num!(f64),
            "kl_old_coeff" => kl_old_coeff = num!(f64),
            "group_size" => config.group_size = num!(usize),
            "rollouts_per_epoch" => config.rollouts_per_epoch = num!(usize),
            "updates_per_epoch" => config.updates_per_epoch = num!(usize),
            "epochs" => config.epochs = num!(usize),
            "lr_theta" => config.lr_theta = num!(f64),
            "lr_phi" => config.lr_phi = num!(f64),
            "seed" => config.seed = num!(u64),
            "reward_rescale" => {
                config.reward_rescale = match value {
                    "on" => true,
                    "off" => false,
                    _ => return Err(bad("expected 'on' or 'off'")),
                }
            }
            "eval_every" => config.eval_every = num!(usize),
            "out_dir" => config.out_dir = value.to_string(),
            other => {
                return Err(parse_err(path, line_no, format!("unknown key '{other}'")));
            }
        }
    }
    let spec = PotentialSpec::new(potential, beta)?;
    config.objective = ObjectiveSpec::new(objective, beta, clip_eps, kl_old_coeff, spec)?;
    config.validate()?;
    Ok(config)
}

/// Parse a config file from disk.
pub fn parse_config(path: &str) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path)?;
    parse_config_str(&text, path)
}

/// Serialise every key; `parse_config_str` on the result reproduces the
/// config exactly.
pub fn serialise_config(config: &TrainConfig) -> String {
    let mut out = String::new();
    let mut push = |key: &str, value: String| {
        out.push_str(key);
        out.push_str(" = ");
        out.push_str(&value);
        out.push('\n');
    };
    push("model", config.model.as_str().to_string());
    push("num_states", config.num_states.to_string());
    push("dim", config.dim.to_string());
    push("steps", config.steps.to_string());
    push("alpha_min", config.alpha_min.to_string());
    push("objective", config.objective.kind.as_str().to_string());
    push(
        "potential",
        config.objective.potential.kind.as_str().to_string(),
    );
    push("beta", config.objective.beta.to_string());
    push("clip_eps", config.objective.clip_eps.to_string());
    push("kl_old_coeff", config.objective.kl_old_coeff.to_string());
    push("group_size", config.group_size.to_string());
    push("rollouts_per_epoch", config.rollouts_per_epoch.to_string());
    push("updates_per_epoch", config.updates_per_epoch.to_string());
    push("epochs", config.epochs.to_string());
    push("lr_theta", config.lr_theta.to_string());
    push("lr_phi", config.lr_phi.to_string());
    push("seed", config.seed.to_string());
    push(
        "reward_rescale",
        if config.reward_rescale { "on" } else { "off" }.to_string(),
    );
    push("eval_every", config.eval_every.to_string());
    push("out_dir", config.out_dir.clone());
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_file_gives_defaults() {
        let config = parse_config_str("", "test").unwrap();
        let def = TrainConfig::default();
        assert_eq!(serialise_config(&config), serialise_config(&def));
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let text = "# header\n\n  beta = 0.25  # inline\nepochs = 5\n";
        let config = parse_config_str(text, "test").unwrap();
        assert_eq!(config.objective.beta, 0.25);
        assert_eq!(config.objective.potential.beta, 0.25);
        assert_eq!(config.epochs, 5);
    }

    #[test]
    fn unknown_key_reports_line_number() {
        let err = parse_config_str("beta = 0.5\nbogus = 1\n", "cfg.txt").unwrap_err();
        match err {
            Error::ConfigParse { path, line, msg } => {
                assert_eq!(path, "cfg.txt");
                assert_eq!(line, 2);
                assert!(msg.contains("bogus"));
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn malformed_values_report_line_number() {
        for text in ["beta = oops", "just words", "epochs ="] {
            let err = parse_config_str(text, "cfg.txt").unwrap_err();
            assert!(matches!(err, Error::ConfigParse { line: 1, .. }), "{text}");
        }
    }

    #[test]
    fn domain_errors_name_the_invariant() {
        let err = parse_config_str("group_size = 1", "t").unwrap_err();
        assert!(err.to_string().contains("K must be >= 2"), "{err}");
        assert!(parse_config_str("beta = -1", "t").is_err());
    }

    #[test]
    fn every_documented_key_is_accepted() {
        let text = "model = gaussian\nnum_states = 5\ndim = 3\nsteps = 4\n\
                    alpha_min = 0.3\nobjective = grpo\npotential = return_to_go\n\
                    beta = 0.7\nclip_eps = 0.1\nkl_old_coeff = 0.5\ngroup_size = 4\n\
                    rollouts_per_epoch = 16\nupdates_per_epoch = 3\nepochs = 12\n\
                    lr_theta = 0.001\nlr_phi = 0.002\nseed = 42\nreward_rescale = on\n\
                    eval_every = 2\nout_dir = results\n";
        let config = parse_config_str(text, "t").unwrap();
        assert_eq!(config.model, ModelKind::Gaussian);
        assert_eq!(config.objective.kind, ObjectiveKind::Grpo);
        assert_eq!(config.objective.potential.kind, PotentialKind::ReturnToGo);
        assert!(config.reward_rescale);
        assert_eq!(config.out_dir, "results");
        assert_eq!(config.seed, 42);
    }

    fn arb_config() -> impl Strategy<Value = TrainConfig> {
        (
            any::<bool>(),
            2usize..5,
            1usize..4,
            1usize..4,
            0usize..6,
            0usize..3,
            (0.05f64..2.0, 0.0f64..0.9, 0.0f64..2.0),
            (2usize..5, 1usize..4, 1usize..4, 0usize..50),
            (0.0f64..0.01, 0.0f64..0.01, any::<u64>(), any::<bool>(), 1usize..5),
        )
            .prop_map(
                |(
                    gaussian,
                    num_states,
                    dim,
                    steps,
                    obj_idx,
                    pot_idx,
                    (beta, clip_eps, kl_old),
                    (group, groups_per_epoch, updates, epochs),
                    (lr_theta, lr_phi, seed, rescale, eval_every),
                )| {
                    let objective = [
                        ObjectiveKind::VmpoAmortised,
                        ObjectiveKind::VmpoMc,
                        ObjectiveKind::VmpoClipped,
                        ObjectiveKind::Grpo,
                        ObjectiveKind::DetailedBalance,
                        ObjectiveKind::GradMatching,
                    ][obj_idx];
                    let potential = [
                        PotentialKind::ReturnToGo,
                        PotentialKind::Difference,
                        PotentialKind::ForwardLooking,
                    ][pot_idx];
                    let spec = PotentialSpec::new(potential, beta).unwrap();
                    TrainConfig {
                        model: if gaussian {
                            ModelKind::Gaussian
                        } else {
                            ModelKind::Tabular
                        },
                        num_states,
                        dim,
                        steps,
                        alpha_min: 0.4,
                        objective: ObjectiveSpec::new(objective, beta, clip_eps, kl_old, spec)
                            .unwrap(),
                        group_size: group,
                        rollouts_per_epoch: group * groups_per_epoch,
                        updates_per_epoch: updates,
                        epochs,
                        lr_theta,
                        lr_phi,
                        seed,
                        reward_rescale: rescale,
                        eval_every,
                        out_dir: "out".to_string(),
                        timing: false,
                    }
                },
            )
    }

    proptest! {
        #[test]
        fn serialise_parse_round_trips(config in arb_config()) {
            let text = serialise_config(&config);
            let reparsed = parse_config_str(&text, "prop").unwrap();
            prop_assert_eq!(serialise_config(&reparsed), text);
        }
    }
}
