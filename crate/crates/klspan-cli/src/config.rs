//! TOML experiment configuration: schema-validated, unknown keys
//! rejected, and every field documented in the README schema table.

use std::path::PathBuf;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use serde::Deserialize;

use klspan::instance::{
    gen_coverage_hard_instance, gen_random_instance, AlignmentInstance, RandomInstanceSpec,
    RewardNoise,
};
use klspan::mdp::{gen_autoregressive_gap_instance, gen_token_mdp, TokenMdp, TokenMdpSpec};
use klspan::serialize::{from_json, ParsedInstance};

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Learner seeds; one run (and one CSV) per seed.
    pub seeds: Vec<u64>,
    /// Output directory; falls back to --out, $KLSPAN_OUT, then "out".
    pub output: Option<PathBuf>,
    /// Attach the exact oracle and emit regret columns.
    #[serde(default)]
    pub oracle_checks: bool,
    pub instance: InstanceSpec,
    pub learner: LearnerSpec,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InstanceSpec {
    Random {
        dim: usize,
        n_prompts: usize,
        n_responses: usize,
        beta: f64,
        param_radius: f64,
        #[serde(default = "one")]
        r_max: f64,
        #[serde(default = "deterministic")]
        noise: RewardNoise,
        instance_seed: u64,
    },
    CoverageHard {
        c_star: f64,
        n_responses: usize,
        beta: f64,
        dim: usize,
        instance_seed: u64,
    },
    DnfRandom {
        n_vars: usize,
        n_clauses: usize,
        clause_width: usize,
        beta: f64,
        instance_seed: u64,
    },
    TokenMdp {
        horizon: usize,
        n_actions: usize,
        dim: usize,
        #[serde(default = "four")]
        n_states_per_layer: usize,
        beta: f64,
        param_radius: f64,
        #[serde(default = "one")]
        r_max: f64,
        #[serde(default = "yes")]
        realizable: bool,
        #[serde(default = "one")]
        feature_scale: f64,
        #[serde(default = "deterministic")]
        noise: RewardNoise,
        instance_seed: u64,
    },
    AutoregressiveGap {
        delta: f64,
    },
    File {
        path: PathBuf,
    },
}

fn one() -> f64 {
    1.0
}
fn four() -> usize {
    4
}
fn yes() -> bool {
    true
}
fn deterministic() -> RewardNoise {
    RewardNoise::Deterministic
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LearnerSpec {
    Spanner {
        t_prompt: usize,
        n_span: usize,
        t_exp: usize,
        #[serde(default = "default_delta")]
        delta: f64,
        #[serde(default = "one")]
        c_stat: f64,
        /// Coverage bound for the rejection threshold; omitted means
        /// "compute exactly from the instance".
        c_cov: Option<f64>,
        /// Direct overrides of the derived schedule.
        nu: Option<f64>,
        lambda: Option<f64>,
        m_rej: Option<f64>,
        delta_rej: Option<f64>,
    },
    OnlineDpo {
        t_rounds: usize,
        lambda: Option<f64>,
    },
    Xpo {
        t_rounds: usize,
        step_size: f64,
        iterations: usize,
        alpha: f64,
        #[serde(default = "yes")]
        backtracking: bool,
    },
    Mtss {
        t_iters: usize,
        n_reg: usize,
        n_span: usize,
        n_span_bar: usize,
        /// Rejection threshold; omitted means 4x the exact conditional
        /// coverage of the optimal policy.
        m_rej: Option<f64>,
        #[serde(default = "default_delta")]
        delta_rej: f64,
        #[serde(default = "half")]
        nu: f64,
        /// Target accuracy (sets lambda = eps / (c_log B^2) when lambda
        /// is not given).
        #[serde(default = "default_eps")]
        eps: f64,
        lambda: Option<f64>,
        #[serde(default = "default_c_log")]
        c_log: f64,
    },
}

fn default_delta() -> f64 {
    0.05
}
fn half() -> f64 {
    0.5
}
fn default_eps() -> f64 {
    0.15
}
fn default_c_log() -> f64 {
    4.0
}

/// Instance actually materialized from a spec.
#[derive(Clone)]
pub enum BuiltInstance {
    Bandit(Arc<AlignmentInstance>),
    Mdp(Arc<TokenMdp>),
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let config: ExperimentConfig = toml::from_str(text).context("config schema error")?;
    if config.seeds.is_empty() {
        bail!("config schema error: `seeds` must be non-empty");
    }
    Ok(config)
}

pub fn build_instance(spec: &InstanceSpec) -> Result<BuiltInstance> {
    Ok(match spec {
        InstanceSpec::Random {
            dim,
            n_prompts,
            n_responses,
            beta,
            param_radius,
            r_max,
            noise,
            instance_seed,
        } => BuiltInstance::Bandit(Arc::new(gen_random_instance(
            &RandomInstanceSpec {
                dim: *dim,
                n_prompts: *n_prompts,
                n_responses: *n_responses,
                beta: *beta,
                param_radius: *param_radius,
                r_max: *r_max,
                noise: *noise,
            },
            *instance_seed,
        )?)),
        InstanceSpec::CoverageHard { c_star, n_responses, beta, dim, instance_seed } => {
            BuiltInstance::Bandit(Arc::new(gen_coverage_hard_instance(
                *c_star,
                *n_responses,
                *beta,
                *dim,
                *instance_seed,
            )?))
        }
        InstanceSpec::DnfRandom { n_vars, n_clauses, clause_width, beta, instance_seed } => {
            let formula = klspan::dnf::gen_random_formula(
                *n_vars,
                *n_clauses,
                *clause_width,
                *instance_seed,
            );
            BuiltInstance::Bandit(Arc::new(klspan::dnf::gen_dnf_instance(&formula, *beta)?))
        }
        InstanceSpec::TokenMdp {
            horizon,
            n_actions,
            dim,
            n_states_per_layer,
            beta,
            param_radius,
            r_max,
            realizable,
            feature_scale,
            noise,
            instance_seed,
        } => BuiltInstance::Mdp(Arc::new(gen_token_mdp(
            &TokenMdpSpec {
                horizon: *horizon,
                n_actions: *n_actions,
                dim: *dim,
                n_states_per_layer: *n_states_per_layer,
                beta: *beta,
                param_radius: *param_radius,
                r_max: *r_max,
                realizable: *realizable,
                feature_scale: *feature_scale,
                noise: *noise,
            },
            *instance_seed,
        )?)),
        InstanceSpec::AutoregressiveGap { delta } => {
            BuiltInstance::Mdp(Arc::new(gen_autoregressive_gap_instance(*delta)?))
        }
        InstanceSpec::File { path } => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading instance file {}", path.display()))?;
            match from_json(&text)? {
                ParsedInstance::Bandit(inst) => BuiltInstance::Bandit(Arc::new(inst)),
                ParsedInstance::Mdp(mdp) => BuiltInstance::Mdp(Arc::new(mdp)),
            }
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const GOOD: &str = r#"
seeds = [0, 1]
oracle_checks = true

[instance]
kind = "random"
dim = 3
n_prompts = 2
n_responses = 6
beta = 0.4
param_radius = 2.0
instance_seed = 7

[learner]
kind = "spanner"
t_prompt = 10
n_span = 5
t_exp = 4
"#;

    #[test]
    fn parses_and_builds() {
        let cfg = parse_config(GOOD).unwrap();
        assert_eq!(cfg.seeds, vec![0, 1]);
        assert!(matches!(build_instance(&cfg.instance).unwrap(), BuiltInstance::Bandit(_)));
    }

    #[test]
    fn unknown_keys_rejected_with_path() {
        let bad = GOOD.replace("t_exp = 4", "t_exp = 4\nmystery_knob = 1");
        let err = parse_config(&bad).unwrap_err();
        let msg = format!("{err:#}");
        assert!(msg.contains("mystery_knob"), "{msg}");
    }

    #[test]
    fn empty_seeds_rejected() {
        let bad = GOOD.replace("seeds = [0, 1]", "seeds = []");
        assert!(parse_config(&bad).is_err());
    }
}
