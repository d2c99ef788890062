//! Passive and training-time-active baselines: reward-based online DPO
//! (least-squares refit, on-policy pair sampling) and its
//! optimism-regularized variant with a log-likelihood bonus, optimized
//! by projected gradient descent.

use rand_chacha::ChaCha12Rng;
use thiserror::Error;

use crate::exact::{self, PolicyTable};
use crate::instance::{AlignmentInstance, ParamGeometry};
use crate::numeric::{dot, kahan_sum, log_weighted_sum_exp};
use crate::oracle::{OracleError, OracleHandle, QueryLedger};
use crate::spanner::{fit_relative_pairs, LabeledPair};

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("gradient became non-finite at round {round}, inner step {step}")]
    NonFiniteGradient { round: usize, step: usize },
}

/// Gradient-descent settings for the optimism-regularized baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct GdConfig {
    pub step_size: f64,
    pub iterations: usize,
    /// Optimism coefficient on the accumulated log-likelihood bonus.
    pub alpha: f64,
    /// Halve the step until the objective stops increasing.
    pub backtracking: bool,
}

impl GdConfig {
    pub fn validate(&self) -> Result<(), BaselineError> {
        if !(self.step_size > 0.0) {
            return Err(BaselineError::InvalidConfig(format!("step_size = {}", self.step_size)));
        }
        if self.iterations == 0 {
            return Err(BaselineError::InvalidConfig("iterations must be >= 1".into()));
        }
        Ok(())
    }
}

/// Per-round record shared by both baselines.
#[derive(Debug, Clone)]
pub struct BaselineRound {
    pub round: usize,
    pub ledger: QueryLedger,
    pub exact_regret: Option<f64>,
    /// Achieved objective after the inner optimization (gradient
    /// baseline only).
    pub objective: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct BaselineMetrics {
    pub rounds: Vec<BaselineRound>,
    pub ledger: QueryLedger,
    /// Exact regret of the final fitted policy, when ground truth is
    /// attached.
    pub final_exact_regret: Option<f64>,
}

/// Exact policy table of the linear softmax at parameter theta.
pub fn theta_policy(inst: &AlignmentInstance, theta: &[f64]) -> PolicyTable {
    let probs = (0..inst.n_prompts())
        .map(|x| {
            let f: Vec<f64> =
                (0..inst.n_responses()).map(|y| dot(theta, &inst.features[x][y])).collect();
            exact::exact_softmax(inst, &f, x).0
        })
        .collect();
    PolicyTable { probs }
}

fn exact_regret_of_theta(inst: &AlignmentInstance, theta: &[f64]) -> f64 {
    let (_, j_star) = exact::exact_optimal(inst);
    let j = exact::exact_jbeta(inst, &theta_policy(inst, theta)).expect_finite("J(pi_theta)");
    j_star - j
}

/// Reward-based online DPO: each round refits the reward model on all
/// accumulated pairs (the same projected-least-squares path the spanner
/// learner uses) and samples both responses on-policy through the
/// strong oracle.
pub fn online_dpo(
    oracle: &mut OracleHandle,
    t_rounds: usize,
    lambda: f64,
    oracle_checks: bool,
) -> Result<(Vec<Vec<f64>>, BaselineMetrics), BaselineError> {
    let inst_dim = oracle.instance().dim;
    let geometry = oracle.instance().geometry;
    let mut data: Vec<LabeledPair> = Vec::with_capacity(t_rounds);
    let mut trajectory = Vec::with_capacity(t_rounds + 1);
    let mut rounds = Vec::with_capacity(t_rounds);
    for t in 0..t_rounds {
        let theta = fit_relative_pairs(&data, &[], inst_dim, lambda, &geometry);
        let x = oracle.draw_prompt();
        let (y1, f1) = oracle.strong_sample(x, &theta)?;
        let (y2, f2) = oracle.strong_sample(x, &theta)?;
        let r1 = oracle.reward_query(x, y1)?;
        let r2 = oracle.reward_query(x, y2)?;
        let rel = f1.iter().zip(&f2).map(|(a, b)| a - b).collect();
        data.push(LabeledPair { x, y1, y2, r1, r2, rel_feature: rel });
        let exact_regret =
            oracle_checks.then(|| exact_regret_of_theta(oracle.instance(), &theta));
        rounds.push(BaselineRound { round: t, ledger: oracle.ledger, exact_regret, objective: None });
        trajectory.push(theta);
    }
    // Final refit on the full dataset.
    let theta_final = fit_relative_pairs(&data, &[], inst_dim, lambda, &geometry);
    let final_exact_regret =
        oracle_checks.then(|| exact_regret_of_theta(oracle.instance(), &theta_final));
    trajectory.push(theta_final);
    let metrics = BaselineMetrics { rounds, ledger: oracle.ledger, final_exact_regret };
    Ok((trajectory, metrics))
}

/// Exact log-partition and mean feature of pi_theta at a prompt,
/// computed by enumeration. The harness hands this to [`xpo`] as the
/// partition closure.
pub fn exact_partition(
    inst: &AlignmentInstance,
    x: usize,
    theta: &[f64],
) -> (f64, Vec<f64>) {
    let beta = inst.beta;
    let scaled: Vec<f64> = (0..inst.n_responses())
        .map(|y| dot(theta, &inst.features[x][y]) / beta)
        .collect();
    let log_z = log_weighted_sum_exp(&inst.pi_ref[x], &scaled);
    let mut mean = vec![0.0; inst.dim];
    for y in 0..inst.n_responses() {
        let p = inst.pi_ref[x][y];
        if p == 0.0 {
            continue;
        }
        let w = p * (scaled[y] - log_z).exp();
        for (m, &phi) in mean.iter_mut().zip(&inst.features[x][y]) {
            *m += w * phi;
        }
    }
    (log_z, mean)
}

/// The optimism-regularized objective on a fixed dataset:
/// `alpha * sum_i log pi_theta(y2_i | x_i) + sum_i (<theta, rel_i> - dr_i)^2`,
/// with the theta-dependent part of `log pi_theta(y|x)` equal to
/// `<theta, phi(x,y)>/beta - log Z_theta(x)`.
fn xpo_objective<P>(data: &[LabeledPair], features_y2: &[Vec<f64>], theta: &[f64], alpha: f64, beta: f64, partition: &P) -> f64
where
    P: Fn(usize, &[f64]) -> (f64, Vec<f64>),
{
    let bonus = kahan_sum(data.iter().zip(features_y2).map(|(p, phi2)| {
        let (log_z, _) = partition(p.x, theta);
        dot(theta, phi2) / beta - log_z
    }));
    let fit = kahan_sum(data.iter().map(|p| {
        let r = dot(theta, &p.rel_feature) - (p.r1 - p.r2);
        r * r
    }));
    alpha * bonus + fit
}

fn xpo_gradient<P>(
    data: &[LabeledPair],
    features_y2: &[Vec<f64>],
    theta: &[f64],
    alpha: f64,
    beta: f64,
    partition: &P,
) -> Vec<f64>
where
    P: Fn(usize, &[f64]) -> (f64, Vec<f64>),
{
    let dim = theta.len();
    let mut grad = vec![0.0; dim];
    for (p, phi2) in data.iter().zip(features_y2) {
        let (_, mean) = partition(p.x, theta);
        for i in 0..dim {
            grad[i] += alpha * (phi2[i] - mean[i]) / beta;
        }
        let resid = 2.0 * (dot(theta, &p.rel_feature) - (p.r1 - p.r2));
        for i in 0..dim {
            grad[i] += resid * p.rel_feature[i];
        }
    }
    grad
}

/// Optimism-regularized baseline: per round, minimize the bonus-plus-
/// squared-loss objective by projected gradient descent (the objective
/// is non-convex in general; the achieved value is reported, with no
/// optimality claim), then sample the first response on-policy and the
/// second from the reference.
pub fn xpo<P>(
    oracle: &mut OracleHandle,
    t_rounds: usize,
    cfg: &GdConfig,
    partition: &P,
    _rng: &mut ChaCha12Rng,
    oracle_checks: bool,
) -> Result<(Vec<Vec<f64>>, BaselineMetrics), BaselineError>
where
    P: Fn(usize, &[f64]) -> (f64, Vec<f64>),
{
    cfg.validate()?;
    let dim = oracle.instance().dim;
    let beta = oracle.beta();
    let geometry = oracle.instance().geometry;
    let mut data: Vec<LabeledPair> = Vec::new();
    let mut features_y2: Vec<Vec<f64>> = Vec::new();
    let mut theta = vec![0.0; dim];
    let mut trajectory = Vec::with_capacity(t_rounds + 1);
    let mut rounds = Vec::with_capacity(t_rounds);
    for t in 0..t_rounds {
        let (next_theta, objective) = minimize_xpo(
            &data,
            &features_y2,
            theta.clone(),
            cfg,
            beta,
            &geometry,
            partition,
            t,
        )?;
        theta = next_theta;
        let x = oracle.draw_prompt();
        let (y1, _) = oracle.strong_sample(x, &theta)?;
        let (y2, phi2) = oracle.weak_sample(x)?;
        let r1 = oracle.reward_query(x, y1)?;
        let r2 = oracle.reward_query(x, y2)?;
        let rel = oracle.instance().relative_feature(x, y1, y2);
        data.push(LabeledPair { x, y1, y2, r1, r2, rel_feature: rel });
        features_y2.push(phi2);
        let exact_regret =
            oracle_checks.then(|| exact_regret_of_theta(oracle.instance(), &theta));
        rounds.push(BaselineRound {
            round: t,
            ledger: oracle.ledger,
            exact_regret,
            objective: Some(objective),
        });
        trajectory.push(theta.clone());
    }
    let final_exact_regret =
        oracle_checks.then(|| exact_regret_of_theta(oracle.instance(), &theta));
    trajectory.push(theta);
    let metrics = BaselineMetrics { rounds, ledger: oracle.ledger, final_exact_regret };
    Ok((trajectory, metrics))
}

#[allow(clippy::too_many_arguments)]
fn minimize_xpo<P>(
    data: &[LabeledPair],
    features_y2: &[Vec<f64>],
    init: Vec<f64>,
    cfg: &GdConfig,
    beta: f64,
    geometry: &ParamGeometry,
    partition: &P,
    round: usize,
) -> Result<(Vec<f64>, f64), BaselineError>
where
    P: Fn(usize, &[f64]) -> (f64, Vec<f64>),
{
    let mut theta = geometry.project(init);
    let mut obj = xpo_objective(data, features_y2, &theta, cfg.alpha, beta, partition);
    for step in 0..cfg.iterations {
        let grad = xpo_gradient(data, features_y2, &theta, cfg.alpha, beta, partition);
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(BaselineError::NonFiniteGradient { round, step });
        }
        let mut eta = cfg.step_size;
        loop {
            let candidate: Vec<f64> =
                theta.iter().zip(&grad).map(|(t, g)| t - eta * g).collect();
            let candidate = geometry.project(candidate);
            let cand_obj =
                xpo_objective(data, features_y2, &candidate, cfg.alpha, beta, partition);
            if !cfg.backtracking || cand_obj <= obj || eta < 1e-12 {
                if cand_obj <= obj || !cfg.backtracking {
                    theta = candidate;
                    obj = cand_obj;
                }
                break;
            }
            eta *= 0.5;
        }
    }
    Ok((theta, obj))
}
