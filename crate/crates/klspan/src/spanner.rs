//! Spanner-based inference-time exploration for linear softmax policies.
//!
//! Phase one builds a core set of prompt/response-pair tuples whose
//! relative-feature outer products cover the directions the reference
//! policy can reach (the "spanner"); phase two runs on-policy
//! exploration with truncated softmax policies sampled by rejection,
//! refitting the reward model each round. The returned policy is the
//! uniform mixture over the per-round truncated-policy snapshots.

use std::collections::HashMap;
use std::sync::Arc;

use rand_chacha::ChaCha12Rng;
use thiserror::Error;

use crate::exact::{self, PolicyTable};
use crate::instance::AlignmentInstance;
use crate::linalg::{projected_least_squares, BallConstraint, DesignMatrix, LinalgError};
use crate::numeric::dot;
use crate::oracle::{OracleError, OracleHandle, QueryLedger};
use crate::rejection::{softmax_sampler, RejectionConfig, RejectionError};

#[derive(Debug, Error)]
pub enum SpannerError {
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Rejection(#[from] RejectionError),
    #[error("invalid spanner params: {0}")]
    InvalidParams(String),
}

/// Tuning for one spanner-sampling run.
#[derive(Debug, Clone, PartialEq)]
pub struct SpannerParams {
    /// Spanner-phase rounds.
    pub t_prompt: usize,
    /// Inner pair draws per spanner round.
    pub n_span: usize,
    /// Exploration rounds.
    pub t_exp: usize,
    /// Constant in the eps_stat schedule.
    pub c_stat: f64,
    pub eps_stat: f64,
    /// Truncation radius.
    pub nu: f64,
    /// Ridge weight.
    pub lambda: f64,
    /// Rejection threshold.
    pub m_rej: f64,
    /// Rejection failure probability.
    pub delta_rej: f64,
}

impl SpannerParams {
    /// Schedule-derived parameters: `eps_stat = c sqrt(d r_max^2 log(B
    /// T_exp / (r_max delta)))`, `nu = beta / eps_stat`,
    /// `lambda = (r_max / B)^2`, `m_rej = 8 e^2 c_cov`,
    /// `delta_rej = 1 / t_exp`. The coverage bound `c_cov` is either the
    /// exact-oracle value or a user-supplied upper bound.
    pub fn derive(
        dim: usize,
        beta: f64,
        r_max: f64,
        param_radius: f64,
        delta: f64,
        c_stat: f64,
        c_cov: f64,
        t_prompt: usize,
        n_span: usize,
        t_exp: usize,
    ) -> Result<Self, SpannerError> {
        if t_exp == 0 {
            return Err(SpannerError::InvalidParams("t_exp must be positive".into()));
        }
        let eps_stat = c_stat
            * (dim as f64 * r_max * r_max * (param_radius * t_exp as f64 / (r_max * delta)).ln())
                .sqrt();
        let nu = beta / eps_stat;
        let lambda = (r_max / param_radius).powi(2);
        let m_rej = 8.0 * std::f64::consts::E.powi(2) * c_cov;
        let delta_rej = 1.0 / t_exp as f64;
        let p = Self { t_prompt, n_span, t_exp, c_stat, eps_stat, nu, lambda, m_rej, delta_rej };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), SpannerError> {
        for (name, v) in [
            ("eps_stat", self.eps_stat),
            ("nu", self.nu),
            ("lambda", self.lambda),
            ("m_rej", self.m_rej),
            ("delta_rej", self.delta_rej),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(SpannerError::InvalidParams(format!("{name} = {v}")));
            }
        }
        if self.delta_rej >= 1.0 {
            return Err(SpannerError::InvalidParams("delta_rej must be < 1".into()));
        }
        Ok(())
    }
}

/// One labeled spanner or exploration tuple.
#[derive(Debug, Clone)]
pub struct LabeledPair {
    pub x: usize,
    pub y1: usize,
    pub y2: usize,
    pub r1: f64,
    pub r2: f64,
    /// phi(x, y1) - phi(x, y2), as revealed by the sampling oracle.
    pub rel_feature: Vec<f64>,
}

/// Output of the spanner-construction phase.
#[derive(Debug)]
pub struct SpannerState {
    pub design: DesignMatrix,
    pub core_set: Vec<(usize, usize, usize)>,
    pub data: Vec<LabeledPair>,
}

impl SpannerState {
    /// Spanner-size bound `k <= 2 d log(1 + 4k/(d lambda)) / nu^2`,
    /// which holds on every run by the elliptic potential argument.
    pub fn size_bound_holds(&self, nu: f64) -> bool {
        let k = self.core_set.len() as f64;
        if k == 0.0 {
            return true;
        }
        let d = self.design.dim() as f64;
        let lambda = self.design.lambda();
        k <= 2.0 * d * (1.0 + 4.0 * k / (d * lambda)).ln() / (nu * nu)
    }
}

/// A frozen per-round policy: reference tilted by the truncated linear
/// reward model, paired with a fresh reference draw per sample.
#[derive(Debug, Clone)]
pub struct TruncatedPolicySnapshot {
    pub theta: Vec<f64>,
    pub design: Arc<DesignMatrix>,
    pub nu: f64,
}

impl TruncatedPolicySnapshot {
    /// `r(x, y, y') = <theta, phi(x,y)-phi(x,y')> 1{ |phi(x,y)-phi(x,y')|_{Sigma^-1} <= nu }`.
    pub fn truncated_reward(&self, rel_feature: &[f64]) -> f64 {
        let msq = self
            .design
            .mahalanobis_sq(rel_feature)
            .expect("snapshot features have the design dimension");
        if msq <= self.nu * self.nu {
            dot(&self.theta, rel_feature)
        } else {
            0.0
        }
    }
}

/// Uniform mixture over per-round truncated-policy snapshots.
#[derive(Debug, Clone)]
pub struct PolicyMixture {
    pub snapshots: Vec<TruncatedPolicySnapshot>,
    pub beta: f64,
    pub m_rej: f64,
    pub delta_rej: f64,
}

/// Per-round diagnostics emitted to the harness.
#[derive(Debug, Clone)]
pub struct SpannerRound {
    pub round: usize,
    pub ledger: QueryLedger,
    /// |theta_t - theta*|_Sigma_span, when ground truth is attached.
    pub theta_err_sigma: Option<f64>,
    /// J_beta(pi*) - J_beta(snapshot marginal), when ground truth is attached.
    pub exact_regret: Option<f64>,
    pub rejection_accepted: bool,
    pub rejection_queries: u64,
}

/// Run metrics for a full spanner-sampling run.
#[derive(Debug, Clone)]
pub struct SpannerMetrics {
    pub spanner_size: usize,
    pub ledger: QueryLedger,
    pub rounds: Vec<SpannerRound>,
    /// Mean over snapshots of the exact regret (oracle-attached runs).
    pub exact_mixture_regret: Option<f64>,
}

/// Spanner-construction phase: per prompt round, scan up to `n_span`
/// reference pairs and absorb the first whose relative feature is still
/// uncertain under the running design matrix.
pub fn run_spanner_phase(
    oracle: &mut OracleHandle,
    params: &SpannerParams,
) -> Result<SpannerState, SpannerError> {
    let dim = oracle.instance().dim;
    let mut design = DesignMatrix::new(dim, params.lambda)?;
    let mut core_set = Vec::new();
    let mut data = Vec::new();
    let nu_sq = params.nu * params.nu;
    for _ in 0..params.t_prompt {
        let x = oracle.draw_prompt();
        for _ in 0..params.n_span {
            let (y1, f1) = oracle.weak_sample(x)?;
            let (y2, f2) = oracle.weak_sample(x)?;
            let rel: Vec<f64> = f1.iter().zip(&f2).map(|(a, b)| a - b).collect();
            if design.mahalanobis_sq(&rel)? > nu_sq {
                let r1 = oracle.reward_query(x, y1)?;
                let r2 = oracle.reward_query(x, y2)?;
                design.rank_one_update(&rel)?;
                core_set.push((x, y1, y2));
                data.push(LabeledPair { x, y1, y2, r1, r2, rel_feature: rel });
                break;
            }
        }
    }
    Ok(SpannerState { design, core_set, data })
}

/// Shared reward-model fit on relative-feature pairs: ridge least
/// squares followed by projection onto the instance's parameter set.
/// Both the spanner learner and the DPO-style baselines go through this
/// exact path.
pub fn fit_relative_pairs(
    data_span: &[LabeledPair],
    data_exp: &[LabeledPair],
    dim: usize,
    lambda: f64,
    geometry: &crate::instance::ParamGeometry,
) -> Vec<f64> {
    let rows: Vec<(Vec<f64>, f64)> = data_exp
        .iter()
        .chain(data_span)
        .map(|p| (p.rel_feature.clone(), p.r1 - p.r2))
        .collect();
    match *geometry {
        crate::instance::ParamGeometry::Ball { radius } => {
            projected_least_squares(&rows, dim, lambda, BallConstraint::new(radius))
        }
        crate::instance::ParamGeometry::BoxLinf { .. } => {
            let raw = projected_least_squares(&rows, dim, lambda, BallConstraint::new(f64::MAX));
            geometry.project(raw)
        }
    }
}

/// Exploration phase: round t fits the reward model on everything seen
/// so far, snapshots the truncated policy, then samples a pair from it
/// (second response from the reference, first via rejection sampling on
/// the truncated reward) and records both rewards.
pub fn run_exploration_phase(
    oracle: &mut OracleHandle,
    state: SpannerState,
    params: &SpannerParams,
    rng: &mut ChaCha12Rng,
) -> Result<(PolicyMixture, Vec<SpannerRound>), SpannerError> {
    let dim = oracle.instance().dim;
    let beta = oracle.beta();
    let geometry = oracle.instance().geometry;
    let design = Arc::new(state.design);
    let data_span = state.data;
    let mut data_exp: Vec<LabeledPair> = Vec::with_capacity(params.t_exp);
    let mut snapshots = Vec::with_capacity(params.t_exp);
    let mut rounds = Vec::with_capacity(params.t_exp);
    let cfg = RejectionConfig::new(beta, params.m_rej, params.delta_rej)?;

    for t in 0..params.t_exp {
        let theta = fit_relative_pairs(&data_span, &data_exp, dim, params.lambda, &geometry);
        let snapshot =
            TruncatedPolicySnapshot { theta, design: Arc::clone(&design), nu: params.nu };

        let x = oracle.draw_prompt();
        let (y2, phi_y2) = oracle.weak_sample(x)?;
        let r2 = oracle.reward_query(x, y2)?;

        let outcome = sample_truncated(oracle, &snapshot, x, &phi_y2, &cfg, rng)?;
        let y1 = outcome.response;
        let r1 = oracle.reward_query(x, y1)?;
        let rel = oracle.instance().relative_feature(x, y1, y2);
        data_exp.push(LabeledPair { x, y1, y2, r1, r2, rel_feature: rel });

        rounds.push(SpannerRound {
            round: t,
            ledger: oracle.ledger,
            theta_err_sigma: None,
            exact_regret: None,
            rejection_accepted: outcome.accepted,
            rejection_queries: outcome.queries_used,
        });
        snapshots.push(snapshot);
    }
    Ok((
        PolicyMixture { snapshots, beta, m_rej: params.m_rej, delta_rej: params.delta_rej },
        rounds,
    ))
}

/// Draws y ~ truncated-softmax(x, y2) via rejection sampling against the
/// weak oracle. Truncated-reward evaluations are memoized per response
/// within the call.
fn sample_truncated(
    oracle: &mut OracleHandle,
    snapshot: &TruncatedPolicySnapshot,
    x: usize,
    phi_y2: &[f64],
    cfg: &RejectionConfig,
    rng: &mut ChaCha12Rng,
) -> Result<crate::rejection::RejectionOutcome, SpannerError> {
    let mut memo: HashMap<usize, f64> = HashMap::new();
    let mut oracle_err = None;
    let outcome = {
        let mut draw = |_: &mut ChaCha12Rng| -> (usize, f64) {
            match oracle.weak_sample(x) {
                Ok((y, phi)) => {
                    let f = *memo.entry(y).or_insert_with(|| {
                        let rel: Vec<f64> =
                            phi.iter().zip(phi_y2).map(|(a, b)| a - b).collect();
                        snapshot.truncated_reward(&rel)
                    });
                    (y, f)
                }
                Err(e) => {
                    oracle_err = Some(e);
                    (0, 0.0)
                }
            }
        };
        softmax_sampler(&mut draw, cfg, rng)
    };
    if let Some(e) = oracle_err {
        return Err(SpannerError::Oracle(e));
    }
    Ok(outcome)
}

/// End-to-end spanner sampling: spanner phase, exploration phase, and
/// (when ground truth is attached) exact-regret metrics computed by
/// enumerating each snapshot's induced marginal policy.
pub fn spanner_sampling(
    oracle: &mut OracleHandle,
    params: &SpannerParams,
    rng: &mut ChaCha12Rng,
    oracle_checks: bool,
) -> Result<(PolicyMixture, SpannerMetrics), SpannerError> {
    params.validate()?;
    let state = run_spanner_phase(oracle, params)?;
    let spanner_size = state.core_set.len();
    let (mixture, mut rounds) = run_exploration_phase(oracle, state, params, rng)?;
    let exact_mixture_regret = if oracle_checks {
        let inst = oracle.instance();
        let (_, j_star) = exact::exact_optimal(inst);
        let mut acc = crate::numeric::KahanSum::new();
        for (snap, round) in mixture.snapshots.iter().zip(&mut rounds) {
            let marginal = snapshot_marginal(inst, snap, mixture.m_rej, snapshot_budget(&mixture));
            let j = exact::exact_jbeta(inst, &marginal).expect_finite("J(snapshot)");
            let regret = j_star - j;
            round.exact_regret = Some(regret);
            round.theta_err_sigma = Some(theta_err_sigma(inst, snap));
            acc.add(regret);
        }
        Some(acc.value() / mixture.snapshots.len().max(1) as f64)
    } else {
        None
    };
    let metrics = SpannerMetrics {
        spanner_size,
        ledger: oracle.ledger,
        rounds,
        exact_mixture_regret,
    };
    Ok((mixture, metrics))
}

fn snapshot_budget(mix: &PolicyMixture) -> u64 {
    RejectionConfig::new(mix.beta, mix.m_rej, mix.delta_rej)
        .expect("mixture carries a valid rejection config")
        .n_budget
}

/// |theta - theta*|_Sigma_span (ground-truth diagnostic).
pub fn theta_err_sigma(inst: &AlignmentInstance, snap: &TruncatedPolicySnapshot) -> f64 {
    let diff: Vec<f64> =
        snap.theta.iter().zip(&inst.theta_star).map(|(a, b)| a - b).collect();
    snap.design.sigma().quad_form(&diff).sqrt()
}

/// Samples one response from the mixture policy: pick a snapshot
/// uniformly, draw the pairing response from the reference, then run the
/// rejection sampler on the truncated reward.
pub fn sample_from_mixture(
    mix: &PolicyMixture,
    x: usize,
    oracle: &mut OracleHandle,
    rng: &mut ChaCha12Rng,
) -> Result<(usize, u64), SpannerError> {
    use rand::Rng;
    let snap = &mix.snapshots[rng.gen_range(0..mix.snapshots.len())];
    let (_, phi_y2) = oracle.weak_sample(x)?;
    let cfg = RejectionConfig::new(mix.beta, mix.m_rej, mix.delta_rej)?;
    let outcome = sample_truncated(oracle, snap, x, &phi_y2, &cfg, rng)?;
    Ok((outcome.response, outcome.queries_used + 1))
}

/// Exact conditional law of one snapshot's sampled policy at (x, y2):
/// the rejection output law of the truncated tilt (ground-truth side).
pub fn snapshot_conditional_law(
    inst: &AlignmentInstance,
    snap: &TruncatedPolicySnapshot,
    x: usize,
    y2: usize,
    m_rej: f64,
    n_budget: u64,
) -> Vec<f64> {
    let f_row: Vec<f64> = (0..inst.n_responses())
        .map(|y| snap.truncated_reward(&inst.relative_feature(x, y, y2)))
        .collect();
    exact::rejection_output_law(inst, &f_row, x, m_rej, n_budget)
}

/// Exact marginal policy of one snapshot: the conditional law averaged
/// over the reference draw of the pairing response.
pub fn snapshot_marginal(
    inst: &AlignmentInstance,
    snap: &TruncatedPolicySnapshot,
    m_rej: f64,
    n_budget: u64,
) -> PolicyTable {
    let probs = (0..inst.n_prompts())
        .map(|x| {
            let mut row = vec![0.0; inst.n_responses()];
            for y2 in 0..inst.n_responses() {
                let w = inst.pi_ref[x][y2];
                if w == 0.0 {
                    continue;
                }
                let cond = snapshot_conditional_law(inst, snap, x, y2, m_rej, n_budget);
                for (acc, c) in row.iter_mut().zip(cond) {
                    *acc += w * c;
                }
            }
            row
        })
        .collect();
    PolicyTable { probs }
}

/// Exact marginal of the uniform mixture (average of snapshot marginals).
pub fn mixture_marginal(inst: &AlignmentInstance, mix: &PolicyMixture) -> PolicyTable {
    let n = mix.snapshots.len();
    let budget = snapshot_budget(mix);
    let mut probs = vec![vec![0.0; inst.n_responses()]; inst.n_prompts()];
    for snap in &mix.snapshots {
        let marg = snapshot_marginal(inst, snap, mix.m_rej, budget);
        for (acc_row, row) in probs.iter_mut().zip(marg.probs) {
            for (a, v) in acc_row.iter_mut().zip(row) {
                *a += v / n as f64;
            }
        }
    }
    PolicyTable { probs }
}
