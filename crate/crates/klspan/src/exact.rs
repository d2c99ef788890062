//! Brute-force ground truth for bandit instances: exact softmax tilts,
//! optimal KL-regularized policies and values, coverage coefficients,
//! and the exact output law of the rejection sampler.
//!
//! Everything here enumerates the finite prompt/response tables in double
//! precision with compensated summation and log-sum-exp normalizers, and
//! is kept independent of the learner-side code it is used to check.

use crate::instance::AlignmentInstance;
use crate::numeric::{kahan_sum, log_weighted_sum_exp, KahanSum};

/// A conditional policy table pi(y | x).
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyTable {
    pub probs: Vec<Vec<f64>>,
}

impl PolicyTable {
    pub fn uniform(n_prompts: usize, n_responses: usize) -> Self {
        Self { probs: vec![vec![1.0 / n_responses as f64; n_responses]; n_prompts] }
    }

    pub fn validate(&self) -> Result<(), String> {
        for (x, row) in self.probs.iter().enumerate() {
            if row.iter().any(|&p| p < 0.0 || !p.is_finite()) {
                return Err(format!("row {x} has a negative or non-finite entry"));
            }
            let s = kahan_sum(row.iter().copied());
            if (s - 1.0).abs() > 1e-12 {
                return Err(format!("row {x} sums to {s}"));
            }
        }
        Ok(())
    }
}

/// A KL-divergence-bearing value: infinite when the left policy puts
/// mass where the reference has none.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KlValue {
    Finite(f64),
    Infinite,
}

impl KlValue {
    pub fn finite(self) -> Option<f64> {
        match self {
            KlValue::Finite(v) => Some(v),
            KlValue::Infinite => None,
        }
    }

    pub fn expect_finite(self, what: &str) -> f64 {
        self.finite().unwrap_or_else(|| panic!("{what} is infinite"))
    }
}

/// Exact softmax tilt of the reference policy at prompt `x`:
/// `pi_f(y|x) ∝ pi_ref(y|x) exp(f(x,y)/beta)` with normalizer
/// `Z(x) = E_{pi_ref}[exp(f/beta)]`, returned in log space as well.
pub fn exact_softmax(
    instance: &AlignmentInstance,
    f_row: &[f64],
    x: usize,
) -> (Vec<f64>, f64, f64) {
    let beta = instance.beta;
    let pi_ref = &instance.pi_ref[x];
    let scaled: Vec<f64> = f_row.iter().map(|&v| v / beta).collect();
    let log_z = log_weighted_sum_exp(pi_ref, &scaled);
    let probs: Vec<f64> = pi_ref
        .iter()
        .zip(&scaled)
        .map(|(&p, &s)| if p > 0.0 { p * (s - log_z).exp() } else { 0.0 })
        .collect();
    (probs, log_z.exp(), log_z)
}

/// Optimal KL-regularized policy and value: pi*(.|x) is the softmax of
/// the true reward table, and J_beta(pi*) = E_rho[beta log Z_{r*}(x)].
pub fn exact_optimal(instance: &AlignmentInstance) -> (PolicyTable, f64) {
    let mut probs = Vec::with_capacity(instance.n_prompts());
    let mut j = KahanSum::new();
    for x in 0..instance.n_prompts() {
        let (row, _, log_z) = exact_softmax(instance, &instance.reward_mean[x], x);
        j.add(instance.rho[x] * instance.beta * log_z);
        probs.push(row);
    }
    (PolicyTable { probs }, j.value())
}

/// Exact KL-regularized objective of an arbitrary policy table:
/// `J_beta(pi) = E[r*] - beta KL(pi || pi_ref)`.
pub fn exact_jbeta(instance: &AlignmentInstance, policy: &PolicyTable) -> KlValue {
    let mut total = KahanSum::new();
    for x in 0..instance.n_prompts() {
        match jbeta_at_prompt(instance, &policy.probs[x], x) {
            KlValue::Finite(v) => total.add(instance.rho[x] * v),
            KlValue::Infinite => return KlValue::Infinite,
        }
    }
    KlValue::Finite(total.value())
}

/// Per-prompt J_beta contribution.
pub fn jbeta_at_prompt(instance: &AlignmentInstance, row: &[f64], x: usize) -> KlValue {
    let mut acc = KahanSum::new();
    for y in 0..instance.n_responses() {
        let p = row[y];
        if p == 0.0 {
            continue;
        }
        let q = instance.pi_ref[x][y];
        if q == 0.0 {
            return KlValue::Infinite;
        }
        acc.add(p * (instance.reward_mean[x][y] - instance.beta * (p / q).ln()));
    }
    KlValue::Finite(acc.value())
}

/// Exact KL divergence between two policy tables under the prompt
/// distribution.
pub fn exact_kl(instance: &AlignmentInstance, p: &PolicyTable, q: &PolicyTable) -> KlValue {
    let mut total = KahanSum::new();
    for x in 0..instance.n_prompts() {
        let mut acc = KahanSum::new();
        for y in 0..instance.n_responses() {
            let pv = p.probs[x][y];
            if pv == 0.0 {
                continue;
            }
            let qv = q.probs[x][y];
            if qv == 0.0 {
                return KlValue::Infinite;
            }
            acc.add(pv * (pv / qv).ln());
        }
        total.add(instance.rho[x] * acc.value());
    }
    KlValue::Finite(total.value())
}

/// Coverage coefficient sup_{x,y} pi(y|x) / pi_ref(y|x) plus the
/// per-prompt suprema. Ratios 0/0 count as 0.
pub fn coverage_coefficients(instance: &AlignmentInstance, policy: &PolicyTable) -> (f64, Vec<f64>) {
    let mut per_prompt = Vec::with_capacity(instance.n_prompts());
    let mut global = 0.0f64;
    for x in 0..instance.n_prompts() {
        let mut worst = 0.0f64;
        for y in 0..instance.n_responses() {
            let p = policy.probs[x][y];
            let q = instance.pi_ref[x][y];
            if p == 0.0 {
                continue;
            }
            let ratio = if q == 0.0 { f64::INFINITY } else { p / q };
            worst = worst.max(ratio);
        }
        global = global.max(worst);
        per_prompt.push(worst);
    }
    (global, per_prompt)
}

/// `C_inf = 1 ∨ sup_y pi_f(y|x)/pi_ref(y|x)` for the softmax tilt of
/// `f_row` at prompt `x` (the rejection-sampling threshold quantity).
pub fn c_inf(instance: &AlignmentInstance, f_row: &[f64], x: usize) -> f64 {
    let (probs, _, _) = exact_softmax(instance, f_row, x);
    let mut worst = 1.0f64;
    for y in 0..instance.n_responses() {
        let q = instance.pi_ref[x][y];
        if q > 0.0 {
            worst = worst.max(probs[y] / q);
        }
    }
    worst
}

/// Both sides of the KL-regret identity
/// `J_beta(pi_{f*}) - J_beta(pi_f) = beta KL(pi_f || pi_{f*})`
/// computed by independent routes; returns (lhs, rhs).
pub fn kl_regret_identity(instance: &AlignmentInstance, f_table: &[Vec<f64>]) -> (f64, f64) {
    let (pi_star, j_star) = exact_optimal(instance);
    let pi_f = PolicyTable {
        probs: (0..instance.n_prompts())
            .map(|x| exact_softmax(instance, &f_table[x], x).0)
            .collect(),
    };
    let j_f = exact_jbeta(instance, &pi_f).expect_finite("J_beta(pi_f)");
    let lhs = j_star - j_f;
    let rhs = instance.beta * exact_kl(instance, &pi_f, &pi_star).expect_finite("KL(pi_f||pi*)");
    (lhs, rhs)
}

/// Exact output law of the rejection sampler run with threshold `m`,
/// budget `n_rounds`, and the *exact* normalizer of the tilt: per-round
/// acceptance `min(1, exp(f/beta)/(Z m))`, and a fresh reference draw on
/// total failure. This is the ground-truth law the sampled policy is
/// compared against (the sampler itself estimates Z from data).
pub fn rejection_output_law(
    instance: &AlignmentInstance,
    f_row: &[f64],
    x: usize,
    m: f64,
    n_rounds: u64,
) -> Vec<f64> {
    let pi_ref = &instance.pi_ref[x];
    let (_, _, log_z) = exact_softmax(instance, f_row, x);
    let accept: Vec<f64> = (0..instance.n_responses())
        .map(|y| (f_row[y] / instance.beta - log_z - m.ln()).min(0.0).exp())
        .collect();
    let p_bar = kahan_sum(pi_ref.iter().zip(&accept).map(|(&q, &a)| q * a));
    // P(no acceptance in n rounds); log-space for tiny values.
    let log_fail = (n_rounds as f64) * (-p_bar).ln_1p();
    let fail = log_fail.exp();
    let success_scale = if p_bar > 0.0 { (1.0 - fail) / p_bar } else { 0.0 };
    (0..instance.n_responses())
        .map(|y| pi_ref[y] * (accept[y] * success_scale + fail))
        .collect()
}

/// Total variation distance between two distributions over the same
/// finite space.
pub fn tv_distance(p: &[f64], q: &[f64]) -> f64 {
    0.5 * kahan_sum(p.iter().zip(q).map(|(&a, &b)| (a - b).abs()))
}
