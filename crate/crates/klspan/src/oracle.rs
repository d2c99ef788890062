//! Sampling and reward oracles with exact query accounting.
//!
//! Learners never touch instance tables directly; they interact through
//! an [`OracleHandle`] (bandit worlds) or an [`MdpEnv`] (MDPs with reset
//! access), each of which advances its own RNG stream deterministically
//! and counts every query in a [`QueryLedger`].

use std::sync::Arc;

use rand_chacha::ChaCha12Rng;
use thiserror::Error;

use crate::instance::AlignmentInstance;
use crate::mdp::TokenMdp;
use crate::numeric::dot;
use crate::rng::{sample_from_log_weights, Cdf, RngFactory};

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("unknown prompt index {0}")]
    UnknownPrompt(usize),
    #[error("unknown response index {0}")]
    UnknownResponse(usize),
    #[error("weak oracle cannot serve strong sampling queries")]
    WeakHandle,
    #[error("parameter outside the instance's parameter set")]
    ParameterOutOfSet,
    #[error("reset target (layer {layer}, state {state}) does not exist")]
    BadReset { layer: usize, state: usize },
}

/// Exact counters for every kind of oracle interaction.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize)]
pub struct QueryLedger {
    /// Reward-oracle queries.
    pub t_data: u64,
    /// Weak sampling-oracle queries (conditional draws from pi_ref and,
    /// in the MDP setting, feature queries).
    pub t_comp_weak: u64,
    /// Strong sampling-oracle queries (draws from pi_theta).
    pub t_comp_strong: u64,
    /// Prompts drawn from rho.
    pub t_prompt: u64,
    /// MDP reset queries (rollout starts from a chosen state).
    pub resets: u64,
}

impl QueryLedger {
    pub fn total_comp(&self) -> u64 {
        self.t_comp_weak + self.t_comp_strong
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleMode {
    Weak,
    Strong,
}

/// Query-counted access to an alignment instance.
///
/// Single-owner: one handle per learner run. Every sample advances the
/// handle's ChaCha stream, so a fixed seed and call sequence reproduce
/// the same interaction exactly.
pub struct OracleHandle {
    instance: Arc<AlignmentInstance>,
    mode: OracleMode,
    pub ledger: QueryLedger,
    rng: ChaCha12Rng,
    prompt_cdf: Cdf,
    ref_cdfs: Vec<Cdf>,
}

impl OracleHandle {
    pub fn new(instance: Arc<AlignmentInstance>, mode: OracleMode, factory: &RngFactory) -> Self {
        let prompt_cdf = Cdf::new(&instance.rho);
        let ref_cdfs = instance.pi_ref.iter().map(|row| Cdf::new(row)).collect();
        Self {
            instance,
            mode,
            ledger: QueryLedger::default(),
            rng: factory.stream("environment"),
            prompt_cdf,
            ref_cdfs,
        }
    }

    pub fn instance(&self) -> &AlignmentInstance {
        &self.instance
    }

    pub fn mode(&self) -> OracleMode {
        self.mode
    }

    pub fn beta(&self) -> f64 {
        self.instance.beta
    }

    /// Draws x ~ rho.
    pub fn draw_prompt(&mut self) -> usize {
        self.ledger.t_prompt += 1;
        self.prompt_cdf.sample(&mut self.rng)
    }

    /// Weak query: y ~ pi_ref(.|x) plus the sampled response's feature.
    pub fn weak_sample(&mut self, x: usize) -> Result<(usize, Vec<f64>), OracleError> {
        if x >= self.instance.n_prompts() {
            return Err(OracleError::UnknownPrompt(x));
        }
        self.ledger.t_comp_weak += 1;
        let y = self.ref_cdfs[x].sample(&mut self.rng);
        Ok((y, self.instance.features[x][y].clone()))
    }

    /// Strong query: y ~ pi_theta(.|x) computed by exact enumeration.
    pub fn strong_sample(
        &mut self,
        x: usize,
        theta: &[f64],
    ) -> Result<(usize, Vec<f64>), OracleError> {
        if self.mode != OracleMode::Strong {
            return Err(OracleError::WeakHandle);
        }
        if x >= self.instance.n_prompts() {
            return Err(OracleError::UnknownPrompt(x));
        }
        if !self.instance.geometry.contains(theta, 1e-9) {
            return Err(OracleError::ParameterOutOfSet);
        }
        self.ledger.t_comp_strong += 1;
        let inst = &self.instance;
        let log_w: Vec<f64> = (0..inst.n_responses())
            .map(|y| {
                let p = inst.pi_ref[x][y];
                if p > 0.0 {
                    p.ln() + dot(theta, &inst.features[x][y]) / inst.beta
                } else {
                    f64::NEG_INFINITY
                }
            })
            .collect();
        let y = sample_from_log_weights(&mut self.rng, &log_w);
        Ok((y, inst.features[x][y].clone()))
    }

    /// Reward query with the instance's noise model.
    pub fn reward_query(&mut self, x: usize, y: usize) -> Result<f64, OracleError> {
        if x >= self.instance.n_prompts() {
            return Err(OracleError::UnknownPrompt(x));
        }
        if y >= self.instance.n_responses() {
            return Err(OracleError::UnknownResponse(y));
        }
        self.ledger.t_data += 1;
        let mean = self.instance.reward_mean[x][y];
        Ok(self.instance.noise.sample(mean, self.instance.r_max, &mut self.rng))
    }
}

/// A position inside an episode: layer and state index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MdpState {
    pub layer: usize,
    pub state: usize,
}

/// Query-counted access to a [`TokenMdp`] with reset (local simulator)
/// access.
pub struct MdpEnv {
    mdp: Arc<TokenMdp>,
    pub ledger: QueryLedger,
    rng: ChaCha12Rng,
    ref_cdfs: Vec<Vec<Cdf>>,
    trans_cdfs: Vec<Vec<Vec<Cdf>>>,
    p0_cdf: Cdf,
}

impl MdpEnv {
    pub fn new(mdp: Arc<TokenMdp>, factory: &RngFactory) -> Self {
        let ref_cdfs = mdp
            .pi_ref
            .iter()
            .map(|layer| layer.iter().map(|row| Cdf::new(row)).collect())
            .collect();
        let trans_cdfs = (0..mdp.horizon.saturating_sub(1))
            .map(|h| {
                (0..mdp.n_states[h])
                    .map(|x| (0..mdp.n_actions).map(|a| Cdf::new(&mdp.transitions[h][x][a])).collect())
                    .collect()
            })
            .collect();
        let p0_cdf = Cdf::new(&mdp.p0);
        Self { mdp, ledger: QueryLedger::default(), rng: factory.stream("environment"), ref_cdfs, trans_cdfs, p0_cdf }
    }

    pub fn mdp(&self) -> &TokenMdp {
        &self.mdp
    }

    pub fn beta(&self) -> f64 {
        self.mdp.beta
    }

    /// Starts an episode from the initial distribution.
    pub fn reset_initial(&mut self) -> MdpState {
        self.ledger.resets += 1;
        self.ledger.t_prompt += 1;
        MdpState { layer: 0, state: self.p0_cdf.sample(&mut self.rng) }
    }

    /// Resets to a previously observed state at a given layer.
    pub fn reset_to(&mut self, layer: usize, state: usize) -> Result<MdpState, OracleError> {
        if layer >= self.mdp.horizon || state >= self.mdp.n_states[layer] {
            return Err(OracleError::BadReset { layer, state });
        }
        self.ledger.resets += 1;
        Ok(MdpState { layer, state })
    }

    /// Weak autoregressive query: a ~ pi_ref_h(.|x) plus its feature.
    pub fn weak_action(&mut self, at: MdpState) -> (usize, Vec<f64>) {
        self.ledger.t_comp_weak += 1;
        let a = self.ref_cdfs[at.layer][at.state].sample(&mut self.rng);
        (a, self.mdp.features[at.layer][at.state][a].clone())
    }

    /// Feature query phi_h(x, a) (one weak-oracle query).
    pub fn feature_query(&mut self, at: MdpState, action: usize) -> Vec<f64> {
        self.ledger.t_comp_weak += 1;
        self.mdp.features[at.layer][at.state][action].clone()
    }

    /// Samples a reward for (x, a) at the state's layer.
    pub fn reward_query(&mut self, at: MdpState, action: usize) -> f64 {
        self.ledger.t_data += 1;
        let mean = self.mdp.reward_mean[at.layer][at.state][action];
        self.mdp.noise.sample(mean, self.mdp.r_max, &mut self.rng)
    }

    /// Transitions to the next layer; `None` past the last layer.
    pub fn step(&mut self, at: MdpState, action: usize) -> Option<MdpState> {
        if at.layer + 1 >= self.mdp.horizon {
            return None;
        }
        let next = self.trans_cdfs[at.layer][at.state][action].sample(&mut self.rng);
        Some(MdpState { layer: at.layer + 1, state: next })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instance::{gen_random_instance, RandomInstanceSpec, RewardNoise};

    fn inst(noise: RewardNoise) -> Arc<AlignmentInstance> {
        let spec = RandomInstanceSpec {
            dim: 3,
            n_prompts: 2,
            n_responses: 4,
            beta: 0.5,
            param_radius: 2.0,
            r_max: 1.0,
            noise,
        };
        Arc::new(gen_random_instance(&spec, 11).unwrap())
    }

    #[test]
    fn weak_sample_ledger_contract() {
        let mut h = OracleHandle::new(inst(RewardNoise::Deterministic), OracleMode::Weak, &RngFactory::new(1));
        let before = h.ledger;
        h.weak_sample(0).unwrap();
        let after = h.ledger;
        assert_eq!(after.t_comp_weak, before.t_comp_weak + 1);
        assert_eq!(after.t_comp_strong, before.t_comp_strong);
        assert_eq!(after.t_data, before.t_data);
        assert_eq!(after.t_prompt, before.t_prompt);
        assert_eq!(after.resets, before.resets);
    }

    #[test]
    fn weak_sample_point_mass() {
        let mut i = (*inst(RewardNoise::Deterministic)).clone();
        i.pi_ref[0] = vec![0.0, 0.0, 1.0, 0.0];
        let mut h = OracleHandle::new(Arc::new(i), OracleMode::Weak, &RngFactory::new(2));
        for _ in 0..50 {
            assert_eq!(h.weak_sample(0).unwrap().0, 2);
        }
    }

    #[test]
    fn weak_sample_frequencies_match_table() {
        let mut i = (*inst(RewardNoise::Deterministic)).clone();
        i.pi_ref[1] = vec![0.25; 4];
        let mut h = OracleHandle::new(Arc::new(i), OracleMode::Weak, &RngFactory::new(3));
        let n = 100_000;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            counts[h.weak_sample(1).unwrap().0] += 1;
        }
        for c in counts {
            assert!((c as f64 / n as f64 - 0.25).abs() < 0.01);
        }
    }

    #[test]
    fn strong_sample_checks_mode_and_norm() {
        let i = inst(RewardNoise::Deterministic);
        let mut weak = OracleHandle::new(i.clone(), OracleMode::Weak, &RngFactory::new(4));
        assert!(matches!(weak.strong_sample(0, &[0.0; 3]), Err(OracleError::WeakHandle)));
        let mut strong = OracleHandle::new(i, OracleMode::Strong, &RngFactory::new(4));
        assert!(matches!(
            strong.strong_sample(0, &[5.0, 0.0, 0.0]),
            Err(OracleError::ParameterOutOfSet)
        ));
        strong.strong_sample(0, &[0.0; 3]).unwrap();
        assert_eq!(strong.ledger.t_comp_strong, 1);
    }

    #[test]
    fn strong_sample_theta_zero_matches_reference_law() {
        // pi_0 = pi_ref: compare empirical frequencies against the table.
        let i = inst(RewardNoise::Deterministic);
        let expect = i.pi_ref[0].clone();
        let mut h = OracleHandle::new(i, OracleMode::Strong, &RngFactory::new(5));
        let n = 100_000;
        let mut counts = vec![0usize; expect.len()];
        for _ in 0..n {
            counts[h.strong_sample(0, &[0.0; 3]).unwrap().0] += 1;
        }
        for (c, p) in counts.iter().zip(&expect) {
            assert!((*c as f64 / n as f64 - p).abs() < 0.01);
        }
    }

    #[test]
    fn reward_query_counts_and_bernoulli_mean() {
        let i = inst(RewardNoise::Bernoulli);
        let mean = i.reward_mean[0][1];
        let mut h = OracleHandle::new(i, OracleMode::Weak, &RngFactory::new(6));
        let n = 100_000;
        let mut acc = 0.0;
        for _ in 0..n {
            acc += h.reward_query(0, 1).unwrap();
        }
        assert_eq!(h.ledger.t_data, n as u64);
        assert!((acc / n as f64 - mean).abs() < 0.01);
    }

    #[test]
    fn oracle_is_deterministic_under_seed() {
        let i = inst(RewardNoise::UniformBounded);
        let run = |seed| {
            let mut h = OracleHandle::new(i.clone(), OracleMode::Strong, &RngFactory::new(seed));
            let mut out = Vec::new();
            for _ in 0..20 {
                let x = h.draw_prompt();
                let (y, _) = h.weak_sample(x).unwrap();
                out.push((x, y, h.reward_query(x, y).unwrap()));
            }
            out
        };
        assert_eq!(run(7), run(7));
        assert_ne!(run(7), run(8));
    }
}
