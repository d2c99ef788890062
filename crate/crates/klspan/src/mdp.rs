//! Finite-horizon MDPs with per-layer features and reset access, plus
//! the generators for realizable token MDPs and the two-step
//! representational-gap construction.

use thiserror::Error;

use crate::instance::{AlignmentInstance, ParamGeometry, RewardNoise};
use crate::numeric::{dot, kahan_sum, norm2};
use crate::rng::{sample_simplex, sample_unit_ball, RngFactory};

#[derive(Debug, Error)]
pub enum MdpError {
    #[error("invalid mdp: {0}")]
    Invalid(String),
    #[error("infeasible generator sizes: {0}")]
    Infeasible(String),
}

/// Finite-horizon MDP with layered state spaces.
///
/// Layers are indexed h = 0..horizon-1. `transitions[h][x][a]` is the
/// distribution over layer h+1 states (for h < horizon-1); the initial
/// distribution `p0` plays the role of the layer-0 entry point.
#[derive(Debug, Clone)]
pub struct TokenMdp {
    pub horizon: usize,
    pub n_actions: usize,
    pub dim: usize,
    /// Number of states at each layer.
    pub n_states: Vec<usize>,
    /// Initial state distribution over layer-0 states.
    pub p0: Vec<f64>,
    /// transitions[h][x][a] for h in 0..horizon-1.
    pub transitions: Vec<Vec<Vec<Vec<f64>>>>,
    /// Mean rewards r*_h(x, a) in [0, r_max].
    pub reward_mean: Vec<Vec<Vec<f64>>>,
    /// Per-layer features phi_h(x, a), norm <= 1.
    pub features: Vec<Vec<Vec<Vec<f64>>>>,
    /// Per-layer reference policies pi_ref_h(a | x).
    pub pi_ref: Vec<Vec<Vec<f64>>>,
    pub beta: f64,
    pub r_max: f64,
    pub param_radius: f64,
    /// Designated anchor action.
    pub anchor: usize,
    /// Per-layer hidden parameters, present when the instance was built
    /// to satisfy autoregressive realizability.
    pub theta_star: Option<Vec<Vec<f64>>>,
    pub noise: RewardNoise,
}

impl TokenMdp {
    pub fn feature(&self, h: usize, x: usize, a: usize) -> &[f64] {
        &self.features[h][x][a]
    }

    /// Anchored feature phi_h(x, a) - phi_h(x, anchor).
    pub fn anchored_feature(&self, h: usize, x: usize, a: usize) -> Vec<f64> {
        self.features[h][x][a]
            .iter()
            .zip(&self.features[h][x][self.anchor])
            .map(|(u, v)| u - v)
            .collect()
    }

    pub fn validate(&self) -> Result<(), MdpError> {
        let err = |m: String| Err(MdpError::Invalid(m));
        let h_max = self.horizon;
        if h_max == 0 || self.n_actions == 0 {
            return err("empty horizon or action space".into());
        }
        if self.anchor >= self.n_actions {
            return err("anchor out of range".into());
        }
        if self.n_states.len() != h_max {
            return err("n_states length != horizon".into());
        }
        check_dist(&self.p0, self.n_states[0]).map_err(|m| MdpError::Invalid(format!("p0: {m}")))?;
        for h in 0..h_max {
            let nx = self.n_states[h];
            for x in 0..nx {
                check_dist(&self.pi_ref[h][x], self.n_actions)
                    .map_err(|m| MdpError::Invalid(format!("pi_ref[{h}][{x}]: {m}")))?;
                for a in 0..self.n_actions {
                    let phi = &self.features[h][x][a];
                    if phi.len() != self.dim || norm2(phi) > 1.0 + 1e-9 {
                        return err(format!("bad feature at ({h},{x},{a})"));
                    }
                    let r = self.reward_mean[h][x][a];
                    if !(-1e-9..=self.r_max + 1e-9).contains(&r) {
                        return err(format!("reward {r} out of range at ({h},{x},{a})"));
                    }
                    if h + 1 < h_max {
                        check_dist(&self.transitions[h][x][a], self.n_states[h + 1])
                            .map_err(|m| MdpError::Invalid(format!("P[{h}][{x}][{a}]: {m}")))?;
                    }
                }
            }
        }
        if let Some(thetas) = &self.theta_star {
            for th in thetas {
                if norm2(th) > self.param_radius + 1e-9 {
                    return err("theta_star_h outside the parameter ball".into());
                }
            }
        }
        Ok(())
    }
}

fn check_dist(p: &[f64], expected_len: usize) -> Result<(), String> {
    if p.len() != expected_len {
        return Err(format!("length {} != {expected_len}", p.len()));
    }
    if p.iter().any(|&x| x < 0.0 || !x.is_finite()) {
        return Err("negative or non-finite entry".into());
    }
    let s = kahan_sum(p.iter().copied());
    if (s - 1.0).abs() > 1e-12 {
        return Err(format!("sums to {s}"));
    }
    Ok(())
}

/// Generator parameters for [`gen_token_mdp`].
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TokenMdpSpec {
    pub horizon: usize,
    pub n_actions: usize,
    pub dim: usize,
    #[serde(default = "default_states")]
    pub n_states_per_layer: usize,
    pub beta: f64,
    pub param_radius: f64,
    #[serde(default = "default_r_max")]
    pub r_max: f64,
    /// When true, transitions are action-independent, which forces the
    /// optimal regularized policy to be an autoregressive linear softmax
    /// in the per-layer features.
    #[serde(default = "default_true")]
    pub realizable: bool,
    /// Features are drawn in the ball of this radius (at most 1).
    #[serde(default = "default_feature_scale")]
    pub feature_scale: f64,
    #[serde(default = "default_noise")]
    pub noise: RewardNoise,
}

fn default_feature_scale() -> f64 {
    1.0
}

fn default_states() -> usize {
    4
}
fn default_r_max() -> f64 {
    1.0
}
fn default_true() -> bool {
    true
}
fn default_noise() -> RewardNoise {
    RewardNoise::Deterministic
}

/// Random layered MDP. With `realizable = true` the transition tables
/// are action-independent, so Q*_h(x, a) - Q*_h(x, anchor) equals
/// <theta*_h, phi_h(x, a) - phi_h(x, anchor)> exactly; per-layer rewards
/// are affinely calibrated into [0, r_max].
pub fn gen_token_mdp(spec: &TokenMdpSpec, seed: u64) -> Result<TokenMdp, MdpError> {
    let h_max = spec.horizon;
    let nx = spec.n_states_per_layer;
    let na = spec.n_actions;
    if h_max == 0 || nx == 0 || na < 2 || spec.dim == 0 {
        return Err(MdpError::Infeasible("need horizon, states, dim >= 1 and actions >= 2".into()));
    }
    if nx > 10_000 {
        return Err(MdpError::Infeasible(format!("{nx} states per layer exceeds exact-DP budget")));
    }
    if !(spec.beta <= spec.r_max && spec.r_max <= spec.param_radius) {
        return Err(MdpError::Infeasible(format!(
            "need beta <= r_max <= B, got beta={} r_max={} B={}",
            spec.beta, spec.r_max, spec.param_radius
        )));
    }
    if !(0.0 < spec.feature_scale && spec.feature_scale <= 1.0) {
        return Err(MdpError::Infeasible(format!(
            "feature_scale must be in (0, 1], got {}",
            spec.feature_scale
        )));
    }
    let mut rng = RngFactory::new(seed).stream("mdp-gen");

    let features: Vec<Vec<Vec<Vec<f64>>>> = (0..h_max)
        .map(|_| {
            (0..nx)
                .map(|_| {
                    (0..na)
                        .map(|_| {
                            sample_unit_ball(&mut rng, spec.dim)
                                .into_iter()
                                .map(|v| v * spec.feature_scale)
                                .collect()
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    // Per-layer hidden parameters, rescaled so each layer's reward range
    // fits in r_max.
    let mut theta_star: Vec<Vec<f64>> = (0..h_max)
        .map(|_| {
            sample_unit_ball(&mut rng, spec.dim)
                .into_iter()
                .map(|v| v * spec.param_radius)
                .collect()
        })
        .collect();
    let mut reward_mean = vec![vec![vec![0.0; na]; nx]; h_max];
    for h in 0..h_max {
        let mut max_range = 0.0f64;
        for x in 0..nx {
            let vals: Vec<f64> = (0..na).map(|a| dot(&theta_star[h], &features[h][x][a])).collect();
            let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            max_range = max_range.max(hi - lo);
        }
        if max_range > spec.r_max {
            let s = spec.r_max / max_range;
            for t in &mut theta_star[h] {
                *t *= s;
            }
        }
        for x in 0..nx {
            let vals: Vec<f64> = (0..na).map(|a| dot(&theta_star[h], &features[h][x][a])).collect();
            let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
            for a in 0..na {
                reward_mean[h][x][a] = vals[a] - lo;
            }
        }
    }
    let transitions: Vec<Vec<Vec<Vec<f64>>>> = (0..h_max)
        .map(|h| {
            (0..nx)
                .map(|_| {
                    if h + 1 == h_max {
                        vec![vec![]; na]
                    } else if spec.realizable {
                        let shared = sample_simplex(&mut rng, nx, 2.0);
                        vec![shared; na]
                    } else {
                        (0..na).map(|_| sample_simplex(&mut rng, nx, 2.0)).collect()
                    }
                })
                .collect()
        })
        .collect();
    let pi_ref: Vec<Vec<Vec<f64>>> =
        (0..h_max).map(|_| (0..nx).map(|_| sample_simplex(&mut rng, na, 2.0)).collect()).collect();
    let p0 = sample_simplex(&mut rng, nx, 2.0);

    let mdp = TokenMdp {
        horizon: h_max,
        n_actions: na,
        dim: spec.dim,
        n_states: vec![nx; h_max],
        p0,
        transitions,
        reward_mean,
        features,
        pi_ref,
        beta: spec.beta,
        r_max: spec.r_max,
        param_radius: spec.param_radius,
        anchor: 0,
        theta_star: if spec.realizable { Some(theta_star) } else { None },
        noise: spec.noise,
    };
    mdp.validate()?;
    Ok(mdp)
}

/// Two-step deterministic token instance on which the sequence-level
/// optimal policy concentrates on the sequence (2, 1) with mass
/// 1/(1 + delta), while no autoregressive linear softmax can put more
/// than 1/2 there (both first-layer features coincide).
pub fn gen_autoregressive_gap_instance(delta: f64) -> Result<TokenMdp, MdpError> {
    if !(0.0 < delta && delta < 0.5) {
        return Err(MdpError::Infeasible(format!("delta must be in (0, 1/2), got {delta}")));
    }
    let b = (3.0 / delta).ln();
    let e1 = vec![1.0, 0.0];
    let e2 = vec![0.0, 1.0];
    // Layer 0: one state; actions 0 and 1 ("tokens 1 and 2") share e1.
    // Layer 1: state = previous action; phi_2(state 1, action 0) = e1
    // (the sequence "(2, 1)"), everything else e2.
    let features = vec![
        vec![vec![e1.clone(), e1.clone()]],
        vec![vec![e2.clone(), e2.clone()], vec![e1.clone(), e2.clone()]],
    ];
    let theta = vec![b, 0.0];
    let mut reward_mean = vec![vec![vec![0.0; 2]; 1], vec![vec![0.0; 2]; 2]];
    for (h, layer) in features.iter().enumerate() {
        for (x, per_state) in layer.iter().enumerate() {
            for (a, phi) in per_state.iter().enumerate() {
                reward_mean[h][x][a] = dot(&theta, phi);
            }
        }
    }
    let transitions = vec![
        vec![vec![vec![1.0, 0.0], vec![0.0, 1.0]]],
        vec![vec![vec![]; 2]; 2],
    ];
    let mdp = TokenMdp {
        horizon: 2,
        n_actions: 2,
        dim: 2,
        n_states: vec![1, 2],
        p0: vec![1.0],
        transitions,
        reward_mean,
        features,
        pi_ref: vec![vec![vec![0.5, 0.5]; 1], vec![vec![0.5, 0.5]; 2]],
        beta: 1.0,
        r_max: b,
        param_radius: b,
        anchor: 0,
        theta_star: Some(vec![theta.clone(), theta]),
        noise: RewardNoise::Deterministic,
    };
    mdp.validate()?;
    Ok(mdp)
}

/// Flattens a horizon-1 MDP into the equivalent alignment instance with
/// responses = actions.
pub fn bandit_from_mdp(mdp: &TokenMdp) -> Result<AlignmentInstance, MdpError> {
    if mdp.horizon != 1 {
        return Err(MdpError::Infeasible("bandit_from_mdp needs horizon 1".into()));
    }
    let theta_star = mdp
        .theta_star
        .as_ref()
        .map(|t| t[0].clone())
        .ok_or_else(|| MdpError::Infeasible("horizon-1 reduction needs theta_star".into()))?;
    let inst = AlignmentInstance {
        dim: mdp.dim,
        rho: mdp.p0.clone(),
        features: mdp.features[0].clone(),
        theta_star,
        pi_ref: mdp.pi_ref[0].clone(),
        reward_mean: mdp.reward_mean[0].clone(),
        beta: mdp.beta,
        r_max: mdp.r_max,
        param_radius: mdp.param_radius,
        geometry: ParamGeometry::Ball { radius: mdp.param_radius },
        noise: mdp.noise,
        signed_rewards: false,
    };
    inst.validate().map_err(|e| MdpError::Invalid(e.to_string()))?;
    Ok(inst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> TokenMdpSpec {
        TokenMdpSpec {
            horizon: 3,
            n_actions: 4,
            dim: 3,
            n_states_per_layer: 4,
            beta: 0.5,
            param_radius: 2.0,
            r_max: 1.0,
            realizable: true,
            feature_scale: 1.0,
            noise: RewardNoise::Deterministic,
        }
    }

    #[test]
    fn generated_mdp_validates_and_is_deterministic() {
        let a = gen_token_mdp(&spec(), 5).unwrap();
        let b = gen_token_mdp(&spec(), 5).unwrap();
        assert_eq!(a.reward_mean, b.reward_mean);
        assert_eq!(a.transitions, b.transitions);
        a.validate().unwrap();
    }

    #[test]
    fn realizable_transitions_are_action_independent() {
        let mdp = gen_token_mdp(&spec(), 9).unwrap();
        for h in 0..mdp.horizon - 1 {
            for x in 0..mdp.n_states[h] {
                for a in 1..mdp.n_actions {
                    assert_eq!(mdp.transitions[h][x][a], mdp.transitions[h][x][0]);
                }
            }
        }
    }

    #[test]
    fn horizon_one_reduces_to_bandit() {
        let mut s = spec();
        s.horizon = 1;
        let mdp = gen_token_mdp(&s, 3).unwrap();
        let inst = bandit_from_mdp(&mdp).unwrap();
        assert_eq!(inst.n_responses(), mdp.n_actions);
        assert!(inst.reward_difference_residual() < 1e-12);
    }

    #[test]
    fn gap_instance_shape() {
        let mdp = gen_autoregressive_gap_instance(0.1).unwrap();
        assert!((mdp.param_radius - (30.0f64).ln()).abs() < 1e-15);
        // Both layer-0 features equal e1.
        assert_eq!(mdp.features[0][0][0], mdp.features[0][0][1]);
        // Sequence (2, 1) feature at layer 1 is e1.
        assert_eq!(mdp.features[1][1][0], vec![1.0, 0.0]);
        assert!(matches!(gen_autoregressive_gap_instance(0.7), Err(MdpError::Infeasible(_))));
    }
}
