//! Enumerable alignment instances: prompts, responses, features, hidden
//! parameter, reference policy, and the generators for random and
//! coverage-hard worlds.

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

use crate::numeric::{dot, kahan_sum, norm2};
use crate::rng::{sample_simplex, sample_unit_ball, sample_unit_sphere, RngFactory};

#[derive(Debug, Error)]
pub enum InstanceError {
    #[error("invalid instance: {0}")]
    Invalid(String),
    #[error("infeasible generator bounds: {0}")]
    Infeasible(String),
    #[error("unknown prompt index {0}")]
    UnknownPrompt(usize),
    #[error("unknown response index {0}")]
    UnknownResponse(usize),
}

/// Geometry of the parameter set the learners project onto.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum ParamGeometry {
    /// Euclidean ball of the given radius.
    Ball { radius: f64 },
    /// l-infinity box of the given half-width (used by the DNF
    /// hardness embedding); projection is coordinate clipping.
    BoxLinf { halfwidth: f64 },
}

impl ParamGeometry {
    pub fn project(&self, v: Vec<f64>) -> Vec<f64> {
        match *self {
            ParamGeometry::Ball { radius } => {
                crate::linalg::BallConstraint::new(radius).project(v)
            }
            ParamGeometry::BoxLinf { halfwidth } => {
                v.into_iter().map(|x| x.clamp(-halfwidth, halfwidth)).collect()
            }
        }
    }

    pub fn contains(&self, v: &[f64], tol: f64) -> bool {
        match *self {
            ParamGeometry::Ball { radius } => norm2(v) <= radius + tol,
            ParamGeometry::BoxLinf { halfwidth } => {
                v.iter().all(|x| x.abs() <= halfwidth + tol)
            }
        }
    }
}

/// Reward observation noise. The oracle only guarantees the mean and the
/// range, so the model is selectable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum RewardNoise {
    /// Returns the mean exactly.
    Deterministic,
    /// Mean-preserving uniform noise, truncated so samples stay within
    /// [0, r_max].
    UniformBounded,
    /// Bernoulli(mean); requires r_max = 1.
    Bernoulli,
}

impl RewardNoise {
    pub fn sample(&self, mean: f64, r_max: f64, rng: &mut ChaCha12Rng) -> f64 {
        match self {
            RewardNoise::Deterministic => mean,
            RewardNoise::UniformBounded => {
                let w = mean.min(r_max - mean).max(0.0);
                mean + rng.gen_range(-1.0..1.0) * w
            }
            RewardNoise::Bernoulli => {
                debug_assert!((r_max - 1.0).abs() < 1e-9);
                if rng.gen::<f64>() < mean {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Enumerable contextual-bandit alignment world.
///
/// Rewards are stored as an explicit mean table; on realizable instances
/// the table is an affine calibration of `<theta_star, phi(x, y)>`, so
/// reward differences stay exactly linear in the feature differences.
#[derive(Debug, Clone)]
pub struct AlignmentInstance {
    pub dim: usize,
    /// Prompt distribution rho.
    pub rho: Vec<f64>,
    /// features[x][y] is a d-vector with norm <= 1.
    pub features: Vec<Vec<Vec<f64>>>,
    pub theta_star: Vec<f64>,
    /// pi_ref[x] is a distribution over responses.
    pub pi_ref: Vec<Vec<f64>>,
    /// Mean reward table r*(x, y).
    pub reward_mean: Vec<Vec<f64>>,
    pub beta: f64,
    pub r_max: f64,
    pub param_radius: f64,
    pub geometry: ParamGeometry,
    pub noise: RewardNoise,
    /// Whether reward means may be negative (DNF embedding keeps the
    /// paper's signed rewards in [-r_max, r_max]).
    pub signed_rewards: bool,
}

impl AlignmentInstance {
    pub fn n_prompts(&self) -> usize {
        self.rho.len()
    }

    pub fn n_responses(&self) -> usize {
        self.pi_ref[0].len()
    }

    pub fn feature(&self, x: usize, y: usize) -> &[f64] {
        &self.features[x][y]
    }

    /// Relative feature phi(x, y1) - phi(x, y2).
    pub fn relative_feature(&self, x: usize, y1: usize, y2: usize) -> Vec<f64> {
        self.features[x][y1]
            .iter()
            .zip(&self.features[x][y2])
            .map(|(a, b)| a - b)
            .collect()
    }

    pub fn validate(&self) -> Result<(), InstanceError> {
        let nx = self.n_prompts();
        let ny = self.n_responses();
        let err = |m: String| Err(InstanceError::Invalid(m));
        if nx == 0 || ny == 0 {
            return err("empty prompt or response space".into());
        }
        if !(self.beta > 0.0) {
            return err(format!("beta must be positive, got {}", self.beta));
        }
        if !(self.beta <= self.r_max && self.r_max <= self.param_radius + 1e-12) {
            return err(format!(
                "need beta <= r_max <= B, got beta={} r_max={} B={}",
                self.beta, self.r_max, self.param_radius
            ));
        }
        check_distribution(&self.rho).map_err(|m| InstanceError::Invalid(format!("rho: {m}")))?;
        if self.features.len() != nx || self.reward_mean.len() != nx || self.pi_ref.len() != nx {
            return err("table sizes disagree with prompt count".into());
        }
        for x in 0..nx {
            check_distribution(&self.pi_ref[x])
                .map_err(|m| InstanceError::Invalid(format!("pi_ref[{x}]: {m}")))?;
            if self.features[x].len() != ny || self.reward_mean[x].len() != ny {
                return err(format!("table sizes disagree with response count at x={x}"));
            }
            for y in 0..ny {
                let phi = &self.features[x][y];
                if phi.len() != self.dim {
                    return err(format!("feature dim mismatch at ({x},{y})"));
                }
                if norm2(phi) > 1.0 + 1e-9 {
                    return err(format!("feature norm > 1 at ({x},{y})"));
                }
                let r = self.reward_mean[x][y];
                let lo = if self.signed_rewards { -self.r_max } else { 0.0 };
                if !(lo - 1e-9 <= r && r <= self.r_max + 1e-9) {
                    return err(format!("reward mean {r} out of range at ({x},{y})"));
                }
            }
            // Signed-reward embeddings keep means in [-r_max, r_max], so
            // their differences are only bounded by twice the range.
            let diff_cap = if self.signed_rewards { 2.0 * self.r_max } else { self.r_max };
            for y1 in 0..ny {
                for y2 in 0..ny {
                    let diff = self.reward_mean[x][y1] - self.reward_mean[x][y2];
                    if diff.abs() > diff_cap + 1e-9 {
                        return err(format!(
                            "reward difference {diff} exceeds the range at ({x},{y1},{y2})"
                        ));
                    }
                }
            }
        }
        if !self.geometry.contains(&self.theta_star, 1e-9) {
            return err("theta_star outside the parameter set".into());
        }
        Ok(())
    }

    /// Max over realizable pairs of |r*(x,y) - r*(x,y') - <theta*, phi(x,y) - phi(x,y')>|.
    pub fn reward_difference_residual(&self) -> f64 {
        let mut worst = 0.0f64;
        for x in 0..self.n_prompts() {
            for y1 in 0..self.n_responses() {
                for y2 in 0..self.n_responses() {
                    let lin = dot(&self.theta_star, &self.relative_feature(x, y1, y2));
                    let tab = self.reward_mean[x][y1] - self.reward_mean[x][y2];
                    worst = worst.max((lin - tab).abs());
                }
            }
        }
        worst
    }
}

fn check_distribution(p: &[f64]) -> Result<(), String> {
    if p.iter().any(|&x| x < 0.0 || !x.is_finite()) {
        return Err("negative or non-finite entry".into());
    }
    let s = kahan_sum(p.iter().copied());
    if (s - 1.0).abs() > 1e-12 {
        return Err(format!("sums to {s}, not 1"));
    }
    Ok(())
}

/// Parameters for [`gen_random_instance`].
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct RandomInstanceSpec {
    pub dim: usize,
    pub n_prompts: usize,
    pub n_responses: usize,
    pub beta: f64,
    pub param_radius: f64,
    #[serde(default = "default_r_max")]
    pub r_max: f64,
    #[serde(default = "default_noise")]
    pub noise: RewardNoise,
}

fn default_r_max() -> f64 {
    1.0
}

fn default_noise() -> RewardNoise {
    RewardNoise::Deterministic
}

/// Random realizable instance: features in the unit ball, hidden
/// parameter in the B-ball, rewards affinely shifted per prompt so the
/// mean table lies in [0, r_max] while differences stay linear.
pub fn gen_random_instance(
    spec: &RandomInstanceSpec,
    seed: u64,
) -> Result<AlignmentInstance, InstanceError> {
    if spec.dim < 1 || spec.n_responses < 2 || spec.n_prompts < 1 {
        return Err(InstanceError::Infeasible(
            "need dim >= 1, n_responses >= 2, n_prompts >= 1".into(),
        ));
    }
    if !(spec.beta <= spec.r_max && spec.r_max <= spec.param_radius) {
        return Err(InstanceError::Infeasible(format!(
            "need beta <= r_max <= B, got beta={} r_max={} B={}",
            spec.beta, spec.r_max, spec.param_radius
        )));
    }
    let factory = RngFactory::new(seed);
    let mut rng = factory.stream("instance-gen");
    let features: Vec<Vec<Vec<f64>>> = (0..spec.n_prompts)
        .map(|_| (0..spec.n_responses).map(|_| sample_unit_ball(&mut rng, spec.dim)).collect())
        .collect();
    let mut theta_star: Vec<f64> = sample_unit_ball(&mut rng, spec.dim)
        .into_iter()
        .map(|x| x * spec.param_radius)
        .collect();
    // Rescale theta_star so the per-prompt reward range fits in r_max.
    let mut max_range = 0.0f64;
    for x in 0..spec.n_prompts {
        let vals: Vec<f64> = (0..spec.n_responses).map(|y| dot(&theta_star, &features[x][y])).collect();
        let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        max_range = max_range.max(hi - lo);
    }
    if max_range > spec.r_max {
        let s = spec.r_max / max_range;
        for t in &mut theta_star {
            *t *= s;
        }
    }
    let reward_mean: Vec<Vec<f64>> = (0..spec.n_prompts)
        .map(|x| {
            let vals: Vec<f64> =
                (0..spec.n_responses).map(|y| dot(&theta_star, &features[x][y])).collect();
            let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
            vals.into_iter().map(|v| v - lo).collect()
        })
        .collect();
    let pi_ref: Vec<Vec<f64>> =
        (0..spec.n_prompts).map(|_| sample_simplex(&mut rng, spec.n_responses, 2.0)).collect();
    let rho = sample_simplex(&mut rng, spec.n_prompts, 2.0);
    let inst = AlignmentInstance {
        dim: spec.dim,
        rho,
        features,
        theta_star,
        pi_ref,
        reward_mean,
        beta: spec.beta,
        r_max: spec.r_max,
        param_radius: spec.param_radius,
        geometry: ParamGeometry::Ball { radius: spec.param_radius },
        noise: spec.noise,
        signed_rewards: false,
    };
    inst.validate()?;
    Ok(inst)
}

/// Hard instance for passive exploration: a single prompt, one hidden
/// rewarding response carrying all of the feature mass, and a reference
/// policy that picks it with probability
/// `eps_ref = max(1/c_star, exp(-1/(2 beta)))`.
pub fn gen_coverage_hard_instance(
    c_star: f64,
    n_responses: usize,
    beta: f64,
    dim: usize,
    seed: u64,
) -> Result<AlignmentInstance, InstanceError> {
    if c_star < 2.0 || n_responses < 9 || beta > 0.5 || beta <= 0.0 || dim < 1 {
        return Err(InstanceError::Infeasible(
            "need c_star >= 2, n_responses >= 9, 0 < beta <= 1/2, dim >= 1".into(),
        ));
    }
    let eps_ref = (1.0 / c_star).max((-1.0 / (2.0 * beta)).exp());
    let factory = RngFactory::new(seed);
    let mut rng = factory.stream("coverage-gen");
    let hidden = 1 + rng.gen_range(0..n_responses - 1);
    let theta_star = sample_unit_sphere(&mut rng, dim);
    let mut features = vec![vec![vec![0.0; dim]; n_responses]];
    features[0][hidden] = theta_star.clone();
    let mut pi_ref = vec![vec![0.0; n_responses]];
    pi_ref[0][0] = 1.0 - eps_ref;
    pi_ref[0][hidden] = eps_ref;
    let mut reward_mean = vec![vec![0.0; n_responses]];
    reward_mean[0][hidden] = 1.0;
    let inst = AlignmentInstance {
        dim,
        rho: vec![1.0],
        features,
        theta_star,
        pi_ref,
        reward_mean,
        beta,
        r_max: 1.0,
        param_radius: 1.0,
        geometry: ParamGeometry::Ball { radius: 1.0 },
        noise: RewardNoise::Deterministic,
        signed_rewards: false,
    };
    inst.validate()?;
    Ok(inst)
}

/// Reference-policy weight of the hidden response in the coverage-hard
/// construction, exposed for tests and the verify suite.
pub fn coverage_eps_ref(c_star: f64, beta: f64) -> f64 {
    (1.0 / c_star).max((-1.0 / (2.0 * beta)).exp())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> RandomInstanceSpec {
        RandomInstanceSpec {
            dim: 4,
            n_prompts: 3,
            n_responses: 8,
            beta: 0.3,
            param_radius: 2.0,
            r_max: 1.0,
            noise: RewardNoise::Deterministic,
        }
    }

    #[test]
    fn same_seed_gives_identical_instances() {
        let a = gen_random_instance(&spec(), 42).unwrap();
        let b = gen_random_instance(&spec(), 42).unwrap();
        assert_eq!(a.features, b.features);
        assert_eq!(a.theta_star, b.theta_star);
        assert_eq!(a.pi_ref, b.pi_ref);
        assert_eq!(a.reward_mean, b.reward_mean);
        let c = gen_random_instance(&spec(), 43).unwrap();
        assert_ne!(a.theta_star, c.theta_star);
    }

    #[test]
    fn generated_instance_validates() {
        for seed in 0..20 {
            let inst = gen_random_instance(&spec(), seed).unwrap();
            inst.validate().unwrap();
        }
    }

    #[test]
    fn reward_differences_are_linear() {
        for seed in 0..20 {
            let inst = gen_random_instance(&spec(), seed).unwrap();
            assert!(inst.reward_difference_residual() < 1e-12);
        }
    }

    #[test]
    fn coverage_eps_ref_formula() {
        // c_star = 100, beta = 0.1: eps_ref = max(0.01, e^{-5}) = 0.01.
        let eps = coverage_eps_ref(100.0, 0.1);
        assert!((eps - 0.01).abs() < 1e-15);
        // c_star = 200 flips to the exponential branch.
        let eps = coverage_eps_ref(200.0, 0.1);
        assert!((eps - (-5.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn coverage_instance_shape() {
        let inst = gen_coverage_hard_instance(100.0, 16, 0.1, 6, 7).unwrap();
        inst.validate().unwrap();
        let nonzero: Vec<usize> =
            (0..16).filter(|&y| inst.pi_ref[0][y] > 0.0).collect();
        assert_eq!(nonzero.len(), 2);
        assert_eq!(nonzero[0], 0);
        let hidden = nonzero[1];
        assert!((inst.pi_ref[0][hidden] - 0.01).abs() < 1e-15);
        assert_eq!(inst.reward_mean[0][hidden], 1.0);
        assert!((norm2(&inst.features[0][hidden]) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn infeasible_bounds_rejected() {
        let mut s = spec();
        s.beta = 1.5; // beta > r_max
        assert!(gen_random_instance(&s, 0).is_err());
        assert!(gen_coverage_hard_instance(1.5, 16, 0.1, 2, 0).is_err());
        assert!(gen_coverage_hard_instance(100.0, 4, 0.1, 2, 0).is_err());
    }

    #[test]
    fn uniform_noise_preserves_mean_and_range() {
        let mut rng = RngFactory::new(9).stream("noise");
        let mean = 0.3;
        let n = 200_000;
        let mut acc = 0.0;
        for _ in 0..n {
            let r = RewardNoise::UniformBounded.sample(mean, 1.0, &mut rng);
            assert!((0.0..=1.0).contains(&r));
            acc += r;
        }
        assert!((acc / n as f64 - mean).abs() < 0.005);
    }
}
