//! Versioned on-disk format for instances.
//!
//! JSON with every float written as a decimal string with 17
//! significant digits, so parsed values round-trip bit-exactly and the
//! files stay diffable and host-independent.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::instance::{AlignmentInstance, ParamGeometry, RewardNoise};
use crate::mdp::TokenMdp;
use crate::metrics::fmt_f64;

pub const FORMAT_NAME: &str = "klspan-instance";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SerializeError {
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported format {name} v{version}")]
    UnsupportedFormat { name: String, version: u32 },
    #[error("bad float literal {0:?}")]
    BadFloat(String),
    #[error("instance failed validation after parse: {0}")]
    Validation(String),
}

/// Top-level file wrapper.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceFile {
    pub format: String,
    pub version: u32,
    pub payload: InstancePayload,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InstancePayload {
    Bandit(BanditRepr),
    Mdp(MdpRepr),
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BanditRepr {
    pub dim: usize,
    pub rho: Vec<String>,
    pub features: Vec<Vec<Vec<String>>>,
    pub theta_star: Vec<String>,
    pub pi_ref: Vec<Vec<String>>,
    pub reward_mean: Vec<Vec<String>>,
    pub beta: String,
    pub r_max: String,
    pub param_radius: String,
    pub geometry: ParamGeometry,
    pub noise: RewardNoise,
    pub signed_rewards: bool,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MdpRepr {
    pub horizon: usize,
    pub n_actions: usize,
    pub dim: usize,
    pub n_states: Vec<usize>,
    pub p0: Vec<String>,
    pub transitions: Vec<Vec<Vec<Vec<String>>>>,
    pub reward_mean: Vec<Vec<Vec<String>>>,
    pub features: Vec<Vec<Vec<Vec<String>>>>,
    pub pi_ref: Vec<Vec<Vec<String>>>,
    pub beta: String,
    pub r_max: String,
    pub param_radius: String,
    pub anchor: usize,
    pub theta_star: Option<Vec<Vec<String>>>,
    pub noise: RewardNoise,
}

fn parse_f64(s: &str) -> Result<f64, SerializeError> {
    s.parse().map_err(|_| SerializeError::BadFloat(s.to_string()))
}

fn enc1(v: &[f64]) -> Vec<String> {
    v.iter().copied().map(fmt_f64).collect()
}
fn enc2(v: &[Vec<f64>]) -> Vec<Vec<String>> {
    v.iter().map(|r| enc1(r)).collect()
}
fn enc3(v: &[Vec<Vec<f64>>]) -> Vec<Vec<Vec<String>>> {
    v.iter().map(|r| enc2(r)).collect()
}
fn enc4(v: &[Vec<Vec<Vec<f64>>>]) -> Vec<Vec<Vec<Vec<String>>>> {
    v.iter().map(|r| enc3(r)).collect()
}
fn dec1(v: &[String]) -> Result<Vec<f64>, SerializeError> {
    v.iter().map(|s| parse_f64(s)).collect()
}
fn dec2(v: &[Vec<String>]) -> Result<Vec<Vec<f64>>, SerializeError> {
    v.iter().map(|r| dec1(r)).collect()
}
fn dec3(v: &[Vec<Vec<String>>]) -> Result<Vec<Vec<Vec<f64>>>, SerializeError> {
    v.iter().map(|r| dec2(r)).collect()
}
fn dec4(v: &[Vec<Vec<Vec<String>>>]) -> Result<Vec<Vec<Vec<Vec<f64>>>>, SerializeError> {
    v.iter().map(|r| dec3(r)).collect()
}

pub fn bandit_to_json(inst: &AlignmentInstance) -> Result<String, SerializeError> {
    let file = InstanceFile {
        format: FORMAT_NAME.to_string(),
        version: FORMAT_VERSION,
        payload: InstancePayload::Bandit(BanditRepr {
            dim: inst.dim,
            rho: enc1(&inst.rho),
            features: enc3(&inst.features),
            theta_star: enc1(&inst.theta_star),
            pi_ref: enc2(&inst.pi_ref),
            reward_mean: enc2(&inst.reward_mean),
            beta: fmt_f64(inst.beta),
            r_max: fmt_f64(inst.r_max),
            param_radius: fmt_f64(inst.param_radius),
            geometry: inst.geometry,
            noise: inst.noise,
            signed_rewards: inst.signed_rewards,
        }),
    };
    Ok(serde_json::to_string_pretty(&file)?)
}

pub fn mdp_to_json(mdp: &TokenMdp) -> Result<String, SerializeError> {
    let file = InstanceFile {
        format: FORMAT_NAME.to_string(),
        version: FORMAT_VERSION,
        payload: InstancePayload::Mdp(MdpRepr {
            horizon: mdp.horizon,
            n_actions: mdp.n_actions,
            dim: mdp.dim,
            n_states: mdp.n_states.clone(),
            p0: enc1(&mdp.p0),
            transitions: enc4(&mdp.transitions),
            reward_mean: enc3(&mdp.reward_mean),
            features: enc4(&mdp.features),
            pi_ref: enc3(&mdp.pi_ref),
            beta: fmt_f64(mdp.beta),
            r_max: fmt_f64(mdp.r_max),
            param_radius: fmt_f64(mdp.param_radius),
            anchor: mdp.anchor,
            theta_star: mdp.theta_star.as_ref().map(|t| enc2(t)),
            noise: mdp.noise,
        }),
    };
    Ok(serde_json::to_string_pretty(&file)?)
}

/// Parsed instance of either kind.
#[derive(Debug)]
pub enum ParsedInstance {
    Bandit(AlignmentInstance),
    Mdp(TokenMdp),
}

pub fn from_json(text: &str) -> Result<ParsedInstance, SerializeError> {
    let file: InstanceFile = serde_json::from_str(text)?;
    if file.format != FORMAT_NAME || file.version != FORMAT_VERSION {
        return Err(SerializeError::UnsupportedFormat { name: file.format, version: file.version });
    }
    match file.payload {
        InstancePayload::Bandit(r) => {
            let inst = AlignmentInstance {
                dim: r.dim,
                rho: dec1(&r.rho)?,
                features: dec3(&r.features)?,
                theta_star: dec1(&r.theta_star)?,
                pi_ref: dec2(&r.pi_ref)?,
                reward_mean: dec2(&r.reward_mean)?,
                beta: parse_f64(&r.beta)?,
                r_max: parse_f64(&r.r_max)?,
                param_radius: parse_f64(&r.param_radius)?,
                geometry: r.geometry,
                noise: r.noise,
                signed_rewards: r.signed_rewards,
            };
            inst.validate().map_err(|e| SerializeError::Validation(e.to_string()))?;
            Ok(ParsedInstance::Bandit(inst))
        }
        InstancePayload::Mdp(r) => {
            let mdp = TokenMdp {
                horizon: r.horizon,
                n_actions: r.n_actions,
                dim: r.dim,
                n_states: r.n_states,
                p0: dec1(&r.p0)?,
                transitions: dec4(&r.transitions)?,
                reward_mean: dec3(&r.reward_mean)?,
                features: dec4(&r.features)?,
                pi_ref: dec3(&r.pi_ref)?,
                beta: parse_f64(&r.beta)?,
                r_max: parse_f64(&r.r_max)?,
                param_radius: parse_f64(&r.param_radius)?,
                anchor: r.anchor,
                theta_star: r.theta_star.as_deref().map(dec2).transpose()?,
                noise: r.noise,
            };
            mdp.validate().map_err(|e| SerializeError::Validation(e.to_string()))?;
            Ok(ParsedInstance::Mdp(mdp))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instance::{gen_random_instance, RandomInstanceSpec};
    use crate::mdp::{gen_token_mdp, TokenMdpSpec};

    #[test]
    fn bandit_round_trip_is_bit_exact() {
        let inst = gen_random_instance(
            &RandomInstanceSpec {
                dim: 4,
                n_prompts: 3,
                n_responses: 5,
                beta: 0.3,
                param_radius: 2.0,
                r_max: 1.0,
                noise: RewardNoise::Bernoulli,
            },
            17,
        )
        .unwrap();
        let json = bandit_to_json(&inst).unwrap();
        let ParsedInstance::Bandit(back) = from_json(&json).unwrap() else {
            panic!("wrong kind");
        };
        assert_eq!(bits2(&back.pi_ref), bits2(&inst.pi_ref));
        assert_eq!(bits2(&back.reward_mean), bits2(&inst.reward_mean));
        assert_eq!(bits1(&back.theta_star), bits1(&inst.theta_star));
        assert_eq!(back.beta.to_bits(), inst.beta.to_bits());
        for (a, b) in back.features.iter().zip(&inst.features) {
            assert_eq!(bits2(a), bits2(b));
        }
    }

    #[test]
    fn mdp_round_trip_is_bit_exact() {
        let mdp = gen_token_mdp(
            &TokenMdpSpec {
                horizon: 3,
                n_actions: 3,
                dim: 2,
                n_states_per_layer: 3,
                beta: 0.5,
                param_radius: 2.0,
                r_max: 1.0,
                realizable: true,
                feature_scale: 1.0,
                noise: RewardNoise::Deterministic,
            },
            23,
        )
        .unwrap();
        let json = mdp_to_json(&mdp).unwrap();
        let ParsedInstance::Mdp(back) = from_json(&json).unwrap() else {
            panic!("wrong kind");
        };
        assert_eq!(bits1(&back.p0), bits1(&mdp.p0));
        for (a, b) in back.transitions.iter().zip(&mdp.transitions) {
            for (c, d) in a.iter().zip(b) {
                assert_eq!(bits2(c), bits2(d));
            }
        }
        assert_eq!(
            back.theta_star.as_ref().map(|t| bits2(t)),
            mdp.theta_star.as_ref().map(|t| bits2(t))
        );
    }

    #[test]
    fn unknown_fields_and_versions_rejected() {
        let inst = gen_random_instance(
            &RandomInstanceSpec {
                dim: 2,
                n_prompts: 1,
                n_responses: 3,
                beta: 0.3,
                param_radius: 1.0,
                r_max: 1.0,
                noise: RewardNoise::Deterministic,
            },
            1,
        )
        .unwrap();
        let json = bandit_to_json(&inst).unwrap();
        let bumped = json.replace("\"version\": 1", "\"version\": 99");
        assert!(matches!(from_json(&bumped), Err(SerializeError::UnsupportedFormat { .. })));
        let extra = json.replacen('{', "{\"surprise\": 1,", 1);
        assert!(from_json(&extra).is_err());
    }

    use crate::instance::RewardNoise;

    fn bits1(v: &[f64]) -> Vec<u64> {
        v.iter().map(|x| x.to_bits()).collect()
    }
    fn bits2(v: &[Vec<f64>]) -> Vec<Vec<u64>> {
        v.iter().map(|r| bits1(r)).collect()
    }
}
