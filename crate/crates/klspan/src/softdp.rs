//! Exact soft Bellman dynamic programming on enumerable MDPs: optimal
//! regularized value functions, policy evaluation with KL penalties, the
//! performance-difference identity, and exact laws of layered sampled
//! policies.

use crate::exact::KlValue;
use crate::mdp::TokenMdp;
use crate::numeric::{kahan_sum, log_weighted_sum_exp, KahanSum};

/// Per-layer state-action and state value tables.
#[derive(Debug, Clone)]
pub struct QTables {
    /// q[h][x][a]
    pub q: Vec<Vec<Vec<f64>>>,
    /// v[h][x]
    pub v: Vec<Vec<f64>>,
    pub beta: f64,
}

impl QTables {
    /// Max over layers and states of |V_h(x) - beta log sum_a pi_ref e^{Q/beta}|.
    pub fn soft_consistency_residual(&self, mdp: &TokenMdp) -> f64 {
        let mut worst = 0.0f64;
        for h in 0..mdp.horizon {
            for x in 0..mdp.n_states[h] {
                let scaled: Vec<f64> = self.q[h][x].iter().map(|&q| q / self.beta).collect();
                let v = self.beta * log_weighted_sum_exp(&mdp.pi_ref[h][x], &scaled);
                worst = worst.max((v - self.v[h][x]).abs());
            }
        }
        worst
    }
}

/// Soft value V_f(x) = beta log sum_a pi_ref(a|x) e^{f(x,a)/beta}.
fn soft_value(pi_ref_row: &[f64], q_row: &[f64], beta: f64) -> f64 {
    let scaled: Vec<f64> = q_row.iter().map(|&q| q / beta).collect();
    beta * log_weighted_sum_exp(pi_ref_row, &scaled)
}

/// Optimal regularized tables by backward induction with the soft
/// backup, the induced softmax-optimal policy, and the optimal value
/// J_beta(pi*) = E_{p0}[V*_0].
pub fn exact_qstar(mdp: &TokenMdp) -> (QTables, Vec<Vec<Vec<f64>>>, f64) {
    let beta = mdp.beta;
    let h_max = mdp.horizon;
    let mut q = vec![Vec::new(); h_max];
    let mut v = vec![Vec::new(); h_max];
    for h in (0..h_max).rev() {
        let nx = mdp.n_states[h];
        q[h] = vec![vec![0.0; mdp.n_actions]; nx];
        v[h] = vec![0.0; nx];
        for x in 0..nx {
            for a in 0..mdp.n_actions {
                let mut val = mdp.reward_mean[h][x][a];
                if h + 1 < h_max {
                    let next_v: &[f64] = &v[h + 1];
                    val += kahan_sum(
                        mdp.transitions[h][x][a]
                            .iter()
                            .zip(next_v)
                            .map(|(&p, &vx)| p * vx),
                    );
                }
                q[h][x][a] = val;
            }
            v[h][x] = soft_value(&mdp.pi_ref[h][x], &q[h][x], beta);
        }
    }
    let pi_star: Vec<Vec<Vec<f64>>> = (0..h_max)
        .map(|h| {
            (0..mdp.n_states[h])
                .map(|x| {
                    let scaled: Vec<f64> = q[h][x].iter().map(|&qv| qv / beta).collect();
                    let log_z = log_weighted_sum_exp(&mdp.pi_ref[h][x], &scaled);
                    mdp.pi_ref[h][x]
                        .iter()
                        .zip(&scaled)
                        .map(|(&p, &s)| if p > 0.0 { p * (s - log_z).exp() } else { 0.0 })
                        .collect()
                })
                .collect()
        })
        .collect();
    let j_star = kahan_sum(mdp.p0.iter().zip(&v[0]).map(|(&p, &vx)| p * vx));
    (QTables { q, v, beta }, pi_star, j_star)
}

/// Exact policy evaluation with per-step KL penalties. Returns the
/// Q^pi tables (V entries hold the penalized continuation values) and
/// J_beta(pi); infinite when pi leaves the reference support.
pub fn exact_qpi(mdp: &TokenMdp, policy: &[Vec<Vec<f64>>]) -> (QTables, KlValue) {
    let beta = mdp.beta;
    let h_max = mdp.horizon;
    let mut q = vec![Vec::new(); h_max];
    let mut v = vec![Vec::new(); h_max];
    let mut infinite = false;
    for h in (0..h_max).rev() {
        let nx = mdp.n_states[h];
        q[h] = vec![vec![0.0; mdp.n_actions]; nx];
        v[h] = vec![0.0; nx];
        for x in 0..nx {
            for a in 0..mdp.n_actions {
                let mut val = mdp.reward_mean[h][x][a];
                if h + 1 < h_max {
                    let next_v: &[f64] = &v[h + 1];
                    val += kahan_sum(
                        mdp.transitions[h][x][a]
                            .iter()
                            .zip(next_v)
                            .map(|(&p, &vx)| p * vx),
                    );
                }
                q[h][x][a] = val;
            }
            // V^pi_h(x) = sum_a pi(a|x) (Q^pi_h(x,a) - beta log(pi/pi_ref)).
            let mut acc = KahanSum::new();
            for a in 0..mdp.n_actions {
                let p = policy[h][x][a];
                if p == 0.0 {
                    continue;
                }
                let pref = mdp.pi_ref[h][x][a];
                if pref == 0.0 {
                    infinite = true;
                    continue;
                }
                acc.add(p * (q[h][x][a] - beta * (p / pref).ln()));
            }
            v[h][x] = acc.value();
        }
    }
    let j = kahan_sum(mdp.p0.iter().zip(&v[0]).map(|(&p, &vx)| p * vx));
    let jv = if infinite { KlValue::Infinite } else { KlValue::Finite(j) };
    (QTables { q, v, beta }, jv)
}

/// Layer-h state occupancy of a policy (forward pass).
pub fn occupancy(mdp: &TokenMdp, policy: &[Vec<Vec<f64>>]) -> Vec<Vec<f64>> {
    let mut occ = vec![Vec::new(); mdp.horizon];
    occ[0] = mdp.p0.clone();
    for h in 0..mdp.horizon.saturating_sub(1) {
        let mut next = vec![0.0; mdp.n_states[h + 1]];
        for x in 0..mdp.n_states[h] {
            let w = occ[h][x];
            if w == 0.0 {
                continue;
            }
            for a in 0..mdp.n_actions {
                let pa = w * policy[h][x][a];
                if pa == 0.0 {
                    continue;
                }
                for (x2, &p) in mdp.transitions[h][x][a].iter().enumerate() {
                    next[x2] += pa * p;
                }
            }
        }
        occ[h + 1] = next;
    }
    occ
}

/// Both sides of the performance-difference identity
/// `J(pi) - J(pi')` versus the sum over layers of advantage-style terms
/// evaluated under pi' occupancy with Q^pi. Returns (lhs, rhs).
pub fn performance_difference(
    mdp: &TokenMdp,
    pi: &[Vec<Vec<f64>>],
    pi_prime: &[Vec<Vec<f64>>],
) -> (f64, f64) {
    let beta = mdp.beta;
    let (q_pi, j_pi) = exact_qpi(mdp, pi);
    let (_, j_pip) = exact_qpi(mdp, pi_prime);
    let lhs = j_pi.expect_finite("J(pi)") - j_pip.expect_finite("J(pi')");
    let occ = occupancy(mdp, pi_prime);
    let mut rhs = KahanSum::new();
    for h in 0..mdp.horizon {
        for x in 0..mdp.n_states[h] {
            let w = occ[h][x];
            if w == 0.0 {
                continue;
            }
            let mut term = KahanSum::new();
            for (label, pol) in [(1.0, pi), (-1.0, pi_prime)] {
                for a in 0..mdp.n_actions {
                    let p = pol[h][x][a];
                    if p == 0.0 {
                        continue;
                    }
                    let pref = mdp.pi_ref[h][x][a];
                    term.add(label * p * (q_pi.q[h][x][a] - beta * (p / pref).ln()));
                }
            }
            rhs.add(w * term.value());
        }
    }
    (lhs, rhs.value())
}

/// Exact probability that a policy emits a given action sequence, for
/// deterministic-transition MDPs (used by the two-step gap checks).
pub fn sequence_mass(mdp: &TokenMdp, policy: &[Vec<Vec<f64>>], actions: &[usize]) -> f64 {
    assert_eq!(actions.len(), mdp.horizon);
    let mut mass = 0.0;
    for (x0, &p0) in mdp.p0.iter().enumerate() {
        if p0 == 0.0 {
            continue;
        }
        let mut w = p0;
        let mut x = x0;
        for (h, &a) in actions.iter().enumerate() {
            w *= policy[h][x][a];
            if w == 0.0 {
                break;
            }
            if h + 1 < mdp.horizon {
                let row = &mdp.transitions[h][x][a];
                // Deterministic transitions: follow the unit-mass entry.
                let (x2, &p) = row
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .unwrap();
                debug_assert!((p - 1.0).abs() < 1e-12, "sequence_mass needs deterministic transitions");
                x = x2;
            }
        }
        mass += w;
    }
    mass
}

/// Sequence-level optimal policy mass on a given action sequence: the
/// softmax over all A^H sequences of the summed rewards, evaluated for
/// deterministic-transition MDPs by enumeration.
pub fn seq_optimal_mass(mdp: &TokenMdp, target: &[usize]) -> f64 {
    let h_max = mdp.horizon;
    let n_seq = mdp.n_actions.pow(h_max as u32);
    let mut log_w = Vec::with_capacity(n_seq);
    let mut target_idx = 0usize;
    for idx in 0..n_seq {
        let mut rest = idx;
        let mut actions = vec![0usize; h_max];
        for h in 0..h_max {
            actions[h] = rest % mdp.n_actions;
            rest /= mdp.n_actions;
        }
        if &actions == target {
            target_idx = idx;
        }
        // Deterministic transitions from the unit-mass initial state.
        let mut x = mdp.p0.iter().position(|&p| p > 0.5).expect("deterministic start");
        let mut reward = 0.0;
        let mut log_ref = 0.0;
        for h in 0..h_max {
            let a = actions[h];
            reward += mdp.reward_mean[h][x][a];
            log_ref += mdp.pi_ref[h][x][a].ln();
            if h + 1 < h_max {
                x = mdp.transitions[h][x][a].iter().position(|&p| p > 0.5).unwrap();
            }
        }
        log_w.push(log_ref + reward / mdp.beta);
    }
    let log_z = crate::numeric::log_sum_exp(&log_w);
    (log_w[target_idx] - log_z).exp()
}

/// Best autoregressive linear softmax mass on a target sequence over a
/// grid of per-layer parameters (square grid of `grid_per_axis` points
/// per coordinate in [-radius, radius]).
pub fn best_autoregressive_mass_on_grid(
    mdp: &TokenMdp,
    target: &[usize],
    grid_per_axis: usize,
    radius: f64,
) -> f64 {
    assert_eq!(mdp.dim, 2, "grid search is wired for d = 2");
    let axis: Vec<f64> = (0..grid_per_axis)
        .map(|i| -radius + 2.0 * radius * i as f64 / (grid_per_axis - 1) as f64)
        .collect();
    let policy_for = |theta: &[Vec<f64>]| -> Vec<Vec<Vec<f64>>> {
        (0..mdp.horizon)
            .map(|h| {
                (0..mdp.n_states[h])
                    .map(|x| {
                        let scaled: Vec<f64> = (0..mdp.n_actions)
                            .map(|a| crate::numeric::dot(&theta[h], &mdp.features[h][x][a]) / mdp.beta)
                            .collect();
                        let log_z = log_weighted_sum_exp(&mdp.pi_ref[h][x], &scaled);
                        mdp.pi_ref[h][x]
                            .iter()
                            .zip(&scaled)
                            .map(|(&p, &s)| if p > 0.0 { p * (s - log_z).exp() } else { 0.0 })
                            .collect()
                    })
                    .collect()
            })
            .collect()
    };
    let mut best = 0.0f64;
    for &t1a in &axis {
        for &t1b in &axis {
            for &t2a in &axis {
                for &t2b in &axis {
                    let theta = vec![vec![t1a, t1b], vec![t2a, t2b]];
                    let pol = policy_for(&theta);
                    best = best.max(sequence_mass(mdp, &pol, target));
                }
            }
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instance::RewardNoise;
    use crate::mdp::{bandit_from_mdp, gen_autoregressive_gap_instance, gen_token_mdp, TokenMdpSpec};

    fn spec(h: usize) -> TokenMdpSpec {
        TokenMdpSpec {
            horizon: h,
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
    fn horizon_one_matches_bandit_oracle() {
        let mdp = gen_token_mdp(&spec(1), 3).unwrap();
        let (q, pi_star, j_star) = exact_qstar(&mdp);
        // Q*_1 = r*_1.
        for x in 0..mdp.n_states[0] {
            for a in 0..mdp.n_actions {
                assert!((q.q[0][x][a] - mdp.reward_mean[0][x][a]).abs() < 1e-14);
            }
        }
        let inst = bandit_from_mdp(&mdp).unwrap();
        let (pi_b, j_b) = crate::exact::exact_optimal(&inst);
        assert!((j_star - j_b).abs() < 1e-12);
        for x in 0..mdp.n_states[0] {
            for a in 0..mdp.n_actions {
                assert!((pi_star[0][x][a] - pi_b.probs[x][a]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_rewards_give_reference_policy_and_zero_value() {
        let mut mdp = gen_token_mdp(&spec(3), 4).unwrap();
        for layer in &mut mdp.reward_mean {
            for row in layer {
                row.iter_mut().for_each(|r| *r = 0.0);
            }
        }
        let (_, pi_star, j_star) = exact_qstar(&mdp);
        assert!(j_star.abs() < 1e-12);
        for h in 0..mdp.horizon {
            for x in 0..mdp.n_states[h] {
                for a in 0..mdp.n_actions {
                    assert!((pi_star[h][x][a] - mdp.pi_ref[h][x][a]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn value_difference_residual_on_realizable_instances() {
        for seed in 0..10 {
            let mdp = gen_token_mdp(&spec(3), seed).unwrap();
            let (q, _, _) = exact_qstar(&mdp);
            let thetas = mdp.theta_star.as_ref().unwrap();
            let mut worst = 0.0f64;
            for h in 0..mdp.horizon {
                for x in 0..mdp.n_states[h] {
                    for a in 0..mdp.n_actions {
                        let lin = crate::numeric::dot(&thetas[h], &mdp.anchored_feature(h, x, a));
                        let tab = q.q[h][x][a] - q.q[h][x][mdp.anchor];
                        worst = worst.max((lin - tab).abs());
                    }
                }
            }
            assert!(worst < 1e-9, "seed {seed}: residual {worst}");
        }
    }

    #[test]
    fn soft_consistency_of_qstar() {
        let mdp = gen_token_mdp(&spec(3), 8).unwrap();
        let (q, _, _) = exact_qstar(&mdp);
        assert!(q.soft_consistency_residual(&mdp) < 1e-10);
    }

    #[test]
    fn qpi_at_optimal_policy_matches_qstar() {
        let mdp = gen_token_mdp(&spec(3), 9).unwrap();
        let (q_star, pi_star, j_star) = exact_qstar(&mdp);
        let (q_pi, j_pi) = exact_qpi(&mdp, &pi_star);
        assert!((j_star - j_pi.expect_finite("J")).abs() < 1e-10);
        for h in 0..mdp.horizon {
            for x in 0..mdp.n_states[h] {
                for a in 0..mdp.n_actions {
                    assert!((q_star.q[h][x][a] - q_pi.q[h][x][a]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn performance_difference_identity() {
        let mdp = gen_token_mdp(&spec(3), 10).unwrap();
        let (_, pi_star, _) = exact_qstar(&mdp);
        // pi = pi' gives residual 0 with both sides 0.
        let (l0, r0) = performance_difference(&mdp, &pi_star, &pi_star);
        assert!(l0.abs() < 1e-12 && r0.abs() < 1e-12);
        let (lhs, rhs) = performance_difference(&mdp, &pi_star, &mdp.pi_ref);
        assert!((lhs - rhs).abs() < 1e-9, "{lhs} vs {rhs}");
    }

    #[test]
    fn gap_instance_sequence_mass() {
        let mdp = gen_autoregressive_gap_instance(0.1).unwrap();
        // Optimal sequence-level mass on "(2, 1)" = token indices (1, 0).
        let mass = seq_optimal_mass(&mdp, &[1, 0]);
        assert!((mass - 1.0 / 1.1).abs() < 1e-12);
        let best = best_autoregressive_mass_on_grid(&mdp, &[1, 0], 10, mdp.param_radius);
        assert!(best <= 0.5 + 1e-12);
    }
}
