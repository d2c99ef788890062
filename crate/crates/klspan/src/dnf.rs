//! Max-k-DNF formulas: exact evaluation, brute-force optimization,
//! serial repetition, and the embedding into an alignment instance.

use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

use crate::instance::{AlignmentInstance, InstanceError, ParamGeometry, RewardNoise};
use crate::rng::RngFactory;

#[derive(Debug, Error)]
pub enum DnfError {
    #[error("formula invalid: {0}")]
    Invalid(String),
    #[error("{0} variables exceeds the brute-force limit of {MAX_OPT_VARS}")]
    TooManyVariables(usize),
    #[error("serial repetition would produce {0} clauses, over the budget of {MAX_CLAUSES}")]
    ClauseBudget(u128),
}

/// Brute-force search is limited to this many variables.
pub const MAX_OPT_VARS: usize = 24;
/// Clause budget for serial repetition.
pub const MAX_CLAUSES: u128 = 4_000_000;

/// A conjunction of literals. Literals are (variable, sign) pairs with
/// sign in {-1, +1}; a variable may appear with both signs after serial
/// repetition, in which case the clause is unsatisfiable.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Clause {
    pub literals: Vec<(usize, i8)>,
}

impl Clause {
    /// Number of distinct variables the clause touches.
    pub fn width(&self) -> usize {
        let mut vars: Vec<usize> = self.literals.iter().map(|&(v, _)| v).collect();
        vars.dedup();
        vars.len()
    }

    pub fn satisfied_by(&self, assignment: &[i8]) -> bool {
        self.literals.iter().all(|&(v, s)| assignment[v] == s)
    }
}

/// Max-k-DNF formula with `n` variables and clauses of width <= `k`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DnfFormula {
    pub n_vars: usize,
    pub max_width: usize,
    pub clauses: Vec<Clause>,
}

impl DnfFormula {
    pub fn new(n_vars: usize, max_width: usize, clauses: Vec<Clause>) -> Result<Self, DnfError> {
        let f = Self { n_vars, max_width, clauses };
        f.validate()?;
        Ok(f)
    }

    pub fn n_clauses(&self) -> usize {
        self.clauses.len()
    }

    pub fn validate(&self) -> Result<(), DnfError> {
        for (i, c) in self.clauses.iter().enumerate() {
            if c.literals.is_empty() {
                return Err(DnfError::Invalid(format!("clause {i} is empty")));
            }
            if c.width() > self.max_width {
                return Err(DnfError::Invalid(format!(
                    "clause {i} has width {} > {}",
                    c.width(),
                    self.max_width
                )));
            }
            let mut sorted = c.literals.clone();
            sorted.sort_unstable();
            if sorted != c.literals {
                return Err(DnfError::Invalid(format!("clause {i} literals not sorted")));
            }
            for &(v, s) in &c.literals {
                if v >= self.n_vars {
                    return Err(DnfError::Invalid(format!("clause {i} references var {v}")));
                }
                if s != 1 && s != -1 {
                    return Err(DnfError::Invalid(format!("clause {i} has sign {s}")));
                }
            }
        }
        Ok(())
    }
}

/// Number of clauses satisfied by the assignment (entries in {-1, +1}).
pub fn dnf_value(formula: &DnfFormula, assignment: &[i8]) -> usize {
    assert_eq!(assignment.len(), formula.n_vars);
    formula.clauses.iter().filter(|c| c.satisfied_by(assignment)).count()
}

/// Exhaustive maximizer over all 2^n assignments. Clauses are
/// precompiled to bitmasks so each assignment tests in O(m).
pub fn dnf_opt(formula: &DnfFormula) -> Result<(usize, Vec<i8>), DnfError> {
    if formula.n_vars > MAX_OPT_VARS {
        return Err(DnfError::TooManyVariables(formula.n_vars));
    }
    let n = formula.n_vars;
    // mask: variables constrained; target: bits that must be 1 (sign +1).
    // A clause with conflicting literals can never match.
    let compiled: Vec<Option<(u32, u32)>> = formula
        .clauses
        .iter()
        .map(|c| {
            let mut mask = 0u32;
            let mut target = 0u32;
            for &(v, s) in &c.literals {
                let bit = 1u32 << v;
                if mask & bit != 0 {
                    let want = if s == 1 { bit } else { 0 };
                    if target & bit != want {
                        return None;
                    }
                }
                mask |= bit;
                if s == 1 {
                    target |= bit;
                }
            }
            Some((mask, target))
        })
        .collect();
    let mut best = (0usize, 0u32);
    for x in 0u32..(1u32 << n) {
        let count = compiled
            .iter()
            .filter(|c| matches!(c, Some((mask, target)) if x & mask == *target))
            .count();
        if count > best.0 {
            best = (count, x);
        }
    }
    let assignment: Vec<i8> =
        (0..n).map(|i| if best.1 & (1 << i) != 0 { 1 } else { -1 }).collect();
    Ok((best.0, assignment))
}

/// t-fold serial repetition: one clause per ordered t-tuple of original
/// clauses, so the value satisfies val(phi') = val(phi)^t.
pub fn serial_repetition(formula: &DnfFormula, t: u32) -> Result<DnfFormula, DnfError> {
    let m = formula.n_clauses() as u128;
    let m_out = m.checked_pow(t).ok_or(DnfError::ClauseBudget(u128::MAX))?;
    if m_out > MAX_CLAUSES {
        return Err(DnfError::ClauseBudget(m_out));
    }
    let mut clauses: Vec<Clause> = vec![Clause { literals: vec![] }];
    for _ in 0..t {
        let mut next = Vec::with_capacity(clauses.len() * formula.n_clauses());
        for partial in &clauses {
            for c in &formula.clauses {
                let mut lits = partial.literals.clone();
                lits.extend_from_slice(&c.literals);
                lits.sort_unstable();
                lits.dedup();
                next.push(Clause { literals: lits });
            }
        }
        clauses = next;
    }
    if t == 0 {
        clauses = vec![];
    }
    DnfFormula::new(formula.n_vars, formula.max_width * t as usize, clauses)
}

/// Random formula in which every clause has exactly width `k`.
pub fn gen_random_formula(n_vars: usize, m: usize, k: usize, seed: u64) -> DnfFormula {
    assert!(k <= n_vars, "clause width exceeds variable count");
    let mut rng = RngFactory::new(seed).stream("dnf-gen");
    let clauses = (0..m)
        .map(|_| {
            let mut vars: Vec<usize> = (0..n_vars).collect();
            vars.shuffle(&mut rng);
            let mut literals: Vec<(usize, i8)> = vars[..k]
                .iter()
                .map(|&v| (v, if rng.gen::<bool>() { 1i8 } else { -1i8 }))
                .collect();
            literals.sort_unstable();
            Clause { literals }
        })
        .collect();
    DnfFormula { n_vars, max_width: k, clauses }
}

/// Embeds a formula as a single-prompt alignment instance: response 0 is
/// a high-probability "null" response, response i > 0 corresponds to
/// clause i with feature `phi(i)_j = sign/k` on its variables, and the
/// hidden parameter is a maximally satisfying assignment found by brute
/// force. The parameter set is the l-infinity unit box.
pub fn gen_dnf_instance(formula: &DnfFormula, beta: f64) -> Result<AlignmentInstance, InstanceError> {
    formula
        .validate()
        .map_err(|e| InstanceError::Infeasible(format!("formula: {e}")))?;
    let (_, assignment) =
        dnf_opt(formula).map_err(|e| InstanceError::Infeasible(format!("dnf_opt: {e}")))?;
    let n = formula.n_vars;
    let m = formula.n_clauses();
    let k = formula.max_width as f64;
    let eps_ref = (-1.0 / beta).exp();
    let theta_star: Vec<f64> = assignment.iter().map(|&s| s as f64).collect();

    let mut features = vec![vec![vec![0.0; n]; m + 1]];
    for (i, c) in formula.clauses.iter().enumerate() {
        for &(v, s) in &c.literals {
            features[0][i + 1][v] += s as f64 / k;
        }
    }
    let mut pi_ref = vec![vec![0.0; m + 1]];
    pi_ref[0][0] = 1.0 - eps_ref;
    for y in 1..=m {
        pi_ref[0][y] = eps_ref / m as f64;
    }
    let reward_mean: Vec<Vec<f64>> = vec![(0..=m)
        .map(|y| crate::numeric::dot(&theta_star, &features[0][y]))
        .collect()];
    let inst = AlignmentInstance {
        dim: n,
        rho: vec![1.0],
        features,
        theta_star,
        pi_ref,
        reward_mean,
        beta,
        r_max: 1.0,
        param_radius: (n as f64).sqrt(),
        geometry: ParamGeometry::BoxLinf { halfwidth: 1.0 },
        noise: RewardNoise::Deterministic,
        signed_rewards: true,
    };
    inst.validate()?;
    Ok(inst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::norm2;

    /// Independent oracle: recursive enumeration over i8 assignments with
    /// direct clause checks, no bitmask compilation.
    fn brute_force_opt(formula: &DnfFormula) -> usize {
        fn rec(formula: &DnfFormula, partial: &mut Vec<i8>) -> usize {
            if partial.len() == formula.n_vars {
                return dnf_value(formula, partial);
            }
            let mut best = 0;
            for s in [-1i8, 1] {
                partial.push(s);
                best = best.max(rec(formula, partial));
                partial.pop();
            }
            best
        }
        rec(formula, &mut Vec::new())
    }

    #[test]
    fn empty_formula_has_value_zero() {
        let f = DnfFormula { n_vars: 4, max_width: 2, clauses: vec![] };
        assert_eq!(dnf_value(&f, &[1, 1, -1, -1]), 0);
        assert_eq!(dnf_opt(&f).unwrap().0, 0);
    }

    #[test]
    fn identical_clauses_all_satisfied() {
        let c = Clause { literals: vec![(0, 1), (2, -1)] };
        let f = DnfFormula { n_vars: 3, max_width: 2, clauses: vec![c; 5] };
        assert_eq!(dnf_value(&f, &[1, -1, -1]), 5);
        assert_eq!(dnf_opt(&f).unwrap().0, 5);
    }

    #[test]
    fn opt_matches_independent_enumeration() {
        for seed in 0..6 {
            let f = gen_random_formula(12, 30, 3, seed);
            let (v, arg) = dnf_opt(&f).unwrap();
            assert_eq!(v, brute_force_opt(&f));
            assert_eq!(dnf_value(&f, &arg), v);
        }
    }

    #[test]
    fn opt_rejects_large_n() {
        let f = DnfFormula { n_vars: 30, max_width: 1, clauses: vec![] };
        assert!(matches!(dnf_opt(&f), Err(DnfError::TooManyVariables(30))));
    }

    #[test]
    fn repetition_t1_is_identity_up_to_order() {
        let f = gen_random_formula(8, 5, 2, 3);
        let g = serial_repetition(&f, 1).unwrap();
        assert_eq!(g.n_clauses(), f.n_clauses());
        for c in &f.clauses {
            assert!(g.clauses.contains(c));
        }
    }

    #[test]
    fn repetition_squares_fully_satisfiable_value() {
        let c1 = Clause { literals: vec![(0, 1)] };
        let c2 = Clause { literals: vec![(1, 1)] };
        let f = DnfFormula { n_vars: 2, max_width: 1, clauses: vec![c1, c2] };
        let g = serial_repetition(&f, 2).unwrap();
        assert_eq!(g.n_clauses(), 4);
        assert_eq!(dnf_opt(&g).unwrap().0, 4);
    }

    #[test]
    fn repetition_value_identity_on_random_formulas() {
        for seed in 0..8 {
            let f = gen_random_formula(8, 5, 2, seed);
            let v1 = dnf_opt(&f).unwrap().0;
            let g = serial_repetition(&f, 2).unwrap();
            assert_eq!(dnf_opt(&g).unwrap().0, v1 * v1, "seed {seed}");
        }
    }

    #[test]
    fn single_clause_embedding() {
        let c = Clause { literals: vec![(0, 1), (1, 1)] };
        let f = DnfFormula { n_vars: 3, max_width: 2, clauses: vec![c] };
        let inst = gen_dnf_instance(&f, 0.4).unwrap();
        // Clause is satisfiable, so reward of response 1 is 1.
        assert!((inst.reward_mean[0][1] - 1.0).abs() < 1e-15);
        assert_eq!(inst.reward_mean[0][0], 0.0);
        assert_eq!(inst.geometry, ParamGeometry::BoxLinf { halfwidth: 1.0 });
    }

    #[test]
    fn embedding_feature_norms_at_most_one() {
        let f = gen_random_formula(10, 20, 3, 5);
        let inst = gen_dnf_instance(&f, 0.3).unwrap();
        for y in 0..inst.n_responses() {
            let l1: f64 = inst.features[0][y].iter().map(|x| x.abs()).sum();
            assert!(l1 <= 1.0 + 1e-12);
            assert!(norm2(&inst.features[0][y]) <= 1.0 + 1e-12);
        }
        // max_i r(i) = 1 iff at least one clause is satisfiable.
        let vmax = dnf_opt(&f).unwrap().0;
        let rmax = inst.reward_mean[0][1..].iter().copied().fold(f64::MIN, f64::max);
        assert_eq!(vmax >= 1, (rmax - 1.0).abs() < 1e-12);
    }
}
