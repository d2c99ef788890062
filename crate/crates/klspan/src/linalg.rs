//! Dense small-d linear algebra: regularized design matrices with
//! maintained inverses, Mahalanobis norms, and projected least squares.
//!
//! Everything here is sized for d up to a few tens; matrices are plain
//! row-major `Vec<f64>` and factorizations are recomputed in O(d^3)
//! whenever needed.

use thiserror::Error;

use crate::numeric::{dot, kahan_sum, norm2};

#[derive(Debug, Error, PartialEq)]
pub enum LinalgError {
    #[error("vector has non-finite entries")]
    NonFiniteInput,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("ridge weight must be positive to maintain an inverse, got {0}")]
    NonPositiveLambda(f64),
    #[error("matrix is not positive definite")]
    NotPositiveDefinite,
}

/// Dense symmetric matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    n: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(n: usize) -> Self {
        Self { n, data: vec![0.0; n * n] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn scaled_identity(n: usize, s: f64) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            m[(i, i)] = s;
        }
        m
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.n);
        (0..self.n)
            .map(|i| dot(&self.data[i * self.n..(i + 1) * self.n], v))
            .collect()
    }

    /// v' M v, clamped at zero (M is PSD in all our uses).
    pub fn quad_form(&self, v: &[f64]) -> f64 {
        dot(&self.matvec(v), v).max(0.0)
    }

    pub fn add_outer(&mut self, v: &[f64], scale: f64) {
        assert_eq!(v.len(), self.n);
        for i in 0..self.n {
            for j in 0..self.n {
                self.data[i * self.n + j] += scale * v[i] * v[j];
            }
        }
    }

    /// Cholesky factor L (lower) with P = L L'. Fails if not SPD.
    pub fn cholesky(&self) -> Result<Matrix, LinalgError> {
        let n = self.n;
        let mut l = Matrix::zeros(n);
        for i in 0..n {
            for j in 0..=i {
                let s = kahan_sum((0..j).map(|k| l[(i, k)] * l[(j, k)]));
                if i == j {
                    let d = self[(i, i)] - s;
                    if d <= 0.0 || !d.is_finite() {
                        return Err(LinalgError::NotPositiveDefinite);
                    }
                    l[(i, i)] = d.sqrt();
                } else {
                    l[(i, j)] = (self[(i, j)] - s) / l[(j, j)];
                }
            }
        }
        Ok(l)
    }

    /// Solves M x = b via Cholesky (M must be SPD).
    pub fn solve_spd(&self, b: &[f64]) -> Result<Vec<f64>, LinalgError> {
        let l = self.cholesky()?;
        Ok(l.cholesky_solve(b))
    }

    /// Like [`Matrix::solve_spd`], but also rejects numerically singular
    /// matrices (pivot ratio below `rel_tol`), where a lucky Cholesky
    /// would return an arbitrary rather than minimum-norm solution.
    fn solve_spd_guarded(&self, b: &[f64], rel_tol: f64) -> Result<Vec<f64>, LinalgError> {
        let l = self.cholesky()?;
        let mut lo = f64::INFINITY;
        let mut hi = 0.0f64;
        for i in 0..self.n {
            lo = lo.min(l[(i, i)]);
            hi = hi.max(l[(i, i)]);
        }
        if lo < rel_tol * hi {
            return Err(LinalgError::NotPositiveDefinite);
        }
        Ok(l.cholesky_solve(b))
    }

    /// Solves L L' x = b given the Cholesky factor L = self.
    fn cholesky_solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut y = b.to_vec();
        for i in 0..n {
            let s = kahan_sum((0..i).map(|k| self[(i, k)] * y[k]));
            y[i] = (y[i] - s) / self[(i, i)];
        }
        for i in (0..n).rev() {
            let s = kahan_sum((i + 1..n).map(|k| self[(k, i)] * y[k]));
            y[i] = (y[i] - s) / self[(i, i)];
        }
        y
    }

    /// Inverse of an SPD matrix via Cholesky column solves.
    pub fn inverse_spd(&self) -> Result<Matrix, LinalgError> {
        let n = self.n;
        let l = self.cholesky()?;
        let mut inv = Matrix::zeros(n);
        let mut e = vec![0.0; n];
        for j in 0..n {
            e[j] = 1.0;
            let col = l.cholesky_solve(&e);
            e[j] = 0.0;
            for i in 0..n {
                inv[(i, j)] = col[i];
            }
        }
        // Symmetrize to wash out the last ulps of asymmetry.
        for i in 0..n {
            for j in 0..i {
                let m = 0.5 * (inv[(i, j)] + inv[(j, i)]);
                inv[(i, j)] = m;
                inv[(j, i)] = m;
            }
        }
        Ok(inv)
    }

    /// Eigendecomposition of a symmetric matrix by cyclic Jacobi
    /// rotations. Returns (eigenvalues, eigenvectors as columns).
    pub fn sym_eigen(&self) -> (Vec<f64>, Matrix) {
        let n = self.n;
        let mut a = self.clone();
        let mut v = Matrix::identity(n);
        for _sweep in 0..100 {
            let mut off = 0.0;
            for i in 0..n {
                for j in (i + 1)..n {
                    off += a[(i, j)] * a[(i, j)];
                }
            }
            if off <= 1e-28 {
                break;
            }
            for p in 0..n {
                for q in (p + 1)..n {
                    if a[(p, q)].abs() <= 1e-300 {
                        continue;
                    }
                    let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * a[(p, q)]);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let akp = a[(k, p)];
                        let akq = a[(k, q)];
                        a[(k, p)] = c * akp - s * akq;
                        a[(k, q)] = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let apk = a[(p, k)];
                        let aqk = a[(q, k)];
                        a[(p, k)] = c * apk - s * aqk;
                        a[(q, k)] = s * apk + c * aqk;
                    }
                    for k in 0..n {
                        let vkp = v[(k, p)];
                        let vkq = v[(k, q)];
                        v[(k, p)] = c * vkp - s * vkq;
                        v[(k, q)] = s * vkp + c * vkq;
                    }
                }
            }
        }
        let eig = (0..n).map(|i| a[(i, i)]).collect();
        (eig, v)
    }

    /// Minimum eigenvalue (symmetric matrices only).
    pub fn min_eigenvalue(&self) -> f64 {
        let (eig, _) = self.sym_eigen();
        eig.into_iter().fold(f64::INFINITY, f64::min)
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.n + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.n + j]
    }
}

/// How often the maintained inverse is recomputed from scratch to bound
/// Sherman-Morrison drift.
const REFACTOR_EVERY: usize = 256;

/// Regularized design matrix `sigma = lambda I + sum_i v_i v_i'` with a
/// maintained inverse.
///
/// Rank-one updates cost O(d^2); a full refactorization runs every
/// [`REFACTOR_EVERY`] updates to bound numerical drift.
#[derive(Debug, Clone)]
pub struct DesignMatrix {
    dim: usize,
    lambda: f64,
    sigma: Matrix,
    sigma_inv: Matrix,
    updates_since_refactor: usize,
    n_updates: u64,
}

impl DesignMatrix {
    pub fn new(dim: usize, lambda: f64) -> Result<Self, LinalgError> {
        if !(lambda > 0.0) || !lambda.is_finite() {
            return Err(LinalgError::NonPositiveLambda(lambda));
        }
        Ok(Self {
            dim,
            lambda,
            sigma: Matrix::scaled_identity(dim, lambda),
            sigma_inv: Matrix::scaled_identity(dim, 1.0 / lambda),
            updates_since_refactor: 0,
            n_updates: 0,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn sigma(&self) -> &Matrix {
        &self.sigma
    }

    pub fn sigma_inv(&self) -> &Matrix {
        &self.sigma_inv
    }

    pub fn n_updates(&self) -> u64 {
        self.n_updates
    }

    /// sigma += v v', with the inverse updated by the Sherman-Morrison
    /// rank-one formula.
    pub fn rank_one_update(&mut self, v: &[f64]) -> Result<(), LinalgError> {
        if v.len() != self.dim {
            return Err(LinalgError::DimensionMismatch { expected: self.dim, got: v.len() });
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(LinalgError::NonFiniteInput);
        }
        self.sigma.add_outer(v, 1.0);
        let u = self.sigma_inv.matvec(v);
        let denom = 1.0 + dot(v, &u);
        self.sigma_inv.add_outer(&u, -1.0 / denom);
        self.n_updates += 1;
        self.updates_since_refactor += 1;
        if self.updates_since_refactor >= REFACTOR_EVERY {
            self.refactor()?;
        }
        Ok(())
    }

    fn refactor(&mut self) -> Result<(), LinalgError> {
        self.sigma_inv = self.sigma.inverse_spd()?;
        self.updates_since_refactor = 0;
        Ok(())
    }

    /// Squared Mahalanobis norm v' sigma^{-1} v.
    pub fn mahalanobis_sq(&self, v: &[f64]) -> Result<f64, LinalgError> {
        if v.len() != self.dim {
            return Err(LinalgError::DimensionMismatch { expected: self.dim, got: v.len() });
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(LinalgError::NonFiniteInput);
        }
        Ok(self.sigma_inv.quad_form(v))
    }

    /// Max-abs deviation of sigma * sigma_inv from the identity.
    pub fn inverse_residual(&self) -> f64 {
        let n = self.dim;
        let mut worst = 0.0f64;
        for i in 0..n {
            for j in 0..n {
                let mut s = kahan_sum((0..n).map(|k| self.sigma[(i, k)] * self.sigma_inv[(k, j)]));
                if i == j {
                    s -= 1.0;
                }
                worst = worst.max(s.abs());
            }
        }
        worst
    }
}

/// Euclidean ball constraint of radius B on fitted parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BallConstraint {
    pub radius: f64,
}

impl BallConstraint {
    pub fn new(radius: f64) -> Self {
        assert!(radius > 0.0, "ball radius must be positive");
        Self { radius }
    }

    /// Exact Euclidean projection: scale down iff the norm exceeds B.
    pub fn project(&self, mut v: Vec<f64>) -> Vec<f64> {
        let n = norm2(&v);
        if n > self.radius {
            let s = self.radius / n;
            for x in &mut v {
                *x *= s;
            }
        }
        v
    }
}

/// Ridge least squares `argmin_theta lambda |theta|^2 + sum (x'theta - y)^2`
/// followed by Euclidean projection onto the ball.
///
/// With `lambda = 0` and a singular Gram matrix the minimum-norm solution
/// is returned (eigen pseudo-inverse), then projected.
pub fn projected_least_squares(
    data: &[(Vec<f64>, f64)],
    dim: usize,
    lambda: f64,
    ball: BallConstraint,
) -> Vec<f64> {
    if data.is_empty() && lambda >= 0.0 {
        return vec![0.0; dim];
    }
    let mut gram = Matrix::scaled_identity(dim, lambda);
    let mut rhs = vec![crate::numeric::KahanSum::new(); dim];
    for (x, y) in data {
        debug_assert_eq!(x.len(), dim);
        gram.add_outer(x, 1.0);
        for i in 0..dim {
            rhs[i].add(x[i] * *y);
        }
    }
    let b: Vec<f64> = rhs.iter().map(|k| k.value()).collect();
    let theta = match gram.solve_spd_guarded(&b, 1e-7) {
        Ok(t) => t,
        Err(_) => pseudo_solve(&gram, &b),
    };
    ball.project(theta)
}

/// Minimum-norm solution of G x = b for symmetric PSD G via
/// eigendecomposition, dropping near-null directions.
fn pseudo_solve(g: &Matrix, b: &[f64]) -> Vec<f64> {
    let n = g.dim();
    let (eig, vecs) = g.sym_eigen();
    let max_eig = eig.iter().copied().fold(0.0f64, f64::max);
    let tol = max_eig * 1e-12 + 1e-300;
    let mut x = vec![0.0; n];
    for (k, &lam) in eig.iter().enumerate() {
        if lam <= tol {
            continue;
        }
        let col: Vec<f64> = (0..n).map(|i| vecs[(i, k)]).collect();
        let coef = dot(&col, b) / lam;
        for i in 0..n {
            x[i] += coef * col[i];
        }
    }
    x
}

/// Ridge objective value, used by tests and the loss-monotonicity check.
pub fn ridge_objective(data: &[(Vec<f64>, f64)], lambda: f64, theta: &[f64]) -> f64 {
    let fit = kahan_sum(data.iter().map(|(x, y)| {
        let r = dot(x, theta) - y;
        r * r
    }));
    fit + lambda * dot(theta, theta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    /// Test-side oracle: plain Gauss-Jordan inversion, independent of the
    /// Cholesky path used by the implementation.
    fn gauss_jordan_inverse(m: &Matrix) -> Matrix {
        let n = m.dim();
        let mut a = m.clone();
        let mut inv = Matrix::identity(n);
        for col in 0..n {
            let pivot = (col..n)
                .max_by(|&i, &j| a[(i, col)].abs().partial_cmp(&a[(j, col)].abs()).unwrap())
                .unwrap();
            for j in 0..n {
                let t = a[(col, j)];
                a[(col, j)] = a[(pivot, j)];
                a[(pivot, j)] = t;
                let t = inv[(col, j)];
                inv[(col, j)] = inv[(pivot, j)];
                inv[(pivot, j)] = t;
            }
            let p = a[(col, col)];
            for j in 0..n {
                a[(col, j)] /= p;
                inv[(col, j)] /= p;
            }
            for i in 0..n {
                if i != col {
                    let f = a[(i, col)];
                    for j in 0..n {
                        a[(i, j)] -= f * a[(col, j)];
                        inv[(i, j)] -= f * inv[(col, j)];
                    }
                }
            }
        }
        inv
    }

    fn axis(d: usize, i: usize) -> Vec<f64> {
        let mut v = vec![0.0; d];
        v[i] = 1.0;
        v
    }

    #[test]
    fn identity_plus_axis_vector() {
        let mut m = DesignMatrix::new(2, 1.0).unwrap();
        m.rank_one_update(&axis(2, 0)).unwrap();
        assert_eq!(m.sigma()[(0, 0)], 2.0);
        assert_eq!(m.sigma()[(1, 1)], 1.0);
        assert!((m.sigma_inv()[(0, 0)] - 0.5).abs() < 1e-15);
        assert!((m.sigma_inv()[(1, 1)] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn zero_update_is_noop() {
        let mut m = DesignMatrix::new(3, 0.7).unwrap();
        let before = m.sigma().clone();
        m.rank_one_update(&[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(m.sigma().max_abs_diff(&before), 0.0);
    }

    #[test]
    fn non_finite_update_rejected() {
        let mut m = DesignMatrix::new(2, 1.0).unwrap();
        assert_eq!(m.rank_one_update(&[f64::NAN, 0.0]), Err(LinalgError::NonFiniteInput));
    }

    #[test]
    fn maintained_inverse_tracks_fresh_inversion() {
        let mut rng = crate::rng::RngFactory::new(11).stream("linalg");
        let d = 5;
        let mut m = DesignMatrix::new(d, 0.5).unwrap();
        for _ in 0..50 {
            let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-0.8..0.8)).collect();
            m.rank_one_update(&v).unwrap();
        }
        let oracle = gauss_jordan_inverse(m.sigma());
        assert!(m.sigma_inv().max_abs_diff(&oracle) < 1e-9);
    }

    #[test]
    fn inverse_residual_stays_small_over_many_updates() {
        let mut rng = crate::rng::RngFactory::new(13).stream("drift");
        let d = 4;
        let mut m = DesignMatrix::new(d, 1.0).unwrap();
        for _ in 0..20_000 {
            let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            m.rank_one_update(&v).unwrap();
        }
        assert!(m.inverse_residual() < 1e-8);
        assert!(m.sigma().min_eigenvalue() >= m.lambda() - 1e-9);
    }

    #[test]
    fn mahalanobis_diagonal_case() {
        let mut m = DesignMatrix::new(3, 1.0).unwrap();
        for i in 0..3 {
            m.rank_one_update(&axis(3, i)).unwrap();
        }
        // sigma = 2 I
        assert!((m.mahalanobis_sq(&axis(3, 1)).unwrap() - 0.5).abs() < 1e-14);
        assert_eq!(m.mahalanobis_sq(&[0.0, 0.0, 0.0]).unwrap(), 0.0);
    }

    #[test]
    fn mahalanobis_matches_linear_solve() {
        let mut rng = crate::rng::RngFactory::new(17).stream("maha");
        let d = 6;
        let mut m = DesignMatrix::new(d, 0.3).unwrap();
        for _ in 0..40 {
            let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-0.5..0.5)).collect();
            m.rank_one_update(&v).unwrap();
        }
        for _ in 0..20 {
            let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let u = m.sigma().solve_spd(&v).unwrap();
            let oracle = dot(&v, &u);
            let got = m.mahalanobis_sq(&v).unwrap();
            assert!((got - oracle).abs() < 1e-10, "got {got}, oracle {oracle}");
            let neg: Vec<f64> = v.iter().map(|x| -x).collect();
            assert!((m.mahalanobis_sq(&neg).unwrap() - got).abs() < 1e-12);
        }
    }

    #[test]
    fn pls_single_point_closed_form() {
        let data = vec![(vec![1.0, 0.0], 1.0)];
        let theta = projected_least_squares(&data, 2, 1.0, BallConstraint::new(10.0));
        assert!((theta[0] - 0.5).abs() < 1e-14);
        assert_eq!(theta[1], 0.0);
    }

    #[test]
    fn pls_empty_data_returns_zero() {
        let theta = projected_least_squares(&[], 3, 0.5, BallConstraint::new(1.0));
        assert_eq!(theta, vec![0.0; 3]);
    }

    #[test]
    fn pls_matches_normal_equations_oracle() {
        let mut rng = crate::rng::RngFactory::new(23).stream("pls");
        let d = 3;
        let lambda = 0.25;
        let data: Vec<(Vec<f64>, f64)> = (0..20)
            .map(|_| {
                let x: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let y = rng.gen_range(-2.0..2.0);
                (x, y)
            })
            .collect();
        // Oracle: build the normal equations and invert with Gauss-Jordan.
        let mut g = Matrix::scaled_identity(d, lambda);
        let mut b = vec![0.0; d];
        for (x, y) in &data {
            g.add_outer(x, 1.0);
            for i in 0..d {
                b[i] += x[i] * y;
            }
        }
        let ginv = gauss_jordan_inverse(&g);
        let oracle = ginv.matvec(&b);
        let got = projected_least_squares(&data, d, lambda, BallConstraint::new(5.0));
        for i in 0..d {
            assert!((got[i] - oracle[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn pls_minimum_norm_on_singular_gram() {
        // Two identical rows, lambda = 0: Gram is rank one.
        let data = vec![(vec![1.0, 1.0], 2.0), (vec![1.0, 1.0], 2.0)];
        let theta = projected_least_squares(&data, 2, 0.0, BallConstraint::new(10.0));
        // Minimum-norm solution of <theta, (1,1)> = 2 is (1, 1).
        assert!((theta[0] - 1.0).abs() < 1e-10);
        assert!((theta[1] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn elliptic_potential_bound() {
        // sum_t min(|v_t|^2_{V_t^{-1}}, 1) <= 2 d log(1 + T / (lambda d)),
        // checked on random unit-ball sequences.
        let mut rng = crate::rng::RngFactory::new(29).stream("elliptic");
        for &d in &[2usize, 5, 10] {
            for trial in 0..4 {
                let lambda = [0.1, 0.5, 1.0, 2.0][trial % 4];
                let t_max = 1000;
                let mut v_t = DesignMatrix::new(d, lambda).unwrap();
                let mut lhs = 0.0;
                for _ in 0..t_max {
                    let v = crate::rng::sample_unit_ball(&mut rng, d);
                    lhs += v_t.mahalanobis_sq(&v).unwrap().min(1.0);
                    v_t.rank_one_update(&v).unwrap();
                }
                let rhs = 2.0 * d as f64 * (1.0 + t_max as f64 / (lambda * d as f64)).ln();
                assert!(lhs <= rhs, "d={d} lambda={lambda}: {lhs} > {rhs}");
            }
        }
    }

    proptest::proptest! {
        #[test]
        fn projection_never_exceeds_radius(
            vals in proptest::collection::vec(-100.0f64..100.0, 1..8),
            radius in 0.1f64..5.0,
        ) {
            let ball = BallConstraint::new(radius);
            let p = ball.project(vals);
            proptest::prop_assert!(norm2(&p) <= radius + 1e-12);
        }

        #[test]
        fn pls_objective_no_worse_than_zero(
            n in 1usize..12,
            lambda in 0.0f64..2.0,
            seed in 0u64..1000,
        ) {
            let mut rng = crate::rng::RngFactory::new(seed).stream("prop");
            let d = 3;
            let data: Vec<(Vec<f64>, f64)> = (0..n)
                .map(|_| {
                    let x: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
                    (x, rng.gen_range(-1.0..1.0))
                })
                .collect();
            let ball = BallConstraint::new(2.0);
            let theta = projected_least_squares(&data, d, lambda, ball);
            proptest::prop_assert!(norm2(&theta) <= ball.radius + 1e-12);
            let at_theta = ridge_objective(&data, lambda, &theta);
            let at_zero = ridge_objective(&data, lambda, &vec![0.0; d]);
            proptest::prop_assert!(at_theta <= at_zero + 1e-9);
        }
    }
}
