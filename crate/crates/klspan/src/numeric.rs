//! Small numeric helpers shared across the crate: compensated summation
//! and log-sum-exp, used everywhere expectations or normalizers are
//! computed so that identities hold to ~1e-12 even at small beta.

/// Kahan–Babuska compensated sum.
#[derive(Debug, Clone, Copy, Default)]
pub struct KahanSum {
    sum: f64,
    comp: f64,
}

impl KahanSum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Compensated sum of an iterator of terms.
pub fn kahan_sum<I: IntoIterator<Item = f64>>(xs: I) -> f64 {
    let mut acc = KahanSum::new();
    for x in xs {
        acc.add(x);
    }
    acc.value()
}

/// log(sum_i exp(a_i)) with max-shift; returns -inf on an empty slice.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    let s = kahan_sum(xs.iter().map(|&x| (x - m).exp()));
    m + s.ln()
}

/// log(sum_i w_i exp(a_i)) for nonnegative weights; terms with w_i = 0
/// are skipped so that zero-probability entries never contribute
/// (even when a_i is infinite).
pub fn log_weighted_sum_exp(weights: &[f64], xs: &[f64]) -> f64 {
    debug_assert_eq!(weights.len(), xs.len());
    let m = weights
        .iter()
        .zip(xs)
        .filter(|(&w, _)| w > 0.0)
        .map(|(_, &x)| x)
        .fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    let s = kahan_sum(
        weights
            .iter()
            .zip(xs)
            .filter(|(&w, _)| w > 0.0)
            .map(|(&w, &x)| w * (x - m).exp()),
    );
    m + s.ln()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    kahan_sum(a.iter().zip(b).map(|(&x, &y)| x * y))
}

pub fn norm2(v: &[f64]) -> f64 {
    dot(v, v).max(0.0).sqrt()
}
