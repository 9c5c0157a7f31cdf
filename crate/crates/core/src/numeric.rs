//! Small numeric utilities: compensated and pairwise summation, stable
//! logistic primitives, basic statistics.

/// Pairwise (tree) summation of `f(x)` over a slice. Bounds roundoff growth
/// to O(log n) versus O(n) for a running sum, which keeps oracle tolerances
/// meaningful on long gradient vectors.
pub fn pairwise_sum_by(xs: &[f64], f: impl Fn(f64) -> f64 + Copy) -> f64 {
    const BASE: usize = 64;
    if xs.len() <= BASE {
        let mut acc = 0.0;
        for &x in xs {
            acc += f(x);
        }
        return acc;
    }
    let mid = xs.len() / 2;
    pairwise_sum_by(&xs[..mid], f) + pairwise_sum_by(&xs[mid..], f)
}

pub fn pairwise_sum(xs: &[f64]) -> f64 {
    pairwise_sum_by(xs, |x| x)
}

/// Pairwise dot product of two equal-length slices.
pub fn pairwise_dot(a: &[f64], b: &[f64]) -> f64 {
    const BASE: usize = 64;
    debug_assert_eq!(a.len(), b.len());
    if a.len() <= BASE {
        let mut acc = 0.0;
        for (x, y) in a.iter().zip(b) {
            acc += x * y;
        }
        return acc;
    }
    let mid = a.len() / 2;
    pairwise_dot(&a[..mid], &b[..mid]) + pairwise_dot(&a[mid..], &b[mid..])
}

/// Kahan compensated accumulator.
#[derive(Debug, Clone, Copy, Default)]
pub struct KahanSum {
    sum: f64,
    comp: f64,
}

impl KahanSum {
    pub fn new() -> Self {
        KahanSum::default()
    }

    pub fn add(&mut self, x: f64) {
        let y = x - self.comp;
        let t = self.sum + y;
        self.comp = (t - self.sum) - y;
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum
    }
}

/// log(1 + exp(x)) with the usual branch at zero.
pub fn log1p_exp(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Logistic sigmoid, stable for large |x|.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mean of a slice (empty slices yield 0).
pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    pairwise_sum(xs) / xs.len() as f64
}

/// Sample standard deviation (n-1 denominator; 0 for fewer than 2 values).
pub fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    let ss = pairwise_sum_by(xs, |x| (x - m) * (x - m));
    (ss / (xs.len() - 1) as f64).sqrt()
}

/// Standard error of the mean.
pub fn sem(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    sample_std(xs) / (xs.len() as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairwise_matches_naive_on_small() {
        let xs: Vec<f64> = (1..=1000).map(|i| i as f64).collect();
        assert_eq!(pairwise_sum(&xs), 500500.0);
    }

    #[test]
    fn kahan_handles_magnitude_spread() {
        let mut k = KahanSum::new();
        k.add(1e16);
        for _ in 0..10 {
            k.add(1.0);
        }
        k.add(-1e16);
        assert_eq!(k.value(), 10.0);
    }

    #[test]
    fn log1p_exp_branches_agree_near_zero() {
        for &x in &[-1e-8f64, 0.0, 1e-8, 0.5, -0.5] {
            let direct = (1.0 + x.exp()).ln();
            assert!((log1p_exp(x) - direct).abs() < 1e-14);
        }
        // far negative stays finite and tiny
        assert!(log1p_exp(-800.0) >= 0.0);
        // far positive avoids overflow
        assert!((log1p_exp(800.0) - 800.0).abs() < 1e-9);
    }

    #[test]
    fn sigmoid_symmetry() {
        for &x in &[-5.0, -1.0, 0.0, 2.5, 30.0] {
            assert!((sigmoid(x) + sigmoid(-x) - 1.0).abs() < 1e-15);
        }
    }
}
