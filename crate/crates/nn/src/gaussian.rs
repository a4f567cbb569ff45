//! Diagonal Gaussian action distributions with a state-independent log-std.

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::tape::{Tape, Var};
use crate::Scalar;

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;

/// `0.5 · ln(2π)`
pub const HALF_LOG_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianHead<T> {
    pub mean: Vec<T>,
    pub log_std: Vec<T>,
}

impl<T: Scalar> GaussianHead<T> {
    /// Builds a head, clamping `log_std` into `[LOG_STD_MIN, LOG_STD_MAX]`.
    pub fn new(mean: Vec<T>, log_std: Vec<T>) -> Self {
        assert_eq!(mean.len(), log_std.len(), "mean/log_std length mismatch");
        let log_std = log_std.into_iter().map(clamp_log_std).collect();
        Self { mean, log_std }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn std(&self) -> Vec<T> {
        self.log_std.iter().map(|l| l.exp()).collect()
    }

    pub fn log_prob(&self, action: &[T]) -> T {
        assert_eq!(action.len(), self.dim());
        let half = T::c(0.5);
        let c = T::c(HALF_LOG_2PI);
        self.mean
            .iter()
            .zip(&self.log_std)
            .zip(action)
            .fold(T::zero(), |acc, ((&mu, &ls), &a)| {
                let z = (a - mu) / ls.exp();
                acc - half * z * z - ls - c
            })
    }

    pub fn entropy(&self) -> T {
        let per_dim = T::c(0.5 + HALF_LOG_2PI);
        self.log_std.iter().fold(T::zero(), |acc, &ls| acc + ls + per_dim)
    }

    /// `μ + σ ⊙ ξ` with ξ standard normal; the mode when `deterministic`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, deterministic: bool) -> Vec<T> {
        if deterministic {
            return self.mean.clone();
        }
        self.mean
            .iter()
            .zip(&self.log_std)
            .map(|(&mu, &ls)| {
                let xi: f64 = rng.sample(StandardNormal);
                mu + ls.exp() * T::c(xi)
            })
            .collect()
    }
}

pub fn clamp_log_std<T: Scalar>(v: T) -> T {
    v.max(T::c(LOG_STD_MIN)).min(T::c(LOG_STD_MAX))
}

/// Per-row log-density of `actions` under `N(mean, exp(log_std)²)` on the tape.
///
/// `mean` and `actions` are `[B × d]`, `log_std` is `[1 × d]`; the result is `[B × 1]`.
pub fn log_prob_on_tape<T: Scalar>(tape: &mut Tape<T>, mean: Var, log_std: Var, actions: Var) -> Var {
    let rows = tape.shape(mean).0;
    let ls = tape.broadcast_rows(log_std, rows);
    let neg_ls = tape.neg(ls);
    let inv_std = tape.exp(neg_ls);
    let diff = tape.sub(actions, mean);
    let z = tape.mul(diff, inv_std);
    let z2 = tape.square(z);
    let half_z2 = tape.scale(z2, T::c(-0.5));
    let per_dim = tape.sub(half_z2, ls);
    let per_dim = tape.offset(per_dim, T::c(-HALF_LOG_2PI));
    tape.sum_cols(per_dim)
}

/// Entropy of the diagonal Gaussian, `[1 × 1]`.
pub fn entropy_on_tape<T: Scalar>(tape: &mut Tape<T>, log_std: Var) -> Var {
    let d = tape.shape(log_std).1;
    let s = tape.sum_cols(log_std);
    tape.offset(s, T::c((0.5 + HALF_LOG_2PI) * d as f64))
}

/// Clamps every entry of a `[1 × d]` log-std parameter in place.
pub fn clamp_log_std_param<T: Scalar>(p: &mut Array2<T>) {
    p.mapv_inplace(clamp_log_std);
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn standard_normal_at_mean() {
        let h = GaussianHead::new(vec![0.0_f64], vec![0.0]);
        assert_abs_diff_eq!(h.log_prob(&[0.0]), -0.918_938_533_204_672_7, epsilon = 1e-12);
        let h2 = GaussianHead::new(vec![0.0_f64, 0.0], vec![0.0, 0.0]);
        assert_abs_diff_eq!(h2.log_prob(&[0.0, 0.0]), -1.837_877_066_409_345_5, epsilon = 1e-12);
    }

    #[test]
    fn shifted_narrow_gaussian() {
        let h = GaussianHead::new(vec![1.0_f64], vec![0.5_f64.ln()]);
        // -0.5·1² - ln 0.5 - 0.5 ln 2π
        let want = -0.5 + 2f64.ln() - HALF_LOG_2PI;
        assert_abs_diff_eq!(h.log_prob(&[1.5]), want, epsilon = 1e-12);
        assert_abs_diff_eq!(want, -0.725_791_352_644_727_3, epsilon = 1e-12);
    }

    #[test]
    fn clamp_floor_makes_sampling_nearly_deterministic() {
        let h = GaussianHead::new(vec![0.4_f64, -0.2], vec![-50.0, -50.0]);
        assert_eq!(h.log_std, vec![LOG_STD_MIN, LOG_STD_MIN]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = h.sample(&mut rng, false);
        assert!((a[0] - 0.4).abs() < 1e-2 && (a[1] + 0.2).abs() < 1e-2);
    }

    #[test]
    fn deterministic_sample_is_mean() {
        let h = GaussianHead::new(vec![1.0_f32, 2.0], vec![0.3, 0.3]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(h.sample(&mut rng, true), vec![1.0, 2.0]);
    }

    #[test]
    fn reseeded_rng_repeats_sample() {
        let h = GaussianHead::new(vec![0.1_f64, -0.3], vec![-0.5, 0.2]);
        let a = h.sample(&mut ChaCha8Rng::seed_from_u64(42), false);
        let b = h.sample(&mut ChaCha8Rng::seed_from_u64(42), false);
        assert_eq!(a, b);
    }

    #[test]
    fn density_integrates_to_one() {
        // Monte-Carlo over a ±6σ box, d = 1.
        let h = GaussianHead::new(vec![0.7_f64], vec![0.4_f64.ln()]);
        let sigma = 0.4;
        let (lo, hi) = (0.7 - 6.0 * sigma, 0.7 + 6.0 * sigma);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 100_000;
        let sum: f64 = (0..n).map(|_| h.log_prob(&[rng.gen_range(lo..hi)]).exp()).sum();
        let integral = sum / n as f64 * (hi - lo);
        assert!((integral - 1.0).abs() < 0.05, "integral {integral}");
    }

    #[test]
    fn tape_log_prob_matches_scalar_formula() {
        let mut tape = Tape::<f64>::new();
        let mean = tape.constant(ndarray::array![[0.1, -0.4], [1.0, 0.0]]);
        let ls = tape.constant(ndarray::array![[-0.3, 0.2]]);
        let acts = tape.constant(ndarray::array![[0.5, 0.5], [-1.0, 0.25]]);
        let lp = log_prob_on_tape(&mut tape, mean, ls, acts);
        let h0 = GaussianHead::new(vec![0.1, -0.4], vec![-0.3, 0.2]);
        let h1 = GaussianHead::new(vec![1.0, 0.0], vec![-0.3, 0.2]);
        assert_abs_diff_eq!(tape.value(lp)[[0, 0]], h0.log_prob(&[0.5, 0.5]), epsilon = 1e-12);
        assert_abs_diff_eq!(tape.value(lp)[[1, 0]], h1.log_prob(&[-1.0, 0.25]), epsilon = 1e-12);
        let e = entropy_on_tape(&mut tape, ls);
        assert_abs_diff_eq!(tape.scalar(e), h0.entropy(), epsilon = 1e-12);
    }
}
