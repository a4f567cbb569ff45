use ndarray::{Array2, Zip};

use crate::{NnError, Scalar};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adaptive-moment optimizer state for one parameter group.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub first: Vec<Array2<T>>,
    pub second: Vec<Array2<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &[Array2<T>], config: AdamConfig) -> Self {
        let zeros: Vec<_> = params.iter().map(|p| Array2::zeros(p.dim())).collect();
        Self {
            config,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    /// Applies one bias-corrected update. A non-finite gradient aborts the
    /// update before any parameter or moment is touched.
    pub fn step(&mut self, params: &mut [Array2<T>], grads: &[Array2<T>], lr: f64) -> Result<(), NnError> {
        let mut refs: Vec<&mut Array2<T>> = params.iter_mut().collect();
        self.step_refs(&mut refs, grads, lr)
    }

    /// [`Adam::step`] over tensors that live in different owners.
    pub fn step_refs(&mut self, params: &mut [&mut Array2<T>], grads: &[Array2<T>], lr: f64) -> Result<(), NnError> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(NnError::Config(format!(
                "optimizer tracks {} tensors, got {} params / {} grads",
                self.first.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.dim() != g.dim() || p.dim() != self.first[i].dim() {
                return Err(NnError::Config(format!("tensor {i}: shape mismatch")));
            }
            if let Some(pos) = g.iter().position(|v| !v.is_finite()) {
                let value = g.iter().nth(pos).map_or(f64::NAN, |v| v.f64());
                return Err(NnError::NonFinite {
                    tensor: i,
                    index: pos,
                    value,
                });
            }
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let (b1, b2) = (T::c(beta1), T::c(beta2));
        let (one_b1, one_b2) = (T::c(1.0 - beta1), T::c(1.0 - beta2));
        let step_size = T::c(lr / bc1);
        let inv_sqrt_bc2 = T::c(1.0 / bc2.sqrt());
        let eps = T::c(eps);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
        {
            Zip::from(&mut **p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                let denom = v.sqrt() * inv_sqrt_bc2 + eps;
                *p -= step_size * *m / denom;
            });
        }
        Ok(())
    }
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut [Array2<T>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|v| {
            let v = v.f64();
            v * v
        })
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let k = T::c(max_norm / (norm + 1e-6));
        grads.iter_mut().for_each(|g| g.mapv_inplace(|v| v * k));
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn zero_gradient_leaves_params_and_decays_moments() {
        let mut p = vec![array![[1.0_f64, -2.0]]];
        let mut opt = Adam::new(&p, AdamConfig::default());
        opt.step(&mut p, &[array![[0.0, 0.0]]], 1e-3).unwrap();
        assert_eq!(p[0], array![[1.0, -2.0]]);

        opt.first[0] = array![[0.4, 0.0]];
        opt.second[0] = array![[1.0, 0.0]];
        opt.step(&mut p, &[array![[0.0, 0.0]]], 0.0).unwrap();
        assert_eq!(p[0], array![[1.0, -2.0]]);
        assert_abs_diff_eq!(opt.first[0][[0, 0]], 0.36, epsilon = 1e-15);
        assert_abs_diff_eq!(opt.second[0][[0, 0]], 0.999, epsilon = 1e-15);
        assert_eq!(opt.step, 2);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let lr = 1e-2;
        let mut p = vec![array![[0.0_f64, 0.0, 0.0]]];
        let mut opt = Adam::new(&p, AdamConfig::default());
        opt.step(&mut p, &[array![[3.0, -0.02, 250.0]]], lr).unwrap();
        for (got, sign) in p[0].iter().zip([1.0, -1.0, 1.0]) {
            assert_abs_diff_eq!(*got, -lr * sign, epsilon = 1e-7);
        }
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn two_steps_match_scalar_hand_computation() {
        let (lr, g) = (0.1_f64, 0.5_f64);
        let (b1, b2, eps) = (0.9_f64, 0.999_f64, 1e-8_f64);
        let mut theta = 1.0;
        let (mut m, mut v) = (0.0, 0.0);
        for t in 1..=2 {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            theta -= lr * mh / (vh.sqrt() + eps);
        }
        let mut p = vec![array![[1.0_f64]]];
        let mut opt = Adam::new(&p, AdamConfig::default());
        for _ in 0..2 {
            opt.step(&mut p, &[array![[g]]], lr).unwrap();
        }
        assert_abs_diff_eq!(p[0][[0, 0]], theta, epsilon = 1e-12);
        // Identical gradients: each step is lr·g/(|g|+ε'), just under lr.
        assert!((1.0 - p[0][[0, 0]]) < 2.0 * lr);
        assert!((1.0 - p[0][[0, 0]]) > 2.0 * lr * (1.0 - 1e-6));
    }

    #[test]
    fn nan_gradient_aborts_without_touching_state() {
        let mut p = vec![array![[1.0_f64, 2.0]]];
        let mut opt = Adam::new(&p, AdamConfig::default());
        let err = opt.step(&mut p, &[array![[0.1, f64::NAN]]], 1e-3).unwrap_err();
        assert!(matches!(
            err,
            NnError::NonFinite {
                tensor: 0,
                index: 1,
                ..
            }
        ));
        assert_eq!(p[0], array![[1.0, 2.0]]);
        assert_eq!(opt.step, 0);
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut g = vec![array![[3.0_f64]], array![[4.0]]];
        let n = clip_grad_norm(&mut g, 0.5);
        assert_abs_diff_eq!(n, 5.0);
        let after = (g[0][[0, 0]].powi(2) + g[1][[0, 0]].powi(2)).sqrt();
        assert!(after <= 0.5);
        let mut small = vec![array![[0.1_f64]]];
        clip_grad_norm(&mut small, 0.5);
        assert_eq!(small[0][[0, 0]], 0.1);
    }
}
