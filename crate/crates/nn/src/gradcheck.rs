//! Central finite-difference verification of analytic gradients.

use ndarray::Array2;
use rand::seq::index::sample;
use rand::Rng;

use crate::Scalar;

/// Smallest magnitude used in the relative-error denominator, so coordinates
/// whose true gradient is ~0 are judged by absolute error instead.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub coords_checked: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

/// Compares the gradient returned by `loss_and_grad` at `params` to central
/// differences with step `eps` on up to `coords` randomly chosen coordinates
/// (every coordinate when there are fewer).
pub fn finite_diff_check<T, F, R>(
    params: &[Array2<T>],
    mut loss_and_grad: F,
    eps: f64,
    coords: usize,
    rng: &mut R,
) -> FdReport
where
    T: Scalar,
    F: FnMut(&[Array2<T>]) -> (T, Vec<Array2<T>>),
    R: Rng + ?Sized,
{
    let (_, analytic) = loss_and_grad(params);
    assert_eq!(analytic.len(), params.len(), "one gradient per parameter tensor");

    let offsets: Vec<usize> = params
        .iter()
        .scan(0, |acc, p| {
            let start = *acc;
            *acc += p.len();
            Some(start)
        })
        .collect();
    let total: usize = params.iter().map(|p| p.len()).sum();
    let picks: Vec<usize> = if total <= coords {
        (0..total).collect()
    } else {
        let mut v = sample(rng, total, coords).into_vec();
        v.sort_unstable();
        v
    };

    let mut work: Vec<Array2<T>> = params.to_vec();
    let mut report = FdReport {
        max_rel_err: 0.0,
        coords_checked: picks.len(),
        worst_analytic: 0.0,
        worst_numeric: 0.0,
    };
    for flat in picks {
        let tensor = offsets.partition_point(|&o| o <= flat) - 1;
        let local = flat - offsets[tensor];
        let cols = work[tensor].ncols();
        let idx = [local / cols, local % cols];
        let orig = work[tensor][idx];

        work[tensor][idx] = orig + T::c(eps);
        let plus = loss_and_grad(&work).0.f64();
        work[tensor][idx] = orig - T::c(eps);
        let minus = loss_and_grad(&work).0.f64();
        work[tensor][idx] = orig;

        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic[tensor][idx].f64();
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
        if rel > report.max_rel_err || rel.is_nan() {
            report.max_rel_err = rel;
            report.worst_analytic = a;
            report.worst_numeric = numeric;
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;
    use crate::{Activation, Mlp, MlpSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quadratic_loss_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = vec![Array2::from_shape_fn((8, 10), |(r, c)| (r as f64 - c as f64) * 0.05)];
        let report = finite_diff_check(
            &params,
            |p| {
                let mut tape = Tape::new();
                let w = tape.param(p[0].clone());
                let sq = tape.square(w);
                let rows = tape.sum_cols(sq);
                let m = tape.mean(rows);
                let loss = tape.scale(m, 8.0);
                let g = tape.backward(loss).unwrap();
                (tape.scalar(loss), vec![g.get(w)])
            },
            1e-5,
            64,
            &mut rng,
        );
        assert_eq!(report.coords_checked, 64);
        assert!(report.max_rel_err < 1e-8, "{report:?}");
    }

    #[test]
    fn constant_loss_has_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = vec![Array2::<f64>::ones((3, 3))];
        let report = finite_diff_check(&params, |_| (4.2, vec![Array2::zeros((3, 3))]), 1e-5, 64, &mut rng);
        assert_eq!(report.coords_checked, 9);
        assert_eq!(report.max_rel_err, 0.0);
        assert_eq!(report.worst_numeric, 0.0);
    }

    #[test]
    fn two_layer_network_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let spec = MlpSpec::new(6, &[16], 3, Activation::Identity);
        let net = Mlp::<f64>::orthogonal(spec, 2f64.sqrt(), 1.0, &mut rng).unwrap();
        let x = Array2::from_shape_fn((5, 6), |(r, c)| ((r * 7 + c * 3) % 11) as f64 / 11.0 - 0.5);
        let spec = net.spec().clone();
        let report = finite_diff_check(
            net.tensors(),
            |p| {
                let net = Mlp::from_tensors(spec.clone(), p.to_vec()).unwrap();
                let mut tape = Tape::new();
                let bound = net.bind(&mut tape);
                let input = tape.constant(x.clone());
                let out = bound.forward(&mut tape, input);
                let t = tape.tanh(out);
                let sq = tape.square(t);
                let loss = tape.mean(sq);
                let g = tape.backward(loss).unwrap();
                (tape.scalar(loss), g.collect(&bound.vars))
            },
            1e-5,
            64,
            &mut rng,
        );
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }
}
