//! Central-difference gradient checks.

use rand::seq::index::sample;

use crate::{Error, Result};

/// Coordinates probed when the parameter vector is larger than this.
pub const MIN_PROBES: usize = 200;

/// Denominator floor. Central differences of an O(1) loss carry roundoff
/// near 1e-11, so exact-zero gradients would otherwise read as large
/// relative errors. Below the floor the check is absolute.
pub const REL_FLOOR: f64 = 1e-4;

/// Compares `analytic` against central differences of `loss_fn` at `params`.
///
/// Returns `max |a - n| / max(|a|, |n|, REL_FLOOR)` over every
/// coordinate, or over a random subsample of `max_coords` (at least
/// [`MIN_PROBES`]) when `max_coords` is given and smaller than the vector.
pub fn finite_difference_check(
    mut loss_fn: impl FnMut(&[f64]) -> f64,
    params: &[f64],
    analytic: &[f64],
    eps: f64,
    max_coords: Option<(usize, &mut crate::Rng)>,
) -> Result<f64> {
    if analytic.len() != params.len() {
        return Err(Error::invalid(format!(
            "gradient has {} entries for {} parameters",
            analytic.len(),
            params.len()
        )));
    }
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::invalid("finite-difference step must be positive"));
    }

    let first = loss_fn(params);
    let second = loss_fn(params);
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }

    let coords: Vec<usize> = match max_coords {
        Some((limit, rng)) if limit.max(MIN_PROBES) < params.len() => {
            let mut picked = sample(rng, params.len(), limit.max(MIN_PROBES)).into_vec();
            picked.sort_unstable();
            picked
        }
        _ => (0..params.len()).collect(),
    };

    let mut probe = params.to_vec();
    let mut worst = 0.0f64;
    for k in coords {
        let orig = probe[k];
        probe[k] = orig + eps;
        let plus = loss_fn(&probe);
        probe[k] = orig - eps;
        let minus = loss_fn(&probe);
        probe[k] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let rel =
            (analytic[k] - numeric).abs() / analytic[k].abs().max(numeric.abs()).max(REL_FLOOR);
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let err = finite_difference_check(|x| x[0] * x[0], &[3.0], &[6.0], 1e-5, None).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let err = finite_difference_check(|_| 4.2, &[1.0, -2.0], &[0.0, 0.0], 1e-5, None).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn wrong_gradient_is_detected() {
        let err = finite_difference_check(|x| x[0] * x[0], &[3.0], &[5.0], 1e-5, None).unwrap();
        assert!(err > 0.1);
    }

    #[test]
    fn nondeterministic_loss_rejected() {
        let mut calls = 0.0;
        let res = finite_difference_check(
            |_| {
                calls += 1.0;
                calls
            },
            &[0.0],
            &[0.0],
            1e-5,
            None,
        );
        assert!(matches!(res, Err(Error::NonDeterministic { .. })));
    }

    #[test]
    fn subsample_probes_at_least_min_coords() {
        let n = 500;
        let params = vec![0.5; n];
        let grad: Vec<f64> = params.iter().map(|x| 2.0 * x).collect();
        let mut rng = crate::seeded_rng(0);
        let mut evals = 0usize;
        finite_difference_check(
            |x| {
                evals += 1;
                x.iter().map(|v| v * v).sum()
            },
            &params,
            &grad,
            1e-5,
            Some((10, &mut rng)),
        )
        .unwrap();
        assert_eq!(evals, 2 + 2 * MIN_PROBES);
    }
}
