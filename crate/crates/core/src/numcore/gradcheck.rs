use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Outcome of comparing analytic gradients with central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Coordinate with the largest relative error.
    pub worst_coord: Option<usize>,
    pub coords_checked: usize,
}

/// Picks `count` distinct coordinates out of `n` (all of them when `n <= count`),
/// in increasing order.
pub fn sample_coords(n: usize, count: usize, seed: u64) -> Vec<usize> {
    if n <= count {
        return (0..n).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = index::sample(&mut rng, n, count).into_vec();
    picked.sort_unstable();
    picked
}

/// Central-difference check of `analytic` (the gradient of `f` at `params`)
/// on the given coordinates.
///
/// Relative error per coordinate is `|fd - g| / max(|g|, 1e-8)`.
pub fn finite_diff_check<F>(mut f: F, params: &[f64], analytic: &[f64], h: f64, coords: &[usize]) -> GradCheckReport
where
    F: FnMut(&[f64]) -> f64,
{
    assert!(h > 0.0, "step must be positive");
    assert_eq!(params.len(), analytic.len());
    let mut theta = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_coord: None,
        coords_checked: 0,
    };
    for &c in coords {
        let orig = theta[c];
        theta[c] = orig + h;
        let plus = f(&theta);
        theta[c] = orig - h;
        let minus = f(&theta);
        theta[c] = orig;
        let fd = (plus - minus) / (2.0 * h);
        let g = analytic[c];
        let rel = (fd - g).abs() / g.abs().max(1e-8);
        if rel > report.max_rel_error || rel.is_nan() {
            report.max_rel_error = rel;
            report.worst_coord = Some(c);
        }
        report.coords_checked += 1;
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_quadratic_is_exact() {
        // f = x0^2 + 3 x1^2 - x0 x2
        let f = |x: &[f64]| x[0] * x[0] + 3.0 * x[1] * x[1] - x[0] * x[2];
        let x = [1.0, -2.0, 0.5];
        let g = [2.0 * x[0] - x[2], 6.0 * x[1], -x[0]];
        let r = finite_diff_check(f, &x, &g, 1e-5, &[0, 1, 2]);
        assert!(r.max_rel_error < 1e-9, "{r:?}");
    }

    #[test]
    fn quadratic_matches_to_rounding() {
        // f = sum_i (i+1) x_i^2 ; grad = 2 (i+1) x_i
        let f = |x: &[f64]| x.iter().enumerate().map(|(i, v)| (i as f64 + 1.0) * v * v).sum::<f64>();
        let x: Vec<f64> = (0..50).map(|i| (i as f64 * 0.37).sin()).collect();
        let g: Vec<f64> = x.iter().enumerate().map(|(i, v)| 2.0 * (i as f64 + 1.0) * v).collect();
        let coords = sample_coords(x.len(), 200, 0);
        let r = finite_diff_check(f, &x, &g, 1e-5, &coords);
        assert_eq!(r.coords_checked, 50);
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn zero_function_has_zero_error() {
        let x = vec![1.0; 10];
        let g = vec![0.0; 10];
        let r = finite_diff_check(|_| 0.0, &x, &g, 1e-5, &sample_coords(10, 200, 0));
        assert_eq!(r.max_rel_error, 0.0);
    }

    #[test]
    fn wrong_gradient_is_reported() {
        let f = |x: &[f64]| x[0] * x[0];
        let r = finite_diff_check(f, &[3.0], &[5.0], 1e-5, &[0]);
        assert!((r.max_rel_error - 0.2).abs() < 1e-6);
        assert_eq!(r.worst_coord, Some(0));
    }

    #[test]
    fn coordinate_sampling() {
        let s = sample_coords(1000, 200, 7);
        assert_eq!(s.len(), 200);
        assert!(s.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(s, sample_coords(1000, 200, 7));
    }
}
