//! Finite-difference validation of analytic gradients.

use crate::error::{Error, Result};

/// Compares an analytic gradient against central differences at `point`.
///
/// Step per coordinate is h = 1e-4 * max(1, |x_i|); the returned value is the
/// maximum over coordinates of |g_a - g_n| / max(1e-8, |g_a| + |g_n|).
pub fn check_gradient<F, G>(f: F, analytic_grad: G, point: &[f64]) -> Result<f64>
where
    F: Fn(&[f64]) -> f64,
    G: Fn(&[f64]) -> Vec<f64>,
{
    let ga = analytic_grad(point);
    if ga.len() != point.len() {
        return Err(Error::Shape(format!(
            "gradient has {} entries for {} coordinates",
            ga.len(),
            point.len()
        )));
    }
    let mut max_err = 0.0f64;
    let mut probe = point.to_vec();
    for i in 0..point.len() {
        let h = 1e-4 * point[i].abs().max(1.0);
        probe[i] = point[i] + h;
        let f_plus = f(&probe);
        probe[i] = point[i] - h;
        let f_minus = f(&probe);
        probe[i] = point[i];
        if !f_plus.is_finite() || !f_minus.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite objective at probe for coordinate {i}"
            )));
        }
        let gn = (f_plus - f_minus) / (2.0 * h);
        let err = (ga[i] - gn).abs() / (ga[i].abs() + gn.abs()).max(1e-8);
        max_err = max_err.max(err);
    }
    Ok(max_err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::ops::{cross_entropy, log_softmax};

    #[test]
    fn quadratic_is_exact() {
        let f = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>();
        let g = |x: &[f64]| x.iter().map(|v| 2.0 * v).collect();
        let err = check_gradient(f, g, &[1.0, 2.0]).unwrap();
        assert!(err < 1e-8, "err {err}");
    }

    #[test]
    fn ce_of_log_softmax_linear_map() {
        // params = 2x2 weight matrix, fixed input (0.7, -0.3), label 1.
        let input = [0.7, -0.3];
        let label = 1usize;
        let f = |w: &[f64]| {
            let logits = vec![
                w[0] * input[0] + w[1] * input[1],
                w[2] * input[0] + w[3] * input[1],
            ];
            cross_entropy(&[log_softmax(&logits)], &[label]).unwrap()
        };
        let g = |w: &[f64]| {
            let logits = vec![
                w[0] * input[0] + w[1] * input[1],
                w[2] * input[0] + w[3] * input[1],
            ];
            let p: Vec<f64> = log_softmax(&logits).iter().map(|l| l.exp()).collect();
            let mut d = vec![p[0], p[0], p[1], p[1]];
            d[2] -= 1.0;
            d[3] -= 1.0;
            vec![d[0] * input[0], d[1] * input[1], d[2] * input[0], d[3] * input[1]]
        };
        let err = check_gradient(f, g, &[0.2, -0.4, 0.1, 0.3]).unwrap();
        assert!(err < 1e-4, "err {err}");
    }

    #[test]
    fn wrong_gradient_is_flagged() {
        let f = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>();
        let g = |x: &[f64]| x.iter().map(|v| 4.0 * v).collect(); // scaled x2
        let err = check_gradient(f, g, &[1.0, -0.5]).unwrap();
        assert!((err - 1.0 / 3.0).abs() < 1e-3, "err {err}");
    }
}
