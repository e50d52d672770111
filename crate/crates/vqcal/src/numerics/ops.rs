//! Elementary numerical kernels shared across training and evaluation.

use crate::error::{Error, Result};

/// Numerically stable log-softmax with max subtraction.
pub fn log_softmax(v: &[f64]) -> Vec<f64> {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_sum: f64 = v.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
    v.iter().map(|&x| x - max - log_sum).collect()
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    log_softmax(v).iter().map(|&x| x.exp()).collect()
}

/// Mean negative log-likelihood over rows of log-probabilities.
pub fn cross_entropy(log_probs: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if log_probs.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} log-prob rows vs {} labels",
            log_probs.len(),
            labels.len()
        )));
    }
    let mut total = 0.0f64;
    for (row, &y) in log_probs.iter().zip(labels) {
        if y >= row.len() {
            return Err(Error::Data(format!(
                "label {y} out of range for {} classes",
                row.len()
            )));
        }
        total -= row[y];
    }
    Ok(total / log_probs.len().max(1) as f64)
}

/// Overflow-safe softplus ln(1 + e^x).
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// d/dx softplus(x) = sigmoid(x).
pub fn softplus_grad(x: f64) -> f64 {
    if x > 30.0 {
        1.0
    } else if x < -30.0 {
        x.exp()
    } else {
        1.0 / (1.0 + (-x).exp())
    }
}

/// Inverse of softplus; softplus(inv_softplus(y)) == y for y > 0.
pub fn inv_softplus(y: f64) -> f64 {
    (y.exp() - 1.0).ln()
}

/// Clamp a probability row below at 1e-12 and take logs.
pub fn clamped_log(probs: &[f64]) -> Vec<f64> {
    probs.iter().map(|&p| p.max(1e-12).ln()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn log_softmax_uniform() {
        let out = log_softmax(&[0.0, 0.0, 0.0]);
        for &o in &out {
            assert!((o - -(3.0f64.ln())).abs() < 1e-12);
        }
    }

    #[test]
    fn log_softmax_no_overflow() {
        let out = log_softmax(&[1000.0, 0.0]);
        assert!(out[0].abs() < 1e-6);
        assert!((out[1] + 1000.0).abs() < 1e-6);
    }

    #[test]
    fn log_softmax_matches_direct_normalization() {
        // High-precision direct evaluation on a small vector.
        let v = [0.3f64, -1.2, 2.4, 0.0, -0.7];
        let z: f64 = v.iter().map(|&x| x.exp()).sum();
        let direct: Vec<f64> = v.iter().map(|&x| x - z.ln()).collect();
        let out = log_softmax(&v);
        for (a, b) in out.iter().zip(&direct) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn cross_entropy_perfect_and_uniform() {
        let perfect = vec![vec![0.0, -50.0], vec![-50.0, 0.0]];
        assert!(cross_entropy(&perfect, &[0, 1]).unwrap() < 1e-9);
        let uniform = vec![vec![-(4.0f64.ln()); 4]];
        assert!((cross_entropy(&uniform, &[2]).unwrap() - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_three_row_hand_example() {
        let rows = vec![
            log_softmax(&[1.0, 0.0, 0.0]),
            log_softmax(&[0.0, 2.0, 0.0]),
            log_softmax(&[0.0, 0.0, 0.5]),
        ];
        let expected = -(rows[0][0] + rows[1][1] + rows[2][2]) / 3.0;
        assert!((cross_entropy(&rows, &[0, 1, 2]).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        let rows = vec![vec![0.0, -1.0]];
        assert!(cross_entropy(&rows, &[2]).is_err());
    }

    #[test]
    fn softplus_closed_forms() {
        assert!((softplus(0.0) - 2.0f64.ln()).abs() < 1e-12);
        assert!((softplus_grad(0.0) - 0.5).abs() < 1e-12);
        assert_eq!(softplus(100.0), 100.0);
        let x = -3.7f64;
        let direct = (1.0 + x.exp()).ln();
        assert!((softplus(x) - direct).abs() < 1e-7);
    }

    #[test]
    fn inv_softplus_round_trip() {
        for y in [0.1, 0.5, 1.0, 2.0, 5.0] {
            assert!((softplus(inv_softplus(y)) - y).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn log_softmax_normalizes_and_shift_invariant(
            v in proptest::collection::vec(-20.0f64..20.0, 2..8), c in -5.0f64..5.0) {
            let out = log_softmax(&v);
            let sum: f64 = out.iter().map(|&o| o.exp()).sum();
            prop_assert!((sum - 1.0).abs() < 1e-6);
            let shifted: Vec<f64> = v.iter().map(|&x| x + c).collect();
            let out2 = log_softmax(&shifted);
            for (a, b) in out.iter().zip(&out2) {
                prop_assert!((a - b).abs() < 1e-6);
            }
        }

        #[test]
        fn cross_entropy_nonnegative(
            v in proptest::collection::vec(-10.0f64..10.0, 3), y in 0usize..3) {
            let rows = vec![log_softmax(&v)];
            prop_assert!(cross_entropy(&rows, &[y]).unwrap() >= 0.0);
        }
    }
}
