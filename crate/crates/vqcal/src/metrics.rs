//! Global and local calibration metrics: ECE, class-wise ECE, cumulative
//! ECCE, kernel-weighted local errors (LCE, MLCE), an ESS-binned local error
//! curve, NLL and accuracy.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BinningConfig {
    /// Equal-width confidence bins on [0, 1].
    pub n_bins: usize,
}

impl Default for BinningConfig {
    fn default() -> Self {
        BinningConfig { n_bins: 15 }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct KernelConfig {
    /// RBF bandwidth: k(x_i, x_j) = exp(-|x_i - x_j|^2 / (2 gamma^2)).
    pub bandwidth: f64,
}

impl Default for KernelConfig {
    fn default() -> Self {
        KernelConfig { bandwidth: 10.0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub ece: f64,
    pub classwise_ece: f64,
    pub ecce: f64,
    pub lce: f64,
    pub mlce: f64,
    pub nll: f64,
    pub acc: f64,
    /// (ESS quantile midpoint, mean per-anchor l1 residual) pairs.
    pub ess_curve: Vec<(f64, f64)>,
}

fn bin_index(conf: f64, n_bins: usize) -> usize {
    ((conf * n_bins as f64) as usize).min(n_bins - 1)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn kernel_weight(a: &[f64], b: &[f64], gamma: f64) -> f64 {
    let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (-sq / (2.0 * gamma * gamma)).exp()
}

/// Expected calibration error binned on max-confidence.
pub fn ece(probs: &[Vec<f64>], labels: &[usize], bins: &BinningConfig) -> f64 {
    let n = probs.len();
    if n == 0 {
        return 0.0;
    }
    let mut count = vec![0usize; bins.n_bins];
    let mut conf_sum = vec![0.0f64; bins.n_bins];
    let mut acc_sum = vec![0.0f64; bins.n_bins];
    for (row, &y) in probs.iter().zip(labels) {
        let pred = argmax(row);
        let b = bin_index(row[pred], bins.n_bins);
        count[b] += 1;
        conf_sum[b] += row[pred];
        if pred == y {
            acc_sum[b] += 1.0;
        }
    }
    let mut total = 0.0;
    for b in 0..bins.n_bins {
        if count[b] == 0 {
            continue;
        }
        let c = count[b] as f64;
        total += (c / n as f64) * ((acc_sum[b] - conf_sum[b]) / c).abs();
    }
    total
}

fn per_class_bin_residuals(
    probs: &[Vec<f64>],
    labels: &[usize],
    bins: &BinningConfig,
    class: usize,
) -> Vec<f64> {
    // Signed weighted residuals (|B_b|/n)(freq_c - conf_c), one per bin.
    let n = probs.len();
    let mut count = vec![0usize; bins.n_bins];
    let mut conf_sum = vec![0.0f64; bins.n_bins];
    let mut freq_sum = vec![0.0f64; bins.n_bins];
    for (row, &y) in probs.iter().zip(labels) {
        let b = bin_index(row[class], bins.n_bins);
        count[b] += 1;
        conf_sum[b] += row[class];
        if y == class {
            freq_sum[b] += 1.0;
        }
    }
    (0..bins.n_bins)
        .map(|b| {
            if count[b] == 0 {
                0.0
            } else {
                (freq_sum[b] - conf_sum[b]) / n as f64
            }
        })
        .collect()
}

/// Mean over classes of the ECE computed on each class's own probability.
pub fn classwise_ece(probs: &[Vec<f64>], labels: &[usize], bins: &BinningConfig) -> f64 {
    if probs.is_empty() {
        return 0.0;
    }
    let k = probs[0].len();
    let mut total = 0.0;
    for c in 0..k {
        let residuals = per_class_bin_residuals(probs, labels, bins, c);
        total += residuals.iter().map(|r| r.abs()).sum::<f64>();
    }
    total / k as f64
}

/// Cumulative class-wise calibration error: per class, sum over bins of the
/// absolute running total of signed bin residuals, then mean over classes.
pub fn ecce(probs: &[Vec<f64>], labels: &[usize], bins: &BinningConfig) -> f64 {
    if probs.is_empty() {
        return 0.0;
    }
    let k = probs[0].len();
    let mut total = 0.0;
    for c in 0..k {
        let residuals = per_class_bin_residuals(probs, labels, bins, c);
        let mut running = 0.0;
        for r in residuals {
            running += r;
            total += running.abs();
        }
    }
    total / k as f64
}

/// Per-anchor l1 norms of kernel-weighted residuals within max-confidence
/// bins; aligned with input row order. Anchors weight themselves (k = 1).
fn binned_residual_norms(
    probs: &[Vec<f64>],
    labels: &[usize],
    embeddings: &[Vec<f64>],
    bins: &BinningConfig,
    kernel: &KernelConfig,
) -> Vec<f64> {
    let n = probs.len();
    let k = if n == 0 { 0 } else { probs[0].len() };
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); bins.n_bins];
    for (i, row) in probs.iter().enumerate() {
        members[bin_index(row[argmax(row)], bins.n_bins)].push(i);
    }
    let mut norms = vec![0.0f64; n];
    for rows in &members {
        for &i in rows {
            let mut weighted = vec![0.0f64; k];
            let mut weight_sum = 0.0;
            for &j in rows {
                let w = kernel_weight(&embeddings[i], &embeddings[j], kernel.bandwidth);
                weight_sum += w;
                for c in 0..k {
                    let resid = probs[j][c] - if labels[j] == c { 1.0 } else { 0.0 };
                    weighted[c] += w * resid;
                }
            }
            norms[i] = weighted.iter().map(|v| (v / weight_sum).abs()).sum();
        }
    }
    norms
}

/// Local calibration error: mean over anchors of the kernel-weighted l1
/// residual within the anchor's confidence bin, scaled by 1/|Y|.
pub fn lce(
    probs: &[Vec<f64>],
    labels: &[usize],
    embeddings: &[Vec<f64>],
    bins: &BinningConfig,
    kernel: &KernelConfig,
) -> f64 {
    if probs.is_empty() {
        return 0.0;
    }
    let norms = binned_residual_norms(probs, labels, embeddings, bins, kernel);
    let k = probs[0].len() as f64;
    norms.iter().sum::<f64>() / (k * probs.len() as f64)
}

/// Worst-case per-anchor kernel-weighted l1 residual.
pub fn mlce(
    probs: &[Vec<f64>],
    labels: &[usize],
    embeddings: &[Vec<f64>],
    bins: &BinningConfig,
    kernel: &KernelConfig,
) -> f64 {
    binned_residual_norms(probs, labels, embeddings, bins, kernel)
        .into_iter()
        .fold(0.0, f64::max)
}

/// Effective sample size per anchor and the bin-free residual norms used by
/// the ESS curve; kernel sums range over the whole split.
fn ess_and_residuals(
    probs: &[Vec<f64>],
    labels: &[usize],
    embeddings: &[Vec<f64>],
    kernel: &KernelConfig,
) -> (Vec<f64>, Vec<f64>) {
    let n = probs.len();
    let k = if n == 0 { 0 } else { probs[0].len() };
    let mut ess = vec![0.0f64; n];
    let mut norms = vec![0.0f64; n];
    for i in 0..n {
        let mut weight_sum = 0.0;
        let mut weight_sq = 0.0;
        let mut weighted = vec![0.0f64; k];
        for j in 0..n {
            let w = kernel_weight(&embeddings[i], &embeddings[j], kernel.bandwidth);
            weight_sum += w;
            weight_sq += w * w;
            for c in 0..k {
                let resid = probs[j][c] - if labels[j] == c { 1.0 } else { 0.0 };
                weighted[c] += w * resid;
            }
        }
        ess[i] = weight_sum * weight_sum / weight_sq;
        norms[i] = weighted.iter().map(|v| (v / weight_sum).abs()).sum();
    }
    (ess, norms)
}

/// Mean local residual within equal-count ESS quantile bins, low ESS first.
pub fn ess_curve(
    probs: &[Vec<f64>],
    labels: &[usize],
    embeddings: &[Vec<f64>],
    kernel: &KernelConfig,
    n_quantile_bins: usize,
) -> Result<Vec<(f64, f64)>> {
    let n = probs.len();
    if n < n_quantile_bins {
        return Err(Error::Data(format!(
            "{n} samples cannot fill {n_quantile_bins} ESS quantile bins"
        )));
    }
    let (ess, norms) = ess_and_residuals(probs, labels, embeddings, kernel);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| ess[a].partial_cmp(&ess[b]).unwrap().then(a.cmp(&b)));
    let mut curve = Vec::with_capacity(n_quantile_bins);
    let mut start = 0;
    for b in 0..n_quantile_bins {
        let end = (n * (b + 1)) / n_quantile_bins;
        let members = &order[start..end];
        let mean = members.iter().map(|&i| norms[i]).sum::<f64>() / members.len() as f64;
        curve.push(((b as f64 + 0.5) / n_quantile_bins as f64, mean));
        start = end;
    }
    Ok(curve)
}

/// Mean negative log-likelihood with probabilities clamped at 1e-12.
pub fn nll(probs: &[Vec<f64>], labels: &[usize]) -> f64 {
    if probs.is_empty() {
        return 0.0;
    }
    let total: f64 = probs
        .iter()
        .zip(labels)
        .map(|(row, &y)| -row[y].max(1e-12).ln())
        .sum();
    total / probs.len() as f64
}

/// Top-1 accuracy; argmax ties go to the lowest index.
pub fn acc(probs: &[Vec<f64>], labels: &[usize]) -> f64 {
    if probs.is_empty() {
        return 0.0;
    }
    let hits = probs
        .iter()
        .zip(labels)
        .filter(|(row, &y)| argmax(row) == y)
        .count();
    hits as f64 / probs.len() as f64
}

/// Computes the full report on one aligned split.
pub fn compute_report(
    probs: &[Vec<f64>],
    labels: &[usize],
    embeddings: &[Vec<f64>],
    bins: &BinningConfig,
    kernel: &KernelConfig,
    n_ess_bins: usize,
) -> Result<MetricsReport> {
    Ok(MetricsReport {
        ece: ece(probs, labels, bins),
        classwise_ece: classwise_ece(probs, labels, bins),
        ecce: ecce(probs, labels, bins),
        lce: lce(probs, labels, embeddings, bins, kernel),
        mlce: mlce(probs, labels, embeddings, bins, kernel),
        nll: nll(probs, labels),
        acc: acc(probs, labels),
        ess_curve: ess_curve(probs, labels, embeddings, kernel, n_ess_bins)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn one_hot(y: usize, k: usize) -> Vec<f64> {
        (0..k).map(|c| if c == y { 1.0 } else { 0.0 }).collect()
    }

    // Independently coded double-loop oracles. Membership is recomputed by
    // filtering per bin instead of scatter accumulation.

    fn oracle_ece(probs: &[Vec<f64>], labels: &[usize], n_bins: usize) -> f64 {
        let n = probs.len() as f64;
        let mut total = 0.0;
        for b in 0..n_bins {
            let lo = b as f64 / n_bins as f64;
            let hi = (b + 1) as f64 / n_bins as f64;
            let members: Vec<usize> = (0..probs.len())
                .filter(|&i| {
                    let c = probs[i][argmax(&probs[i])];
                    c >= lo && (c < hi || (b == n_bins - 1 && c <= 1.0))
                })
                .collect();
            if members.is_empty() {
                continue;
            }
            let conf: f64 = members.iter().map(|&i| probs[i][argmax(&probs[i])]).sum::<f64>()
                / members.len() as f64;
            let accuracy: f64 = members
                .iter()
                .filter(|&&i| argmax(&probs[i]) == labels[i])
                .count() as f64
                / members.len() as f64;
            total += members.len() as f64 / n * (accuracy - conf).abs();
        }
        total
    }

    fn oracle_class_residuals(
        probs: &[Vec<f64>],
        labels: &[usize],
        n_bins: usize,
        class: usize,
    ) -> Vec<f64> {
        let n = probs.len() as f64;
        (0..n_bins)
            .map(|b| {
                let lo = b as f64 / n_bins as f64;
                let hi = (b + 1) as f64 / n_bins as f64;
                let members: Vec<usize> = (0..probs.len())
                    .filter(|&i| {
                        let c = probs[i][class];
                        c >= lo && (c < hi || (b == n_bins - 1 && c <= 1.0))
                    })
                    .collect();
                if members.is_empty() {
                    return 0.0;
                }
                let conf: f64 = members.iter().map(|&i| probs[i][class]).sum();
                let freq = members.iter().filter(|&&i| labels[i] == class).count() as f64;
                (freq - conf) / n
            })
            .collect()
    }

    fn oracle_classwise(probs: &[Vec<f64>], labels: &[usize], n_bins: usize) -> f64 {
        let k = probs[0].len();
        (0..k)
            .map(|c| {
                oracle_class_residuals(probs, labels, n_bins, c)
                    .iter()
                    .map(|r| r.abs())
                    .sum::<f64>()
            })
            .sum::<f64>()
            / k as f64
    }

    fn oracle_ecce(probs: &[Vec<f64>], labels: &[usize], n_bins: usize) -> f64 {
        let k = probs[0].len();
        let mut total = 0.0;
        for c in 0..k {
            let res = oracle_class_residuals(probs, labels, n_bins, c);
            for b in 0..n_bins {
                total += res[..=b].iter().sum::<f64>().abs();
            }
        }
        total / k as f64
    }

    fn oracle_anchor_norms(
        probs: &[Vec<f64>],
        labels: &[usize],
        emb: &[Vec<f64>],
        n_bins: usize,
        gamma: f64,
    ) -> Vec<f64> {
        let k = probs[0].len();
        let bin_of = |i: usize| {
            let c = probs[i][argmax(&probs[i])];
            ((c * n_bins as f64) as usize).min(n_bins - 1)
        };
        (0..probs.len())
            .map(|i| {
                let mut norm = 0.0;
                for c in 0..k {
                    let mut num = 0.0;
                    let mut den = 0.0;
                    for j in 0..probs.len() {
                        if bin_of(j) != bin_of(i) {
                            continue;
                        }
                        let d: f64 = emb[i]
                            .iter()
                            .zip(&emb[j])
                            .map(|(a, b)| (a - b) * (a - b))
                            .sum();
                        let w = (-d / (2.0 * gamma * gamma)).exp();
                        num += w * (probs[j][c] - if labels[j] == c { 1.0 } else { 0.0 });
                        den += w;
                    }
                    norm += (num / den).abs();
                }
                norm
            })
            .collect()
    }

    #[test]
    fn ece_four_sample_single_bin() {
        let probs = vec![
            vec![0.9, 0.1],
            vec![0.9, 0.1],
            vec![0.8, 0.2],
            vec![0.8, 0.2],
        ];
        let labels = vec![0, 1, 0, 0];
        let bins = BinningConfig { n_bins: 1 };
        assert!((ece(&probs, &labels, &bins) - 0.10).abs() < 1e-12);
    }

    #[test]
    fn perfect_predictor_zeroes_everything() {
        let probs: Vec<Vec<f64>> = (0..6).map(|i| one_hot(i % 3, 3)).collect();
        let labels: Vec<usize> = (0..6).map(|i| i % 3).collect();
        let emb: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64, 0.0]).collect();
        let bins = BinningConfig::default();
        let kernel = KernelConfig::default();
        let report = compute_report(&probs, &labels, &emb, &bins, &kernel, 3).unwrap();
        assert_eq!(report.ece, 0.0);
        assert_eq!(report.classwise_ece, 0.0);
        assert_eq!(report.ecce, 0.0);
        assert_eq!(report.lce, 0.0);
        assert_eq!(report.mlce, 0.0);
        assert!(report.nll < 1e-9);
        assert_eq!(report.acc, 1.0);
        assert!(report.ess_curve.iter().all(|&(_, r)| r == 0.0));
    }

    #[test]
    fn ecce_shows_cumulative_cancellation() {
        // Two 2-sample groups with opposite-signed residuals of equal weight:
        // per-bin sum is 0.125 in absolute value, cumulative second term is 0.
        let probs = vec![
            vec![0.25, 0.75],
            vec![0.25, 0.75],
            vec![0.75, 0.25],
            vec![0.75, 0.25],
        ];
        let labels = vec![0, 1, 0, 1];
        let bins = BinningConfig { n_bins: 2 };
        assert!((ecce(&probs, &labels, &bins) - 0.125).abs() < 1e-12);
        // classwise ECE has no cancellation: 0.25 per class.
        assert!((classwise_ece(&probs, &labels, &bins) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn ecce_bounded_by_sum_of_bin_residuals() {
        let mut rng = Rng::new(11);
        let probs: Vec<Vec<f64>> = (0..40)
            .map(|_| {
                let a = rng.next_f64();
                vec![a, 1.0 - a]
            })
            .collect();
        let labels: Vec<usize> = (0..40).map(|_| rng.next_below(2)).collect();
        let bins = BinningConfig { n_bins: 5 };
        assert!(ecce(&probs, &labels, &bins) <= 5.0 * classwise_ece(&probs, &labels, &bins) + 1e-12);
    }

    #[test]
    fn lce_two_sample_uniform_kernel() {
        let probs = vec![vec![0.7, 0.3], vec![0.6, 0.4]];
        let labels = vec![0, 1];
        let emb = vec![vec![0.0, 0.0], vec![1.0, 1.0]];
        let bins = BinningConfig { n_bins: 1 };
        let kernel = KernelConfig { bandwidth: 1e9 };
        assert!((lce(&probs, &labels, &emb, &bins, &kernel) - 0.15).abs() < 1e-9);
        assert!((mlce(&probs, &labels, &emb, &bins, &kernel) - 0.3).abs() < 1e-9);
    }

    #[test]
    fn single_sample_bin_reduces_to_own_residual() {
        let probs = vec![vec![0.95, 0.05], vec![0.55, 0.45]];
        let labels = vec![1, 0];
        let emb = vec![vec![0.0], vec![100.0]];
        let bins = BinningConfig { n_bins: 10 };
        let kernel = KernelConfig { bandwidth: 1.0 };
        // samples land in different bins; each is alone.
        let m = mlce(&probs, &labels, &emb, &bins, &kernel);
        let own: f64 = (0.95f64 - 0.0).abs() + (0.05f64 - 1.0).abs();
        assert!((m - own).abs() < 1e-12);
    }

    #[test]
    fn mlce_dominates_bin_means() {
        let mut rng = Rng::new(5);
        let n = 30;
        let probs: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let a = rng.uniform(0.05, 0.95);
                vec![a, 1.0 - a]
            })
            .collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.next_below(2)).collect();
        let emb: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.normal(), rng.normal()]).collect();
        let bins = BinningConfig { n_bins: 4 };
        let kernel = KernelConfig { bandwidth: 2.0 };
        let norms = oracle_anchor_norms(&probs, &labels, &emb, 4, 2.0);
        let mean = norms.iter().sum::<f64>() / norms.len() as f64;
        assert!(mlce(&probs, &labels, &emb, &bins, &kernel) >= mean - 1e-12);
    }

    #[test]
    fn nll_and_acc_fixtures() {
        let probs = vec![one_hot(0, 4), vec![0.25; 4], vec![0.5, 0.2, 0.2, 0.1]];
        let labels = vec![0, 2, 1];
        let expected_nll = (0.0 + 4.0f64.ln() + -(0.2f64.ln())) / 3.0;
        assert!((nll(&probs, &labels) - expected_nll).abs() < 1e-12);
        // row 0 correct, row 1 tie resolved to index 0 (wrong), row 2 wrong.
        assert!((acc(&probs, &labels) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn matches_brute_force_oracle_on_random_data() {
        let mut rng = Rng::new(77);
        let n = 50;
        let k = 3;
        let probs: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let raw: Vec<f64> = (0..k).map(|_| rng.uniform(0.0, 1.0) + 0.05).collect();
                let s: f64 = raw.iter().sum();
                raw.into_iter().map(|v| v / s).collect()
            })
            .collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.next_below(k)).collect();
        let emb: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..4).map(|_| rng.normal() * 3.0).collect())
            .collect();
        let bins = BinningConfig { n_bins: 7 };
        let kernel = KernelConfig { bandwidth: 4.0 };

        assert!((ece(&probs, &labels, &bins) - oracle_ece(&probs, &labels, 7)).abs() < 1e-6);
        assert!(
            (classwise_ece(&probs, &labels, &bins) - oracle_classwise(&probs, &labels, 7)).abs()
                < 1e-6
        );
        assert!((ecce(&probs, &labels, &bins) - oracle_ecce(&probs, &labels, 7)).abs() < 1e-6);

        let norms = oracle_anchor_norms(&probs, &labels, &emb, 7, 4.0);
        let oracle_lce = norms.iter().sum::<f64>() / (k as f64 * n as f64);
        let oracle_mlce = norms.iter().cloned().fold(0.0, f64::max);
        assert!((lce(&probs, &labels, &emb, &bins, &kernel) - oracle_lce).abs() < 1e-6);
        assert!((mlce(&probs, &labels, &emb, &bins, &kernel) - oracle_mlce).abs() < 1e-6);
    }

    #[test]
    fn row_permutation_invariance() {
        let mut rng = Rng::new(21);
        let n = 24;
        let probs: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let a = rng.uniform(0.1, 0.9);
                vec![a, 1.0 - a]
            })
            .collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.next_below(2)).collect();
        let emb: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.normal()]).collect();
        let bins = BinningConfig { n_bins: 5 };
        let kernel = KernelConfig { bandwidth: 1.5 };

        let mut order: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut order);
        let p2: Vec<Vec<f64>> = order.iter().map(|&i| probs[i].clone()).collect();
        let l2: Vec<usize> = order.iter().map(|&i| labels[i]).collect();
        let e2: Vec<Vec<f64>> = order.iter().map(|&i| emb[i].clone()).collect();

        assert!((ece(&probs, &labels, &bins) - ece(&p2, &l2, &bins)).abs() < 1e-12);
        assert!(
            (classwise_ece(&probs, &labels, &bins) - classwise_ece(&p2, &l2, &bins)).abs() < 1e-12
        );
        assert!((ecce(&probs, &labels, &bins) - ecce(&p2, &l2, &bins)).abs() < 1e-12);
        assert!(
            (lce(&probs, &labels, &emb, &bins, &kernel) - lce(&p2, &l2, &e2, &bins, &kernel)).abs()
                < 1e-9
        );
        assert!(
            (mlce(&probs, &labels, &emb, &bins, &kernel) - mlce(&p2, &l2, &e2, &bins, &kernel))
                .abs()
                < 1e-9
        );
        assert!((nll(&probs, &labels) - nll(&p2, &l2)).abs() < 1e-12);
    }

    #[test]
    fn ess_of_identical_points_is_n() {
        let n = 12;
        let probs: Vec<Vec<f64>> = (0..n).map(|_| vec![0.6, 0.4]).collect();
        let labels = vec![0; n];
        let emb: Vec<Vec<f64>> = (0..n).map(|_| vec![1.0, 2.0]).collect();
        let kernel = KernelConfig { bandwidth: 1.0 };
        let (ess, _) = ess_and_residuals(&probs, &labels, &emb, &kernel);
        assert!(ess.iter().all(|&e| (e - n as f64).abs() < 1e-9));
    }

    #[test]
    fn isolated_point_lands_in_lowest_ess_bin() {
        // Dense cluster at origin plus one far outlier with a small bandwidth.
        let n = 20;
        let mut emb: Vec<Vec<f64>> = (0..n - 1).map(|i| vec![(i as f64) * 0.01]).collect();
        emb.push(vec![1000.0]);
        let probs: Vec<Vec<f64>> = (0..n).map(|_| vec![0.7, 0.3]).collect();
        let labels = vec![0; n];
        let kernel = KernelConfig { bandwidth: 0.5 };
        let (ess, _) = ess_and_residuals(&probs, &labels, &emb, &kernel);
        assert!((ess[n - 1] - 1.0).abs() < 1e-6);
        let min = ess.iter().cloned().fold(f64::INFINITY, f64::min);
        assert_eq!(ess[n - 1], min);
    }

    #[test]
    fn ess_curve_rejects_too_few_samples() {
        let probs = vec![vec![1.0, 0.0]; 3];
        let labels = vec![0; 3];
        let emb = vec![vec![0.0]; 3];
        assert!(ess_curve(&probs, &labels, &emb, &KernelConfig::default(), 5).is_err());
    }
}
