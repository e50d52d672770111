//! Synthetic region-miscalibration benchmark.
//!
//! Embeddings come from well-separated Gaussian regions; each sample carries
//! a latent class signal, and labels are drawn from a region-specific
//! confusion of that signal. Base probabilities come from a single pooled
//! multinomial logistic model fit on region-centered features, so the base
//! model is globally reasonable but cannot represent region-dependent
//! label structure: regions whose confusion deviates from the pooled average
//! are locally miscalibrated by construction.

use serde::{Deserialize, Serialize};

use crate::dataset::{CalibrationDataset, Split};
use crate::error::{Error, Result};
use crate::numerics::{log_softmax, softmax, AdamState, Rng};
use crate::tensor::Tensor2D;

/// Norm of the per-class signal added to each embedding.
const CLASS_ANCHOR_NORM: f64 = 6.0;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_regions: usize,
    pub n_classes: usize,
    pub dim: usize,
    /// train_cal, val_cal, test sample counts.
    pub samples_per_split: [usize; 3],
    /// Per-region class-confusion matrices, n_classes x n_classes each;
    /// row j is the label distribution given latent class signal j.
    pub noise_profile: Vec<Vec<Vec<f64>>>,
    pub seed: u64,
}

/// Generation byproducts used by diagnostics and tests; not persisted.
#[derive(Debug, Clone)]
pub struct SyntheticMeta {
    pub region_of_row: Vec<usize>,
    pub signal_of_row: Vec<usize>,
    pub region_centers: Vec<Vec<f64>>,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_regions < 2 || self.n_classes < 2 {
            return Err(Error::Config(format!(
                "degenerate spec: {} regions, {} classes (need >= 2 each)",
                self.n_regions, self.n_classes
            )));
        }
        if self.n_regions > self.dim {
            return Err(Error::Config(format!(
                "{} regions exceed dimension {}: separated centers unavailable",
                self.n_regions, self.dim
            )));
        }
        if self.noise_profile.len() != self.n_regions {
            return Err(Error::Config(format!(
                "noise profile has {} regions, expected {}",
                self.noise_profile.len(),
                self.n_regions
            )));
        }
        for (r, confusion) in self.noise_profile.iter().enumerate() {
            if confusion.len() != self.n_classes {
                return Err(Error::Config(format!(
                    "region {r} confusion has {} rows, expected {}",
                    confusion.len(),
                    self.n_classes
                )));
            }
            for (j, row) in confusion.iter().enumerate() {
                if row.len() != self.n_classes {
                    return Err(Error::Config(format!(
                        "region {r} confusion row {j} has wrong length"
                    )));
                }
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > 1e-6 || row.iter().any(|&p| p < 0.0) {
                    return Err(Error::Config(format!(
                        "region {r} confusion row {j} is not a distribution (sum {sum})"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Shifted-permutation confusion profile: region r concentrates mass 1-eps on
/// class (j + r) mod K. Region-dependent by construction, so the pooled base
/// model is forced into a blended, locally miscalibrated fit.
pub fn shifted_confusions(n_regions: usize, n_classes: usize, eps: f64) -> Vec<Vec<Vec<f64>>> {
    let off = if n_classes > 1 { eps / (n_classes - 1) as f64 } else { 0.0 };
    (0..n_regions)
        .map(|r| {
            (0..n_classes)
                .map(|j| {
                    let peak = (j + r) % n_classes;
                    (0..n_classes)
                        .map(|y| if y == peak { 1.0 - eps } else { off })
                        .collect()
                })
                .collect()
        })
        .collect()
}

fn gram_schmidt_directions(n: usize, dim: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let mut dirs: Vec<Vec<f64>> = Vec::with_capacity(n);
    while dirs.len() < n {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        for u in &dirs {
            let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            for (vi, ui) in v.iter_mut().zip(u) {
                *vi -= dot * ui;
            }
        }
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-6 {
            continue;
        }
        for vi in &mut v {
            *vi /= norm;
        }
        dirs.push(v);
    }
    dirs
}

/// Fits a multinomial logistic model by full-batch Adam; deterministic.
fn fit_logistic(
    features: &[Vec<f64>],
    labels: &[usize],
    n_classes: usize,
    iters: usize,
) -> (Vec<f64>, Vec<f64>) {
    let dim = features[0].len();
    let n = features.len();
    let mut weight = vec![0.0f64; n_classes * dim];
    let mut bias = vec![0.0f64; n_classes];
    let mut adam_w = AdamState::new(weight.len(), 0.05, 0.0);
    let mut adam_b = AdamState::new(bias.len(), 0.05, 0.0);
    for _ in 0..iters {
        let mut grad_w = vec![0.0f64; n_classes * dim];
        let mut grad_b = vec![0.0f64; n_classes];
        for (x, &y) in features.iter().zip(labels) {
            let logits: Vec<f64> = (0..n_classes)
                .map(|c| {
                    bias[c]
                        + x.iter()
                            .zip(&weight[c * dim..(c + 1) * dim])
                            .map(|(a, b)| a * b)
                            .sum::<f64>()
                })
                .collect();
            let p = softmax(&logits);
            for c in 0..n_classes {
                let delta = p[c] - if c == y { 1.0 } else { 0.0 };
                grad_b[c] += delta;
                for j in 0..dim {
                    grad_w[c * dim + j] += delta * x[j];
                }
            }
        }
        for g in grad_w.iter_mut() {
            *g /= n as f64;
        }
        for g in grad_b.iter_mut() {
            *g /= n as f64;
        }
        adam_w.update(&mut weight, &grad_w).expect("shapes fixed");
        adam_b.update(&mut bias, &grad_b).expect("shapes fixed");
    }
    (weight, bias)
}

/// Generates the benchmark. Deterministic for a fixed spec and seed.
pub fn make_synthetic(spec: &SyntheticSpec) -> Result<(CalibrationDataset, SyntheticMeta)> {
    spec.validate()?;
    let mut rng = Rng::new(spec.seed);
    let k = spec.n_classes;
    let dim = spec.dim;

    // Orthonormal directions scaled so centers sit at mutual distance
    // 10*sqrt(dim)*sqrt(2) >= 10*sqrt(dim).
    let scale = 10.0 * (dim as f64).sqrt();
    let centers: Vec<Vec<f64>> = gram_schmidt_directions(spec.n_regions, dim, &mut rng)
        .into_iter()
        .map(|dir| dir.into_iter().map(|x| x * scale).collect())
        .collect();

    let anchors: Vec<Vec<f64>> = (0..k)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
            let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x * CLASS_ANCHOR_NORM / norm).collect()
        })
        .collect();

    let total: usize = spec.samples_per_split.iter().sum();
    let mut embeddings = Vec::with_capacity(total * dim);
    let mut centered = Vec::with_capacity(total);
    let mut labels = Vec::with_capacity(total);
    let mut regions = Vec::with_capacity(total);
    let mut signals = Vec::with_capacity(total);
    let mut tags = Vec::with_capacity(total);

    for (split_idx, &count) in spec.samples_per_split.iter().enumerate() {
        let tag = [Split::TrainCal, Split::ValCal, Split::Test][split_idx];
        for _ in 0..count {
            let r = rng.next_below(spec.n_regions);
            let j = rng.next_below(k);
            let y = rng.categorical(&spec.noise_profile[r][j]);
            let mut offset: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
            for (o, a) in offset.iter_mut().zip(&anchors[j]) {
                *o += a;
            }
            let z: Vec<f64> = centers[r].iter().zip(&offset).map(|(c, o)| c + o).collect();
            embeddings.extend(z.iter().map(|&v| v as f32));
            centered.push(offset);
            labels.push(y);
            regions.push(r);
            signals.push(j);
            tags.push(tag);
        }
    }

    // Pooled base model on region-centered features from the train split.
    let train_features: Vec<Vec<f64>> = (0..total)
        .filter(|&i| tags[i] == Split::TrainCal)
        .map(|i| centered[i].clone())
        .collect();
    let train_labels: Vec<usize> = (0..total)
        .filter(|&i| tags[i] == Split::TrainCal)
        .map(|i| labels[i])
        .collect();
    if train_features.is_empty() {
        return Err(Error::Config("empty train_cal split in synthetic spec".into()));
    }
    let (weight, bias) = fit_logistic(&train_features, &train_labels, k, 200);

    let mut probs = Vec::with_capacity(total * k);
    for x in &centered {
        let logits: Vec<f64> = (0..k)
            .map(|c| {
                bias[c]
                    + x.iter()
                        .zip(&weight[c * dim..(c + 1) * dim])
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
            })
            .collect();
        // renormalize after f32 rounding to keep rows on the simplex
        let p32: Vec<f32> = log_softmax(&logits).iter().map(|&l| l.exp() as f32).collect();
        let sum: f32 = p32.iter().sum();
        probs.extend(p32.iter().map(|&p| p / sum));
    }

    let dataset = CalibrationDataset::new(
        Tensor2D::new(total, dim, embeddings)?,
        Tensor2D::new(total, k, probs)?,
        labels,
        tags,
    )?;
    let meta = SyntheticMeta {
        region_of_row: regions,
        signal_of_row: signals,
        region_centers: centers,
    };
    Ok((dataset, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{classwise_ece, BinningConfig};

    fn spec_with(
        n_regions: usize,
        n_classes: usize,
        profile: Vec<Vec<Vec<f64>>>,
        seed: u64,
    ) -> SyntheticSpec {
        SyntheticSpec {
            n_regions,
            n_classes,
            dim: 8,
            samples_per_split: [1200, 200, 1200],
            noise_profile: profile,
            seed,
        }
    }

    fn probs_rows(ds: &CalibrationDataset, rows: &[usize]) -> Vec<Vec<f64>> {
        rows.iter().map(|&i| ds.base_probs.row_f64(i)).collect()
    }

    #[test]
    fn determinism_is_byte_identical() {
        let spec = spec_with(2, 2, shifted_confusions(2, 2, 0.1), 99);
        let (a, _) = make_synthetic(&spec).unwrap();
        let (b, _) = make_synthetic(&spec).unwrap();
        assert_eq!(a.embeddings.data, b.embeddings.data);
        assert_eq!(a.base_probs.data, b.base_probs.data);
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.split_tags, b.split_tags);
    }

    #[test]
    fn degenerate_specs_rejected() {
        let spec = spec_with(1, 2, shifted_confusions(1, 2, 0.1), 0);
        assert!(make_synthetic(&spec).is_err());
        let spec = spec_with(2, 1, shifted_confusions(2, 1, 0.0), 0);
        assert!(make_synthetic(&spec).is_err());
    }

    #[test]
    fn region_centers_are_well_separated() {
        let spec = spec_with(3, 3, shifted_confusions(3, 3, 0.1), 5);
        let (_, meta) = make_synthetic(&spec).unwrap();
        let min_sep = 10.0 * (spec.dim as f64).sqrt();
        for a in 0..3 {
            for b in (a + 1)..3 {
                let d: f64 = meta.region_centers[a]
                    .iter()
                    .zip(&meta.region_centers[b])
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt();
                assert!(d >= min_sep, "centers {a},{b} at distance {d}");
            }
        }
    }

    #[test]
    fn swapped_confusions_make_base_model_regionally_miscalibrated() {
        // Region 0 emits label 0 with prob 0.9 regardless of signal, region 1
        // emits label 1 with prob 0.9; the pooled base model must blend.
        let profile = vec![
            vec![vec![0.9, 0.1], vec![0.9, 0.1]],
            vec![vec![0.1, 0.9], vec![0.1, 0.9]],
        ];
        let spec = spec_with(2, 2, profile, 31);
        let (ds, meta) = make_synthetic(&spec).unwrap();
        let bins = BinningConfig::default();
        for region in 0..2 {
            let rows: Vec<usize> = (0..ds.len()).filter(|&i| meta.region_of_row[i] == region).collect();
            let probs = probs_rows(&ds, &rows);
            let labels: Vec<usize> = rows.iter().map(|&i| ds.labels[i]).collect();
            let ece = classwise_ece(&probs, &labels, &bins);
            assert!(ece > 0.2, "region {region} class-wise ECE {ece}");
        }
    }

    #[test]
    fn shared_confusion_keeps_regions_statistically_indistinguishable() {
        let shared = vec![vec![0.85, 0.15], vec![0.2, 0.8]];
        let profile = vec![shared.clone(), shared.clone(), shared];
        let mut spec = spec_with(3, 2, profile, 17);
        spec.samples_per_split = [3000, 300, 3000];
        let (ds, meta) = make_synthetic(&spec).unwrap();
        let bins = BinningConfig::default();

        let region_eces: Vec<f64> = (0..3)
            .map(|region| {
                let rows: Vec<usize> =
                    (0..ds.len()).filter(|&i| meta.region_of_row[i] == region).collect();
                let probs = probs_rows(&ds, &rows);
                let labels: Vec<usize> = rows.iter().map(|&i| ds.labels[i]).collect();
                classwise_ece(&probs, &labels, &bins)
            })
            .collect();
        let spread = region_eces.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            - region_eces.iter().cloned().fold(f64::INFINITY, f64::min);

        // bootstrap spread within a single region
        let rows0: Vec<usize> = (0..ds.len()).filter(|&i| meta.region_of_row[i] == 0).collect();
        let mut rng = Rng::new(1234);
        let mut boot = Vec::new();
        for _ in 0..40 {
            let resample: Vec<usize> =
                (0..rows0.len()).map(|_| rows0[rng.next_below(rows0.len())]).collect();
            let probs = probs_rows(&ds, &resample);
            let labels: Vec<usize> = resample.iter().map(|&i| ds.labels[i]).collect();
            boot.push(classwise_ece(&probs, &labels, &bins));
        }
        let boot_spread = boot.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            - boot.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(
            spread < 2.0 * boot_spread,
            "region spread {spread} vs bootstrap spread {boot_spread}"
        );
    }

    #[test]
    fn probability_rows_are_on_the_simplex() {
        let spec = spec_with(2, 3, shifted_confusions(2, 3, 0.2), 8);
        let (ds, _) = make_synthetic(&spec).unwrap();
        for i in 0..ds.len() {
            let sum: f64 = ds.base_probs.row(i).iter().map(|&p| p as f64).sum();
            assert!((sum - 1.0).abs() < 1e-5);
            assert!(ds.base_probs.row(i).iter().all(|&p| p >= 0.0));
        }
    }
}
