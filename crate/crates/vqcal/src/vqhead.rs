//! Quantization-aware linear head: cross-entropy training on flattened
//! quantized representations with Adam, interleaved with EMA codebook
//! updates, and early stopping on validation NLL.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{CalibrationDataset, Split};
use crate::error::{Error, Result};
use crate::numerics::{log_softmax, AdamState, Rng};
use crate::quantizer::{
    ema_update, quantize, Codebook, IndexSequence, SegmentationConfig,
};
use crate::tensor::{read_tensor, write_tensor, Tensor2D};

#[derive(Debug, Clone)]
pub struct LinearHead {
    /// Row-major |Y| x m' weight.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub n_classes: usize,
    pub m_prime: usize,
}

impl LinearHead {
    pub fn zeros(n_classes: usize, m_prime: usize) -> Self {
        LinearHead {
            weight: vec![0.0; n_classes * m_prime],
            bias: vec![0.0; n_classes],
            n_classes,
            m_prime,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_epochs: 200,
            batch_size: 1024,
            patience: 10,
            lr: 1e-3,
            weight_decay: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_ce: f64,
    pub val_nll: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_val_nll: Option<f64>,
}

/// log_softmax(W q + b).
pub fn head_forward(q_flat: &[f64], head: &LinearHead) -> Result<Vec<f64>> {
    if q_flat.len() != head.m_prime {
        return Err(Error::Shape(format!(
            "input length {} vs head input dimension {}",
            q_flat.len(),
            head.m_prime
        )));
    }
    let logits: Vec<f64> = (0..head.n_classes)
        .map(|c| {
            head.bias[c]
                + q_flat
                    .iter()
                    .zip(&head.weight[c * head.m_prime..(c + 1) * head.m_prime])
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
        })
        .collect();
    Ok(log_softmax(&logits))
}

fn mean_val_nll(
    dataset: &CalibrationDataset,
    rows: &[usize],
    codebook: &Codebook,
    seg: &SegmentationConfig,
    head: &LinearHead,
) -> Result<f64> {
    let mut total = 0.0;
    for &i in rows {
        let z = dataset.embeddings.row_f64(i);
        let (_, q) = quantize(&z, codebook, seg)?;
        let lp = head_forward(&q, head)?;
        total -= lp[dataset.labels[i]];
    }
    Ok(total / rows.len().max(1) as f64)
}

/// Stage 1: per minibatch, Adam step on the head followed by an EMA codebook
/// update; early stopping on validation NLL returns the best snapshot of both.
pub fn train_stage1(
    dataset: &CalibrationDataset,
    codebook: &Codebook,
    seg: &SegmentationConfig,
    head: &LinearHead,
    cfg: &TrainConfig,
) -> Result<(Codebook, LinearHead, TrainingLog)> {
    if dataset.embeddings.cols != seg.m_prime {
        return Err(Error::Shape(format!(
            "embedding dim {} vs segmentation dim {}",
            dataset.embeddings.cols, seg.m_prime
        )));
    }
    let train_rows = dataset.split_indices(Split::TrainCal);
    let val_rows = dataset.split_indices(Split::ValCal);
    if train_rows.is_empty() || val_rows.is_empty() {
        return Err(Error::Data(format!(
            "stage 1 needs non-empty train_cal and val_cal splits ({} / {} rows)",
            train_rows.len(),
            val_rows.len()
        )));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let k = dataset.n_classes();
    let m = seg.m_prime;

    let mut codebook = codebook.clone();
    let mut head = head.clone();
    let mut adam_w = AdamState::new(k * m, cfg.lr, cfg.weight_decay);
    let mut adam_b = AdamState::new(k, cfg.lr, cfg.weight_decay);
    let mut rng = Rng::new(cfg.seed);

    let mut best_codebook = codebook.clone();
    let mut best_head = head.clone();
    let mut log = TrainingLog::default();
    let mut best_val = f64::INFINITY;
    let mut stall = 0usize;

    let mut order = train_rows.clone();
    for epoch in 0..cfg.max_epochs {
        rng.shuffle(&mut order);
        let mut epoch_ce = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grad_w = vec![0.0f64; k * m];
            let mut grad_b = vec![0.0f64; k];
            let mut batch_slots: Vec<Vec<f64>> = Vec::with_capacity(batch.len());
            let mut batch_assign: Vec<IndexSequence> = Vec::with_capacity(batch.len());
            for &i in batch {
                let z = dataset.embeddings.row_f64(i);
                let (idx, q) = quantize(&z, &codebook, seg)?;
                let lp = head_forward(&q, &head)?;
                let y = dataset.labels[i];
                epoch_ce -= lp[y];
                for c in 0..k {
                    let delta = lp[c].exp() - if c == y { 1.0 } else { 0.0 };
                    grad_b[c] += delta;
                    for j in 0..m {
                        grad_w[c * m + j] += delta * q[j];
                    }
                }
                batch_slots.push(z);
                batch_assign.push(idx);
            }
            let inv = 1.0 / batch.len() as f64;
            for g in grad_w.iter_mut() {
                *g *= inv;
            }
            for g in grad_b.iter_mut() {
                *g *= inv;
            }
            adam_w.update(&mut head.weight, &grad_w)?;
            adam_b.update(&mut head.bias, &grad_b)?;

            let mut slot_refs: Vec<&[f64]> = Vec::with_capacity(batch.len() * seg.w);
            let mut flat_assign: Vec<usize> = Vec::with_capacity(batch.len() * seg.w);
            for (z, idx) in batch_slots.iter().zip(&batch_assign) {
                for s in 0..seg.w {
                    slot_refs.push(&z[s * seg.d..(s + 1) * seg.d]);
                    flat_assign.push(idx[s]);
                }
            }
            ema_update(&mut codebook, &slot_refs, &flat_assign)?;
        }
        let val_nll = mean_val_nll(dataset, &val_rows, &codebook, seg, &head)?;
        log.epochs.push(EpochRecord {
            epoch,
            train_ce: epoch_ce / order.len() as f64,
            val_nll,
        });
        if val_nll < best_val {
            best_val = val_nll;
            best_codebook = codebook.clone();
            best_head = head.clone();
            log.best_epoch = Some(epoch);
            log.best_val_nll = Some(val_nll);
            stall = 0;
        } else {
            stall += 1;
            if stall >= cfg.patience {
                break;
            }
        }
    }
    Ok((best_codebook, best_head, log))
}

/// VQ scores for the given rows: calibratable probabilities and the index
/// sequence identifying each row's Voronoi cell.
pub fn vq_scores(
    dataset: &CalibrationDataset,
    rows: &[usize],
    codebook: &Codebook,
    seg: &SegmentationConfig,
    head: &LinearHead,
) -> Result<(Vec<Vec<f64>>, Vec<IndexSequence>)> {
    let mut probs = Vec::with_capacity(rows.len());
    let mut cells = Vec::with_capacity(rows.len());
    for &i in rows {
        let z = dataset.embeddings.row_f64(i);
        let (idx, q) = quantize(&z, codebook, seg)?;
        let lp = head_forward(&q, head)?;
        probs.push(lp.iter().map(|&l| l.exp()).collect());
        cells.push(idx);
    }
    Ok((probs, cells))
}

#[derive(Debug, Serialize, Deserialize)]
struct HeadSidecar {
    n_classes: usize,
    m_prime: usize,
}

/// Writes `head_weight.calt`, `head_bias.calt` and `head.json`.
pub fn save_head(dir: &Path, head: &LinearHead) -> Result<()> {
    let w = Tensor2D::from_f64(head.n_classes, head.m_prime, &head.weight)?;
    write_tensor(dir.join("head_weight.calt"), &w)?;
    let b = Tensor2D::from_f64(head.n_classes, 1, &head.bias)?;
    write_tensor(dir.join("head_bias.calt"), &b)?;
    let sidecar = HeadSidecar {
        n_classes: head.n_classes,
        m_prime: head.m_prime,
    };
    let path = dir.join("head.json");
    let json = serde_json::to_string_pretty(&sidecar)
        .map_err(|e| Error::Data(format!("head sidecar: {e}")))?;
    std::fs::write(&path, json).map_err(|e| Error::io(path, e))
}

pub fn load_head(dir: &Path) -> Result<LinearHead> {
    let path = dir.join("head.json");
    let raw = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let sidecar: HeadSidecar =
        serde_json::from_str(&raw).map_err(|e| Error::format(&path, e.to_string()))?;
    let w = read_tensor(dir.join("head_weight.calt"))?;
    let b = read_tensor(dir.join("head_bias.calt"))?;
    if w.rows != sidecar.n_classes || w.cols != sidecar.m_prime || b.rows != sidecar.n_classes {
        return Err(Error::format(
            &path,
            format!(
                "head tensors {}x{} / {}x{} disagree with sidecar {}x{}",
                w.rows, w.cols, b.rows, b.cols, sidecar.n_classes, sidecar.m_prime
            ),
        ));
    }
    Ok(LinearHead {
        weight: w.data.iter().map(|&v| v as f64).collect(),
        bias: b.data.iter().map(|&v| v as f64).collect(),
        n_classes: sidecar.n_classes,
        m_prime: sidecar.m_prime,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{check_gradient, cross_entropy};
    use crate::quantizer::init_codebook;

    fn cluster_dataset(seed: u64, n_per: usize) -> CalibrationDataset {
        // three linearly separable clusters in dim 4, labels = cluster
        let mut rng = Rng::new(seed);
        let centers = [
            [8.0, 0.0, 0.0, 0.0],
            [0.0, 8.0, 0.0, 0.0],
            [0.0, 0.0, 8.0, 0.0],
        ];
        let n = n_per * 3;
        let mut data = Vec::with_capacity(n * 4);
        let mut labels = Vec::with_capacity(n);
        let mut tags = Vec::with_capacity(n);
        for i in 0..n {
            let c = i % 3;
            for j in 0..4 {
                data.push((centers[c][j] + 0.3 * rng.normal()) as f32);
            }
            labels.push(c);
            tags.push(match i % 10 {
                0..=6 => Split::TrainCal,
                7 => Split::ValCal,
                _ => Split::Test,
            });
        }
        let emb = Tensor2D::new(n, 4, data).unwrap();
        let probs = Tensor2D::new(n, 3, vec![1.0 / 3.0; n * 3]).unwrap();
        CalibrationDataset::new(emb, probs, labels, tags).unwrap()
    }

    #[test]
    fn zero_head_is_uniform() {
        let head = LinearHead::zeros(4, 6);
        let lp = head_forward(&[1.0; 6], &head).unwrap();
        for l in lp {
            assert!((l + 4.0f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_weight_hand_example() {
        let mut head = LinearHead::zeros(2, 2);
        head.weight = vec![1.0, 0.0, 0.0, 1.0];
        let lp = head_forward(&[2.0, 0.0], &head).unwrap();
        // softmax(2, 0)
        let z = (1.0f64 + (-2.0f64).exp()).ln();
        assert!((lp[0] + z).abs() < 1e-12);
        assert!((lp[1] + 2.0 + z).abs() < 1e-12);
        assert!((lp[0] + 0.126928).abs() < 1e-5);
        assert!((lp[1] + 2.126928).abs() < 1e-5);
    }

    #[test]
    fn dimension_mismatch_is_error() {
        let head = LinearHead::zeros(2, 3);
        assert!(head_forward(&[0.0; 4], &head).is_err());
    }

    #[test]
    fn head_gradient_matches_finite_differences() {
        let q = [0.7, -0.3, 0.5];
        let y = 1usize;
        let k = 2;
        let m = 3;
        // params = weight rows then bias
        let f = |p: &[f64]| {
            let head = LinearHead {
                weight: p[..k * m].to_vec(),
                bias: p[k * m..].to_vec(),
                n_classes: k,
                m_prime: m,
            };
            let lp = head_forward(&q, &head).unwrap();
            cross_entropy(&[lp], &[y]).unwrap()
        };
        let g = |p: &[f64]| {
            let head = LinearHead {
                weight: p[..k * m].to_vec(),
                bias: p[k * m..].to_vec(),
                n_classes: k,
                m_prime: m,
            };
            let lp = head_forward(&q, &head).unwrap();
            let mut out = vec![0.0; k * m + k];
            for c in 0..k {
                let delta = lp[c].exp() - if c == y { 1.0 } else { 0.0 };
                for j in 0..m {
                    out[c * m + j] = delta * q[j];
                }
                out[k * m + c] = delta;
            }
            out
        };
        let point = vec![0.2, -0.1, 0.4, 0.0, 0.3, -0.5, 0.1, -0.2];
        let err = check_gradient(f, g, &point).unwrap();
        assert!(err < 1e-4, "err {err}");
    }

    #[test]
    fn zero_epochs_changes_nothing() {
        let ds = cluster_dataset(1, 30);
        let seg = SegmentationConfig::new(2, 4).unwrap();
        let cb = init_codebook(&ds.embeddings, &seg, 4, 0.99, &mut Rng::new(7)).unwrap();
        let head = LinearHead::zeros(3, 4);
        let cfg = TrainConfig {
            max_epochs: 0,
            ..TrainConfig::default()
        };
        let (cb2, head2, log) = train_stage1(&ds, &cb, &seg, &head, &cfg).unwrap();
        assert_eq!(cb2.codewords, cb.codewords);
        assert_eq!(head2.weight, head.weight);
        assert!(log.epochs.is_empty());
    }

    #[test]
    fn separable_clusters_reach_high_accuracy() {
        let ds = cluster_dataset(3, 100);
        let seg = SegmentationConfig::new(2, 4).unwrap();
        let cb = init_codebook(&ds.embeddings, &seg, 6, 0.99, &mut Rng::new(5)).unwrap();
        let head = LinearHead::zeros(3, 4);
        let cfg = TrainConfig {
            max_epochs: 80,
            batch_size: 64,
            lr: 0.05,
            seed: 2,
            ..TrainConfig::default()
        };
        let (cb, head, _) = train_stage1(&ds, &cb, &seg, &head, &cfg).unwrap();
        let test_rows = ds.split_indices(Split::Test);
        let (probs, _) = vq_scores(&ds, &test_rows, &cb, &seg, &head).unwrap();
        let hits = probs
            .iter()
            .zip(test_rows.iter().map(|&i| ds.labels[i]))
            .filter(|(p, y)| crate::metrics::argmax(p) == *y)
            .count();
        let acc = hits as f64 / test_rows.len() as f64;
        assert!(acc > 0.95, "test accuracy {acc}");
    }

    #[test]
    fn training_reduces_train_ce_across_seeds() {
        for seed in 0..5 {
            let ds = cluster_dataset(seed + 10, 40);
            let seg = SegmentationConfig::new(2, 4).unwrap();
            let cb = init_codebook(&ds.embeddings, &seg, 4, 0.99, &mut Rng::new(seed)).unwrap();
            let head = LinearHead::zeros(3, 4);
            let cfg = TrainConfig {
                max_epochs: 30,
                batch_size: 32,
                lr: 0.02,
                seed,
                ..TrainConfig::default()
            };
            let (_, _, log) = train_stage1(&ds, &cb, &seg, &head, &cfg).unwrap();
            let first = log.epochs.first().unwrap().train_ce;
            let last = log.epochs.last().unwrap().train_ce;
            assert!(last < first, "seed {seed}: {first} -> {last}");
        }
    }

    #[test]
    fn early_stopping_returns_best_validation_state() {
        let ds = cluster_dataset(8, 60);
        let seg = SegmentationConfig::new(2, 4).unwrap();
        let cb = init_codebook(&ds.embeddings, &seg, 4, 0.99, &mut Rng::new(1)).unwrap();
        let head = LinearHead::zeros(3, 4);
        let cfg = TrainConfig {
            max_epochs: 40,
            batch_size: 32,
            lr: 0.05,
            patience: 5,
            seed: 4,
            ..TrainConfig::default()
        };
        let (best_cb, best_head, log) = train_stage1(&ds, &cb, &seg, &head, &cfg).unwrap();
        let recorded_min = log
            .epochs
            .iter()
            .map(|e| e.val_nll)
            .fold(f64::INFINITY, f64::min);
        assert_eq!(log.best_val_nll.unwrap(), recorded_min);
        let val_rows = ds.split_indices(Split::ValCal);
        let replayed = mean_val_nll(&ds, &val_rows, &best_cb, &seg, &best_head).unwrap();
        assert!((replayed - recorded_min).abs() < 1e-12);
    }

    #[test]
    fn vq_scores_are_deterministic_and_on_simplex() {
        let ds = cluster_dataset(2, 20);
        let seg = SegmentationConfig::new(2, 4).unwrap();
        let cb = init_codebook(&ds.embeddings, &seg, 4, 0.99, &mut Rng::new(3)).unwrap();
        let mut head = LinearHead::zeros(3, 4);
        head.weight.iter_mut().enumerate().for_each(|(i, w)| *w = (i as f64) * 0.05);
        let rows: Vec<usize> = (0..ds.len()).collect();
        let (p1, c1) = vq_scores(&ds, &rows, &cb, &seg, &head).unwrap();
        let (p2, c2) = vq_scores(&ds, &rows, &cb, &seg, &head).unwrap();
        assert_eq!(c1, c2);
        for (a, b) in p1.iter().zip(&p2) {
            assert_eq!(a, b);
        }
        for row in &p1 {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
        // batch equals per-row loop
        for (i, &r) in rows.iter().enumerate() {
            let z = ds.embeddings.row_f64(r);
            let (idx, q) = quantize(&z, &cb, &seg).unwrap();
            let lp = head_forward(&q, &head).unwrap();
            assert_eq!(c1[i], idx);
            for (a, b) in p1[i].iter().zip(lp.iter().map(|l| l.exp())) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn same_seed_training_is_reproducible() {
        let ds = cluster_dataset(6, 30);
        let seg = SegmentationConfig::new(2, 4).unwrap();
        let cb = init_codebook(&ds.embeddings, &seg, 4, 0.99, &mut Rng::new(9)).unwrap();
        let head = LinearHead::zeros(3, 4);
        let cfg = TrainConfig {
            max_epochs: 10,
            batch_size: 16,
            seed: 11,
            ..TrainConfig::default()
        };
        let (cb1, h1, _) = train_stage1(&ds, &cb, &seg, &head, &cfg).unwrap();
        let (cb2, h2, _) = train_stage1(&ds, &cb, &seg, &head, &cfg).unwrap();
        assert_eq!(cb1.codewords, cb2.codewords);
        assert_eq!(h1.weight, h2.weight);
        assert_eq!(h1.bias, h2.bias);
    }

    #[test]
    fn head_round_trips_through_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let mut head = LinearHead::zeros(2, 3);
        head.weight = vec![0.5, -0.25, 1.0, 0.0, 2.0, -1.5];
        head.bias = vec![0.125, -0.5];
        save_head(dir.path(), &head).unwrap();
        let back = load_head(dir.path()).unwrap();
        assert_eq!(back.n_classes, 2);
        assert_eq!(back.m_prime, 3);
        for (a, b) in back.weight.iter().zip(&head.weight) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn empty_split_is_rejected() {
        let mut ds = cluster_dataset(1, 10);
        for t in ds.split_tags.iter_mut() {
            if *t == Split::ValCal {
                *t = Split::Test;
            }
        }
        let seg = SegmentationConfig::new(2, 4).unwrap();
        let cb = init_codebook(&ds.embeddings, &seg, 4, 0.99, &mut Rng::new(0)).unwrap();
        let head = LinearHead::zeros(3, 4);
        assert!(train_stage1(&ds, &cb, &seg, &head, &TrainConfig::default()).is_err());
    }
}
