//! Reference calibrators: identity (NC), temperature scaling (TS) and
//! Dirichlet calibration (DC). Applied to base scores or VQ-head scores
//! (VQ-NC / VQ-DC) by the caller.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{clamped_log, log_softmax, AdamState, Rng};
use crate::vqhead::{EpochRecord, TrainConfig, TrainingLog};

/// No calibration: the identity map.
pub fn nc(probs: &[Vec<f64>]) -> Vec<Vec<f64>> {
    probs.to_vec()
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TemperatureParam {
    pub t: f64,
}

pub const TEMPERATURE_LOG_RANGE: (f64, f64) = (-2.995732273553991, 2.995732273553991);

/// softmax(log p / T) row-wise.
pub fn apply_temperature(probs: &[Vec<f64>], param: &TemperatureParam) -> Vec<Vec<f64>> {
    probs
        .iter()
        .map(|row| {
            let scaled: Vec<f64> = clamped_log(row).iter().map(|&l| l / param.t).collect();
            log_softmax(&scaled).iter().map(|&l| l.exp()).collect()
        })
        .collect()
}

fn temperature_nll(probs: &[Vec<f64>], labels: &[usize], t: f64) -> f64 {
    let mut total = 0.0;
    for (row, &y) in probs.iter().zip(labels) {
        let scaled: Vec<f64> = clamped_log(row).iter().map(|&l| l / t).collect();
        total -= log_softmax(&scaled)[y];
    }
    total / probs.len().max(1) as f64
}

/// Minimizes NLL over log T in [ln 0.05, ln 20] by golden-section search.
pub fn fit_temperature(probs: &[Vec<f64>], labels: &[usize]) -> Result<TemperatureParam> {
    if probs.is_empty() {
        return Err(Error::Data("temperature fit on empty data".into()));
    }
    let first = labels[0];
    if labels.iter().all(|&y| y == first) {
        return Err(Error::Data(
            "temperature fit is degenerate: every sample has the same label".into(),
        ));
    }
    // ln 0.05 and ln 20 pinned as explicit constants
    let (mut lo, mut hi) = TEMPERATURE_LOG_RANGE;
    let inv_phi = (5.0f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - inv_phi * (hi - lo);
    let mut x2 = lo + inv_phi * (hi - lo);
    let mut f1 = temperature_nll(probs, labels, x1.exp());
    let mut f2 = temperature_nll(probs, labels, x2.exp());
    while hi - lo > 1e-4 {
        if f1 < f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - inv_phi * (hi - lo);
            f1 = temperature_nll(probs, labels, x1.exp());
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + inv_phi * (hi - lo);
            f2 = temperature_nll(probs, labels, x2.exp());
        }
    }
    Ok(TemperatureParam {
        t: ((lo + hi) / 2.0).exp(),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DirichletParams {
    /// Row-major |Y| x |Y|.
    pub w: Vec<f64>,
    pub c: Vec<f64>,
    pub l2: f64,
    pub n_classes: usize,
}

impl DirichletParams {
    pub fn identity(n_classes: usize, l2: f64) -> Self {
        let mut w = vec![0.0; n_classes * n_classes];
        for j in 0..n_classes {
            w[j * n_classes + j] = 1.0;
        }
        DirichletParams {
            w,
            c: vec![0.0; n_classes],
            l2,
            n_classes,
        }
    }
}

/// log_softmax(W log p + c) row-wise, exponentiated.
pub fn apply_dirichlet(probs: &[Vec<f64>], params: &DirichletParams) -> Vec<Vec<f64>> {
    let k = params.n_classes;
    probs
        .iter()
        .map(|row| {
            let u = clamped_log(row);
            let logits: Vec<f64> = (0..k)
                .map(|j| {
                    params.c[j]
                        + u.iter()
                            .zip(&params.w[j * k..(j + 1) * k])
                            .map(|(a, b)| a * b)
                            .sum::<f64>()
                })
                .collect();
            log_softmax(&logits).iter().map(|&l| l.exp()).collect()
        })
        .collect()
}

fn dirichlet_val_nll(probs: &[Vec<f64>], labels: &[usize], params: &DirichletParams) -> f64 {
    let out = apply_dirichlet(probs, params);
    let mut total = 0.0;
    for (row, &y) in out.iter().zip(labels) {
        total -= row[y].max(1e-12).ln();
    }
    total / probs.len().max(1) as f64
}

/// CE loss plus identity-anchored l2 penalty and its gradients for one batch.
fn dirichlet_batch_grads(
    us: &[Vec<f64>],
    labels: &[usize],
    batch: &[usize],
    params: &DirichletParams,
) -> (Vec<f64>, Vec<f64>, f64) {
    let k = params.n_classes;
    let mut grad_w = vec![0.0f64; k * k];
    let mut grad_c = vec![0.0f64; k];
    let mut loss = 0.0;
    for &i in batch {
        let u = &us[i];
        let logits: Vec<f64> = (0..k)
            .map(|j| {
                params.c[j]
                    + u.iter()
                        .zip(&params.w[j * k..(j + 1) * k])
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
            })
            .collect();
        let lp = log_softmax(&logits);
        loss -= lp[labels[i]];
        for j in 0..k {
            let delta = lp[j].exp() - if j == labels[i] { 1.0 } else { 0.0 };
            grad_c[j] += delta;
            for m in 0..k {
                grad_w[j * k + m] += delta * u[m];
            }
        }
    }
    let inv = 1.0 / batch.len() as f64;
    loss *= inv;
    for g in grad_w.iter_mut() {
        *g *= inv;
    }
    for g in grad_c.iter_mut() {
        *g *= inv;
    }
    // in-loss regularization toward the identity map
    for j in 0..k {
        for m in 0..k {
            let target = if j == m { 1.0 } else { 0.0 };
            let diff = params.w[j * k + m] - target;
            loss += params.l2 * diff * diff;
            grad_w[j * k + m] += 2.0 * params.l2 * diff;
        }
        loss += params.l2 * params.c[j] * params.c[j];
        grad_c[j] += 2.0 * params.l2 * params.c[j];
    }
    (grad_w, grad_c, loss)
}

/// Adam-trained Dirichlet map with early stopping on validation NLL.
/// Regularization lives in the loss, so Adam's decoupled decay is zero.
pub fn fit_dirichlet(
    train_probs: &[Vec<f64>],
    train_labels: &[usize],
    val_probs: &[Vec<f64>],
    val_labels: &[usize],
    l2: f64,
    cfg: &TrainConfig,
) -> Result<(DirichletParams, TrainingLog)> {
    if train_probs.is_empty() || val_probs.is_empty() {
        return Err(Error::Data(format!(
            "dirichlet fit needs non-empty splits ({} / {} rows)",
            train_probs.len(),
            val_probs.len()
        )));
    }
    let k = train_probs[0].len();
    let mut params = DirichletParams::identity(k, l2);
    let train_u: Vec<Vec<f64>> = train_probs.iter().map(|p| clamped_log(p)).collect();
    let mut adam_w = AdamState::new(k * k, cfg.lr, 0.0);
    let mut adam_c = AdamState::new(k, cfg.lr, 0.0);
    let mut rng = Rng::new(cfg.seed);

    let mut best = params.clone();
    let mut best_val = dirichlet_val_nll(val_probs, val_labels, &params);
    let mut log = TrainingLog {
        best_val_nll: Some(best_val),
        ..TrainingLog::default()
    };
    let mut stall = 0usize;
    let mut order: Vec<usize> = (0..train_u.len()).collect();
    for epoch in 0..cfg.max_epochs {
        rng.shuffle(&mut order);
        let mut epoch_ce = 0.0;
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let (gw, gc, loss) = dirichlet_batch_grads(&train_u, train_labels, batch, &params);
            epoch_ce += loss * batch.len() as f64;
            adam_w.update(&mut params.w, &gw)?;
            adam_c.update(&mut params.c, &gc)?;
        }
        let val_nll = dirichlet_val_nll(val_probs, val_labels, &params);
        log.epochs.push(EpochRecord {
            epoch,
            train_ce: epoch_ce / order.len() as f64,
            val_nll,
        });
        if val_nll < best_val {
            best_val = val_nll;
            best = params.clone();
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
    Ok((best, log))
}

/// Finite-difference validation of the DC gradients at 5 random points;
/// used by the verification command.
pub fn gradient_self_check() -> Result<bool> {
    use crate::numerics::check_gradient;
    let mut rng = Rng::new(4242);
    let k = 3;
    let n = 6;
    let us: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            let raw: Vec<f64> = (0..k).map(|_| rng.uniform(0.05, 1.0)).collect();
            let s: f64 = raw.iter().sum();
            clamped_log(&raw.into_iter().map(|v| v / s).collect::<Vec<f64>>())
        })
        .collect();
    let labels: Vec<usize> = (0..n).map(|_| rng.next_below(k)).collect();
    let batch: Vec<usize> = (0..n).collect();
    for _ in 0..5 {
        let point: Vec<f64> = (0..k * k + k).map(|_| rng.uniform(-0.8, 0.8)).collect();
        let f = |p: &[f64]| {
            let params = DirichletParams {
                w: p[..k * k].to_vec(),
                c: p[k * k..].to_vec(),
                l2: 1e-3,
                n_classes: k,
            };
            dirichlet_batch_grads(&us, &labels, &batch, &params).2
        };
        let g = |p: &[f64]| {
            let params = DirichletParams {
                w: p[..k * k].to_vec(),
                c: p[k * k..].to_vec(),
                l2: 1e-3,
                n_classes: k,
            };
            let (gw, gc, _) = dirichlet_batch_grads(&us, &labels, &batch, &params);
            let mut out = gw;
            out.extend(gc);
            out
        };
        if check_gradient(f, g, &point)? >= 1e-4 {
            return Ok(false);
        }
    }
    Ok(true)
}
