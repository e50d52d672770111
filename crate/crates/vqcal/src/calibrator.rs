//! Compositional Dirichlet calibrator: receiver/sender codebooks shared
//! across Voronoi cells, slot scales, a bilinear map from index sequences to
//! per-cell log-linear calibration maps, and Stage 2 training.
//!
//! A cell's map is M = softplus(A_V' diag(sigma^2) B_V + c0) - 1 + I where
//! A_V, B_V gather codebook rows by the cell's index sequence and c0 is the
//! constant inv_softplus(1), so the map is the identity when A or B is zero.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{CalibrationDataset, Split};
use crate::error::{Error, Result};
use crate::numerics::{clamped_log, inv_softplus, log_softmax, softplus, softplus_grad, AdamState, Rng};
use crate::quantizer::{Codebook, IndexSequence, SegmentationConfig};
use crate::tensor::{read_tensor, write_tensor, Tensor2D};
use crate::vqhead::{vq_scores, EpochRecord, LinearHead, TrainConfig, TrainingLog};

#[derive(Debug, Clone)]
pub struct CalibratorParams {
    /// Receiver codebook, row-major |C| x |Y|.
    pub a: Vec<f64>,
    /// Sender codebook, row-major |C| x |Y|.
    pub b: Vec<f64>,
    /// Slot scales as log(sigma^2); sigma^2 = 1 when all zero.
    pub log_sigma2: Vec<f64>,
    /// Global class bias.
    pub beta: Vec<f64>,
    pub codebook_size: usize,
    pub n_classes: usize,
    pub w: usize,
    /// Frozen per-cell log-prior terms; empty map means no prior.
    pub cell_log_prior: HashMap<IndexSequence, Vec<f64>>,
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct Stage2Options {
    pub learn_sigma: bool,
    pub strict_identity: bool,
    pub cell_prior_empirical: bool,
}

/// Pre-activation offset placing softplus at exactly 1 when A'B = 0.
pub fn identity_offset() -> f64 {
    inv_softplus(1.0)
}

impl CalibratorParams {
    /// A, B ~ uniform[-0.01, 0.01]; strict identity zeroes B so the initial
    /// map is exactly the identity for every cell.
    pub fn init(
        codebook_size: usize,
        n_classes: usize,
        w: usize,
        strict_identity: bool,
        rng: &mut Rng,
    ) -> Self {
        let n = codebook_size * n_classes;
        let a: Vec<f64> = (0..n).map(|_| rng.uniform(-0.01, 0.01)).collect();
        let b: Vec<f64> = if strict_identity {
            vec![0.0; n]
        } else {
            (0..n).map(|_| rng.uniform(-0.01, 0.01)).collect()
        };
        CalibratorParams {
            a,
            b,
            log_sigma2: vec![0.0; w],
            beta: vec![0.0; n_classes],
            codebook_size,
            n_classes,
            w,
            cell_log_prior: HashMap::new(),
        }
    }

    /// Trainable parameters excluding beta: two codebooks plus slot scales.
    pub fn parameter_count(&self) -> usize {
        2 * self.codebook_size * self.n_classes + self.w
    }

    pub fn sigma2(&self) -> Vec<f64> {
        self.log_sigma2.iter().map(|&l| l.exp()).collect()
    }
}

/// Gathers codebook rows by the index sequence: row i of A_V is a_{s(i)}.
pub fn select_factors(
    s: &IndexSequence,
    params: &CalibratorParams,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if s.len() != params.w {
        return Err(Error::Shape(format!(
            "index sequence length {} vs {} slots",
            s.len(),
            params.w
        )));
    }
    let k = params.n_classes;
    let mut av = Vec::with_capacity(params.w * k);
    let mut bv = Vec::with_capacity(params.w * k);
    for &idx in s {
        if idx >= params.codebook_size {
            return Err(Error::Data(format!(
                "index {idx} out of range for codebook of {}",
                params.codebook_size
            )));
        }
        av.extend_from_slice(&params.a[idx * k..(idx + 1) * k]);
        bv.extend_from_slice(&params.b[idx * k..(idx + 1) * k]);
    }
    Ok((av, bv))
}

/// The cell's calibration map M (|Y| x |Y| row-major); entry (j, i) weights
/// log p_i in the posterior for class j.
pub fn cell_alpha_minus_one(s: &IndexSequence, params: &CalibratorParams) -> Result<Vec<f64>> {
    let (av, bv) = select_factors(s, params)?;
    let k = params.n_classes;
    let sigma2 = params.sigma2();
    let c0 = identity_offset();
    let mut m = vec![0.0f64; k * k];
    for j in 0..k {
        for i in 0..k {
            let mut g = 0.0;
            for slot in 0..params.w {
                g += sigma2[slot] * av[slot * k + j] * bv[slot * k + i];
            }
            m[j * k + i] = softplus(g + c0) - 1.0 + if j == i { 1.0 } else { 0.0 };
        }
    }
    Ok(m)
}

/// log_softmax(bias + M log_p); the building block shared by the calibrator
/// and tests that supply M directly.
pub fn log_posterior_with_map(log_p: &[f64], m: &[f64], bias: &[f64]) -> Vec<f64> {
    let k = bias.len();
    let logits: Vec<f64> = (0..k)
        .map(|j| bias[j] + log_p.iter().zip(&m[j * k..(j + 1) * k]).map(|(u, w)| u * w).sum::<f64>())
        .collect();
    log_softmax(&logits)
}

/// Calibrated posterior for one row of log-probabilities.
pub fn calibrated_log_posterior(
    log_p_hat: &[f64],
    s: &IndexSequence,
    params: &CalibratorParams,
) -> Result<Vec<f64>> {
    if log_p_hat.len() != params.n_classes {
        return Err(Error::Shape(format!(
            "{} log-probs vs {} classes",
            log_p_hat.len(),
            params.n_classes
        )));
    }
    if log_p_hat.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite log-probability input".into()));
    }
    let m = cell_alpha_minus_one(s, params)?;
    let mut bias = params.beta.clone();
    if let Some(prior) = params.cell_log_prior.get(s) {
        for (b, p) in bias.iter_mut().zip(prior) {
            *b += p;
        }
    }
    Ok(log_posterior_with_map(log_p_hat, &m, &bias))
}

#[derive(Debug, Clone)]
struct Grads {
    a: Vec<f64>,
    b: Vec<f64>,
    log_sigma2: Vec<f64>,
    beta: Vec<f64>,
}

impl Grads {
    fn zeros(params: &CalibratorParams) -> Self {
        Grads {
            a: vec![0.0; params.a.len()],
            b: vec![0.0; params.b.len()],
            log_sigma2: vec![0.0; params.w],
            beta: vec![0.0; params.n_classes],
        }
    }

    fn scale(&mut self, f: f64) {
        for g in self
            .a
            .iter_mut()
            .chain(&mut self.b)
            .chain(&mut self.log_sigma2)
            .chain(&mut self.beta)
        {
            *g *= f;
        }
    }
}

/// CE loss of one sample plus analytic gradients scattered into the shared
/// codebooks. Reused verbatim by training and by the gradient-check tests.
fn accumulate_sample(
    u: &[f64],
    y: usize,
    s: &IndexSequence,
    params: &CalibratorParams,
    grads: &mut Grads,
) -> Result<f64> {
    let k = params.n_classes;
    let (av, bv) = select_factors(s, params)?;
    let sigma2 = params.sigma2();
    let c0 = identity_offset();

    let mut pre = vec![0.0f64; k * k];
    let mut m = vec![0.0f64; k * k];
    for j in 0..k {
        for i in 0..k {
            let mut g = 0.0;
            for slot in 0..params.w {
                g += sigma2[slot] * av[slot * k + j] * bv[slot * k + i];
            }
            pre[j * k + i] = g + c0;
            m[j * k + i] = softplus(g + c0) - 1.0 + if j == i { 1.0 } else { 0.0 };
        }
    }
    let mut bias = params.beta.clone();
    if let Some(prior) = params.cell_log_prior.get(s) {
        for (b, p) in bias.iter_mut().zip(prior) {
            *b += p;
        }
    }
    let lp = log_posterior_with_map(u, &m, &bias);
    let loss = -lp[y];

    let dlogit: Vec<f64> = (0..k)
        .map(|j| lp[j].exp() - if j == y { 1.0 } else { 0.0 })
        .collect();
    // dL/dG through softplus; the -1 and identity constants drop out.
    let mut dg = vec![0.0f64; k * k];
    for j in 0..k {
        for i in 0..k {
            dg[j * k + i] = dlogit[j] * u[i] * softplus_grad(pre[j * k + i]);
        }
    }
    for (gb, dl) in grads.beta.iter_mut().zip(&dlogit) {
        *gb += dl;
    }
    for slot in 0..params.w {
        let idx = s[slot];
        let mut dsigma2 = 0.0;
        for j in 0..k {
            for i in 0..k {
                let d = dg[j * k + i];
                grads.a[idx * k + j] += sigma2[slot] * d * bv[slot * k + i];
                grads.b[idx * k + i] += sigma2[slot] * d * av[slot * k + j];
                dsigma2 += d * av[slot * k + j] * bv[slot * k + i];
            }
        }
        grads.log_sigma2[slot] += dsigma2 * sigma2[slot];
    }
    Ok(loss)
}

fn mean_nll(
    us: &[Vec<f64>],
    cells: &[IndexSequence],
    labels: &[usize],
    params: &CalibratorParams,
) -> Result<f64> {
    let mut total = 0.0;
    for ((u, s), &y) in us.iter().zip(cells).zip(labels) {
        let lp = calibrated_log_posterior(u, s, params)?;
        total -= lp[y];
    }
    Ok(total / us.len().max(1) as f64)
}

/// Laplace-smoothed per-cell class frequencies as frozen log-priors.
fn empirical_cell_priors(
    cells: &[IndexSequence],
    labels: &[usize],
    n_classes: usize,
) -> HashMap<IndexSequence, Vec<f64>> {
    let mut counts: HashMap<IndexSequence, Vec<f64>> = HashMap::new();
    for (s, &y) in cells.iter().zip(labels) {
        counts.entry(s.clone()).or_insert_with(|| vec![0.0; n_classes])[y] += 1.0;
    }
    counts
        .into_iter()
        .map(|(s, c)| {
            let total: f64 = c.iter().sum::<f64>() + n_classes as f64;
            (s, c.into_iter().map(|v| ((v + 1.0) / total).ln()).collect())
        })
        .collect()
}

/// Stage 2 core on precomputed log-scores and cells: minibatch Adam on A, B,
/// beta (and log sigma^2 when learned, exempt from weight decay), early
/// stopping on validation NLL.
#[allow(clippy::too_many_arguments)]
pub fn train_on_scores(
    train_u: &[Vec<f64>],
    train_cells: &[IndexSequence],
    train_labels: &[usize],
    val_u: &[Vec<f64>],
    val_cells: &[IndexSequence],
    val_labels: &[usize],
    params: &CalibratorParams,
    cfg: &TrainConfig,
    opts: &Stage2Options,
) -> Result<(CalibratorParams, TrainingLog)> {
    if train_u.is_empty() || val_u.is_empty() {
        return Err(Error::Data(format!(
            "stage 2 needs non-empty train and validation scores ({} / {} rows)",
            train_u.len(),
            val_u.len()
        )));
    }
    let mut params = params.clone();
    if opts.cell_prior_empirical {
        params.cell_log_prior = empirical_cell_priors(train_cells, train_labels, params.n_classes);
    }
    let mut adam_a = AdamState::new(params.a.len(), cfg.lr, cfg.weight_decay);
    let mut adam_b = AdamState::new(params.b.len(), cfg.lr, cfg.weight_decay);
    let mut adam_beta = AdamState::new(params.beta.len(), cfg.lr, cfg.weight_decay);
    let mut adam_sigma = AdamState::new(params.w, cfg.lr, 0.0);
    let mut rng = Rng::new(cfg.seed);

    let mut best = params.clone();
    let mut best_val = mean_nll(val_u, val_cells, val_labels, &params)?;
    let mut log = TrainingLog {
        best_epoch: None,
        best_val_nll: Some(best_val),
        ..TrainingLog::default()
    };
    let mut stall = 0usize;
    let mut order: Vec<usize> = (0..train_u.len()).collect();

    for epoch in 0..cfg.max_epochs {
        rng.shuffle(&mut order);
        let mut epoch_ce = 0.0;
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let mut grads = Grads::zeros(&params);
            for &i in batch {
                epoch_ce += accumulate_sample(
                    &train_u[i],
                    train_labels[i],
                    &train_cells[i],
                    &params,
                    &mut grads,
                )?;
            }
            grads.scale(1.0 / batch.len() as f64);
            adam_a.update(&mut params.a, &grads.a)?;
            adam_b.update(&mut params.b, &grads.b)?;
            adam_beta.update(&mut params.beta, &grads.beta)?;
            if opts.learn_sigma {
                adam_sigma.update(&mut params.log_sigma2, &grads.log_sigma2)?;
            }
        }
        let val_nll = mean_nll(val_u, val_cells, val_labels, &params)?;
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

/// Stage 2 over a dataset with frozen Stage 1 artifacts.
pub fn train_stage2(
    dataset: &CalibrationDataset,
    codebook: &Codebook,
    seg: &SegmentationConfig,
    head: &LinearHead,
    params: &CalibratorParams,
    cfg: &TrainConfig,
    opts: &Stage2Options,
) -> Result<(CalibratorParams, TrainingLog)> {
    let train_rows = dataset.split_indices(Split::TrainCal);
    let val_rows = dataset.split_indices(Split::ValCal);
    let (train_p, train_cells) = vq_scores(dataset, &train_rows, codebook, seg, head)?;
    let (val_p, val_cells) = vq_scores(dataset, &val_rows, codebook, seg, head)?;
    let train_u: Vec<Vec<f64>> = train_p.iter().map(|p| clamped_log(p)).collect();
    let val_u: Vec<Vec<f64>> = val_p.iter().map(|p| clamped_log(p)).collect();
    let train_labels: Vec<usize> = train_rows.iter().map(|&i| dataset.labels[i]).collect();
    let val_labels: Vec<usize> = val_rows.iter().map(|&i| dataset.labels[i]).collect();
    train_on_scores(
        &train_u,
        &train_cells,
        &train_labels,
        &val_u,
        &val_cells,
        &val_labels,
        params,
        cfg,
        opts,
    )
}

/// Applies the calibrator to precomputed VQ probabilities and cells.
pub fn calibrate_scores(
    probs: &[Vec<f64>],
    cells: &[IndexSequence],
    params: &CalibratorParams,
) -> Result<Vec<Vec<f64>>> {
    probs
        .iter()
        .zip(cells)
        .map(|(p, s)| {
            let lp = calibrated_log_posterior(&clamped_log(p), s, params)?;
            Ok(lp.iter().map(|&l| l.exp()).collect())
        })
        .collect()
}

/// Calibrated probabilities for the given dataset rows.
pub fn predict(
    dataset: &CalibrationDataset,
    rows: &[usize],
    codebook: &Codebook,
    seg: &SegmentationConfig,
    head: &LinearHead,
    params: &CalibratorParams,
) -> Result<Vec<Vec<f64>>> {
    let (probs, cells) = vq_scores(dataset, rows, codebook, seg, head)?;
    calibrate_scores(&probs, &cells, params)
}

/// Finite-difference validation of the stage 2 gradients (A, B, log sigma^2,
/// beta) at 5 random points; used by the verification command.
pub fn gradient_self_check() -> Result<bool> {
    use crate::numerics::check_gradient;
    let csize = 4;
    let k = 3;
    let w = 2;
    let n_cw = csize * k;
    let mut rng = Rng::new(6060);
    let u = log_softmax(&[0.5, -0.8, 0.1]);
    let y = 1usize;
    let s: IndexSequence = vec![0, 2];
    let unpack = |p: &[f64]| CalibratorParams {
        a: p[..n_cw].to_vec(),
        b: p[n_cw..2 * n_cw].to_vec(),
        log_sigma2: p[2 * n_cw..2 * n_cw + w].to_vec(),
        beta: p[2 * n_cw + w..].to_vec(),
        codebook_size: csize,
        n_classes: k,
        w,
        cell_log_prior: HashMap::new(),
    };
    for _ in 0..5 {
        let point: Vec<f64> = (0..2 * n_cw + w + k).map(|_| rng.uniform(-0.6, 0.6)).collect();
        let f = |p: &[f64]| {
            let params = unpack(p);
            let mut g = Grads::zeros(&params);
            accumulate_sample(&u, y, &s, &params, &mut g).unwrap()
        };
        let g = |p: &[f64]| {
            let params = unpack(p);
            let mut grads = Grads::zeros(&params);
            accumulate_sample(&u, y, &s, &params, &mut grads).unwrap();
            let mut out = grads.a;
            out.extend(grads.b);
            out.extend(grads.log_sigma2);
            out.extend(grads.beta);
            out
        };
        if check_gradient(f, g, &point)? >= 1e-4 {
            return Ok(false);
        }
    }
    Ok(true)
}

#[derive(Debug, Serialize, Deserialize)]
struct CalibratorSidecar {
    codebook_size: usize,
    n_classes: usize,
    w: usize,
    offset: f64,
    cell_log_prior: Vec<(IndexSequence, Vec<f64>)>,
}

/// Writes calib_{a,b,sigma2,beta}.calt plus calib.json.
pub fn save_calibrator(dir: &Path, params: &CalibratorParams) -> Result<()> {
    let k = params.n_classes;
    write_tensor(
        dir.join("calib_a.calt"),
        &Tensor2D::from_f64(params.codebook_size, k, &params.a)?,
    )?;
    write_tensor(
        dir.join("calib_b.calt"),
        &Tensor2D::from_f64(params.codebook_size, k, &params.b)?,
    )?;
    write_tensor(
        dir.join("calib_sigma2.calt"),
        &Tensor2D::from_f64(params.w, 1, &params.log_sigma2)?,
    )?;
    write_tensor(
        dir.join("calib_beta.calt"),
        &Tensor2D::from_f64(k, 1, &params.beta)?,
    )?;
    let mut prior: Vec<(IndexSequence, Vec<f64>)> =
        params.cell_log_prior.iter().map(|(s, p)| (s.clone(), p.clone())).collect();
    prior.sort_by(|a, b| a.0.cmp(&b.0));
    let sidecar = CalibratorSidecar {
        codebook_size: params.codebook_size,
        n_classes: k,
        w: params.w,
        offset: identity_offset(),
        cell_log_prior: prior,
    };
    let path = dir.join("calib.json");
    let json = serde_json::to_string_pretty(&sidecar)
        .map_err(|e| Error::Data(format!("calibrator sidecar: {e}")))?;
    std::fs::write(&path, json).map_err(|e| Error::io(path, e))
}

pub fn load_calibrator(dir: &Path) -> Result<CalibratorParams> {
    let path = dir.join("calib.json");
    let raw = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let sidecar: CalibratorSidecar =
        serde_json::from_str(&raw).map_err(|e| Error::format(&path, e.to_string()))?;
    let a = read_tensor(dir.join("calib_a.calt"))?;
    let b = read_tensor(dir.join("calib_b.calt"))?;
    let sigma = read_tensor(dir.join("calib_sigma2.calt"))?;
    let beta = read_tensor(dir.join("calib_beta.calt"))?;
    if a.rows != sidecar.codebook_size
        || a.cols != sidecar.n_classes
        || b.rows != a.rows
        || b.cols != a.cols
        || sigma.rows != sidecar.w
        || beta.rows != sidecar.n_classes
    {
        return Err(Error::format(&path, "calibrator tensors disagree with sidecar"));
    }
    Ok(CalibratorParams {
        a: a.data.iter().map(|&v| v as f64).collect(),
        b: b.data.iter().map(|&v| v as f64).collect(),
        log_sigma2: sigma.data.iter().map(|&v| v as f64).collect(),
        beta: beta.data.iter().map(|&v| v as f64).collect(),
        codebook_size: sidecar.codebook_size,
        n_classes: sidecar.n_classes,
        w: sidecar.w,
        cell_log_prior: sidecar.cell_log_prior.into_iter().collect(),
    })
}
