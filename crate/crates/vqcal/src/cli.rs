//! Command-line pipeline: dataset synthesis, fitting, evaluation, ablation
//! sweeps and the verification oracles. Every command writes `run.json` with
//! the fully resolved configuration.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::baselines::{
    apply_dirichlet, apply_temperature, fit_dirichlet, fit_temperature, DirichletParams,
    TemperatureParam,
};
use crate::calibrator::{
    load_calibrator, predict, save_calibrator, train_stage2, CalibratorParams, Stage2Options,
};
use crate::dataset::{load_dataset, save_dataset, split_sizes, CalibrationDataset, Split};
use crate::error::{Error, Result};
use crate::metrics::{compute_report, BinningConfig, KernelConfig, MetricsReport};
use crate::numerics::Rng;
use crate::quantizer::{
    init_codebook, load_codebook, save_codebook, usage_stats, SegmentationConfig, UsageStats,
};
use crate::synthetic::{make_synthetic, SyntheticSpec};
use crate::tensor::Tensor2D;
use crate::vqhead::{load_head, save_head, train_stage1, vq_scores, LinearHead, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Full pipeline: VQ head plus compositional Dirichlet calibrator.
    Vq,
    /// VQ head, no calibration.
    VqNc,
    /// Standard Dirichlet calibration on VQ-head scores.
    VqDc,
    /// Dirichlet calibration on base scores.
    Dc,
    /// Temperature scaling on base scores.
    Ts,
    /// No calibration.
    Nc,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Vq => "vq",
            Method::VqNc => "vq-nc",
            Method::VqDc => "vq-dc",
            Method::Dc => "dc",
            Method::Ts => "ts",
            Method::Nc => "nc",
        }
    }

    fn uses_quantizer(&self) -> bool {
        matches!(self, Method::Vq | Method::VqNc | Method::VqDc)
    }
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct HyperParams {
    /// Number of slots the embedding is segmented into.
    #[arg(long, default_value_t = 8)]
    pub w: usize,
    /// Codewords per slot dictionary.
    #[arg(long, default_value_t = 8)]
    pub codebook_size: usize,
    /// EMA decay for codebook updates.
    #[arg(long, default_value_t = 0.99)]
    pub decay: f64,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 1e-3)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 1024)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 10)]
    pub patience: usize,
    #[arg(long, default_value_t = 200)]
    pub max_epochs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Learn slot scales sigma^2 in stage 2 (fixed to 1 otherwise).
    #[arg(long, default_value_t = false)]
    pub learn_sigma: bool,
    /// Zero-initialize the sender codebook for an exact identity at init.
    #[arg(long, default_value_t = false)]
    pub strict_identity: bool,
    /// Add frozen Laplace-smoothed per-cell class priors ("empirical").
    #[arg(long)]
    pub cell_prior: Option<String>,
    /// Worker threads; 1 forces bitwise determinism (only 1 is implemented).
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct EvalParams {
    /// Confidence bins for the binned calibration metrics.
    #[arg(long, default_value_t = 15)]
    pub bins: usize,
    /// RBF kernel bandwidth for the local metrics.
    #[arg(long, default_value_t = 10.0)]
    pub bandwidth: f64,
    /// Quantile bins for the ESS curve.
    #[arg(long, default_value_t = 10)]
    pub ess_bins: usize,
}

#[derive(Debug, Parser)]
#[command(name = "vqcal", about = "Local multiclass calibration toolkit", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic region-miscalibration benchmark.
    Synth {
        /// JSON file describing the generator.
        #[arg(long)]
        spec: PathBuf,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a calibration method and write its artifacts.
    Fit {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        method: Method,
        #[command(flatten)]
        hp: HyperParams,
    },
    /// Evaluate fitted artifacts on a dataset split.
    Eval {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        artifacts: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Split to evaluate: train_cal, val_cal or test.
        #[arg(long, default_value = "test")]
        split: String,
        #[command(flatten)]
        ep: EvalParams,
    },
    /// Sweep w and codebook size for the full VQ pipeline; long-form CSV.
    Ablate {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated slot counts.
        #[arg(long, default_value = "4,8")]
        w_grid: String,
        /// Comma-separated codebook sizes.
        #[arg(long, default_value = "4,8")]
        codebook_grid: String,
        #[command(flatten)]
        hp: HyperParams,
        #[command(flatten)]
        ep: EvalParams,
    },
    /// Run the built-in verification oracles.
    Verify,
}

#[derive(Debug, Serialize, Deserialize)]
struct ArtifactManifest {
    method: Method,
    n_classes: usize,
    hp: HyperParams,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let json = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Data(format!("serializing {}: {e}", path.display())))?;
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&raw).map_err(|e| Error::format(path, e.to_string()))
}

fn write_run_config<T: Serialize>(dir: &Path, command: &str, config: &T) -> Result<()> {
    #[derive(Serialize)]
    struct RunRecord<'a, T> {
        command: &'a str,
        config: &'a T,
    }
    write_json(&dir.join("run.json"), &RunRecord { command, config })
}

fn validate_hp(hp: &HyperParams) -> Result<()> {
    if hp.w == 0 || hp.codebook_size == 0 || hp.batch_size == 0 || hp.patience == 0 {
        return Err(Error::Config(
            "w, codebook_size, batch_size and patience must be positive".into(),
        ));
    }
    if !(0.0 < hp.decay && hp.decay <= 1.0) {
        return Err(Error::Config(format!("decay {} outside (0, 1]", hp.decay)));
    }
    if hp.lr <= 0.0 || hp.weight_decay < 0.0 {
        return Err(Error::Config("lr must be positive, weight_decay non-negative".into()));
    }
    if hp.threads == 0 {
        return Err(Error::Config("threads must be at least 1".into()));
    }
    if let Some(p) = &hp.cell_prior {
        if p != "empirical" {
            return Err(Error::Config(format!(
                "unknown cell-prior mode '{p}' (supported: empirical)"
            )));
        }
    }
    Ok(())
}

fn train_config(hp: &HyperParams) -> TrainConfig {
    TrainConfig {
        max_epochs: hp.max_epochs,
        batch_size: hp.batch_size,
        patience: hp.patience,
        lr: hp.lr,
        weight_decay: hp.weight_decay,
        seed: hp.seed,
    }
}

pub fn cmd_synth(spec_path: &Path, out: &Path) -> Result<()> {
    let spec: SyntheticSpec = read_json(spec_path)?;
    let (dataset, _) = make_synthetic(&spec)?;
    save_dataset(out, &dataset)?;
    write_run_config(out, "synth", &spec)?;
    Ok(())
}

fn rows_of(ds: &CalibrationDataset, split: Split) -> Vec<usize> {
    ds.split_indices(split)
}

fn base_probs_rows(ds: &CalibrationDataset, rows: &[usize]) -> Vec<Vec<f64>> {
    rows.iter().map(|&i| ds.base_probs.row_f64(i)).collect()
}

fn labels_rows(ds: &CalibrationDataset, rows: &[usize]) -> Vec<usize> {
    rows.iter().map(|&i| ds.labels[i]).collect()
}

fn tensor_of_rows(t: &Tensor2D, rows: &[usize]) -> Result<Tensor2D> {
    let mut data = Vec::with_capacity(rows.len() * t.cols);
    for &r in rows {
        data.extend_from_slice(t.row(r));
    }
    Tensor2D::new(rows.len(), t.cols, data)
}

pub fn cmd_fit(dataset_dir: &Path, out: &Path, method: Method, hp: &HyperParams) -> Result<()> {
    validate_hp(hp)?;
    let ds = load_dataset(dataset_dir)?;
    let cfg = train_config(hp);
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;

    if method.uses_quantizer() {
        let seg = SegmentationConfig::new(hp.w, ds.embeddings.cols)?;
        let train_rows = rows_of(&ds, Split::TrainCal);
        if train_rows.is_empty() {
            return Err(Error::Data("dataset has no train_cal split".into()));
        }
        let train_emb = tensor_of_rows(&ds.embeddings, &train_rows)?;
        let mut rng = Rng::new(hp.seed);
        let codebook = init_codebook(&train_emb, &seg, hp.codebook_size, hp.decay, &mut rng)?;
        let head = LinearHead::zeros(ds.n_classes(), seg.m_prime);
        let (codebook, head, stage1_log) = train_stage1(&ds, &codebook, &seg, &head, &cfg)?;
        save_codebook(out, &codebook, &seg)?;
        save_head(out, &head)?;
        write_json(&out.join("stage1_log.json"), &stage1_log)?;

        match method {
            Method::Vq => {
                let opts = Stage2Options {
                    learn_sigma: hp.learn_sigma,
                    strict_identity: hp.strict_identity,
                    cell_prior_empirical: hp.cell_prior.as_deref() == Some("empirical"),
                };
                let init = CalibratorParams::init(
                    hp.codebook_size,
                    ds.n_classes(),
                    hp.w,
                    hp.strict_identity,
                    &mut rng,
                );
                let (params, stage2_log) =
                    train_stage2(&ds, &codebook, &seg, &head, &init, &cfg, &opts)?;
                save_calibrator(out, &params)?;
                write_json(&out.join("stage2_log.json"), &stage2_log)?;
            }
            Method::VqDc => {
                let train_rows = rows_of(&ds, Split::TrainCal);
                let val_rows = rows_of(&ds, Split::ValCal);
                let (tp, _) = vq_scores(&ds, &train_rows, &codebook, &seg, &head)?;
                let (vp, _) = vq_scores(&ds, &val_rows, &codebook, &seg, &head)?;
                let (dc, log) = fit_dirichlet(
                    &tp,
                    &labels_rows(&ds, &train_rows),
                    &vp,
                    &labels_rows(&ds, &val_rows),
                    1e-3,
                    &cfg,
                )?;
                write_json(&out.join("dc.json"), &dc)?;
                write_json(&out.join("dc_log.json"), &log)?;
            }
            _ => {}
        }
    } else {
        match method {
            Method::Dc => {
                let train_rows = rows_of(&ds, Split::TrainCal);
                let val_rows = rows_of(&ds, Split::ValCal);
                let (dc, log) = fit_dirichlet(
                    &base_probs_rows(&ds, &train_rows),
                    &labels_rows(&ds, &train_rows),
                    &base_probs_rows(&ds, &val_rows),
                    &labels_rows(&ds, &val_rows),
                    1e-3,
                    &cfg,
                )?;
                write_json(&out.join("dc.json"), &dc)?;
                write_json(&out.join("dc_log.json"), &log)?;
            }
            Method::Ts => {
                let train_rows = rows_of(&ds, Split::TrainCal);
                let param = fit_temperature(
                    &base_probs_rows(&ds, &train_rows),
                    &labels_rows(&ds, &train_rows),
                )?;
                write_json(&out.join("ts.json"), &param)?;
            }
            _ => {}
        }
    }
    let manifest = ArtifactManifest {
        method,
        n_classes: ds.n_classes(),
        hp: hp.clone(),
    };
    write_json(&out.join("artifact.json"), &manifest)?;
    write_run_config(out, "fit", &manifest)?;
    Ok(())
}

fn parse_split(name: &str) -> Result<Split> {
    match name {
        "train_cal" => Ok(Split::TrainCal),
        "val_cal" => Ok(Split::ValCal),
        "test" => Ok(Split::Test),
        other => Err(Error::Config(format!(
            "unknown split '{other}' (expected train_cal, val_cal or test)"
        ))),
    }
}

/// Predicted probabilities for the rows, plus usage stats when a quantizer
/// is involved.
pub fn predict_with_artifacts(
    ds: &CalibrationDataset,
    artifact_dir: &Path,
    rows: &[usize],
) -> Result<(Vec<Vec<f64>>, Method, HyperParams, Option<UsageStats>)> {
    let manifest: ArtifactManifest = read_json(&artifact_dir.join("artifact.json"))?;
    let method = manifest.method;
    let (probs, usage) = if method.uses_quantizer() {
        let (codebook, seg) = load_codebook(artifact_dir)?;
        let head = load_head(artifact_dir)?;
        let (vq_probs, cells) = vq_scores(ds, rows, &codebook, &seg, &head)?;
        let usage = usage_stats(&cells, codebook.size);
        let probs = match method {
            Method::VqNc => vq_probs,
            Method::VqDc => {
                let dc: DirichletParams = read_json(&artifact_dir.join("dc.json"))?;
                apply_dirichlet(&vq_probs, &dc)
            }
            Method::Vq => {
                let params = load_calibrator(artifact_dir)?;
                predict(ds, rows, &codebook, &seg, &head, &params)?
            }
            _ => unreachable!(),
        };
        (probs, Some(usage))
    } else {
        let base = base_probs_rows(ds, rows);
        let probs = match method {
            Method::Nc => base,
            Method::Ts => {
                let param: TemperatureParam = read_json(&artifact_dir.join("ts.json"))?;
                apply_temperature(&base, &param)
            }
            Method::Dc => {
                let dc: DirichletParams = read_json(&artifact_dir.join("dc.json"))?;
                apply_dirichlet(&base, &dc)
            }
            _ => unreachable!(),
        };
        (probs, None)
    };
    Ok((probs, method, manifest.hp, usage))
}

pub const CSV_HEADER: &str = "method,seed,w,codebook_size,lce,mlce,ecce,ece,classwise_ece,nll,acc,usage_min,usage_max,usage_std";

pub fn csv_row(
    method: Method,
    seed: u64,
    w: usize,
    codebook_size: usize,
    report: &MetricsReport,
    usage: &Option<UsageStats>,
) -> String {
    let (umin, umax, ustd) = match usage {
        Some(u) => (u.min as f64, u.max as f64, u.std),
        None => (0.0, 0.0, 0.0),
    };
    format!(
        "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
        method.as_str(),
        seed,
        w,
        codebook_size,
        report.lce,
        report.mlce,
        report.ecce,
        report.ece,
        report.classwise_ece,
        report.nll,
        report.acc,
        umin,
        umax,
        ustd
    )
}

#[derive(Debug, Serialize)]
pub struct EvalOutput {
    pub method: Method,
    pub split: String,
    pub seed: u64,
    pub w: usize,
    pub codebook_size: usize,
    pub report: MetricsReport,
    pub usage: Option<UsageStats>,
    pub split_sizes: BTreeMap<String, usize>,
}

pub fn evaluate(
    dataset_dir: &Path,
    artifact_dir: &Path,
    split_name: &str,
    ep: &EvalParams,
) -> Result<EvalOutput> {
    if ep.bins == 0 || ep.ess_bins == 0 {
        return Err(Error::Config("bins and ess-bins must be positive".into()));
    }
    if ep.bandwidth <= 0.0 {
        return Err(Error::Config(format!("bandwidth {} must be positive", ep.bandwidth)));
    }
    let split = parse_split(split_name)?;
    let ds = load_dataset(dataset_dir)?;
    let rows = rows_of(&ds, split);
    if rows.is_empty() {
        return Err(Error::Data(format!("split '{split_name}' is empty")));
    }
    let (probs, method, hp, usage) = predict_with_artifacts(&ds, artifact_dir, &rows)?;
    let labels = labels_rows(&ds, &rows);
    let embeddings: Vec<Vec<f64>> = rows.iter().map(|&i| ds.embeddings.row_f64(i)).collect();
    let bins = BinningConfig { n_bins: ep.bins };
    let kernel = KernelConfig { bandwidth: ep.bandwidth };
    let report = compute_report(&probs, &labels, &embeddings, &bins, &kernel, ep.ess_bins)?;
    let (w, codebook_size) = if method.uses_quantizer() {
        (hp.w, hp.codebook_size)
    } else {
        (0, 0)
    };
    Ok(EvalOutput {
        method,
        split: split_name.to_string(),
        seed: hp.seed,
        w,
        codebook_size,
        report,
        usage,
        split_sizes: split_sizes(&ds.split_tags),
    })
}

pub fn cmd_eval(
    dataset_dir: &Path,
    artifact_dir: &Path,
    out: &Path,
    split_name: &str,
    ep: &EvalParams,
) -> Result<()> {
    let output = evaluate(dataset_dir, artifact_dir, split_name, ep)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_json(&out.join("metrics.json"), &output)?;
    let csv = format!(
        "{}\n{}\n",
        CSV_HEADER,
        csv_row(
            output.method,
            output.seed,
            output.w,
            output.codebook_size,
            &output.report,
            &output.usage
        )
    );
    let csv_path = out.join("metrics.csv");
    std::fs::write(&csv_path, csv).map_err(|e| Error::io(csv_path, e))?;
    write_run_config(out, "eval", &(split_name, ep))?;
    Ok(())
}

fn parse_grid(raw: &str, name: &str) -> Result<Vec<usize>> {
    raw.split(',')
        .map(|tok| {
            tok.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("invalid {name} grid entry '{tok}'")))
        })
        .collect()
}

pub fn cmd_ablate(
    dataset_dir: &Path,
    out: &Path,
    w_grid: &str,
    codebook_grid: &str,
    hp: &HyperParams,
    ep: &EvalParams,
) -> Result<()> {
    let ws = parse_grid(w_grid, "w")?;
    let cs = parse_grid(codebook_grid, "codebook")?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut csv = String::from(CSV_HEADER);
    csv.push('\n');
    for &w in &ws {
        for &c in &cs {
            let mut combo_hp = hp.clone();
            combo_hp.w = w;
            combo_hp.codebook_size = c;
            let combo_dir = out.join(format!("w{w}_c{c}"));
            cmd_fit(dataset_dir, &combo_dir, Method::Vq, &combo_hp)?;
            let output = evaluate(dataset_dir, &combo_dir, "test", ep)?;
            csv.push_str(&csv_row(
                Method::Vq,
                combo_hp.seed,
                w,
                c,
                &output.report,
                &output.usage,
            ));
            csv.push('\n');
        }
    }
    let csv_path = out.join("ablation.csv");
    std::fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))?;
    write_run_config(out, "ablate", &(hp, ep, w_grid, codebook_grid))?;
    Ok(())
}

pub fn cmd_verify() -> Result<()> {
    let mut all_pass = true;
    for (name, pass) in [
        ("slot-wise quantization equals exhaustive argmin (100 instances)", verify_quantizer()),
        ("log-linear posterior equals numeric Dirichlet Bayes (100 points)", verify_posterior()),
        ("analytic gradients match finite differences (< 1e-4)", verify_gradients()),
    ] {
        let pass = pass?;
        println!("{}: {}", if pass { "PASS" } else { "FAIL" }, name);
        all_pass &= pass;
    }
    if all_pass {
        Ok(())
    } else {
        Err(Error::Numeric("verification suite failed".into()))
    }
}

fn verify_quantizer() -> Result<bool> {
    use crate::quantizer::{quantize, Codebook};
    let mut rng = Rng::new(20240229);
    for trial in 0..100 {
        let w = 1 + rng.next_below(3);
        let size = 2 + rng.next_below(4);
        let d = 1 + rng.next_below(3);
        let cfg = SegmentationConfig::new(w, w * d)?;
        let codewords: Vec<f64> = (0..size * d).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let cb = Codebook {
            size,
            d,
            decay: 0.99,
            ema_cluster_size: vec![1.0; size],
            ema_cluster_sum: codewords.clone(),
            codewords,
        };
        let z: Vec<f64> = (0..w * d).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let (fast, _) = quantize(&z, &cb, &cfg)?;

        // exhaustive scan over all size^w concatenations
        let mut best = vec![0usize; w];
        let mut best_dist = f64::INFINITY;
        let total = size.pow(w as u32);
        for code in 0..total {
            let mut seq = Vec::with_capacity(w);
            let mut rem = code;
            for _ in 0..w {
                seq.push(rem % size);
                rem /= size;
            }
            seq.reverse();
            let mut dist = 0.0;
            for (slot, &k) in seq.iter().enumerate() {
                for j in 0..d {
                    let diff = z[slot * d + j] - cb.codeword(k)[j];
                    dist += diff * diff;
                }
            }
            if dist < best_dist {
                best_dist = dist;
                best = seq;
            }
        }
        if fast != best {
            eprintln!("quantizer mismatch on trial {trial}: {fast:?} vs {best:?}");
            return Ok(false);
        }
    }
    Ok(true)
}

fn verify_posterior() -> Result<bool> {
    use crate::calibrator::log_posterior_with_map;
    use statrs::function::gamma::ln_gamma;
    let mut rng = Rng::new(7151);
    let k = 3;
    let alphas: Vec<Vec<f64>> = (0..k)
        .map(|_| (0..k).map(|_| rng.uniform(0.5, 5.0)).collect())
        .collect();
    let pis: Vec<f64> = {
        let raw: Vec<f64> = (0..k).map(|_| rng.uniform(0.1, 1.0)).collect();
        let s: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / s).collect()
    };
    let log_beta = |alpha: &[f64]| -> f64 {
        alpha.iter().map(|&x| ln_gamma(x)).sum::<f64>() - ln_gamma(alpha.iter().sum())
    };
    let mut m = vec![0.0f64; k * k];
    let mut bias = vec![0.0f64; k];
    for j in 0..k {
        for i in 0..k {
            m[j * k + i] = alphas[j][i] - 1.0;
        }
        bias[j] = pis[j].ln() - log_beta(&alphas[j]);
    }
    for _ in 0..100 {
        let raw: Vec<f64> = (0..k).map(|_| -rng.next_f64().max(1e-12).ln()).collect();
        let s: f64 = raw.iter().sum();
        let p: Vec<f64> = raw.into_iter().map(|v| v / s).collect();
        let log_p: Vec<f64> = p.iter().map(|&v| v.ln()).collect();
        let mut dens = vec![0.0f64; k];
        for j in 0..k {
            let log_pdf: f64 = p
                .iter()
                .zip(&alphas[j])
                .map(|(&pi, &aj)| (aj - 1.0) * pi.ln())
                .sum::<f64>()
                - log_beta(&alphas[j]);
            dens[j] = pis[j] * log_pdf.exp();
        }
        let total: f64 = dens.iter().sum();
        let lp = log_posterior_with_map(&log_p, &m, &bias);
        for j in 0..k {
            if (lp[j].exp() - dens[j] / total).abs() > 1e-6 {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

fn verify_gradients() -> Result<bool> {
    use crate::numerics::{check_gradient, cross_entropy, log_softmax};
    let mut rng = Rng::new(99);
    // linear head CE gradient at 5 random points
    let q = [0.4, -0.9, 1.3];
    let (k, mdim) = (3usize, 3usize);
    for _ in 0..5 {
        let point: Vec<f64> = (0..k * mdim + k).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let forward = |p: &[f64]| -> Vec<f64> {
            let logits: Vec<f64> = (0..k)
                .map(|c| {
                    p[k * mdim + c]
                        + q.iter()
                            .zip(&p[c * mdim..(c + 1) * mdim])
                            .map(|(a, b)| a * b)
                            .sum::<f64>()
                })
                .collect();
            log_softmax(&logits)
        };
        let f = |p: &[f64]| cross_entropy(&[forward(p)], &[1]).unwrap();
        let g = |p: &[f64]| {
            let lp = forward(p);
            let mut out = vec![0.0; k * mdim + k];
            for c in 0..k {
                let delta = lp[c].exp() - if c == 1 { 1.0 } else { 0.0 };
                for j in 0..mdim {
                    out[c * mdim + j] = delta * q[j];
                }
                out[k * mdim + c] = delta;
            }
            out
        };
        if check_gradient(f, g, &point)? >= 1e-4 {
            return Ok(false);
        }
    }
    Ok(crate::calibrator::gradient_self_check()? && crate::baselines::gradient_self_check()?)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { spec, out } => cmd_synth(&spec, &out),
        Command::Fit {
            dataset,
            out,
            method,
            hp,
        } => cmd_fit(&dataset, &out, method, &hp),
        Command::Eval {
            dataset,
            artifacts,
            out,
            split,
            ep,
        } => cmd_eval(&dataset, &artifacts, &out, &split, &ep),
        Command::Ablate {
            dataset,
            out,
            w_grid,
            codebook_grid,
            hp,
            ep,
        } => cmd_ablate(&dataset, &out, &w_grid, &codebook_grid, &hp, &ep),
        Command::Verify => cmd_verify(),
    }
}
