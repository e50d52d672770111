//! Segmentation of embeddings into slots, the shared codebook with
//! nearest-neighbor assignment, and the EMA codebook update.
//!
//! An embedding is split into `w` contiguous slots of dimension `d`; each
//! slot is assigned to its nearest codeword and the resulting index sequence
//! identifies a Voronoi cell of the flattened space.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Rng;
use crate::tensor::{read_tensor, write_tensor, Tensor2D};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SegmentationConfig {
    /// Number of slots.
    pub w: usize,
    /// Slot dimension.
    pub d: usize,
    /// Embedding dimension, must equal w * d.
    pub m_prime: usize,
}

impl SegmentationConfig {
    pub fn new(w: usize, m_prime: usize) -> Result<Self> {
        if w == 0 || m_prime == 0 || m_prime % w != 0 {
            return Err(Error::Config(format!(
                "embedding dimension {m_prime} is not divisible into {w} slots"
            )));
        }
        Ok(SegmentationConfig {
            w,
            d: m_prime / w,
            m_prime,
        })
    }
}

/// Codebook with EMA accumulators. Codeword k always equals
/// ema_cluster_sum[k] / max(ema_cluster_size[k], 1e-5).
#[derive(Debug, Clone)]
pub struct Codebook {
    pub size: usize,
    pub d: usize,
    pub decay: f64,
    pub codewords: Vec<f64>,
    pub ema_cluster_size: Vec<f64>,
    pub ema_cluster_sum: Vec<f64>,
}

const EMA_EPS: f64 = 1e-5;

impl Codebook {
    pub fn codeword(&self, k: usize) -> &[f64] {
        &self.codewords[k * self.d..(k + 1) * self.d]
    }

    fn refresh_codewords(&mut self) {
        for k in 0..self.size {
            let denom = self.ema_cluster_size[k].max(EMA_EPS);
            for j in 0..self.d {
                self.codewords[k * self.d + j] = self.ema_cluster_sum[k * self.d + j] / denom;
            }
        }
    }
}

/// A per-row sequence of w codeword indices identifying a Voronoi cell.
pub type IndexSequence = Vec<usize>;

/// Splits an embedding into w contiguous slots of dimension d.
pub fn segment<'a>(z: &'a [f64], cfg: &SegmentationConfig) -> Result<Vec<&'a [f64]>> {
    if z.len() != cfg.m_prime {
        return Err(Error::Shape(format!(
            "embedding length {} does not match configured {}",
            z.len(),
            cfg.m_prime
        )));
    }
    Ok((0..cfg.w).map(|i| &z[i * cfg.d..(i + 1) * cfg.d]).collect())
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        let diff = x - y;
        acc += diff * diff;
    }
    acc
}

/// Nearest codeword per slot; ties broken by lowest index.
pub fn assign(slots: &[&[f64]], codebook: &Codebook) -> Result<IndexSequence> {
    if codebook.size == 0 {
        return Err(Error::Config("empty codebook".into()));
    }
    let mut indices = Vec::with_capacity(slots.len());
    for slot in slots {
        if slot.len() != codebook.d {
            return Err(Error::Shape(format!(
                "slot dimension {} vs codebook dimension {}",
                slot.len(),
                codebook.d
            )));
        }
        let mut best = 0usize;
        let mut best_dist = f64::INFINITY;
        for k in 0..codebook.size {
            let dist = squared_distance(slot, codebook.codeword(k));
            if dist < best_dist {
                best_dist = dist;
                best = k;
            }
        }
        indices.push(best);
    }
    Ok(indices)
}

/// Quantizes an embedding: index sequence plus the flattened concatenation of
/// selected codewords (the global Euclidean minimizer over all cells).
pub fn quantize(
    z: &[f64],
    codebook: &Codebook,
    cfg: &SegmentationConfig,
) -> Result<(IndexSequence, Vec<f64>)> {
    let slots = segment(z, cfg)?;
    let indices = assign(&slots, codebook)?;
    let mut q = Vec::with_capacity(cfg.m_prime);
    for &k in &indices {
        q.extend_from_slice(codebook.codeword(k));
    }
    Ok((indices, q))
}

/// EMA update over a batch of slot vectors and their assignments:
/// size_k <- g*size_k + (1-g)*count_k, sum_k likewise, then codewords are
/// refreshed to sum / max(size, 1e-5).
pub fn ema_update(codebook: &mut Codebook, slots_batch: &[&[f64]], assignments: &[usize]) -> Result<()> {
    if slots_batch.len() != assignments.len() {
        return Err(Error::Shape(format!(
            "{} slots vs {} assignments",
            slots_batch.len(),
            assignments.len()
        )));
    }
    let d = codebook.d;
    let mut counts = vec![0.0f64; codebook.size];
    let mut sums = vec![0.0f64; codebook.size * d];
    for (slot, &k) in slots_batch.iter().zip(assignments) {
        if k >= codebook.size {
            return Err(Error::Data(format!("assignment {k} out of range")));
        }
        if slot.len() != d {
            return Err(Error::Shape(format!("slot dimension {} vs {}", slot.len(), d)));
        }
        counts[k] += 1.0;
        for j in 0..d {
            sums[k * d + j] += slot[j];
        }
    }
    let g = codebook.decay;
    for k in 0..codebook.size {
        codebook.ema_cluster_size[k] = g * codebook.ema_cluster_size[k] + (1.0 - g) * counts[k];
        for j in 0..d {
            codebook.ema_cluster_sum[k * d + j] =
                g * codebook.ema_cluster_sum[k * d + j] + (1.0 - g) * sums[k * d + j];
        }
    }
    codebook.refresh_codewords();
    Ok(())
}

/// Initializes the codebook with `size` distinct slot vectors sampled without
/// replacement from the segmented embeddings. Accumulators are seeded so the
/// EMA invariant holds from step zero (size = 1, sum = codeword).
pub fn init_codebook(
    embeddings: &Tensor2D,
    cfg: &SegmentationConfig,
    size: usize,
    decay: f64,
    rng: &mut Rng,
) -> Result<Codebook> {
    if embeddings.cols != cfg.m_prime {
        return Err(Error::Shape(format!(
            "embedding dim {} vs configured {}",
            embeddings.cols, cfg.m_prime
        )));
    }
    let n_slots = embeddings.rows * cfg.w;
    if n_slots < size {
        return Err(Error::Config(format!(
            "need at least {size} slot vectors to initialize, have {n_slots}"
        )));
    }
    if !(0.0 < decay && decay <= 1.0) {
        return Err(Error::Config(format!("EMA decay {decay} outside (0, 1]")));
    }
    let picks = rng.sample_without_replacement(n_slots, size);
    let mut codewords = Vec::with_capacity(size * cfg.d);
    for &p in &picks {
        let row = p / cfg.w;
        let slot = p % cfg.w;
        let z = embeddings.row(row);
        for j in 0..cfg.d {
            codewords.push(z[slot * cfg.d + j] as f64);
        }
    }
    Ok(Codebook {
        size,
        d: cfg.d,
        decay,
        ema_cluster_size: vec![1.0; size],
        ema_cluster_sum: codewords.clone(),
        codewords,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UsageStats {
    pub min: usize,
    pub max: usize,
    pub std: f64,
    pub total: usize,
}

/// Per-codeword assignment counts over a dataset's index sequences.
pub fn usage_stats(assignments: &[IndexSequence], codebook_size: usize) -> UsageStats {
    let mut counts = vec![0usize; codebook_size];
    let mut total = 0usize;
    for seq in assignments {
        for &k in seq {
            counts[k] += 1;
            total += 1;
        }
    }
    let mean = total as f64 / codebook_size.max(1) as f64;
    let var = counts
        .iter()
        .map(|&c| (c as f64 - mean) * (c as f64 - mean))
        .sum::<f64>()
        / codebook_size.max(1) as f64;
    UsageStats {
        min: counts.iter().copied().min().unwrap_or(0),
        max: counts.iter().copied().max().unwrap_or(0),
        std: var.sqrt(),
        total,
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CodebookSidecar {
    w: usize,
    d: usize,
    size: usize,
    decay: f64,
}

/// Writes `<stem>.calt` (codewords) and `<stem>.json` (w, d, size, decay).
pub fn save_codebook(dir: &Path, codebook: &Codebook, cfg: &SegmentationConfig) -> Result<()> {
    let tensor = Tensor2D::from_f64(codebook.size, codebook.d, &codebook.codewords)?;
    write_tensor(dir.join("codebook.calt"), &tensor)?;
    let sidecar = CodebookSidecar {
        w: cfg.w,
        d: codebook.d,
        size: codebook.size,
        decay: codebook.decay,
    };
    let path = dir.join("codebook.json");
    let json = serde_json::to_string_pretty(&sidecar)
        .map_err(|e| Error::Data(format!("codebook sidecar: {e}")))?;
    std::fs::write(&path, json).map_err(|e| Error::io(path, e))
}

pub fn load_codebook(dir: &Path) -> Result<(Codebook, SegmentationConfig)> {
    let path = dir.join("codebook.json");
    let raw = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let sidecar: CodebookSidecar =
        serde_json::from_str(&raw).map_err(|e| Error::format(&path, e.to_string()))?;
    let tensor = read_tensor(dir.join("codebook.calt"))?;
    if tensor.rows != sidecar.size || tensor.cols != sidecar.d {
        return Err(Error::format(
            &path,
            format!(
                "codebook tensor is {}x{}, sidecar says {}x{}",
                tensor.rows, tensor.cols, sidecar.size, sidecar.d
            ),
        ));
    }
    let codewords: Vec<f64> = tensor.data.iter().map(|&v| v as f64).collect();
    let codebook = Codebook {
        size: sidecar.size,
        d: sidecar.d,
        decay: sidecar.decay,
        ema_cluster_size: vec![1.0; sidecar.size],
        ema_cluster_sum: codewords.clone(),
        codewords,
    };
    let cfg = SegmentationConfig::new(sidecar.w, sidecar.w * sidecar.d)?;
    Ok((codebook, cfg))
}
