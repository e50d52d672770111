//! Calibration datasets: aligned embeddings, base probabilities and labels
//! with named splits, loaded from a directory of `CALT` files plus
//! `splits.json`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{read_labels, read_tensor, write_labels, write_tensor, Tensor2D};

pub const SIMPLEX_TOL: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    TrainCal,
    ValCal,
    Test,
}

#[derive(Debug, Clone)]
pub struct CalibrationDataset {
    pub embeddings: Tensor2D,
    pub base_probs: Tensor2D,
    pub labels: Vec<usize>,
    pub split_tags: Vec<Split>,
}

impl CalibrationDataset {
    pub fn new(
        embeddings: Tensor2D,
        base_probs: Tensor2D,
        labels: Vec<usize>,
        split_tags: Vec<Split>,
    ) -> Result<Self> {
        if embeddings.rows != base_probs.rows
            || embeddings.rows != labels.len()
            || embeddings.rows != split_tags.len()
        {
            return Err(Error::Data(format!(
                "row mismatch: {} embeddings, {} probs, {} labels, {} tags",
                embeddings.rows,
                base_probs.rows,
                labels.len(),
                split_tags.len()
            )));
        }
        for i in 0..base_probs.rows {
            let row = base_probs.row(i);
            let mut sum = 0.0f64;
            for &p in row {
                if p < 0.0 {
                    return Err(Error::Data(format!("negative probability in row {i}")));
                }
                sum += p as f64;
            }
            if (sum - 1.0).abs() > SIMPLEX_TOL {
                return Err(Error::Data(format!(
                    "probability row {i} sums to {sum}, outside 1 +/- {SIMPLEX_TOL}"
                )));
            }
        }
        for (i, &y) in labels.iter().enumerate() {
            if y >= base_probs.cols {
                return Err(Error::Data(format!(
                    "label {y} at row {i} out of range for {} classes",
                    base_probs.cols
                )));
            }
        }
        Ok(CalibrationDataset {
            embeddings,
            base_probs,
            labels,
            split_tags,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.base_probs.cols
    }

    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.split_tags[i] == split).collect()
    }
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct SplitsFile {
    #[serde(default)]
    train_cal: Vec<usize>,
    #[serde(default)]
    val_cal: Vec<usize>,
    #[serde(default)]
    test: Vec<usize>,
}

/// Loads `embeddings.calt`, `probs.calt`, `labels.calt` and `splits.json`
/// from a directory. Rows not named in splits.json default to test.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<CalibrationDataset> {
    let dir = dir.as_ref();
    let embeddings = read_tensor(dir.join("embeddings.calt"))?;
    let base_probs = read_tensor(dir.join("probs.calt"))?;
    let labels = read_labels(dir.join("labels.calt"))?;
    let n = embeddings.rows;
    let mut tags = vec![Split::Test; n];
    let splits_path = dir.join("splits.json");
    if splits_path.exists() {
        let raw = std::fs::read_to_string(&splits_path).map_err(|e| Error::io(&splits_path, e))?;
        let splits: SplitsFile =
            serde_json::from_str(&raw).map_err(|e| Error::format(&splits_path, e.to_string()))?;
        let mut seen = vec![false; n];
        for (name, rows, tag) in [
            ("train_cal", &splits.train_cal, Split::TrainCal),
            ("val_cal", &splits.val_cal, Split::ValCal),
            ("test", &splits.test, Split::Test),
        ] {
            for &r in rows {
                if r >= n {
                    return Err(Error::format(
                        &splits_path,
                        format!("{name} row index {r} out of range for {n} rows"),
                    ));
                }
                if seen[r] {
                    return Err(Error::format(
                        &splits_path,
                        format!("row {r} assigned to more than one split"),
                    ));
                }
                seen[r] = true;
                tags[r] = tag;
            }
        }
    }
    CalibrationDataset::new(embeddings, base_probs, labels, tags)
}

/// Writes a dataset directory in the on-disk layout consumed by load_dataset.
pub fn save_dataset(dir: impl AsRef<Path>, dataset: &CalibrationDataset) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_tensor(dir.join("embeddings.calt"), &dataset.embeddings)?;
    write_tensor(dir.join("probs.calt"), &dataset.base_probs)?;
    write_labels(dir.join("labels.calt"), &dataset.labels)?;
    let mut splits = SplitsFile::default();
    for (i, tag) in dataset.split_tags.iter().enumerate() {
        match tag {
            Split::TrainCal => splits.train_cal.push(i),
            Split::ValCal => splits.val_cal.push(i),
            Split::Test => splits.test.push(i),
        }
    }
    let path = dir.join("splits.json");
    let json = serde_json::to_string(&splits).map_err(|e| Error::Data(format!("splits: {e}")))?;
    std::fs::write(&path, json).map_err(|e| Error::io(path, e))
}

/// Default 80/10/10 train_cal/val_cal/test partition over row order.
pub fn default_split_tags(n: usize) -> Vec<Split> {
    let train_end = n * 8 / 10;
    let val_end = n * 9 / 10;
    (0..n)
        .map(|i| {
            if i < train_end {
                Split::TrainCal
            } else if i < val_end {
                Split::ValCal
            } else {
                Split::Test
            }
        })
        .collect()
}

/// Ordered map of split sizes, used in run logs.
pub fn split_sizes(tags: &[Split]) -> BTreeMap<String, usize> {
    let mut m = BTreeMap::new();
    for t in tags {
        let key = match t {
            Split::TrainCal => "train_cal",
            Split::ValCal => "val_cal",
            Split::Test => "test",
        };
        *m.entry(key.to_string()).or_insert(0) += 1;
    }
    m
}
