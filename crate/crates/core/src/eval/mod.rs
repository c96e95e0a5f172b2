//! Outlier scoring, AUC, synthetic outlier sets and IDX ingestion.

mod idx;
mod synthetic;

pub use idx::{encode_idx, load_idx, load_idx_labels, parse_idx, IdxFile, IDX_IMAGES, IDX_LABELS};
pub use synthetic::{holdout_split, make_constant_gray, make_noise, HoldoutSplit, LabeledImages};

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::diff::Tensor;
use crate::error::{Error, Result};
use crate::model::AutoencoderModel;

/// Outlier scores (higher = more outlying) with ground-truth flags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredDataset {
    scores: Vec<f64>,
    outlier: Vec<bool>,
}

impl ScoredDataset {
    pub fn new(scores: Vec<f64>, outlier: Vec<bool>) -> Result<Self> {
        if scores.len() != outlier.len() {
            return Err(Error::invalid(format!(
                "{} scores but {} labels",
                scores.len(),
                outlier.len()
            )));
        }
        if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
            return Err(Error::NonFinite {
                op: format!("score {i}"),
            });
        }
        Ok(Self { scores, outlier })
    }

    /// Inliers first, then outliers.
    pub fn from_groups(inliers: &[f64], outliers: &[f64]) -> Result<Self> {
        let scores = inliers.iter().chain(outliers).copied().collect();
        let flags = std::iter::repeat_n(false, inliers.len())
            .chain(std::iter::repeat_n(true, outliers.len()))
            .collect();
        Self::new(scores, flags)
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn outlier_flags(&self) -> &[bool] {
        &self.outlier
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// Probability that a random outlier outscores a random inlier, ties
/// counted one half. Computed from midranks in `O(n log n)`.
pub fn auc(scored: &ScoredDataset) -> Result<f64> {
    let n_out = scored.outlier.iter().filter(|&&o| o).count();
    let n_in = scored.len() - n_out;
    if n_out == 0 || n_in == 0 {
        return Err(Error::invalid("AUC needs at least one inlier and one outlier"));
    }
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&a, &b| scored.scores[a].total_cmp(&scored.scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scored.scores[order[j + 1]] == scored.scores[order[i]] {
            j += 1;
        }
        // Ranks are 1-based; a tie block i..=j shares the mean rank.
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += midrank * order[i..=j].iter().filter(|&&k| scored.outlier[k]).count() as f64;
        i = j + 1;
    }
    let (n_in, n_out) = (n_in as f64, n_out as f64);
    Ok((rank_sum - n_out * (n_out + 1.0) / 2.0) / (n_in * n_out))
}

/// Reconstruction error of every row; ranking by it is ranking by
/// negative log-density, so no normalizer is needed.
pub fn score_dataset(model: &AutoencoderModel, inputs: &Tensor) -> Result<Vec<f64>> {
    let scores = model.recon_errors(inputs)?;
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::NonFinite {
            op: format!("score of input {i}"),
        });
    }
    Ok(scores)
}

/// `index,score,label` with label 1 for outliers.
pub fn write_scores_csv<W: Write>(scored: &ScoredDataset, mut out: W) -> Result<()> {
    let err = |e: std::io::Error| Error::Parse(format!("write failed: {e}"));
    writeln!(out, "index,score,label").map_err(err)?;
    for (i, (s, o)) in scored.scores.iter().zip(&scored.outlier).enumerate() {
        writeln!(out, "{i},{s},{}", u8::from(*o)).map_err(err)?;
    }
    Ok(())
}

/// Tiles `[N, h·w]` images in `[0, 1]` into one 8-bit PGM, `cols` per row.
pub fn write_image_sheet<W: Write>(images: &Tensor, h: usize, w: usize, cols: usize, mut out: W) -> Result<()> {
    if images.rank() != 2 || images.last_dim() != h * w || cols == 0 {
        return Err(Error::invalid(format!(
            "cannot tile {:?} as {h}x{w} images",
            images.shape()
        )));
    }
    let n = images.rows();
    let rows = n.div_ceil(cols).max(1);
    let (width, height) = (cols * w, rows * h);
    let mut px = vec![0u8; width * height];
    for (k, img) in images.iter_rows().enumerate() {
        let (r0, c0) = ((k / cols) * h, (k % cols) * w);
        for y in 0..h {
            for x in 0..w {
                let v = (img[y * w + x].clamp(0.0, 1.0) * 255.0).round() as u8;
                px[(r0 + y) * width + c0 + x] = v;
            }
        }
    }
    let err = |e: std::io::Error| Error::Parse(format!("write failed: {e}"));
    write!(out, "P5\n{width} {height}\n255\n").map_err(err)?;
    out.write_all(&px).map_err(err)
}
