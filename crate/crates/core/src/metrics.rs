//! Retrieval and answer-accuracy metrics, and their CSV export.

use std::fs::{File, OpenOptions};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{contract_err, Error, Result};

/// One row of the metrics log. Missing metrics serialize as empty fields.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub split: String,
    pub task: String,
    pub loss: Option<f64>,
    pub r1: Option<f64>,
    pub r5: Option<f64>,
    pub r10: Option<f64>,
    pub mdr: Option<f64>,
    pub rmean: Option<f64>,
    pub acc: Option<f64>,
}

pub const CSV_HEADER: &str = "step,split,task,loss,r1,r5,r10,mdr,rmean,acc";

/// 1-based rank of `truth` among `scores` in descending order; equal scores
/// rank the lower gallery index first.
pub fn rank_of(scores: &[f64], truth: usize) -> usize {
    let s = scores[truth];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(j, &x)| x > s || (x == s && j < truth))
        .count()
}

/// Recall@{1,5,10} (percent), median rank and mean recall for a row-major
/// `[queries × gallery]` score matrix where query `i`'s match is `truth[i]`.
pub fn retrieval_metrics(scores: &[f64], gallery: usize, truth: &[usize]) -> Result<MetricsRecord> {
    const KS: [usize; 3] = [1, 5, 10];
    if gallery < KS[2] {
        return contract_err(format!("R@10 needs a gallery of at least 10 items, got {gallery}"));
    }
    let q = truth.len();
    if q == 0 || scores.len() != q * gallery {
        return contract_err(format!(
            "score matrix of {} entries does not match {q} queries × {gallery} items",
            scores.len()
        ));
    }
    let mut ranks = Vec::with_capacity(q);
    for (i, &t) in truth.iter().enumerate() {
        if t >= gallery {
            return contract_err(format!("ground truth {t} outside gallery of {gallery}"));
        }
        ranks.push(rank_of(&scores[i * gallery..(i + 1) * gallery], t));
    }
    let recall = |k: usize| 100.0 * ranks.iter().filter(|&&r| r <= k).count() as f64 / q as f64;
    let (r1, r5, r10) = (recall(KS[0]), recall(KS[1]), recall(KS[2]));
    ranks.sort_unstable();
    let mdr = if q % 2 == 1 {
        ranks[q / 2] as f64
    } else {
        (ranks[q / 2 - 1] + ranks[q / 2]) as f64 / 2.0
    };
    Ok(MetricsRecord {
        r1: Some(r1),
        r5: Some(r5),
        r10: Some(r10),
        mdr: Some(mdr),
        rmean: Some((r1 + r5 + r10) / 3.0),
        ..MetricsRecord::default()
    })
}

/// Exact-match accuracy in percent.
pub fn vqa_accuracy(pred: &[Vec<usize>], gold: &[Vec<usize>]) -> Result<f64> {
    if pred.len() != gold.len() {
        return contract_err(format!("{} predictions for {} answers", pred.len(), gold.len()));
    }
    if gold.is_empty() {
        return Ok(0.0);
    }
    let hits = pred.iter().zip(gold).filter(|(p, g)| p == g).count();
    Ok(100.0 * hits as f64 / gold.len() as f64)
}

/// Appends records to a CSV file, writing the header when the file is new
/// or empty.
pub fn append_csv(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
    for r in records {
        w.serialize(r).map_err(|e| Error::io(path, e.into()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_csv(path: &Path) -> Result<Vec<MetricsRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    csv::Reader::from_reader(file)
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::io(path, e.into()))
}
