//! Trajectory error metrics and cosine similarities over embedding vectors.

use crate::error::{Error, Result};
use crate::se3::Vec3;
use crate::tracks::{select_canonical_frame, TrackSet};

pub const DEFAULT_PCK_RATIO: f64 = 0.05;

fn errors(pred: &[Vec<Vec3>], gt: &TrackSet) -> Result<Vec<f64>> {
    if pred.len() != gt.num_tracks() {
        return Err(Error::ShapeMismatch(format!(
            "{} predicted tracks for {} ground-truth tracks",
            pred.len(),
            gt.num_tracks()
        )));
    }
    let mut out = Vec::new();
    for (i, p) in pred.iter().enumerate() {
        if p.len() != gt.frame_count() {
            return Err(Error::ShapeMismatch(format!(
                "predicted track {i} has {} frames, expected {}",
                p.len(),
                gt.frame_count()
            )));
        }
        for (t, x) in p.iter().enumerate() {
            if gt.visible(i, t) {
                out.push(x.distance(&gt.position(i, t)));
            }
        }
    }
    Ok(out)
}

/// Mean Euclidean error over the visible entries of `gt`.
pub fn epe(pred: &[Vec<Vec3>], gt: &TrackSet) -> Result<f64> {
    let e = errors(pred, gt)?;
    Ok(e.iter().sum::<f64>() / e.len() as f64)
}

/// Fraction of visible entries within `ratio` times the diagonal of the
/// ground truth's bounding box at its canonical frame.
pub fn pck_t(pred: &[Vec<Vec3>], gt: &TrackSet, ratio: f64) -> Result<f64> {
    if !(ratio > 0.0) {
        return Err(Error::InvalidArgument(format!("PCK ratio must be positive, got {ratio}")));
    }
    let threshold = ratio * gt.bbox_diagonal(select_canonical_frame(gt));
    let e = errors(pred, gt)?;
    Ok(e.iter().filter(|&&d| d <= threshold).count() as f64 / e.len() as f64)
}

/// Cosine similarity.
pub fn embed_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!(
            "embeddings of dimension {} and {}",
            a.len(),
            b.len()
        )));
    }
    let na = a.iter().map(|v| v * v).sum::<f64>();
    let nb = b.iter().map(|v| v * v).sum::<f64>();
    if na == 0.0 || nb == 0.0 || !na.is_finite() || !nb.is_finite() {
        return Err(Error::ZeroNorm);
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    // One square root of the product keeps a == b at exactly 1.
    Ok((dot / (na * nb).sqrt()).clamp(-1.0, 1.0))
}

/// Mean similarity between rendered and reference embeddings, frame by frame.
pub fn clip_i(rendered: &[Vec<f64>], reference: &[Vec<f64>]) -> Result<f64> {
    if rendered.len() != reference.len() || rendered.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "{} rendered and {} reference frames",
            rendered.len(),
            reference.len()
        )));
    }
    let mut sum = 0.0;
    for (a, b) in rendered.iter().zip(reference) {
        sum += embed_sim(a, b)?;
    }
    Ok(sum / rendered.len() as f64)
}

/// Mean similarity between rendered frames `t` and `t + interval`.
pub fn clip_t(rendered: &[Vec<f64>], interval: usize) -> Result<f64> {
    if interval == 0 || interval >= rendered.len() {
        return Err(Error::InvalidArgument(format!(
            "interval {interval} needs 1 <= interval < {} frames",
            rendered.len()
        )));
    }
    let pairs = rendered.len() - interval;
    let mut sum = 0.0;
    for t in 0..pairs {
        sum += embed_sim(&rendered[t], &rendered[t + interval])?;
    }
    Ok(sum / pairs as f64)
}
