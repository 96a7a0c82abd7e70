//! Trajectory accuracy after similarity alignment.

use nalgebra::{Matrix3, Vector3};
use serde::Serialize;
use thiserror::Error;

use crate::spline::TimedPoint;

/// Samples closer in time than this are paired.
pub const TIME_MATCH_TOLERANCE: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("only {0} time-matched samples; need at least 3")]
    InsufficientOverlap(usize),
    #[error("matched samples are collinear")]
    CollinearSamples,
}

/// `x ↦ s R x + t`
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Similarity {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Similarity {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.scale * self.rotation * x + self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            scale: 1.0 / self.scale,
            rotation: rt,
            translation: -(rt * self.translation) / self.scale,
        }
    }
}

/// Least-squares similarity mapping `src` onto `dst` (Umeyama).
pub fn umeyama(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Result<Similarity, EvalError> {
    let n = src.len().min(dst.len());
    if n < 3 {
        return Err(EvalError::InsufficientOverlap(n));
    }
    let nf = n as f64;
    let ms = src[..n].iter().sum::<Vector3<f64>>() / nf;
    let md = dst[..n].iter().sum::<Vector3<f64>>() / nf;
    let mut cov = Matrix3::zeros();
    let mut var_s = 0.0;
    let mut scatter_d = Matrix3::zeros();
    for (s, d) in src[..n].iter().zip(&dst[..n]) {
        let (a, b) = (s - ms, d - md);
        cov += b * a.transpose();
        var_s += a.norm_squared();
        scatter_d += b * b.transpose();
    }
    cov /= nf;
    var_s /= nf;
    for scatter in [scatter_d, cov * cov.transpose()] {
        let eig = scatter.symmetric_eigenvalues();
        let mut e: Vec<f64> = eig.iter().copied().collect();
        e.sort_by(|a, b| b.total_cmp(a));
        if !(e[1] > 1e-12 * e[0].max(f64::MIN_POSITIVE)) {
            return Err(EvalError::CollinearSamples);
        }
    }
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.expect("u"), svd.v_t.expect("v"));
    let mut d = Matrix3::identity();
    if u.determinant() * v_t.determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let rotation = u * d * v_t;
    let scale = (svd.singular_values.component_mul(&d.diagonal())).sum() / var_s;
    Ok(Similarity {
        scale,
        rotation,
        translation: md - scale * rotation * ms,
    })
}

/// Pairs samples of two time-sorted trajectories whose timestamps differ by
/// at most [`TIME_MATCH_TOLERANCE`], taking the nearest reference sample.
pub fn match_by_time(est: &[TimedPoint], reference: &[TimedPoint]) -> Vec<(f64, Vector3<f64>, Vector3<f64>)> {
    let mut out = Vec::new();
    for (t, x) in est {
        let idx = reference.partition_point(|(r, _)| r < t);
        let nearest = [idx.checked_sub(1), Some(idx)]
            .into_iter()
            .flatten()
            .filter(|&i| i < reference.len())
            .min_by(|&a, &b| (reference[a].0 - t).abs().total_cmp(&(reference[b].0 - t).abs()));
        if let Some(i) = nearest {
            if (reference[i].0 - t).abs() <= TIME_MATCH_TOLERANCE {
                out.push((*t, *x, reference[i].1));
            }
        }
    }
    out
}

/// Similarity taking the estimate onto the reference.
pub fn align_similarity(est: &[TimedPoint], reference: &[TimedPoint]) -> Result<Similarity, EvalError> {
    let pairs = match_by_time(est, reference);
    let src: Vec<_> = pairs.iter().map(|p| p.1).collect();
    let dst: Vec<_> = pairs.iter().map(|p| p.2).collect();
    umeyama(&src, &dst)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrorReport {
    pub mean: f64,
    pub rmse: f64,
    pub median: f64,
    /// Percentage of samples farther than three times the RMSE.
    pub outlier_pct: f64,
    pub samples: usize,
    #[serde(skip)]
    pub distances: Vec<f64>,
    #[serde(skip)]
    pub similarity: Option<Similarity>,
}

/// Distance statistics of already paired samples.
pub fn error_stats(aligned_est: &[Vector3<f64>], reference: &[Vector3<f64>]) -> ErrorReport {
    let distances: Vec<f64> = aligned_est.iter().zip(reference).map(|(a, b)| (a - b).norm()).collect();
    let n = distances.len();
    if n == 0 {
        return ErrorReport {
            mean: 0.0,
            rmse: 0.0,
            median: 0.0,
            outlier_pct: 0.0,
            samples: 0,
            distances,
            similarity: None,
        };
    }
    let nf = n as f64;
    let mean = distances.iter().sum::<f64>() / nf;
    let rmse = (distances.iter().map(|d| d * d).sum::<f64>() / nf).sqrt();
    let mut sorted = distances.clone();
    sorted.sort_by(f64::total_cmp);
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    let outliers = distances.iter().filter(|&&d| d > 3.0 * rmse).count();
    ErrorReport {
        mean,
        rmse,
        median,
        outlier_pct: 100.0 * outliers as f64 / nf,
        samples: n,
        distances,
        similarity: None,
    }
}

/// Time-matches, optionally aligns, and scores an estimated trajectory.
pub fn evaluate_trajectory(est: &[TimedPoint], reference: &[TimedPoint], align: bool) -> Result<ErrorReport, EvalError> {
    let pairs = match_by_time(est, reference);
    if pairs.is_empty() {
        return Err(EvalError::InsufficientOverlap(0));
    }
    let src: Vec<_> = pairs.iter().map(|p| p.1).collect();
    let dst: Vec<_> = pairs.iter().map(|p| p.2).collect();
    let sim = if align { Some(umeyama(&src, &dst)?) } else { None };
    let moved: Vec<_> = match &sim {
        Some(s) => src.iter().map(|x| s.apply(x)).collect(),
        None => src,
    };
    let mut report = error_stats(&moved, &dst);
    report.similarity = sim;
    Ok(report)
}
