//! RANSAC-wrapped solvers: two-view geometry with a time shift, absolute pose
//! from three points, and linear triangulation.

mod p3p;
mod triangulation;
mod two_view;

pub use p3p::{p3p, solve_p3p_ransac, P3pResult};
pub use triangulation::{triangulate, Observation};
pub use two_view::{
    covariance_eigen_ratio, essential_from_params, refine_drifting_shift, solve_two_view_sync, TwoViewResult,
    DEGENERACY_RATIO,
};

use rand::seq::index;
use rand::Rng;
use thiserror::Error;

use crate::geometry::GeometryError;

/// Smallest inlier fraction accepted by the RANSAC solvers.
pub const MIN_INLIER_RATIO: f64 = 0.25;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimationError {
    #[error("need at least {needed} matches, got {got}")]
    InsufficientMatches { needed: usize, got: usize },
    #[error("best model explains only {:.1}% of the matches", inlier_ratio * 100.0)]
    NoConsensus { inlier_ratio: f64 },
    #[error("image motion is nearly collinear (covariance eigenvalue ratio {eigen_ratio:e})")]
    DegenerateMotion { eigen_ratio: f64 },
    #[error("viewing rays are parallel")]
    ParallelRays,
    #[error("camera centers coincide")]
    CoincidentCenters,
    #[error("triangulated point lies behind camera {camera} (depth {depth})")]
    BehindCamera { camera: usize, depth: f64 },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RansacConfig {
    /// Inlier threshold in normalized image units.
    pub threshold: f64,
    pub confidence: f64,
    pub max_iterations: usize,
    /// Half-width of the time-shift search range, global frames.
    pub beta_bound: f64,
    /// Smallest accepted eigenvalue ratio of the inlier point covariance.
    pub min_eigen_ratio: f64,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            threshold: 3.0 / 1500.0,
            confidence: 0.999,
            max_iterations: 10_000,
            beta_bound: 100.0,
            min_eigen_ratio: DEGENERACY_RATIO,
            seed: 0,
        }
    }
}

impl RansacConfig {
    /// Threshold of `pixels` at the geometric mean of two focal lengths.
    pub fn with_pixel_threshold(mut self, pixels: f64, focal_a: f64, focal_b: f64) -> Self {
        self.threshold = pixels / (focal_a * focal_b).sqrt();
        self
    }

    pub fn is_valid(&self) -> bool {
        self.threshold > 0.0 && self.confidence > 0.0 && self.confidence < 1.0 && self.beta_bound >= 0.0
    }
}

const MIN_ITERATIONS: usize = 50;

/// Iterations needed to draw one all-inlier sample with the configured
/// confidence.
pub(crate) fn adaptive_iterations(cfg: &RansacConfig, inlier_ratio: f64, sample_size: usize) -> usize {
    let w = inlier_ratio.clamp(0.0, 1.0).powi(sample_size as i32);
    let n = if w >= 1.0 - 1e-12 {
        0.0
    } else if w <= 1e-12 {
        f64::INFINITY
    } else {
        (1.0 - cfg.confidence).ln() / (1.0 - w).ln()
    };
    let n = if n.is_finite() { n.ceil() as usize } else { cfg.max_iterations };
    n.clamp(MIN_ITERATIONS.min(cfg.max_iterations), cfg.max_iterations)
}

pub(crate) fn draw_sample<R: Rng>(rng: &mut R, n: usize, k: usize) -> Vec<usize> {
    index::sample(rng, n, k).into_vec()
}

/// RANSAC score: more inliers first, then smaller summed error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Score {
    pub inliers: usize,
    pub error_sum: f64,
}

impl Score {
    pub fn better_than(&self, other: &Score) -> bool {
        self.inliers > other.inliers || (self.inliers == other.inliers && self.error_sum < other.error_sum)
    }
}
