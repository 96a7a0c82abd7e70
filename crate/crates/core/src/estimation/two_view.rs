use nalgebra::{DVector, Matrix2, Matrix3, SMatrix, SVector, SymmetricEigen, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{adaptive_iterations, draw_sample, EstimationError, RansacConfig, Score, MIN_INLIER_RATIO};
use crate::correspondence::Match2D2D;
use crate::geometry::{decompose_essential, so3_exp, CameraPose, EssentialMatrix, Point2};
use crate::lm::{self, LmOptions};

/// Two-view geometry between a source camera `i` and a target camera `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoViewResult {
    /// Maps source points to target epipolar lines.
    pub essential: EssentialMatrix,
    /// Correction to add to the target camera's `β`, global frames.
    pub beta_shift: f64,
    /// Target camera relative to the source camera, unit translation.
    pub relative_pose: CameraPose,
    pub inliers: Vec<usize>,
    pub inlier_ratio: f64,
}

/// Smallest accepted ratio of the two eigenvalues of the inlier image
/// point covariance.
pub const DEGENERACY_RATIO: f64 = 1e-2;

const SAMPLE_SIZE: usize = 8;
const GRID_STEP: f64 = 0.5;

type Mat9 = SMatrix<f64, 9, 9>;
type Vec9 = SVector<f64, 9>;

fn homog(p: &Point2) -> Vector3<f64> {
    Vector3::new(p.x, p.y, 1.0)
}

/// Target point moved by a time shift `delta` along the local image motion.
/// A shift `delta` models a target clock correction of `-delta`.
fn shifted_target(m: &Match2D2D, delta: f64) -> Point2 {
    m.target_point + m.target_velocity * delta
}

fn signed_sampson(e: &Matrix3<f64>, a: &Point2, b: &Point2) -> f64 {
    let ah = homog(a);
    let bh = homog(b);
    let ea = e * ah;
    let etb = e.transpose() * bh;
    let den = (ea.x * ea.x + ea.y * ea.y + etb.x * etb.x + etb.y * etb.y).sqrt();
    if den > 0.0 {
        bh.dot(&ea) / den
    } else {
        0.0
    }
}

fn kron_row(b: &Vector3<f64>, a: &Vector3<f64>) -> Vec9 {
    Vec9::from_fn(|r, _| b[r / 3] * a[r % 3])
}

fn null_matrix(m: &Mat9) -> Matrix3<f64> {
    let eig = SymmetricEigen::new(*m);
    let (idx, _) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .min_by(|x, y| x.1.total_cmp(y.1))
        .expect("nine eigenvalues");
    let v = eig.eigenvectors.column(idx);
    Matrix3::from_fn(|r, c| v[3 * r + c])
}

/// Normal matrix of the linear epipolar system as a quadratic in the shift:
/// `M(δ) = M0 + δ M1 + δ² M2`.
struct ShiftedSystem {
    m0: Mat9,
    m1: Mat9,
    m2: Mat9,
}

impl ShiftedSystem {
    fn new<'a>(matches: impl Iterator<Item = &'a Match2D2D>) -> Self {
        let mut s = Self {
            m0: Mat9::zeros(),
            m1: Mat9::zeros(),
            m2: Mat9::zeros(),
        };
        for m in matches {
            let a = homog(&m.source.normalized);
            let r0 = kron_row(&homog(&m.target_point), &a);
            let r1 = kron_row(&Vector3::new(m.target_velocity.x, m.target_velocity.y, 0.0), &a);
            s.m0 += r0 * r0.transpose();
            let cross = r0 * r1.transpose();
            s.m1 += cross + cross.transpose();
            s.m2 += r1 * r1.transpose();
        }
        s
    }

    fn at(&self, delta: f64) -> Mat9 {
        self.m0 + self.m1 * delta + self.m2 * (delta * delta)
    }

    /// Linear essential estimate at a fixed shift, projected to the manifold.
    fn essential(&self, delta: f64) -> Option<EssentialMatrix> {
        EssentialMatrix::from_matrix(&null_matrix(&self.at(delta))).ok()
    }
}

fn sampson_cost(e: &EssentialMatrix, delta: f64, matches: &[&Match2D2D]) -> f64 {
    matches
        .iter()
        .map(|m| signed_sampson(e.matrix(), &m.source.normalized, &shifted_target(m, delta)).powi(2))
        .sum()
}

fn shift_grid(bound: f64) -> Vec<f64> {
    let cells = (bound / GRID_STEP).floor() as i64;
    (-cells..=cells).map(|c| c as f64 * GRID_STEP).collect()
}

/// Rotations with `E = U diag(1,1,0) Vᵀ`.
fn essential_frames(e: &EssentialMatrix) -> (Matrix3<f64>, Matrix3<f64>) {
    let svd = e.matrix().svd(true, true);
    let mut u = svd.u.expect("u requested");
    let mut v = svd.v_t.expect("v requested").transpose();
    if u.determinant() < 0.0 {
        u = -u;
    }
    if v.determinant() < 0.0 {
        v = -v;
    }
    (u, v)
}

/// Essential matrix `exp(ωu) U diag(1,1,0) Vᵀ exp(ωv)ᵀ`.
pub fn essential_from_params(
    u: &Matrix3<f64>,
    v: &Matrix3<f64>,
    omega_u: &Vector3<f64>,
    omega_v: &Vector3<f64>,
) -> EssentialMatrix {
    let d = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, 0.0));
    let uu = so3_exp(omega_u) * u;
    let vv = so3_exp(omega_v) * v;
    EssentialMatrix::from_matrix_unchecked(uu * d * vv.transpose())
}

/// Minimizes squared Sampson distances over `(E, δ)`.
fn refine(e: &EssentialMatrix, delta: f64, matches: &[&Match2D2D], free_shift: bool) -> (EssentialMatrix, f64) {
    let (u, v) = essential_frames(e);
    let unpack = |x: &DVector<f64>| {
        let e = essential_from_params(
            &u,
            &v,
            &Vector3::new(x[0], x[1], x[2]),
            &Vector3::new(x[3], x[4], x[5]),
        );
        let d = if free_shift { delta + x[6] } else { delta };
        (e, d)
    };
    let f = |x: &DVector<f64>| {
        let (e, d) = unpack(x);
        DVector::from_iterator(
            matches.len(),
            matches
                .iter()
                .map(|m| signed_sampson(e.matrix(), &m.source.normalized, &shifted_target(m, d))),
        )
    };
    let n = if free_shift { 7 } else { 6 };
    let (x, _) = lm::minimize(f, DVector::zeros(n), LmOptions::default());
    unpack(&x)
}

/// Joint refinement of `E` and a drifting shift
/// `δ(t) = offset + rate (t − center)` of the target track. Returns the
/// refined `(E, offset, rate)`; `rate` is kept when `free_rate` is false.
pub fn refine_drifting_shift(
    e: &EssentialMatrix,
    offset: f64,
    matches: &[&Match2D2D],
    center: f64,
    rate: f64,
    free_rate: bool,
) -> (EssentialMatrix, f64, f64) {
    let (u, v) = essential_frames(e);
    let half_span = matches.iter().map(|m| (m.time - center).abs()).fold(1.0, f64::max);
    let unpack = |x: &DVector<f64>| {
        let e = essential_from_params(
            &u,
            &v,
            &Vector3::new(x[0], x[1], x[2]),
            &Vector3::new(x[3], x[4], x[5]),
        );
        let r = if free_rate { rate + x[7] / half_span } else { rate };
        (e, offset + x[6], r)
    };
    let f = |x: &DVector<f64>| {
        let (e, o, r) = unpack(x);
        DVector::from_iterator(
            matches.len(),
            matches.iter().map(|m| {
                let b = shifted_target(m, o + r * (m.time - center));
                signed_sampson(e.matrix(), &m.source.normalized, &b)
            }),
        )
    };
    let n = if free_rate { 8 } else { 7 };
    let (x, _) = lm::minimize(f, DVector::zeros(n), LmOptions::default());
    unpack(&x)
}

fn score(e: &EssentialMatrix, delta: f64, matches: &[Match2D2D], threshold: f64) -> Score {
    let mut s = Score {
        inliers: 0,
        error_sum: 0.0,
    };
    for m in matches {
        let d = signed_sampson(e.matrix(), &m.source.normalized, &shifted_target(m, delta)).abs();
        if d <= threshold {
            s.inliers += 1;
            s.error_sum += d;
        }
    }
    s
}

fn inliers_of(e: &EssentialMatrix, delta: f64, matches: &[Match2D2D], threshold: f64) -> Vec<usize> {
    (0..matches.len())
        .filter(|&i| {
            let m = &matches[i];
            signed_sampson(e.matrix(), &m.source.normalized, &shifted_target(m, delta)).abs() <= threshold
        })
        .collect()
}

/// Ratio of the smaller to the larger eigenvalue of the covariance of a 2D
/// point set; near zero for collinear points.
pub fn covariance_eigen_ratio(points: &[Point2]) -> f64 {
    if points.len() < 2 {
        return 0.0;
    }
    let n = points.len() as f64;
    let mean = points.iter().sum::<Point2>() / n;
    let cov = points
        .iter()
        .map(|p| (p - mean) * (p - mean).transpose())
        .sum::<Matrix2<f64>>()
        / n;
    let eig = cov.symmetric_eigenvalues();
    let (lo, hi) = (eig.min(), eig.max());
    if hi <= 0.0 {
        0.0
    } else {
        lo.max(0.0) / hi
    }
}

/// Best hypothesis from one minimal sample.
fn sample_hypothesis(sample: &[&Match2D2D], grid: &[f64], free_shift: bool) -> Option<(EssentialMatrix, f64)> {
    let system = ShiftedSystem::new(sample.iter().copied());
    let mut best: Option<(EssentialMatrix, f64, f64)> = None;
    for &delta in grid {
        let Some(e) = system.essential(delta) else {
            continue;
        };
        let cost = sampson_cost(&e, delta, sample);
        if best.as_ref().is_none_or(|b| cost < b.2) {
            best = Some((e, delta, cost));
        }
    }
    let (e, delta, _) = best?;
    let (e, delta) = refine(&e, delta, sample, free_shift);
    let bound = grid.last().copied().unwrap_or(0.0) + GRID_STEP;
    (delta.abs() <= bound).then_some((e, delta))
}

/// Robust estimate of the essential matrix and the time shift between two
/// cameras from interpolated 2D↔2D matches.
pub fn solve_two_view_sync(matches: &[Match2D2D], cfg: &RansacConfig) -> Result<TwoViewResult, EstimationError> {
    let valid: Vec<usize> = (0..matches.len())
        .filter(|&i| {
            let m = &matches[i];
            m.target_velocity.iter().all(|v| v.is_finite())
                && m.target_point.iter().all(|v| v.is_finite())
                && m.source.normalized.iter().all(|v| v.is_finite())
        })
        .collect();
    if valid.len() < SAMPLE_SIZE {
        return Err(EstimationError::InsufficientMatches {
            needed: SAMPLE_SIZE,
            got: valid.len(),
        });
    }
    let pool: Vec<Match2D2D> = valid.iter().map(|&i| matches[i]).collect();
    let n = pool.len();
    let free_shift = cfg.beta_bound > 0.0;
    let grid = shift_grid(cfg.beta_bound);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<(EssentialMatrix, f64, Score)> = None;
    let mut needed = cfg.max_iterations;
    let mut it = 0;
    while it < needed {
        it += 1;
        let idx = draw_sample(&mut rng, n, SAMPLE_SIZE);
        let sample: Vec<&Match2D2D> = idx.iter().map(|&i| &pool[i]).collect();
        let Some((e, delta)) = sample_hypothesis(&sample, &grid, free_shift) else {
            continue;
        };
        let sc = score(&e, delta, &pool, cfg.threshold);
        if best.as_ref().is_none_or(|b| sc.better_than(&b.2)) {
            needed = adaptive_iterations(cfg, sc.inliers as f64 / n as f64, SAMPLE_SIZE);
            best = Some((e, delta, sc));
        }
    }
    let (mut e, mut delta, _) = best.ok_or(EstimationError::NoConsensus { inlier_ratio: 0.0 })?;

    let mut inliers = inliers_of(&e, delta, &pool, cfg.threshold);
    for _ in 0..5 {
        if inliers.len() < SAMPLE_SIZE {
            break;
        }
        let subset: Vec<&Match2D2D> = inliers.iter().map(|&i| &pool[i]).collect();
        let (e2, d2) = refine(&e, delta, &subset, free_shift);
        if d2.abs() > cfg.beta_bound + GRID_STEP {
            break;
        }
        let next = inliers_of(&e2, d2, &pool, cfg.threshold);
        if next.len() < inliers.len() {
            break;
        }
        e = e2;
        delta = d2;
        let done = next == inliers;
        inliers = next;
        if done {
            break;
        }
    }
    let inlier_ratio = inliers.len() as f64 / matches.len() as f64;
    if inlier_ratio < MIN_INLIER_RATIO || inliers.len() < SAMPLE_SIZE {
        return Err(EstimationError::NoConsensus { inlier_ratio });
    }

    let sources: Vec<Point2> = inliers.iter().map(|&i| pool[i].source.normalized).collect();
    let targets: Vec<Point2> = inliers.iter().map(|&i| shifted_target(&pool[i], delta)).collect();
    let eigen_ratio = covariance_eigen_ratio(&sources).min(covariance_eigen_ratio(&targets));
    if eigen_ratio < cfg.min_eigen_ratio {
        return Err(EstimationError::DegenerateMotion { eigen_ratio });
    }

    let pairs: Vec<(Point2, Point2)> = sources.iter().copied().zip(targets.iter().copied()).collect();
    let (relative_pose, _) = decompose_essential(&e, &pairs)?;
    Ok(TwoViewResult {
        essential: e,
        beta_shift: -delta,
        relative_pose,
        inliers: inliers.iter().map(|&i| valid[i]).collect(),
        inlier_ratio,
    })
}
