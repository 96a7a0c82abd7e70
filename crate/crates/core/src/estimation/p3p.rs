use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{adaptive_iterations, draw_sample, EstimationError, RansacConfig, Score, MIN_INLIER_RATIO};
use crate::correspondence::Match3D2D;
use crate::geometry::{project, so3_exp, CameraPose, Point2, Point3};
use crate::lm::{self, LmOptions};

#[derive(Debug, Clone, PartialEq)]
pub struct P3pResult {
    pub pose: CameraPose,
    pub inliers: Vec<usize>,
}

/// Real roots of `Σ c[i] x^(n-i)` (highest degree first).
fn real_roots(coeffs: &[f64]) -> Vec<f64> {
    let scale = coeffs.iter().fold(0.0f64, |m, c| m.max(c.abs()));
    if scale == 0.0 {
        return Vec::new();
    }
    let lead = coeffs.iter().position(|c| c.abs() > 1e-12 * scale).unwrap_or(coeffs.len());
    let c = &coeffs[lead..];
    let n = c.len().saturating_sub(1);
    if n == 0 {
        return Vec::new();
    }
    let mut comp = DMatrix::zeros(n, n);
    for k in 0..n {
        comp[(0, k)] = -c[k + 1] / c[0];
    }
    for k in 1..n {
        comp[(k, k - 1)] = 1.0;
    }
    let eval = |x: f64| c.iter().fold((0.0, 0.0), |(p, d), &ck| (p * x + ck, d * x + p));
    comp.complex_eigenvalues()
        .iter()
        .filter(|z| z.im.abs() <= 1e-6 * (1.0 + z.re.abs()))
        .map(|z| {
            let mut x = z.re;
            for _ in 0..5 {
                let (p, d) = eval(x);
                if d == 0.0 {
                    break;
                }
                x -= p / d;
            }
            x
        })
        .collect()
}

/// Least-squares rigid motion with `dst ≈ R src + t`.
fn rigid_alignment(src: &[Vector3<f64>; 3], dst: &[Vector3<f64>; 3]) -> (Matrix3<f64>, Vector3<f64>) {
    let cs = (src[0] + src[1] + src[2]) / 3.0;
    let cd = (dst[0] + dst[1] + dst[2]) / 3.0;
    let mut h = Matrix3::zeros();
    for k in 0..3 {
        h += (src[k] - cs) * (dst[k] - cd).transpose();
    }
    let svd = h.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut d = Matrix3::identity();
    if (v_t.transpose() * u.transpose()).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = v_t.transpose() * d * u.transpose();
    (r, cd - r * cs)
}

/// Newton iterations on the three law-of-cosines equations, which the
/// quartic root only satisfies to its conditioning.
fn polish_depths(mut s: Vector3<f64>, cos: [f64; 3], d_sq: [f64; 3]) -> Vector3<f64> {
    // pairs (1,2), (0,2), (0,1) against cos_a, cos_b, cos_g
    let pairs = [(1, 2), (0, 2), (0, 1)];
    for _ in 0..5 {
        let mut f = Vector3::zeros();
        let mut jac = Matrix3::zeros();
        for (row, &(p, q)) in pairs.iter().enumerate() {
            f[row] = s[p] * s[p] + s[q] * s[q] - 2.0 * s[p] * s[q] * cos[row] - d_sq[row];
            jac[(row, p)] = 2.0 * s[p] - 2.0 * s[q] * cos[row];
            jac[(row, q)] = 2.0 * s[q] - 2.0 * s[p] * cos[row];
        }
        let Some(step) = jac.lu().solve(&f) else { break };
        let next = s - step;
        if !next.iter().all(|x| x.is_finite() && *x > 0.0) {
            break;
        }
        s = next;
    }
    s
}

/// Minimal absolute-pose solver. Returns up to four candidate poses that
/// place all three world points in front of the camera at the observed
/// bearings.
pub fn p3p(world: &[Point3; 3], image: &[Point2; 3]) -> Vec<CameraPose> {
    let j: Vec<Vector3<f64>> = image.iter().map(|p| Vector3::new(p.x, p.y, 1.0).normalize()).collect();
    let a_sq = (world[1] - world[2]).norm_squared();
    let b_sq = (world[0] - world[2]).norm_squared();
    let c_sq = (world[0] - world[1]).norm_squared();
    if a_sq == 0.0 || b_sq == 0.0 || c_sq == 0.0 {
        return Vec::new();
    }
    let cos_a = j[1].dot(&j[2]);
    let cos_b = j[0].dot(&j[2]);
    let cos_g = j[0].dot(&j[1]);
    let amc = (a_sq - c_sq) / b_sq;
    let apc = (a_sq + c_sq) / b_sq;
    let bmc = (b_sq - c_sq) / b_sq;
    let bma = (b_sq - a_sq) / b_sq;

    let a4 = (amc - 1.0).powi(2) - 4.0 * c_sq / b_sq * cos_a * cos_a;
    let a3 = 4.0
        * (amc * (1.0 - amc) * cos_b - (1.0 - apc) * cos_a * cos_g + 2.0 * c_sq / b_sq * cos_a * cos_a * cos_b);
    let a2 = 2.0
        * (amc * amc - 1.0 + 2.0 * amc * amc * cos_b * cos_b + 2.0 * bmc * cos_a * cos_a
            - 4.0 * apc * cos_a * cos_b * cos_g
            + 2.0 * bma * cos_g * cos_g);
    let a1 = 4.0
        * (-amc * (1.0 + amc) * cos_b + 2.0 * a_sq / b_sq * cos_g * cos_g * cos_b
            - (1.0 - apc) * cos_a * cos_g);
    let a0 = (1.0 + amc).powi(2) - 4.0 * a_sq / b_sq * cos_g * cos_g;

    let mut poses = Vec::new();
    for v in real_roots(&[a4, a3, a2, a1, a0]) {
        let den = 2.0 * (cos_g - v * cos_a);
        if den.abs() < 1e-14 {
            continue;
        }
        let u = ((-1.0 + amc) * v * v - 2.0 * amc * cos_b * v + 1.0 + amc) / den;
        let s1_sq = c_sq / (1.0 + u * u - 2.0 * u * cos_g);
        if !(s1_sq > 0.0) || u <= 0.0 || v <= 0.0 {
            continue;
        }
        let s = polish_depths(Vector3::new(1.0, u, v) * s1_sq.sqrt(), [cos_a, cos_b, cos_g], [a_sq, b_sq, c_sq]);
        let cam = [j[0] * s.x, j[1] * s.y, j[2] * s.z];
        let (r, t) = rigid_alignment(world, &cam);
        if let Ok(pose) = CameraPose::new(r, -r.transpose() * t) {
            poses.push(pose);
        }
    }
    poses
}

fn reprojection_error(pose: &CameraPose, m: &Match3D2D) -> f64 {
    match project(pose, &m.world_point) {
        Ok(p) => (p - m.detection.normalized).norm(),
        Err(_) => f64::INFINITY,
    }
}

fn score(pose: &CameraPose, matches: &[Match3D2D], threshold: f64) -> Score {
    let mut s = Score {
        inliers: 0,
        error_sum: 0.0,
    };
    for m in matches {
        let e = reprojection_error(pose, m);
        if e <= threshold {
            s.inliers += 1;
            s.error_sum += e;
        }
    }
    s
}

fn inliers_of(pose: &CameraPose, matches: &[Match3D2D], threshold: f64) -> Vec<usize> {
    (0..matches.len())
        .filter(|&i| reprojection_error(pose, &matches[i]) <= threshold)
        .collect()
}

/// Reprojection refinement of a pose over a set of matches.
pub(crate) fn refine_pose(pose: &CameraPose, matches: &[Match3D2D]) -> CameraPose {
    let base = *pose;
    let make = |x: &DVector<f64>| CameraPose {
        rotation: so3_exp(&Vector3::new(x[0], x[1], x[2])) * base.rotation,
        center: base.center + Vector3::new(x[3], x[4], x[5]),
    };
    let f = |x: &DVector<f64>| {
        let p = make(x);
        let mut r = DVector::zeros(2 * matches.len());
        for (k, m) in matches.iter().enumerate() {
            let c = p.to_camera(&m.world_point);
            r[2 * k] = c.x / c.z - m.detection.normalized.x;
            r[2 * k + 1] = c.y / c.z - m.detection.normalized.y;
        }
        r
    };
    let (x, _) = lm::minimize(f, DVector::zeros(6), LmOptions::default());
    make(&x)
}

/// Robust absolute pose from 3D↔2D matches.
pub fn solve_p3p_ransac(matches: &[Match3D2D], cfg: &RansacConfig) -> Result<P3pResult, EstimationError> {
    let n = matches.len();
    if n < 4 {
        return Err(EstimationError::InsufficientMatches { needed: 4, got: n });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<(CameraPose, Score)> = None;
    let mut needed = cfg.max_iterations;
    let mut it = 0;
    while it < needed {
        it += 1;
        let s = draw_sample(&mut rng, n, 3);
        let world = [matches[s[0]].world_point, matches[s[1]].world_point, matches[s[2]].world_point];
        let image = [
            matches[s[0]].detection.normalized,
            matches[s[1]].detection.normalized,
            matches[s[2]].detection.normalized,
        ];
        for pose in p3p(&world, &image) {
            let sc = score(&pose, matches, cfg.threshold);
            if best.as_ref().is_none_or(|(_, b)| sc.better_than(b)) {
                needed = adaptive_iterations(cfg, sc.inliers as f64 / n as f64, 3);
                best = Some((pose, sc));
            }
        }
    }
    let (mut pose, sc) = best.ok_or(EstimationError::NoConsensus { inlier_ratio: 0.0 })?;
    if (sc.inliers as f64) < MIN_INLIER_RATIO * n as f64 || sc.inliers < 4 {
        return Err(EstimationError::NoConsensus {
            inlier_ratio: sc.inliers as f64 / n as f64,
        });
    }
    let mut inliers = inliers_of(&pose, matches, cfg.threshold);
    for _ in 0..3 {
        let subset: Vec<Match3D2D> = inliers.iter().map(|&i| matches[i]).collect();
        let refined = refine_pose(&pose, &subset);
        let next = inliers_of(&refined, matches, cfg.threshold);
        if next.len() < inliers.len() {
            break;
        }
        pose = refined;
        let done = next == inliers;
        inliers = next;
        if done {
            break;
        }
    }
    Ok(P3pResult { pose, inliers })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::time::Detection2D;
    use nalgebra::Vector2;
    use rand::Rng;

    fn m(pose: &CameraPose, x: Point3) -> Match3D2D {
        Match3D2D {
            detection: Detection2D {
                camera_id: 0,
                frame_index: 0,
                pixel: Vector2::zeros(),
                normalized: project(pose, &x).unwrap(),
            },
            world_point: x,
            time: 0.0,
        }
    }

    #[test]
    fn roots_of_known_quartic() {
        // (x-1)(x+2)(x-3)(x-0.5)
        let mut r = real_roots(&[1.0, -2.5, -4.0, 8.5, -3.0]);
        r.sort_by(f64::total_cmp);
        for (a, b) in r.iter().zip([-2.0, 0.5, 1.0, 3.0]) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(real_roots(&[1.0, 0.0, 1.0]).len(), 0);
    }

    #[test]
    fn minimal_solver_contains_truth() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let c = Vector3::new(rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0), rng.random_range(-5.0..5.0));
            let target = Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), 0.0);
            let pose = CameraPose::look_at(c, target, Vector3::z());
            let world: [Point3; 3] = std::array::from_fn(|_| {
                target + Vector3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0))
            });
            let Ok(image) = world.iter().map(|x| project(&pose, x)).collect::<Result<Vec<_>, _>>() else {
                continue;
            };
            let sols = p3p(&world, &[image[0], image[1], image[2]]);
            let best = sols.iter().map(|p| (p.center - pose.center).norm()).fold(f64::INFINITY, f64::min);
            assert!(best < 1e-6 * (1.0 + c.norm()), "center error {best}");
        }
    }

    #[test]
    fn four_exact_matches_recover_pose() {
        let pose = CameraPose::look_at(Vector3::new(20.0, -35.0, 8.0), Vector3::new(0.0, 0.0, 2.0), Vector3::z());
        let pts = [
            Vector3::new(1.0, 2.0, 3.0),
            Vector3::new(-3.0, 1.0, 0.0),
            Vector3::new(2.0, -2.0, 1.0),
            Vector3::new(0.5, 0.5, 5.0),
        ];
        let matches: Vec<_> = pts.iter().map(|x| m(&pose, *x)).collect();
        let res = solve_p3p_ransac(&matches, &RansacConfig::default()).unwrap();
        assert!((res.pose.center - pose.center).norm() < 1e-8);
        assert_eq!(res.inliers, vec![0, 1, 2, 3]);
    }

    #[test]
    fn coplanar_points_below_camera() {
        let pose = CameraPose::look_at(Vector3::new(0.0, 0.0, 30.0), Vector3::zeros(), Vector3::y());
        let pts = [
            Vector3::new(5.0, 0.0, 0.0),
            Vector3::new(-2.5, 4.33, 0.0),
            Vector3::new(-2.5, -4.33, 0.0),
            Vector3::new(1.0, 2.0, 0.0),
            Vector3::new(-3.0, -1.0, 0.0),
        ];
        let matches: Vec<_> = pts.iter().map(|x| m(&pose, *x)).collect();
        let res = solve_p3p_ransac(&matches, &RansacConfig::default()).unwrap();
        assert!((res.pose.center - pose.center).norm() < 1e-8);
        assert_eq!(res.inliers.len(), 5);
    }

    #[test]
    fn three_matches_insufficient() {
        let pose = CameraPose::look_at(Vector3::new(0.0, 0.0, 30.0), Vector3::zeros(), Vector3::y());
        let matches: Vec<_> = [Vector3::x(), Vector3::y(), Vector3::zeros()].iter().map(|x| m(&pose, *x)).collect();
        assert_eq!(
            solve_p3p_ransac(&matches, &RansacConfig::default()),
            Err(EstimationError::InsufficientMatches { needed: 4, got: 3 })
        );
    }

    #[test]
    fn outliers_rejected_and_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pose = CameraPose::look_at(Vector3::new(60.0, 10.0, 5.0), Vector3::new(0.0, 0.0, 10.0), Vector3::z());
        let mut matches = Vec::new();
        for k in 0..200 {
            let x = Vector3::new(rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0), rng.random_range(0.0..20.0));
            let mut mm = m(&pose, x);
            mm.detection.normalized += Vector2::new(rng.random_range(-5e-4..5e-4), rng.random_range(-5e-4..5e-4));
            if k % 5 == 0 {
                mm.detection.normalized = Vector2::new(rng.random_range(-0.5..0.5), rng.random_range(-0.3..0.3));
            }
            matches.push(mm);
        }
        let cfg = RansacConfig::default();
        let a = solve_p3p_ransac(&matches, &cfg).unwrap();
        let b = solve_p3p_ransac(&matches, &cfg).unwrap();
        assert_eq!(a, b);
        assert!((a.pose.center - pose.center).norm() < 0.3);
        assert!(a.inliers.iter().all(|i| i % 5 != 0));
        assert!(a.inliers.len() >= 155);
    }
}
