//! Calibrated pinhole geometry: projection, pixel normalization, essential
//! matrices and relative-pose extraction.
//!
//! Everything downstream of ingestion works in normalized image coordinates,
//! i.e. after the intrinsics and the radial distortion have been removed. A
//! camera maps a world point `X` to `μ(R (X - C))` with `μ(x, y, z) = (x/z, y/z)`.

use nalgebra::{Matrix3, Matrix3x2, Matrix3x4, Rotation3, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// A point in normalized image coordinates.
pub type Point2 = Vector2<f64>;
/// A point in world coordinates.
pub type Point3 = Vector3<f64>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point lies behind the camera (depth {depth})")]
    CheiralityViolation { depth: f64 },
    #[error("radial distortion inversion did not converge for pixel ({u}, {v})")]
    DistortionDivergence { u: f64, v: f64 },
    #[error("no essential-matrix decomposition places a majority of points in front of both cameras")]
    DegenerateEssential,
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("matrix is not a proper rotation (orthonormality error {0:e})")]
    InvalidRotation(f64),
    #[error("matrix has rank < 2 and cannot be projected to an essential matrix")]
    RankDeficient,
}

/// Pinhole intrinsics with a polynomial radial distortion model (k1, k2, k3).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub focal_x: f64,
    pub focal_y: f64,
    pub principal_point: [f64; 2],
    #[serde(default)]
    pub radial_distortion: [f64; 3],
    pub image_size: [u32; 2],
}

const UNDISTORT_MAX_ITERATIONS: usize = 20;
const UNDISTORT_TOLERANCE: f64 = 1e-10;

impl CameraIntrinsics {
    pub fn new(
        focal_x: f64,
        focal_y: f64,
        principal_point: [f64; 2],
        radial_distortion: [f64; 3],
        image_size: [u32; 2],
    ) -> Result<Self, GeometryError> {
        let intr = Self {
            focal_x,
            focal_y,
            principal_point,
            radial_distortion,
            image_size,
        };
        intr.validate()?;
        Ok(intr)
    }

    /// Distortion-free intrinsics.
    pub fn pinhole(focal: f64, width: u32, height: u32) -> Self {
        Self {
            focal_x: focal,
            focal_y: focal,
            principal_point: [width as f64 / 2.0, height as f64 / 2.0],
            radial_distortion: [0.0; 3],
            image_size: [width, height],
        }
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.focal_x > 0.0 && self.focal_y > 0.0) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "focal lengths must be positive, got ({}, {})",
                self.focal_x, self.focal_y
            )));
        }
        let [w, h] = self.image_size;
        let [cx, cy] = self.principal_point;
        if !(0.0..=w as f64).contains(&cx) || !(0.0..=h as f64).contains(&cy) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "principal point ({cx}, {cy}) outside the {w}x{h} image"
            )));
        }
        if self.radial_distortion.iter().any(|k| !k.is_finite()) {
            return Err(GeometryError::InvalidIntrinsics(
                "non-finite distortion coefficient".into(),
            ));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.image_size[0] as f64
    }

    pub fn height(&self) -> f64 {
        self.image_size[1] as f64
    }

    /// Geometric mean of the two focal lengths; converts pixel tolerances to
    /// normalized units.
    pub fn mean_focal(&self) -> f64 {
        (self.focal_x * self.focal_y).sqrt()
    }

    pub fn contains_pixel(&self, px: &Vector2<f64>) -> bool {
        px.x >= 0.0 && px.y >= 0.0 && px.x <= self.width() && px.y <= self.height()
    }

    fn radial_factor(&self, r2: f64) -> f64 {
        let [k1, k2, k3] = self.radial_distortion;
        1.0 + r2 * (k1 + r2 * (k2 + r2 * k3))
    }

    /// Applies distortion and intrinsics to a normalized point.
    pub fn normalized_to_pixel(&self, p: &Point2) -> Vector2<f64> {
        let d = self.radial_factor(p.norm_squared());
        Vector2::new(
            self.focal_x * p.x * d + self.principal_point[0],
            self.focal_y * p.y * d + self.principal_point[1],
        )
    }

    /// Removes intrinsics and radial distortion from a pixel position.
    ///
    /// The distorted radius is inverted with Newton's method on the scalar
    /// polynomial `ρ (1 + k1 ρ² + k2 ρ⁴ + k3 ρ⁶) = ρ_d`.
    pub fn pixel_to_normalized(&self, px: &Vector2<f64>) -> Result<Point2, GeometryError> {
        let diverged = GeometryError::DistortionDivergence { u: px.x, v: px.y };
        if !px.x.is_finite() || !px.y.is_finite() {
            return Err(diverged);
        }
        let distorted = Vector2::new(
            (px.x - self.principal_point[0]) / self.focal_x,
            (px.y - self.principal_point[1]) / self.focal_y,
        );
        if self.radial_distortion == [0.0; 3] {
            return Ok(distorted);
        }
        let rho_d = distorted.norm();
        if rho_d == 0.0 {
            return Ok(distorted);
        }
        let [k1, k2, k3] = self.radial_distortion;
        let mut rho = rho_d;
        for _ in 0..UNDISTORT_MAX_ITERATIONS {
            let r2 = rho * rho;
            let f = rho * self.radial_factor(r2) - rho_d;
            let df = 1.0 + r2 * (3.0 * k1 + r2 * (5.0 * k2 + 7.0 * k3 * r2));
            if df <= 0.0 || !df.is_finite() {
                return Err(diverged);
            }
            let step = f / df;
            rho -= step;
            if step.abs() < UNDISTORT_TOLERANCE {
                return Ok(distorted * (rho / rho_d));
            }
        }
        Err(diverged)
    }
}

/// World-to-camera rigid pose: `x_cam = R (X - C)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose {
    pub rotation: Matrix3<f64>,
    pub center: Vector3<f64>,
}

const ROTATION_TOLERANCE: f64 = 1e-9;

impl CameraPose {
    pub fn new(rotation: Matrix3<f64>, center: Vector3<f64>) -> Result<Self, GeometryError> {
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).amax();
        let det = (rotation.determinant() - 1.0).abs();
        let err = ortho.max(det);
        if !err.is_finite() || err > ROTATION_TOLERANCE {
            return Err(GeometryError::InvalidRotation(err));
        }
        Ok(Self { rotation, center })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            center: Vector3::zeros(),
        }
    }

    /// Builds the pose from the `x_cam = R X + t` convention.
    pub fn from_rt(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            center: -rotation.transpose() * translation,
        }
    }

    /// Camera looking from `center` towards `target`, with image rows pointing
    /// along `-up` (y axis down, z forward).
    pub fn look_at(center: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> Self {
        let z = (target - center).normalize();
        let x = z.cross(&up).normalize();
        let y = z.cross(&x);
        let rotation = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        Self { rotation, center }
    }

    pub fn translation(&self) -> Vector3<f64> {
        -self.rotation * self.center
    }

    pub fn to_camera(&self, x: &Point3) -> Vector3<f64> {
        self.rotation * (x - self.center)
    }

    /// `P = [R | -R C]`.
    pub fn projection_matrix(&self) -> Matrix3x4<f64> {
        let mut p = Matrix3x4::zeros();
        p.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        p.set_column(3, &self.translation());
        p
    }

    /// World-frame viewing ray through a normalized image point.
    pub fn ray_direction(&self, p: &Point2) -> Vector3<f64> {
        self.rotation.transpose() * Vector3::new(p.x, p.y, 1.0)
    }

    /// Applies a local rotation increment `exp([ω]×)` on the left.
    pub fn rotated(&self, omega: &Vector3<f64>) -> Self {
        Self {
            rotation: so3_exp(omega) * self.rotation,
            center: self.center,
        }
    }
}

pub fn so3_exp(omega: &Vector3<f64>) -> Matrix3<f64> {
    Rotation3::new(*omega).into_inner()
}

/// Rotation angle of `a * b^T`, in radians.
pub fn rotation_angle_between(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    let m = a * b.transpose();
    let c = ((m.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    // acos loses precision near zero; recover the sine from the skew part.
    let s = Vector3::new(m[(2, 1)] - m[(1, 2)], m[(0, 2)] - m[(2, 0)], m[(1, 0)] - m[(0, 1)])
        .norm()
        / 2.0;
    s.atan2(c)
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Perspective projection of a world point into normalized coordinates.
pub fn project(pose: &CameraPose, x: &Point3) -> Result<Point2, GeometryError> {
    let c = pose.to_camera(x);
    if c.z <= 0.0 {
        return Err(GeometryError::CheiralityViolation { depth: c.z });
    }
    Ok(Vector2::new(c.x / c.z, c.y / c.z))
}

/// Essential matrix `E = [t]× R` mapping points of the first view to epipolar
/// lines of the second (`bᵀ E a = 0`), normalized to singular values (1, 1, 0).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EssentialMatrix(Matrix3<f64>);

impl EssentialMatrix {
    /// Projects an arbitrary 3×3 matrix onto the essential manifold.
    pub fn from_matrix(m: &Matrix3<f64>) -> Result<Self, GeometryError> {
        let svd = m.svd(true, true);
        let s = svd.singular_values;
        if !(s[1] > 0.0) || s[1] < 1e-12 * s[0] {
            return Err(GeometryError::RankDeficient);
        }
        let u = svd.u.ok_or(GeometryError::RankDeficient)?;
        let v_t = svd.v_t.ok_or(GeometryError::RankDeficient)?;
        let d = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, 0.0));
        Ok(Self(u * d * v_t))
    }

    /// Essential matrix of a second camera with `x2 = R x1 + t`.
    pub fn from_relative_pose(rotation: &Matrix3<f64>, translation: &Vector3<f64>) -> Self {
        let t = translation.normalize();
        Self(skew(&t) * rotation)
    }

    /// Wraps a matrix that already satisfies the essential constraints.
    pub fn from_matrix_unchecked(m: Matrix3<f64>) -> Self {
        Self(m)
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn transpose(&self) -> Self {
        Self(self.0.transpose())
    }

    pub fn algebraic_error(&self, a: &Point2, b: &Point2) -> f64 {
        let a = Vector3::new(a.x, a.y, 1.0);
        let b = Vector3::new(b.x, b.y, 1.0);
        b.dot(&(self.0 * a))
    }
}

/// First-order geometric distance of the pair `(a, b)` to the epipolar
/// constraint `bᵀ E a = 0`, measured jointly over both images.
pub fn sampson_distance(e: &Matrix3<f64>, a: &Point2, b: &Point2) -> f64 {
    let ah = Vector3::new(a.x, a.y, 1.0);
    let bh = Vector3::new(b.x, b.y, 1.0);
    let ea = e * ah;
    let etb = e.transpose() * bh;
    let num = bh.dot(&ea).abs();
    let den = (ea.x * ea.x + ea.y * ea.y + etb.x * etb.x + etb.y * etb.y).sqrt();
    if den > 0.0 {
        num / den
    } else if num == 0.0 {
        0.0
    } else {
        f64::INFINITY
    }
}

/// Depths of the two-view intersection of rays `a` (first camera at the
/// origin) and `b` (second camera with `x2 = R x1 + t`).
fn two_view_depths(
    rotation: &Matrix3<f64>,
    translation: &Vector3<f64>,
    a: &Point2,
    b: &Point2,
) -> Option<(f64, f64)> {
    let ra = rotation * Vector3::new(a.x, a.y, 1.0);
    let bh = Vector3::new(b.x, b.y, 1.0);
    // λ2 b = λ1 R a + t  ⇒  [R a, -b] [λ1, λ2]ᵀ = -t
    let m = Matrix3x2::from_columns(&[ra, -bh]);
    let mtm = m.transpose() * m;
    let inv = mtm.try_inverse()?;
    let sol = inv * (m.transpose() * -translation);
    Some((sol[0], sol[1]))
}

/// Extracts the relative pose of the second camera from an essential matrix.
///
/// Of the four `(R, ±t)` candidates the one placing the most pairs in front
/// of both cameras wins. The returned pose has a unit-norm translation and
/// the index of the chosen candidate (0..4).
pub fn decompose_essential(
    e: &EssentialMatrix,
    pairs: &[(Point2, Point2)],
) -> Result<(CameraPose, usize), GeometryError> {
    if pairs.is_empty() {
        return Err(GeometryError::DegenerateEssential);
    }
    let svd = e.0.svd(true, true);
    let mut u = svd.u.ok_or(GeometryError::DegenerateEssential)?;
    let mut v_t = svd.v_t.ok_or(GeometryError::DegenerateEssential)?;
    if u.determinant() < 0.0 {
        u = -u;
    }
    if v_t.determinant() < 0.0 {
        v_t = -v_t;
    }
    let w = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
    let r1 = u * w * v_t;
    let r2 = u * w.transpose() * v_t;
    let t: Vector3<f64> = u.column(2).into_owned().normalize();
    let candidates = [(r1, t), (r1, -t), (r2, t), (r2, -t)];

    let mut best: Option<(usize, usize)> = None;
    for (idx, (r, t)) in candidates.iter().enumerate() {
        let count = pairs
            .iter()
            .filter(|(a, b)| {
                matches!(two_view_depths(r, t, a, b), Some((d1, d2)) if d1 > 0.0 && d2 > 0.0)
            })
            .count();
        if best.is_none_or(|(_, c)| count > c) {
            best = Some((idx, count));
        }
    }
    let (idx, count) = best.ok_or(GeometryError::DegenerateEssential)?;
    if 2 * count <= pairs.len() {
        return Err(GeometryError::DegenerateEssential);
    }
    let (r, t) = candidates[idx];
    Ok((CameraPose::from_rt(r, t), idx))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector4;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_rotation(rng: &mut impl Rng, max_angle: f64) -> Matrix3<f64> {
        let axis = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        )
        .normalize();
        so3_exp(&(axis * rng.random_range(0.0..max_angle)))
    }

    #[test]
    fn project_trivial_points() {
        let pose = CameraPose::identity();
        assert_eq!(project(&pose, &Vector3::new(0.0, 0.0, 1.0)).unwrap(), Vector2::zeros());
        assert_eq!(
            project(&pose, &Vector3::new(1.0, 1.0, 2.0)).unwrap(),
            Vector2::new(0.5, 0.5)
        );
    }

    #[test]
    fn project_behind_camera_is_rejected() {
        let pose = CameraPose::identity();
        assert!(matches!(
            project(&pose, &Vector3::new(0.0, 0.0, -1.0)),
            Err(GeometryError::CheiralityViolation { .. })
        ));
        assert!(project(&pose, &Vector3::new(1.0, 0.0, 0.0)).is_err());
    }

    #[test]
    fn project_matches_explicit_matrix_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let r = random_rotation(&mut rng, 3.0);
            let c = Vector3::new(
                rng.random_range(-5.0..5.0),
                rng.random_range(-5.0..5.0),
                rng.random_range(-5.0..5.0),
            );
            let pose = CameraPose::new(r, c).unwrap();
            // point in the frustum, built in the camera frame
            let xc = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(1.0..10.0),
            );
            let xw = r.transpose() * xc + c;
            // oracle: build [R | -R C] by hand and divide
            let mut p = Matrix3x4::zeros();
            for i in 0..3 {
                for j in 0..3 {
                    p[(i, j)] = r[(i, j)];
                }
            }
            let t = -(r * c);
            for i in 0..3 {
                p[(i, 3)] = t[i];
            }
            let h = p * Vector4::new(xw.x, xw.y, xw.z, 1.0);
            let expected = Vector2::new(h.x / h.z, h.y / h.z);
            let got = project(&pose, &xw).unwrap();
            assert!((got - expected).norm() <= 1e-12 * expected.norm().max(1.0));
        }
    }

    #[test]
    fn pose_rejects_non_rotation() {
        let m = Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, -1.0);
        assert!(CameraPose::new(m, Vector3::zeros()).is_err());
        assert!(CameraPose::new(Matrix3::identity() * 1.01, Vector3::zeros()).is_err());
    }

    #[test]
    fn pixel_normalization_trivial() {
        let intr = CameraIntrinsics::new(1000.0, 1000.0, [500.0, 500.0], [0.0; 3], [1000, 1000])
            .unwrap();
        assert_eq!(
            intr.pixel_to_normalized(&Vector2::new(500.0, 500.0)).unwrap(),
            Vector2::zeros()
        );
        assert_eq!(
            intr.pixel_to_normalized(&Vector2::new(1500.0, 500.0)).unwrap(),
            Vector2::new(1.0, 0.0)
        );
    }

    #[test]
    fn pixel_normalization_inverts_forward_distortion() {
        let intr =
            CameraIntrinsics::new(1200.0, 1180.0, [960.0, 540.0], [-0.1, 0.0, 0.0], [1920, 1080])
                .unwrap();
        let p = Vector2::new(0.2, 0.1);
        let px = intr.normalized_to_pixel(&p);
        let back = intr.pixel_to_normalized(&px).unwrap();
        assert!((back - p).norm() < 1e-8, "{back:?}");
    }

    #[test]
    fn pixel_normalization_diverges_outside_domain() {
        // ρ(1 - 0.5 ρ²) peaks at ρ = 0.816; larger distorted radii have no preimage
        let intr =
            CameraIntrinsics::new(100.0, 100.0, [50.0, 50.0], [-0.5, 0.0, 0.0], [100, 100]).unwrap();
        assert!(matches!(
            intr.pixel_to_normalized(&Vector2::new(50.0 + 100.0 * 0.9, 50.0)),
            Err(GeometryError::DistortionDivergence { .. })
        ));
        assert!(intr.pixel_to_normalized(&Vector2::new(f64::NAN, 0.0)).is_err());
    }

    #[test]
    fn intrinsics_invariants() {
        assert!(CameraIntrinsics::new(0.0, 1.0, [1.0, 1.0], [0.0; 3], [2, 2]).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, [3.0, 1.0], [0.0; 3], [2, 2]).is_err());
    }

    fn synth_pairs(
        rng: &mut impl Rng,
        r: &Matrix3<f64>,
        t: &Vector3<f64>,
        n: usize,
    ) -> Vec<(Point2, Point2)> {
        let mut out = Vec::new();
        while out.len() < n {
            let x1 = Vector3::new(
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(3.0..10.0),
            );
            let x2 = r * x1 + t;
            if x2.z <= 0.1 {
                continue;
            }
            out.push((x1.xy() / x1.z, x2.xy() / x2.z));
        }
        out
    }

    #[test]
    fn decompose_recovers_synthetic_pose() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let r = random_rotation(&mut rng, 0.5);
            let t = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-0.3..0.3),
            );
            if t.norm() < 0.1 {
                continue;
            }
            let pairs = synth_pairs(&mut rng, &r, &t, 20);
            let e = EssentialMatrix::from_relative_pose(&r, &t);
            let (pose, _) = decompose_essential(&e, &pairs).unwrap();
            assert!(rotation_angle_between(&pose.rotation, &r) < 1e-6);
            let t_hat = pose.translation();
            let ang = t_hat.normalize().dot(&t.normalize()).clamp(-1.0, 1.0).acos();
            assert!(ang < 1e-6, "translation direction error {ang}");
            assert!((t_hat.norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn decompose_lateral_translation_sign_from_cheirality() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r = Matrix3::identity();
        let t = Vector3::new(1.0, 0.0, 0.0);
        let pairs = synth_pairs(&mut rng, &r, &t, 10);
        let e = EssentialMatrix::from_relative_pose(&r, &t);
        let (pose, _) = decompose_essential(&e, &pairs).unwrap();
        assert!(rotation_angle_between(&pose.rotation, &r) < 1e-8);
        assert!((pose.translation() - t).norm() < 1e-8);
    }

    #[test]
    fn decompose_single_axis_pair_is_ambiguous() {
        // forward motion, point on both optical axes: all candidates give zero
        // parallax. Either outcome is acceptable as long as a returned pose is right.
        let r = Matrix3::identity();
        let t = Vector3::new(0.0, 0.0, 1.0);
        let e = EssentialMatrix::from_relative_pose(&r, &t);
        match decompose_essential(&e, &[(Vector2::zeros(), Vector2::zeros())]) {
            Err(GeometryError::DegenerateEssential) => {}
            Ok((pose, _)) => {
                assert!(rotation_angle_between(&pose.rotation, &r) < 1e-8);
                assert!((pose.translation().normalize() - t).norm() < 1e-8);
            }
            Err(other) => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn essential_projection_has_unit_singular_values() {
        let m = Matrix3::new(1.0, 2.0, 3.0, 0.5, -1.0, 2.0, 4.0, 0.0, 1.0);
        let e = EssentialMatrix::from_matrix(&m).unwrap();
        let s = e.matrix().singular_values();
        let mut s: Vec<f64> = s.iter().copied().collect();
        s.sort_by(f64::total_cmp);
        assert!(s[0].abs() < 1e-12);
        assert!((s[1] - 1.0).abs() < 1e-12 && (s[2] - 1.0).abs() < 1e-12);
        assert!((e.matrix().norm() - 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn sampson_zero_for_exact_pairs_and_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let r = random_rotation(&mut rng, 0.4);
        let t = Vector3::new(0.8, 0.1, 0.2);
        let e = EssentialMatrix::from_relative_pose(&r, &t);
        for (a, b) in synth_pairs(&mut rng, &r, &t, 20) {
            assert!(sampson_distance(e.matrix(), &a, &b) < 1e-14);
            let b2 = b + Vector2::new(0.01, -0.02);
            let d1 = sampson_distance(e.matrix(), &a, &b2);
            let d10 = sampson_distance(&(e.matrix() * 10.0), &a, &b2);
            assert!((d1 - d10).abs() <= 1e-14 * d1.max(1e-300) + 1e-18);
            let swapped = sampson_distance(&e.matrix().transpose(), &b2, &a);
            assert!((d1 - swapped).abs() < 1e-15);
        }
    }

    /// Brute-force joint correction distance: for a correction `da` of the
    /// first point, the best `db` is the point-to-line distance of `b` to the
    /// epipolar line of `a + da`. Minimize over `da` on a refining grid.
    fn joint_correction_distance(e: &Matrix3<f64>, a: &Point2, b: &Point2, radius: f64) -> f64 {
        let bh = Vector3::new(b.x, b.y, 1.0);
        let cost = |da: Vector2<f64>| {
            let ah = Vector3::new(a.x + da.x, a.y + da.y, 1.0);
            let l = e * ah;
            let d_line = bh.dot(&l).abs() / (l.x * l.x + l.y * l.y).sqrt();
            (da.norm_squared() + d_line * d_line).sqrt()
        };
        let mut center = Vector2::zeros();
        let mut best = cost(center);
        let mut step = radius / 10.0;
        for _ in 0..40 {
            let mut improved = center;
            for i in -10..=10 {
                for j in -10..=10 {
                    let cand = center + Vector2::new(i as f64, j as f64) * step;
                    let c = cost(cand);
                    if c < best {
                        best = c;
                        improved = cand;
                    }
                }
            }
            center = improved;
            step /= 4.0;
        }
        best
    }

    #[test]
    fn sampson_matches_exact_correction_for_small_perturbations() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let r = random_rotation(&mut rng, 0.3);
        let t = Vector3::new(1.0, 0.2, 0.1);
        let e = *EssentialMatrix::from_relative_pose(&r, &t).matrix();
        for (a, b) in synth_pairs(&mut rng, &r, &t, 10) {
            // push b off its epipolar line along the line normal
            let l = e * Vector3::new(a.x, a.y, 1.0);
            let n = Vector2::new(l.x, l.y).normalize();
            let eps = 1e-5;
            let b_off = b + n * eps;
            let s = sampson_distance(&e, &a, &b_off);
            let exact = joint_correction_distance(&e, &a, &b_off, 2.0 * eps);
            assert!(
                (s - exact).abs() < 1e-3 * exact,
                "sampson {s} vs brute-force {exact}"
            );
            assert!(s <= eps * (1.0 + 1e-9));
        }
    }
}
