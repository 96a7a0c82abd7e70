use nalgebra::{DMatrix, Vector3};

use super::EstimationError;
use crate::geometry::{CameraPose, Point2, Point3};

/// One weighted view of a point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub pose: CameraPose,
    pub point: Point2,
    pub weight: f64,
}

impl Observation {
    pub fn new(pose: CameraPose, point: Point2) -> Self {
        Self { pose, point, weight: 1.0 }
    }
}

const PARALLEL_ANGLE: f64 = 1e-8;

/// Linear (DLT) triangulation from two or more calibrated views.
pub fn triangulate(obs: &[Observation]) -> Result<Point3, EstimationError> {
    if obs.len() < 2 {
        return Err(EstimationError::InsufficientMatches {
            needed: 2,
            got: obs.len(),
        });
    }
    let mean = obs.iter().map(|o| o.pose.center).sum::<Vector3<f64>>() / obs.len() as f64;
    let scale = obs.iter().map(|o| (o.pose.center - mean).norm()).sum::<f64>() / obs.len() as f64;
    if !(scale > 1e-12 * (1.0 + mean.norm())) {
        return Err(EstimationError::CoincidentCenters);
    }

    let rays: Vec<Vector3<f64>> = obs.iter().map(|o| o.pose.ray_direction(&o.point).normalize()).collect();
    let max_angle = rays
        .iter()
        .enumerate()
        .flat_map(|(a, ra)| rays[a + 1..].iter().map(move |rb| ra.cross(rb).norm().atan2(ra.dot(rb))))
        .fold(0.0, f64::max);
    if max_angle < PARALLEL_ANGLE {
        return Err(EstimationError::ParallelRays);
    }

    // work in a frame centred on the cameras to keep the system conditioned
    let mut a = DMatrix::zeros(2 * obs.len(), 4);
    for (m, o) in obs.iter().enumerate() {
        let c = (o.pose.center - mean) / scale;
        let p = CameraPose {
            rotation: o.pose.rotation,
            center: c,
        }
        .projection_matrix();
        let row_x = p.row(2) * o.point.x - p.row(0);
        let row_y = p.row(2) * o.point.y - p.row(1);
        a.row_mut(2 * m).copy_from(&(row_x * o.weight));
        a.row_mut(2 * m + 1).copy_from(&(row_y * o.weight));
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.ok_or(EstimationError::ParallelRays)?;
    let (best, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|x, y| x.1.total_cmp(y.1))
        .ok_or(EstimationError::ParallelRays)?;
    let h = v_t.row(best);
    if h[3].abs() < 1e-12 * h.norm() {
        return Err(EstimationError::ParallelRays);
    }
    let x = mean + Vector3::new(h[0], h[1], h[2]) / h[3] * scale;
    for (camera, o) in obs.iter().enumerate() {
        let depth = o.pose.to_camera(&x).z;
        if depth <= 0.0 {
            return Err(EstimationError::BehindCamera { camera, depth });
        }
    }
    Ok(x)
}
