//! 2D↔2D and 3D↔2D correspondences between unsynchronized cameras.
//!
//! A detection of camera `i` at global time `t` is paired with the position
//! camera `k` would have observed at `t`, obtained from a small cubic fitted
//! to the detections of `k` around `t`. Pairing with the 3D trajectory works
//! the same way with the trajectory splines.

use nalgebra::Vector2;

use crate::geometry::{Point2, Point3};
use crate::spline::{Spline2, TrajectoryModel};
use crate::time::{Detection2D, TimeModel};

/// Minimum number of consecutive detections a local fit needs.
pub const MIN_WINDOW_POINTS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchConfig {
    /// Detections per local window.
    pub window: usize,
    /// Largest frame-index step still treated as consecutive.
    pub max_frame_gap: i64,
    /// Window points whose fit residual exceeds this (normalized units) are
    /// dropped one at a time, worst first. `None` disables trimming.
    pub trim_threshold: Option<f64>,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            window: 8,
            max_frame_gap: 3,
            trim_threshold: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Match2D2D {
    pub source: Detection2D,
    /// Interpolated target-camera position at `time`.
    pub target_point: Point2,
    /// Target-camera image velocity, normalized units per global frame.
    pub target_velocity: Vector2<f64>,
    pub time: f64,
    /// Time span of the local window the interpolation came from.
    pub window: (f64, f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Match3D2D {
    pub detection: Detection2D,
    pub world_point: Point3,
    pub time: f64,
}

/// Position, velocity and window span from interpolating a track at `t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackSample {
    pub point: Point2,
    pub velocity: Vector2<f64>,
    pub window: (f64, f64),
}

pub fn detection_times(track: &[Detection2D], tm: &TimeModel) -> Vec<f64> {
    track.iter().map(|d| tm.detection_time(d)).collect()
}

/// Interpolates a detection track at global time `t` from a local window of
/// consecutive detections. Returns `None` when `t` is not strictly inside a
/// window of at least [`MIN_WINDOW_POINTS`] detections.
pub fn interpolate_track(
    track: &[Detection2D],
    times: &[f64],
    t: f64,
    cfg: &MatchConfig,
) -> Option<TrackSample> {
    let n = track.len();
    if n < MIN_WINDOW_POINTS || !t.is_finite() {
        return None;
    }
    let upper = times.partition_point(|&x| x <= t);
    if upper == 0 || upper >= n {
        return None;
    }
    let l = upper - 1;
    let consecutive = |a: usize| track[a + 1].frame_index - track[a].frame_index <= cfg.max_frame_gap;
    if !consecutive(l) {
        return None;
    }
    let mut run_lo = l;
    while run_lo > 0 && consecutive(run_lo - 1) {
        run_lo -= 1;
    }
    let mut run_hi = l + 1;
    while run_hi + 1 < n && consecutive(run_hi) {
        run_hi += 1;
    }
    let half = cfg.window / 2;
    let lo = run_lo.max((l + 1).saturating_sub(half));
    let hi = run_hi.min(lo + cfg.window - 1);
    let lo = run_lo.max((hi + 1).saturating_sub(cfg.window));

    let mut samples: Vec<(f64, Vector2<f64>)> =
        (lo..=hi).map(|m| (times[m], track[m].normalized)).collect();
    loop {
        if samples.len() < MIN_WINDOW_POINTS {
            return None;
        }
        let (first, last) = (samples[0].0, samples[samples.len() - 1].0);
        if !(t > first && t < last) {
            return None;
        }
        let spline = Spline2::fit_with_spans(&samples, 1).ok()?;
        if let Some(thr) = cfg.trim_threshold {
            let (worst, err) = samples
                .iter()
                .enumerate()
                .map(|(m, (ts, p))| (m, (spline.eval_extended(*ts) - p).norm()))
                .max_by(|a, b| a.1.total_cmp(&b.1))?;
            if err > thr {
                samples.remove(worst);
                continue;
            }
        }
        let (point, velocity) = spline.eval_extended_with_velocity(t);
        return Some(TrackSample {
            point,
            velocity,
            window: (first, last),
        });
    }
}

/// Pairs every detection of `track_i` with the interpolated position of
/// `track_k` at the same global time.
pub fn match_2d2d(
    track_i: &[Detection2D],
    track_k: &[Detection2D],
    tm_i: &TimeModel,
    tm_k: &TimeModel,
    cfg: &MatchConfig,
) -> Vec<Match2D2D> {
    let times_k = detection_times(track_k, tm_k);
    track_i
        .iter()
        .filter_map(|d| {
            let t = tm_i.detection_time(d);
            interpolate_track(track_k, &times_k, t, cfg).map(|s| Match2D2D {
                source: *d,
                target_point: s.point,
                target_velocity: s.velocity,
                time: t,
                window: s.window,
            })
        })
        .collect()
}

/// Pairs detections of a camera with the trajectory position at their times.
/// Detections falling in gaps are skipped; segment ends are inclusive.
pub fn match_3d2d(track: &[Detection2D], tm: &TimeModel, traj: &TrajectoryModel) -> Vec<Match3D2D> {
    track
        .iter()
        .filter_map(|d| {
            let t = tm.detection_time(d);
            traj.eval(t).ok().map(|x| Match3D2D {
                detection: *d,
                world_point: x,
                time: t,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{project, sampson_distance, CameraPose, EssentialMatrix};
    use nalgebra::{Matrix3, Vector3};

    fn det(camera: usize, frame: i64, p: Point2) -> Detection2D {
        Detection2D {
            camera_id: camera,
            frame_index: frame,
            pixel: Vector2::new(500.0, 500.0),
            normalized: p,
        }
    }

    fn track_from(camera: usize, frames: impl Iterator<Item = i64>, tm: &TimeModel, f: impl Fn(f64) -> Point2) -> Vec<Detection2D> {
        frames.map(|j| det(camera, j, f(tm.frame_to_time(j as f64)))).collect()
    }

    #[test]
    fn twin_cameras_match_exactly() {
        // image motion cubic in time
        let f = |t: f64| Vector2::new(0.1 + 0.01 * t - 1e-4 * t * t, -0.2 + 2e-6 * t.powi(3));
        let tm = TimeModel::ANCHOR;
        let a = track_from(0, 0..100, &tm, f);
        let b = track_from(1, 0..100, &tm, f);
        let matches = match_2d2d(&a, &b, &tm, &tm, &MatchConfig::default());
        assert_eq!(matches.len(), 98);
        for m in &matches {
            assert!((m.target_point - m.source.normalized).norm() < 1e-9);
            assert!(m.time > m.window.0 && m.time < m.window.1);
        }
    }

    #[test]
    fn no_overlap_no_match() {
        let f = |t: f64| Vector2::new(0.001 * t, 0.0);
        let tm = TimeModel::ANCHOR;
        let target = track_from(1, 0..=100, &tm, f);
        let source = vec![det(0, 150, f(150.0))];
        assert!(match_2d2d(&source, &target, &tm, &tm, &MatchConfig::default()).is_empty());
    }

    #[test]
    fn frame_gaps_break_windows() {
        let f = |t: f64| Vector2::new(0.001 * t, 0.0);
        let tm = TimeModel::ANCHOR;
        let target = track_from(1, (0..20).chain(40..60), &tm, f);
        let source = vec![det(0, 30, f(30.0)), det(0, 10, f(10.0))];
        let m = match_2d2d(&source, &target, &tm, &tm, &MatchConfig::default());
        assert_eq!(m.len(), 1);
        assert_eq!(m[0].source.frame_index, 10);
    }

    #[test]
    fn window_is_local() {
        let f = |t: f64| Vector2::new((0.05 * t).sin(), (0.03 * t).cos());
        let tm = TimeModel::ANCHOR;
        let target = track_from(1, 0..200, &tm, f);
        let source = vec![det(0, 100, f(100.3))];
        let src_tm = TimeModel::new(1.0, 0.3, 0.0);
        let base = match_2d2d(&source, &target, &src_tm, &tm, &MatchConfig::default());
        let mut perturbed = target.clone();
        for d in perturbed.iter_mut().filter(|d| (d.frame_index - 100).abs() > 4) {
            d.normalized += Vector2::new(0.3, -0.7);
        }
        let after = match_2d2d(&source, &perturbed, &src_tm, &tm, &MatchConfig::default());
        assert_eq!(base, after);
    }

    #[test]
    fn trimming_removes_outlier_from_window() {
        let f = |t: f64| Vector2::new(0.002 * t, 0.001 * t);
        let tm = TimeModel::ANCHOR;
        let mut target = track_from(1, 0..40, &tm, f);
        target[21].normalized += Vector2::new(0.2, 0.0);
        let source = vec![det(0, 20, f(20.5))];
        let src_tm = TimeModel::new(1.0, 0.5, 0.0);
        let cfg = MatchConfig {
            trim_threshold: Some(1e-3),
            ..Default::default()
        };
        let m = match_2d2d(&source, &target, &src_tm, &tm, &cfg);
        assert!((m[0].target_point - f(20.5)).norm() < 1e-9);
        let plain = match_2d2d(&source, &target, &src_tm, &tm, &MatchConfig::default());
        assert!((plain[0].target_point - f(20.5)).norm() > 1e-3);
    }

    #[test]
    fn rigid_scene_matches_satisfy_epipolar_geometry_both_ways() {
        // target moves on a path whose images are exactly cubic: keep depth
        // constant in both cameras by moving in the plane z = 10 seen by a
        // second camera translated within that plane.
        let path = |t: f64| Vector3::new(0.5 + 0.02 * t - 1e-4 * t * t, -0.3 + 0.01 * t, 10.0);
        let cam_a = CameraPose::identity();
        let cam_b = CameraPose::new(Matrix3::identity(), Vector3::new(2.0, 0.5, 0.0)).unwrap();
        let tm_a = TimeModel::ANCHOR;
        let tm_b = TimeModel::new(0.5, 0.25, 0.0);
        let ta = track_from(0, 0..100, &tm_a, |t| project(&cam_a, &path(t)).unwrap());
        let tb = track_from(1, 0..200, &tm_b, |t| project(&cam_b, &path(t)).unwrap());
        let e_ab = EssentialMatrix::from_relative_pose(&Matrix3::identity(), &cam_b.translation());
        let ab = match_2d2d(&ta, &tb, &tm_a, &tm_b, &MatchConfig::default());
        let ba = match_2d2d(&tb, &ta, &tm_b, &tm_a, &MatchConfig::default());
        assert!(ab.len() > 90 && ba.len() > 180);
        for m in &ab {
            assert!(sampson_distance(e_ab.matrix(), &m.source.normalized, &m.target_point) < 1e-6);
        }
        for m in &ba {
            assert!(sampson_distance(e_ab.matrix(), &m.target_point, &m.source.normalized) < 1e-6);
        }
    }

    #[test]
    fn match_3d2d_respects_gaps_and_boundaries() {
        let mut traj = TrajectoryModel::new(5.0);
        let samples: Vec<_> = (0..=50).map(|i| (i as f64, Vector3::new(i as f64, 0.0, 20.0))).collect();
        traj.extend_or_merge(&samples);
        let tm = TimeModel::ANCHOR;
        let gaps = vec![det(0, 60, Vector2::zeros()), det(0, 70, Vector2::zeros())];
        assert!(match_3d2d(&gaps, &tm, &traj).is_empty());
        let boundary = vec![det(0, 50, Vector2::zeros())];
        let m = match_3d2d(&boundary, &tm, &traj);
        assert_eq!(m.len(), 1);
        assert!((m[0].world_point - Vector3::new(50.0, 0.0, 20.0)).norm() < 1e-9);
    }

    #[test]
    fn match_3d2d_forward_projection() {
        let path = |t: f64| Vector3::new(3.0 * (0.05 * t).sin(), 0.1 * t - 2.0, 25.0 + (0.02 * t).cos());
        let mut traj = TrajectoryModel::new(5.0);
        let samples: Vec<_> = (0..=200).map(|i| (i as f64 * 0.5, path(i as f64 * 0.5))).collect();
        traj.extend_or_merge(&samples);
        let pose = CameraPose::look_at(Vector3::new(30.0, 0.0, 0.0), Vector3::new(0.0, 0.0, 25.0), Vector3::z());
        let tm = TimeModel::new(1.0, 0.37, 0.0);
        let track = track_from(2, 0..99, &tm, |t| project(&pose, &path(t)).unwrap());
        let m = match_3d2d(&track, &tm, &traj);
        assert_eq!(m.len(), 99);
        for mm in m {
            let p = project(&pose, &mm.world_point).unwrap();
            assert!((p - mm.detection.normalized).norm() < 1e-6);
            assert!(traj.covers(mm.time));
        }
    }
}
