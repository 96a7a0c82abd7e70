//! Ground-truth scene simulation: a smooth flight path, a ring of cameras with
//! their own clocks and rolling shutters, and noisy detection tracks.

use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{evaluate_trajectory, ErrorReport, EvalError};
use crate::geometry::{project, CameraIntrinsics, CameraPose, GeometryError, Point3};
use crate::pipeline::ReconstructionState;
use crate::spline::TimedPoint;
use crate::time::{Detection2D, TimeModel};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("rolling-shutter row did not converge for camera {camera} frame {frame}")]
    FixedPointDivergence { camera: usize, frame: i64 },
    #[error("invalid scene: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// One sinusoidal component per axis: `amplitude · sin(2π t / period + phase)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Harmonic {
    pub amplitude: [f64; 3],
    /// Period in global frames.
    pub period: f64,
    pub phase: [f64; 3],
}

/// Sum of harmonics around a center point, in meters over global time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryGenerator {
    pub center: [f64; 3],
    pub harmonics: Vec<Harmonic>,
}

impl TrajectoryGenerator {
    /// Position and its first two time derivatives.
    fn eval_all(&self, t: f64) -> [Vector3<f64>; 3] {
        let mut out = [Vector3::from(self.center), Vector3::zeros(), Vector3::zeros()];
        for h in &self.harmonics {
            let w = std::f64::consts::TAU / h.period;
            for axis in 0..3 {
                let arg = w * t + h.phase[axis];
                let a = h.amplitude[axis];
                out[0][axis] += a * arg.sin();
                out[1][axis] += a * w * arg.cos();
                out[2][axis] -= a * w * w * arg.sin();
            }
        }
        out
    }

    pub fn position(&self, t: f64) -> Point3 {
        self.eval_all(t)[0]
    }

    /// Velocity in meters per global frame.
    pub fn velocity(&self, t: f64) -> Vector3<f64> {
        self.eval_all(t)[1]
    }

    pub fn acceleration(&self, t: f64) -> Vector3<f64> {
        self.eval_all(t)[2]
    }

    /// Mean and maximum speed over `[0, duration]` in km/h for a global clock
    /// running at `fps`.
    pub fn speed_stats(&self, duration: f64, fps: f64) -> (f64, f64) {
        let n = (duration.max(1.0)) as usize;
        let speeds: Vec<f64> = (0..=n)
            .map(|k| self.velocity(k as f64 * duration / n as f64).norm() * fps * 3.6)
            .collect();
        let mean = speeds.iter().sum::<f64>() / speeds.len() as f64;
        (mean, speeds.iter().copied().fold(0.0, f64::max))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraSpec {
    pub center: [f64; 3],
    pub look_at: [f64; 3],
    pub intrinsics: CameraIntrinsics,
    /// Nominal frame rate.
    pub fps: f64,
    /// Relative deviation of the true frame interval from nominal.
    #[serde(default)]
    pub rate_error: f64,
    /// Global time of this camera's frame 0.
    #[serde(default)]
    pub beta: f64,
    /// Fraction of the frame interval used for one readout pass; negative
    /// for bottom-to-top readout.
    #[serde(default)]
    pub readout_fraction: f64,
}

impl CameraSpec {
    pub fn pose(&self) -> CameraPose {
        CameraPose::look_at(Vector3::from(self.center), Vector3::from(self.look_at), Vector3::z())
    }

    pub fn time_model(&self, anchor_fps: f64) -> TimeModel {
        let alpha = anchor_fps / self.fps * (1.0 + self.rate_error);
        TimeModel::new(alpha, self.beta, self.readout_fraction * alpha / self.intrinsics.height())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub trajectory: TrajectoryGenerator,
    pub cameras: Vec<CameraSpec>,
    /// Frame rate of the global clock (the anchor camera's).
    pub anchor_fps: f64,
    /// Simulated global time span `[0, duration]`.
    pub duration: f64,
    pub noise_px: f64,
    pub outlier_rate: f64,
    pub dropout_rate: f64,
    pub seed: u64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let rate = |x: f64| (0.0..=1.0).contains(&x);
        if self.cameras.is_empty() {
            return Err(SynthError::InvalidSpec("no cameras".into()));
        }
        if !(rate(self.outlier_rate) && rate(self.dropout_rate)) {
            return Err(SynthError::InvalidSpec("rates must lie in [0, 1]".into()));
        }
        if !(self.noise_px >= 0.0) || !(self.duration > 0.0) || !(self.anchor_fps > 0.0) {
            return Err(SynthError::InvalidSpec("noise, duration and fps must be positive".into()));
        }
        for c in &self.cameras {
            c.intrinsics.validate()?;
            if !(c.fps > 0.0) || c.readout_fraction.abs() > 1.0 {
                return Err(SynthError::InvalidSpec("bad camera timing".into()));
            }
        }
        Ok(())
    }

    /// Four cameras on a 60 m ring around a 100 × 100 × 50 m flight volume,
    /// 20 s at 30 fps, 1 px noise, no outliers, global shutter.
    pub fn standard(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let mut ph = || [rng.random_range(0.0..6.28), rng.random_range(0.0..6.28), rng.random_range(0.0..6.28)];
        let trajectory = TrajectoryGenerator {
            center: [0.0, 0.0, 22.0],
            harmonics: vec![
                Harmonic {
                    amplitude: [22.0, 20.0, 7.0],
                    period: 700.0,
                    phase: ph(),
                },
                Harmonic {
                    amplitude: [5.0, 6.0, 3.0],
                    period: 230.0,
                    phase: ph(),
                },
            ],
        };
        let intrinsics = CameraIntrinsics::pinhole(1500.0, 1920, 1080);
        let fps = [30.0, 25.0, 30.0, 50.0];
        let cameras = (0..4)
            .map(|i| {
                let a = std::f64::consts::FRAC_PI_2 * i as f64 + 0.3;
                CameraSpec {
                    center: [60.0 * a.cos(), 60.0 * a.sin(), 1.5 + 0.5 * i as f64],
                    look_at: [0.0, 0.0, 20.0],
                    intrinsics: intrinsics.clone(),
                    fps: fps[i],
                    rate_error: 0.0,
                    beta: 0.0,
                    readout_fraction: 0.0,
                }
            })
            .collect();
        Self {
            trajectory,
            cameras,
            anchor_fps: 30.0,
            duration: 600.0,
            noise_px: 1.0,
            outlier_rate: 0.0,
            dropout_rate: 0.0,
            seed,
        }
    }
}

/// Ground truth of one simulated detection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionTruth {
    pub frame_index: i64,
    pub time: f64,
    pub point: Point3,
    /// Pixel before noise.
    pub clean_pixel: Vector2<f64>,
    pub outlier: bool,
}

#[derive(Debug, Clone)]
pub struct CameraTruth {
    pub pose: CameraPose,
    pub time_model: TimeModel,
    pub intrinsics: CameraIntrinsics,
    pub detections: Vec<DetectionTruth>,
}

#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub trajectory: TrajectoryGenerator,
    pub duration: f64,
    pub cameras: Vec<CameraTruth>,
}

impl GroundTruth {
    /// Trajectory at every integer global frame in `[0, duration]`.
    pub fn sampled_trajectory(&self) -> Vec<TimedPoint> {
        (0..=self.duration.floor() as i64)
            .map(|k| (k as f64, self.trajectory.position(k as f64)))
            .collect()
    }
}

const FIXED_POINT_ITERATIONS: usize = 50;
const FIXED_POINT_TOLERANCE: f64 = 1e-6;

/// Exact pixel of the target for frame `j` and the global time it was read.
/// Returns `Ok(None)` when the target is behind the camera or off-image.
pub fn rs_detection(
    traj: &TrajectoryGenerator,
    pose: &CameraPose,
    intrinsics: &CameraIntrinsics,
    tm: &TimeModel,
    camera: usize,
    frame: i64,
) -> Result<Option<(Vector2<f64>, f64)>, SynthError> {
    let t0 = tm.frame_to_time(frame as f64);
    let pixel_at = |t: f64| project(pose, &traj.position(t)).ok().map(|p| intrinsics.normalized_to_pixel(&p));
    let Some(mut px) = pixel_at(t0) else {
        return Ok(None);
    };
    if tm.rs_readout != 0.0 {
        let mut converged = false;
        for _ in 0..FIXED_POINT_ITERATIONS {
            let Some(next) = pixel_at(t0 + tm.rs_readout * px.y) else {
                return Ok(None);
            };
            let step = (next.y - px.y).abs();
            px = next;
            if step < FIXED_POINT_TOLERANCE {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(SynthError::FixedPointDivergence { camera, frame });
        }
    }
    if !intrinsics.contains_pixel(&px) {
        return Ok(None);
    }
    Ok(Some((px, t0 + tm.rs_readout * px.y)))
}

/// Simulates per-camera detection tracks and their ground truth.
pub fn generate(spec: &SceneSpec) -> Result<(Vec<Vec<Detection2D>>, GroundTruth), SynthError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let normal = Normal::new(0.0, spec.noise_px.max(f64::MIN_POSITIVE)).expect("finite sigma");
    let mut tracks = Vec::with_capacity(spec.cameras.len());
    let mut truths = Vec::with_capacity(spec.cameras.len());
    for (ci, cam) in spec.cameras.iter().enumerate() {
        let pose = cam.pose();
        let tm = cam.time_model(spec.anchor_fps);
        let k = &cam.intrinsics;
        let first = ((0.0 - tm.beta) / tm.alpha).ceil() as i64;
        let last = ((spec.duration - tm.beta - tm.rs_readout.max(0.0) * k.height()) / tm.alpha).floor() as i64;
        let mut track = Vec::new();
        let mut truth = Vec::new();
        for j in first.max(0)..=last {
            let Some((clean, time)) = rs_detection(&spec.trajectory, &pose, k, &tm, ci, j)? else {
                continue;
            };
            // every variate is drawn for every frame
            let noise = Vector2::new(normal.sample(&mut rng), normal.sample(&mut rng));
            let outlier = rng.random::<f64>() < spec.outlier_rate;
            let random_px = Vector2::new(rng.random_range(0.0..k.width()), rng.random_range(0.0..k.height()));
            let dropped = rng.random::<f64>() < spec.dropout_rate;
            if dropped {
                continue;
            }
            let pixel = if outlier {
                random_px
            } else if spec.noise_px > 0.0 {
                clean + noise
            } else {
                clean
            };
            let normalized = k.pixel_to_normalized(&pixel)?;
            track.push(Detection2D {
                camera_id: ci,
                frame_index: j,
                pixel,
                normalized,
            });
            truth.push(DetectionTruth {
                frame_index: j,
                time,
                point: spec.trajectory.position(time),
                clean_pixel: clean,
                outlier,
            });
        }
        tracks.push(track);
        truths.push(CameraTruth {
            pose,
            time_model: tm,
            intrinsics: k.clone(),
            detections: truth,
        });
    }
    Ok((
        tracks,
        GroundTruth {
            trajectory: spec.trajectory.clone(),
            duration: spec.duration,
            cameras: truths,
        },
    ))
}

/// Scores a reconstruction against the ground truth on the common covered
/// timeline at anchor-frame resolution, after similarity alignment.
pub fn compare(state: &ReconstructionState, gt: &GroundTruth) -> Result<ErrorReport, EvalError> {
    let est: Vec<TimedPoint> = state
        .trajectory
        .sample_grid(1.0)
        .into_iter()
        .filter(|(t, _)| (0.0..=gt.duration).contains(t))
        .collect();
    evaluate_trajectory(&est, &gt.sampled_trajectory(), true)
}
