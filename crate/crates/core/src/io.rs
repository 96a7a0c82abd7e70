//! File formats: detection tracks, intrinsics, project configuration, and
//! result export.
//!
//! Every number written by this module carries at most 9 significant digits.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::geometry::{CameraIntrinsics, CameraPose};
use crate::pipeline::{CameraInput, PipelineConfig, ReconstructionState};
use crate::spline::TimedPoint;
use crate::synth::{GroundTruth, SceneSpec};
use crate::time::{Detection2D, TimeModel};

pub const TRACK_COLUMNS: &str = "frame_index,x_pixel,y_pixel";
pub const TRAJECTORY_COLUMNS: &str = "time,x,y,z";

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}:{column}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{path}: frame {frame} appears more than once")]
    DuplicateFrame { path: PathBuf, frame: i64 },
    #[error("camera {camera}: intrinsics file {path} not found")]
    MissingIntrinsics { camera: usize, path: PathBuf },
    #[error("{path}: {message}")]
    Config { path: PathBuf, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn read(path: &Path) -> Result<String, IoError> {
    fs::read_to_string(path).map_err(io_err(path))
}

fn write(path: &Path, contents: &str) -> Result<(), IoError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
    }
    fs::write(path, contents).map_err(io_err(path))
}

/// Formats `x` with 9 significant digits, dropping trailing zeros.
/// Positional notation is used for decimal exponents in `[-5, 15)`.
pub fn format_float(x: f64) -> String {
    if !x.is_finite() {
        return if x.is_nan() {
            "NaN".into()
        } else if x > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        };
    }
    if x == 0.0 {
        return "0".into();
    }
    let sci = format!("{:.8e}", x);
    let (mantissa, exp) = sci.split_once('e').expect("exponent");
    let exp: i32 = exp.parse().expect("integer exponent");
    let negative = mantissa.starts_with('-');
    let digits: String = mantissa.chars().filter(char::is_ascii_digit).collect();
    let digits = digits.trim_end_matches('0');
    let digits = if digits.is_empty() { "0" } else { digits };
    let mut out = String::new();
    if negative {
        out.push('-');
    }
    if (-5..15).contains(&exp) {
        if exp >= 0 {
            let int_len = exp as usize + 1;
            if digits.len() <= int_len {
                out.push_str(digits);
                out.extend(std::iter::repeat_n('0', int_len - digits.len()));
            } else {
                out.push_str(&digits[..int_len]);
                out.push('.');
                out.push_str(&digits[int_len..]);
            }
        } else {
            out.push_str("0.");
            out.extend(std::iter::repeat_n('0', (-exp - 1) as usize));
            out.push_str(digits);
        }
    } else {
        out.push_str(&digits[..1]);
        if digits.len() > 1 {
            out.push('.');
            out.push_str(&digits[1..]);
        }
        let _ = write!(out, "e{exp}");
    }
    out
}

/// `x` rounded to the value [`format_float`] writes.
pub fn round_float(x: f64) -> f64 {
    format_float(x).parse().unwrap_or(x)
}

fn round_json(v: &mut serde_json::Value) {
    match v {
        serde_json::Value::Number(n) => {
            if !(n.is_i64() || n.is_u64()) {
                if let Some(x) = n.as_f64() {
                    if let Some(r) = serde_json::Number::from_f64(round_float(x)) {
                        *n = r;
                    }
                }
            }
        }
        serde_json::Value::Array(a) => a.iter_mut().for_each(round_json),
        serde_json::Value::Object(o) => o.values_mut().for_each(round_json),
        _ => {}
    }
}

fn round_toml(v: &mut toml::Value) {
    match v {
        toml::Value::Float(x) => *x = round_float(*x),
        toml::Value::Array(a) => a.iter_mut().for_each(round_toml),
        toml::Value::Table(t) => t.iter_mut().for_each(|(_, x)| round_toml(x)),
        _ => {}
    }
}

/// Pretty JSON with every float rounded to 9 significant digits.
pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut v = serde_json::to_value(value).expect("serializable");
    round_json(&mut v);
    let mut s = serde_json::to_string_pretty(&v).expect("serializable");
    s.push('\n');
    s
}

/// TOML with every float rounded to 9 significant digits.
pub fn to_toml<T: Serialize>(value: &T) -> String {
    let mut v = toml::Value::try_from(value).expect("serializable");
    round_toml(&mut v);
    toml::to_string(&v).expect("serializable")
}

fn parse_toml<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, IoError> {
    let text = read(path)?;
    toml::from_str(&text).map_err(|e| {
        let (line, column) = e
            .span()
            .map(|s| line_column(&text, s.start))
            .unwrap_or((0, 0));
        IoError::Parse {
            path: path.to_path_buf(),
            line,
            column,
            message: e.message().to_string(),
        }
    })
}

fn line_column(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
    (line, column)
}

/// Parsed track file before calibration is applied.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackFile {
    pub camera_id: usize,
    pub fps: f64,
    /// `(frame_index, pixel)` sorted by frame index.
    pub rows: Vec<(i64, Vector2<f64>)>,
}

impl TrackFile {
    pub fn from_detections(camera_id: usize, fps: f64, track: &[Detection2D]) -> Self {
        let mut rows: Vec<_> = track.iter().map(|d| (d.frame_index, d.pixel)).collect();
        rows.sort_by_key(|r| r.0);
        Self { camera_id, fps, rows }
    }

    /// Detections with undistorted normalized coordinates.
    pub fn detections(&self, intrinsics: &CameraIntrinsics, path: &Path) -> Result<Vec<Detection2D>, IoError> {
        self.rows
            .iter()
            .map(|&(frame_index, pixel)| {
                let normalized = intrinsics.pixel_to_normalized(&pixel).map_err(|e| IoError::Config {
                    path: path.to_path_buf(),
                    message: format!("frame {frame_index}: {e}"),
                })?;
                Ok(Detection2D {
                    camera_id: self.camera_id,
                    frame_index,
                    pixel,
                    normalized,
                })
            })
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("# camera {} fps {}\n{TRACK_COLUMNS}\n", self.camera_id, format_float(self.fps));
        for (j, p) in &self.rows {
            let _ = writeln!(s, "{j},{},{}", format_float(p.x), format_float(p.y));
        }
        s
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self, IoError> {
        let err = |line: usize, column: usize, message: String| IoError::Parse {
            path: path.to_path_buf(),
            line,
            column,
            message,
        };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim_end_matches('\r')));
        let (_, header) = lines.next().ok_or_else(|| err(1, 1, "empty file".into()))?;
        let words: Vec<&str> = header.split_whitespace().collect();
        let (camera_id, fps) = match words.as_slice() {
            ["#", "camera", id, "fps", fps] => {
                let id = id
                    .parse::<usize>()
                    .map_err(|_| err(1, header.find(id).unwrap_or(0) + 1, format!("bad camera id `{id}`")))?;
                let f = fps.parse::<f64>().ok().filter(|f| *f > 0.0 && f.is_finite());
                let f = f.ok_or_else(|| err(1, header.rfind(fps).unwrap_or(0) + 1, format!("bad fps `{fps}`")))?;
                (id, f)
            }
            _ => return Err(err(1, 1, "expected header `# camera <id> fps <fps>`".into())),
        };
        let mut rows = Vec::new();
        for (n, line) in lines {
            if line.trim().is_empty() || (rows.is_empty() && line.trim() == TRACK_COLUMNS) {
                continue;
            }
            let mut fields = Vec::with_capacity(3);
            let mut col = 1;
            for field in line.split(',') {
                fields.push((col, field.trim()));
                col += field.chars().count() + 1;
            }
            if fields.len() != 3 {
                return Err(err(n, 1, format!("expected 3 fields, found {}", fields.len())));
            }
            let (c0, f0) = fields[0];
            let frame: i64 = f0
                .parse()
                .ok()
                .filter(|j| *j >= 0)
                .ok_or_else(|| err(n, c0, format!("bad frame index `{f0}`")))?;
            let mut px = [0.0; 2];
            for (k, &(c, f)) in fields[1..].iter().enumerate() {
                px[k] = f
                    .parse::<f64>()
                    .ok()
                    .filter(|x| x.is_finite())
                    .ok_or_else(|| err(n, c, format!("bad pixel coordinate `{f}`")))?;
            }
            rows.push((frame, Vector2::new(px[0], px[1])));
        }
        rows.sort_by_key(|r| r.0);
        if let Some(w) = rows.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(IoError::DuplicateFrame {
                path: path.to_path_buf(),
                frame: w[0].0,
            });
        }
        Ok(Self { camera_id, fps, rows })
    }

    pub fn load(path: &Path) -> Result<Self, IoError> {
        Self::parse(&read(path)?, path)
    }

    pub fn save(&self, path: &Path) -> Result<(), IoError> {
        write(path, &self.to_text())
    }
}

pub fn load_intrinsics(path: &Path) -> Result<CameraIntrinsics, IoError> {
    let k: CameraIntrinsics = parse_toml(path)?;
    k.validate().map_err(|e| IoError::Config {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    Ok(k)
}

pub fn save_intrinsics(path: &Path, k: &CameraIntrinsics) -> Result<(), IoError> {
    write(path, &to_toml(k))
}

/// One camera of a project.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraEntry {
    pub track: PathBuf,
    pub intrinsics: PathBuf,
    /// Nominal frame rate; the track header's when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fps: Option<f64>,
}

/// Cameras, pipeline settings and output location of one reconstruction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub cameras: Vec<CameraEntry>,
    #[serde(default)]
    pub pipeline: PipelineConfig,
}

impl ProjectConfig {
    /// Loads a project and resolves its paths against the file's directory.
    pub fn load(path: &Path) -> Result<Self, IoError> {
        let mut cfg: ProjectConfig = parse_toml(path)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for c in &mut cfg.cameras {
            c.track = base.join(&c.track);
            c.intrinsics = base.join(&c.intrinsics);
        }
        if let Some(out) = &cfg.output_dir {
            cfg.output_dir = Some(base.join(out));
        }
        cfg.validate(path)?;
        Ok(cfg)
    }

    pub fn validate(&self, path: &Path) -> Result<(), IoError> {
        let config_err = |message: String| IoError::Config {
            path: path.to_path_buf(),
            message,
        };
        if self.cameras.len() < 2 {
            return Err(config_err("at least two cameras are required".into()));
        }
        if self.pipeline.anchor >= self.cameras.len() {
            return Err(config_err(format!("anchor {} out of range", self.pipeline.anchor)));
        }
        for (i, c) in self.cameras.iter().enumerate() {
            if !c.intrinsics.is_file() {
                return Err(IoError::MissingIntrinsics {
                    camera: i,
                    path: c.intrinsics.clone(),
                });
            }
            if !c.track.is_file() {
                return Err(config_err(format!("camera {i}: track file {} not found", c.track.display())));
            }
            if c.fps.is_some_and(|f| !(f > 0.0 && f.is_finite())) {
                return Err(config_err(format!("camera {i}: fps must be positive")));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), IoError> {
        write(path, &to_toml(self))
    }

    /// Reads every camera's track and calibration.
    pub fn load_inputs(&self) -> Result<Vec<CameraInput>, IoError> {
        self.cameras
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let intrinsics = load_intrinsics(&c.intrinsics)?;
                let file = TrackFile::load(&c.track)?;
                if file.camera_id != i {
                    return Err(IoError::Config {
                        path: c.track.clone(),
                        message: format!("track belongs to camera {}, listed as camera {i}", file.camera_id),
                    });
                }
                Ok(CameraInput {
                    track: file.detections(&intrinsics, &c.track)?,
                    nominal_fps: c.fps.unwrap_or(file.fps),
                    intrinsics,
                })
            })
            .collect()
    }
}

/// Per-camera tracks and calibration of the project at `path`.
pub fn load_tracks(path: &Path) -> Result<Vec<CameraInput>, IoError> {
    ProjectConfig::load(path)?.load_inputs()
}

pub fn trajectory_to_text(samples: &[TimedPoint]) -> String {
    let mut s = format!("{TRAJECTORY_COLUMNS}\n");
    for (t, p) in samples {
        let _ = writeln!(
            s,
            "{},{},{},{}",
            format_float(*t),
            format_float(p.x),
            format_float(p.y),
            format_float(p.z)
        );
    }
    s
}

pub fn parse_trajectory(text: &str, path: &Path) -> Result<Vec<TimedPoint>, IoError> {
    let mut out: Vec<TimedPoint> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || (n == 1 && line.trim() == TRAJECTORY_COLUMNS) {
            continue;
        }
        let mut v = [0.0; 4];
        let mut col = 1;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(IoError::Parse {
                path: path.to_path_buf(),
                line: n,
                column: 1,
                message: format!("expected 4 fields, found {}", fields.len()),
            });
        }
        for (k, f) in fields.iter().enumerate() {
            v[k] = f.trim().parse::<f64>().ok().filter(|x| x.is_finite()).ok_or_else(|| IoError::Parse {
                path: path.to_path_buf(),
                line: n,
                column: col,
                message: format!("bad number `{}`", f.trim()),
            })?;
            col += f.chars().count() + 1;
        }
        if out.last().is_some_and(|(t, _)| *t >= v[0]) {
            return Err(IoError::Parse {
                path: path.to_path_buf(),
                line: n,
                column: 1,
                message: "times must increase".into(),
            });
        }
        out.push((v[0], Vector3::new(v[1], v[2], v[3])));
    }
    Ok(out)
}

pub fn load_trajectory(path: &Path) -> Result<Vec<TimedPoint>, IoError> {
    parse_trajectory(&read(path)?, path)
}

pub fn save_trajectory(path: &Path, samples: &[TimedPoint]) -> Result<(), IoError> {
    write(path, &trajectory_to_text(samples))
}

fn rows(m: &Matrix3<f64>) -> [[f64; 3]; 3] {
    std::array::from_fn(|r| std::array::from_fn(|c| m[(r, c)]))
}

/// Camera report entry shared by reconstructions and ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraRecord {
    pub id: usize,
    pub registered: bool,
    /// World-to-camera rotation, row-major.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rotation: Option<[[f64; 3]; 3]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub center: Option<[f64; 3]>,
    pub alpha: f64,
    pub beta: f64,
    pub rs_readout: f64,
    pub detections: usize,
    pub inliers: usize,
}

impl CameraRecord {
    pub fn new(id: usize, pose: Option<&CameraPose>, tm: &TimeModel, detections: usize, inliers: usize) -> Self {
        Self {
            id,
            registered: pose.is_some(),
            rotation: pose.map(|p| rows(&p.rotation)),
            center: pose.map(|p| [p.center.x, p.center.y, p.center.z]),
            alpha: tm.alpha,
            beta: tm.beta,
            rs_readout: tm.rs_readout,
            detections,
            inliers,
        }
    }

    pub fn pose(&self) -> Option<CameraPose> {
        let (r, c) = (self.rotation?, self.center?);
        Some(CameraPose {
            rotation: Matrix3::from_fn(|i, j| r[i][j]),
            center: Vector3::from(c),
        })
    }

    pub fn time_model(&self) -> TimeModel {
        TimeModel::new(self.alpha, self.beta, self.rs_readout)
    }
}

pub fn load_cameras(path: &Path) -> Result<Vec<CameraRecord>, IoError> {
    let text = read(path)?;
    serde_json::from_str(&text).map_err(|e| IoError::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })
}

/// ASCII PLY of trajectory samples (white) and camera centers (red).
pub fn point_cloud_to_ply(trajectory: &[TimedPoint], centers: &[Vector3<f64>]) -> String {
    let mut s = String::new();
    let _ = write!(
        s,
        "ply\nformat ascii 1.0\nelement vertex {}\nproperty double x\nproperty double y\nproperty double z\n\
         property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n",
        trajectory.len() + centers.len()
    );
    let mut vertex = |p: &Vector3<f64>, rgb: &str| {
        let _ = writeln!(s, "{} {} {} {rgb}", format_float(p.x), format_float(p.y), format_float(p.z));
    };
    for (_, p) in trajectory {
        vertex(p, "255 255 255");
    }
    for c in centers {
        vertex(c, "255 0 0");
    }
    s
}

/// Names of the files written by [`export_results`].
pub const TRAJECTORY_FILE: &str = "trajectory.csv";
pub const CAMERAS_FILE: &str = "cameras.json";
pub const REPORT_FILE: &str = "report.json";
pub const POINT_CLOUD_FILE: &str = "reconstruction.ply";

/// Writes the trajectory at anchor-frame resolution, the camera report, the
/// run report and a point cloud into `dir`.
pub fn export_results(state: &ReconstructionState, dir: &Path) -> Result<Vec<PathBuf>, IoError> {
    let samples = state.trajectory.sample_grid(1.0);
    let cameras: Vec<CameraRecord> = state
        .cameras
        .iter()
        .enumerate()
        .map(|(i, c)| CameraRecord::new(i, c.pose.as_ref(), &c.time_model, c.track.len(), state.inlier_sets[i].len()))
        .collect();
    let centers: Vec<Vector3<f64>> = state.cameras.iter().filter_map(|c| c.pose.map(|p| p.center)).collect();
    let report = json!({
        "anchor": state.anchor,
        "pose_anchor": state.pose_anchor,
        "covered_duration": state.trajectory.covered_duration(),
        "segments": state.trajectory.segments().len(),
        "gaps": state.trajectory.gaps(),
        "config": state.config,
        "stats": state.stats,
    });
    let files = [
        (TRAJECTORY_FILE, trajectory_to_text(&samples)),
        (CAMERAS_FILE, to_json(&cameras)),
        (REPORT_FILE, to_json(&report)),
        (POINT_CLOUD_FILE, point_cloud_to_ply(&samples, &centers)),
    ];
    let mut written = Vec::new();
    for (name, contents) in files {
        let path = dir.join(name);
        write(&path, &contents)?;
        written.push(path);
    }
    Ok(written)
}

/// Files of a simulated project.
pub const SCENE_FILE: &str = "scene.toml";
pub const PROJECT_FILE: &str = "project.toml";
pub const GROUND_TRUTH_DIR: &str = "ground_truth";

/// Writes tracks, intrinsics, a project file and the ground truth of a
/// simulated scene into `dir`. Returns the project file path.
pub fn write_simulation(
    dir: &Path,
    spec: &SceneSpec,
    tracks: &[Vec<Detection2D>],
    gt: &GroundTruth,
    pipeline: &PipelineConfig,
) -> Result<PathBuf, IoError> {
    write(&dir.join(SCENE_FILE), &to_toml(spec))?;
    let mut cameras = Vec::with_capacity(tracks.len());
    for (i, (track, cam)) in tracks.iter().zip(&spec.cameras).enumerate() {
        let track_name = format!("camera_{i}.csv");
        let intr_name = format!("camera_{i}.toml");
        TrackFile::from_detections(i, cam.fps, track).save(&dir.join(&track_name))?;
        save_intrinsics(&dir.join(&intr_name), &cam.intrinsics)?;
        cameras.push(CameraEntry {
            track: track_name.into(),
            intrinsics: intr_name.into(),
            fps: None,
        });
    }
    let project = ProjectConfig {
        output_dir: Some("reconstruction".into()),
        cameras,
        pipeline: pipeline.clone(),
    };
    let project_path = dir.join(PROJECT_FILE);
    project.save(&project_path)?;
    let gt_dir = dir.join(GROUND_TRUTH_DIR);
    save_trajectory(&gt_dir.join(TRAJECTORY_FILE), &gt.sampled_trajectory())?;
    let records: Vec<CameraRecord> = gt
        .cameras
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let clean = c.detections.iter().filter(|d| !d.outlier).count();
            CameraRecord::new(i, Some(&c.pose), &c.time_model, tracks[i].len(), clean)
        })
        .collect();
    write(&gt_dir.join(CAMERAS_FILE), &to_json(&records))?;
    Ok(project_path)
}

pub fn load_scene(path: &Path) -> Result<SceneSpec, IoError> {
    parse_toml(path)
}
