//! Incremental reconstruction: pairwise synchronization of all cameras, an
//! initial two-view trajectory, camera-by-camera registration with trajectory
//! extension, and bundle adjustment after every step.

use std::collections::VecDeque;

use log::{debug, info, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ba::{BACamera, BAError, BAObservation, BAOptions, BAProblem, BAReport, CameraFixed, PriorKind};
use crate::correspondence::{detection_times, interpolate_track, match_2d2d, match_3d2d, Match2D2D, MatchConfig};
use crate::estimation::{
    refine_drifting_shift, solve_p3p_ransac, solve_two_view_sync, triangulate, EstimationError, Observation, P3pResult, RansacConfig,
    TwoViewResult,
};
use crate::geometry::{project, sampson_distance, CameraIntrinsics, CameraPose, EssentialMatrix, Point2, Point3};
use crate::spline::{MergeSummary, TimedPoint, TrajectoryModel};
use crate::time::{is_valid_track, ClockCorrection, Detection2D, TimeModel};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PipelineError {
    #[error("no camera pair has enough overlap for two-view geometry")]
    NotEnoughOverlap,
    #[error("image motion is nearly collinear (covariance eigenvalue ratio {eigen_ratio:e})")]
    DegenerateMotion { eigen_ratio: f64 },
    #[error("no remaining camera can be registered")]
    NoRegistrableCamera,
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Estimation(#[from] EstimationError),
    #[error(transparent)]
    BundleAdjustment(#[from] BAError),
}

/// Detection track of one camera with its calibration.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraInput {
    pub intrinsics: CameraIntrinsics,
    pub nominal_fps: f64,
    pub track: Vec<Detection2D>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Camera defining global time and, when possible, the world frame.
    pub anchor: usize,
    /// Inlier threshold for all robust steps, pixels.
    pub pixel_threshold: f64,
    pub ransac_confidence: f64,
    pub ransac_max_iterations: usize,
    /// Largest clock offset between two cameras that is searched, frames.
    pub max_clock_offset: f64,
    /// Spacing of the coarse clock offset search, frames.
    pub offset_search_step: f64,
    /// Iteration cap of each coarse-search RANSAC run.
    pub coarse_iterations: usize,
    /// Re-matching rounds after the coarse search.
    pub max_sync_rounds: usize,
    /// Fewest 2D↔2D matches for a pair to be solved.
    pub min_pair_matches: usize,
    pub match_window: usize,
    pub max_frame_gap: i64,
    pub knot_spacing: f64,
    /// Estimate rolling-shutter readout speeds in bundle adjustment.
    pub rolling_shutter: bool,
    pub prior: PriorKind,
    pub prior_weight: Option<f64>,
    /// Estimate clock offsets from two-view geometry.
    pub two_view_sync: bool,
    /// Refine clocks in bundle adjustment.
    pub ba_sync: bool,
    pub ba_max_iterations: usize,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            anchor: 0,
            pixel_threshold: 3.0,
            ransac_confidence: 0.999,
            ransac_max_iterations: 10_000,
            max_clock_offset: 90.0,
            offset_search_step: 6.0,
            coarse_iterations: 150,
            max_sync_rounds: 6,
            min_pair_matches: 16,
            match_window: 8,
            max_frame_gap: 3,
            knot_spacing: 5.0,
            rolling_shutter: false,
            prior: PriorKind::None,
            prior_weight: None,
            two_view_sync: true,
            ba_sync: true,
            ba_max_iterations: 200,
            seed: 0,
        }
    }
}

/// Two-view result of one camera pair.
#[derive(Debug, Clone, Serialize)]
pub struct PairEntry {
    pub source: usize,
    pub target: usize,
    pub matches: usize,
    pub inliers: usize,
    pub inlier_ratio: f64,
    /// Maps the target camera's nominal times onto the source camera's
    /// nominal clock.
    pub correction: ClockCorrection,
    #[serde(skip)]
    pub essential: EssentialMatrix,
    /// Target camera in the source camera frame, unit baseline.
    #[serde(skip)]
    pub relative_pose: CameraPose,
}

#[derive(Debug, Clone)]
pub struct CameraState {
    pub intrinsics: CameraIntrinsics,
    pub nominal_fps: f64,
    pub track: Vec<Detection2D>,
    pub pose: Option<CameraPose>,
    pub time_model: TimeModel,
    /// Connected to the anchor through synchronized pairs.
    pub synchronized: bool,
}

impl CameraState {
    pub fn registered(&self) -> bool {
        self.pose.is_some()
    }

    fn match_config(&self, pixel_threshold: f64, cfg: &PipelineConfig) -> MatchConfig {
        MatchConfig {
            window: cfg.match_window,
            max_frame_gap: cfg.max_frame_gap,
            trim_threshold: Some(pixel_threshold / self.intrinsics.mean_focal()),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct ReconstructionStats {
    pub pairs: Vec<PairEntry>,
    /// `(source, target, reason)` of pairs without a two-view result.
    pub pair_failures: Vec<(usize, usize, String)>,
    /// Clocks right after the pairwise sweep.
    pub sweep_time_models: Vec<TimeModel>,
    pub unsynchronized: Vec<usize>,
    pub registration_order: Vec<usize>,
    pub unregistered: Vec<usize>,
    pub reprojection_rms_px: f64,
    /// Per camera, fraction of detections inside the trajectory.
    pub coverage: Vec<f64>,
    pub ba_reports: Vec<BAReport>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct ReconstructionState {
    pub cameras: Vec<CameraState>,
    pub trajectory: TrajectoryModel,
    /// Time anchor.
    pub anchor: usize,
    /// Camera whose frame is the world frame.
    pub pose_anchor: Option<usize>,
    /// Camera and center axis fixing the scale.
    pub scale_reference: Option<(usize, usize)>,
    /// Per camera, indices of detections consistent with the reconstruction.
    pub inlier_sets: Vec<Vec<usize>>,
    pub stats: ReconstructionStats,
    pub config: PipelineConfig,
}

impl ReconstructionState {
    pub fn new(inputs: Vec<CameraInput>, config: PipelineConfig) -> Result<Self, PipelineError> {
        if inputs.len() < 2 {
            return Err(PipelineError::InvalidInput("need at least two cameras".into()));
        }
        if config.anchor >= inputs.len() {
            return Err(PipelineError::InvalidInput(format!("anchor {} out of range", config.anchor)));
        }
        if !(config.pixel_threshold > 0.0 && config.knot_spacing > 0.0 && config.offset_search_step > 0.0) {
            return Err(PipelineError::InvalidInput("thresholds must be positive".into()));
        }
        let anchor_fps = inputs[config.anchor].nominal_fps;
        let mut cameras = Vec::with_capacity(inputs.len());
        for (i, c) in inputs.into_iter().enumerate() {
            c.intrinsics
                .validate()
                .map_err(|e| PipelineError::InvalidInput(format!("camera {i}: {e}")))?;
            if !(c.nominal_fps > 0.0) || !anchor_fps.is_finite() {
                return Err(PipelineError::InvalidInput(format!("camera {i}: bad frame rate")));
            }
            if !is_valid_track(&c.track) {
                return Err(PipelineError::InvalidInput(format!("camera {i}: frames must increase")));
            }
            cameras.push(CameraState {
                time_model: TimeModel::from_nominal_rates(anchor_fps, c.nominal_fps),
                intrinsics: c.intrinsics,
                nominal_fps: c.nominal_fps,
                track: c.track,
                pose: None,
                synchronized: i == config.anchor,
            });
        }
        let n = cameras.len();
        Ok(Self {
            cameras,
            trajectory: TrajectoryModel::new(config.knot_spacing),
            anchor: config.anchor,
            pose_anchor: None,
            scale_reference: None,
            inlier_sets: vec![Vec::new(); n],
            stats: ReconstructionStats::default(),
            config,
        })
    }

    pub fn registered(&self) -> Vec<usize> {
        (0..self.cameras.len()).filter(|&c| self.cameras[c].registered()).collect()
    }

    fn nominal(&self, c: usize) -> TimeModel {
        TimeModel::from_nominal_rates(self.cameras[self.anchor].nominal_fps, self.cameras[c].nominal_fps)
    }

    fn ransac(&self, a: usize, b: usize) -> RansacConfig {
        RansacConfig {
            confidence: self.config.ransac_confidence,
            max_iterations: self.config.ransac_max_iterations,
            seed: self.config.seed ^ ((a as u64) << 32 | b as u64),
            ..Default::default()
        }
        .with_pixel_threshold(
            self.config.pixel_threshold,
            self.cameras[a].intrinsics.mean_focal(),
            self.cameras[b].intrinsics.mean_focal(),
        )
    }

    /// Solves two-view geometry and clock offsets for every camera pair and
    /// propagates the clocks from the anchor along a maximum spanning tree of
    /// inlier counts.
    pub fn pairwise_sync_sweep(&mut self) -> Result<Vec<PairEntry>, PipelineError> {
        let n = self.cameras.len();
        let mut table = Vec::new();
        let mut degenerate: Option<f64> = None;
        for i in 0..n {
            for k in i + 1..n {
                match self.sync_pair(i, k) {
                    Ok(entry) => {
                        debug!(
                            "pair {i}-{k}: {} of {} inliers, offset {:.3}",
                            entry.inliers, entry.matches, entry.correction.offset
                        );
                        table.push(entry);
                    }
                    Err(e) => {
                        debug!("pair {i}-{k} failed: {e}");
                        if let PipelineError::Estimation(EstimationError::DegenerateMotion { eigen_ratio }) = e {
                            degenerate = Some(degenerate.map_or(eigen_ratio, |r: f64| r.max(eigen_ratio)));
                        }
                        self.stats.pair_failures.push((i, k, e.to_string()));
                    }
                }
            }
        }
        if table.is_empty() {
            return Err(match degenerate {
                Some(eigen_ratio) => PipelineError::DegenerateMotion { eigen_ratio },
                None => PipelineError::NotEnoughOverlap,
            });
        }

        let corrections = propagate_clocks(n, self.anchor, &table);
        for (c, corr) in corrections.iter().enumerate() {
            let nominal = self.nominal(c);
            let cam = &mut self.cameras[c];
            match corr {
                Some(corr) => {
                    cam.time_model = nominal.corrected(corr);
                    cam.synchronized = true;
                }
                None => {
                    cam.synchronized = false;
                    self.stats.unsynchronized.push(c);
                    let msg = format!("camera {c} shares no synchronized overlap with the anchor");
                    warn!("{msg}");
                    self.stats.warnings.push(msg);
                }
            }
        }
        self.stats.sweep_time_models = self.cameras.iter().map(|c| c.time_model).collect();
        self.stats.pairs = table.clone();
        Ok(table)
    }

    fn sync_pair(&self, i: usize, k: usize) -> Result<PairEntry, PipelineError> {
        let cfg = &self.config;
        let (cam_i, cam_k) = (&self.cameras[i], &self.cameras[k]);
        let (tm_i, tm_k) = (self.nominal(i), self.nominal(k));
        let mcfg = cam_k.match_config(cfg.pixel_threshold, cfg);
        let base = self.ransac(i, k);
        let build = |corr: &ClockCorrection| match_2d2d(&cam_i.track, &cam_k.track, &tm_i, &tm_k.corrected(corr), &mcfg);
        let enough = |m: &[Match2D2D]| {
            if m.len() < cfg.min_pair_matches {
                Err(PipelineError::Estimation(EstimationError::InsufficientMatches {
                    needed: cfg.min_pair_matches,
                    got: m.len(),
                }))
            } else {
                Ok(())
            }
        };
        let entry = |r: TwoViewResult, matches: usize, correction: ClockCorrection| PairEntry {
            source: i,
            target: k,
            matches,
            inliers: r.inliers.len(),
            inlier_ratio: r.inlier_ratio,
            correction,
            essential: r.essential,
            relative_pose: r.relative_pose,
        };

        if !cfg.two_view_sync {
            let matches = build(&ClockCorrection::IDENTITY);
            enough(&matches)?;
            let r = solve_two_view_sync(&matches, &RansacConfig { beta_bound: 0.0, ..base })?;
            return Ok(entry(r, matches.len(), ClockCorrection::IDENTITY));
        }

        // coarse search over clock offsets, nearest offsets first
        let step = cfg.offset_search_step;
        let reach = (cfg.max_clock_offset / step).ceil() as i64;
        let coarse = RansacConfig {
            beta_bound: (0.7 * step).max(1.0),
            max_iterations: cfg.coarse_iterations.min(cfg.ransac_max_iterations),
            // degeneracy is judged once, on the final inliers
            min_eigen_ratio: 0.0,
            ..base
        };
        let mut best: Option<(f64, TwoViewResult)> = None;
        let mut last_err = PipelineError::NotEnoughOverlap;
        for m in 0..=2 * reach {
            let o = if m % 2 == 1 { (m / 2 + 1) as f64 * step } else { -((m / 2) as f64) * step };
            let matches = build(&ClockCorrection { scale: 1.0, offset: o });
            if let Err(e) = enough(&matches) {
                last_err = e;
                continue;
            }
            match solve_two_view_sync(&matches, &coarse) {
                Ok(r) => {
                    if best.as_ref().is_none_or(|(_, b)| r.inliers.len() > b.inliers.len()) {
                        best = Some((o, r));
                    }
                }
                Err(e) => last_err = e.into(),
            }
        }
        let (o, r) = best.ok_or(last_err)?;
        let mut correction = ClockCorrection {
            scale: 1.0,
            offset: o + r.beta_shift,
        };

        // re-match with the improved clock and fit offset and drift
        let fine = RansacConfig { beta_bound: 2.0, ..base };
        let mut result: Option<(TwoViewResult, usize)> = None;
        for _ in 0..cfg.max_sync_rounds.max(1) {
            let matches = build(&correction);
            if enough(&matches).is_err() {
                break;
            }
            let r = match solve_two_view_sync(&matches, &fine) {
                Ok(r) => r,
                Err(e) if result.is_none() => return Err(e.into()),
                Err(_) => break,
            };
            let Some(drift) = fit_drift(&r, &matches, fine.threshold) else {
                result = Some((r, matches.len()));
                break;
            };
            correction = ClockCorrection {
                scale: 1.0 - drift.rate,
                offset: -drift.offset + drift.rate * drift.center,
            }
            .compose(&correction);
            result = Some((r, matches.len()));
            if drift.offset.abs() < 0.02 && drift.rate.abs() * drift.span < 0.02 {
                break;
            }
        }
        let (r, n) = result.ok_or(PipelineError::NotEnoughOverlap)?;
        Ok(entry(r, n, correction))
    }

    /// Installs the poses of the pair with the most inliers and triangulates
    /// the initial trajectory.
    pub fn initialize_pair(&mut self, pairs: &[PairEntry]) -> Result<(), PipelineError> {
        let best = pairs
            .iter()
            .filter(|p| self.cameras[p.source].synchronized && self.cameras[p.target].synchronized)
            .max_by(|a, b| a.inliers.cmp(&b.inliers).then(b.source.cmp(&a.source)).then(b.target.cmp(&a.target)))
            .ok_or(PipelineError::NotEnoughOverlap)?;
        let (i, k) = (best.source, best.target);
        let cfg = self.config.clone();
        let (tm_i, tm_k) = (self.cameras[i].time_model, self.cameras[k].time_model);
        let mcfg_k = self.cameras[k].match_config(cfg.pixel_threshold, &cfg);
        let matches = match_2d2d(&self.cameras[i].track, &self.cameras[k].track, &tm_i, &tm_k, &mcfg_k);
        if matches.len() < cfg.min_pair_matches {
            return Err(PipelineError::NotEnoughOverlap);
        }
        let r = solve_two_view_sync(&matches, &RansacConfig { beta_bound: 0.0, ..self.ransac(i, k) }).map_err(|e| match e {
            EstimationError::DegenerateMotion { eigen_ratio } => PipelineError::DegenerateMotion { eigen_ratio },
            e => e.into(),
        })?;

        let pose_anchor = if k == self.anchor { k } else { i };
        let rel = r.relative_pose;
        let (pose_i, pose_k) = if pose_anchor == i {
            (CameraPose::identity(), rel)
        } else {
            let rt = rel.rotation.transpose();
            (CameraPose::from_rt(rt, -(rt * rel.translation())), CameraPose::identity())
        };
        self.cameras[i].pose = Some(pose_i);
        self.cameras[k].pose = Some(pose_k);
        self.pose_anchor = Some(pose_anchor);
        let other = if pose_anchor == i { k } else { i };
        let c = self.cameras[other].pose.map(|p| p.center).unwrap_or_default();
        self.scale_reference = Some((other, c.iamax()));
        self.stats.registration_order = vec![pose_anchor, other];
        info!("initial pair {i}-{k} with {} inliers", r.inliers.len());

        let samples = self.triangulate_uncovered(&[i, k], None);
        let samples = reject_outlier_samples(samples, cfg.knot_spacing);
        self.trajectory.extend_or_merge(&samples);
        if self.trajectory.is_empty() {
            return Err(PipelineError::NotEnoughOverlap);
        }
        Ok(())
    }

    /// Registers the unregistered camera with the most 3D↔2D matches that
    /// admits a pose, then extends the trajectory with its detections.
    pub fn register_next_camera(&mut self) -> Result<usize, PipelineError> {
        let mut candidates: Vec<(usize, usize)> = (0..self.cameras.len())
            .filter(|&c| self.cameras[c].synchronized && !self.cameras[c].registered())
            .map(|c| {
                let cam = &self.cameras[c];
                (c, match_3d2d(&cam.track, &cam.time_model, &self.trajectory).len())
            })
            .filter(|&(_, n)| n >= 4)
            .collect();
        candidates.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        for (c, n) in candidates {
            let cam = &self.cameras[c];
            let ransac = self.ransac(c, c);
            // with an unknown readout, try a few and keep the best supported
            let fractions: &[f64] = if self.config.rolling_shutter { &[0.0, 0.5, 1.0, -0.5, -1.0] } else { &[0.0] };
            let mut best: Option<(TimeModel, P3pResult)> = None;
            let mut last_err = None;
            for f in fractions {
                let mut tm = cam.time_model;
                if self.config.rolling_shutter {
                    tm.rs_readout = f * tm.max_readout(cam.intrinsics.height());
                }
                let matches = match_3d2d(&cam.track, &tm, &self.trajectory);
                match solve_p3p_ransac(&matches, &ransac) {
                    Ok(res) if best.as_ref().is_none_or(|b| res.inliers.len() > b.1.inliers.len()) => best = Some((tm, res)),
                    Ok(_) => {}
                    Err(e) => last_err = Some(e),
                }
            }
            match best.ok_or(last_err) {
                Ok((tm, res)) => {
                    info!("registered camera {c} with {} of {n} matches", res.inliers.len());
                    self.cameras[c].pose = Some(res.pose);
                    self.cameras[c].time_model = tm;
                    self.stats.registration_order.push(c);
                    let before = self.trajectory.covered_duration();
                    let registered = self.registered();
                    let samples = self.triangulate_uncovered(&registered, None);
                    let samples = reject_outlier_samples(samples, self.config.knot_spacing);
                    self.trajectory.extend_or_merge(&samples);
                    debug!("coverage {before:.1} -> {:.1}", self.trajectory.covered_duration());
                    return Ok(c);
                }
                Err(e) => debug!("camera {c} not registrable: {e:?}"),
            }
        }
        Err(PipelineError::NoRegistrableCamera)
    }

    /// Triangulates detections of `cams` at times the trajectory does not
    /// cover, from every camera of `cams` that sees the target then. With
    /// `tracks`, those replace the stored tracks.
    fn triangulate_uncovered(&self, cams: &[usize], tracks: Option<&[Vec<Detection2D>]>) -> Vec<TimedPoint> {
        let track = |c: usize| -> &[Detection2D] {
            match tracks {
                Some(t) => t.get(c).map_or(&[], |v| v.as_slice()),
                None => &self.cameras[c].track,
            }
        };
        let times: Vec<Vec<f64>> = cams
            .iter()
            .map(|&c| detection_times(track(c), &self.cameras[c].time_model))
            .collect();
        let thr = self.config.pixel_threshold;
        let mut out = Vec::new();
        for (a, &c) in cams.iter().enumerate() {
            let Some(pose) = self.cameras[c].pose else { continue };
            for (d, &t) in track(c).iter().zip(&times[a]) {
                if self.trajectory.covers(t) {
                    continue;
                }
                let mut views = vec![(pose, d.normalized, self.cameras[c].intrinsics.mean_focal())];
                for (b, &o) in cams.iter().enumerate() {
                    let Some(pose_o) = self.cameras[o].pose.filter(|_| o != c) else { continue };
                    let mcfg = self.cameras[o].match_config(thr, &self.config);
                    if let Some(s) = interpolate_track(track(o), &times[b], t, &mcfg) {
                        views.push((pose_o, s.point, self.cameras[o].intrinsics.mean_focal()));
                    }
                }
                if let Some(x) = triangulate_robust(views, thr) {
                    out.push((t, x));
                }
            }
        }
        out.sort_by(|a, b| a.0.total_cmp(&b.0));
        out
    }

    /// Jointly refines the registered cameras and the trajectory.
    pub fn bundle_adjust(&mut self) -> Result<BAReport, PipelineError> {
        let registered = self.registered();
        let cfg = &self.config;
        let time_fix = if self.cameras[self.anchor].registered() {
            self.anchor
        } else {
            self.pose_anchor.unwrap_or(registered[0])
        };
        // two views triangulate any clock offset exactly
        let clocks_free = cfg.ba_sync && registered.len() >= 3;
        let mut observations = Vec::new();
        let mut cameras = Vec::with_capacity(registered.len());
        for (bi, &c) in registered.iter().enumerate() {
            let cam = &self.cameras[c];
            let mut covered = 0;
            for d in &cam.track {
                if self.trajectory.covers(cam.time_model.detection_time(d)) {
                    covered += 1;
                }
                observations.push(BAObservation {
                    camera: bi,
                    detection: *d,
                });
            }
            let mut fixed = CameraFixed {
                pose: Some(c) == self.pose_anchor,
                center_axis: self.scale_reference.filter(|s| s.0 == c).map(|s| s.1),
                alpha: c == time_fix || !clocks_free,
                beta: c == time_fix || !clocks_free,
                readout: !cfg.rolling_shutter,
            };
            if covered < 10 {
                fixed = CameraFixed {
                    pose: true,
                    center_axis: None,
                    alpha: true,
                    beta: true,
                    readout: true,
                };
            }
            cameras.push(BACamera {
                pose: cam.pose.expect("registered"),
                time_model: cam.time_model,
                focal: cam.intrinsics.mean_focal(),
                image_height: cam.intrinsics.height(),
                fixed,
            });
        }
        let mut problem = BAProblem {
            cameras,
            segments: self.trajectory.segments().iter().map(|s| s.spline.clone()).collect(),
            observations,
            options: BAOptions {
                max_iterations: cfg.ba_max_iterations,
                huber_px: cfg.pixel_threshold,
                prior: cfg.prior,
                prior_weight: cfg.prior_weight,
                ..Default::default()
            },
        };
        let report = problem.solve()?;
        for (bi, &c) in registered.iter().enumerate() {
            self.cameras[c].pose = Some(problem.cameras[bi].pose);
            self.cameras[c].time_model = problem.cameras[bi].time_model;
        }
        for (s, seg) in problem.segments.iter().enumerate() {
            self.trajectory.set_segment_coefficients(s, seg.coefficients().to_vec());
        }
        debug!(
            "bundle adjustment: cost {:.4e} -> {:.4e} in {} iterations, rms {:.3} px",
            report.initial_cost, report.final_cost, report.iterations, report.rms_px
        );
        self.update_inliers(&problem, &registered);
        self.stats.reprojection_rms_px = report.rms_px;
        self.stats.ba_reports.push(report.clone());
        Ok(report)
    }

    fn update_inliers(&mut self, problem: &BAProblem, registered: &[usize]) {
        let residuals = problem.residuals_px();
        let mut offset = 0;
        for &c in registered {
            let n = self.cameras[c].track.len();
            self.inlier_sets[c] = (0..n)
                .filter(|&j| residuals[offset + j].is_some_and(|r| r <= self.config.pixel_threshold))
                .collect();
            offset += n;
        }
    }

    fn finalize_stats(&mut self) {
        self.stats.coverage = self
            .cameras
            .iter()
            .map(|c| {
                let n = c.track.iter().filter(|d| self.trajectory.covers(c.time_model.detection_time(d))).count();
                n as f64 / c.track.len().max(1) as f64
            })
            .collect();
        self.stats.unregistered = (0..self.cameras.len()).filter(|&c| !self.cameras[c].registered()).collect();
        for &c in &self.stats.unregistered {
            let msg = format!("camera {c} could not be registered");
            warn!("{msg}");
            self.stats.warnings.push(msg);
        }
    }

    /// Triangulates new tracks with all calibration frozen and returns the
    /// extended trajectory. Times already covered are left alone.
    pub fn tracking_mode(&self, new_tracks: &[Vec<Detection2D>]) -> TrajectoryModel {
        let registered = self.registered();
        let samples = self.triangulate_uncovered(&registered, Some(new_tracks));
        let samples = reject_outlier_samples(samples, self.config.knot_spacing);
        let mut trajectory = self.trajectory.clone();
        let _: MergeSummary = trajectory.extend_or_merge(&samples);
        trajectory
    }
}

/// Runs the whole pipeline on raw tracks.
pub fn run_full_reconstruction(
    inputs: Vec<CameraInput>,
    config: PipelineConfig,
) -> Result<ReconstructionState, PipelineError> {
    let mut state = ReconstructionState::new(inputs, config)?;
    let pairs = state.pairwise_sync_sweep()?;
    state.initialize_pair(&pairs)?;
    state.bundle_adjust()?;
    loop {
        let remaining = state.cameras.iter().any(|c| c.synchronized && !c.registered());
        if !remaining {
            break;
        }
        match state.register_next_camera() {
            Ok(_) => {
                state.bundle_adjust()?;
            }
            Err(PipelineError::NoRegistrableCamera) => break,
            Err(e) => return Err(e),
        }
    }
    let registered = state.registered();
    let samples = state.triangulate_uncovered(&registered, None);
    let samples = reject_outlier_samples(samples, state.config.knot_spacing);
    state.trajectory.extend_or_merge(&samples);
    state.bundle_adjust()?;
    state.finalize_stats();
    Ok(state)
}

/// Maximum spanning forest over inlier counts, traversed from the anchor.
/// Returns for every reachable camera the map from its nominal clock to
/// global time.
fn propagate_clocks(n: usize, anchor: usize, pairs: &[PairEntry]) -> Vec<Option<ClockCorrection>> {
    let mut order: Vec<&PairEntry> = pairs.iter().collect();
    order.sort_by(|a, b| b.inliers.cmp(&a.inliers).then(a.source.cmp(&b.source)).then(a.target.cmp(&b.target)));
    let mut parent: Vec<usize> = (0..n).collect();
    fn root(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    let mut tree: Vec<&PairEntry> = Vec::new();
    for p in order {
        let (a, b) = (root(&mut parent, p.source), root(&mut parent, p.target));
        if a != b {
            parent[a] = b;
            tree.push(p);
        }
    }
    let mut out = vec![None; n];
    out[anchor] = Some(ClockCorrection::IDENTITY);
    let mut queue = VecDeque::from([anchor]);
    while let Some(c) = queue.pop_front() {
        let here = out[c].expect("visited");
        for p in &tree {
            let (next, corr) = if p.source == c {
                (p.target, here.compose(&p.correction))
            } else if p.target == c {
                (p.source, here.compose(&p.correction.inverse()))
            } else {
                continue;
            };
            if out[next].is_none() {
                out[next] = Some(corr);
                queue.push_back(next);
            }
        }
    }
    out
}

struct Drift {
    /// Time shift at `center`, in the solver's sign convention.
    offset: f64,
    /// Shift change per frame.
    rate: f64,
    center: f64,
    span: f64,
}

/// χ² quantile (1 dof, 0.999) a drift must beat to be kept.
const DRIFT_SIGNIFICANCE: f64 = 10.83;

/// Shift `δ(t) = offset + rate (t − center)` of the target track, refined
/// jointly with the essential matrix. Inliers are re-selected under the
/// drifting shift until they settle. The rate is dropped unless it lowers
/// the inlier cost significantly.
fn fit_drift(r: &TwoViewResult, matches: &[Match2D2D], threshold: f64) -> Option<Drift> {
    let times: Vec<f64> = r.inliers.iter().map(|&i| matches[i].time).collect();
    if times.len() < 10 {
        return None;
    }
    let center = times.iter().sum::<f64>() / times.len() as f64;
    let (mut e, mut offset, mut rate) = (r.essential, -r.beta_shift, 0.0);
    let mut inliers = r.inliers.clone();
    for _ in 0..5 {
        let subset: Vec<&Match2D2D> = inliers.iter().map(|&i| &matches[i]).collect();
        (e, offset, rate) = refine_drifting_shift(&e, offset, &subset, center, rate, true);
        let next: Vec<usize> = (0..matches.len())
            .filter(|&i| drift_residual(&e, &matches[i], offset, rate, center) <= threshold)
            .collect();
        if next.len() < 10 || next == inliers {
            break;
        }
        inliers = next;
    }
    let subset: Vec<&Match2D2D> = inliers.iter().map(|&i| &matches[i]).collect();
    let cost = |e: &EssentialMatrix, o: f64, rt: f64| {
        subset.iter().map(|m| drift_residual(e, m, o, rt, center).powi(2)).sum::<f64>()
    };
    let drifting = cost(&e, offset, rate);
    let (e0, offset0, _) = refine_drifting_shift(&r.essential, -r.beta_shift, &subset, center, 0.0, false);
    let constant = cost(&e0, offset0, 0.0);
    let variance = drifting / (subset.len() - 8) as f64;
    if !(constant - drifting > DRIFT_SIGNIFICANCE * variance) {
        (offset, rate) = (offset0, 0.0);
    }
    let (lo, hi) = inliers
        .iter()
        .map(|&i| matches[i].time)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), t| (l.min(t), h.max(t)));
    (offset.is_finite() && rate.is_finite()).then_some(Drift {
        offset,
        rate,
        center,
        span: hi - lo,
    })
}

fn drift_residual(e: &EssentialMatrix, m: &Match2D2D, offset: f64, rate: f64, center: f64) -> f64 {
    let b = m.target_point + m.target_velocity * (offset + rate * (m.time - center));
    sampson_distance(e.matrix(), &m.source.normalized, &b)
}

/// Triangulates from all views, dropping the worst one while any
/// reprojection error exceeds `threshold_px`.
fn triangulate_robust(mut views: Vec<(CameraPose, Point2, f64)>, threshold_px: f64) -> Option<Point3> {
    loop {
        if views.len() < 2 {
            return None;
        }
        let obs: Vec<Observation> = views.iter().map(|(p, x, _)| Observation::new(*p, *x)).collect();
        let x = match triangulate(&obs) {
            Ok(x) => x,
            Err(EstimationError::BehindCamera { camera, .. }) if camera < views.len() => {
                views.remove(camera);
                continue;
            }
            Err(_) => return None,
        };
        let errors: Vec<f64> = views
            .iter()
            .map(|(p, u, f)| project(p, &x).map_or(f64::INFINITY, |q| (q - u).norm() * f))
            .collect();
        let (worst, err) = errors
            .iter()
            .copied()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(&b.1))?;
        if err <= threshold_px {
            return Some(x);
        }
        views.remove(worst);
    }
}

/// Drops triangulated samples far from a preliminary trajectory fit.
fn reject_outlier_samples(mut samples: Vec<TimedPoint>, knot_spacing: f64) -> Vec<TimedPoint> {
    for _ in 0..2 {
        let mut model = TrajectoryModel::new(knot_spacing);
        model.extend_or_merge(&samples);
        let residuals: Vec<Option<f64>> = samples
            .iter()
            .map(|(t, p)| model.eval(*t).ok().map(|x| (x - p).norm()))
            .collect();
        let mut sorted: Vec<f64> = residuals.iter().flatten().copied().collect();
        if sorted.len() < 8 {
            return samples;
        }
        sorted.sort_by(f64::total_cmp);
        let limit = 3.0 * 1.4826 * sorted[sorted.len() / 2] + 1e-12;
        samples = samples
            .into_iter()
            .zip(residuals)
            .filter(|(_, r)| r.is_none_or(|r| r <= limit))
            .map(|(s, _)| s)
            .collect();
    }
    samples
}
