use flytrack::eval::{evaluate_trajectory, umeyama};
use flytrack::pipeline::{run_full_reconstruction, CameraInput, PipelineConfig, PipelineError, ReconstructionState};
use flytrack::synth::{compare, generate, GroundTruth, Harmonic, SceneSpec, TrajectoryGenerator};
use flytrack::time::Detection2D;

fn scene(cams: usize, duration: f64, betas: &[f64], seed: u64) -> (SceneSpec, Vec<Vec<Detection2D>>, GroundTruth) {
    let mut spec = SceneSpec::standard(seed);
    spec.cameras.truncate(cams);
    spec.duration = duration;
    for (c, b) in spec.cameras.iter_mut().zip(betas) {
        c.beta = *b;
    }
    let (tracks, gt) = generate(&spec).unwrap();
    (spec, tracks, gt)
}

fn inputs(spec: &SceneSpec, tracks: Vec<Vec<Detection2D>>) -> Vec<CameraInput> {
    tracks
        .into_iter()
        .zip(&spec.cameras)
        .map(|(track, c)| CameraInput {
            intrinsics: c.intrinsics.clone(),
            nominal_fps: c.fps,
            track,
        })
        .collect()
}

fn fast_config() -> PipelineConfig {
    PipelineConfig {
        max_clock_offset: 24.0,
        ..Default::default()
    }
}

fn keep_times(track: &[Detection2D], gt: &GroundTruth, cam: usize, keep: impl Fn(f64) -> bool) -> Vec<Detection2D> {
    let times: std::collections::HashMap<i64, f64> =
        gt.cameras[cam].detections.iter().map(|d| (d.frame_index, d.time)).collect();
    track.iter().filter(|d| keep(times[&d.frame_index])).copied().collect()
}

fn trajectory_rmse(state: &ReconstructionState, gt: &GroundTruth) -> f64 {
    let est = state.trajectory.sample_grid(1.0);
    let reference: Vec<_> = est.iter().map(|(t, _)| (*t, gt.trajectory.position(*t))).collect();
    evaluate_trajectory(&est, &reference, true).unwrap().rmse
}

#[test]
fn two_camera_sweep_recovers_offset() {
    let (spec, tracks, gt) = scene(2, 400.0, &[0.0, 10.0], 3);
    let mut state = ReconstructionState::new(inputs(&spec, tracks), fast_config()).unwrap();
    let table = state.pairwise_sync_sweep().unwrap();
    assert_eq!(table.len(), 1);
    let beta = state.cameras[1].time_model.beta;
    assert!((beta - gt.cameras[1].time_model.beta).abs() < 1.0, "{beta}");
    assert_eq!(state.cameras[0].time_model.beta, 0.0);
    assert_eq!(state.cameras[0].time_model.alpha, 1.0);
}

#[test]
fn four_camera_sweep_is_consistent() {
    let (spec, tracks, gt) = scene(4, 400.0, &[0.0, 6.0, -4.0, 3.0], 4);
    let mut state = ReconstructionState::new(inputs(&spec, tracks), fast_config()).unwrap();
    let table = state.pairwise_sync_sweep().unwrap();
    assert_eq!(table.len() + state.stats.pair_failures.len(), 6);
    assert!(table.len() >= 3);
    for (c, truth) in state.cameras.iter().zip(&gt.cameras) {
        // compare mid-sequence clock readings
        let mid = 200.0 / truth.time_model.alpha;
        let err = c.time_model.frame_to_time(mid) - truth.time_model.frame_to_time(mid);
        assert!(err.abs() < 1.0, "{err}");
    }
}

#[test]
fn camera_without_overlap_is_excluded() {
    let (spec, tracks, gt) = scene(3, 400.0, &[0.0, 0.0, 0.0], 5);
    let mut tracks = tracks;
    tracks[0] = keep_times(&tracks[0], &gt, 0, |t| t > 200.0);
    tracks[1] = keep_times(&tracks[1], &gt, 1, |t| t > 200.0);
    tracks[2] = keep_times(&tracks[2], &gt, 2, |t| t < 100.0);
    let state = run_full_reconstruction(inputs(&spec, tracks), fast_config()).unwrap();
    assert!(state.stats.unsynchronized.contains(&2));
    assert!(!state.cameras[2].registered());
    assert!(!state.stats.warnings.is_empty());
    assert!(state.cameras[0].registered() && state.cameras[1].registered());
}

#[test]
fn initial_pair_reprojects_well() {
    let (spec, tracks, gt) = scene(2, 300.0, &[0.0, 4.0], 6);
    let mut state = ReconstructionState::new(inputs(&spec, tracks), fast_config()).unwrap();
    let table = state.pairwise_sync_sweep().unwrap();
    state.initialize_pair(&table).unwrap();
    assert_eq!(state.pose_anchor, Some(0));
    let pose0 = state.cameras[0].pose.unwrap();
    assert!((pose0.rotation - nalgebra::Matrix3::identity()).norm() < 1e-12 && pose0.center.norm() < 1e-12);
    assert!((state.cameras[1].pose.unwrap().center.norm() - 1.0).abs() < 1e-9);
    let (a, b) = (state.trajectory.segments()[0].spline.t_min(), state.trajectory.segments().last().unwrap().spline.t_max());
    assert!(a < 20.0 && b > 280.0, "{a} {b}");
    let mut sq = 0.0;
    let mut n = 0;
    for (c, cam) in state.cameras.iter().enumerate() {
        let f = cam.intrinsics.mean_focal();
        for (d, truth) in cam.track.iter().zip(&gt.cameras[c].detections) {
            if truth.outlier {
                continue;
            }
            let Ok(x) = state.trajectory.eval(cam.time_model.detection_time(d)) else { continue };
            let p = flytrack::geometry::project(&cam.pose.unwrap(), &x).unwrap();
            sq += ((p - d.normalized) * f).norm_squared();
            n += 1;
        }
    }
    let rms = (sq / n as f64).sqrt();
    assert!(rms < 2.0 * std::f64::consts::SQRT_2, "{rms}");
}

#[test]
fn initial_pair_prefers_most_inliers() {
    let (spec, tracks, _) = scene(3, 300.0, &[0.0, 0.0, 0.0], 7);
    let mut state = ReconstructionState::new(inputs(&spec, tracks), fast_config()).unwrap();
    let mut table = state.pairwise_sync_sweep().unwrap();
    for p in &mut table {
        let chosen = p.source == 1 && p.target == 2;
        p.inliers = if chosen { (0.9 * p.matches as f64) as usize } else { (0.4 * p.matches as f64) as usize };
    }
    state.initialize_pair(&table).unwrap();
    assert!(!state.cameras[0].registered());
    assert!(state.cameras[1].registered() && state.cameras[2].registered());
    assert_eq!(state.pose_anchor, Some(1));
}

#[test]
fn straight_flight_is_degenerate() {
    let mut spec = SceneSpec::standard(8);
    spec.cameras.truncate(3);
    spec.duration = 300.0;
    spec.trajectory = TrajectoryGenerator {
        center: [0.0, 0.0, 22.0],
        harmonics: vec![Harmonic {
            amplitude: [4000.0, 3000.0, 500.0],
            period: 1e5,
            phase: [0.0; 3],
        }],
    };
    let (tracks, _) = generate(&spec).unwrap();
    let err = run_full_reconstruction(inputs(&spec, tracks), fast_config()).unwrap_err();
    assert!(matches!(err, PipelineError::DegenerateMotion { .. }), "{err}");
}

#[test]
fn registration_places_third_camera() {
    let (spec, tracks, gt) = scene(3, 400.0, &[0.0, 3.0, -2.0], 19);
    let mut state = ReconstructionState::new(inputs(&spec, tracks), fast_config()).unwrap();
    let table = state.pairwise_sync_sweep().unwrap();
    let pair: Vec<_> = table.into_iter().filter(|p| p.source == 0 && p.target == 1).collect();
    state.initialize_pair(&pair).unwrap();
    state.bundle_adjust().unwrap();
    let c = state.register_next_camera().unwrap();
    assert_eq!(c, 2);
    state.bundle_adjust().unwrap();
    // similarity from the reconstructed trajectory onto the ground truth
    let est = state.trajectory.sample_grid(1.0);
    let src: Vec<_> = est.iter().map(|p| p.1).collect();
    let dst: Vec<_> = est.iter().map(|p| gt.trajectory.position(p.0)).collect();
    let sim = umeyama(&src, &dst).unwrap();
    let center = sim.apply(&state.cameras[2].pose.unwrap().center);
    let err = (center - gt.cameras[2].pose.center).norm();
    assert!(err < 0.01 * 120.0, "{err}");
}

#[test]
fn registration_extends_coverage() {
    let (spec, tracks, gt) = scene(3, 600.0, &[0.0, 0.0, 0.0], 10);
    let mut tracks = tracks;
    tracks[1] = keep_times(&tracks[1], &gt, 1, |t| t < 420.0);
    let mut state = ReconstructionState::new(inputs(&spec, tracks), fast_config()).unwrap();
    let table = state.pairwise_sync_sweep().unwrap();
    let pair: Vec<_> = table.into_iter().filter(|p| p.source == 0 && p.target == 1).collect();
    state.initialize_pair(&pair).unwrap();
    let before = state.trajectory.covered_duration();
    state.register_next_camera().unwrap();
    let after = state.trajectory.covered_duration();
    assert!(after >= before);
    assert!(after > 1.25 * before, "{before} -> {after}");
    let last = state.trajectory.segments().last().unwrap().spline.t_max();
    assert!(last > 530.0, "{last}");
}

#[test]
fn camera_in_gaps_is_not_registrable() {
    let (spec, tracks, gt) = scene(3, 400.0, &[0.0, 0.0, 0.0], 11);
    let mut tracks = tracks;
    tracks[0] = keep_times(&tracks[0], &gt, 0, |t| t < 250.0);
    tracks[1] = keep_times(&tracks[1], &gt, 1, |t| t < 250.0);
    let full2 = tracks[2].clone();
    tracks[2] = keep_times(&full2, &gt, 2, |t| t < 250.0);
    let mut state = ReconstructionState::new(inputs(&spec, tracks), fast_config()).unwrap();
    let table = state.pairwise_sync_sweep().unwrap();
    let pair: Vec<_> = table.into_iter().filter(|p| p.source == 0 && p.target == 1).collect();
    state.initialize_pair(&pair).unwrap();
    state.cameras[2].track = keep_times(&full2, &gt, 2, |t| t > 300.0);
    assert_eq!(state.register_next_camera(), Err(PipelineError::NoRegistrableCamera));
}

#[test]
fn two_camera_minimum_completes() {
    let (spec, tracks, gt) = scene(2, 300.0, &[0.0, 5.0], 12);
    let state = run_full_reconstruction(inputs(&spec, tracks), fast_config()).unwrap();
    assert_eq!(state.registered(), vec![0, 1]);
    assert_eq!(state.stats.ba_reports.len(), 2);
    assert!((state.cameras[1].time_model.beta - gt.cameras[1].time_model.beta).abs() < 0.3);
    // the scale-fixing center axis stays away from zero
    let d = state.cameras[1].pose.unwrap().center - state.cameras[0].pose.unwrap().center;
    let axis = state.scale_reference.unwrap().1;
    assert!(d[axis].abs() > 0.5);
}

#[test]
fn full_reconstruction_standard_scene() {
    let (spec, tracks, gt) = scene(4, 600.0, &[0.0, 7.0, -5.0, 4.0], 13);
    let state = run_full_reconstruction(inputs(&spec, tracks), PipelineConfig::default()).unwrap();
    assert_eq!(state.registered().len(), 4);
    let pose_anchor = state.pose_anchor.unwrap();
    let p = state.cameras[pose_anchor].pose.unwrap();
    assert!(p.center.norm() < 1e-12 && (p.rotation - nalgebra::Matrix3::identity()).norm() < 1e-12);
    let tm = state.cameras[state.anchor].time_model;
    assert!(tm.alpha == 1.0 && tm.beta == 0.0);
    let rmse = trajectory_rmse(&state, &gt);
    assert!(rmse < 0.05, "{rmse}");
    let report = compare(&state, &gt).unwrap();
    assert!((report.rmse - rmse).abs() < 0.005, "{} {rmse}", report.rmse);
    assert!(report.mean <= report.rmse);
    for (c, truth) in state.cameras.iter().zip(&gt.cameras) {
        assert!((c.time_model.beta - truth.time_model.beta).abs() < 0.3);
    }
    // coverage never shrinks while cameras are added
    assert!(state.stats.coverage.iter().all(|&c| c > 0.9));
}

#[test]
fn reconstruction_is_deterministic() {
    let (spec, tracks, _) = scene(3, 300.0, &[0.0, 2.0, -3.0], 14);
    let a = run_full_reconstruction(inputs(&spec, tracks.clone()), fast_config()).unwrap();
    let b = run_full_reconstruction(inputs(&spec, tracks), fast_config()).unwrap();
    assert_eq!(a.inlier_sets, b.inlier_sets);
    assert_eq!(a.stats.registration_order, b.stats.registration_order);
    for (x, y) in a.cameras.iter().zip(&b.cameras) {
        assert_eq!(x.time_model, y.time_model);
        assert_eq!(x.pose, y.pose);
    }
}

#[test]
fn tracking_mode_behaviour() {
    let (spec, tracks, gt) = scene(3, 600.0, &[0.0, 0.0, 0.0], 15);
    let calib: Vec<_> = tracks.iter().enumerate().map(|(c, t)| keep_times(t, &gt, c, |t| t < 350.0)).collect();
    let state = run_full_reconstruction(inputs(&spec, calib.clone()), fast_config()).unwrap();

    let same = state.tracking_mode(&calib);
    assert_eq!(same.segments().len(), state.trajectory.segments().len());
    for t in (10..340).step_by(7) {
        let (a, b) = (same.eval(t as f64), state.trajectory.eval(t as f64));
        if let (Ok(a), Ok(b)) = (a, b) {
            assert!((a - b).norm() < 1e-6);
        }
    }

    let extended = state.tracking_mode(&tracks);
    assert!(extended.covers(500.0));
    assert!(extended.covered_duration() > state.trajectory.covered_duration() + 200.0);
    // poses and clocks are untouched
    let est = extended.sample_grid(1.0);
    let reference: Vec<_> = est.iter().map(|(t, _)| (*t, gt.trajectory.position(*t))).collect();
    assert!(evaluate_trajectory(&est, &reference, true).unwrap().rmse < 0.1);

    let mut single = vec![Vec::new(); 3];
    single[1] = tracks[1].clone();
    let one = state.tracking_mode(&single);
    assert_eq!(one.covered_duration(), state.trajectory.covered_duration());
}
