//! Bundle adjustment of camera poses, clocks, rolling-shutter speeds and the
//! trajectory splines, with optional motion priors on the trajectory.
//!
//! Reprojection residuals are scaled by the focal length into pixels and
//! pass through a Huber loss. The normal equations are assembled
//! densely from sparse residual rows and solved with Levenberg–Marquardt.

use nalgebra::{DMatrix, DVector, Matrix2x3, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{skew, so3_exp, CameraPose};
use crate::spline::{SplineError, Spline3};
use crate::time::{Detection2D, TimeModel};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BAError {
    #[error("parameter {0} has no residual support")]
    RankDeficient(String),
    #[error("no observation falls inside the trajectory")]
    NoObservations,
    #[error("linear system could not be solved")]
    SolverFailure,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PriorKind {
    /// Spline smoothness only.
    #[default]
    None,
    /// Sum of squared finite-difference velocities.
    Kinetic,
    /// Sum of norms of finite-difference velocity changes.
    Force,
    /// Squared variant of `Force`.
    ForceSquared,
}

impl std::str::FromStr for PriorKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(Self::None),
            "kinetic" => Ok(Self::Kinetic),
            "force" => Ok(Self::Force),
            "force-squared" => Ok(Self::ForceSquared),
            _ => Err(format!("unknown prior `{s}`; expected none, kinetic, force or force-squared")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CameraFixed {
    pub pose: bool,
    /// Fixes one coordinate of the center (scale gauge).
    pub center_axis: Option<usize>,
    pub alpha: bool,
    pub beta: bool,
    pub readout: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BACamera {
    pub pose: CameraPose,
    pub time_model: TimeModel,
    /// Pixels per normalized unit, used to express residuals in pixels.
    pub focal: f64,
    pub image_height: f64,
    pub fixed: CameraFixed,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BAObservation {
    pub camera: usize,
    pub detection: Detection2D,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BAOptions {
    pub max_iterations: usize,
    pub relative_cost_tolerance: f64,
    pub gradient_tolerance: f64,
    /// Stop once the largest parameter update falls below this.
    pub step_tolerance: f64,
    /// Huber scale in pixels.
    pub huber_px: f64,
    pub prior: PriorKind,
    /// `None` selects the weight automatically.
    pub prior_weight: Option<f64>,
    /// Automatic weight: the prior starts at this fraction of the
    /// reprojection cost.
    pub auto_prior_fraction: f64,
    /// Observations with an initial residual above
    /// `max(gate_floor_px, 3·1.4826·median)` are left out.
    pub gate_floor_px: f64,
    pub gate_rounds: usize,
}

impl Default for BAOptions {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            relative_cost_tolerance: 1e-10,
            gradient_tolerance: 1e-12,
            step_tolerance: 1e-10,
            huber_px: 3.0,
            prior: PriorKind::None,
            prior_weight: None,
            auto_prior_fraction: 0.1,
            gate_floor_px: 15.0,
            gate_rounds: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BAProblem {
    pub cameras: Vec<BACamera>,
    pub segments: Vec<Spline3>,
    pub observations: Vec<BAObservation>,
    pub options: BAOptions,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct BAReport {
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
    /// Total cost after every accepted step, starting with the initial cost.
    pub cost_trace: Vec<f64>,
    /// Robust reprojection part of the final cost.
    pub reprojection_cost: f64,
    /// Unweighted motion-prior energy of the final trajectory.
    pub prior_energy: f64,
    pub prior_weight: f64,
    pub converged: bool,
    pub used_observations: usize,
    pub gated_out: usize,
    /// Observations outside every segment, not part of the problem.
    pub uncovered: usize,
    /// Used observations whose time drifted outside their segment.
    pub dropped_out_of_range: usize,
    /// RMS reprojection error of the used observations, pixels.
    pub rms_px: f64,
}

/// `d − μ(R(X(t) − C))` in normalized coordinates for the detection time
/// given by `tm`.
pub fn residual_reprojection(
    pose: &CameraPose,
    tm: &TimeModel,
    segment: &Spline3,
    d: &Detection2D,
) -> Result<Vector2<f64>, SplineError> {
    let x = segment.eval(tm.detection_time(d))?;
    let c = pose.to_camera(&x);
    Ok(d.normalized - Vector2::new(c.x / c.z, c.y / c.z))
}

/// Prior sample times: every global frame from the segment start.
pub fn prior_sample_times(segment: &Spline3) -> Vec<f64> {
    let (a, b) = segment.valid_interval();
    let n = ((b - a) + 1e-9).floor() as usize;
    (0..=n).map(|m| a + m as f64).collect()
}

/// Finite-difference velocities between consecutive sample positions.
pub fn residual_kinetic(segment: &Spline3, sample_times: &[f64]) -> Vec<Vector3<f64>> {
    let x: Vec<_> = sample_times.iter().map(|&t| segment.eval_extended(t)).collect();
    sample_times
        .windows(2)
        .zip(x.windows(2))
        .map(|(t, p)| (p[1] - p[0]) / (t[1] - t[0]))
        .collect()
}

/// Norms of consecutive velocity changes.
pub fn residual_force(segment: &Spline3, sample_times: &[f64]) -> Vec<f64> {
    residual_kinetic(segment, sample_times)
        .windows(2)
        .map(|v| (v[1] - v[0]).norm())
        .collect()
}

const CAMERA_PARAMS: usize = 9;
const ALPHA: usize = 6;
const BETA: usize = 7;
const READOUT: usize = 8;

/// Sparse Jacobian row.
type Row = Vec<(usize, f64)>;

/// A linear combination of spline control points of one segment.
type CoeffCombo = Vec<(usize, f64)>;

#[derive(Debug, Clone)]
struct State {
    poses: Vec<CameraPose>,
    tms: Vec<TimeModel>,
    segments: Vec<Spline3>,
}

struct Layout {
    segment_offset: Vec<usize>,
    total: usize,
}

impl Layout {
    fn new(n_cameras: usize, segments: &[Spline3]) -> Self {
        let mut offset = CAMERA_PARAMS * n_cameras;
        let mut segment_offset = Vec::with_capacity(segments.len());
        for s in segments {
            segment_offset.push(offset);
            offset += 3 * s.coefficients().len();
        }
        Self {
            segment_offset,
            total: offset,
        }
    }

    fn coeff(&self, segment: usize, k: usize, axis: usize) -> usize {
        self.segment_offset[segment] + 3 * k + axis
    }
}

/// Prior sample structure of one segment: positions as control-point combos.
struct PriorSamples {
    segment: usize,
    velocities: Vec<CoeffCombo>,
}

fn position_combo(seg: &Spline3, t: f64) -> CoeffCombo {
    let b = seg.basis(t);
    (0..4).map(|m| (b.first + m, b.values[0][m])).collect()
}

fn combo_diff(a: &CoeffCombo, b: &CoeffCombo, scale: f64) -> CoeffCombo {
    let mut out: CoeffCombo = Vec::with_capacity(a.len() + b.len());
    for &(k, w) in a {
        out.push((k, w * scale));
    }
    for &(k, w) in b {
        match out.iter_mut().find(|(j, _)| *j == k) {
            Some(e) => e.1 -= w * scale,
            None => out.push((k, -w * scale)),
        }
    }
    out
}

fn combo_eval(c: &CoeffCombo, seg: &Spline3) -> Vector3<f64> {
    c.iter().map(|&(k, w)| seg.coefficients()[k] * w).sum()
}

fn prior_samples(segments: &[Spline3]) -> Vec<PriorSamples> {
    segments
        .iter()
        .enumerate()
        .map(|(si, seg)| {
            let times = prior_sample_times(seg);
            let pos: Vec<_> = times.iter().map(|&t| position_combo(seg, t)).collect();
            let velocities = times
                .windows(2)
                .zip(pos.windows(2))
                .map(|(t, p)| combo_diff(&p[1], &p[0], 1.0 / (t[1] - t[0])))
                .collect();
            PriorSamples { segment: si, velocities }
        })
        .collect()
}

fn huber(s: f64, delta: f64) -> (f64, f64) {
    // (ρ(s), ρ'(s)) with s the squared residual norm
    if s <= delta * delta {
        (s, 1.0)
    } else {
        let r = s.sqrt();
        (2.0 * delta * r - delta * delta, delta / r)
    }
}

fn smooth_l1(s: f64, eps: f64) -> (f64, f64) {
    let q = (s + eps * eps).sqrt();
    (q - eps, 0.5 / q)
}

/// Pixel residual and its Jacobian for one observation.
struct ReprojLinearization {
    residual: Vector2<f64>,
    rows: [Row; 2],
}

fn reprojection(
    state: &State,
    cam: &BACamera,
    ci: usize,
    seg_idx: usize,
    layout: &Layout,
    d: &Detection2D,
    jacobian: bool,
) -> Option<ReprojLinearization> {
    let pose = &state.poses[ci];
    let tm = &state.tms[ci];
    let seg = &state.segments[seg_idx];
    let t = tm.detection_time(d);
    let b = seg.basis(t);
    let mut x = Vector3::zeros();
    let mut xdot = Vector3::zeros();
    for m in 0..4 {
        x += seg.coefficients()[b.first + m] * b.values[0][m];
        xdot += seg.coefficients()[b.first + m] * b.values[1][m];
    }
    let xc = pose.to_camera(&x);
    if !(xc.z > 0.0) {
        return None;
    }
    let f = cam.focal;
    let proj = Vector2::new(xc.x / xc.z, xc.y / xc.z);
    let residual = (d.normalized - proj) * f;
    if !jacobian {
        return Some(ReprojLinearization {
            residual,
            rows: [Vec::new(), Vec::new()],
        });
    }
    let iz = 1.0 / xc.z;
    let p = Matrix2x3::new(iz, 0.0, -xc.x * iz * iz, 0.0, iz, -xc.y * iz * iz);
    let pr = p * pose.rotation;
    let d_x = -pr * f; // ∂r/∂X
    let d_t = d_x * xdot;
    let d_c = pr * f;
    let d_w = p * skew(&xc) * f;
    let base = CAMERA_PARAMS * ci;
    let mut rows: [Row; 2] = [Vec::with_capacity(21), Vec::with_capacity(21)];
    for (r, row) in rows.iter_mut().enumerate() {
        for a in 0..3 {
            row.push((base + a, d_w[(r, a)]));
            row.push((base + 3 + a, d_c[(r, a)]));
        }
        row.push((base + ALPHA, d_t[r] * d.frame_index as f64));
        row.push((base + BETA, d_t[r]));
        row.push((base + READOUT, d_t[r] * d.row()));
        for m in 0..4 {
            for a in 0..3 {
                row.push((layout.coeff(seg_idx, b.first + m, a), d_x[(r, a)] * b.values[0][m]));
            }
        }
    }
    Some(ReprojLinearization { residual, rows })
}

/// Observation bound to the segment it is evaluated against.
#[derive(Debug, Clone, Copy)]
struct Binding {
    obs: usize,
    segment: usize,
}

struct Solver<'a> {
    cameras: &'a [BACamera],
    observations: &'a [BAObservation],
    options: BAOptions,
    layout: Layout,
    priors: Vec<PriorSamples>,
    active: Vec<Binding>,
    lambda: f64,
    force_eps: f64,
    /// Index into the free-parameter vector, per parameter.
    free: Vec<Option<usize>>,
    n_free: usize,
}

struct Costs {
    reprojection: f64,
    prior: f64,
    invalid: bool,
}

impl Costs {
    fn total(&self) -> f64 {
        if self.invalid {
            f64::INFINITY
        } else {
            self.reprojection + self.prior
        }
    }
}

impl Solver<'_> {
    fn prior_terms(&self, state: &State) -> Vec<(usize, usize, Vector3<f64>, CoeffCombo)> {
        // (segment, index, value, combo) of each prior residual vector before weighting
        let mut out = Vec::new();
        for ps in &self.priors {
            let seg = &state.segments[ps.segment];
            match self.options.prior {
                PriorKind::None => {}
                PriorKind::Kinetic => {
                    for (m, v) in ps.velocities.iter().enumerate() {
                        out.push((ps.segment, m, combo_eval(v, seg), v.clone()));
                    }
                }
                PriorKind::Force | PriorKind::ForceSquared => {
                    for (m, w) in ps.velocities.windows(2).enumerate() {
                        let c = combo_diff(&w[1], &w[0], 1.0);
                        out.push((ps.segment, m, combo_eval(&c, seg), c));
                    }
                }
            }
        }
        out
    }

    /// Unweighted prior energy `e_m`.
    fn prior_energy(&self, state: &State) -> f64 {
        self.prior_terms(state)
            .iter()
            .map(|(_, _, v, _)| match self.options.prior {
                PriorKind::None => 0.0,
                PriorKind::Kinetic | PriorKind::ForceSquared => v.norm_squared(),
                PriorKind::Force => smooth_l1(v.norm_squared(), self.force_eps).0,
            })
            .sum()
    }

    fn costs(&self, state: &State) -> Costs {
        let mut repro = 0.0;
        let mut invalid = false;
        for b in &self.active {
            let o = &self.observations[b.obs];
            match reprojection(state, &self.cameras[o.camera], o.camera, b.segment, &self.layout, &o.detection, false) {
                Some(l) => repro += 0.5 * huber(l.residual.norm_squared(), self.options.huber_px).0,
                None => invalid = true,
            }
        }
        let prior = if self.lambda > 0.0 {
            self.lambda * self.prior_energy(state)
        } else {
            0.0
        };
        Costs {
            reprojection: repro,
            prior,
            invalid,
        }
    }

    /// Gauss–Newton system over all parameters at `state` with IRLS weights.
    fn linearize_full(&self, state: &State) -> (DMatrix<f64>, DVector<f64>) {
        let n = self.layout.total;
        let mut h = DMatrix::zeros(n, n);
        let mut g = DVector::zeros(n);
        let mut accumulate = |row: &Row, r: f64, w: f64| {
            for &(i, vi) in row {
                g[i] += w * vi * r;
                for &(j, vj) in row {
                    h[(i, j)] += w * vi * vj;
                }
            }
        };
        for b in &self.active {
            let o = &self.observations[b.obs];
            let Some(l) = reprojection(state, &self.cameras[o.camera], o.camera, b.segment, &self.layout, &o.detection, true)
            else {
                continue;
            };
            let w = huber(l.residual.norm_squared(), self.options.huber_px).1;
            for r in 0..2 {
                accumulate(&l.rows[r], l.residual[r], w);
            }
        }
        if self.lambda > 0.0 {
            for (seg, _, v, combo) in self.prior_terms(state) {
                let w = 2.0
                    * self.lambda
                    * match self.options.prior {
                        PriorKind::Force => smooth_l1(v.norm_squared(), self.force_eps).1,
                        _ => 1.0,
                    };
                for axis in 0..3 {
                    let row: Row = combo.iter().map(|&(k, c)| (self.layout.coeff(seg, k, axis), c)).collect();
                    accumulate(&row, v[axis], w);
                }
            }
        }
        (h, g)
    }

    fn reduce(&self, h: &DMatrix<f64>, g: &DVector<f64>) -> (DMatrix<f64>, DVector<f64>) {
        let idx: Vec<usize> = (0..self.layout.total).filter(|&i| self.free[i].is_some()).collect();
        let hr = DMatrix::from_fn(idx.len(), idx.len(), |a, b| h[(idx[a], idx[b])]);
        let gr = DVector::from_fn(idx.len(), |a, _| g[idx[a]]);
        (hr, gr)
    }

    fn apply(&self, state: &State, step: &DVector<f64>) -> State {
        let get = |p: usize| self.free[p].map_or(0.0, |i| step[i]);
        let mut next = state.clone();
        for (ci, cam) in self.cameras.iter().enumerate() {
            let base = CAMERA_PARAMS * ci;
            let w = Vector3::new(get(base), get(base + 1), get(base + 2));
            let dc = Vector3::new(get(base + 3), get(base + 4), get(base + 5));
            let pose = &mut next.poses[ci];
            pose.rotation = so3_exp(&w) * pose.rotation;
            pose.center += dc;
            let tm = &mut next.tms[ci];
            tm.alpha += get(base + ALPHA);
            tm.beta += get(base + BETA);
            tm.rs_readout += get(base + READOUT);
            let bound = tm.alpha.abs() / cam.image_height;
            tm.rs_readout = tm.rs_readout.clamp(-bound, bound);
        }
        for (si, seg) in next.segments.iter_mut().enumerate() {
            let coeffs: Vec<Vector3<f64>> = seg
                .coefficients()
                .iter()
                .enumerate()
                .map(|(k, c)| {
                    c + Vector3::new(
                        get(self.layout.coeff(si, k, 0)),
                        get(self.layout.coeff(si, k, 1)),
                        get(self.layout.coeff(si, k, 2)),
                    )
                })
                .collect();
            seg.set_coefficients(coeffs);
        }
        next
    }

    fn run(&self, mut state: State, report: &mut BAReport) -> Result<State, BAError> {
        let mut cost = self.costs(&state).total();
        report.cost_trace.push(cost);
        let mut mu = -1.0;
        let mut nu = 2.0;
        for _ in 0..self.options.max_iterations {
            report.iterations += 1;
            let (h_full, g_full) = self.linearize_full(&state);
            let (mut h, mut g) = self.reduce(&h_full, &g_full);
            // readouts resting on their bound with the descent pointing out
            for (ci, cam) in self.cameras.iter().enumerate() {
                let Some(i) = self.free[CAMERA_PARAMS * ci + READOUT] else { continue };
                let tm = &state.tms[ci];
                let bound = tm.alpha.abs() / cam.image_height;
                if tm.rs_readout.abs() >= bound * (1.0 - 1e-9) && -g[i] * tm.rs_readout > 0.0 {
                    h.row_mut(i).fill(0.0);
                    h.column_mut(i).fill(0.0);
                    h[(i, i)] = 1.0;
                    g[i] = 0.0;
                }
            }
            if g.len() == 0 || g.amax() < self.options.gradient_tolerance {
                report.converged = true;
                return Ok(state);
            }
            let max_diag = h.diagonal().max();
            if mu < 0.0 {
                mu = 1e-4;
            }
            let mut accepted = false;
            while nu < 1e15 {
                let mut a = h.clone();
                for d in 0..a.nrows() {
                    a[(d, d)] += mu * h[(d, d)].max(1e-12 * max_diag);
                }
                let Some(chol) = a.cholesky() else {
                    mu *= nu;
                    nu *= 2.0;
                    continue;
                };
                let step = chol.solve(&-&g);
                let candidate = self.apply(&state, &step);
                let new_cost = self.costs(&candidate).total();
                let predicted = -(step.dot(&g) + 0.5 * step.dot(&(&h * &step)));
                let rho = if predicted > 0.0 { (cost - new_cost) / predicted } else { -1.0 };
                if new_cost.is_finite() && new_cost <= cost && rho > 0.0 {
                    let rel = (cost - new_cost) / cost.max(f64::MIN_POSITIVE);
                    state = candidate;
                    cost = new_cost;
                    report.cost_trace.push(cost);
                    mu *= (1.0f64 / 3.0).max(1.0 - (2.0 * rho - 1.0).powi(3));
                    nu = 2.0;
                    accepted = true;
                    if rel < self.options.relative_cost_tolerance || step.amax() < self.options.step_tolerance {
                        report.converged = true;
                        return Ok(state);
                    }
                    break;
                }
                mu *= nu;
                nu *= 2.0;
            }
            if !accepted {
                // no decrease possible at machine precision
                report.converged = true;
                return Ok(state);
            }
        }
        Ok(state)
    }
}

fn parameter_name(p: usize, n_cameras: usize) -> String {
    if p < CAMERA_PARAMS * n_cameras {
        let names = ["rx", "ry", "rz", "cx", "cy", "cz", "alpha", "beta", "readout"];
        format!("camera {} {}", p / CAMERA_PARAMS, names[p % CAMERA_PARAMS])
    } else {
        format!("trajectory parameter {p}")
    }
}

fn bind(state: &State, observations: &[BAObservation]) -> (Vec<Binding>, usize) {
    let mut out = Vec::new();
    let mut uncovered = 0;
    for (i, o) in observations.iter().enumerate() {
        let t = state.tms[o.camera].detection_time(&o.detection);
        let idx = state.segments.partition_point(|s| s.t_max() < t);
        if idx < state.segments.len() && state.segments[idx].contains(t) {
            out.push(Binding { obs: i, segment: idx });
        } else {
            uncovered += 1;
        }
    }
    (out, uncovered)
}

fn pixel_residuals(state: &State, problem: &BAProblem, bound: &[Binding]) -> Vec<f64> {
    let layout = Layout::new(problem.cameras.len(), &state.segments);
    bound
        .iter()
        .map(|b| {
            let o = &problem.observations[b.obs];
            reprojection(state, &problem.cameras[o.camera], o.camera, b.segment, &layout, &o.detection, false)
                .map_or(f64::INFINITY, |l| l.residual.norm())
        })
        .collect()
}

fn gate(bound: &[Binding], residuals: &[f64], floor: f64) -> Vec<Binding> {
    let mut finite: Vec<f64> = residuals.iter().copied().filter(|r| r.is_finite()).collect();
    if finite.is_empty() {
        return Vec::new();
    }
    finite.sort_by(f64::total_cmp);
    let median = finite[finite.len() / 2];
    let limit = floor.max(3.0 * 1.4826 * median);
    bound
        .iter()
        .zip(residuals)
        .filter(|(_, &r)| r <= limit)
        .map(|(b, _)| *b)
        .collect()
}

impl BAProblem {
    fn state(&self) -> State {
        State {
            poses: self.cameras.iter().map(|c| c.pose).collect(),
            tms: self.cameras.iter().map(|c| c.time_model).collect(),
            segments: self.segments.clone(),
        }
    }

    fn store(&mut self, state: State) {
        for (c, (p, t)) in self.cameras.iter_mut().zip(state.poses.into_iter().zip(state.tms)) {
            c.pose = p;
            c.time_model = t;
        }
        self.segments = state.segments;
    }

    fn fixed_mask(&self) -> Vec<bool> {
        let layout = Layout::new(self.cameras.len(), &self.segments);
        let mut fixed = vec![false; layout.total];
        for (ci, c) in self.cameras.iter().enumerate() {
            let base = CAMERA_PARAMS * ci;
            if c.fixed.pose {
                fixed[base..base + 6].iter_mut().for_each(|f| *f = true);
            }
            if let Some(axis) = c.fixed.center_axis {
                fixed[base + 3 + axis] = true;
            }
            fixed[base + ALPHA] |= c.fixed.alpha;
            fixed[base + BETA] |= c.fixed.beta;
            fixed[base + READOUT] |= c.fixed.readout;
        }
        fixed
    }

    fn solver(&self, state: &State, active: Vec<Binding>, lambda: f64, force_eps: f64) -> Result<Solver<'_>, BAError> {
        let layout = Layout::new(self.cameras.len(), &self.segments);
        let fixed = self.fixed_mask();
        let mut solver = Solver {
            cameras: &self.cameras,
            observations: &self.observations,
            options: self.options,
            layout,
            priors: prior_samples(&state.segments),
            active,
            lambda,
            force_eps,
            free: Vec::new(),
            n_free: 0,
        };
        // parameters no residual touches: spline control points are frozen
        // (they cannot change any cost), camera parameters are an error
        let (h, _) = solver.linearize_full(state);
        let mut free = vec![None; solver.layout.total];
        let mut n = 0;
        for p in 0..solver.layout.total {
            if fixed[p] {
                continue;
            }
            if h[(p, p)] <= 0.0 {
                if p < CAMERA_PARAMS * self.cameras.len() {
                    return Err(BAError::RankDeficient(parameter_name(p, self.cameras.len())));
                }
                continue;
            }
            free[p] = Some(n);
            n += 1;
        }
        solver.free = free;
        solver.n_free = n;
        Ok(solver)
    }

    /// Refines all free parameters in place.
    pub fn solve(&mut self) -> Result<BAReport, BAError> {
        let mut state = self.state();
        let (bound, uncovered) = bind(&state, &self.observations);
        if bound.is_empty() {
            return Err(BAError::NoObservations);
        }
        let residuals = pixel_residuals(&state, self, &bound);
        let mut active = gate(&bound, &residuals, self.options.gate_floor_px);
        if active.is_empty() {
            return Err(BAError::NoObservations);
        }

        // the prior weight and force smoothing are fixed from the start state
        let probe = self.solver(&state, active.clone(), 0.0, 1.0)?;
        let force_eps = {
            let terms = Solver {
                options: BAOptions {
                    prior: PriorKind::ForceSquared,
                    ..self.options
                },
                ..probe
            };
            let t = terms.prior_terms(&state);
            let ms = t.iter().map(|(_, _, v, _)| v.norm_squared()).sum::<f64>() / t.len().max(1) as f64;
            (0.01 * ms.sqrt()).max(1e-12)
        };
        let lambda = match (self.options.prior, self.options.prior_weight) {
            (PriorKind::None, _) => 0.0,
            (_, Some(w)) => w,
            (_, None) => {
                let s = self.solver(&state, active.clone(), 1.0, force_eps)?;
                let c = s.costs(&state);
                let e_m = s.prior_energy(&state);
                if e_m > 0.0 {
                    self.options.auto_prior_fraction * c.reprojection / e_m
                } else {
                    0.0
                }
            }
        };

        let mut report = BAReport {
            prior_weight: lambda,
            uncovered,
            ..Default::default()
        };
        for round in 0..self.options.gate_rounds.max(1) {
            let solver = self.solver(&state, active.clone(), lambda, force_eps)?;
            if round == 0 {
                report.initial_cost = solver.costs(&state).total();
            }
            report.converged = false;
            state = solver.run(state, &mut report)?;
            // re-gating only removes terms
            let residuals = pixel_residuals(&state, self, &active);
            let next = gate(&active, &residuals, self.options.gate_floor_px);
            if next.len() == active.len() || next.is_empty() || round + 1 == self.options.gate_rounds.max(1) {
                break;
            }
            active = next;
        }

        let solver = self.solver(&state, active.clone(), lambda, force_eps)?;
        let costs = solver.costs(&state);
        report.final_cost = costs.total();
        report.reprojection_cost = costs.reprojection;
        report.prior_energy = solver.prior_energy(&state);
        report.used_observations = active.len();
        report.gated_out = bound.len() - active.len();
        let mut sq = 0.0;
        for b in &active {
            let o = &self.observations[b.obs];
            let t = state.tms[o.camera].detection_time(&o.detection);
            if !state.segments[b.segment].contains(t) {
                report.dropped_out_of_range += 1;
            }
            if let Some(l) = reprojection(&state, &self.cameras[o.camera], o.camera, b.segment, &solver.layout, &o.detection, false) {
                sq += l.residual.norm_squared();
            }
        }
        report.rms_px = (sq / active.len().max(1) as f64).sqrt();
        drop(solver);
        self.store(state);
        Ok(report)
    }

    /// Pixel residual norms of every observation covered by the trajectory,
    /// in observation order; `None` for uncovered ones.
    pub fn residuals_px(&self) -> Vec<Option<f64>> {
        let state = self.state();
        let (bound, _) = bind(&state, &self.observations);
        let values = pixel_residuals(&state, self, &bound);
        let mut out = vec![None; self.observations.len()];
        for (b, v) in bound.iter().zip(values) {
            out[b.obs] = Some(v);
        }
        out
    }

    /// Largest row-normalized deviation between the analytic Jacobians and
    /// central differences with step `h`, over all residual types.
    pub fn gradient_check(&self, h: f64) -> f64 {
        let state = self.state();
        let (bound, _) = bind(&state, &self.observations);
        let mut worst: f64 = 0.0;
        let prior = match self.options.prior {
            PriorKind::None => PriorKind::Kinetic,
            p => p,
        };
        let Ok(mut solver) = self.solver(&state, bound.clone(), 1.0, 1.0) else {
            return f64::INFINITY;
        };
        solver.options.prior = prior;
        solver.free = (0..solver.layout.total).map(Some).collect();
        solver.n_free = solver.layout.total;
        let n = solver.layout.total;

        // analytic rows, then numeric ones built from perturbed states
        let eval_rows = |s: &State, with_jac: bool| -> Vec<(f64, Row)> {
            let mut rows = Vec::new();
            for b in &bound {
                let o = &self.observations[b.obs];
                if let Some(l) = reprojection(s, &self.cameras[o.camera], o.camera, b.segment, &solver.layout, &o.detection, with_jac) {
                    rows.push((l.residual[0], l.rows[0].clone()));
                    rows.push((l.residual[1], l.rows[1].clone()));
                } else {
                    rows.push((f64::NAN, Vec::new()));
                    rows.push((f64::NAN, Vec::new()));
                }
            }
            for (seg, _, v, combo) in solver.prior_terms(s) {
                for axis in 0..3 {
                    let row: Row = if with_jac {
                        combo.iter().map(|&(k, c)| (solver.layout.coeff(seg, k, axis), c)).collect()
                    } else {
                        Vec::new()
                    };
                    rows.push((v[axis], row));
                }
            }
            rows
        };
        let analytic = eval_rows(&state, true);
        let mut numeric = vec![vec![0.0; n]; analytic.len()];
        for p in 0..n {
            let mut step = DVector::zeros(n);
            step[p] = h;
            let plus = eval_rows(&solver.apply_unclamped(&state, &step), false);
            step[p] = -h;
            let minus = eval_rows(&solver.apply_unclamped(&state, &step), false);
            for (r, (a, b)) in plus.iter().zip(&minus).enumerate() {
                numeric[r][p] = (a.0 - b.0) / (2.0 * h);
            }
        }
        for (r, (_, row)) in analytic.iter().enumerate() {
            let mut dense = vec![0.0; n];
            for &(i, v) in row {
                dense[i] += v;
            }
            let scale = numeric[r].iter().chain(dense.iter()).fold(0.0f64, |m, v| m.max(v.abs()));
            if scale < 1e-12 {
                continue;
            }
            let dev = dense
                .iter()
                .zip(&numeric[r])
                .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            worst = worst.max(dev / scale);
        }
        worst
    }
}

impl Solver<'_> {
    fn apply_unclamped(&self, state: &State, step: &DVector<f64>) -> State {
        let mut next = state.clone();
        for ci in 0..self.cameras.len() {
            let base = CAMERA_PARAMS * ci;
            let w = Vector3::new(step[base], step[base + 1], step[base + 2]);
            next.poses[ci].rotation = so3_exp(&w) * next.poses[ci].rotation;
            next.poses[ci].center += Vector3::new(step[base + 3], step[base + 4], step[base + 5]);
            next.tms[ci].alpha += step[base + ALPHA];
            next.tms[ci].beta += step[base + BETA];
            next.tms[ci].rs_readout += step[base + READOUT];
        }
        for (si, seg) in next.segments.iter_mut().enumerate() {
            let coeffs = seg
                .coefficients()
                .iter()
                .enumerate()
                .map(|(k, c)| {
                    c + Vector3::new(
                        step[self.layout.coeff(si, k, 0)],
                        step[self.layout.coeff(si, k, 1)],
                        step[self.layout.coeff(si, k, 2)],
                    )
                })
                .collect();
            seg.set_coefficients(coeffs);
        }
        next
    }
}
